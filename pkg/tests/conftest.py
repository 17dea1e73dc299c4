import warnings

import numpy as np
import pytest

from cpstrack.tensor_io import EmbeddingGrid


def unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return (v / np.linalg.norm(v, axis=1, keepdims=True)).astype(np.float32)


def grid_from(arr) -> EmbeddingGrid:
    return EmbeddingGrid.from_array(np.asarray(arr, dtype=np.float64))


def blob_field(shape, blobs, dim=8, background=None):
    """Grid where each ``(r0, r1, c0, c1) -> vector`` box is painted on ``background``."""
    H, W = shape
    bg = np.zeros(dim) if background is None else np.asarray(background, dtype=float)
    if background is None:
        bg[-1] = 1.0
    field = np.broadcast_to(bg, (H, W, dim)).copy()
    for (r0, r1, c0, c1), vec in blobs.items():
        field[r0:r1, c0:c1] = vec
    return grid_from(field)


def basis(i, dim=8):
    v = np.zeros(dim)
    v[i] = 1.0
    return v


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _quiet_no_objects():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", category=UserWarning)
        yield


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion and assert it."""

    def check(name: str, ok: bool, detail: str = "") -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
