"""Binary formats for patch-embedding grids (``.egr``) and label masks (``.lmk``),
plus the JSON sequence manifest.

Layout (all integers little-endian)::

    .egr   b"VSEG" | u32 version=1 | u32 H | u32 W | u32 d | u8 normalized | f32[H*W*d]
    .lmk   b"VMSK" | u32 version=1 | u32 H | u32 W | u16[H*W]

Payloads are row-major, patch-major then channel.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    BadVersion,
    DimensionCapExceeded,
    DimensionMismatch,
    IoFailure,
    ManifestError,
    NotNormalized,
    ZeroVector,
)

GRID_MAGIC = b"VSEG"
MASK_MAGIC = b"VMSK"
VERSION = 1
DEFAULT_CAP = (1024, 1024, 4096)

_GRID_HEADER = struct.Struct("<4sIIIIB")
_MASK_HEADER = struct.Struct("<4sIII")

NORM_TOL = 1e-5
ZERO_NORM = 1e-12


@dataclass(frozen=True, eq=False)
class EmbeddingGrid:
    """H x W grid of d-dimensional patch embeddings for one frame.

    ``data`` has shape (H, W, d) and dtype float32. Construct through
    :meth:`from_array` to get validation and normalization.
    """

    data: np.ndarray
    normalized: bool = True

    @classmethod
    def from_array(cls, array, normalize: bool = True) -> "EmbeddingGrid":
        arr = np.ascontiguousarray(array, dtype=np.float32)
        if arr.ndim != 3:
            raise DimensionMismatch(f"expected (H, W, d) array, got shape {arr.shape}")
        norms = np.linalg.norm(arr.astype(np.float64), axis=-1)
        if arr.size and norms.min() < ZERO_NORM:
            bad = np.argwhere(norms < ZERO_NORM)[0]
            raise ZeroVector(f"patch {tuple(int(v) for v in bad)} has norm {norms.min():.3g}")
        if normalize:
            arr = (arr / np.maximum(norms, ZERO_NORM)[..., None]).astype(np.float32)
        else:
            _check_unit(arr)
        arr.setflags(write=False)
        return cls(arr, True)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    def flat(self) -> np.ndarray:
        """(H*W, d) view, row-major over patches."""
        return self.data.reshape(-1, self.dim)


@dataclass(frozen=True, eq=False)
class LabelMask:
    """H x W uint16 label map; 0 is background, k > 0 is an object id."""

    labels: np.ndarray

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise DimensionMismatch(f"label mask must be 2-D, got {self.labels.shape}")

    @classmethod
    def from_array(cls, array) -> "LabelMask":
        arr = np.asarray(array)
        if arr.size and (arr.min() < 0 or arr.max() > np.iinfo(np.uint16).max):
            raise DimensionMismatch("label values must fit in uint16")
        return cls(np.ascontiguousarray(arr, dtype=np.uint16))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def object_ids(self) -> list[int]:
        return [int(v) for v in np.unique(self.labels) if v != 0]

    def binary(self, object_id: int) -> np.ndarray:
        return self.labels == object_id


def _check_unit(arr: np.ndarray) -> None:
    norms = np.linalg.norm(arr.astype(np.float64), axis=-1)
    if arr.size and np.abs(norms - 1.0).max() > NORM_TOL:
        raise NotNormalized(f"patch norms deviate from 1 by up to {np.abs(norms - 1.0).max():.3g}")


def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc


def _write_bytes(path, blob: bytes) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_embedding_grid(path, cap: tuple[int, int, int] = DEFAULT_CAP) -> EmbeddingGrid:
    """Read an ``.egr`` file.

    Vectors in files whose ``normalized`` flag is unset are divided by
    ``max(norm, 1e-12)``; flagged files are checked, not rescaled, so a
    write/read round trip is bitwise exact.
    """
    blob = _read_bytes(path)
    if len(blob) < _GRID_HEADER.size or blob[:4] != GRID_MAGIC:
        raise BadMagic(f"{path}: not an embedding grid file")
    _, version, h, w, d, flag = _GRID_HEADER.unpack_from(blob)
    if version != VERSION:
        raise BadVersion(f"{path}: unsupported version {version}")
    if h > cap[0] or w > cap[1] or d > cap[2]:
        raise DimensionCapExceeded(f"{path}: declared {h}x{w}x{d} exceeds cap {cap}")
    payload = len(blob) - _GRID_HEADER.size
    expected = h * w * d * 4
    if payload != expected:
        raise DimensionMismatch(f"{path}: header declares {h}x{w}x{d} ({expected} bytes), payload has {payload}")
    arr = np.frombuffer(blob, dtype="<f4", offset=_GRID_HEADER.size).reshape(h, w, d)
    return EmbeddingGrid.from_array(arr.astype(np.float32), normalize=not flag)


def write_embedding_grid(grid: EmbeddingGrid, path) -> None:
    h, w, d = grid.data.shape
    header = _GRID_HEADER.pack(GRID_MAGIC, VERSION, h, w, d, int(bool(grid.normalized)))
    _write_bytes(path, header + grid.data.astype("<f4", copy=False).tobytes())


def read_label_mask(path, cap: tuple[int, int] = DEFAULT_CAP[:2]) -> LabelMask:
    blob = _read_bytes(path)
    if len(blob) < _MASK_HEADER.size or blob[:4] != MASK_MAGIC:
        raise BadMagic(f"{path}: not a label mask file")
    _, version, h, w = _MASK_HEADER.unpack_from(blob)
    if version != VERSION:
        raise BadVersion(f"{path}: unsupported version {version}")
    if h > cap[0] or w > cap[1]:
        raise DimensionCapExceeded(f"{path}: declared {h}x{w} exceeds cap {cap}")
    payload = len(blob) - _MASK_HEADER.size
    if payload != h * w * 2:
        raise DimensionMismatch(f"{path}: header declares {h}x{w} ({h * w * 2} bytes), payload has {payload}")
    arr = np.frombuffer(blob, dtype="<u2", offset=_MASK_HEADER.size).reshape(h, w)
    return LabelMask(arr.astype(np.uint16))


def write_label_mask(mask: LabelMask | np.ndarray, path) -> None:
    if not isinstance(mask, LabelMask):
        mask = LabelMask.from_array(mask)
    h, w = mask.shape
    _write_bytes(path, _MASK_HEADER.pack(MASK_MAGIC, VERSION, h, w) + mask.labels.astype("<u2").tobytes())


# -- manifest --------------------------------------------------------------

@dataclass
class FrameEntry:
    embedding: str
    mask: str | None = None


@dataclass
class SequenceManifest:
    frames: list[FrameEntry]
    fps: float = 0.0
    name: str = ""
    root: Path = field(default_factory=Path)

    def embedding_path(self, t: int) -> Path:
        return self.root / self.frames[t].embedding

    def mask_path(self, t: int) -> Path | None:
        m = self.frames[t].mask
        return None if m is None else self.root / m

    def to_json(self) -> dict:
        frames = []
        for f in self.frames:
            entry = {"embedding": f.embedding}
            if f.mask is not None:
                entry["mask"] = f.mask
            frames.append(entry)
        return {"name": self.name, "fps": self.fps, "frames": frames}


def read_manifest(path) -> SequenceManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    frames = doc.get("frames") if isinstance(doc, dict) else None
    if not isinstance(frames, list) or not frames:
        raise ManifestError(f"{path}: 'frames' must be a non-empty list")
    entries = []
    for i, f in enumerate(frames):
        if not isinstance(f, dict) or not isinstance(f.get("embedding"), str):
            raise ManifestError(f"{path}: frames[{i}].embedding missing or not a string")
        mask = f.get("mask")
        if mask is not None and not isinstance(mask, str):
            raise ManifestError(f"{path}: frames[{i}].mask must be a string")
        entries.append(FrameEntry(f["embedding"], mask))
    try:
        fps = float(doc.get("fps", 0.0))
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"{path}: fps must be a number") from exc
    return SequenceManifest(entries, fps, str(doc.get("name", "")), path.parent)


def write_manifest(manifest: SequenceManifest, path) -> None:
    try:
        Path(path).write_text(json.dumps(manifest.to_json(), indent=2) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write manifest {path}: {exc}") from exc


def load_sequence(manifest: SequenceManifest) -> tuple[list[EmbeddingGrid], list[LabelMask | None]]:
    """Read every frame of a manifest, enforcing identical H/W/d across frames."""
    grids, masks = [], []
    for t in range(len(manifest.frames)):
        g = read_embedding_grid(manifest.embedding_path(t))
        if grids and g.data.shape != grids[0].data.shape:
            raise DimensionMismatch(
                f"frame {t} has shape {g.data.shape}, frame 0 has {grids[0].data.shape}"
            )
        mp = manifest.mask_path(t)
        m = read_label_mask(mp) if mp is not None else None
        if m is not None and m.shape != g.shape:
            raise DimensionMismatch(f"frame {t}: mask {m.shape} does not match grid {g.shape}")
        grids.append(g)
        masks.append(m)
    return grids, masks


def save_sequence(out_dir, grids, masks=None, name: str = "", fps: float = 0.0) -> SequenceManifest:
    """Write grids (and optional masks) plus ``manifest.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for t, g in enumerate(grids):
        emb = f"frame_{t:05d}.egr"
        write_embedding_grid(g, out_dir / emb)
        mname = None
        if masks is not None and masks[t] is not None:
            mname = f"frame_{t:05d}.lmk"
            write_label_mask(masks[t], out_dir / mname)
        entries.append(FrameEntry(emb, mname))
    manifest = SequenceManifest(entries, fps, name, out_dir)
    write_manifest(manifest, out_dir / "manifest.json")
    return manifest
