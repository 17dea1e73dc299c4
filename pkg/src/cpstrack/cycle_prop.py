"""Cycle-pair extraction, object assignment and point-prompt selection."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimMismatch, NoPairs
from .sim_kernel import argmax_both, cosine_similarity_matrix, pairwise_euclidean, row_argmax, top_k_min

DEFAULT_K = 1
MAX_K = 5


@dataclass(frozen=True)
class CyclePair:
    """Reference patch ``ref_index`` and current patch ``cur_index`` that are
    each other's most similar patch."""

    ref_index: int
    cur_index: int
    similarity: float


@dataclass(frozen=True)
class PositionPrompt:
    object_id: int
    points: tuple[tuple[int, int], ...]
    k_config: int


@dataclass
class Propagation:
    prompts: dict[int, PositionPrompt]
    misses: list[int]
    pairs: list[CyclePair]
    by_object: dict[int, list[CyclePair]] = field(default_factory=dict)
    background: list[CyclePair] = field(default_factory=list)


def mutual_pairs(S) -> list[CyclePair]:
    """All (i, j) with row_argmax(S)[i] == j and col_argmax(S)[j] == i."""
    S = np.asarray(S)
    best_col, best_row = argmax_both(S)
    rows = np.flatnonzero(best_row[best_col] == np.arange(S.shape[0]))
    return [CyclePair(int(i), int(best_col[i]), float(S[i, best_col[i]])) for i in rows]


def max_similarity_pairs(S) -> list[CyclePair]:
    """One pair per reference patch: its row argmax, with no backward check.

    This is the plain "most similar point" propagation used as the
    ablation baseline for mutual pairs.
    """
    S = np.asarray(S)
    best_col = row_argmax(S)
    return [CyclePair(i, int(j), float(S[i, j])) for i, j in enumerate(best_col)]


def assign_pairs_to_objects(pairs, ref_labels) -> tuple[dict[int, list[CyclePair]], list[CyclePair]]:
    """Split pairs by the object label of their reference patch.

    Returns ``(by_object, background)``; label 0 is background.
    """
    labels = np.asarray(ref_labels).ravel()
    by_object: dict[int, list[CyclePair]] = {}
    background: list[CyclePair] = []
    for p in pairs:
        if not 0 <= p.ref_index < labels.size:
            raise DimMismatch(f"pair references patch {p.ref_index}, only {labels.size} labels")
        obj = int(labels[p.ref_index])
        if obj == 0:
            background.append(p)
        else:
            by_object.setdefault(obj, []).append(p)
    return by_object, background


def centrality(points) -> np.ndarray:
    """Mean distance of each point to all the others (0 for a single point)."""
    pts = np.asarray(points).reshape(-1, 2)
    if len(pts) < 2:
        return np.zeros(len(pts))
    return pairwise_euclidean(pts).sum(axis=1) / (len(pts) - 1)


def select_prompt(pairs_for_object, grid_width: int, k: int = DEFAULT_K, object_id: int = 0) -> PositionPrompt:
    """Pick the ``k`` most central current-frame points among an object's pairs."""
    if not pairs_for_object:
        raise NoPairs(f"object {object_id} has no pairs in this frame")
    if k < 1:
        raise ValueError("k must be >= 1")
    ordered = sorted(pairs_for_object, key=lambda p: p.cur_index)
    cur = np.array([p.cur_index for p in ordered], dtype=np.int64)
    pts = np.stack([cur // grid_width, cur % grid_width], axis=1)
    # cur indices are sorted, so the index tie-break inside top_k_min is the cur_index tie-break
    chosen = top_k_min(centrality(pts), k)
    return PositionPrompt(object_id, tuple((int(pts[i, 0]), int(pts[i, 1])) for i in chosen), k)


def _top_similarity_prompt(pairs_for_object, grid_width, k, object_id) -> PositionPrompt:
    best: dict[int, float] = {}
    for p in pairs_for_object:
        if p.similarity > best.get(p.cur_index, -np.inf):
            best[p.cur_index] = p.similarity
    order = sorted(best, key=lambda j: (-best[j], j))[:k]
    return PositionPrompt(object_id, tuple((j // grid_width, j % grid_width) for j in order), k)


def propagate(
    ref_embeddings,
    ref_labels,
    current,
    k: int = DEFAULT_K,
    min_similarity: float = 0.0,
    mode: str = "cycle",
    workers: int | None = None,
) -> Propagation:
    """Locate every reference object in ``current`` and build its point prompt.

    ``ref_embeddings`` is (n, d) (or an EmbeddingGrid), ``ref_labels`` the
    object id of each reference patch, ``current`` an EmbeddingGrid.
    ``mode="argmax"`` swaps mutual pairs for the one-directional baseline,
    choosing the most similar points instead of the most central ones.
    Objects without any pair end up in ``misses``.
    """
    if mode not in ("cycle", "argmax"):
        raise ValueError(f"unknown propagation mode {mode!r}")
    labels = np.asarray(ref_labels).ravel()
    S = cosine_similarity_matrix(ref_embeddings, current, workers=workers)
    if S.shape[0] != labels.size:
        raise DimMismatch(f"{S.shape[0]} reference patches but {labels.size} labels")
    pairs = mutual_pairs(S) if mode == "cycle" else max_similarity_pairs(S)
    pairs = [p for p in pairs if p.similarity >= min_similarity]
    by_object, background = assign_pairs_to_objects(pairs, labels)
    width = current.width
    prompts: dict[int, PositionPrompt] = {}
    misses: list[int] = []
    for obj in sorted(int(v) for v in np.unique(labels) if v != 0):
        obj_pairs = by_object.get(obj)
        if not obj_pairs:
            misses.append(obj)
        elif mode == "cycle":
            prompts[obj] = select_prompt(obj_pairs, width, k, obj)
        else:
            prompts[obj] = _top_similarity_prompt(obj_pairs, width, k, obj)
    return Propagation(prompts, misses, pairs, by_object, background)
