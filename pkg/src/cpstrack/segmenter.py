"""Prompted segmentation at patch resolution.

:class:`Segmenter` is the decoder boundary; :class:`ToySegmenter` is the
reference implementation. It grows a 4-connected region from the prompt
points over patches whose cosine similarity to an object signature clears
a threshold ``tau``. The pair (signature, tau) is the per-object state
that is carried from frame to frame, so the same granularity is
re-selected every frame.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Protocol, Sequence

import numba as nb
import numpy as np
from scipy import ndimage

from .errors import DimMismatch, EmptyMask, OutOfBounds

_FOUR_CONN = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True, eq=False)
class ObjectState:
    signature: np.ndarray  # unit d-vector
    tau: float
    area_ema: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")

    @classmethod
    def from_mask(cls, grid, mask, margin: float = 0.05) -> "ObjectState":
        """State that re-selects ``mask`` on ``grid``.

        The signature is the normalized mean embedding inside the mask. The
        threshold sits halfway between the weakest inside patch and the
        strongest patch on the mask's outer 4-neighbour ring; with no ring,
        or no separation, it is the weakest inside similarity minus
        ``margin``.
        """
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise EmptyMask("cannot build an object state from an empty mask")
        emb = grid.data[mask].astype(np.float64)
        sig = _unit(emb.mean(axis=0))
        sim = grid.data.astype(np.float64) @ sig
        lo_in = float(sim[mask].min())
        ring = ndimage.binary_dilation(mask, _FOUR_CONN) & ~mask
        if ring.any() and float(sim[ring].max()) < lo_in:
            tau = 0.5 * (lo_in + float(sim[ring].max()))
        else:
            tau = lo_in - margin
        tau = float(np.clip(tau, 1e-3, 1.0))
        return cls(sig, tau, float(mask.sum()))


@dataclass(frozen=True, eq=False)
class MaskProposal:
    mask: np.ndarray
    quality: float
    stability: float
    object_state: ObjectState

    @property
    def area(self) -> int:
        return int(self.mask.sum())


class Segmenter(Protocol):
    def segment(self, grid, points: Sequence[tuple[int, int]], state: ObjectState | None = None) -> MaskProposal:
        ...


def _unit(v: np.ndarray) -> np.ndarray:
    return v / max(float(np.linalg.norm(v)), 1e-12)


@nb.njit(cache=True)
def _flood(sim, threshold, seeds):
    h, w = sim.shape
    mask = np.zeros((h, w), dtype=np.bool_)
    stack = np.empty(h * w, dtype=np.int64)
    top = 0
    for s in range(seeds.shape[0]):
        r, c = seeds[s, 0], seeds[s, 1]
        if sim[r, c] >= threshold and not mask[r, c]:
            mask[r, c] = True
            stack[top] = r * w + c
            top += 1
    while top > 0:
        top -= 1
        r = stack[top] // w
        c = stack[top] % w
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            rr = r + dr
            cc = c + dc
            if 0 <= rr < h and 0 <= cc < w and not mask[rr, cc] and sim[rr, cc] >= threshold:
                mask[rr, cc] = True
                stack[top] = rr * w + cc
                top += 1
    return mask


def grow_region(sim: np.ndarray, threshold: float, points) -> np.ndarray:
    """Union of 4-connected components of ``sim >= threshold`` that contain a point."""
    seeds = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    return _flood(np.ascontiguousarray(sim, dtype=np.float64), float(threshold), seeds)


def mask_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def similarity_map(grid, signature) -> np.ndarray:
    return (grid.data.astype(np.float64) @ np.asarray(signature, dtype=np.float64)).reshape(grid.shape)


def stability_score(grid, signature, tau: float, delta: float = 0.05, points=None, sim=None) -> float:
    """IoU between the regions at ``tau - delta`` and ``tau + delta``.

    With ``points`` the regions are grown from them; otherwise they are the
    plain thresholded sets. Thresholds are clamped into (0, 1].
    """
    if sim is None:
        sim = similarity_map(grid, signature)
    lo = max(tau - delta, 1e-6)
    hi = min(tau + delta, 1.0)
    if points is None:
        return mask_iou(sim >= lo, sim >= hi)
    return mask_iou(grow_region(sim, lo, points), grow_region(sim, hi, points))


@dataclass(frozen=True)
class ToySegmenter:
    default_tau: float = 0.85
    signature_keep: float = 0.7
    area_keep: float = 0.8
    stability_delta: float = 0.05

    def segment(self, grid, points, state: ObjectState | None = None) -> MaskProposal:
        pts = [(int(r), int(c)) for r, c in points]
        if not pts:
            raise OutOfBounds("at least one prompt point is required")
        h, w = grid.shape
        for r, c in pts:
            if not (0 <= r < h and 0 <= c < w):
                raise OutOfBounds(f"point ({r}, {c}) outside {h}x{w} grid")
        if state is None:
            sig = _unit(np.mean([grid.data[r, c].astype(np.float64) for r, c in pts], axis=0))
            tau = self.default_tau
            prev_area = None
        else:
            sig = np.asarray(state.signature, dtype=np.float64)
            tau = state.tau
            prev_area = state.area_ema
        sim = similarity_map(grid, sig)
        mask = grow_region(sim, tau, pts)
        area = int(mask.sum())
        if area == 0:
            raise EmptyMask(f"no prompt point clears tau={tau:.3f}")
        mean_sim = float(sim[mask].mean())
        quality = 1.0 if tau >= 1.0 else float(np.clip((mean_sim - tau) / (1.0 - tau), 0.0, 1.0))
        quality = max(quality, 1e-6)
        stability = stability_score(grid, sig, tau, self.stability_delta, pts, sim)
        mean_emb = grid.data[mask].astype(np.float64).mean(axis=0)
        new_sig = _unit(self.signature_keep * sig + (1.0 - self.signature_keep) * mean_emb)
        old_area = float(area) if prev_area is None else prev_area
        new_state = ObjectState(new_sig, tau, self.area_keep * old_area + (1.0 - self.area_keep) * area)
        return MaskProposal(mask, quality, stability, new_state)

    def segment_points(self, grid, points) -> list[MaskProposal | None]:
        """``segment(grid, [p], None)`` for each point, sharing one product.

        Scores can differ from the one-point path in the last bit. Entries are None where the point does not clear the threshold.
        """
        pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
        h, w = grid.shape
        if ((pts < 0) | (pts >= (h, w))).any():
            raise OutOfBounds(f"prompt point outside {h}x{w} grid")
        flat = grid.data.reshape(-1, grid.dim).astype(np.float64)
        sigs = flat[pts[:, 0] * w + pts[:, 1]]
        sigs /= np.maximum(np.linalg.norm(sigs, axis=1, keepdims=True), 1e-12)
        sims = (flat @ sigs.T).T.reshape(-1, h, w)
        tau = self.default_tau
        out: list[MaskProposal | None] = []
        for sig, sim, pt in zip(sigs, sims, pts):
            seed = pt.reshape(1, 2)
            mask = _flood(sim, tau, seed)
            area = int(mask.sum())
            if area == 0:
                out.append(None)
                continue
            mean_sim = float(sim[mask].mean())
            quality = 1.0 if tau >= 1.0 else float(np.clip((mean_sim - tau) / (1.0 - tau), 0.0, 1.0))
            quality = max(quality, 1e-6)
            stability = stability_score(grid, sig, tau, self.stability_delta, seed, sim)
            mean_emb = flat[mask.ravel()].mean(axis=0)
            new_sig = _unit(self.signature_keep * sig + (1.0 - self.signature_keep) * mean_emb)
            out.append(MaskProposal(mask, quality, stability, ObjectState(new_sig, tau, float(area))))
        return out


def get_segmenter(name: str = "toy", **options) -> Segmenter:
    if name == "toy":
        return ToySegmenter(**options)
    raise ValueError(f"unknown segmenter {name!r}")


def grid_points(height: int, width: int, grid_side: int = 32) -> list[tuple[int, int]]:
    """Evenly spaced prompt points, at most ``grid_side`` per axis."""
    ny, nx = min(grid_side, height), min(grid_side, width)
    rows = [int((i + 0.5) * height / ny) for i in range(ny)]
    cols = [int((j + 0.5) * width / nx) for j in range(nx)]
    return [(r, c) for r in rows for c in cols]


def mask_nms(proposals, iou_threshold: float = 0.7) -> list[MaskProposal]:
    """Greedy NMS: best quality first (then larger area, then input order)."""
    order = sorted(range(len(proposals)), key=lambda i: (-proposals[i].quality, -proposals[i].area, i))
    kept: list[MaskProposal] = []
    for i in order:
        p = proposals[i]
        if all(mask_iou(p.mask, q.mask) < iou_threshold for q in kept):
            kept.append(p)
    return kept


def grid_detect(
    grid,
    segmenter: Segmenter | None = None,
    grid_side: int = 32,
    q_min: float = 0.5,
    s_min: float = 0.8,
    nms_iou: float = 0.7,
    min_area: int = 4,
) -> list[MaskProposal]:
    """Segment from every grid point without state, filter, then deduplicate."""
    segmenter = segmenter or ToySegmenter()
    proposals = []
    seen: dict[bytes, int] = {}
    pts = grid_points(grid.height, grid.width, grid_side)
    if hasattr(segmenter, "segment_points"):
        raw = segmenter.segment_points(grid, pts)
    else:
        raw = []
        for pt in pts:
            try:
                raw.append(segmenter.segment(grid, [pt], None))
            except EmptyMask:
                raw.append(None)
    for p in raw:
        if p is None:
            continue
        if p.quality < q_min or p.stability < s_min or p.area < min_area:
            continue
        key = np.packbits(p.mask).tobytes()
        # identical masks: keep the first-best copy, NMS would drop the rest anyway
        if key in seen:
            j = seen[key]
            if p.quality > proposals[j].quality:
                proposals[j] = p
            continue
        seen[key] = len(proposals)
        proposals.append(p)
    return mask_nms(proposals, nms_iou)


def with_tau(state: ObjectState, tau: float) -> ObjectState:
    return replace(state, tau=tau)
