"""Tracking and segmentation metrics, plus the forward/backward cycle check.

Tracks are passed as ``{id: (T, H, W) bool array}`` dicts. Predicted tracks
are ranked by dict order unless noted.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DimMismatch
from .segmenter import mask_iou

DEFAULT_IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


def st_iou(pred, gt) -> float:
    """Spatio-temporal IoU: summed intersections over summed unions.

    Two all-empty tracks score 1.0.
    """
    p = np.asarray(pred, dtype=bool)
    g = np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise DimMismatch(f"track shapes differ: {p.shape} vs {g.shape}")
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def tracks_from_labels(label_maps, ids=None) -> dict[int, np.ndarray]:
    stack = np.stack([np.asarray(getattr(lm, "labels", lm)) for lm in label_maps])
    if ids is None:
        ids = sorted(int(v) for v in np.unique(stack) if v != 0)
    return {i: stack == i for i in ids}


def rank_by_persistence(tracks: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    """Reorder tracks: most frames present first, then lower id."""
    def key(i):
        return (-int(tracks[i].reshape(len(tracks[i]), -1).any(axis=1).sum()), i)

    return {i: tracks[i] for i in sorted(tracks, key=key)}


def ar_at_n(pred_tracks, gt_tracks, n: int, iou_thresholds=DEFAULT_IOU_THRESHOLDS) -> float:
    """Average recall of the top-``n`` predictions over IoU thresholds.

    At each threshold, predictions are taken in rank order and each claims
    the unclaimed ground-truth track it overlaps most (st_iou >= threshold).
    """
    gt_ids = list(gt_tracks)
    if not gt_ids:
        return 1.0
    preds = list(pred_tracks.values())[: max(0, n)]
    if not preds:
        return 0.0
    ious = np.array([[st_iou(p, gt_tracks[g]) for g in gt_ids] for p in preds])
    recalls = []
    for thr in iou_thresholds:
        taken = np.zeros(len(gt_ids), dtype=bool)
        for row in ious:
            cand = np.where(~taken & (row >= thr), row, -1.0)
            j = int(np.argmax(cand))
            if cand[j] >= 0:
                taken[j] = True
        recalls.append(taken.sum() / len(gt_ids))
    return float(np.mean(recalls))


def id_switches(pred_tracks, gt_tracks, iou_threshold: float = 0.5) -> int:
    """Frames where a ground-truth object's assigned predicted id changes.

    The assignment in a frame is the predicted id with the highest mask IoU
    (at least ``iou_threshold``; ties to the lower id). A frame without an
    assignment neither counts nor resets the last assigned id.
    """
    pred_ids = sorted(pred_tracks)
    switches = 0
    for g in sorted(gt_tracks):
        gt = np.asarray(gt_tracks[g], dtype=bool)
        last = None
        for t in range(len(gt)):
            if not gt[t].any():
                continue
            best, best_iou = None, -1.0
            for pid in pred_ids:
                iou = mask_iou(pred_tracks[pid][t], gt[t])
                if iou > best_iou:
                    best, best_iou = pid, iou
            if best is None or best_iou < iou_threshold:
                continue
            if last is not None and best != last:
                switches += 1
            last = best
    return switches


def match_tracks(pred_tracks, gt_tracks) -> dict[int, int | None]:
    """Each ground-truth id -> predicted id with the best st_iou (None if zero)."""
    out = {}
    for g, gt in gt_tracks.items():
        best, best_iou = None, 0.0
        for pid in sorted(pred_tracks):
            iou = st_iou(pred_tracks[pid], gt)
            if iou > best_iou:
                best, best_iou = pid, iou
        out[g] = best
    return out


def frame_ious(pred, gt) -> np.ndarray:
    """Per-frame IoU of one track pair (frames empty in both give 1.0)."""
    return np.array([mask_iou(p, g) for p, g in zip(pred, gt)])


@dataclass
class EvalReport:
    per_object_mean_iou: dict[int, float]
    per_object_st_iou: dict[int, float]
    st_iou: float
    ar: dict[int, float]
    id_switches: int
    matches: dict[int, int | None]
    cycle_consistency_iou: float | None = None
    cycle_excluded: list[int] = field(default_factory=list)

    def to_json(self) -> dict:
        d = asdict(self)
        for key in ("per_object_mean_iou", "per_object_st_iou", "ar", "matches"):
            d[key] = {str(k): v for k, v in d[key].items()}
        return d


def evaluate(pred_label_maps, gt_tracks, ar_ns=(1, 10, 100)) -> EvalReport:
    """Score predicted label maps against ground-truth tracks.

    Every ground-truth object is matched to the predicted track with the
    highest st_iou; per-object IoUs are averaged over frames where either
    mask is non-empty.
    """
    pred = tracks_from_labels(pred_label_maps)
    for g, gt in gt_tracks.items():
        if pred and next(iter(pred.values())).shape != gt.shape:
            raise DimMismatch(f"prediction and ground truth for {g} differ in shape")
    matches = match_tracks(pred, gt_tracks)
    mean_iou, per_st = {}, {}
    for g, gt in gt_tracks.items():
        p = pred[matches[g]] if matches[g] is not None else np.zeros_like(gt)
        active = p.reshape(len(p), -1).any(axis=1) | gt.reshape(len(gt), -1).any(axis=1)
        fi = frame_ious(p, gt)
        mean_iou[g] = float(fi[active].mean()) if active.any() else 1.0
        per_st[g] = st_iou(p, gt)
    ranked = rank_by_persistence(pred)
    return EvalReport(
        per_object_mean_iou=mean_iou,
        per_object_st_iou=per_st,
        st_iou=float(np.mean(list(per_st.values()))) if per_st else 1.0,
        ar={n: ar_at_n(ranked, gt_tracks, n) for n in ar_ns},
        id_switches=id_switches(pred, gt_tracks),
        matches=matches,
    )


@dataclass
class CycleReport:
    mean_iou: float | None
    per_object: dict[int, float]
    excluded: list[int]


def cycle_consistency(forward, grids, config=None) -> CycleReport:
    """Run the sequence backwards from the forward run's last frame.

    The backward run is seeded with the forward last-frame label map; each
    object still present there is scored by the IoU between its backward
    frame-0 mask and its forward frame-0 mask. Objects missing from the
    forward last frame are excluded and listed.
    """
    from .tracker import run

    grids = list(grids)
    last = np.asarray(forward.label_maps[-1])
    first = np.asarray(forward.label_maps[0])
    in_first = {int(v) for v in np.unique(first) if v != 0}
    kept = sorted(in_first & {int(v) for v in np.unique(last) if v != 0})
    excluded = sorted(in_first - set(kept))
    if not kept:
        return CycleReport(None, {}, excluded)
    seed = np.where(np.isin(last, kept), last, 0).astype(np.uint16)
    backward = run(grids[::-1], config, first_labels=seed)
    back0 = np.asarray(backward.label_maps[-1])
    per = {o: mask_iou(back0 == o, first == o) for o in kept}
    return CycleReport(float(np.mean(list(per.values()))), per, excluded)
