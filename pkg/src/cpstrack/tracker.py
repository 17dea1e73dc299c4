"""Per-sequence tracking loop.

Frame 0 is segmented from a regular grid of point prompts (or taken from
given masks). Every later frame:

1. cycle pairs between the memory bank and the frame give point prompts,
2. each live object is segmented from its prompt with its carried state,
3. patches claimed by several objects go to the most similar signature,
4. utilization is recorded,
5. pooled object tokens are checked against tracklet tokens (object out),
6. on re-detection frames, unmatched detections become new tracklets,
7. the frame's confirmed pairs (and newborn masks) are stored in memory.
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .cps_memory import MemoryBank, default_capacity
from .cycle_prop import MAX_K, propagate
from .errors import ConfigError, CpsTrackError, DimMismatch, EmptyMask, InsertionOverflow, NoObjectsDetected
from .segmenter import ObjectState, Segmenter, get_segmenter, grid_detect, mask_iou
from .tensor_io import EmbeddingGrid, LabelMask

log = logging.getLogger(__name__)


@dataclass
class TrackerConfig:
    k_points: int = 1
    redetect_interval: int = 5  # 0 disables re-detection
    out_limit: int = 10
    new_object_iou: float = 0.5
    memory_capacity: int | None = None  # None: 8 frames' worth of patches
    grid_side: int = 32
    q_min: float = 0.5
    s_min: float = 0.8
    nms_iou: float = 0.7
    min_area: int = 4
    min_similarity: float = 0.0
    segmenter: str = "toy"
    default_tau: float = 0.85
    disable_memory: bool = False
    disable_cycle_pairs: bool = False
    disable_object_state: bool = False
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 1 <= self.k_points <= MAX_K:
            raise ConfigError(f"k_points must be in 1..{MAX_K}, got {self.k_points}")
        for name in ("out_limit", "grid_side", "workers", "min_area"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.redetect_interval < 0:
            raise ConfigError("redetect_interval must be >= 0")
        if not 0.0 < self.new_object_iou < 1.0:
            raise ConfigError(f"new_object_iou must lie in (0, 1), got {self.new_object_iou}")
        if self.memory_capacity is not None and self.memory_capacity < 1:
            raise ConfigError("memory_capacity must be positive")
        if not 0.0 < self.default_tau <= 1.0:
            raise ConfigError("default_tau must lie in (0, 1]")
        for name in ("q_min", "s_min", "nms_iou"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrackerConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown tracker option(s): {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Tracklet:
    object_id: int
    state: ObjectState
    birth_frame: int
    masks: dict[int, np.ndarray] = field(default_factory=dict)
    out_counter: int = 0
    alive: bool = True
    death_frame: int | None = None


@dataclass
class SequenceResult:
    label_maps: list[np.ndarray]
    tracklets: list[Tracklet]
    failures: list[dict]
    timings: list[float] = field(default_factory=list)
    name: str = ""
    memory: MemoryBank | None = None

    def tracks(self) -> dict[int, np.ndarray]:
        """Object id -> (T, H, W) boolean stack."""
        stack = np.stack(self.label_maps)
        return {tr.object_id: stack == tr.object_id for tr in self.tracklets}

    def to_json(self) -> dict:
        T = len(self.label_maps)
        rows = []
        for tr in self.tracklets:
            presence = [int(bool((lm == tr.object_id).any())) for lm in self.label_maps]
            rows.append({
                "id": tr.object_id,
                "birth_frame": tr.birth_frame,
                "death_frame": tr.death_frame,
                "presence": presence,
            })
        return {"name": self.name, "frames": T, "tracklets": rows, "failures": self.failures}


def _resolve_overlaps(grid: EmbeddingGrid, claims: dict[int, tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Label map where each claimed patch goes to the object whose signature
    it is most similar to; ties go to the lower id."""
    label = np.zeros(grid.shape, dtype=np.uint16)
    if not claims:
        return label
    ids = sorted(claims)
    data = grid.data.astype(np.float64)
    score = np.full((len(ids),) + grid.shape, -np.inf)
    for n, obj in enumerate(ids):
        mask, sig = claims[obj]
        score[n][mask] = (data[mask] @ np.asarray(sig, dtype=np.float64))
    claimed = np.isfinite(score).any(axis=0)
    winner = np.argmax(score, axis=0)
    label[claimed] = np.asarray(ids, dtype=np.uint16)[winner[claimed]]
    return label


def _unit(v):
    return v / max(float(np.linalg.norm(v)), 1e-12)


class TrackerSession:
    """Sequential tracking state for one video. Create with :func:`init_sequence`."""

    def __init__(self, config: TrackerConfig, segmenter: Segmenter, shape, dim):
        self.config = config
        self.segmenter = segmenter
        self.shape = tuple(shape)
        self.dim = dim
        self.tracklets: dict[int, Tracklet] = {}
        self.memory: MemoryBank | None = None
        self.label_maps: list[np.ndarray] = []
        self.failures: list[dict] = []
        self.frame_index = -1
        self.next_id = 1
        self.no_objects = False

    # -- helpers -----------------------------------------------------------

    def alive(self) -> list[Tracklet]:
        return [tr for _, tr in sorted(self.tracklets.items()) if tr.alive]

    def _miss(self, t: int, obj: int, reason: str) -> None:
        self.failures.append({"frame": t, "object": obj, "reason": reason})

    def _new_tracklet(self, t: int, state: ObjectState, obj: int | None = None) -> Tracklet:
        if obj is None:
            obj = self.next_id
        self.next_id = max(self.next_id, obj + 1)
        tr = Tracklet(obj, state, t)
        self.tracklets[obj] = tr
        return tr

    def _record(self, t: int, label: np.ndarray) -> None:
        for tr in self.tracklets.values():
            m = label == tr.object_id
            if m.any():
                tr.masks[t] = m
        self.label_maps.append(label)

    # -- frame 0 -----------------------------------------------------------

    def start(self, frame0: EmbeddingGrid, labels=None) -> np.ndarray:
        cfg = self.config
        if labels is not None:
            lab = np.asarray(getattr(labels, "labels", labels)).astype(np.uint16)
            if lab.shape != self.shape:
                raise DimMismatch(f"first-frame labels {lab.shape} vs grid {self.shape}")
            for obj in sorted(int(v) for v in np.unique(lab) if v != 0):
                self._new_tracklet(0, ObjectState.from_mask(frame0, lab == obj), obj)
            label = lab
        else:
            proposals = grid_detect(
                frame0, self.segmenter, cfg.grid_side, cfg.q_min, cfg.s_min, cfg.nms_iou, cfg.min_area
            )
            claims = {}
            for p in proposals:
                tr = self._new_tracklet(0, p.object_state)
                claims[tr.object_id] = (p.mask, p.object_state.signature)
            label = _resolve_overlaps(frame0, claims)
            for obj in list(self.tracklets):
                if not (label == obj).any():
                    del self.tracklets[obj]
        capacity = cfg.memory_capacity or default_capacity(self.shape[0] * self.shape[1])
        self.memory = MemoryBank.init(frame0, label, capacity, frame_index=0)
        if not self.tracklets:
            self.no_objects = True
            warnings.warn("no objects in the first frame", NoObjectsDetected, stacklevel=3)
        self.frame_index = 0
        self._record(0, label)
        return label

    # -- later frames ------------------------------------------------------

    def step(self, grid: EmbeddingGrid) -> np.ndarray:
        """Track every live object into ``grid``; returns the frame's label map."""
        if grid.shape != self.shape or grid.dim != self.dim:
            raise DimMismatch(f"frame {grid.data.shape} vs session {self.shape + (self.dim,)}")
        cfg = self.config
        t = self.frame_index + 1
        live = self.alive()
        live_ids = {tr.object_id for tr in live}

        prop = None
        if live and len(self.memory):
            ref_emb, ref_obj = self.memory.reference_view()
            ref_labels = np.where(np.isin(ref_obj, list(live_ids)), ref_obj, 0)
            prop = propagate(
                ref_emb, ref_labels, grid, cfg.k_points, cfg.min_similarity,
                mode="argmax" if cfg.disable_cycle_pairs else "cycle", workers=cfg.workers,
            )

        proposals = {}
        for tr in live:
            prompt = prop.prompts.get(tr.object_id) if prop else None
            if prompt is None:
                self._miss(t, tr.object_id, "no_pairs")
                continue
            state_in = None if cfg.disable_object_state else tr.state
            try:
                proposals[tr.object_id] = self.segmenter.segment(grid, prompt.points, state_in)
            except EmptyMask:
                self._miss(t, tr.object_id, "empty_mask")

        label = _resolve_overlaps(
            grid, {o: (p.mask, p.object_state.signature) for o, p in proposals.items()}
        )
        masks = {}
        for obj, p in proposals.items():
            m = label == obj
            self.tracklets[obj].state = p.object_state
            if m.any():
                masks[obj] = m
            else:
                self._miss(t, obj, "overlap_lost")

        if prop is not None:
            used = [p.ref_index for pairs in prop.by_object.values() for p in pairs]
            self.memory.record_utilization(used)

        self.object_out(t, grid, masks)
        for obj in list(masks):
            if not self.tracklets[obj].alive:
                label[masks.pop(obj)] = 0
        newborn = {}
        if cfg.redetect_interval and t % cfg.redetect_interval == 0:
            for tr in self.object_in(t, grid, label, masks):
                newborn[tr.object_id] = label == tr.object_id

        pairs_by_object = {} if (prop is None or cfg.disable_memory) else prop.by_object
        try:
            self.memory.insert_frame(t, grid, pairs_by_object, masks, extra=newborn)
        except InsertionOverflow as exc:
            log.warning("frame %d: memory insertion skipped (%s)", t, exc)
            self._miss(t, 0, "memory_overflow")

        self.frame_index = t
        self._record(t, label)
        return label

    def object_out(self, t: int, grid: EmbeddingGrid, masks: dict[int, np.ndarray]) -> dict[int, int]:
        """Update out counters from pooled-token matching; returns id -> counter."""
        live = self.alive()
        tok_ids, tokens = [], []
        for tr in live:
            emb = self.memory.object_embeddings(tr.object_id)
            if len(emb):
                tok_ids.append(tr.object_id)
                tokens.append(_unit(emb.astype(np.float64).mean(axis=0)))
        tracklet_tokens = np.array(tokens).reshape(len(tokens), grid.dim)
        for tr in live:
            mask = masks.get(tr.object_id)
            if mask is None:
                out = True
            elif not tok_ids:
                out = False
            else:
                obj_token = _unit(grid.data[mask].astype(np.float64).mean(axis=0))
                best = tok_ids[int(np.argmax(tracklet_tokens @ obj_token))]
                out = tr.object_id in tok_ids and best != tr.object_id
            tr.out_counter = tr.out_counter + 1 if out else 0
            if tr.out_counter >= self.config.out_limit:
                tr.alive = False
                tr.death_frame = t
        return {tr.object_id: tr.out_counter for tr in live}

    def object_in(self, t: int, grid: EmbeddingGrid, label: np.ndarray, masks: dict[int, np.ndarray]) -> list[Tracklet]:
        """Admit detections whose best IoU with every tracked mask is below threshold.

        ``label`` is updated in place with the newborn objects' patches.
        """
        cfg = self.config
        proposals = grid_detect(grid, self.segmenter, cfg.grid_side, cfg.q_min, cfg.s_min, cfg.nms_iou, cfg.min_area)
        current = [m for obj, m in masks.items() if self.tracklets[obj].alive]
        born = []
        for p in proposals:
            best = max((mask_iou(p.mask, m) for m in current), default=0.0)
            if best >= cfg.new_object_iou:
                continue
            free = p.mask & (label == 0)
            if free.sum() < cfg.min_area:
                continue
            tr = self._new_tracklet(t, p.object_state)
            label[free] = tr.object_id
            born.append(tr)
        return born

    def result(self, name: str = "", timings=None) -> SequenceResult:
        return SequenceResult(
            [lm.copy() for lm in self.label_maps],
            [self.tracklets[k] for k in sorted(self.tracklets)],
            list(self.failures),
            list(timings or []),
            name,
            self.memory,
        )


def init_sequence(
    frame0: EmbeddingGrid,
    config: TrackerConfig | None = None,
    labels=None,
    segmenter: Segmenter | None = None,
) -> TrackerSession:
    """Start a session on ``frame0``.

    With ``labels`` (a LabelMask or array) the given objects are tracked and
    grid detection is skipped.
    """
    config = config or TrackerConfig()
    segmenter = segmenter or get_segmenter(config.segmenter, default_tau=config.default_tau)
    session = TrackerSession(config, segmenter, frame0.shape, frame0.dim)
    session.start(frame0, labels)
    return session


def run(grids, config: TrackerConfig | None = None, first_labels=None, name: str = "",
        segmenter: Segmenter | None = None) -> SequenceResult:
    """Track a whole sequence of EmbeddingGrids.

    Per-frame errors are recorded in ``failures`` and produce an empty label
    map for that frame; the run continues.
    """
    grids = list(grids)
    t0 = time.perf_counter()
    session = init_sequence(grids[0], config, first_labels, segmenter)
    timings = [time.perf_counter() - t0]
    for t, g in enumerate(grids[1:], start=1):
        t0 = time.perf_counter()
        try:
            session.step(g)
        except CpsTrackError as exc:
            log.error("frame %d failed: %s", t, exc)
            session.failures.append({"frame": t, "object": 0, "reason": f"error: {exc}"})
            session.frame_index = t
            session.label_maps.append(np.zeros(session.shape, dtype=np.uint16))
        timings.append(time.perf_counter() - t0)
    return session.result(name, timings)


def run_manifest(manifest, config: TrackerConfig | None = None, semi_supervised: bool = False) -> SequenceResult:
    from .tensor_io import load_sequence

    grids, masks = load_sequence(manifest)
    first = None
    if semi_supervised:
        if masks[0] is None:
            raise DimMismatch("semi-supervised run needs a first-frame mask in the manifest")
        first = masks[0]
    return run(grids, config, first, name=manifest.name)


def as_label_mask(label: np.ndarray) -> LabelMask:
    return LabelMask(np.ascontiguousarray(label, dtype=np.uint16))
