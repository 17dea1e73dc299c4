"""Synthetic embedding sequences with exact ground truth.

Each object is a box of patches painted with its own random unit signature
plus Gaussian noise; everything else is a background signature plus noise
(or independent random vectors with ``background="noise"``). Boxes move
with constant velocity, reflecting off the grid border, and can breathe
sinusoidally in size. ``clutter`` scatters isolated one-patch specks that
copy a visible object's signature (unlabelled distractors). ``drift`` rotates an object's signature a little
every frame, away from all other signatures. A part object is a sub-box
of another object whose signature sits at a fixed cosine to the whole's.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InfeasibleSpec
from .tensor_io import EmbeddingGrid, LabelMask, save_sequence


@dataclass
class ObjectSpec:
    top: int
    left: int
    height: int
    width: int
    velocity: tuple[float, float] = (0.0, 0.0)  # (rows, cols) per frame
    deform_amplitude: float = 0.0  # patches added/removed on each side at the peak
    deform_period: float = 8.0
    drift: float = 0.0  # signature rotation per frame, radians
    appear: int = 0
    vanish: int | None = None  # first frame the object is gone
    part_of: int | None = None  # index of the enclosing object; top/left are then relative


@dataclass
class SynthSpec:
    height: int = 24
    width: int = 32
    dim: int = 32
    frames: int = 30
    seed: int = 0
    noise_sigma: float = 0.05
    num_objects: int = 3
    objects: list[ObjectSpec] = field(default_factory=list)
    background: str = "signature"  # or "noise"
    max_signature_cos: float = 0.3
    part_cosine: float = 0.9
    clutter: int = 0  # isolated single-patch specks per frame copying a visible object's signature
    name: str = "synthetic"

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        objs = [ObjectSpec(**{**o, "velocity": tuple(o.get("velocity", (0.0, 0.0)))}) for o in d.pop("objects", [])]
        return cls(objects=objs, **d)

    def to_dict(self) -> dict:
        return asdict(self)

    def resolved_objects(self) -> list[ObjectSpec]:
        """Explicit objects, or ``num_objects`` boxes in horizontal lanes."""
        if self.objects:
            return list(self.objects)
        n = self.num_objects
        if n == 0:
            return []
        lane = self.height // n
        size = min(lane - 2, max(2, self.width // 6))
        if size < 2:
            raise InfeasibleSpec(f"{n} objects do not fit in a {self.height}-row grid")
        objs = []
        for i in range(n):
            left = (i * (self.width - size)) // max(1, n - 1) if n > 1 else 0
            direction = 1.0 if i % 2 == 0 else -1.0
            objs.append(ObjectSpec(i * lane + (lane - size) // 2, left, size, size, (0.0, direction)))
        return objs


@dataclass
class SyntheticSequence:
    grids: list[EmbeddingGrid]
    labels: list[LabelMask]
    extents: list[dict[int, np.ndarray]]  # per frame: object id -> visible mask (parts included)
    signatures: dict[int, np.ndarray]
    background_signature: np.ndarray | None
    spec: SynthSpec

    def __len__(self) -> int:
        return len(self.grids)

    def gt_tracks(self, ids=None) -> dict[int, np.ndarray]:
        """Object id -> (T, H, W) visible-extent masks (a whole includes its parts)."""
        ids = sorted(self.signatures) if ids is None else ids
        shape = self.grids[0].shape
        return {
            i: np.stack([ext.get(i, np.zeros(shape, dtype=bool)) for ext in self.extents]) for i in ids
        }

    def save(self, out_dir):
        manifest = save_sequence(out_dir, self.grids, self.labels, name=self.spec.name)
        with open(f"{out_dir}/synth_spec.json", "w") as fh:
            json.dump(self.spec.to_dict(), fh, indent=2)
            fh.write("\n")
        return manifest


def _unit(v):
    return v / np.linalg.norm(v)


def _sample_signatures(rng, count, dim, max_cos, attempts=2000):
    sigs: list[np.ndarray] = []
    tries = 0
    while len(sigs) < count:
        tries += 1
        if tries > attempts:
            raise InfeasibleSpec(f"cannot draw {count} signatures in {dim}-d with pairwise cosine <= {max_cos}")
        v = _unit(rng.standard_normal(dim))
        if all(abs(float(v @ s)) <= max_cos for s in sigs):
            sigs.append(v)
    return sigs


def _orthogonal_direction(rng, basis, dim):
    v = rng.standard_normal(dim)
    for b in basis:
        v = v - (v @ b) * b
    n = np.linalg.norm(v)
    if n < 1e-9:
        raise InfeasibleSpec("no direction orthogonal to all signatures; increase dim")
    return v / n


def _reflect(x: float, lo: float, hi: float) -> float:
    if hi <= lo:
        return lo
    span = hi - lo
    y = (x - lo) % (2 * span)
    return lo + (y if y <= span else 2 * span - y)


def _box(o: ObjectSpec, t: int, H: int, W: int, parent_box=None):
    grow = int(round(o.deform_amplitude * math.sin(2 * math.pi * t / o.deform_period))) if o.deform_amplitude else 0
    h = max(1, o.height + 2 * grow)
    w = max(1, o.width + 2 * grow)
    if parent_box is not None:
        pt, pl, ph, pw = parent_box
        top = pt + min(max(o.top, 0), max(ph - h, 0))
        left = pl + min(max(o.left, 0), max(pw - w, 0))
        return top, left, min(h, ph), min(w, pw)
    if h > H or w > W:
        raise InfeasibleSpec(f"object of size {h}x{w} does not fit a {H}x{W} grid")
    # the centre moves; the box is reflected so it stays in bounds at every size
    top0 = o.top + o.height / 2 - h / 2
    left0 = o.left + o.width / 2 - w / 2
    top = _reflect(top0 + o.velocity[0] * t, 0, H - h)
    left = _reflect(left0 + o.velocity[1] * t, 0, W - w)
    return int(round(top)), int(round(left)), h, w


def _add_clutter(rng, field_, lab, count, sigs):
    H, W = lab.shape
    near = lab > 0
    near = near | np.roll(near, 1, 0) | np.roll(near, -1, 0) | np.roll(near, 1, 1) | np.roll(near, -1, 1)
    free = np.flatnonzero(~near.ravel())
    if free.size == 0:
        return
    cells = rng.choice(free, size=min(count, free.size), replace=False)
    which = rng.integers(0, len(sigs), size=len(cells))
    for cell, k in zip(cells, which):
        field_[cell // W, cell % W] = sigs[k]


def generate(spec: SynthSpec) -> SyntheticSequence:
    H, W, d = spec.height, spec.width, spec.dim
    if H < 1 or W < 1 or d < 2 or spec.frames < 1:
        raise InfeasibleSpec("grid, dim and frame count must be positive (dim >= 2)")
    objs = spec.resolved_objects()
    for i, o in enumerate(objs):
        if o.part_of is not None and not (0 <= o.part_of < len(objs) and objs[o.part_of].part_of is None and o.part_of != i):
            raise InfeasibleSpec(f"object {i}: part_of must name a top-level object")
    rng = np.random.default_rng(spec.seed)
    wholes = [i for i, o in enumerate(objs) if o.part_of is None]
    n_sig = len(wholes) + (1 if spec.background == "signature" else 0)
    sigs = _sample_signatures(rng, n_sig, d, spec.max_signature_cos)
    bg_sig = sigs.pop() if spec.background == "signature" else None
    base: dict[int, np.ndarray] = dict(zip(wholes, sigs))
    all_sigs = list(sigs) + ([bg_sig] if bg_sig is not None else [])
    for i, o in enumerate(objs):
        if o.part_of is not None:
            u = _orthogonal_direction(rng, [base[o.part_of]], d)
            c = spec.part_cosine
            base[i] = c * base[o.part_of] + math.sqrt(max(0.0, 1 - c * c)) * u
    drift_dir = {
        i: _orthogonal_direction(rng, all_sigs + [base[i]], d) for i, o in enumerate(objs) if o.drift
    }

    grids, labels, extents = [], [], []
    for t in range(spec.frames):
        if bg_sig is not None:
            field_ = np.broadcast_to(bg_sig, (H, W, d)).copy()
        else:
            field_ = rng.standard_normal((H, W, d))
        lab = np.zeros((H, W), dtype=np.uint16)
        ext: dict[int, np.ndarray] = {}
        boxes = {}
        sigs_now = {}
        order = wholes + [i for i in range(len(objs)) if i not in wholes]
        for i in order:
            o = objs[i]
            parent = boxes.get(o.part_of) if o.part_of is not None else None
            if o.part_of is not None and parent is None:
                continue
            if t < o.appear or (o.vanish is not None and t >= o.vanish):
                continue
            top, left, h, w = _box(o, t, H, W, parent)
            boxes[i] = (top, left, h, w)
            sig = base[i]
            if o.drift:
                ang = o.drift * t
                sig = math.cos(ang) * sig + math.sin(ang) * drift_dir[i]
            field_[top:top + h, left:left + w] = sig
            sigs_now[i] = sig
            lab[top:top + h, left:left + w] = i + 1
        if spec.clutter and boxes:
            _add_clutter(rng, field_, lab, spec.clutter, [sigs_now[i] for i in sorted(sigs_now)])
        # visible extent; a whole also owns its parts' patches
        for i in boxes:
            ext[i + 1] = lab == i + 1
        for i, o in enumerate(objs):
            if o.part_of is not None and (i + 1) in ext and (o.part_of + 1) in ext:
                ext[o.part_of + 1] = ext[o.part_of + 1] | ext[i + 1]
        if spec.noise_sigma > 0:
            field_ = field_ + spec.noise_sigma * rng.standard_normal((H, W, d))
        grids.append(EmbeddingGrid.from_array(field_))
        labels.append(LabelMask(lab))
        extents.append(ext)

    def as32(v):
        return EmbeddingGrid.from_array(np.asarray(v).reshape(1, 1, -1)).data[0, 0]

    return SyntheticSequence(
        grids,
        labels,
        extents,
        {i + 1: as32(base[i]) for i in range(len(objs))},
        None if bg_sig is None else as32(bg_sig),
        spec,
    )
