"""Capacity-bounded bank of labelled reference patches.

Entries carry (embedding, object id, frame of origin, utilization). The
bank is the reference set for propagation after the first frame. When it
is full, the entries with the lowest utilization are dropped, except those
from the initial frame and those being inserted for the current frame.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import (
    CapacityTooSmall,
    DimMismatch,
    EmptyBank,
    IndexOutOfRange,
    InsertionOverflow,
    NothingEvictable,
)

DEFAULT_FRAMES_OF_CAPACITY = 8


@dataclass(frozen=True)
class MemoryEntry:
    embedding: np.ndarray
    object_id: int
    frame_of_origin: int
    utilization: int
    seq: int  # global insertion counter, the final eviction tie-break


def default_capacity(patches_per_frame: int) -> int:
    return DEFAULT_FRAMES_OF_CAPACITY * patches_per_frame


class MemoryBank:
    """Column-store memory bank. ``reference_view`` order is insertion order."""

    def __init__(self, dim: int, capacity: int, initial_frame: int = 0):
        if capacity < 0:
            raise CapacityTooSmall("capacity must be non-negative")
        self.dim = dim
        self.capacity = int(capacity)
        self.initial_frame = initial_frame
        self.latest_frame = initial_frame
        self._emb = np.empty((0, dim), dtype=np.float32)
        self._obj = np.empty(0, dtype=np.int64)
        self._frame = np.empty(0, dtype=np.int64)
        self._util = np.empty(0, dtype=np.int64)
        self._seq = np.empty(0, dtype=np.int64)
        self._next_seq = 0

    # -- construction ------------------------------------------------------

    @classmethod
    def init(cls, first_frame, labels, capacity: int | None = None, frame_index: int = 0) -> "MemoryBank":
        """One entry per non-background patch of the first frame, in row-major order."""
        lab = np.asarray(getattr(labels, "labels", labels))
        if lab.shape != first_frame.shape:
            raise DimMismatch(f"labels {lab.shape} vs grid {first_frame.shape}")
        if capacity is None:
            capacity = default_capacity(first_frame.height * first_frame.width)
        flat = lab.ravel()
        idx = np.flatnonzero(flat)
        if idx.size > capacity:
            raise CapacityTooSmall(f"{idx.size} object patches in frame {frame_index}, capacity {capacity}")
        bank = cls(first_frame.dim, capacity, frame_index)
        bank._append(first_frame.flat()[idx], flat[idx], frame_index)
        return bank

    def _append(self, emb, obj, frame: int) -> None:
        k = len(obj)
        self._emb = np.concatenate([self._emb, np.asarray(emb, dtype=np.float32).reshape(k, self.dim)])
        self._obj = np.concatenate([self._obj, np.asarray(obj, dtype=np.int64)])
        self._frame = np.concatenate([self._frame, np.full(k, frame, dtype=np.int64)])
        self._util = np.concatenate([self._util, np.zeros(k, dtype=np.int64)])
        self._seq = np.concatenate([self._seq, np.arange(self._next_seq, self._next_seq + k)])
        self._next_seq += k

    # -- accessors ---------------------------------------------------------

    def __len__(self) -> int:
        return len(self._obj)

    @property
    def object_ids(self) -> np.ndarray:
        return self._obj.copy()

    @property
    def frames(self) -> np.ndarray:
        return self._frame.copy()

    @property
    def utilization(self) -> np.ndarray:
        return self._util.copy()

    @property
    def seqs(self) -> np.ndarray:
        return self._seq.copy()

    def entries(self) -> list[MemoryEntry]:
        return [
            MemoryEntry(self._emb[i].copy(), int(self._obj[i]), int(self._frame[i]), int(self._util[i]), int(self._seq[i]))
            for i in range(len(self))
        ]

    def reference_view(self) -> tuple[np.ndarray, np.ndarray]:
        """Snapshot ``(embeddings (n, d), object ids (n,))`` in insertion order."""
        if len(self) == 0:
            raise EmptyBank("memory bank is empty")
        return self._emb.copy(), self._obj.copy()

    def object_embeddings(self, object_id: int) -> np.ndarray:
        return self._emb[self._obj == object_id]

    # -- updates -----------------------------------------------------------

    def record_utilization(self, used_ref_indices) -> None:
        """+1 per occurrence: an entry that anchored two pairs gains 2."""
        idx = np.asarray(list(used_ref_indices), dtype=np.int64)
        if idx.size == 0:
            return
        if idx.min() < 0 or idx.max() >= len(self):
            raise IndexOutOfRange(f"entry index out of range for bank of size {len(self)}")
        np.add.at(self._util, idx, 1)

    def _evictable(self, protect_frame: int | None) -> np.ndarray:
        ok = self._frame != self.initial_frame
        if protect_frame is not None:
            ok &= self._frame != protect_frame
        return np.flatnonzero(ok)

    def eviction_order(self, protect_frame: int | None = None) -> np.ndarray:
        """Evictable entry positions ordered (utilization, frame, insertion) ascending."""
        cand = self._evictable(protect_frame)
        order = np.lexsort((self._seq[cand], self._frame[cand], self._util[cand]))
        return cand[order]

    def evict(self, needed_slots: int, protect_frame: int | None = None) -> list[MemoryEntry]:
        if needed_slots <= 0:
            return []
        order = self.eviction_order(protect_frame)
        if needed_slots > order.size:
            raise NothingEvictable(f"need {needed_slots} slots, only {order.size} evictable entries")
        victims = order[:needed_slots]
        evicted = [
            MemoryEntry(self._emb[i].copy(), int(self._obj[i]), int(self._frame[i]), int(self._util[i]), int(self._seq[i]))
            for i in victims
        ]
        keep = np.ones(len(self), dtype=bool)
        keep[victims] = False
        self._emb, self._obj = self._emb[keep], self._obj[keep]
        self._frame, self._util, self._seq = self._frame[keep], self._util[keep], self._seq[keep]
        return evicted

    def insert_frame(self, frame_index: int, current, pairs_by_object, predicted_masks, extra=None) -> int:
        """Store each pair's current patch when it falls inside its object's predicted mask.

        ``pairs_by_object`` maps object id to CyclePairs; ``predicted_masks``
        maps object id to an (H, W) boolean mask. ``extra`` optionally maps
        object id to a mask whose every patch is stored as well (used for
        objects born this frame). Returns the number of entries inserted.
        """
        flat = current.flat()
        cur_idx, objs, seen = [], [], set()
        for obj in sorted(pairs_by_object):
            mask = predicted_masks.get(obj)
            if mask is None:
                continue
            mflat = np.asarray(mask, dtype=bool).ravel()
            for p in pairs_by_object[obj]:
                if p.cur_index in seen or not mflat[p.cur_index]:
                    continue
                seen.add(p.cur_index)
                cur_idx.append(p.cur_index)
                objs.append(obj)
        for obj in sorted(extra or {}):
            for j in np.flatnonzero(np.asarray(extra[obj], dtype=bool).ravel()):
                if int(j) not in seen:
                    seen.add(int(j))
                    cur_idx.append(int(j))
                    objs.append(obj)
        return self.insert_patches(frame_index, flat[np.asarray(cur_idx, dtype=np.int64)], objs)

    def insert_patches(self, frame_index: int, embeddings, object_ids) -> int:
        """Add raw patches for ``frame_index``, evicting as needed."""
        if frame_index <= self.latest_frame:
            raise ValueError(f"frame {frame_index} is not after latest frame {self.latest_frame}")
        k = len(object_ids)
        n_initial = int((self._frame == self.initial_frame).sum())
        if n_initial + k > self.capacity:
            raise InsertionOverflow(
                f"{k} new + {n_initial} initial-frame entries exceed capacity {self.capacity}"
            )
        overflow = len(self) + k - self.capacity
        if overflow > 0:
            self.evict(overflow, protect_frame=frame_index)
        if k:
            self._append(embeddings, object_ids, frame_index)
        self.latest_frame = frame_index
        return k

    # -- egress ------------------------------------------------------------

    def to_json(self, include_embeddings: bool = False) -> dict:
        entries = []
        for i in range(len(self)):
            e = {
                "object_id": int(self._obj[i]),
                "frame_of_origin": int(self._frame[i]),
                "utilization": int(self._util[i]),
            }
            if include_embeddings:
                e["embedding"] = [float(v) for v in self._emb[i]]
            entries.append(e)
        return {
            "capacity": self.capacity,
            "initial_frame": self.initial_frame,
            "latest_frame": self.latest_frame,
            "size": len(self),
            "entries": entries,
        }

    def dump(self, path, include_embeddings: bool = False) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(include_embeddings), fh, indent=1)
            fh.write("\n")
