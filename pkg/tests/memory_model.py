"""Plain-list reference model of the memory bank, used as a trace oracle."""
import numpy as np

from cpstrack.errors import InsertionOverflow, NothingEvictable


class ListBank:
    def __init__(self, capacity, initial_objs):
        self.capacity = capacity
        self.initial_frame = 0
        self.latest = 0
        self.rows = [{"obj": o, "frame": 0, "util": 0, "seq": s} for s, o in enumerate(initial_objs)]
        self.next_seq = len(self.rows)

    def order(self, protect=None):
        cand = [r for r in self.rows if r["frame"] != 0 and r["frame"] != protect]
        return sorted(cand, key=lambda r: (r["util"], r["frame"], r["seq"]))

    def evict(self, need, protect=None):
        order = self.order(protect)
        if need > len(order):
            raise NothingEvictable
        gone = {id(r) for r in order[:need]}
        self.rows = [r for r in self.rows if id(r) not in gone]

    def use(self, idx):
        for i in idx:
            self.rows[i]["util"] += 1

    def insert(self, frame, objs):
        n_init = sum(r["frame"] == 0 for r in self.rows)
        if n_init + len(objs) > self.capacity:
            raise InsertionOverflow
        over = len(self.rows) + len(objs) - self.capacity
        if over > 0:
            self.evict(over, protect=frame)
        for o in objs:
            self.rows.append({"obj": o, "frame": frame, "util": 0, "seq": self.next_seq})
            self.next_seq += 1
        self.latest = frame

    def columns(self):
        return tuple(np.array([r[k] for r in self.rows], dtype=np.int64) for k in ("obj", "frame", "util", "seq"))


def random_trace(bank, model, rng, steps, dim):
    """Drive both banks with the same random operations; yield after each step."""
    for _ in range(steps):
        op = rng.integers(0, 3)
        if op == 0:
            k = int(rng.integers(0, 6))
            objs = rng.integers(1, 4, k).tolist()
            emb = rng.standard_normal((k, dim)).astype(np.float32)
            frame = bank.latest_frame + 1
            try:
                bank.insert_patches(frame, emb, objs)
                ok = True
            except InsertionOverflow:
                ok = False
            try:
                model.insert(frame, objs)
                assert ok
            except InsertionOverflow:
                assert not ok
        elif op == 1 and len(bank):
            idx = rng.integers(0, len(bank), int(rng.integers(0, 5))).tolist()
            bank.record_utilization(idx)
            model.use(idx)
        else:
            need = int(rng.integers(0, 3))
            try:
                bank.evict(need)
                ok = True
            except NothingEvictable:
                ok = False
            try:
                model.evict(need)
                assert ok
            except NothingEvictable:
                assert not ok
        yield
