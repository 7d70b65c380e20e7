"""Greedy linking of per-frame detections into unary and multivariate tubes."""
from __future__ import annotations

from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .geometry import Box, ScoredBox, iou, union_box
from .jsonl import DataError, read_jsonl, require, write_jsonl

UNARY = "unary"
MULTIVARIATE = "multivariate"


@dataclass(frozen=True)
class LinkParams:
    lam: float = 0.1  # IoU gate, strict ">"
    eta: float = 2.0  # weight of IoU in the linking score
    zeta1: int = 100  # min unary tube length (frames)
    zeta2: int = 50  # min multivariate tube length (frames)

    def __post_init__(self):
        if not 0.0 <= self.lam < 1.0:
            raise ValueError(f"lam must lie in [0, 1), got {self.lam}")
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")
        if self.zeta1 < 1 or self.zeta2 < 1:
            raise ValueError("minimum tube lengths must be >= 1")


@dataclass
class Tube:
    id: str
    video_id: str
    kind: str
    entries: list  # [(frame, Box)], consecutive frames
    category: Optional[str] = None
    # Per entry, the detections forming that entry's box. Not serialized.
    members: Optional[list] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.kind not in (UNARY, MULTIVARIATE):
            raise ValueError(f"unknown tube kind {self.kind!r}")
        frames = [f for f, _ in self.entries]
        if any(b != a + 1 for a, b in zip(frames, frames[1:])):
            raise ValueError(f"tube {self.id} frames are not consecutive")

    def __len__(self):
        return len(self.entries)

    @property
    def start(self) -> int:
        return self.entries[0][0]

    @property
    def end(self) -> int:
        return self.entries[-1][0]

    @property
    def span(self):
        return self.start, self.end

    def boxes_by_frame(self) -> dict:
        return dict(self.entries)

    def to_json(self) -> dict:
        return {
            "tube_id": self.id,
            "video_id": self.video_id,
            "kind": self.kind,
            "category": self.category,
            "entries": [{"frame": f, "bbox": list(b)} for f, b in self.entries],
        }

    @classmethod
    def from_json(cls, obj, where="tube"):
        entries = []
        for e in require(obj, "entries", list, where):
            if not isinstance(e, dict):
                raise DataError(f"{where}: malformed entry")
            try:
                entries.append((int(require(e, "frame", int, where)), Box.of(require(e, "bbox", list, where))))
            except (TypeError, ValueError) as exc:
                raise DataError(f"{where}: {exc}") from None
        category = obj.get("category")
        try:
            return cls(
                id=require(obj, "tube_id", str, where),
                video_id=require(obj, "video_id", str, where),
                kind=require(obj, "kind", str, where),
                entries=entries,
                category=category,
            )
        except ValueError as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"{where}: {exc}") from None


def linking_score(bi: ScoredBox, bj: ScoredBox, params: LinkParams) -> float:
    u = iou(bi.box, bj.box)
    if u > params.lam:
        return bi.score + bj.score + params.eta * u
    return 0.0


class _FramePool:
    """Detections of one video grouped per frame, with an alive mask.

    Within a frame, boxes are kept in tie order so the kernels' "first
    maximum wins" rule implements the tie break.
    """

    def __init__(self, dets):
        by_frame = defaultdict(list)
        for d in dets:
            by_frame[d.frame].append(d)
        self.dets = {}
        self.boxes = {}
        self.scores = {}
        self.alive = {}
        for f, ds in by_frame.items():
            ds.sort(key=ScoredBox.tie_key)
            self.dets[f] = ds
            self.boxes[f] = np.array([d.box for d in ds], dtype=np.float64).reshape(-1, 4)
            self.scores[f] = np.array([d.score for d in ds], dtype=np.float64)
            self.alive[f] = np.ones(len(ds), dtype=bool)
        self.order = sorted(dets, key=ScoredBox.rank_key)
        self._pos = {id(d): (d.frame, i) for f, ds in self.dets.items() for i, d in enumerate(ds)}
        self._cursor = 0

    def next_seed(self):
        while self._cursor < len(self.order):
            d = self.order[self._cursor]
            f, i = self._pos[id(d)]
            if self.alive[f][i]:
                return d
            self._cursor += 1
        return None

    def candidates(self, frame):
        """Indices (into the frame's list) and boxes/scores of the alive detections."""
        if frame not in self.alive:
            return None
        idx = np.flatnonzero(self.alive[frame])
        if idx.size == 0:
            return None
        return idx, self.boxes[frame][idx], self.scores[frame][idx]

    def kill(self, d):
        f, i = self._pos[id(d)]
        self.alive[f][i] = False

    def index_of(self, d):
        return self._pos[id(d)][1]


def _link_unary(pool: _FramePool, seed: ScoredBox, params: LinkParams):
    chain = {seed.frame: seed}
    pool.kill(seed)
    for step in (1, -1):
        cur = seed
        while True:
            cand = pool.candidates(cur.frame + step)
            if cand is None:
                break
            idx, boxes, scores = cand
            j = kernels.best_link(np.asarray(cur.box, dtype=np.float64), cur.score, boxes, scores,
                                  params.lam, params.eta)
            if j < 0:
                break
            cur = pool.dets[cur.frame + step][idx[j]]
            pool.kill(cur)
            chain[cur.frame] = cur
    return [chain[f] for f in sorted(chain)]


def _cluster_multivariate(pool: _FramePool, seed: ScoredBox, params: LinkParams):
    tp = seed.frame
    idx, boxes, _ = pool.candidates(tp)
    u = kernels.iou_one_to_many(np.asarray(seed.box, dtype=np.float64), boxes)
    seed_i = pool.index_of(seed)
    keep = [i for i, ui in zip(idx, u) if i == seed_i or ui > params.lam]
    clusters = {tp: [pool.dets[tp][i] for i in keep]}
    for step in (1, -1):
        t = tp
        while True:
            cand = pool.candidates(t + step)
            if cand is None:
                break
            idx, boxes, _ = cand
            members = np.array([d.box for d in clusters[t]], dtype=np.float64)
            mask = kernels.any_overlap(members, boxes, params.lam)
            if not mask.any():
                break
            t += step
            clusters[t] = [pool.dets[t][i] for i in idx[np.asarray(mask, dtype=bool)]]
    for ds in clusters.values():
        for d in ds:
            pool.kill(d)
    return [clusters[f] for f in sorted(clusters)]


def _video_of(dets):
    vids = {d.video_id for d in dets}
    if len(vids) > 1:
        raise ValueError("detections from several videos; use build_tubes")
    return vids.pop() if vids else ""


def build_unary_tubes(dets, params: LinkParams = LinkParams()):
    """Unary tubes of one video, in emission order (categories alphabetical)."""
    video_id = _video_of(dets)
    by_cat = defaultdict(list)
    for d in dets:
        by_cat[d.category].append(d)
    tubes = []
    for cat in sorted(by_cat):
        pool = _FramePool(by_cat[cat])
        while (seed := pool.next_seed()) is not None:
            chain = _link_unary(pool, seed, params)
            if len(chain) >= params.zeta1:
                tubes.append(Tube(
                    id=f"{video_id}:u{len(tubes):04d}",
                    video_id=video_id,
                    kind=UNARY,
                    category=cat,
                    entries=[(d.frame, d.box) for d in chain],
                    members=[[d] for d in chain],
                ))
    return tubes


def build_multivariate_tubes(dets, params: LinkParams = LinkParams()):
    """Multivariate (union-box) tubes of one video, in emission order; categories ignored."""
    video_id = _video_of(dets)
    pool = _FramePool(dets)
    tubes = []
    while (seed := pool.next_seed()) is not None:
        clusters = _cluster_multivariate(pool, seed, params)
        if len(clusters) >= params.zeta2:
            tubes.append(Tube(
                id=f"{video_id}:m{len(tubes):04d}",
                video_id=video_id,
                kind=MULTIVARIATE,
                entries=[(ds[0].frame, union_box(d.box for d in ds)) for ds in clusters],
                members=clusters,
            ))
    return tubes


def group_by_video(dets):
    out = defaultdict(list)
    for d in dets:
        out[d.video_id].append(d)
    return {v: out[v] for v in sorted(out)}


def build_tubes(dets, params: LinkParams = LinkParams(), threads: int = 1):
    """Both tube kinds for every video; returns ``{video_id: [unary..., multivariate...]}``."""
    groups = group_by_video(dets)

    def one(item):
        _, ds = item
        return build_unary_tubes(ds, params) + build_multivariate_tubes(ds, params)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(one, groups.items()))
    else:
        results = [one(item) for item in groups.items()]
    return dict(zip(groups, results))


def load_detections(path):
    dets = []
    for lineno, obj in read_jsonl(path):
        where = f"{path}:{lineno}"
        try:
            dets.append(ScoredBox(
                box=Box.of(require(obj, "bbox", list, where)),
                score=require(obj, "score", float, where),
                category=require(obj, "category", str, where),
                frame=require(obj, "frame", int, where),
                video_id=require(obj, "video_id", str, where),
            ))
        except DataError:
            raise
        except (TypeError, ValueError) as exc:
            raise DataError(f"{where}: {exc}") from None
    dets.sort(key=lambda d: (d.video_id, d.frame))
    return dets


def save_detections(path, dets):
    write_jsonl(path, ({
        "video_id": d.video_id,
        "frame": d.frame,
        "bbox": list(d.box),
        "score": d.score,
        "category": d.category,
    } for d in dets))


def save_tubes(path, tubes):
    write_jsonl(path, (t.to_json() for t in tubes))


def load_tubes(path):
    return [Tube.from_json(obj, f"{path}:{lineno}") for lineno, obj in read_jsonl(path)]
