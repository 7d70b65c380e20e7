"""Top-tube inference and evaluation metrics."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import Box, iou
from .instances import CLIP_LENGTH, InstanceBag, pool_clip_features, split_lengths
from .jsonl import DataError, read_jsonl, require
from .relation import TEMPORAL, TUBE

DEFAULT_M = 5
DEFAULT_EPS = (0.1, 0.2, 0.3)
FAR_THRESHOLD = 0.2


@dataclass
class HypotheticalTube:
    parent_id: str
    index: int  # 1..M
    entries: list
    region: np.ndarray = field(repr=False)
    image: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def id(self) -> str:
        return f"{self.parent_id}/{self.index}"

    @property
    def span(self):
        return self.entries[0][0], self.entries[-1][0]


def _sub_features(clips, parent_start, lo, hi, clip_length):
    """Mean of the clips whose first frame lies in ``[lo, hi]``.

    A sub-span that owns no clip start takes the clip covering its first frame.
    """
    starts = parent_start + clip_length * np.arange(len(clips))
    own = (starts >= lo) & (starts <= hi)
    if not own.any():
        k = min((lo - parent_start) // clip_length, len(clips) - 1)
        return np.asarray(clips[k], dtype=np.float64)
    return pool_clip_features(clips[own])


def split_tube(tube_instance, M: int = DEFAULT_M, clip_length: int = CLIP_LENGTH):
    """Cut a tube instance into ``min(M, len)`` contiguous sub-tubes, longer ones first."""
    if M < 1:
        raise ValueError("M must be >= 1")
    tube = tube_instance.tube
    entries = tube.entries
    parts = min(M, len(entries))
    out, pos = [], 0
    for k, n in enumerate(split_lengths(len(entries), parts), start=1):
        sub = entries[pos:pos + n]
        lo, hi = sub[0][0], sub[-1][0]
        region = _sub_features(tube_instance.region.clip_features, tube.start, lo, hi, clip_length)
        image = None
        if tube_instance.image is not None:
            image = _sub_features(tube_instance.image.clip_features, tube.start, lo, hi, clip_length)
        out.append(HypotheticalTube(tube.id, k, sub, region, image))
        pos += n
    return out


@dataclass
class Inference:
    video_id: str
    tube: Optional[HypotheticalTube]
    score: float
    candidates: list = field(default_factory=list, repr=False)  # [(hyp id, score)]

    @property
    def localized(self) -> bool:
        return self.tube is not None


def infer_top_tube(bag: InstanceBag, nets: dict, M: int = DEFAULT_M, clip_length: int = CLIP_LENGTH) -> Inference:
    """Highest ``(p_t(region) + p_v(image)) / 2`` over all hypothetical sub-tubes of a video.

    Each branch scores the video's whole hypothetical set at once.  A video
    without tubes scores 0 and is not localized.
    """
    if not bag.tube_instances:
        return Inference(bag.video_id, None, 0.0)
    hyps = [h for t in bag.tube_instances for h in split_tube(t, M, clip_length)]
    if any(h.image is None for h in hyps):
        raise DataError(f"video {bag.video_id}: image-level features are needed for inference")
    region = np.stack([h.region for h in hyps], axis=1)
    image = np.stack([h.image for h in hyps], axis=1)
    pt = nets[TUBE].forward(region)[0]
    pv = nets[TEMPORAL].forward(image)[0]
    scores = (pt + pv) / 2.0
    i = int(np.argmax(scores))
    return Inference(bag.video_id, hyps[i], float(scores[i]),
                     [(h.id, float(s)) for h, s in zip(hyps, scores)])


@dataclass
class GroundTruthTube:
    video_id: str
    label: str  # "abnormal" | "normal"
    entries: list  # [(frame, Box)]
    detector_frames: set = field(default_factory=set)
    abnormal_frames: Optional[set] = None
    frame_count: Optional[int] = None
    split: Optional[str] = None

    @property
    def is_abnormal(self) -> bool:
        return self.label == "abnormal"


def load_ground_truth(path) -> dict:
    out = {}
    for lineno, obj in read_jsonl(path):
        where = f"{path}:{lineno}"
        label = require(obj, "label", str, where)
        if label not in ("abnormal", "normal"):
            raise DataError(f"{where}: label must be 'abnormal' or 'normal'")
        entries = []
        for e in require(obj, "entries", list, where):
            try:
                entries.append((int(e["frame"]), Box.of(e["bbox"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{where}: malformed entry ({exc})") from None
        entries.sort(key=lambda e: e[0])
        ab = obj.get("abnormal_frames")
        vid = require(obj, "video_id", str, where)
        if vid in out:
            raise DataError(f"{where}: duplicate video {vid!r}")
        out[vid] = GroundTruthTube(
            vid, label, entries,
            abnormal_frames=None if ab is None else {int(f) for f in ab},
            frame_count=obj.get("frame_count"),
            split=obj.get("split"),
        )
    return out


def s_loc(gt, pred, detector_frames=None) -> float:
    """Mean per-frame IoU over frames that carry detector boxes and where either tube has a box."""
    gt_entries = gt.entries if hasattr(gt, "entries") else gt
    pred_entries = pred.entries if hasattr(pred, "entries") else pred
    if detector_frames is None:
        detector_frames = gt.detector_frames
    g, p = dict(gt_entries), dict(pred_entries)
    frames = set(detector_frames) & (set(g) | set(p))
    if not frames:
        return 0.0
    total = sum(iou(g[f], p[f]) for f in frames if f in g and f in p)
    return total / len(frames)


def auc(pos_scores, neg_scores) -> float:
    """Probability a positive outscores a negative, ties counting one half (rank form)."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auc needs at least one positive and one negative score")
    allv = np.concatenate([pos, neg])
    order = np.argsort(allv, kind="mergesort")
    sorted_v = allv[order]
    ranks = np.empty(allv.size)
    # Average ranks over tied runs.
    _, start, counts = np.unique(sorted_v, return_index=True, return_counts=True)
    avg = start + (counts + 1) / 2.0
    ranks[order] = np.repeat(avg, counts)
    u = ranks[:pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def localization_metrics(values, thresholds=DEFAULT_EPS):
    """``({eps: percent of videos with S_loc > eps}, mean S_loc)``."""
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        raise ValueError("no abnormal videos to evaluate")
    table = {float(e): 100.0 * float(np.count_nonzero(values > e)) / values.size for e in thresholds}
    return table, float(values.mean())


def segment_scores(bag: InstanceBag, nets: dict) -> np.ndarray:
    """Dual-branch average score for each videolet of a video."""
    X = bag.videolet_matrix().T
    return (nets[TUBE].forward(X)[0] + nets[TEMPORAL].forward(X)[0]) / 2.0


def broadcast_to_frames(spans, scores, frame_count):
    out = np.zeros(frame_count)
    for (a, b), s in zip(spans, scores):
        out[a:b + 1] = s
    return out


def frame_auc_from_scores(videos) -> float:
    """AUC over every frame of every video; ``videos`` yields ``(frame_scores, frame_labels)``."""
    scores, labels = [], []
    for s, l in videos:
        s = np.asarray(s, dtype=np.float64)
        l = np.asarray(l, dtype=bool)
        if s.shape != l.shape:
            raise ValueError("frame scores and labels differ in length")
        scores.append(s)
        labels.append(l)
    s = np.concatenate(scores)
    l = np.concatenate(labels)
    return auc(s[l], s[~l])


def frame_level_auc(bags, ground_truth: dict, nets: dict) -> float:
    """Frame AUC from videolet (equidistant segment) scores broadcast to frames."""
    videos = []
    for bag in bags:
        gt = ground_truth[bag.video_id]
        if gt.is_abnormal and gt.abnormal_frames is None:
            raise DataError(f"video {bag.video_id}: no abnormal_frames labels")
        spans = [v.span for v in bag.videolet_instances]
        n = spans[-1][1] + 1
        labels = np.zeros(n, dtype=bool)
        for f in gt.abnormal_frames or ():
            if 0 <= f < n:
                labels[f] = True
        videos.append((broadcast_to_frames(spans, segment_scores(bag, nets), n), labels))
    return frame_auc_from_scores(videos)


def false_alarm_rate(scores, threshold: float = FAR_THRESHOLD) -> float:
    """Fraction of normal videos whose top-tube score exceeds ``threshold``."""
    scores = np.asarray(list(scores), dtype=np.float64)
    if scores.size == 0:
        raise ValueError("no normal videos")
    return float(np.count_nonzero(scores > threshold)) / scores.size


@dataclass
class EvalReport:
    videos: list  # per-video dicts
    vauc: Optional[float]
    iou_at: dict
    miou: Optional[float]
    frame_auc: Optional[float]
    false_alarm_rate: Optional[float]
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "videos": self.videos,
            "vauc": self.vauc,
            "iou_at": {f"{k:g}": v for k, v in sorted(self.iou_at.items())},
            "miou": self.miou,
            "frame_auc": self.frame_auc,
            "false_alarm_rate": self.false_alarm_rate,
            "config": self.config,
        }

    @classmethod
    def from_json(cls, obj) -> "EvalReport":
        return cls(obj["videos"], obj["vauc"], {float(k): v for k, v in obj["iou_at"].items()},
                   obj["miou"], obj["frame_auc"], obj["false_alarm_rate"], obj.get("config", {}))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n"

    def save(self, path, csv_path=None):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")
        if csv_path is not None:
            with Path(csv_path).open("w", newline="") as fh:
                keys = ["video_id", "label", "tube_id", "score", "localized", "s_loc"]
                w = csv.DictWriter(fh, keys, extrasaction="ignore", lineterminator="\n")
                w.writeheader()
                for row in self.videos:
                    w.writerow(row)

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
