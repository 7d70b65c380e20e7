"""Planted-anomaly synthetic corpus.

Every video has ``objects`` persistent objects plus one "actor" that is
visible for ``actor_frames`` frames.  Objects and the actor move with
constant velocity inside their own horizontal lane and bounce off the lane
and canvas borders.  In positive videos the actor behaves abnormally during
the central ``anomaly_span`` frames of its visit; those boxes form the
ground-truth tube.

Clip features are isotropic Gaussians: mean ``mu0`` for normal content and
``mu0 + delta * u`` (fixed unit ``u``) for clips touching the anomaly, with
noise ``sigma``.  Region-level clips are abnormal when the tube's box covers
the actor (IoU >= 0.5) on an anomalous frame; image-level and videolet clips
are abnormal when they overlap the anomalous frames at all.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .geometry import Box, ScoredBox, iou
from .instances import (CLIP_LENGTH, IMAGE, REGION, VIDEOLET, clip_count, image_id,
                        make_videolet_instances, region_id, write_features)
from .jsonl import write_jsonl
from .tubes import LinkParams, build_tubes, save_detections

CATEGORIES = ("bicycle", "car", "person", "truck")
CANVAS_H, CANVAS_W = 720, 1280
DESK_LINK = LinkParams(lam=0.1, eta=2.0, zeta1=8, zeta2=4)


@dataclass(frozen=True)
class SyntheticSpec:
    positives: int = 40
    negatives: int = 40
    test_positives: int = 40
    test_negatives: int = 40
    frames: int = 200
    objects: int = 2
    actor_frames: int = 120
    anomaly_span: int = 24
    dim: int = 64
    delta: float = 6.0
    sigma: float = 1.0
    jitter: float = 1.5
    segments: int = 32
    clip_length: int = CLIP_LENGTH
    seed: int = 0

    def __post_init__(self):
        if min(self.positives, self.negatives, self.test_positives, self.test_negatives) < 0:
            raise ValueError("video counts must be >= 0")
        if not 1 <= self.anomaly_span <= self.actor_frames <= self.frames:
            raise ValueError("need 1 <= anomaly_span <= actor_frames <= frames")
        if self.delta < 0 or self.sigma <= 0 or self.jitter < 0:
            raise ValueError("need delta >= 0, sigma > 0, jitter >= 0")
        if self.dim < 1 or self.objects < 0 or self.clip_length < 1:
            raise ValueError("bad dim, object count or clip length")
        if not 1 <= self.segments <= self.frames:
            raise ValueError("segments must lie in [1, frames]")


@dataclass
class SyntheticVideo:
    video_id: str
    positive: bool
    split: str
    detections: list
    gt_entries: list
    anomaly: tuple  # (first, last) frame, or () for normal videos


def _track(rng, lane, n_lanes, n_frames):
    """Constant-velocity box positions bouncing inside one lane; returns (n_frames, 4)."""
    lane_h = CANVAS_H / n_lanes
    top = lane * lane_h
    h = rng.uniform(0.4, 0.7) * lane_h
    w = rng.uniform(80.0, 160.0)
    x = rng.uniform(0.0, CANVAS_W - w)
    y = rng.uniform(top, top + lane_h - h)
    vx = rng.uniform(1.0, 6.0) * rng.choice((-1.0, 1.0))
    vy = rng.uniform(0.0, 1.0) * rng.choice((-1.0, 1.0))
    out = np.empty((n_frames, 4))
    for f in range(n_frames):
        out[f] = (x, y, x + w, y + h)
        x, vx = _bounce(x + vx, vx, 0.0, CANVAS_W - w)
        y, vy = _bounce(y + vy, vy, top, top + lane_h - h)
    return out


def _bounce(p, v, lo, hi):
    if p < lo:
        return 2 * lo - p, -v
    if p > hi:
        return 2 * hi - p, -v
    return p, v


def _detect(rng, video_id, frame, true_box, category, jitter):
    b = np.asarray(true_box) + rng.normal(0.0, jitter, size=4)
    x1, x2 = sorted((b[0], b[2]))
    y1, y2 = sorted((b[1], b[3]))
    return ScoredBox(Box(float(x1), float(y1), float(x2), float(y2)),
                     float(rng.uniform(0.5, 1.0)), category, frame, video_id)


def make_video(spec: SyntheticSpec, video_id, positive, split, rng) -> SyntheticVideo:
    n_lanes = spec.objects + 1
    lanes = rng.permutation(n_lanes)
    dets = []
    for k in range(spec.objects):
        cat = str(rng.choice(CATEGORIES))
        for f, box in enumerate(_track(rng, lanes[k], n_lanes, spec.frames)):
            dets.append(_detect(rng, video_id, f, box, cat, spec.jitter))
    actor_cat = str(rng.choice(CATEGORIES))
    start = int(rng.integers(0, spec.frames - spec.actor_frames + 1))
    actor = _track(rng, lanes[-1], n_lanes, spec.actor_frames)
    for i, box in enumerate(actor):
        dets.append(_detect(rng, video_id, start + i, box, actor_cat, spec.jitter))
    gt, anomaly = [], ()
    if positive:
        a0 = start + (spec.actor_frames - spec.anomaly_span) // 2
        anomaly = (a0, a0 + spec.anomaly_span - 1)
        gt = [(f, Box(*map(float, actor[f - start]))) for f in range(anomaly[0], anomaly[1] + 1)]
    dets.sort(key=lambda d: (d.frame, d.tie_key()))
    return SyntheticVideo(video_id, positive, split, dets, gt, anomaly)


def _clip_ranges(first, last, clip_length):
    return [(s, min(s + clip_length - 1, last)) for s in range(first, last + 1, clip_length)]


def _overlaps(a, b):
    return bool(b) and a[0] <= b[1] and b[0] <= a[1]


def clip_flags(video: SyntheticVideo, tube, clip_length, track):
    """Per-clip abnormal flags for one tube track."""
    ranges = _clip_ranges(tube.start, tube.end, clip_length)
    if not video.positive:
        return [False] * len(ranges)
    if track == IMAGE:
        return [_overlaps(r, video.anomaly) for r in ranges]
    gt = dict(video.gt_entries)
    boxes = tube.boxes_by_frame()
    return [any(f in gt and iou(boxes[f], gt[f]) >= 0.5 for f in range(lo, hi + 1)) for lo, hi in ranges]


def generate(spec: SyntheticSpec = SyntheticSpec(), link: LinkParams = DESK_LINK):
    """Videos, their tubes (built with ``link``) and feature rows, all from ``spec.seed``."""
    plan = ([("train", True, i) for i in range(spec.positives)]
            + [("train", False, i) for i in range(spec.negatives)]
            + [("test", True, i) for i in range(spec.test_positives)]
            + [("test", False, i) for i in range(spec.test_negatives)])
    root = np.random.SeedSequence(spec.seed)
    video_seeds = root.spawn(len(plan))
    feat_rng = np.random.default_rng(root.spawn(1)[0])
    mu0 = feat_rng.normal(0.0, 1.0, size=spec.dim)
    u = feat_rng.normal(size=spec.dim)
    u /= np.linalg.norm(u)

    videos = []
    for (split, positive, i), s in zip(plan, video_seeds):
        vid = f"{split}_{'pos' if positive else 'neg'}_{i:03d}"
        videos.append(make_video(spec, vid, positive, split, np.random.default_rng(s)))

    all_dets = [d for v in videos for d in v.detections]
    tubes = build_tubes(all_dets, link)

    def draw(flags):
        x = mu0 + spec.sigma * feat_rng.normal(size=(len(flags), spec.dim))
        x[np.asarray(flags, dtype=bool)] += spec.delta * u
        return x

    rows = []
    for v in videos:
        for t in tubes.get(v.video_id, []):
            rows.append((region_id(t.id), REGION, draw(clip_flags(v, t, spec.clip_length, REGION))))
            rows.append((image_id(t.id), IMAGE, draw(clip_flags(v, t, spec.clip_length, IMAGE))))
        for vl in make_videolet_instances(v.video_id, spec.frames, spec.segments):
            flags = [v.positive and _overlaps(r, v.anomaly) for r in _clip_ranges(*vl.span, spec.clip_length)]
            assert len(flags) == clip_count(vl.span[1] - vl.span[0] + 1, spec.clip_length)
            rows.append((vl.id, VIDEOLET, draw(flags)))
    return videos, tubes, rows


def write_synthetic(out_dir, spec: SyntheticSpec = SyntheticSpec(), link: LinkParams = DESK_LINK):
    """Write ``det.jsonl``, ``gt.jsonl``, ``features.bin`` (+ ``features.json``) and ``synth.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    videos, tubes, rows = generate(spec, link)
    save_detections(out / "det.jsonl", [d for v in videos for d in v.detections])
    write_jsonl(out / "gt.jsonl", ({
        "video_id": v.video_id,
        "label": "abnormal" if v.positive else "normal",
        "entries": [{"frame": f, "bbox": list(b)} for f, b in v.gt_entries],
        "abnormal_frames": list(range(v.anomaly[0], v.anomaly[1] + 1)) if v.anomaly else [],
        "frame_count": spec.frames,
        "split": v.split,
    } for v in videos))
    write_features(out / "features.bin", rows, spec.clip_length)
    meta = {"spec": asdict(spec), "link": asdict(link)}
    (out / "synth.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return videos, tubes
