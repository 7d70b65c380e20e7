"""Config handling and end-to-end stages shared by the CLI."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .evaluation import (DEFAULT_EPS, DEFAULT_M, FAR_THRESHOLD, EvalReport, auc, false_alarm_rate,
                         frame_level_auc, infer_top_tube, load_ground_truth, localization_metrics, s_loc)
from .instances import (DEFAULT_CAP, DEFAULT_SEGMENTS, NEGATIVE, POSITIVE, FeatureStore, assemble_bag,
                        make_videolet_instances)
from .jsonl import DataError, write_jsonl
from .synth import DESK_LINK, SyntheticSpec
from .trainer import TrainConfig
from .tubes import LinkParams, load_detections, load_tubes

PROFILES = {
    "full": {"link": asdict(LinkParams()), "feature_dim": 4096},
    "desk": {"link": asdict(DESK_LINK), "feature_dim": 64},
}


@dataclass
class PipelineConfig:
    link: LinkParams = field(default_factory=LinkParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)
    feature_dim: int = 4096
    segments: int = DEFAULT_SEGMENTS
    M: int = DEFAULT_M
    eps: tuple = DEFAULT_EPS
    far_threshold: float = FAR_THRESHOLD
    seed: int = 0
    threads: int = 1

    @classmethod
    def from_dict(cls, obj: dict, base: Optional["PipelineConfig"] = None) -> "PipelineConfig":
        """Overlay a (possibly partial) JSON-style mapping onto ``base``."""
        cfg = base or cls()
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known - {"profile"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        updates = {}
        for key, sub in (("link", LinkParams), ("train", TrainConfig), ("synth", SyntheticSpec)):
            if key in obj:
                part = dict(obj[key])
                if key == "train" and "hidden" in part:
                    part["hidden"] = tuple(part["hidden"])
                bad = set(part) - {f.name for f in fields(sub)}
                if bad:
                    raise ValueError(f"unknown {key} config keys: {sorted(bad)}")
                updates[key] = replace(getattr(cfg, key), **part)
        for key in known - {"link", "train", "synth"}:
            if key in obj:
                updates[key] = tuple(obj[key]) if key == "eps" else obj[key]
        return replace(cfg, **updates)

    @classmethod
    def for_profile(cls, name: str) -> "PipelineConfig":
        return cls.from_dict(PROFILES[name])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["eps"] = list(self.eps)
        d["train"]["hidden"] = list(self.train.hidden)
        return d


def load_config(path, base: PipelineConfig) -> PipelineConfig:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read config ({exc})") from None
    if not isinstance(obj, dict):
        raise DataError(f"{path}: config must be a JSON object")
    if "profile" in obj:
        base = PipelineConfig.for_profile(obj["profile"])
    return PipelineConfig.from_dict(obj, base)


@dataclass
class Dataset:
    bags: list  # InstanceBag, sorted by video id
    ground_truth: dict
    features: FeatureStore


def load_dataset(tubes_path, features_path, gt_path=None, det_path=None,
                 segments=DEFAULT_SEGMENTS, cap=DEFAULT_CAP, split=None, need_videolets=True) -> Dataset:
    """Assemble one bag per video from tubes, features and (optionally) ground truth / detections.

    Videos come from the ground truth when given, else from the tubes file.
    ``split`` keeps only ground-truth videos tagged with that split.
    """
    tubes = load_tubes(tubes_path)
    features = FeatureStore.load(features_path)
    gt = load_ground_truth(gt_path) if gt_path else {}
    by_video = {}
    for t in tubes:
        by_video.setdefault(t.video_id, []).append(t)
    last_frame = {v: max(t.end for t in ts) for v, ts in by_video.items()}
    if det_path:
        for d in load_detections(det_path):
            if d.video_id in gt:
                gt[d.video_id].detector_frames.add(d.frame)
            last_frame[d.video_id] = max(last_frame.get(d.video_id, -1), d.frame)
    if split is not None:
        gt = {v: g for v, g in gt.items() if g.split in (None, split)}
    video_ids = sorted(gt) if gt else sorted(by_video)
    bags = []
    for vid in video_ids:
        g = gt.get(vid)
        label = POSITIVE if g is None or g.is_abnormal else NEGATIVE
        frame_count = g.frame_count if g is not None and g.frame_count else last_frame.get(vid, -1) + 1
        videolets = []
        if need_videolets:
            if frame_count < segments:
                raise DataError(f"video {vid}: {frame_count} frames cannot form {segments} videolets")
            videolets = make_videolet_instances(vid, frame_count, segments)
        bags.append(assemble_bag(vid, label, by_video.get(vid, []), features, cap, videolets))
    return Dataset(bags, gt, features)


def prediction_rows(inferences):
    for inf in inferences:
        row = {"video_id": inf.video_id, "score": inf.score, "localized": inf.localized,
               "tube_id": None, "hypothetical_index": None, "entries": []}
        if inf.tube is not None:
            row.update(tube_id=inf.tube.parent_id, hypothetical_index=inf.tube.index,
                       entries=[{"frame": f, "bbox": list(b)} for f, b in inf.tube.entries])
        yield row


def run_infer(dataset: Dataset, nets, M=DEFAULT_M):
    return [infer_top_tube(b, nets, M, dataset.features.clip_length) for b in dataset.bags]


def save_predictions(path, inferences):
    write_jsonl(path, prediction_rows(inferences))


def evaluate(dataset: Dataset, nets, config: PipelineConfig) -> EvalReport:
    """Top tube per video, then VAUC, IoU@eps, MIoU, frame AUC and false alarm rate."""
    if not dataset.ground_truth:
        raise DataError("evaluation needs ground truth")
    inferences = run_infer(dataset, nets, config.M)
    rows, pos, neg, locs, normal_scores = [], [], [], [], []
    for inf in inferences:
        gt = dataset.ground_truth[inf.video_id]
        row = {"video_id": inf.video_id, "label": gt.label, "score": inf.score, "localized": inf.localized,
               "tube_id": inf.tube.id if inf.tube else None, "s_loc": None}
        if gt.is_abnormal:
            pos.append(inf.score)
            loc = s_loc(gt, inf.tube, gt.detector_frames) if inf.tube else 0.0
            row["s_loc"] = loc
            locs.append(loc)
        else:
            neg.append(inf.score)
            normal_scores.append(inf.score)
        rows.append(row)
    vauc = auc(pos, neg) if pos and neg else None
    iou_at, miou = localization_metrics(locs, config.eps) if locs else ({}, None)
    far = false_alarm_rate(normal_scores, config.far_threshold) if normal_scores else None
    labelled = all(g.abnormal_frames is not None or not g.is_abnormal for g in dataset.ground_truth.values())
    frame_auc = None
    if labelled and pos and neg and all(b.videolet_instances for b in dataset.bags):
        frame_auc = frame_level_auc(dataset.bags, dataset.ground_truth, nets)
    echo = {"M": config.M, "eps": list(config.eps), "far_threshold": config.far_threshold,
            "segments": config.segments}
    return EvalReport(rows, vauc, iou_at, miou, frame_auc, far, echo)
