"""MIL instances, feature files and bag assembly.

Each tube yields a region-level and an image-level instance; each video is
also cut into contiguous videolets.  Features are per 16-frame clip and are
mean-pooled into one vector per instance.

Feature file layout (little-endian)::

    b"STFV"  u32 version=1  u32 dim  u64 count  count*dim float32 (row-major)

with an index ``<stem>.json`` next to it::

    {"version": 1, "dim": D, "clip_length": 16,
     "instances": {"<instance id>": {"row_start": r, "row_count": k, "track": "region"}}}
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .jsonl import DataError

REGION, IMAGE, VIDEOLET = "region", "image", "videolet"
TRACKS = (REGION, IMAGE, VIDEOLET)
POSITIVE, NEGATIVE = "positive", "negative"

CLIP_LENGTH = 16
DEFAULT_SEGMENTS = 32
DEFAULT_CAP = 200

_MAGIC = b"STFV"
_VERSION = 1


def region_id(tube_id: str) -> str:
    return f"{tube_id}#r"


def image_id(tube_id: str) -> str:
    return f"{tube_id}#g"


def videolet_id(video_id: str, k: int) -> str:
    return f"{video_id}:v{k:03d}"


def pool_clip_features(clips) -> np.ndarray:
    """Element-wise mean of per-clip feature vectors."""
    clips = [np.asarray(c, dtype=np.float64) for c in clips]
    if not clips:
        raise ValueError("cannot pool an empty list of clip features")
    dims = {c.shape for c in clips}
    if len(dims) != 1 or clips[0].ndim != 1:
        raise ValueError(f"clip features have mismatched shapes: {sorted(dims)}")
    return np.mean(np.stack(clips), axis=0)


def clip_count(n_frames: int, clip_length: int = CLIP_LENGTH) -> int:
    return -(-n_frames // clip_length)


@dataclass
class Instance:
    id: str
    video_id: str
    source: str  # one of TRACKS
    span: tuple  # (start_frame, end_frame), inclusive
    tube: Optional[object] = None
    clip_features: Optional[np.ndarray] = field(default=None, repr=False)  # (clips, dim)
    pooled: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.source not in TRACKS:
            raise ValueError(f"unknown instance source {self.source!r}")
        if (self.source == VIDEOLET) != (self.tube is None):
            raise ValueError("tube instances need a tube; videolets must not have one")
        if self.clip_features is not None:
            self.clip_features = np.atleast_2d(np.asarray(self.clip_features, dtype=np.float64))
            if not np.all(np.isfinite(self.clip_features)):
                raise ValueError(f"non-finite features for instance {self.id}")
            self.pooled = pool_clip_features(self.clip_features)

    def with_features(self, clips) -> "Instance":
        return Instance(self.id, self.video_id, self.source, self.span, self.tube, clips)

    def clip_starts(self, clip_length: int = CLIP_LENGTH):
        """First frame of each clip (clips tile the span from its start)."""
        n = 0 if self.clip_features is None else len(self.clip_features)
        return [self.span[0] + k * clip_length for k in range(n)]


def make_videolet_instances(video_id: str, frame_count: int, segments: int = DEFAULT_SEGMENTS):
    """Cut ``[0, frame_count)`` into ``segments`` contiguous spans, longer spans first."""
    if segments < 1:
        raise ValueError("segments must be >= 1")
    if segments > frame_count:
        raise ValueError(f"cannot cut {frame_count} frames into {segments} segments")
    out = []
    start = 0
    for k, n in enumerate(split_lengths(frame_count, segments)):
        out.append(Instance(videolet_id(video_id, k), video_id, VIDEOLET, (start, start + n - 1)))
        start += n
    return out


def split_lengths(total: int, parts: int):
    """Near-equal part sizes summing to ``total``; the remainder goes to the earliest parts."""
    base, rem = divmod(total, parts)
    return [base + 1 if k < rem else base for k in range(parts)]


@dataclass
class TubeInstance:
    """One tube with its region-level and (optionally) image-level feature tracks."""

    tube: object
    region: Instance
    image: Optional[Instance] = None

    @property
    def id(self) -> str:
        return self.tube.id


@dataclass
class InstanceBag:
    video_id: str
    label: str
    tube_instances: list  # [TubeInstance], sorted by id
    videolet_instances: list  # [Instance]

    def __post_init__(self):
        if self.label not in (POSITIVE, NEGATIVE):
            raise ValueError(f"bag label must be positive/negative, got {self.label!r}")

    @property
    def is_positive(self) -> bool:
        return self.label == POSITIVE

    def region_matrix(self) -> np.ndarray:
        """Pooled region features, one row per tube instance."""
        return _rows([t.region for t in self.tube_instances])

    def image_matrix(self) -> np.ndarray:
        if any(t.image is None for t in self.tube_instances):
            raise DataError(f"video {self.video_id}: image-level features missing")
        return _rows([t.image for t in self.tube_instances])

    def videolet_matrix(self) -> np.ndarray:
        return _rows(self.videolet_instances)


def _rows(instances):
    if not instances:
        return np.zeros((0, 0))
    return np.stack([i.pooled for i in instances])


class FeatureStore:
    """Per-clip features keyed by instance id, read from an STFV file and its index."""

    def __init__(self, data: np.ndarray, index: dict, clip_length: int = CLIP_LENGTH):
        self.data = data
        self.index = index
        self.clip_length = clip_length

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __contains__(self, instance_id):
        return instance_id in self.index

    def clips(self, instance_id: str) -> np.ndarray:
        try:
            entry = self.index[instance_id]
        except KeyError:
            raise DataError(f"no features for instance {instance_id!r}") from None
        r = entry["row_start"]
        return self.data[r:r + entry["row_count"]].astype(np.float64)

    def track(self, instance_id: str) -> str:
        return self.index[instance_id]["track"]

    @classmethod
    def load(cls, path) -> "FeatureStore":
        path = Path(path)
        data = read_feature_matrix(path)
        idx_path = index_path(path)
        try:
            meta = json.loads(idx_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"{idx_path}: cannot read feature index ({exc})") from None
        index = meta.get("instances")
        if not isinstance(index, dict):
            raise DataError(f"{idx_path}: missing 'instances' mapping")
        for key, entry in index.items():
            try:
                r, k, track = entry["row_start"], entry["row_count"], entry["track"]
            except (KeyError, TypeError):
                raise DataError(f"{idx_path}: malformed entry for {key!r}") from None
            if track not in TRACKS or k < 1 or r < 0 or r + k > len(data):
                raise DataError(f"{idx_path}: entry for {key!r} out of range or bad track")
        return cls(data, index, int(meta.get("clip_length", CLIP_LENGTH)))


def index_path(path) -> Path:
    return Path(path).with_suffix(".json")


def read_feature_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != _MAGIC:
        raise DataError(f"{path}: not an STFV feature file")
    version, dim, count = struct.unpack_from("<IIQ", raw, 4)
    if version != _VERSION:
        raise DataError(f"{path}: unsupported feature file version {version}")
    if len(raw) != 20 + 4 * dim * count:
        raise DataError(f"{path}: size does not match header ({count} x {dim})")
    return np.frombuffer(raw, dtype="<f4", offset=20).reshape(count, dim)


def write_features(path, rows, clip_length: int = CLIP_LENGTH):
    """Write ``[(instance_id, track, clips (k, dim))]`` to an STFV file plus its index."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blocks, index, r = [], {}, 0
    dim = None
    for instance_id, track, clips in rows:
        clips = np.atleast_2d(np.asarray(clips, dtype="<f4"))
        if dim is None:
            dim = clips.shape[1]
        elif clips.shape[1] != dim:
            raise ValueError(f"instance {instance_id} has dim {clips.shape[1]}, expected {dim}")
        if instance_id in index:
            raise ValueError(f"duplicate instance id {instance_id}")
        index[instance_id] = {"row_start": r, "row_count": len(clips), "track": track}
        blocks.append(clips)
        r += len(clips)
    data = np.concatenate(blocks) if blocks else np.zeros((0, dim or 0), dtype="<f4")
    with path.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIQ", _VERSION, data.shape[1], data.shape[0]))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    meta = {"version": _VERSION, "dim": int(data.shape[1]), "clip_length": clip_length, "instances": index}
    index_path(path).write_text(json.dumps(meta, sort_keys=True, indent=1), encoding="utf-8")


def assemble_bag(video_id, label, tubes, features: FeatureStore, cap: int = DEFAULT_CAP,
                 videolets=()) -> InstanceBag:
    """Attach features to a video's tubes and videolets.

    Positive bags need region and image features for every tube; negative bags
    need region features (image features are attached when present).  Over
    ``cap`` tubes, the longest are kept.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    tubes = sorted(tubes, key=lambda t: t.id)
    if len(tubes) > cap:
        tubes = sorted(tubes, key=lambda t: (-len(t), t.id))[:cap]
        tubes.sort(key=lambda t: t.id)
    tube_instances = []
    for t in tubes:
        region = Instance(region_id(t.id), video_id, REGION, t.span, t, features.clips(region_id(t.id)))
        image = None
        gid = image_id(t.id)
        if label == POSITIVE or gid in features:
            image = Instance(gid, video_id, IMAGE, t.span, t, features.clips(gid))
        tube_instances.append(TubeInstance(t, region, image))
    if len(videolets) > cap:
        raise ValueError(f"{len(videolets)} videolets exceed the bag cap {cap}")
    vls = [v.with_features(features.clips(v.id)) for v in videolets]
    return InstanceBag(video_id, label, tube_instances, vls)
