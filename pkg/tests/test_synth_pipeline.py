import json

import numpy as np
import pytest

from tubemil.geometry import iou
from tubemil.instances import IMAGE, REGION
from tubemil.pipeline import PipelineConfig, load_config, load_dataset
from tubemil.synth import CANVAS_H, CANVAS_W, DESK_LINK, SyntheticSpec, clip_flags, generate, make_video
from tubemil.tubes import LinkParams

TINY = SyntheticSpec(3, 3, 0, 0, objects=2, dim=8, seed=1)


@pytest.fixture(scope="module")
def tiny():
    return generate(TINY)


def test_spec_validation():
    for bad in (dict(anomaly_span=0), dict(anomaly_span=130), dict(actor_frames=300), dict(sigma=0.0),
                dict(delta=-1.0), dict(positives=-1), dict(segments=0), dict(dim=0)):
        with pytest.raises(ValueError):
            SyntheticSpec(**bad)


def test_video_layout(tiny):
    videos, _, _ = tiny
    for v in videos:
        assert all(0.5 <= d.score <= 1.0 for d in v.detections)
        frames = [d.frame for d in v.detections]
        assert frames == sorted(frames) and max(frames) < TINY.frames
        for d in v.detections:
            assert -10 < d.box.x1 < d.box.x2 < CANVAS_W + 10 and -10 < d.box.y1 < d.box.y2 < CANVAS_H + 10
        if v.positive:
            a0, a1 = v.anomaly
            assert a1 - a0 + 1 == TINY.anomaly_span == len(v.gt_entries)
            assert [f for f, _ in v.gt_entries] == list(range(a0, a1 + 1))
        else:
            assert v.anomaly == () and v.gt_entries == []


def test_planted_actor_is_linked(tiny):
    videos, tubes, _ = tiny
    for v in videos:
        if not v.positive:
            continue
        gt = dict(v.gt_entries)
        best = max(np.mean([iou(t.boxes_by_frame()[f], b) if f in t.boxes_by_frame() else 0.0
                            for f, b in gt.items()]) for t in tubes[v.video_id])
        assert best > 0.8


def test_feature_rows_match_flags(tiny):
    videos, tubes, rows = tiny
    by_id = {r[0]: r for r in rows}
    feat = np.random.default_rng(np.random.SeedSequence(TINY.seed).spawn(len(videos) + 1)[-1])
    mu0 = feat.normal(size=TINY.dim)
    u = feat.normal(size=TINY.dim)
    u /= np.linalg.norm(u)
    hits, total, flagged = 0, 0, 0
    for v in videos:
        for t in tubes[v.video_id]:
            for track in (REGION, IMAGE):
                x = by_id[f"{t.id}#{'r' if track == REGION else 'g'}"][2]
                flags = np.array(clip_flags(v, t, TINY.clip_length, track))
                proj = (x - mu0) @ u
                hits += int(np.sum((proj > TINY.delta / 2) == flags))
                total += len(flags)
                flagged += int(flags.sum())
                assert v.positive or not flags.any()
    # a 3-sigma midpoint misclassifies about 0.27% of clips
    assert flagged > 0 and hits / total > 0.99


def test_zero_delta_has_no_signal():
    spec = SyntheticSpec(2, 2, 0, 0, objects=1, dim=4, delta=0.0, seed=4)
    a = generate(spec)[2]
    b = generate(SyntheticSpec(2, 2, 0, 0, objects=1, dim=4, delta=6.0, seed=4))[2]
    ids = [r[0] for r in a]
    assert ids == [r[0] for r in b]
    diffs = [np.abs(ra[2] - rb[2]).max() for ra, rb in zip(a, b)]
    assert min(diffs) == 0.0 and max(diffs) == pytest.approx(6.0 * 1.0, rel=0.5)


def test_negative_videos_never_flag():
    rng = np.random.default_rng(0)
    v = make_video(TINY, "n", False, "train", rng)
    assert v.anomaly == ()


def test_config_overlay_and_errors(tmp_path):
    cfg = PipelineConfig.for_profile("desk")
    assert cfg.link == DESK_LINK and cfg.feature_dim == 64
    assert PipelineConfig.for_profile("full").link == LinkParams()
    cfg2 = PipelineConfig.from_dict({"train": {"hidden": [8, 4], "iterations": 3}, "eps": [0.2]}, cfg)
    assert cfg2.train.hidden == (8, 4) and cfg2.train.iterations == 3 and cfg2.eps == (0.2,)
    assert cfg2.link == cfg.link
    with pytest.raises(ValueError, match="unknown config keys"):
        PipelineConfig.from_dict({"nope": 1})
    with pytest.raises(ValueError, match="unknown train config keys"):
        PipelineConfig.from_dict({"train": {"nope": 1}})
    round_trip = PipelineConfig.from_dict(json.loads(json.dumps(cfg2.to_dict())))
    assert round_trip == cfg2
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"profile": "full", "seed": 5}))
    loaded = load_config(p, cfg)
    assert loaded.link == LinkParams() and loaded.seed == 5


def test_load_dataset_splits(small_corpus):
    d = small_corpus
    train = load_dataset(d / "tubes.jsonl", d / "features.bin", d / "gt.jsonl", split="train")
    test = load_dataset(d / "tubes.jsonl", d / "features.bin", d / "gt.jsonl", d / "det.jsonl", split="test")
    assert len(train.bags) == 12 and len(test.bags) == 12
    assert all(b.video_id.startswith("train") for b in train.bags)
    assert all(len(b.videolet_instances) == 32 for b in test.bags)
    assert all(test.ground_truth[b.video_id].detector_frames for b in test.bags)
    bare = load_dataset(d / "tubes.jsonl", d / "features.bin", need_videolets=False)
    assert all(b.is_positive for b in bare.bags) and not bare.ground_truth
