import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tubemil.geometry import Box, ScoredBox  # noqa: E402


def det(frame, bbox, score=0.9, category="car", video="v"):
    return ScoredBox(Box(*map(float, bbox)), score, category, frame, video)


def as_scored(dicts, video="v"):
    return [det(d["frame"], d["bbox"], d["score"], d["category"], video) for d in dicts]


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A small planted-anomaly corpus on disk, with tubes built."""
    from tubemil.synth import DESK_LINK, SyntheticSpec, write_synthetic
    from tubemil.tubes import build_tubes, load_detections, save_tubes

    out = tmp_path_factory.mktemp("corpus")
    spec = SyntheticSpec(positives=6, negatives=6, test_positives=6, test_negatives=6, objects=2, dim=16, seed=3)
    write_synthetic(out, spec, DESK_LINK)
    tubes = build_tubes(load_detections(out / "det.jsonl"), DESK_LINK)
    save_tubes(out / "tubes.jsonl", [t for ts in tubes.values() for t in ts])
    return out


def load_split(corpus, split, det=False):
    from tubemil.pipeline import load_dataset

    return load_dataset(corpus / "tubes.jsonl", corpus / "features.bin", corpus / "gt.jsonl",
                        corpus / "det.jsonl" if det else None, split=split)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
