"""Compare the compiled and numpy kernel backends.

Two views: per-call timings at candidate counts typical of per-frame
linking (a handful of boxes) and of dense frames, and an end-to-end
``build_tubes`` run on a synthetic corpus under each backend.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from tubemil.kernels import _fallback

try:
    from tubemil.kernels import _ckernels
except ImportError:
    _ckernels = None


def random_boxes(rng, n):
    xy = rng.uniform(0, 1000, size=(n, 2))
    wh = rng.uniform(20, 200, size=(n, 2))
    return np.ascontiguousarray(np.hstack([xy, xy + wh]))


def micro(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for n in (4, 32, 256):
        box = random_boxes(rng, 1)[0]
        boxes = random_boxes(rng, n)
        scores = rng.uniform(0.5, 1.0, size=n)
        cases = {
            "iou_one_to_many": lambda m: m.iou_one_to_many(box, boxes),
            "iou_matrix": lambda m: m.iou_matrix(boxes, boxes),
            "best_link": lambda m: m.best_link(box, 0.9, boxes, scores, 0.1, 2.0),
            "any_overlap": lambda m: m.any_overlap(boxes[:3], boxes, 0.1),
        }
        for name, call in cases.items():
            number = max(1, 20000 // n)
            times = {}
            for label, mod in (("python", _fallback), ("cython", _ckernels)):
                if mod is None:
                    continue
                t = min(timeit.repeat(lambda: call(mod), number=number, repeat=repeat)) / number
                times[label] = t
            rows.append((name, n, times))
    return rows


END_TO_END = """
import time
from tubemil.kernels import BACKEND
from tubemil.synth import SyntheticSpec, make_video, DESK_LINK
from tubemil.tubes import build_tubes
import numpy as np
spec = SyntheticSpec(objects=6)
dets = [d for i in range(40) for d in make_video(spec, f"v{i}", True, "train", np.random.default_rng(i)).detections]
t = time.perf_counter(); build_tubes(dets, DESK_LINK); print(BACKEND, time.perf_counter() - t)
"""


def end_to_end():
    out = {}
    for pure in ("0", "1"):
        env = dict(os.environ, TUBEMIL_PURE_PYTHON=pure)
        res = subprocess.run([sys.executable, "-c", END_TO_END], env=env, capture_output=True, text=True, check=True)
        backend, seconds = res.stdout.split()
        out[backend] = float(seconds)
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"{'kernel':<16} {'n':>5} {'python us':>10} {'cython us':>10} {'speedup':>8}")
    for name, n, t in micro(args.repeat):
        py, cy = t["python"] * 1e6, t.get("cython")
        if cy is None:
            print(f"{name:<16} {n:>5} {py:>10.2f} {'-':>10} {'-':>8}")
        else:
            print(f"{name:<16} {n:>5} {py:>10.2f} {cy * 1e6:>10.2f} {py / (cy * 1e6):>7.1f}x")
    e2e = end_to_end()
    line = "  ".join(f"{k} {v:.2f}s" for k, v in sorted(e2e.items()))
    print(f"build_tubes, 40 videos x 200 frames x 7 tracks: {line}")
    if len(e2e) == 2 and "cython" in e2e:
        print(f"end-to-end speedup {e2e['python'] / e2e['cython']:.1f}x")


if __name__ == "__main__":
    main()
