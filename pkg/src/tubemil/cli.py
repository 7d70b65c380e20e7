"""Command line interface: ``tubemil {synth,tubes,train,infer,eval,gradcheck}``.

Exit codes: 0 success, 1 usage error, 2 data error.
"""
from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import kernels
from .jsonl import DataError
from .pipeline import PROFILES, PipelineConfig, evaluate, load_config, load_dataset, run_infer, save_predictions
from .relation import gradcheck_case, load_checkpoint, save_checkpoint
from .synth import write_synthetic
from .trainer import train, write_trace
from .tubes import build_tubes, load_detections, save_tubes

log = logging.getLogger("tubemil")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p):
    p.add_argument("--config", help="JSON config file; flags override its keys")
    p.add_argument("--profile", choices=sorted(PROFILES), default=None,
                   help="default values: 'desk' (small synthetic scale, the default) or 'full' (full-scale linking and 4096-dim features)")
    p.add_argument("--seed", type=int, help="seed for all randomness")
    p.add_argument("--threads", type=int, help="worker threads for per-video stages")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="tubemil", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a planted-anomaly synthetic corpus")
    _common(p)
    p.add_argument("--out", required=True, help="output directory")
    for flag, kind in (("positives", int), ("negatives", int), ("test-positives", int),
                       ("test-negatives", int), ("frames", int), ("objects", int), ("dim", int),
                       ("delta", float), ("sigma", float), ("anomaly-span", int), ("actor-frames", int)):
        p.add_argument(f"--{flag}", type=kind)

    p = sub.add_parser("tubes", help="link detections into unary and multivariate tubes")
    _common(p)
    p.add_argument("--det", required=True, help="detections JSON Lines file")
    p.add_argument("--out", required=True, help="tubes JSON Lines output")
    p.add_argument("--lam", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--zeta1", type=int)
    p.add_argument("--zeta2", type=int)

    def data_flags(p, gt_required, det_required):
        p.add_argument("--tubes", required=True)
        p.add_argument("--features", required=True, help="STFV feature file (index alongside)")
        p.add_argument("--gt", required=gt_required, help="ground-truth JSON Lines")
        p.add_argument("--det", required=det_required, help="detections (defines detector frames)")
        p.add_argument("--segments", type=int, help="videolets per video")
        p.add_argument("--cap", type=int, help="max tube instances per bag")

    p = sub.add_parser("train", help="train both branches")
    _common(p)
    data_flags(p, True, False)
    p.add_argument("--out", required=True, help="output directory for checkpoint.stck and loss.csv")
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-pos", type=int)
    p.add_argument("--batch-neg", type=int)
    p.add_argument("--split", default="train", help="ground-truth split to train on")

    p = sub.add_parser("infer", help="top abnormal tube per video")
    _common(p)
    data_flags(p, False, False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="predictions JSON Lines output")
    p.add_argument("--M", type=int, help="hypothetical sub-tubes per tube")
    p.add_argument("--split", default="test")

    p = sub.add_parser("eval", help="full evaluation report")
    _common(p)
    data_flags(p, True, True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="report JSON output")
    p.add_argument("--csv", help="optional per-video CSV export")
    p.add_argument("--M", type=int)
    p.add_argument("--eps", type=float, nargs="+", help="IoU@eps thresholds")
    p.add_argument("--split", default="test")

    p = sub.add_parser("gradcheck", help="finite-difference check of the branch network gradients")
    _common(p)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--dim", type=int, default=4)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out", help="unused; accepted for flag uniformity")
    return parser


def resolve_config(args) -> PipelineConfig:
    cfg = PipelineConfig.for_profile(args.profile or "desk")
    if args.config:
        if not Path(args.config).is_file():
            raise UsageError(f"config file not found: {args.config}")
        cfg = load_config(args.config, cfg)
        if args.profile:
            cfg = PipelineConfig.from_dict(PROFILES[args.profile], cfg)
    get = lambda name: getattr(args, name, None)
    if get("seed") is not None:
        cfg = replace(cfg, seed=args.seed)
    if get("threads") is not None:
        cfg = replace(cfg, threads=args.threads)
    link = {k: get(k) for k in ("lam", "eta", "zeta1", "zeta2") if get(k) is not None}
    if link:
        cfg = replace(cfg, link=replace(cfg.link, **link))
    tr = {k: get(a) for k, a in (("iterations", "iterations"), ("lr", "lr"), ("pos_per_batch", "batch_pos"),
                                 ("neg_per_batch", "batch_neg"), ("cap", "cap")) if get(a) is not None}
    if tr:
        cfg = replace(cfg, train=replace(cfg.train, **tr))
    sy = {k.replace("-", "_"): get(k.replace("-", "_")) for k in (
        "positives", "negatives", "test-positives", "test-negatives", "frames", "objects", "dim",
        "delta", "sigma", "anomaly-span", "actor-frames") if get(k.replace("-", "_")) is not None}
    if sy:
        cfg = replace(cfg, synth=replace(cfg.synth, **sy))
    if get("segments") is not None:
        cfg = replace(cfg, segments=args.segments)
    if get("M") is not None:
        cfg = replace(cfg, M=args.M)
    if get("eps"):
        cfg = replace(cfg, eps=tuple(args.eps))
    return cfg


def _check_inputs(args, names):
    for name in names:
        path = getattr(args, name, None)
        if path is not None and not Path(path).exists():
            raise UsageError(f"--{name}: file not found: {path}")


def cmd_synth(args, cfg):
    spec = replace(cfg.synth, seed=cfg.seed)
    videos, tubes = write_synthetic(args.out, spec, cfg.link)
    n_tubes = sum(len(t) for t in tubes.values())
    print(f"wrote {len(videos)} videos, {n_tubes} tubes' features to {args.out}")


def cmd_tubes(args, cfg):
    _check_inputs(args, ["det"])
    dets = load_detections(args.det)
    by_video = build_tubes(dets, cfg.link, threads=cfg.threads)
    tubes = [t for ts in by_video.values() for t in ts]
    save_tubes(args.out, tubes)
    print(f"wrote {len(tubes)} tubes for {len(by_video)} videos to {args.out}")


def _dataset(args, cfg, split, need_videolets=True):
    _check_inputs(args, ["tubes", "features", "gt", "det", "checkpoint"])
    return load_dataset(args.tubes, args.features, args.gt, args.det, cfg.segments, cfg.train.cap,
                        split, need_videolets)


def cmd_train(args, cfg):
    data = _dataset(args, cfg, args.split)
    tcfg = replace(cfg.train, seed=cfg.seed)
    t0 = time.perf_counter()

    def progress(it, losses):
        if it % 50 == 0 or it == tcfg.iterations:
            log.info("iter %d  temporal %.4f  tube %.4f  (%.1fs)", it, losses["temporal"][2],
                     losses["tube"][2], time.perf_counter() - t0)

    result = train(data.bags, tcfg, log=progress)
    out = Path(args.out)
    save_checkpoint(out / "checkpoint.stck", result.nets, tcfg.seed, tcfg.iterations)
    write_trace(out / "loss.csv", result.trace)
    print(f"trained {tcfg.iterations} iterations on {len(data.bags)} videos; wrote {out / 'checkpoint.stck'}")


def cmd_infer(args, cfg):
    data = _dataset(args, cfg, args.split, need_videolets=False)
    nets, _, _ = load_checkpoint(args.checkpoint)
    inferences = run_infer(data, nets, cfg.M)
    save_predictions(args.out, inferences)
    print(f"wrote {len(inferences)} predictions to {args.out}")


def cmd_eval(args, cfg):
    data = _dataset(args, cfg, args.split)
    nets, _, _ = load_checkpoint(args.checkpoint)
    report = evaluate(data, nets, cfg)
    report.save(args.out, args.csv)
    fmt = lambda v: "n/a" if v is None else f"{v:.4f}"
    print(f"VAUC {fmt(report.vauc)}  MIoU {fmt(report.miou)}  frame AUC {fmt(report.frame_auc)}  "
          f"FAR {fmt(report.false_alarm_rate)}")


def cmd_gradcheck(args, cfg):
    if args.dim % args.heads:
        raise UsageError("--dim must be divisible by --heads")
    worst = 0.0
    for k in range(args.seeds):
        errs = gradcheck_case(cfg.seed + k, n=args.n, dim=args.dim, heads=args.heads)
        e = max(errs.values())
        worst = max(worst, e)
        print(f"seed {cfg.seed + k}: max relative error {e:.3e} {'ok' if e < args.tol else 'FAIL'}")
    print(f"worst {worst:.3e} (tolerance {args.tol:g})")
    if worst >= args.tol:
        raise DataError("gradient check failed")


COMMANDS = {"synth": cmd_synth, "tubes": cmd_tubes, "train": cmd_train, "infer": cmd_infer,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        log.debug("kernel backend: %s", kernels.BACKEND)
        try:
            cfg = resolve_config(args)
        except DataError:
            raise
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, TypeError) as exc:
        # DataError is a ValueError; invalid parameter values land here too.
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
