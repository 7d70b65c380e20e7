"""Alternating two-branch MIL training with mutually guided ranking losses.

Each iteration samples positive and negative bags, pairs them by position,
then runs two phases.  The temporal phase freezes the tube branch and uses
its score of the positive max videolet as the hinge weight; the tube phase
freezes the temporal branch and uses its score of the positive max tube's
image-level feature.  Each phase takes one Adam step on its own branch.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .instances import InstanceBag
from .relation import EPS, TEMPORAL, TUBE, BranchNet, pad_stack

PHASES = (TEMPORAL, TUBE)  # listing order: temporal first


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    pos_per_batch: int = 30
    neg_per_batch: int = 30
    cap: int = 200
    iterations: int = 500
    seed: int = 0
    heads: int = 8
    hidden: tuple = (512, 32)
    dropout: float = 0.6

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.pos_per_batch < 1 or self.neg_per_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


class Adam:
    """Adaptive moment estimation with bias correction; one instance per branch."""

    def __init__(self, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p -= self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


# -- losses ---------------------------------------------------------------

def tube_mg_rank_loss(pv_guide, pt_pos, pt_neg):
    """Hinge on the tube branch's max instances, weighted by the temporal branch's score."""
    return max(0.0, pv_guide * (1.0 - pt_pos + pt_neg))


def temporal_mg_rank_loss(pt_guide, pv_pos, pv_neg):
    return max(0.0, pt_guide * (1.0 - pv_pos + pv_neg))


def _clamp(p):
    return min(max(p, EPS), 1.0 - EPS)


def cross_entropy_loss(pt_pos=None, pt_neg=None, pv_pos=None, pv_neg=None):
    """Binary cross-entropy of max-instance scores against bag labels.

    Pass only one branch's pair to get that branch's terms.
    """
    total = 0.0
    for pos, neg in ((pt_pos, pt_neg), (pv_pos, pv_neg)):
        if pos is None and neg is None:
            continue
        total -= math.log(_clamp(pos)) + math.log(1.0 - _clamp(neg))
    return total


@dataclass
class PairLoss:
    tube_rank: float = 0.0
    tem_rank: float = 0.0
    tube_ce: float = 0.0
    tem_ce: float = 0.0


def combined_loss(psi: int, pairs) -> float:
    """Gated rank loss plus the active branch's cross-entropy, averaged over pairs."""
    if psi not in (0, 1):
        raise ValueError("psi must be 0 or 1")
    pairs = list(pairs)
    if not pairs:
        return 0.0
    total = 0.0
    for p in pairs:
        total += psi * p.tube_rank + (1 - psi) * p.tem_rank
        total += p.tube_ce if psi == 1 else p.tem_ce
    return total / len(pairs)


# -- max instances --------------------------------------------------------

@dataclass
class MaxInstanceSelection:
    video_id: str
    instance_id: str
    index: int
    score: float
    scores: np.ndarray = field(repr=False)


class BagArrays:
    """Column-major feature matrices of a bag, built once."""

    def __init__(self, bag: InstanceBag):
        self.bag = bag
        self.region = bag.region_matrix().T if bag.tube_instances else None
        self.image = None
        if bag.tube_instances and all(t.image is not None for t in bag.tube_instances):
            self.image = bag.image_matrix().T
        self.videolet = bag.videolet_matrix().T if bag.videolet_instances else None
        self.tube_ids = [t.region.id for t in bag.tube_instances]
        self.videolet_ids = [v.id for v in bag.videolet_instances]

    def inputs(self, branch):
        return (self.region, self.tube_ids) if branch == TUBE else (self.videolet, self.videolet_ids)


def select_max_instance(bag, net: BranchNet, train=False, rng=None) -> Optional[MaxInstanceSelection]:
    """Max-scoring instance of ``bag`` under ``net``; ``None`` if the bag has none of that kind.

    The tube branch ranks region-level tube instances, the temporal branch
    ranks videolets.  Ties go to the lowest instance id.
    """
    arrays = bag if isinstance(bag, BagArrays) else BagArrays(bag)
    X, ids = arrays.inputs(net.branch)
    if X is None:
        return None
    scores, _ = net.forward(X, train=train, rng=rng)
    i = _first_argmax(scores, ids)
    return MaxInstanceSelection(arrays.bag.video_id, ids[i], i, float(scores[i]), scores)


def _first_argmax(scores, ids):
    best = scores.max()
    return min((i for i in range(len(scores)) if scores[i] == best), key=lambda i: ids[i])


def _guidance_input(frozen: BranchNet, pos: BagArrays, index: int):
    if frozen.branch == TUBE:
        extra = pos.videolet[:, index:index + 1]
        context = pos.region
    else:
        extra = pos.image[:, index:index + 1]
        context = pos.videolet
    return extra if context is None else np.hstack([context, extra])


def guidance_score(frozen: BranchNet, pos: BagArrays, index: int) -> float:
    """Frozen-branch score of the positive bag's max instance from the other branch.

    The instance is appended to the frozen branch's own instance set of the
    same video so its attention context is that video.
    """
    return float(frozen.forward(_guidance_input(frozen, pos, index))[0][-1])


# -- training -------------------------------------------------------------

@dataclass
class TrainState:
    nets: dict
    optimizers: dict
    rng: np.random.Generator  # dropout masks
    iteration: int = 0

    @classmethod
    def fresh(cls, dim, config: TrainConfig):
        seeds = np.random.SeedSequence(config.seed).spawn(3)
        nets = {
            b: BranchNet.init(dim, config.heads, config.hidden, config.dropout, b,
                              np.random.default_rng(s))
            for b, s in zip((TUBE, TEMPORAL), seeds[:2])
        }
        opts = {b: Adam(config.lr, config.beta1, config.beta2, config.eps) for b in nets}
        return cls(nets, opts, np.random.default_rng(seeds[2]))


def phase_gradients(state: TrainState, pairs, branch, train=True):
    """Gradients of the branch's phase loss (pair-averaged) with the other branch frozen.

    Returns ``(grads, (rank, ce, total, used_pairs))``.  Pairs whose bags
    lack instances of the needed kind are skipped.  All bags of the phase go
    through the network as one padded batch.
    """
    net = state.nets[branch]
    frozen = state.nets[TEMPORAL if branch == TUBE else TUBE]
    grads = {k: np.zeros_like(v) for k, v in net.tensors().items()}
    valid = []
    for pos, neg in pairs:
        if pos.inputs(branch)[0] is None or neg.inputs(branch)[0] is None:
            continue
        if branch == TUBE and pos.image is None:
            continue
        valid.append((pos, neg))
    used = len(valid)
    if not used:
        return grads, (0.0, 0.0, 0.0, 0)
    bags = [p for p, _ in valid] + [n for _, n in valid]
    F, mask = pad_stack([b.inputs(branch)[0] for b in bags])
    scores, cache = net.forward_batch(F, mask, train=train, rng=state.rng if train else None)
    top = [_first_argmax(scores[i, :mask[i].sum()], b.inputs(branch)[1]) for i, b in enumerate(bags)]
    G, gmask = pad_stack([_guidance_input(frozen, p, top[i]) for i, (p, _) in enumerate(valid)])
    gscores, _ = frozen.forward_batch(G, gmask)
    last = gmask.sum(axis=1) - 1
    upstream = np.zeros_like(scores)
    rank_sum = ce_sum = 0.0
    for i in range(used):
        j = used + i
        g = float(gscores[i, last[i]])
        a, b = float(scores[i, top[i]]), float(scores[j, top[j]])
        rank = max(0.0, g * (1.0 - a + b))
        active = rank > 0.0
        upstream[i, top[i]] = ((-g if active else 0.0) - 1.0 / a) / used
        upstream[j, top[j]] = ((g if active else 0.0) + 1.0 / (1.0 - b)) / used
        rank_sum += rank
        ce_sum += cross_entropy_loss(pv_pos=a, pv_neg=b)
    grads, _ = net.backward_batch(cache, upstream)
    rank_sum /= used
    ce_sum /= used
    return grads, (rank_sum, ce_sum, rank_sum + ce_sum, used)


def run_phase(state: TrainState, pairs, branch):
    grads, losses = phase_gradients(state, pairs, branch, train=True)
    if losses[3]:
        state.optimizers[branch].step(state.nets[branch].tensors(), grads)
    return losses


def make_pairs(pos_bags, neg_bags):
    if not pos_bags or not neg_bags:
        raise ValueError("empty batch")
    return list(zip(pos_bags, neg_bags))


def train_step(pos_bags, neg_bags, state: TrainState):
    """One iteration: temporal phase then tube phase.  Returns ``{branch: (rank, ce, total, pairs)}``."""
    pairs = make_pairs(pos_bags, neg_bags)
    out = {b: run_phase(state, pairs, b) for b in PHASES}
    state.iteration += 1
    return out


@dataclass
class TrainResult:
    nets: dict
    trace: list  # rows (iteration, phase, rank_loss, ce_loss, total)
    state: TrainState


def train(bags, config: TrainConfig = TrainConfig(), log=None) -> TrainResult:
    """Train both branches on positive/negative bags, sampling batches with replacement."""
    arrays = [b if isinstance(b, BagArrays) else BagArrays(b) for b in bags]
    pos = [a for a in arrays if a.bag.is_positive]
    neg = [a for a in arrays if not a.bag.is_positive]
    if not pos or not neg:
        raise ValueError("training needs at least one positive and one negative video")
    dims = {m.shape[0] for a in arrays for m in (a.region, a.videolet) if m is not None}
    if len(dims) != 1:
        raise ValueError(f"inconsistent feature dims {sorted(dims)}")
    state = TrainState.fresh(dims.pop(), config)
    sampler = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(4)[3])
    trace = []
    for it in range(1, config.iterations + 1):
        ip = sampler.integers(0, len(pos), size=config.pos_per_batch)
        ineg = sampler.integers(0, len(neg), size=config.neg_per_batch)
        losses = train_step([pos[i] for i in ip], [neg[i] for i in ineg], state)
        for phase in PHASES:
            rank, ce, total, _ = losses[phase]
            trace.append((it, phase, rank, ce, total))
        if log is not None:
            log(it, losses)
    return TrainResult(state.nets, trace, state)


def write_trace(path, trace):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "phase", "rank_loss", "ce_loss", "total"])
        for it, phase, rank, ce, total in trace:
            w.writerow([it, phase, repr(float(rank)), repr(float(ce)), repr(float(total))])


def read_trace(path):
    with Path(path).open(newline="") as fh:
        return [(int(r["iteration"]), r["phase"], float(r["rank_loss"]), float(r["ce_loss"]), float(r["total"]))
                for r in csv.DictReader(fh)]
