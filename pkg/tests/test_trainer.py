import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import load_split
from tubemil.relation import EPS, TEMPORAL, TUBE, BranchNet
from tubemil.trainer import (Adam, BagArrays, PairLoss, TrainConfig, TrainState, _first_argmax, combined_loss,
                             cross_entropy_loss, guidance_score, make_pairs, phase_gradients, read_trace,
                             run_phase, select_max_instance, temporal_mg_rank_loss, train, train_step,
                             tube_mg_rank_loss, write_trace)

unit = st.floats(1e-6, 1 - 1e-6)
SMALL = dict(heads=2, hidden=(16, 4), pos_per_batch=4, neg_per_batch=4)


@pytest.fixture(scope="module")
def bags(small_corpus):
    return [BagArrays(b) for b in load_split(small_corpus, "train").bags]


def tensors(net):
    return {k: v.copy() for k, v in net.tensors().items()}


def same(a, b):
    return all(np.array_equal(a[k], b[k]) for k in a)


def test_rank_loss_examples():
    assert tube_mg_rank_loss(0.0, 0.3, 0.9) == 0.0
    assert tube_mg_rank_loss(1.0, 1.0, 0.0) == 0.0
    assert tube_mg_rank_loss(1.0, 0.2, 0.9) == pytest.approx(1.7, abs=1e-12)
    assert temporal_mg_rank_loss(0.0, 0.3, 0.9) == 0.0
    assert temporal_mg_rank_loss(0.5, 1.0, 0.0) == 0.0
    assert temporal_mg_rank_loss(0.8, 0.3, 0.4) == pytest.approx(0.88, abs=1e-12)


@given(unit, unit, unit)
def test_rank_losses_nonnegative(g, a, b):
    assert tube_mg_rank_loss(g, a, b) >= 0.0 and temporal_mg_rank_loss(g, a, b) >= 0.0


def test_cross_entropy_examples():
    assert cross_entropy_loss(1 - EPS, EPS, 1 - EPS, EPS) == pytest.approx(4 * -math.log(1 - EPS), abs=1e-12)
    assert cross_entropy_loss(0.5, 0.5, 0.5, 0.5) == pytest.approx(4 * math.log(2), abs=1e-12)
    assert cross_entropy_loss(pv_pos=0.5, pv_neg=0.5) == pytest.approx(2 * math.log(2), abs=1e-12)
    assert math.isfinite(cross_entropy_loss(0.0, 1.0))


def test_combined_loss_gating_and_example():
    p = PairLoss(tube_rank=1.7, tem_rank=5.0, tube_ce=2 * math.log(2), tem_ce=9.0)
    assert combined_loss(1, [p]) == pytest.approx(3.0863, abs=1e-4)
    assert combined_loss(1, [p]) == pytest.approx(1.7 + 2 * math.log(2), abs=1e-12)
    assert combined_loss(0, [p]) == pytest.approx(5.0 + 9.0, abs=1e-12)
    q = PairLoss(tube_rank=0.3, tube_ce=0.1)
    assert combined_loss(1, [p, q]) == pytest.approx((1.7 + 2 * math.log(2) + 0.4) / 2, abs=1e-12)
    assert combined_loss(1, []) == 0.0
    with pytest.raises(ValueError):
        combined_loss(2, [p])


def test_adam_first_step():
    for g in (0.37, -2.5, 1e-3):
        p = {"w": np.array([1.0])}
        Adam(lr=5e-4).step(p, {"w": np.array([g])})
        expected = 1.0 - 5e-4 * g / (math.sqrt(g * g) + 1e-8)
        assert p["w"][0] == pytest.approx(expected, abs=1e-15)
        # The sign approximation is off by at most lr * eps / |g|.
        assert abs(p["w"][0] - (1.0 - 5e-4 * math.copysign(1, g))) <= 5e-4 * 1e-8 / abs(g) + 1e-15


def test_adam_second_step_bias_correction():
    p = {"w": np.array([0.0])}
    opt = Adam(lr=0.1)
    opt.step(p, {"w": np.array([1.0])})
    opt.step(p, {"w": np.array([3.0])})
    m = (0.1 * 0.9 * 1 + 0.1 * 3) / (1 - 0.9 ** 2)
    v = (0.001 * 0.999 * 1 + 0.001 * 9) / (1 - 0.999 ** 2)
    assert p["w"][0] == pytest.approx(-0.1 * (1 / (1 + 1e-8)) - 0.1 * m / (math.sqrt(v) + 1e-8), abs=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)
    with pytest.raises(ValueError):
        TrainConfig(pos_per_batch=0)
    assert TrainConfig().lr == 5e-4 and TrainConfig().pos_per_batch == 30


def test_first_argmax_ties_to_lowest_id():
    assert _first_argmax(np.array([0.5]), ["a"]) == 0
    assert _first_argmax(np.array([0.1, 0.9, 0.4]), ["a", "b", "c"]) == 1
    assert _first_argmax(np.array([0.5, 0.5]), ["b", "a"]) == 1


def test_select_max_instance(bags):
    net = BranchNet.init(16, 2, (8, 4), branch=TUBE, seed=0)
    sel = select_max_instance(bags[0], net)
    assert sel.score == sel.scores.max() and sel.instance_id == bags[0].tube_ids[sel.index]
    tem = BranchNet.init(16, 2, (8, 4), branch=TEMPORAL, seed=0)
    assert select_max_instance(bags[0], tem).instance_id in bags[0].videolet_ids


def test_zero_learning_rate_keeps_parameters(bags):
    pos = [b for b in bags if b.bag.is_positive][:3]
    neg = [b for b in bags if not b.bag.is_positive][:3]
    state = TrainState.fresh(16, TrainConfig(lr=0.0, **SMALL))
    before = {b: tensors(n) for b, n in state.nets.items()}
    losses = train_step(pos, neg, state)
    assert all(same(before[b], state.nets[b].tensors()) for b in before)
    assert losses[TUBE][2] > 0 and losses[TEMPORAL][2] > 0


def test_freeze_contract(bags):
    pos = [b for b in bags if b.bag.is_positive][:4]
    neg = [b for b in bags if not b.bag.is_positive][:4]
    pairs = make_pairs(pos, neg)
    state = TrainState.fresh(16, TrainConfig(**SMALL))
    for _ in range(2):
        tube_before, tem_before = tensors(state.nets[TUBE]), tensors(state.nets[TEMPORAL])
        run_phase(state, pairs, TEMPORAL)
        assert same(tube_before, state.nets[TUBE].tensors())
        assert not same(tem_before, state.nets[TEMPORAL].tensors())
        tem_after = tensors(state.nets[TEMPORAL])
        run_phase(state, pairs, TUBE)
        assert same(tem_after, state.nets[TEMPORAL].tensors())
        assert not same(tube_before, state.nets[TUBE].tensors())


def test_alternation_counts(bags):
    result = train([b.bag for b in bags], TrainConfig(iterations=6, seed=1, **SMALL))
    assert result.state.optimizers[TUBE].t == 6 and result.state.optimizers[TEMPORAL].t == 6
    assert [row[1] for row in result.trace] == [TEMPORAL, TUBE] * 6


def _phase_loss_fixed_guidance(net, pairs, branch, guides):
    total = 0.0
    for (pos, neg), g in zip(pairs, guides):
        a = net.forward(pos.inputs(branch)[0])[0].max()
        b = net.forward(neg.inputs(branch)[0])[0].max()
        total += max(0.0, g * (1 - a + b)) - math.log(a) - math.log(1 - b)
    return total / len(pairs)


@pytest.mark.parametrize("branch", [TUBE, TEMPORAL])
def test_gradient_at_fixed_guidance(bags, branch):
    pos = [b for b in bags if b.bag.is_positive][:3]
    neg = [b for b in bags if not b.bag.is_positive][:3]
    pairs = make_pairs(pos, neg)
    state = TrainState.fresh(16, TrainConfig(dropout=0.0, **SMALL))
    net = state.nets[branch]
    frozen = state.nets[TEMPORAL if branch == TUBE else TUBE]
    guides = [guidance_score(frozen, p, select_max_instance(p, net).index) for p, _ in pairs]
    grads, losses = phase_gradients(state, pairs, branch, train=False)
    assert losses[2] == pytest.approx(_phase_loss_fixed_guidance(net, pairs, branch, guides), rel=1e-10)
    rng = np.random.default_rng(0)
    for name in ("w1", "wq", "b3"):
        arr = net.tensors()[name]
        for _ in range(3):
            i = tuple(int(rng.integers(0, s)) for s in arr.shape)
            old = arr[i]
            arr[i] = old + 1e-6
            up = _phase_loss_fixed_guidance(net, pairs, branch, guides)
            arr[i] = old - 1e-6
            down = _phase_loss_fixed_guidance(net, pairs, branch, guides)
            arr[i] = old
            fd = (up - down) / 2e-6
            assert abs(fd - grads[name][i]) <= 1e-5 * max(1.0, abs(fd)), (name, i)
    # The frozen branch moves the loss through the guidance only.
    frozen.predictor.b3 += 1.0
    _, shifted = phase_gradients(state, pairs, branch, train=False)
    assert shifted[2] != losses[2] and shifted[1] == losses[1]


def test_bags_without_tubes_are_skipped(bags):
    pos = [b for b in bags if b.bag.is_positive][:2]
    neg = [b for b in bags if not b.bag.is_positive][:2]
    empty = BagArrays(type(pos[0].bag)(pos[0].bag.video_id, "positive", [], pos[0].bag.videolet_instances))
    state = TrainState.fresh(16, TrainConfig(**SMALL))
    _, losses = phase_gradients(state, make_pairs([empty, pos[1]], neg), TUBE)
    assert losses[3] == 1
    _, losses = phase_gradients(state, make_pairs([empty, pos[1]], neg), TEMPORAL)
    assert losses[3] == 2


def test_training_needs_both_classes(bags):
    with pytest.raises(ValueError):
        train([b.bag for b in bags if b.bag.is_positive], TrainConfig(iterations=1, **SMALL))
    with pytest.raises(ValueError):
        make_pairs([], [])


def test_zero_iterations_returns_initialization(bags):
    cfg = TrainConfig(iterations=0, seed=5, **SMALL)
    result = train([b.bag for b in bags], cfg)
    init = TrainState.fresh(16, cfg)
    for b in (TUBE, TEMPORAL):
        assert same(tensors(init.nets[b]), result.nets[b].tensors())
    assert result.trace == []


def test_training_is_deterministic_and_trace_round_trips(bags, tmp_path):
    cfg = TrainConfig(iterations=5, seed=9, **SMALL)
    a = train([b.bag for b in bags], cfg)
    b = train([b.bag for b in bags], cfg)
    assert a.trace == b.trace
    write_trace(tmp_path / "loss.csv", a.trace)
    assert read_trace(tmp_path / "loss.csv") == a.trace
    assert (tmp_path / "loss.csv").read_text().splitlines()[0] == "iteration,phase,rank_loss,ce_loss,total"


def test_converged_run_orders_max_scores(bags):
    result = train([b.bag for b in bags], TrainConfig(iterations=150, seed=0, **SMALL))
    for branch in (TUBE, TEMPORAL):
        net = result.nets[branch]
        pos = [select_max_instance(b, net).score for b in bags if b.bag.is_positive]
        neg = [select_max_instance(b, net).score for b in bags if not b.bag.is_positive]
        assert np.mean(pos) > np.mean(neg), branch
