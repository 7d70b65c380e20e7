import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tubemil import kernels
from tubemil.geometry import iou
from tubemil.kernels import _fallback

try:
    from tubemil.kernels import _ckernels
except ImportError:  # pragma: no cover - build without a compiler
    _ckernels = None

needs_c = pytest.mark.skipif(_ckernels is None, reason="compiled kernels not built")


@st.composite
def box_arrays(draw, max_n=6):
    n = draw(st.integers(0, max_n))
    xy = draw(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20), st.integers(0, 8), st.integers(0, 8)),
                       min_size=n, max_size=n))
    return np.array([[x, y, x + w, y + h] for x, y, w, h in xy], dtype=np.float64).reshape(-1, 4)


def test_backend_name():
    assert kernels.BACKEND in ("cython", "python")


@given(box_arrays(max_n=1).filter(len), box_arrays())
def test_fallback_iou_matches_scalar(one, many):
    got = _fallback.iou_one_to_many(one[0], many)
    assert np.array_equal(got, [iou(one[0], b) for b in many])


@needs_c
@given(box_arrays(max_n=1).filter(len), box_arrays())
def test_compiled_iou_matches_fallback(one, many):
    assert np.array_equal(_ckernels.iou_one_to_many(one[0], many), _fallback.iou_one_to_many(one[0], many))


@needs_c
@given(box_arrays(), box_arrays())
def test_compiled_iou_matrix_matches_fallback(a, b):
    assert np.array_equal(_ckernels.iou_matrix(a, b), _fallback.iou_matrix(a, b))


@needs_c
@settings(max_examples=300)
@given(box_arrays(max_n=1).filter(len), box_arrays(),
       st.lists(st.sampled_from([0.5, 0.7, 0.9]), min_size=6, max_size=6),
       st.sampled_from([0.0, 0.1, 0.3]), st.sampled_from([0.0, 2.0]))
def test_compiled_best_link_matches_fallback(one, cands, scores, lam, eta):
    s = np.array(scores[:len(cands)])
    assert _ckernels.best_link(one[0], 0.8, cands, s, lam, eta) == _fallback.best_link(one[0], 0.8, cands, s, lam, eta)


@needs_c
@given(box_arrays().filter(len), box_arrays(), st.sampled_from([0.0, 0.1, 0.5]))
def test_compiled_any_overlap_matches_fallback(members, cands, lam):
    a = np.asarray(_ckernels.any_overlap(members, cands, lam), dtype=bool)
    assert np.array_equal(a, _fallback.any_overlap(members, cands, lam))


def test_best_link_first_maximum_wins():
    box = np.array([0.0, 0.0, 2.0, 2.0])
    cands = np.array([[0, 0, 2, 2], [0, 0, 2, 2]], dtype=np.float64)
    for impl in filter(None, (_fallback, _ckernels)):
        assert impl.best_link(box, 0.5, cands, np.array([0.7, 0.7]), 0.1, 2.0) == 0
        assert impl.best_link(box, 0.5, cands, np.array([0.7, 0.8]), 0.1, 2.0) == 1


def test_best_link_gate_is_strict():
    box = np.array([0.0, 0.0, 2.0, 1.0])
    cands = np.array([[1.0, 0.0, 3.0, 1.0]])  # IoU exactly 1/3
    for impl in filter(None, (_fallback, _ckernels)):
        assert impl.best_link(box, 0.5, cands, np.array([0.5]), 1 / 3, 2.0) == -1
        assert impl.best_link(box, 0.5, cands, np.array([0.5]), 0.3, 2.0) == 0


def test_empty_candidates():
    for impl in filter(None, (_fallback, _ckernels)):
        assert impl.best_link(np.zeros(4), 0.5, np.zeros((0, 4)), np.zeros(0), 0.1, 2.0) == -1
        assert len(impl.iou_one_to_many(np.array([0, 0, 1, 1.0]), np.zeros((0, 4)))) == 0
