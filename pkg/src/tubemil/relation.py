"""Branch scoring network: multi-head self-attention with a residual, then a 3-layer predictor.

Features are column-major as in the model definition: ``F`` has shape
``(dim, n)``, one column per instance.  The forward pass caches what the
hand-written backward pass needs.

Checkpoint layout (little-endian)::

    b"STCK"  u32 version=1  u32 header_bytes  header (UTF-8 JSON)  float64 tensors

The header records ``seed``, ``iteration`` and, per branch (in ``order``),
the dims, head count, hidden sizes, dropout rate and the ``[name, shape]``
list of tensors, which follow in exactly that order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .jsonl import DataError

EPS = 1e-7
TUBE, TEMPORAL = "tube", "temporal"

_MAGIC = b"STCK"
_VERSION = 1
_ATTN = ("wq", "wk", "wv")
_PRED = ("w1", "b1", "w2", "b2", "w3", "b3")


def softmax_rows(s: np.ndarray) -> np.ndarray:
    """Softmax along the last axis with max subtraction."""
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


def scaled_dot_attention(Q, K, V):
    """``Softmax(Q^T K / sqrt(d_q)) V^T`` for ``Q, K, V`` of shape ``(d_q, n)``; returns ``(n, d_q)``."""
    Q, K, V = (np.asarray(x, dtype=np.float64) for x in (Q, K, V))
    if not Q.shape == K.shape == V.shape:
        raise ValueError(f"Q, K, V shapes differ: {Q.shape}, {K.shape}, {V.shape}")
    A = softmax_rows(Q.T @ K / np.sqrt(Q.shape[0]))
    return A @ V.T


def glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class AttentionParams:
    """Per-head projections stacked on the first axis: each of shape ``(heads, dim // heads, dim)``."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray

    def __post_init__(self):
        if not self.wq.shape == self.wk.shape == self.wv.shape or self.wq.ndim != 3:
            raise ValueError("projection tensors must share a (heads, dim/heads, dim) shape")
        h, dh, d = self.wq.shape
        if h * dh != d:
            raise ValueError(f"dim {d} is not heads {h} x head dim {dh}")

    @property
    def heads(self) -> int:
        return self.wq.shape[0]

    @property
    def dim(self) -> int:
        return self.wq.shape[2]

    @classmethod
    def init(cls, dim, heads, rng):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        dh = dim // heads
        return cls(*(glorot(rng, (heads, dh, dim), dim, dh) for _ in range(3)))


def multi_head_self_attention(F, params: AttentionParams, cache=None):
    """Heads' attention outputs stacked back into a ``(dim, n)`` matrix (no output projection)."""
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] != params.dim:
        raise ValueError(f"features of shape {F.shape} do not match dim {params.dim}")
    h, dh, d = params.wq.shape
    n = F.shape[1]
    Q = params.wq @ F  # (h, dh, n)
    K = params.wk @ F
    V = params.wv @ F
    A = softmax_rows(Q.transpose(0, 2, 1) @ K / np.sqrt(dh))  # (h, n, n)
    heads_out = A @ V.transpose(0, 2, 1)  # (h, n, dh): h_j
    out = heads_out.transpose(0, 2, 1).reshape(d, n)  # rows j*dh:(j+1)*dh hold h_j^T
    if cache is not None:
        cache.update(Q=Q, K=K, V=V, A=A)
    return out


def self_attentive_features(F, params: AttentionParams, cache=None):
    F = np.asarray(F, dtype=np.float64)
    return multi_head_self_attention(F, params, cache) + F


def pad_stack(mats):
    """Stack ``(dim, n_i)`` matrices into ``(bags, dim, max n)`` plus the ``(bags, max n)`` real-column mask."""
    n = max(m.shape[1] for m in mats)
    F = np.zeros((len(mats), mats[0].shape[0], n))
    mask = np.zeros((len(mats), n), dtype=bool)
    for i, m in enumerate(mats):
        F[i, :, :m.shape[1]] = m
        mask[i, :m.shape[1]] = True
    return F, mask


@dataclass
class PredictorParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    dropout: float = 0.6

    @classmethod
    def init(cls, dim, hidden, rng, dropout=0.6):
        h1, h2 = hidden
        return cls(
            glorot(rng, (h1, dim), dim, h1), np.zeros(h1),
            glorot(rng, (h2, h1), h1, h2), np.zeros(h2),
            glorot(rng, (1, h2), h2, 1), np.zeros(1),
            dropout,
        )

    @property
    def hidden(self):
        return self.w1.shape[0], self.w2.shape[0]


class BranchNet:
    """Parameters and forward/backward of one branch (tube or temporal)."""

    def __init__(self, attention: AttentionParams, predictor: PredictorParams, branch: str = TUBE):
        if branch not in (TUBE, TEMPORAL):
            raise ValueError(f"unknown branch {branch!r}")
        self.attention = attention
        self.predictor = predictor
        self.branch = branch

    @classmethod
    def init(cls, dim, heads=8, hidden=(512, 32), dropout=0.6, branch=TUBE, seed=0):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        att = AttentionParams.init(dim, heads, rng)
        pred = PredictorParams.init(dim, hidden, rng, dropout)
        return cls(att, pred, branch)

    @property
    def dim(self) -> int:
        return self.attention.dim

    def tensors(self) -> dict:
        """Name -> parameter array; the arrays are the live parameters."""
        out = {k: getattr(self.attention, k) for k in _ATTN}
        out.update({k: getattr(self.predictor, k) for k in _PRED})
        return out

    def copy(self) -> "BranchNet":
        t = {k: v.copy() for k, v in self.tensors().items()}
        return BranchNet(
            AttentionParams(t["wq"], t["wk"], t["wv"]),
            PredictorParams(*(t[k] for k in _PRED), dropout=self.predictor.dropout),
            self.branch,
        )

    def forward(self, F, train=False, rng=None):
        """Scores in (0, 1) for each column of ``F`` (dim, n), and the cache for :meth:`backward`."""
        F = np.asarray(F, dtype=np.float64)
        if F.ndim != 2:
            raise ValueError(f"expected a (dim, n) matrix, got shape {F.shape}")
        scores, cache = self.forward_batch(F[None], None, train, rng)
        return scores[0], cache

    def backward(self, cache, upstream):
        """Gradients of ``sum(upstream * scores)`` for every tensor and for ``F``."""
        g, dF = self.backward_batch(cache, np.asarray(upstream, dtype=np.float64)[None])
        return g, dF[0]

    def forward_batch(self, F, mask=None, train=False, rng=None):
        """Score a stack of bags ``F`` (bags, dim, n) in one pass.

        ``mask`` (bags, n) marks real instances; padded columns are excluded
        as attention keys and their scores are meaningless.  Bags never
        attend to each other.
        """
        att, p = self.attention, self.predictor
        h, dh, d = att.wq.shape
        B, dF_, n = F.shape
        if dF_ != d:
            raise ValueError(f"features of dim {dF_} do not match network dim {d}")
        Fc = F.transpose(1, 0, 2).reshape(d, B * n)
        proj = lambda w: (w.reshape(d, d) @ Fc).reshape(h, dh, B, n).transpose(2, 0, 1, 3)
        Q, K, V = proj(att.wq), proj(att.wk), proj(att.wv)  # (B, h, dh, n)
        S = Q.transpose(0, 1, 3, 2) @ K / np.sqrt(dh)  # (B, h, n, n)
        if mask is not None:
            S = np.where(mask[:, None, None, :], S, -np.inf)
        A = softmax_rows(S)
        heads_out = A @ V.transpose(0, 1, 3, 2)  # (B, h, n, dh)
        Ft = heads_out.transpose(0, 1, 3, 2).reshape(B, d, n) + F
        Ftc = Ft.transpose(1, 0, 2).reshape(d, B * n)
        z1 = p.w1 @ Ftc + p.b1[:, None]
        a1 = np.maximum(z1, 0.0)
        m1 = m2 = None
        if train and p.dropout > 0:
            if rng is None:
                raise ValueError("train mode needs an rng for dropout masks")
            keep = 1.0 - p.dropout
            m1 = (rng.random(a1.shape) < keep) / keep
            a1 = a1 * m1
        z2 = p.w2 @ a1 + p.b2[:, None]
        a2 = np.maximum(z2, 0.0)
        if m1 is not None:
            m2 = (rng.random(a2.shape) < keep) / keep
            a2 = a2 * m2
        z3 = (p.w3 @ a2 + p.b3[:, None])[0]
        raw = sigmoid(z3)
        scores = np.clip(raw, EPS, 1.0 - EPS)
        cache = dict(Fc=Fc, shape=(B, n), Q=Q, K=K, V=V, A=A, Ftc=Ftc, z1=z1, a1=a1, m1=m1,
                     z2=z2, a2=a2, m2=m2, raw=raw, scores=scores)
        return scores.reshape(B, n), cache

    def backward_batch(self, cache, upstream):
        """Gradients of ``sum(upstream * scores)`` over a batch; ``upstream`` is (bags, n)."""
        p, att = self.predictor, self.attention
        h, dh, d = att.wq.shape
        B, n = cache["shape"]
        raw, scores = cache["raw"], cache["scores"]
        up = upstream.reshape(B * n)
        dz3 = (up * raw * (1.0 - raw) * (raw == scores))[None, :]
        g = {"w3": dz3 @ cache["a2"].T, "b3": dz3.sum(axis=1)}
        da2 = p.w3.T @ dz3
        if cache["m2"] is not None:
            da2 = da2 * cache["m2"]
        dz2 = da2 * (cache["z2"] > 0)
        g["w2"] = dz2 @ cache["a1"].T
        g["b2"] = dz2.sum(axis=1)
        da1 = p.w2.T @ dz2
        if cache["m1"] is not None:
            da1 = da1 * cache["m1"]
        dz1 = da1 * (cache["z1"] > 0)
        g["w1"] = dz1 @ cache["Ftc"].T
        g["b1"] = dz1.sum(axis=1)
        dFtc = p.w1.T @ dz1  # (d, B*n)

        Q, K, V, A, Fc = cache["Q"], cache["K"], cache["V"], cache["A"], cache["Fc"]
        d_heads = dFtc.reshape(h, dh, B, n).transpose(2, 0, 3, 1)  # (B, h, n, dh)
        dA = d_heads @ V
        dV = (A.transpose(0, 1, 3, 2) @ d_heads).transpose(0, 1, 3, 2)  # (B, h, dh, n)
        dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) / np.sqrt(dh)
        dQ = K @ dS.transpose(0, 1, 3, 2)
        dK = Q @ dS
        dFc = dFtc.copy()
        for name, dX in (("wq", dQ), ("wk", dK), ("wv", dV)):
            dXc = dX.transpose(1, 2, 0, 3).reshape(d, B * n)
            g[name] = (dXc @ Fc.T).reshape(h, dh, d)
            dFc += getattr(att, name).reshape(d, d).T @ dXc
        return g, dFc.reshape(d, B, n).transpose(1, 0, 2)


def predict_scores(F, net: BranchNet, mode="eval", rng_seed=None):
    """Per-instance abnormal scores; ``mode="train"`` applies dropout drawn from ``rng_seed``."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    rng = None
    if mode == "train":
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    return net.forward(F, train=mode == "train", rng=rng)[0]


def backward(F, net: BranchNet, upstream, mode="eval", rng_seed=None):
    """Forward then backward in one call; returns ``(param_grads, dF)``."""
    rng = None
    if mode == "train":
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    _, cache = net.forward(F, train=mode == "train", rng=rng)
    return net.backward(cache, upstream)


def finite_difference_check(net: BranchNet, F, upstream, step=1e-4):
    """Largest relative error between analytic and central-difference gradients.

    Relative error per entry is ``|a - f| / max(|a| + |f|, 1e-8)``.  Returns
    ``{name: max_rel_err}`` including ``"F"``.
    """
    F = np.array(F, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)

    def loss():
        return float(upstream @ net.forward(F)[0])

    grads, dF = net.backward(net.forward(F)[1], upstream)
    targets = dict(net.tensors())
    targets["F"] = F
    grads = dict(grads, F=dF)
    out = {}
    for name, arr in targets.items():
        fd = np.empty_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = arr[i]
            arr[i] = old + step
            up = loss()
            arr[i] = old - step
            down = loss()
            arr[i] = old
            fd[i] = (up - down) / (2 * step)
        a = grads[name]
        out[name] = float(np.max(np.abs(a - fd) / np.maximum(np.abs(a) + np.abs(fd), 1e-8)))
    return out


def gradcheck_case(seed, n=3, dim=4, heads=2, hidden=(3, 2), step=1e-4):
    """Random small network and input for the finite-difference suite."""
    rng = np.random.default_rng(seed)
    net = BranchNet.init(dim, heads, hidden, dropout=0.0, seed=rng)
    # Non-zero biases keep the test away from the all-zero-bias special case.
    for b in (net.predictor.b1, net.predictor.b2, net.predictor.b3):
        b[:] = rng.normal(0.0, 0.5, size=b.shape)
    F = rng.normal(size=(dim, n))
    upstream = rng.normal(size=n)
    return finite_difference_check(net, F, upstream, step)


def save_checkpoint(path, nets: dict, seed: int = 0, iteration: int = 0):
    """Write branches (name -> BranchNet) to an STCK checkpoint."""
    order = sorted(nets)
    header = {"seed": int(seed), "iteration": int(iteration), "order": order, "branches": {}}
    blobs = []
    for name in order:
        net = nets[name]
        tensors = net.tensors()
        header["branches"][name] = {
            "branch": net.branch,
            "dim": net.dim,
            "heads": net.attention.heads,
            "hidden": list(net.predictor.hidden),
            "dropout": net.predictor.dropout,
            "tensors": [[k, list(v.shape)] for k, v in tensors.items()],
        }
        blobs.extend(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in tensors.values())
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(hdr)))
        fh.write(hdr)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path):
    """Returns ``(nets, seed, iteration)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise DataError(f"{path}: not an STCK checkpoint")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise DataError(f"{path}: corrupt checkpoint header") from None
    off = 12 + hlen
    nets = {}
    for name in header["order"]:
        spec = header["branches"][name]
        t = {}
        for key, shape in spec["tensors"]:
            count = int(np.prod(shape)) if shape else 1
            if off + 8 * count > len(raw):
                raise DataError(f"{path}: truncated checkpoint")
            t[key] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
            off += 8 * count
        nets[name] = BranchNet(
            AttentionParams(t["wq"], t["wk"], t["wv"]),
            PredictorParams(*(t[k] for k in _PRED), dropout=spec["dropout"]),
            spec["branch"],
        )
    if off != len(raw):
        raise DataError(f"{path}: trailing bytes in checkpoint")
    return nets, header["seed"], header["iteration"]
