"""Dense-tensor compute graph with reverse-mode differentiation.

Covers exactly the operator set the driving networks need: valid 2-D
convolution, affine layers, a fused LSTM step, ReLU, softmax cross-entropy,
weighted mean absolute error, and a handful of shape/arithmetic plumbing ops.
Every op appends a record (kind, input ids, output id, saved intermediates)
to its graph; ``Graph.replay`` re-executes the records in order and
``backward`` walks them in exact reverse.  ``grad_check`` compares analytic
gradients against central finite differences.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives tensors whose shapes cannot combine."""


class Tensor:
    """One node of a compute graph: a dense array plus a grad slot.

    Tensors are created through :meth:`Graph.tensor` (leaves) or by applying
    ops; they are never detached from their graph.  ``grad`` is ``None``
    until ``backward`` runs.
    """

    __slots__ = ("graph", "node_id", "data", "grad", "is_param", "name")

    def __init__(self, graph, node_id, data, is_param=False, name=None):
        self.graph = graph
        self.node_id = node_id
        self.data = data
        self.grad = None
        self.is_param = is_param
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(id={self.node_id}, shape={self.data.shape}{tag})"


@dataclass
class OpRecord:
    """Book-keeping for one applied op, enough to replay it or reverse it."""

    kind: str
    input_ids: list[int]
    output_id: int
    run: object          # run(rec, *input_arrays) -> output array
    back: object         # back(rec, grad_out, *input_arrays) -> per-input grads
    saved: dict = field(default_factory=dict)


class Graph:
    """Ordered op tape over numpy arrays.

    ``dtype`` fixes the arithmetic precision of every tensor in the graph;
    models train in float32, gradient checks build float64 graphs.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
            raise ValueError(f"unsupported graph dtype {dtype!r}")
        self.nodes: list[Tensor] = []
        self.records: list[OpRecord] = []

    def tensor(self, data, *, param=False, name=None) -> Tensor:
        # always copies: graph leaves must never alias caller arrays
        arr = np.array(data, dtype=self.dtype, order="C")
        t = Tensor(self, len(self.nodes), arr, is_param=param, name=name)
        self.nodes.append(t)
        return t

    def params(self) -> list[Tensor]:
        return [t for t in self.nodes if t.is_param]

    def _apply(self, kind, inputs, run, back, saved=None) -> Tensor:
        for t in inputs:
            if t.graph is not self:
                raise ValueError(f"{kind}: input tensor belongs to a different graph")
        rec = OpRecord(kind, [t.node_id for t in inputs], -1, run, back,
                       saved if saved is not None else {})
        out_data = run(rec, *[t.data for t in inputs])
        out = self.tensor(out_data)
        rec.output_id = out.node_id
        self.records.append(rec)
        return out

    def replay(self):
        """Re-execute every recorded op in original order.

        Leaf data may have been modified in place (optimizer steps); replay
        refreshes all derived nodes.  With unchanged leaves the results are
        bit-identical to the original forward pass.
        """
        for rec in self.records:
            ins = [self.nodes[i].data for i in rec.input_ids]
            self.nodes[rec.output_id].data = rec.run(rec, *ins)


def backward(loss: Tensor) -> None:
    """Reverse-traverse the tape, accumulating grads into every node.

    ``loss`` must be scalar.  Parameters not reachable from the loss end up
    with exactly-zero gradients rather than ``None``.
    """
    g = loss.graph
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    for t in g.nodes:
        t.grad = None
    loss.grad = np.ones((), dtype=g.dtype)
    for rec in reversed(g.records):
        gout = g.nodes[rec.output_id].grad
        if gout is None:
            continue
        ins = [g.nodes[i].data for i in rec.input_ids]
        gins = rec.back(rec, gout, *ins)
        for nid, gi in zip(rec.input_ids, gins):
            if gi is None:
                continue
            node = g.nodes[nid]
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += gi
    for t in g.nodes:
        if t.is_param and t.grad is None:
            t.grad = np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# shape plumbing

def _as_batch(a):
    """Promote a single sample to a batch of one; report whether we did."""
    if a.ndim == 3:
        return a[None], True
    return a, False


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)

    def run(rec, a):
        if int(np.prod(shape)) != a.size:
            raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
        rec.saved["in_shape"] = a.shape
        return np.ascontiguousarray(a.reshape(shape))

    def back(rec, gout, a):
        return (gout.reshape(rec.saved["in_shape"]),)

    return x.graph._apply("reshape", [x], run, back)


def flatten_batch(x: Tensor) -> Tensor:
    """Collapse all but the leading axis; rank-1 input passes through."""
    if x.data.ndim <= 1:
        return x
    n = x.data.shape[0]
    return reshape(x, (n, x.data.size // n))


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis; all other dims must match."""

    def run(rec, x, y):
        if x.shape[:-1] != y.shape[:-1]:
            raise ShapeError(f"concat: leading dims differ {x.shape} vs {y.shape}")
        rec.saved["split"] = x.shape[-1]
        return np.concatenate([x, y], axis=-1)

    def back(rec, gout, x, y):
        k = rec.saved["split"]
        return (np.ascontiguousarray(gout[..., :k]),
                np.ascontiguousarray(gout[..., k:]))

    return a.graph._apply("concat", [a, b], run, back)


def slice_last(x: Tensor, lo: int, hi: int) -> Tensor:
    def run(rec, a):
        if not (0 <= lo < hi <= a.shape[-1]):
            raise ShapeError(f"slice_last: [{lo}:{hi}] out of range for {a.shape}")
        return np.ascontiguousarray(a[..., lo:hi])

    def back(rec, gout, a):
        gx = np.zeros_like(a)
        gx[..., lo:hi] = gout
        return (gx,)

    return x.graph._apply("slice_last", [x], run, back)


def add(a: Tensor, b: Tensor) -> Tensor:
    def run(rec, x, y):
        if x.shape != y.shape:
            raise ShapeError(f"add: shapes differ {x.shape} vs {y.shape}")
        return x + y

    def back(rec, gout, x, y):
        return (gout, gout)

    return a.graph._apply("add", [a, b], run, back)


def scale(x: Tensor, k: float) -> Tensor:
    k = float(k)

    def run(rec, a):
        return a * x.graph.dtype.type(k)

    def back(rec, gout, a):
        return (gout * x.graph.dtype.type(k),)

    return x.graph._apply("scale", [x], run, back)


# ---------------------------------------------------------------------------
# neural ops

_conv_grad_corruption = None


@contextmanager
def corrupt_conv_backward(factor=1.1):
    """Mis-scale conv weight gradients while active.

    Negative control for the gradient checker: a checker that cannot flag
    this corruption is not checking anything.
    """
    global _conv_grad_corruption
    _conv_grad_corruption = float(factor)
    try:
        yield
    finally:
        _conv_grad_corruption = None


def _conv_out_side(n, k, stride):
    if k > n:
        raise ShapeError(f"conv2d: kernel {k} exceeds input side {n}")
    return (n - k) // stride + 1


def _patches(a, k, stride):
    """View [N,H,W,C] as [N,Ho,Wo,k,k,C] sliding windows (no copy)."""
    n, h, w, c = a.shape
    ho = _conv_out_side(h, k, stride)
    wo = _conv_out_side(w, k, stride)
    sn, sh, sw, sc = a.strides
    return np.lib.stride_tricks.as_strided(
        a, (n, ho, wo, k, k, c), (sn, sh * stride, sw * stride, sh, sw, sc),
        writeable=False)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Valid (no padding) 2-D convolution over [H,W,Cin] or [N,H,W,Cin].

    Weights are [k,k,Cin,Cout], bias [Cout].  Forward lowers the input to
    im2col patches and runs one matmul; backward scatters patch gradients
    back with k*k strided adds.
    """
    stride = int(stride)
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")

    def run(rec, a, wk, bk):
        a4, promoted = _as_batch(a)
        if a4.ndim != 4:
            raise ShapeError(f"conv2d: input must be rank 3 or 4, got {a.shape}")
        if wk.ndim != 4 or wk.shape[0] != wk.shape[1]:
            raise ShapeError(f"conv2d: weights must be [k,k,Cin,Cout], got {wk.shape}")
        k, _, cin, cout = wk.shape
        if a4.shape[3] != cin:
            raise ShapeError(f"conv2d: input channels {a4.shape[3]} != weight Cin {cin}")
        if bk.shape != (cout,):
            raise ShapeError(f"conv2d: bias must be [Cout]={cout}, got {bk.shape}")
        p = _patches(a4, k, stride)
        n, ho, wo = p.shape[:3]
        out = p.reshape(n * ho * wo, k * k * cin) @ wk.reshape(k * k * cin, cout)
        out += bk
        out = out.reshape(n, ho, wo, cout)
        rec.saved["promoted"] = promoted
        return out[0] if promoted else out

    def back(rec, gout, a, wk, bk):
        promoted = rec.saved["promoted"]
        a4 = a[None] if promoted else a
        g4 = gout[None] if promoted else gout
        k, _, cin, cout = wk.shape
        n, ho, wo = g4.shape[:3]
        p = _patches(a4, k, stride)
        gflat = g4.reshape(n * ho * wo, cout)
        gw = (p.reshape(n * ho * wo, k * k * cin).T @ gflat).reshape(wk.shape)
        if _conv_grad_corruption is not None:
            gw = gw * _conv_grad_corruption
        gb = gflat.sum(axis=0)
        gpatch = (gflat @ wk.reshape(k * k * cin, cout).T).reshape(n, ho, wo, k, k, cin)
        gx = np.zeros_like(a4)
        for di in range(k):
            for dj in range(k):
                gx[:, di:di + ho * stride:stride, dj:dj + wo * stride:stride, :] += \
                    gpatch[:, :, :, di, dj, :]
        return ((gx[0] if promoted else gx), gw, gb)

    return x.graph._apply("conv2d", [x, w, b], run, back, {"stride": stride})


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for x of shape [n] or [N,n], w [n,m], b [m]."""

    def run(rec, a, wk, bk):
        if wk.ndim != 2:
            raise ShapeError(f"affine: weights must be rank 2, got {wk.shape}")
        if a.shape[-1] != wk.shape[0]:
            raise ShapeError(f"affine: input width {a.shape[-1]} != weight rows {wk.shape[0]}")
        if bk.shape != (wk.shape[1],):
            raise ShapeError(f"affine: bias shape {bk.shape} != ({wk.shape[1]},)")
        return a @ wk + bk

    def back(rec, gout, a, wk, bk):
        if a.ndim == 1:
            return (gout @ wk.T, np.outer(a, gout), gout.copy())
        return (gout @ wk.T, a.T @ gout, gout.sum(axis=0))

    return x.graph._apply("affine", [x, w, b], run, back)


def relu(x: Tensor) -> Tensor:
    def run(rec, a):
        return np.maximum(a, 0)

    def back(rec, gout, a):
        return (gout * (a > 0),)

    return x.graph._apply("relu", [x], run, back)


def _sigmoid(z):
    # piecewise form avoids exp overflow on large |z|
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def lstm_step(x: Tensor, h: Tensor, c: Tensor,
              wx: Tensor, wh: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One fused LSTM cell step; returns (h_next, c_next).

    Gate order in the packed weights is input, forget, cell, output.  The
    fused op emits [h_next | c_next] packed on the last axis and the two
    returned tensors are slices of it.
    """

    def run(rec, xv, hv, cv, wxv, whv, bv):
        if wxv.ndim != 2 or whv.ndim != 2:
            raise ShapeError("lstm_step: weight matrices must be rank 2")
        u4 = whv.shape[1]
        if u4 % 4 != 0:
            raise ShapeError(f"lstm_step: packed width {u4} not divisible by 4")
        u = u4 // 4
        if whv.shape[0] != u:
            raise ShapeError(f"lstm_step: wh must be [{u},{4*u}], got {whv.shape}")
        if xv.shape[-1] != wxv.shape[0] or wxv.shape[1] != u4:
            raise ShapeError(f"lstm_step: wx shape {wxv.shape} incompatible with x {xv.shape}")
        if hv.shape[-1] != u or cv.shape != hv.shape:
            raise ShapeError(f"lstm_step: state shapes h={hv.shape} c={cv.shape} vs hidden {u}")
        if bv.shape != (u4,):
            raise ShapeError(f"lstm_step: bias must be [{u4}], got {bv.shape}")
        z = xv @ wxv + hv @ whv + bv
        i = _sigmoid(z[..., 0 * u:1 * u])
        f = _sigmoid(z[..., 1 * u:2 * u])
        gc = np.tanh(z[..., 2 * u:3 * u])
        o = _sigmoid(z[..., 3 * u:4 * u])
        c_next = f * cv + i * gc
        tc = np.tanh(c_next)
        h_next = o * tc
        rec.saved.update(i=i, f=f, gc=gc, o=o, tc=tc, u=u)
        return np.concatenate([h_next, c_next], axis=-1)

    def back(rec, gout, xv, hv, cv, wxv, whv, bv):
        s = rec.saved
        i, f, gc, o, tc, u = s["i"], s["f"], s["gc"], s["o"], s["tc"], s["u"]
        gh = gout[..., :u]
        gc_next = gout[..., u:] + gh * o * (1.0 - tc * tc)
        dz = np.concatenate([
            gc_next * gc * i * (1.0 - i),          # input gate pre-activation
            gc_next * cv * f * (1.0 - f),          # forget gate
            gc_next * i * (1.0 - gc * gc),         # cell candidate
            gh * tc * o * (1.0 - o),               # output gate
        ], axis=-1)
        gx = dz @ wxv.T
        gh_prev = dz @ whv.T
        gc_prev = gc_next * f
        if xv.ndim == 1:
            gwx = np.outer(xv, dz)
            gwh = np.outer(hv, dz)
            gb = dz.copy()
        else:
            gwx = xv.T @ dz
            gwh = hv.T @ dz
            gb = dz.sum(axis=0)
        return (gx, gh_prev, gc_prev, gwx, gwh, gb)

    packed = x.graph._apply("lstm_step", [x, h, c, wx, wh, b], run, back)
    u = wh.data.shape[0]
    return slice_last(packed, 0, u), slice_last(packed, u, 2 * u)


# ---------------------------------------------------------------------------
# losses (targets and weights are plain arrays, not graph nodes)

def softmax_cross_entropy(logits: Tensor, target_onehot) -> Tensor:
    """Mean cross-entropy between softmax(logits) and one-hot targets.

    ``logits`` is [C] or [N,C]; targets must be exactly one-hot per row.
    Gradient w.r.t. logits is (p - target) / N with the saved probabilities.
    """
    g = logits.graph
    target = np.ascontiguousarray(target_onehot, dtype=g.dtype)

    def run(rec, z):
        if z.shape != target.shape:
            raise ShapeError(f"cross_entropy: logits {z.shape} vs target {target.shape}")
        rows = target if target.ndim == 2 else target[None]
        ok = np.all(np.isin(rows, (0.0, 1.0))) and np.all(rows.sum(axis=-1) == 1.0)
        if not ok:
            raise ValueError("cross_entropy: target rows must be exactly one-hot")
        zs = z - z.max(axis=-1, keepdims=True)
        ez = np.exp(zs)
        p = ez / ez.sum(axis=-1, keepdims=True)
        logp = zs - np.log(ez.sum(axis=-1, keepdims=True))
        rec.saved["p"] = p
        loss = -(target * logp).sum(axis=-1)
        return np.asarray(loss.mean(), dtype=g.dtype)

    def back(rec, gout, z):
        p = rec.saved["p"]
        n = z.shape[0] if z.ndim == 2 else 1
        return (gout * (p - target) / g.dtype.type(n),)

    return g._apply("softmax_cross_entropy", [logits], run, back)


def weighted_mae(pred: Tensor, target, weights) -> Tensor:
    """sum(w * |pred - target|) / sum(w); weights must all be > 0."""
    g = pred.graph
    target = np.ascontiguousarray(target, dtype=g.dtype)
    weights = np.ascontiguousarray(weights, dtype=g.dtype)

    def run(rec, p):
        if p.shape != target.shape or p.shape != weights.shape:
            raise ShapeError(
                f"weighted_mae: shapes pred {p.shape} target {target.shape} "
                f"weights {weights.shape} must match")
        if not np.all(weights > 0):
            raise ValueError("weighted_mae: weights must be positive")
        err = p - target
        rec.saved["sign"] = np.sign(err)
        rec.saved["wsum"] = weights.sum()
        return np.asarray((weights * np.abs(err)).sum() / rec.saved["wsum"],
                          dtype=g.dtype)

    def back(rec, gout, p):
        return (gout * weights * rec.saved["sign"] / rec.saved["wsum"],)

    return g._apply("weighted_mae", [pred], run, back)


# ---------------------------------------------------------------------------
# optimizers

class SGD:
    """Plain gradient descent: p -= lr * g."""

    kind = "sgd"

    def __init__(self, lr):
        self.lr = float(lr)

    def step(self, params: dict, grads: dict, lr=None) -> None:
        lr = self.lr if lr is None else float(lr)
        for name, p in params.items():
            if name not in grads:
                raise ValueError(f"sgd: missing gradient for {name!r}")
            p -= p.dtype.type(lr) * grads[name]

    def state_arrays(self) -> dict:
        return {"t": np.array([0], dtype=np.int64)}

    def load_state_arrays(self, arrays) -> None:
        pass


class Adam:
    """Adam with bias correction; updates parameters in place."""

    kind = "adam"

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict, lr=None) -> None:
        lr = self.lr if lr is None else float(lr)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            if name not in grads:
                raise ValueError(f"adam: missing gradient for {name!r}")
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p -= p.dtype.type(lr) * mhat / (np.sqrt(vhat) + p.dtype.type(self.eps))

    def state_arrays(self) -> dict:
        """Flatten optimizer state into named arrays for the resume file."""
        out = {"t": np.array([self.t], dtype=np.int64)}
        for name in self.m:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays) -> None:
        self.t = int(arrays["t"][0])
        self.m = {}
        self.v = {}
        for key, arr in arrays.items():
            if key.startswith("m."):
                self.m[key[2:]] = arr.copy()
            elif key.startswith("v."):
                self.v[key[2:]] = arr.copy()


def make_optimizer(kind: str, lr: float, **kwargs):
    if kind == "adam":
        return Adam(lr=lr, **kwargs)
    if kind == "sgd":
        return SGD(lr=lr)
    raise ValueError(f"unknown optimizer {kind!r}")


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    tolerance: float
    per_param: dict
    worst: tuple  # (name, flat index, analytic, numeric, rel err)

    @property
    def max_rel_err(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def lines(self):
        for name in sorted(self.per_param):
            yield f"  {name:<28s} max rel err {self.per_param[name]:.3e}"
        name, idx, an, fd, rel = self.worst
        yield (f"  worst: {name}[{idx}] analytic={an:.6e} numeric={fd:.6e} "
               f"rel={rel:.3e}")
        yield f"  overall {self.max_rel_err:.3e} {'<' if self.passed else '>='} tol {self.tolerance:.1e}"


def grad_check(value_fn, grad_fn, params: dict, *, tolerance=1e-4,
               fd_step=1e-5, coords_per_param=20, seed=0) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``value_fn(params) -> float`` and ``grad_fn(params) -> {name: array}``
    must evaluate the same scalar loss.  For each parameter a fixed random
    subset of coordinates (at most ``coords_per_param``) is perturbed by
    ``+-fd_step``.  Relative error uses max(|analytic|, |numeric|, 1e-6) as
    the denominator: the floor keeps finite-difference roundoff (~1e-11 for
    float64 losses of order 1) from registering as error on exactly-zero
    gradient coordinates.
    """
    rng = np.random.default_rng(seed)
    analytic = grad_fn(params)
    per_param = {}
    worst = ("", 0, 0.0, 0.0, -1.0)
    for name in sorted(params):
        p = params[name]
        if name not in analytic:
            raise ValueError(f"grad_check: no analytic gradient for {name!r}")
        a = analytic[name]
        if a.shape != p.shape:
            raise ShapeError(f"grad_check: grad shape {a.shape} != param shape {p.shape}")
        size = p.size
        n_coords = min(coords_per_param, size)
        coords = rng.choice(size, size=n_coords, replace=False)
        flat = p.reshape(-1)
        worst_rel = 0.0
        for idx in coords:
            idx = int(idx)
            keep = flat[idx]
            flat[idx] = keep + fd_step
            up = value_fn(params)
            flat[idx] = keep - fd_step
            down = value_fn(params)
            flat[idx] = keep
            fd = (up - down) / (2.0 * fd_step)
            an = float(a.reshape(-1)[idx])
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
            if rel > worst_rel:
                worst_rel = rel
            if rel > worst[4]:
                worst = (name, idx, an, fd, rel)
        per_param[name] = worst_rel
    return GradCheckReport(tolerance=tolerance, per_param=per_param, worst=worst)
