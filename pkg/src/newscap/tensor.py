"""Dense float tensors with reverse-mode autodiff, Adam, and a gradient checker.

Deliberately minimal: 2-D matrices (plus scalars) cover everything the
captioning model needs. Ops record backward closures onto the tensors they
produce; backward() runs the chain rule over a topological sort.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True
_DEBUG_FINITE = False
_DIAG = None


@contextlib.contextmanager
def diagnostics():
    """Record conditioning stats (relu kink margin, layer-norm input variance)
    over the ops run inside the block. Finite differences are meaningless at a
    relu kink or an eps-dominated layer norm; callers use this to reject such
    evaluation points."""
    global _DIAG
    prev = _DIAG
    _DIAG = {"relu_margin": math.inf, "ln_min_var": math.inf}
    try:
        yield _DIAG
    finally:
        _DIAG = prev


def set_debug_finite(flag):
    """Enable per-op NaN/Inf assertions (debug builds only)."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(flag)


def current_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype ('float32' or 'float64')."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (decoding, finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev



def _register(out, bw):
    """Attach a backward closure only while the tape is active."""
    if _GRAD_ENABLED:
        out._bw = bw


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_bw")

    def __init__(self, data, _parents=(), _bw=None):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=_DTYPE)
        if _DEBUG_FINITE and not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite values in tensor")
        self.data = arr
        self.grad = None
        if _GRAD_ENABLED:
            self._parents = _parents
            self._bw = _bw
        else:
            self._parents = ()
            self._bw = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data.copy())

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    def __rmul__(self, other):
        return mul(_wrap(other, self), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self))

    def __neg__(self):
        return mul(self, _wrap(-1.0, self))

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, extent in enumerate(shape):
        if extent == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def add(a, b):
    out = Tensor(a.data + b.data, (a, b))

    def bw():
        a._accum(_unbroadcast(out.grad, a.data.shape))
        b._accum(_unbroadcast(out.grad, b.data.shape))

    _register(out, bw)
    return out


def sub(a, b):
    out = Tensor(a.data - b.data, (a, b))

    def bw():
        a._accum(_unbroadcast(out.grad, a.data.shape))
        b._accum(_unbroadcast(-out.grad, b.data.shape))

    _register(out, bw)
    return out


def mul(a, b):
    out = Tensor(a.data * b.data, (a, b))

    def bw():
        a._accum(_unbroadcast(out.grad * b.data, a.data.shape))
        b._accum(_unbroadcast(out.grad * a.data, b.data.shape))

    _register(out, bw)
    return out


def div(a, b):
    out = Tensor(a.data / b.data, (a, b))

    def bw():
        a._accum(_unbroadcast(out.grad / b.data, a.data.shape))
        b._accum(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape))

    _register(out, bw)
    return out


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul shape mismatch: {a.data.shape} x {b.data.shape}"
        )
    out = Tensor(a.data @ b.data, (a, b))

    def bw():
        a._accum(out.grad @ b.data.T)
        b._accum(a.data.T @ out.grad)

    _register(out, bw)
    return out


def transpose(a):
    out = Tensor(a.data.T, (a,))

    def bw():
        a._accum(out.grad.T)

    _register(out, bw)
    return out


def concat(tensors, axis=0):
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    sizes = [t.data.shape[axis] for t in tensors]

    def bw():
        start = 0
        for t, size in zip(tensors, sizes):
            sl = [slice(None)] * out.grad.ndim
            sl[axis] = slice(start, start + size)
            t._accum(out.grad[tuple(sl)])
            start += size

    _register(out, bw)
    return out


def slice_cols(a, start, stop):
    out = Tensor(a.data[:, start:stop], (a,))

    def bw():
        g = np.zeros_like(a.data)
        g[:, start:stop] = out.grad
        a._accum(g)

    _register(out, bw)
    return out


def slice_rows(a, start, stop):
    out = Tensor(a.data[start:stop, :], (a,))

    def bw():
        g = np.zeros_like(a.data)
        g[start:stop, :] = out.grad
        a._accum(g)

    _register(out, bw)
    return out


def sum_all(a):
    out = Tensor(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,))

    def bw():
        a._accum(np.full_like(a.data, out.grad))

    _register(out, bw)
    return out


def softmax(x, axis=-1):
    """Numerically stable softmax; rows sum to 1 along `axis`."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, (x,))

    def bw():
        dot = (out.grad * s).sum(axis=axis, keepdims=True)
        x._accum(s * (out.grad - dot))

    _register(out, bw)
    return out


def sigmoid(x):
    # saturated inputs overflow exp but land on exact 0/1, which is fine
    with np.errstate(over="ignore"):
        y = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(y, (x,))

    def bw():
        x._accum(out.grad * y * (1.0 - y))

    _register(out, bw)
    return out


def tanh(x):
    y = np.tanh(x.data)
    out = Tensor(y, (x,))

    def bw():
        x._accum(out.grad * (1.0 - y * y))

    _register(out, bw)
    return out


def relu(x):
    if _DIAG is not None and x.data.size:
        _DIAG["relu_margin"] = min(_DIAG["relu_margin"],
                                   float(np.abs(x.data).min()))
    out = Tensor(np.maximum(x.data, 0.0), (x,))

    def bw():
        x._accum(out.grad * (x.data > 0))

    _register(out, bw)
    return out


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def activation(kind, x):
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    h = x.data.shape[-1]
    if h == 0:
        raise ValueError("layer_norm over empty feature axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    if _DIAG is not None and var.size:
        _DIAG["ln_min_var"] = min(_DIAG["ln_min_var"], float(var.min()))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(gain.data * xhat + bias.data, (x, gain, bias))

    def bw():
        g = out.grad
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        x._accum((dxhat - m1 - xhat * m2) * inv)
        gain._accum(_unbroadcast(g * xhat, gain.data.shape))
        bias._accum(_unbroadcast(g, bias.data.shape))

    _register(out, bw)
    return out


def embedding_lookup(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError("embedding id out of range")
    out = Tensor(table.data[ids], (table,))

    def bw():
        g = np.zeros_like(table.data)
        np.add.at(g, ids, out.grad)
        table._accum(g)

    _register(out, bw)
    return out


def avg_pool_rows(x):
    if x.data.shape[0] == 0:
        raise ValueError("avg_pool_rows on empty input")
    n = x.data.shape[0]
    out = Tensor(x.data.mean(axis=0, keepdims=True), (x,))

    def bw():
        x._accum(np.repeat(out.grad, n, axis=0) / n)

    _register(out, bw)
    return out


def dropout(x, rate, training, rng):
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype)
    scale = 1.0 / (1.0 - rate)
    out = Tensor(x.data * keep * scale, (x,))

    def bw():
        x._accum(out.grad * keep * scale)

    _register(out, bw)
    return out


def log_clamped(x, floor=1e-12):
    clamped = np.maximum(x.data, floor)
    out = Tensor(np.log(clamped), (x,))

    def bw():
        x._accum(out.grad * (x.data > floor) / clamped)

    _register(out, bw)
    return out


def pick(x, rows, cols):
    """Gather x[rows[i], cols[i]] into a length-N vector."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = Tensor(x.data[rows, cols], (x,))

    def bw():
        g = np.zeros_like(x.data)
        np.add.at(g, (rows, cols), out.grad)
        x._accum(g)

    _register(out, bw)
    return out


def backward(loss):
    """Populate .grad for every tensor reachable from `loss` (a scalar)."""
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._bw is not None:
            node._bw()


def collect_grads(params):
    """Gradient map for a named parameter dict; unreachable params get zeros."""
    return {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }


def zero_grads(params):
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# Adam with inverse-square-root warmup schedule


@dataclass
class AdamState:
    base_lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup: int = 4000
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def effective_lr(state, step=None):
    """base_lr * sqrt(warmup) * min(step^-0.5, step * warmup^-1.5); peaks at base_lr."""
    s = state.step if step is None else step
    if s <= 0:
        return 0.0
    w = state.warmup
    return state.base_lr * math.sqrt(w) * min(s ** -0.5, s * w ** -1.5)


def adam_step(params, grads, state):
    state.step += 1
    lr = effective_lr(state)
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    n_checked: int
    per_param: dict
    tol: float

    @property
    def passed(self):
        return self.max_rel_err < self.tol


def finite_diff_check(fn, params, eps=1e-4, tol=1e-6, coords_per_param=6, rng=None):
    """Compare tape gradients of fn(params) against central differences.

    fn must be deterministic (dropout off, fixed inputs); run under
    precision('float64') for meaningful tolerances.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    zero_grads(params)
    loss = fn(params)
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite loss in finite_diff_check")
    backward(loss)
    grads = collect_grads(params)
    zero_grads(params)

    per_param = {}
    worst = ("", 0.0)
    n_checked = 0
    with no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            n = flat.size
            idx = rng.choice(n, size=min(coords_per_param, n), replace=False)
            err = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                hi = fn(params).item()
                flat[i] = orig - eps
                lo = fn(params).item()
                flat[i] = orig
                fd = (hi - lo) / (2.0 * eps)
                g = grads[name].reshape(-1)[i]
                rel = abs(fd - g) / max(abs(fd), abs(g), 1.0)
                err = max(err, rel)
                n_checked += 1
            per_param[name] = err
            if err > worst[1]:
                worst = (name, err)
    return GradCheckReport(
        max_rel_err=worst[1],
        worst_param=worst[0],
        n_checked=n_checked,
        per_param=per_param,
        tol=tol,
    )
