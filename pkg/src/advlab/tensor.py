"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable building block used by the classifier, the
autoencoder, the attacks and the compression model lives here. A
``Tensor`` wraps an ``np.ndarray``; ops executed while gradient recording
is enabled attach a ``_Node`` to their output, and ``backward`` replays the
recorded nodes in reverse creation order.
"""

from __future__ import annotations

import itertools
import threading
import weakref
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from advlab.rng import make_rng

_state = threading.local()
_seq = itertools.count()

_default_dtype = np.float32


def default_dtype() -> type:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    """Set the storage dtype for tensors built from Python scalars/lists."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype


@contextmanager
def precision(dtype):
    """Temporarily switch the default storage dtype (e.g. 64-bit grad checks)."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def _compute_dtype():
    return getattr(_state, "compute_dtype", None)


@contextmanager
def compute_precision(dtype):
    """Force every op to compute in ``dtype``, upcasting stored operands.

    Used by the finite-difference oracle so that a 32-bit model can be
    evaluated exactly in 64-bit arithmetic without copying its parameters.
    """
    old = _compute_dtype()
    _state.compute_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.compute_dtype = old


def _frozen_ids() -> frozenset:
    return getattr(_state, "frozen", frozenset())


@contextmanager
def frozen(tensors: Iterable["Tensor"]):
    """Treat ``tensors`` as constants in this thread (no recording, no grads).

    Lets attacks differentiate w.r.t. inputs only without mutating shared
    model parameters.
    """
    old = _frozen_ids()
    _state.frozen = old | {id(t) for t in tensors}
    try:
        yield
    finally:
        _state.frozen = old


def _rg(t: "Tensor") -> bool:
    return t.requires_grad and id(t) not in _frozen_ids()


def _log_pattern(mask: np.ndarray) -> None:
    log = getattr(_state, "kink_log", None)
    if log is not None:
        log.append(np.packbits(mask.reshape(-1)).tobytes())


@contextmanager
def _kink_monitor():
    old = getattr(_state, "kink_log", None)
    _state.kink_log = log = []
    try:
        yield log
    finally:
        _state.kink_log = old


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable op recording in this thread (inference, attack bookkeeping)."""
    old = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


class _Node:
    __slots__ = ("op", "inputs", "backward_fn", "seq", "out")

    def __init__(self, op, inputs, backward_fn, out):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = next(_seq)
        self.out = weakref.ref(out)

    def __repr__(self):
        return f"_Node({self.op}, seq={self.seq})"


class Tensor:
    """Dense n-d array of reals with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_ctx", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if isinstance(data, np.generic):
            data = np.asarray(data)
        if isinstance(data, np.ndarray) and dtype is None and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype or _default_dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._ctx: _Node | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def __len__(self):
        return self.shape[0]

    # -- arithmetic ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _raise_not_scalar(t):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _arr(t: Tensor) -> np.ndarray:
    dt = _compute_dtype()
    if dt is not None and t.data.dtype != dt:
        return t.data.astype(dt)
    return t.data


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(_rg(t) for t in inputs):
        out.requires_grad = True
        out._ctx = _Node(op, tuple(inputs), backward_fn, out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Tape / backward
# ---------------------------------------------------------------------------


@dataclass
class Tape:
    """Ordered record of the ops that produced a tensor.

    ``records`` is in execution order; ``backward`` visits it in reverse,
    touching each op exactly once.
    """

    records: list = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen = set()
        stack = [out._ctx] if out._ctx is not None else []
        nodes = []
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            for t in node.inputs:
                if t._ctx is not None and id(t._ctx) not in seen:
                    stack.append(t._ctx)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self):
        return len(self.records)

    def backward(self, seed_grad: np.ndarray) -> None:
        if not self.records:
            return
        grads = {id(self.records[-1]): seed_grad}
        for node in reversed(self.records):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            out = node.out()
            if out is not None:
                out.grad = g if out.grad is None else out.grad + g
            in_grads = node.backward_fn(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not _rg(t):
                    continue
                if t._ctx is None:
                    gi = np.asarray(gi, dtype=t.data.dtype).reshape(t.shape)
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                else:
                    key = id(t._ctx)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Gradients accumulate additively into leaves across calls.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones(loss.shape, dtype=loss.data.dtype)
    if loss._ctx is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    Tape.from_output(loss).backward(seed)


# ---------------------------------------------------------------------------
# Elementwise / reductions
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = _arr(a), _arr(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(ad + bd, "add", (a, b), bw)


def mul(a, b) -> Tensor:
    a = _wrap(a)
    if not isinstance(b, Tensor):
        c = b

        def bw_scalar(g):
            return (g * c,)

        return _make(_arr(a) * np.asarray(c, dtype=_arr(a).dtype), "scale", (a,), bw_scalar)
    ad, bd = _arr(a), _arr(b)

    def bw(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _make(ad * bd, "mul", (a, b), bw)


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    xd = _arr(x)
    keep = xd.sum(axis=axis, keepdims=True).shape

    def bw(g):
        return (np.broadcast_to(g.reshape(keep), xd.shape),)

    return _make(np.asarray(xd.sum(axis=axis)), "sum", (x,), bw)


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(reduce_sum(x, axis), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    xd = _arr(x)
    src = xd.shape

    def bw(g):
        return (g.reshape(src),)

    return _make(xd.reshape(shape), "reshape", (x,), bw)


def relu(x: Tensor) -> Tensor:
    xd = _arr(x)
    mask = xd > 0
    _log_pattern(mask)

    def bw(g):
        return (g * mask,)

    return _make(np.where(mask, xd, 0).astype(xd.dtype, copy=False), "relu", (x,), bw)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(_arr(x))

    def bw(g):
        return (g * (1.0 - y * y),)

    return _make(y, "tanh", (x,), bw)


def unary(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown unary kind {kind!r}")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input was inside."""
    xd = _arr(x)
    inside = (xd >= lo) & (xd <= hi)
    _log_pattern(inside)

    def bw(g):
        return (g * inside,)

    return _make(np.clip(xd, lo, hi), "clip", (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C]."""
    return reduce_mean(x, axis=(2, 3))


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    s = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, oh, ow, kh, kw),
        strides=(s[0], s[1], s[2] * stride, s[3] * stride, s[2], s[3]),
        writeable=False,
    )


def _acc(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # parameter gradients reduce over the whole batch; a wide accumulator
    # keeps near-zero coordinates from drowning in cancellation error
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(a.dtype)


def _acc_sum(g: np.ndarray) -> np.ndarray:
    return g.sum(axis=0, dtype=np.float64).astype(g.dtype)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW layout, via im2col."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d channel mismatch: input has {cin}, weight expects {wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match {cout} output channels")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    oh, ow = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    if oh <= 0 or ow <= 0 or n == 0:
        raise ValueError("conv2d output would be empty")

    xd, wd = _arr(x), _arr(weight)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _windows(xp, kh, kw, stride, oh, ow).transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, cin * kh * kw)
    wmat = wd.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += _arr(bias)
    out = out.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, cout)
        gw = _acc(g2.T, cols).reshape(weight.shape) if _rg(weight) else None
        gb = _acc_sum(g2) if bias is not None and _rg(bias) else None
        gx = None
        if _rg(x):
            gcols = (g2 @ wmat).reshape(n, oh, ow, cin, kh, kw)
            gxp = np.zeros((n, hp, wp, cin), dtype=gcols.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride, :] += gcols[..., i, j]
            gx = gxp[:, padding : padding + h, padding : padding + w, :].transpose(0, 3, 1, 2)
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(np.ascontiguousarray(out), "conv2d", inputs, bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear bias shape {bias.shape} does not match {weight.shape[0]} outputs")
    xd, wd = _arr(x), _arr(weight)
    out = xd @ wd.T
    if bias is not None:
        out = out + _arr(bias)

    def bw(g):
        g = np.ascontiguousarray(g)
        return (g @ wd if _rg(x) else None), (_acc(g.T, xd) if _rg(weight) else None), (_acc_sum(g) if bias is not None else None)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, "linear", inputs, bw)


def resample(x: Tensor, mode: str) -> Tensor:
    """``down2``: 2x2 stride-2 average pool; ``up2``: nearest-neighbour x2."""
    if x.ndim != 4:
        raise ValueError(f"resample expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    xd = _arr(x)
    if mode == "down2":
        if h % 2 or w % 2:
            raise ValueError(f"down2 needs even spatial dims, got {h}x{w}")
        out = xd.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

        def bw(g):
            return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,)

        return _make(out, "down2", (x,), bw)
    if mode == "up2":
        out = np.repeat(np.repeat(xd, 2, axis=2), 2, axis=3)

        def bw(g):
            return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

        return _make(out, "up2", (x,), bw)
    raise ValueError(f"unknown resample mode {mode!r}")


def gaussian_noise(x: Tensor, sigma: float, rng_seed: int) -> Tensor:
    """Add seeded i.i.d. N(0, sigma^2) noise; gradient passes straight through."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    xd = _arr(x)
    if sigma == 0:
        noise = np.zeros_like(xd)
    else:
        noise = make_rng(rng_seed).normal(0.0, sigma, size=xd.shape).astype(xd.dtype)

    def bw(g):
        return (g,)

    return _make(xd + noise, "gaussian_noise", (x,), bw)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of integer labels under softmax(logits), max-shifted."""
    if logits.ndim != 2:
        raise ValueError(f"logits must be [N, K], got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ValueError(f"{labels.shape[0]} labels for {n} rows of logits")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = _arr(logits)
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    per = -logp[np.arange(n), labels]
    scale = 1.0 / n if reduction == "mean" else 1.0
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    value = np.asarray(per.sum() * scale, dtype=z.dtype)

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g * scale),)

    return _make(value, "softmax_cross_entropy", (logits,), bw)


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error; subgradient 0 where pred == target."""
    target = _wrap(target)
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = _arr(pred) - _arr(target)
    count = diff.size
    sgn = np.sign(diff)
    _log_pattern(sgn > 0)

    def bw(g):
        gp = sgn * (g / count)
        return gp, -gp

    return _make(np.asarray(np.abs(diff).mean(), dtype=diff.dtype), "l1_loss", (pred, target), bw)


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Iterable[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update in place, then clear the gradients."""
    params = list(params)
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"parameter {i} with shape {p.shape} has no gradient")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    elif len(state.m) != len(params):
        raise ValueError("AdamState was built for a different parameter set")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, m, v in zip(params, state.m, state.v):
        if m.shape != p.shape:
            raise ValueError(f"moment buffer {m.shape} does not match parameter {p.shape}")
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.data.dtype, copy=False)
        p.grad = None


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def finite_diff_grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
    kink_refine: int = 3,
) -> float:
    """Worst relative error between backward-mode and central-difference gradients.

    The analytic gradient is computed at the tensors' stored precision. The
    central differences ``(f(x + h e) - f(x - h e)) / 2h`` are evaluated with
    every op forced to 64-bit so the oracle is not limited by 32-bit
    rounding. Relative error per coordinate is ``|a - b| / max(|a|, |b|, 1e-8)``.

    A central difference is only meaningful where ``f`` is smooth on
    ``[x - h, x + h]``. When a relu/clip/sign pattern differs between the
    probes and ``x`` the step is divided by 10, at most ``kink_refine`` times.
    ``max_coords`` checks a seeded random subset of coordinates instead of all.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    old_grad, old_rg = x.grad, x.requires_grad
    x.grad = None
    x.requires_grad = True
    try:
        loss = f(x)
        backward(loss)
        analytic = np.zeros(x.shape) if x.grad is None else x.grad.astype(np.float64)
    finally:
        x.grad, x.requires_grad = old_grad, old_rg

    flat_idx = np.arange(x.size)
    if max_coords is not None and max_coords < x.size:
        flat_idx = np.sort(make_rng(seed).choice(x.size, size=max_coords, replace=False))

    stored = x.data
    work = stored.astype(np.float64)
    x.data = work
    numeric = np.empty(len(flat_idx))

    def probe():
        with _kink_monitor() as log:
            value = float(f(x).data)
        return value, log

    try:
        with no_grad(), compute_precision(np.float64):
            flat = work.reshape(-1)
            _, base = probe()
            for k, i in enumerate(flat_idx):
                orig = flat[i]
                step = h
                for _ in range(kink_refine + 1):
                    flat[i] = orig + step
                    fp, sp = probe()
                    flat[i] = orig - step
                    fm, sm = probe()
                    flat[i] = orig
                    if sp == base and sm == base:
                        break
                    step /= 10.0
                numeric[k] = (fp - fm) / (2 * step)
    finally:
        x.data = stored
    a = analytic.reshape(-1)[flat_idx]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom)) if len(flat_idx) else 0.0
