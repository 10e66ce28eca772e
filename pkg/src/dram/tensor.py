"""Dense tensors with taped reverse-mode differentiation.

Small engine on top of numpy, sized for recurrent attention models: 64-bit
floats by default, explicit Tape objects, and fused primitives for the few
hot spots (LSTM cell, convolution, cross-entropy). Every forward op checks
its output for NaN/Inf and raises NonFiniteError on violation, so numeric
blowups surface at the op that produced them.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the dtype used for newly created float tensors (float64/float32)."""
    global DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float64 or float32")
    DEFAULT_DTYPE = dt.type


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf from finite inputs."""


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested op."""


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    # min/max are two C passes and propagate NaN, cheaper than isfinite().all()
    # on the small arrays this engine sees.
    if arr.size and not (np.isfinite(arr.min()) and np.isfinite(arr.max())):
        raise NonFiniteError(f"non-finite values in output of {op}")
    return arr


class Tensor:
    """Array value that can participate in taped differentiation.

    `requires_grad` marks leaf parameters. `tracked` is true for any tensor
    whose gradient is needed (parameters and everything computed from them
    while a tape is recording). Gradients accumulate additively in `.grad`
    until `zero_grad` clears them.
    """

    __slots__ = ("data", "requires_grad", "tracked", "grad")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind == "f":
            arr = arr.astype(DEFAULT_DTYPE, copy=False)
        else:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.tracked = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Constant view of this tensor's value; cuts the tape edge."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    """One recorded primitive application."""

    __slots__ = ("inputs", "outputs", "fn", "name")

    def __init__(self, inputs, outputs, fn, name):
        self.inputs = inputs
        self.outputs = outputs
        self.fn = fn
        self.name = name


_ACTIVE_TAPE = None


class Tape:
    """Ordered record of primitive applications.

    Execution order is already topological, so `backward` is a single reverse
    sweep with additive accumulation into `.grad`. A tape is consumed by
    `backward`; call `reset` to record on it again.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already recording")
        if self.consumed:
            raise RuntimeError("tape was consumed by backward; reset() it first")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False

    def backward(self, seed: Tensor) -> None:
        """Reverse sweep from `seed` (a scalar unless seeded manually)."""
        if self.consumed:
            raise RuntimeError("tape already consumed; reset() before reuse")
        if _ACTIVE_TAPE is self:
            raise RuntimeError("cannot run backward while the tape is recording")
        if seed.grad is None:
            if seed.data.size != 1:
                raise ShapeError("backward seed must be scalar or carry an explicit grad")
            seed.grad = np.ones_like(seed.data)
        for node in reversed(self.nodes):
            out_grads = []
            needed = False
            for out in node.outputs:
                if out.grad is None:
                    out_grads.append(np.zeros_like(out.data))
                else:
                    out_grads.append(out.grad)
                    needed = True
            if not needed:
                continue
            in_grads = node.fn(*out_grads)
            for t, g in zip(node.inputs, in_grads):
                if g is None or not isinstance(t, Tensor) or not t.tracked:
                    continue
                if t.grad is None:
                    t.grad = g
                else:
                    t.grad = t.grad + g
        self.consumed = True


def _record(name, inputs, outputs, fn):
    tape = _ACTIVE_TAPE
    if tape is None:
        return
    tracked = False
    for t in inputs:
        if isinstance(t, Tensor) and t.tracked:
            tracked = True
            break
    if not tracked:
        return
    for out in outputs:
        out.tracked = True
    tape.nodes.append(Node(inputs, outputs, fn, name))


def _out(data, op_name) -> Tensor:
    t = Tensor.__new__(Tensor)
    t.data = _check_finite(data, op_name)
    t.requires_grad = False
    t.tracked = False
    t.grad = None
    return t


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


def gradients(params) -> list:
    """Gradients for `params` after backward; zeros for untouched parameters."""
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _out(a.data + b.data, "add")
    _record("add", (a, b), (out,), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = _out(a.data - b.data, "sub")
    _record("sub", (a, b), (out,), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _out(a.data * b.data, "mul")

    def bwd(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    _record("mul", (a, b), (out,), bwd)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    out = _out(a.data * s, "scale")
    _record("scale", (a,), (out,), lambda g: (g * s,))
    return out


def add_const(a: Tensor, c) -> Tensor:
    out = _out(a.data + c, "add_const")
    _record("add_const", (a,), (out,), lambda g: (g,))
    return out


def square(a: Tensor) -> Tensor:
    out = _out(a.data * a.data, "square")
    _record("square", (a,), (out,), lambda g: (2.0 * a.data * g,))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} @ {b.data.shape}")
    out = _out(a.data @ b.data, "matmul")
    _record("matmul", (a, b), (out,), lambda g: (g @ b.data.T, a.data.T @ g))
    return out


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with b broadcast over rows; the workhorse FC layer."""
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"affine: x {x.data.shape} incompatible with w {w.data.shape}")
    out = _out(x.data @ w.data + b.data, "affine")

    def bwd(g):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    _record("affine", (x, w, b), (out,), bwd)
    return out


def relu(a: Tensor) -> Tensor:
    out = _out(np.maximum(a.data, 0.0), "relu")
    _record("relu", (a,), (out,), lambda g: (np.where(a.data > 0.0, g, 0.0),))
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = _out(y, "sigmoid")
    _record("sigmoid", (a,), (out,), lambda g: (g * y * (1.0 - y),))
    return out


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = _out(y, "tanh")
    _record("tanh", (a,), (out,), lambda g: (g * (1.0 - y * y),))
    return out


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    out = _out(a.data.reshape(shape), "reshape")
    _record("reshape", (a,), (out,), lambda g: (g.reshape(old),))
    return out


def flatten_rows(a: Tensor) -> Tensor:
    """(B, ...) -> (B, prod(...))."""
    return reshape(a, (a.data.shape[0], -1))


def concat(tensors, axis: int = 1) -> Tensor:
    datas = [t.data for t in tensors]
    out = _out(np.concatenate(datas, axis=axis), "concat")
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    _record("concat", tuple(tensors), (out,), bwd)
    return out


def sum_all(a: Tensor) -> Tensor:
    out = _out(np.asarray(a.data.sum()), "sum_all")
    _record("sum_all", (a,), (out,), lambda g: (np.broadcast_to(g, a.data.shape).copy(),))
    return out


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = _out(np.asarray(a.data.mean()), "mean_all")
    _record("mean_all", (a,), (out,), lambda g: (np.broadcast_to(g / n, a.data.shape).copy(),))
    return out


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# fused network primitives


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log softmax, shifted by the row max for stability."""
    z = a.data - a.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = _out(logp, "log_softmax")

    def bwd(g):
        return (g - np.exp(logp) * g.sum(axis=1, keepdims=True),)

    _record("log_softmax", (a,), (out,), bwd)
    return out


def nll_pick(logp: Tensor, index: np.ndarray, weight: np.ndarray | None = None) -> Tensor:
    """Per-row negative log-likelihood: -weight * logp[i, index[i]]."""
    idx = np.asarray(index, dtype=np.intp)
    rows = np.arange(logp.data.shape[0])
    w = np.ones(len(rows), dtype=logp.data.dtype) if weight is None else np.asarray(weight, dtype=logp.data.dtype)
    out = _out(-w * logp.data[rows, idx], "nll_pick")

    def bwd(g):
        gi = np.zeros_like(logp.data)
        gi[rows, idx] = -w * g
        return (gi,)

    _record("nll_pick", (logp,), (out,), bwd)
    return out


def softmax_cross_entropy(logits: Tensor, target) -> tuple:
    """(per-row loss, log-probabilities) for integer class targets."""
    t = np.atleast_1d(np.asarray(target, dtype=np.intp))
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (B, K) logits, got {logits.data.shape}")
    if t.shape[0] != logits.data.shape[0]:
        raise ShapeError("one target per logits row required")
    if t.min() < 0 or t.max() >= logits.data.shape[1]:
        raise ShapeError(f"target class out of range [0, {logits.data.shape[1]})")
    logp = log_softmax(logits)
    return nll_pick(logp, t), logp


def gaussian_log_density(mean: Tensor, sample: np.ndarray, sigma: float) -> Tensor:
    """Per-row log N(sample; mean, sigma^2 I). `sample` is a constant.

    d/d(mean) = (sample - mean) / sigma^2, which is the score function the
    reinforcement term needs on the tape.
    """
    s = np.asarray(sample, dtype=mean.data.dtype)
    if s.shape != mean.data.shape:
        raise ShapeError(f"sample shape {s.shape} != mean shape {mean.data.shape}")
    d = mean.data.shape[1]
    diff = s - mean.data
    const = d * np.log(sigma * np.sqrt(2.0 * np.pi))
    out = _out(-(diff * diff).sum(axis=1) / (2.0 * sigma * sigma) - const, "gaussian_log_density")

    def bwd(g):
        return (diff / (sigma * sigma) * g[:, None],)

    _record("gaussian_log_density", (mean,), (out,), bwd)
    return out


def half_squared_error(pred: Tensor, target: np.ndarray, weight: np.ndarray | None = None) -> Tensor:
    """Per-row weight * 0.5 * (pred - target)^2 against a constant target."""
    t = np.asarray(target, dtype=pred.data.dtype)
    w = np.ones_like(pred.data) if weight is None else np.asarray(weight, dtype=pred.data.dtype)
    diff = pred.data - t
    out = _out(0.5 * w * diff * diff, "half_squared_error")
    _record("half_squared_error", (pred,), (out,), lambda g: (w * diff * g,))
    return out


def lstm_cell(x: Tensor, h: Tensor, c: Tensor, w: Tensor, b: Tensor) -> tuple:
    """Standard LSTM cell, one fused node.

    Gate layout along the last axis of w/b is [input, forget, candidate,
    output]. w has shape (x_dim + hidden, 4*hidden), b (4*hidden,).
    Returns (h_new, c_new).
    """
    dh = h.data.shape[1]
    if w.data.shape != (x.data.shape[1] + dh, 4 * dh):
        raise ShapeError(f"lstm_cell: w shape {w.data.shape} does not match x {x.data.shape} h {h.data.shape}")
    xh = np.concatenate([x.data, h.data], axis=1)
    z = xh @ w.data + b.data
    zi, zf, zg, zo = np.split(z, 4, axis=1)
    i = 1.0 / (1.0 + np.exp(-zi))
    f = 1.0 / (1.0 + np.exp(-zf))
    g_ = np.tanh(zg)
    o = 1.0 / (1.0 + np.exp(-zo))
    c_new = f * c.data + i * g_
    tc = np.tanh(c_new)
    h_new = o * tc
    out_h = _out(h_new, "lstm_cell")
    out_c = _out(c_new, "lstm_cell")

    def bwd(gh, gc_in):
        go = gh * tc
        gc = gc_in + gh * o * (1.0 - tc * tc)
        dzi = gc * g_ * i * (1.0 - i)
        dzf = gc * c.data * f * (1.0 - f)
        dzg = gc * i * (1.0 - g_ * g_)
        dzo = go * o * (1.0 - o)
        dz = np.concatenate([dzi, dzf, dzg, dzo], axis=1)
        dxh = dz @ w.data.T
        dw = xh.T @ dz
        db = dz.sum(axis=0)
        dx = dxh[:, : x.data.shape[1]]
        dhp = dxh[:, x.data.shape[1]:]
        return dx, dhp, gc * f, dw, db

    _record("lstm_cell", (x, h, c, w, b), (out_h, out_c), bwd)
    return out_h, out_c


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride=1, padding=0) -> Tensor:
    """Cross-correlation over (B, C, H, W) input with zero padding.

    Output spatial size is floor((H + 2p - kh) / stride) + 1 per axis.
    """
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    B, C, H, W = x.data.shape
    co, ci, kh, kw = w.data.shape
    if ci != C:
        raise ShapeError(f"conv2d: kernel expects {ci} channels, input has {C}")
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for padded input {H + 2 * ph}x{W + 2 * pw}")

    if ph or pw:
        xp = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=x.data.dtype)
        xp[:, :, ph: ph + H, pw: pw + W] = x.data
    else:
        xp = x.data
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(B, Ho, Wo, C, kh, kw), strides=(s0, s2 * sh, s3 * sw, s1, s2, s3)
    )
    cols = win.reshape(B * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(co, -1).T
    out2 = cols @ wmat + b.data
    out = _out(out2.reshape(B, Ho, Wo, co).transpose(0, 3, 1, 2), "conv2d")

    def bwd(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, co)
        dw = (cols.T @ g2).T.reshape(co, ci, kh, kw)
        db = g2.sum(axis=0)
        dcols = (g2 @ wmat.T).reshape(B, Ho, Wo, C, kh, kw)
        dxp = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=x.data.dtype)
        # scatter-add one kernel offset at a time; kh*kw vectorized slices
        for a in range(kh):
            for bb in range(kw):
                dxp[:, :, a: a + Ho * sh: sh, bb: bb + Wo * sw: sw] += dcols[:, :, :, :, a, bb].transpose(0, 3, 1, 2)
        dx = dxp[:, :, ph: ph + H, pw: pw + W] if (ph or pw) else dxp
        return dx, dw, db

    _record("conv2d", (x, w, b), (out,), bwd)
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout: scales kept units by 1/(1-rate) so eval needs no rescale."""
    if not training or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = 1.0 - rate
    mask = (rng.random(x.data.shape) < keep).astype(x.data.dtype) / keep
    out = _out(x.data * mask, "dropout")
    _record("dropout", (x,), (out,), lambda g: (g * mask,))
    return out


# ---------------------------------------------------------------------------
# parameter initialization


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(DEFAULT_DTYPE)
