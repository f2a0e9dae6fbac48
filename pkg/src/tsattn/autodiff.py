"""Dense tensor arithmetic with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy arrays (rank 0..4, float32 for training or
float64 for gradient-check suites). Operations executed while a ``Tape`` is
active are recorded in execution order; ``Tape.backward`` replays the records
in reverse and accumulates gradients into the ``.grad`` of every leaf tensor
that requires them. Without an active tape, ops run as plain numpy (eval
mode, no recording cost).

All forward math is deterministic and single-threaded from the caller's
point of view; producing ops never mutate their inputs.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NumericError",
    "custom_op",
    "add",
    "mul",
    "reshape",
    "tsum",
    "index_scalar",
    "relu",
    "sigmoid",
    "softmax",
    "conv2d",
    "avg_pool2d",
    "global_avg_pool_axis",
    "global_mean_pool",
    "batch_norm",
    "dense",
    "backward",
    "zero_grad",
    "he_uniform",
    "set_finite_checks",
    "RunningStats",
]

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

_FINITE_CHECKS = True


class ShapeError(ValueError):
    """Raised when tensor shapes violate an operation's contract."""


class NumericError(ArithmeticError):
    """Raised when a forward op produces NaN or Inf."""


def set_finite_checks(enabled):
    """Toggle per-op NaN/Inf detection (on by default)."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


class Tensor:
    """A dense array plus an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} tensor not supported (max rank 4)")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of operations for one forward pass.

    Node order is execution order, which is topological by construction:
    every node's inputs were produced (and recorded) before it.
    """

    def __init__(self):
        self._nodes = []  # (output, inputs, backward_fn)

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE.pop()
        return False

    def backward(self, loss, params=None):
        """Accumulate d(loss)/d(leaf) into each leaf's ``.grad``.

        ``loss`` must be a scalar tensor reachable from this tape. Leaves that
        do not influence the loss keep a zero gradient. When ``params`` is
        given, returns their gradient arrays in order.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        produced = {id(node[0]) for node in self._nodes}
        grads = {id(loss): np.ones_like(loss.data)}
        for out, inputs, bwd in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, bwd(g)):
                if gi is None or not t.requires_grad:
                    continue
                if id(t) in produced:
                    acc = grads.get(id(t))
                    grads[id(t)] = gi if acc is None else acc + gi
                else:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad = t.grad + gi
        if params is not None:
            out = []
            for p in params:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
                out.append(p.grad)
            return out
        return None

    def __len__(self):
        return len(self._nodes)


_ACTIVE: list[Tape] = []


def _tape():
    return _ACTIVE[-1] if _ACTIVE else None


def _check_finite(name, arr):
    if _FINITE_CHECKS and not np.isfinite(arr).all():
        raise NumericError(f"{name} produced non-finite values")


def custom_op(name, out_data, inputs, backward_fn):
    """Wrap ``out_data`` in a tensor and record ``backward_fn`` if taping.

    ``backward_fn(grad)`` must return one gradient array (or None) per input,
    in order. This is the extension point higher modules use for fused ops.
    """
    _check_finite(name, out_data)
    tape = _tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape._nodes.append((out, tuple(inputs), backward_fn))
    return out


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return custom_op("add", out, (a, b), bwd)


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out = a.data * b.data

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return custom_op("mul", out, (a, b), bwd)


def reshape(a, shape):
    shape = tuple(shape)
    out = a.data.reshape(shape)
    src = a.data.shape

    def bwd(g):
        return (g.reshape(src),)

    return custom_op("reshape", out, (a,), bwd)


def tsum(a):
    """Sum of all elements, as a scalar tensor."""
    out = a.data.sum()

    def bwd(g):
        return (np.full_like(a.data, g),)

    return custom_op("sum", np.asarray(out, dtype=a.data.dtype), (a,), bwd)


def index_scalar(v, i):
    """Pick element ``i`` of a rank-1 tensor as a scalar tensor."""
    if v.data.ndim != 1:
        raise ShapeError(f"index_scalar needs a vector, got shape {v.data.shape}")
    i = int(i)
    out = np.asarray(v.data[i], dtype=v.data.dtype)

    def bwd(g):
        gi = np.zeros_like(v.data)
        gi[i] = g
        return (gi,)

    return custom_op("index_scalar", out, (v,), bwd)


def relu(a):
    out = np.maximum(a.data, 0)

    def bwd(g):
        return (g * (a.data > 0),)

    return custom_op("relu", out, (a,), bwd)


def sigmoid(a):
    """Elementwise logistic function, output strictly inside (0, 1)."""
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    fi = np.finfo(x.dtype)
    np.clip(out, fi.tiny, 1.0 - fi.epsneg, out=out)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return custom_op("sigmoid", out, (a,), bwd)


def softmax(v):
    """Numerically stable softmax over a rank-1 tensor."""
    if v.data.ndim != 1 or v.data.size == 0:
        raise ShapeError(f"softmax needs a non-empty vector, got shape {v.data.shape}")
    shifted = v.data - v.data.max()
    e = np.exp(shifted)
    out = e / e.sum()

    def bwd(g):
        return (out * (g - np.dot(g, out)),)

    return custom_op("softmax", out, (v,), bwd)


# ---------------------------------------------------------------------------
# spatial ops (layout: [batch,] time, frequency, channels)


def _lift(x):
    """View rank-3 data as a singleton batch; report whether it was lifted."""
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected rank 3 or 4 input, got rank {x.ndim}")


def conv2d(x, kernel, bias=None, padding="same"):
    """2-D convolution with stride 1 over a T x F x C map.

    ``kernel`` has shape (kh, kw, C_in, C_out); ``same`` padding preserves the
    spatial dims (odd kernels only), ``valid`` shrinks them.
    """
    xd, lifted = _lift(x.data)
    kd = kernel.data
    if kd.ndim != 4:
        raise ShapeError(f"kernel must be rank 4 (kh, kw, C_in, C_out), got {kd.shape}")
    kh, kw, cin, cout = kd.shape
    if xd.shape[3] != cin:
        raise ShapeError(f"input has {xd.shape[3]} channels but kernel expects {cin}")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"same padding requires odd kernel dims, got {kh}x{kw}")
        pt, pf = kh // 2, kw // 2
        xp = np.pad(xd, ((0, 0), (pt, pt), (pf, pf), (0, 0))) if pt or pf else xd
        to, fo = xd.shape[1], xd.shape[2]
    elif padding == "valid":
        xp = xd
        to, fo = xd.shape[1] - kh + 1, xd.shape[2] - kw + 1
        if to < 1 or fo < 1:
            raise ShapeError(f"input {xd.shape[1]}x{xd.shape[2]} smaller than kernel {kh}x{kw}")
    else:
        raise ValueError(f"unknown padding {padding!r}")

    out = np.zeros((xd.shape[0], to, fo, cout), dtype=xd.dtype)
    for dt in range(kh):
        for df in range(kw):
            out += xp[:, dt : dt + to, df : df + fo, :] @ kd[dt, df]
    if bias is not None:
        if bias.data.shape != (cout,):
            raise ShapeError(f"bias shape {bias.data.shape} != ({cout},)")
        out += bias.data

    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def bwd(g):
        dxp = np.zeros_like(xp)
        dk = np.zeros_like(kd)
        for dt in range(kh):
            for df in range(kw):
                patch = xp[:, dt : dt + to, df : df + fo, :]
                dk[dt, df] = np.tensordot(patch, g, axes=([0, 1, 2], [0, 1, 2]))
                dxp[:, dt : dt + to, df : df + fo, :] += g @ kd[dt, df].T
        if padding == "same" and (kh // 2 or kw // 2):
            pt, pf = kh // 2, kw // 2
            dx = dxp[:, pt : pt + xd.shape[1], pf : pf + xd.shape[2], :]
        else:
            dx = dxp
        if lifted:
            dx = dx[0]
        if bias is None:
            return dx, dk
        return dx, dk, g.sum(axis=(0, 1, 2))

    if lifted:
        out = out[0]
    return custom_op("conv2d", out, inputs, bwd)


def avg_pool2d(x):
    """2x2 average pooling; odd trailing row/column is dropped."""
    xd, lifted = _lift(x.data)
    b, t, f, c = xd.shape
    if t < 2 or f < 2:
        raise ShapeError(f"avg_pool2d needs T,F >= 2, got {t}x{f}")
    t2, f2 = t // 2, f // 2
    cropped = xd[:, : 2 * t2, : 2 * f2, :]
    out = cropped.reshape(b, t2, 2, f2, 2, c).mean(axis=(2, 4))

    def bwd(g):
        gx = np.zeros_like(xd)
        spread = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * np.asarray(0.25, dtype=xd.dtype)
        gx[:, : 2 * t2, : 2 * f2, :] = spread
        return (gx[0] if lifted else gx,)

    if lifted:
        out = out[0]
    return custom_op("avg_pool2d", out, (x,), bwd)


def global_avg_pool_axis(x, axis):
    """Mean-reduce one spatial axis of a single-channel T x F x 1 map.

    ``axis="frequency"`` collapses F and yields a length-T vector (a time
    profile); ``axis="time"`` collapses T and yields a length-F vector.
    Batched input gives (B, T) or (B, F).
    """
    xd, lifted = _lift(x.data)
    if xd.shape[3] != 1:
        raise ShapeError(f"global_avg_pool_axis needs a single channel, got C={xd.shape[3]}")
    b, t, f, _ = xd.shape
    if axis == "frequency":
        out = xd.mean(axis=(2, 3))  # (B, T)
    elif axis == "time":
        out = xd.mean(axis=(1, 3))  # (B, F)
    else:
        raise ValueError(f"axis must be 'time' or 'frequency', got {axis!r}")

    def bwd(g):
        if axis == "frequency":
            gx = np.broadcast_to(g[:, :, None, None] / f, xd.shape).astype(xd.dtype)
        else:
            gx = np.broadcast_to(g[:, None, :, None] / t, xd.shape).astype(xd.dtype)
        return (gx[0] if lifted else gx,)

    if lifted:
        out = out[0]
    return custom_op("global_avg_pool_axis", out, (x,), bwd)


def global_mean_pool(x):
    """Mean over all spatial positions, per channel: (B,T,F,C) -> (B,C)."""
    xd, lifted = _lift(x.data)
    b, t, f, c = xd.shape
    out = xd.mean(axis=(1, 2))

    def bwd(g):
        gx = np.broadcast_to(g[:, None, None, :] / (t * f), xd.shape).astype(xd.dtype)
        return (gx[0] if lifted else gx,)

    if lifted:
        out = out[0]
    return custom_op("global_mean_pool", out, (x,), bwd)


class RunningStats:
    """Per-channel running mean/variance buffers for batch norm."""

    def __init__(self, channels, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)

    def update(self, batch_mean, batch_var):
        m = BN_MOMENTUM
        self.mean = m * self.mean + (1.0 - m) * batch_mean.astype(self.mean.dtype)
        self.var = m * self.var + (1.0 - m) * batch_var.astype(self.var.dtype)


def batch_norm(x, gamma, beta, stats, training):
    """Per-channel batch normalization over batch x T x F.

    Train mode normalizes with batch statistics and updates ``stats``;
    eval mode normalizes with the stored running statistics.
    """
    xd, lifted = _lift(x.data)
    b, t, f, c = xd.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},)")
    n = b * t * f
    if n == 0:
        raise ShapeError("batch_norm over an empty batch")
    eps = np.asarray(BN_EPS, dtype=xd.dtype)
    if training:
        mean = xd.mean(axis=(0, 1, 2))
        var = xd.var(axis=(0, 1, 2))
        stats.update(mean, var)
    else:
        mean = stats.mean.astype(xd.dtype)
        var = stats.var.astype(xd.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv_std
    out = gamma.data * xhat + beta.data

    def bwd(g):
        dgamma = (g * xhat).sum(axis=(0, 1, 2))
        dbeta = g.sum(axis=(0, 1, 2))
        dxhat = g * gamma.data
        if training:
            # normalization couples every element of a channel
            dx = (
                inv_std
                / n
                * (n * dxhat - dxhat.sum(axis=(0, 1, 2)) - xhat * (dxhat * xhat).sum(axis=(0, 1, 2)))
            )
        else:
            dx = dxhat * inv_std
        return (dx[0] if lifted else dx), dgamma, dbeta

    if lifted:
        out = out[0]
    return custom_op("batch_norm", out, (x, gamma, beta), bwd)


def dense(x, weights, bias):
    """Affine map y = W x + b; ``weights`` is (out_features, in_features)."""
    xd = x.data
    wd = weights.data
    if wd.ndim != 2:
        raise ShapeError(f"weights must be a matrix, got shape {wd.shape}")
    if xd.ndim not in (1, 2) or xd.shape[-1] != wd.shape[1]:
        raise ShapeError(f"input shape {xd.shape} incompatible with weights {wd.shape}")
    if bias.data.shape != (wd.shape[0],):
        raise ShapeError(f"bias shape {bias.data.shape} != ({wd.shape[0]},)")
    out = xd @ wd.T + bias.data

    def bwd(g):
        if xd.ndim == 1:
            return g @ wd, np.outer(g, xd), g
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return custom_op("dense", out, (x, weights, bias), bwd)


# ---------------------------------------------------------------------------
# conveniences


def backward(tape, loss, params=None):
    """Module-level alias for ``tape.backward``."""
    return tape.backward(loss, params=params)


def zero_grad(params):
    for p in params:
        p.grad = None


def he_uniform(shape, fan_in, rng, dtype=np.float32):
    """He-uniform initialized parameter tensor (for ReLU networks)."""
    limit = np.sqrt(6.0 / fan_in)
    data = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)
