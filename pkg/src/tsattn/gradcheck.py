"""Central finite-difference gradient checking for every differentiable op.

Each named case builds a tiny float64 problem, computes analytic gradients
through the tape and compares them against central differences of the same
scalar loss. The numeric side never touches the reverse-mode code path.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import attention as att
from . import training as tr

DEFAULT_H = 1e-3
TOLERANCE = 1e-4


def numeric_gradient(f, arrays, h=DEFAULT_H):
    """Central-difference gradients of scalar ``f`` w.r.t. each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric):
    """Worst elementwise |a - n| / max(|a|, |n|, 1)."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def check(build_loss, params, h=DEFAULT_H):
    """Compare tape gradients of ``build_loss(params)`` against differences.

    ``params`` are float64 tensors with ``requires_grad``; ``build_loss`` must
    be a pure function of their ``.data``. Returns the max relative error.
    """
    ad.zero_grad(params)
    with ad.Tape() as tape:
        loss = build_loss()
    analytic = tape.backward(loss, params=params)
    numeric = numeric_gradient(lambda: float(build_loss().data), [p.data for p in params], h=h)
    return max_relative_error(analytic, numeric)


def _t(rng, *shape, lo=-1.0, hi=1.0):
    return ad.Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True, dtype=np.float64)


def _away_from_zero(rng, *shape, margin=0.05):
    """Values with |x| >= margin, so ReLU kinks stay clear of the fd step."""
    mag = rng.uniform(margin, 1.0, size=shape)
    sign = np.where(rng.uniform(size=shape) < 0.5, -1.0, 1.0)
    return ad.Tensor(mag * sign, requires_grad=True, dtype=np.float64)


def _params(rng, channels):
    return att.AttentionParams.init(channels, rng, dtype=np.float64)


def _case_conv2d_same(rng):
    x = _t(rng, 5, 4, 2)
    k = _t(rng, 3, 3, 2, 3)
    b = _t(rng, 3)
    return lambda: ad.tsum(ad.mul(ad.conv2d(x, k, b, "same"), ad.conv2d(x, k, b, "same"))), [x, k, b]


def _case_conv2d_valid(rng):
    x = _t(rng, 5, 5, 2)
    k = _t(rng, 3, 3, 2, 2)
    b = _t(rng, 2)
    return lambda: ad.tsum(ad.conv2d(x, k, b, "valid")), [x, k, b]


def _case_conv2d_1x1(rng):
    x = _t(rng, 2, 4, 3, 2)
    k = _t(rng, 1, 1, 2, 1)
    b = _t(rng, 1)
    return lambda: ad.tsum(ad.mul(ad.conv2d(x, k, b), ad.conv2d(x, k, b))), [x, k, b]


def _case_avg_pool2d(rng):
    x = _t(rng, 5, 5, 2)
    return lambda: ad.tsum(ad.mul(ad.avg_pool2d(x), ad.avg_pool2d(x))), [x]


def _case_global_avg_pool_time(rng):
    x = _t(rng, 4, 3, 1)
    v = lambda: ad.global_avg_pool_axis(x, "time")
    return lambda: ad.tsum(ad.mul(v(), v())), [x]


def _case_global_avg_pool_frequency(rng):
    x = _t(rng, 2, 4, 3, 1)
    v = lambda: ad.global_avg_pool_axis(x, "frequency")
    return lambda: ad.tsum(ad.mul(v(), v())), [x]


def _case_global_mean_pool(rng):
    x = _t(rng, 2, 4, 3, 2)
    return lambda: ad.tsum(ad.mul(ad.global_mean_pool(x), ad.global_mean_pool(x))), [x]


def _case_relu(rng):
    x = _away_from_zero(rng, 4, 5)
    return lambda: ad.tsum(ad.mul(ad.relu(x), ad.relu(x))), [x]


def _case_sigmoid(rng):
    x = _t(rng, 4, 5, lo=-3.0, hi=3.0)
    return lambda: ad.tsum(ad.mul(ad.sigmoid(x), ad.sigmoid(x))), [x]


def _case_softmax(rng):
    x = _t(rng, 5, lo=-2.0, hi=2.0)
    w = ad.Tensor(rng.uniform(-1, 1, size=5), dtype=np.float64)
    return lambda: ad.tsum(ad.mul(ad.softmax(x), w)), [x]


def _case_batch_norm_train(rng):
    x = _t(rng, 3, 4, 2, 2)
    gamma = _t(rng, 2, lo=0.5, hi=1.5)
    beta = _t(rng, 2)

    def loss():
        stats = ad.RunningStats(2, dtype=np.float64)
        y = ad.batch_norm(x, gamma, beta, stats, training=True)
        return ad.tsum(ad.mul(y, y))

    return loss, [x, gamma, beta]


def _case_batch_norm_eval(rng):
    x = _t(rng, 2, 3, 2, 2)
    gamma = _t(rng, 2, lo=0.5, hi=1.5)
    beta = _t(rng, 2)
    stats = ad.RunningStats(2, dtype=np.float64)
    stats.mean = rng.uniform(-0.5, 0.5, size=2)
    stats.var = rng.uniform(0.5, 1.5, size=2)

    def loss():
        y = ad.batch_norm(x, gamma, beta, stats, training=False)
        return ad.tsum(ad.mul(y, y))

    return loss, [x, gamma, beta]


def _case_dense(rng):
    x = _t(rng, 3, 4)
    w = _t(rng, 5, 4)
    b = _t(rng, 5)
    return lambda: ad.tsum(ad.mul(ad.dense(x, w, b), ad.dense(x, w, b))), [x, w, b]


def _case_channel_squeeze(rng):
    x = _t(rng, 4, 3, 2)
    p = _params(rng, 2)
    f = lambda: att.channel_squeeze(x, p.theta_t_weight, p.theta_t_bias)
    return lambda: ad.tsum(ad.mul(f(), f())), [x, p.theta_t_weight, p.theta_t_bias]


def _case_axis_attention_weights(rng):
    x = _t(rng, 4, 3, 1)

    def loss():
        a = att.axis_attention_weights(x, "time")
        return ad.tsum(ad.mul(a.values, a.values))

    return loss, [x]


def _case_rescale(rng):
    x = _t(rng, 4, 3, 2)
    v = ad.Tensor(rng.uniform(0.1, 0.9, size=4), requires_grad=True, dtype=np.float64)

    def loss():
        y = att.rescale(x, att.AxisActivations("time", v))
        return ad.tsum(ad.mul(y, y))

    return loss, [x, v]


def _case_temporal_attention(rng):
    x = _t(rng, 4, 3, 2)
    p = _params(rng, 2)
    return (
        lambda: ad.tsum(ad.mul(att.temporal_attention(x, p), att.temporal_attention(x, p))),
        [x, *p.tensors()],
    )


def _case_spectral_attention(rng):
    x = _t(rng, 4, 3, 2)
    p = _params(rng, 2)
    return (
        lambda: ad.tsum(ad.mul(att.spectral_attention(x, p), att.spectral_attention(x, p))),
        [x, *p.tensors()],
    )


def _case_parallel_fuse(rng):
    x = _t(rng, 4, 3, 2)
    p = _params(rng, 2)
    coeffs = att.BranchCoefficients.learned(dtype=np.float64)
    coeffs.logits.data[:] = rng.uniform(-0.5, 0.5, size=3)

    def loss():
        ut = att.temporal_attention(x, p)
        uf = att.spectral_attention(x, p)
        y = att.parallel_fuse(ut, uf, x, coeffs)
        return ad.tsum(ad.mul(y, y))

    return loss, [x, *p.tensors(), coeffs.logits]


def _case_serial_concat_ts(rng):
    x = _t(rng, 4, 3, 2)
    p = _params(rng, 2)
    f = lambda: att.serial_concat(x, p, "TS")
    return lambda: ad.tsum(ad.mul(f(), f())), [x, *p.tensors()]


def _case_serial_concat_st(rng):
    x = _t(rng, 4, 3, 2)
    p = _params(rng, 2)
    f = lambda: att.serial_concat(x, p, "ST")
    return lambda: ad.tsum(ad.mul(f(), f())), [x, *p.tensors()]


def _case_cross_entropy(rng):
    logits = _t(rng, 4, 5, lo=-2.0, hi=2.0)
    t = rng.uniform(0.1, 1.0, size=(4, 5))
    t /= t.sum(axis=1, keepdims=True)
    return lambda: tr.cross_entropy(logits, t), [logits]


CASES = {
    "conv2d": _case_conv2d_same,
    "conv2d_valid": _case_conv2d_valid,
    "conv2d_1x1": _case_conv2d_1x1,
    "avg_pool2d": _case_avg_pool2d,
    "global_avg_pool_time": _case_global_avg_pool_time,
    "global_avg_pool_frequency": _case_global_avg_pool_frequency,
    "global_mean_pool": _case_global_mean_pool,
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "softmax": _case_softmax,
    "batch_norm": _case_batch_norm_train,
    "batch_norm_eval": _case_batch_norm_eval,
    "dense": _case_dense,
    "channel_squeeze": _case_channel_squeeze,
    "axis_attention_weights": _case_axis_attention_weights,
    "rescale": _case_rescale,
    "temporal_attention": _case_temporal_attention,
    "spectral_attention": _case_spectral_attention,
    "parallel_fuse": _case_parallel_fuse,
    "serial_concat_TS": _case_serial_concat_ts,
    "serial_concat_ST": _case_serial_concat_st,
    "cross_entropy": _case_cross_entropy,
}


def run_case(name, seed=0):
    """Run one named case; returns its max relative error."""
    if name not in CASES:
        raise ValueError(f"unknown gradcheck op {name!r}; valid: {', '.join(sorted(CASES))}")
    rng = np.random.default_rng(seed)
    build_loss, params = CASES[name](rng)
    return check(build_loss, params)


def run_all(seed=0):
    """Run every case; returns {name: max relative error}."""
    return {name: run_case(name, seed=seed) for name in CASES}
