"""Temporal and spectral gating of feature maps, plus branch fusion.

A feature map U (T x F x C, optionally batched) is squeezed to one channel by
a 1x1 convolution, mean-pooled over the opposite axis, and passed through a
sigmoid to give per-frame or per-band gates in (0, 1). Gating U with the two
kinds of gates yields U_T and U_F; the parallel variant blends U_T, U_F and
the untouched U with softmax-normalized coefficients, while the serial
variants chain one attention after the other.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

FIXED_COEFFICIENT = 0.33  # fixed variant uses literally 0.33 per branch

AXES = ("time", "frequency")
SERIAL_ORDERS = ("TS", "ST")


@dataclass
class AttentionParams:
    """1x1 channel-squeeze convolutions for the two attention branches."""

    theta_t_weight: Tensor  # (1, 1, C, 1)
    theta_t_bias: Tensor  # (1,)
    theta_f_weight: Tensor
    theta_f_bias: Tensor

    @classmethod
    def init(cls, channels, rng, dtype=np.float32):
        def w():
            return ad.he_uniform((1, 1, channels, 1), fan_in=channels, rng=rng, dtype=dtype)

        def b():
            return Tensor(np.zeros(1, dtype=dtype), requires_grad=True)

        return cls(w(), b(), w(), b())

    def tensors(self):
        return [self.theta_t_weight, self.theta_t_bias, self.theta_f_weight, self.theta_f_bias]

    @property
    def channels(self):
        return self.theta_t_weight.data.shape[2]


@dataclass
class AxisActivations:
    """Sigmoid gates along one axis: per-frame (time) or per-band (frequency)."""

    kind: str
    values: Tensor  # (T,) / (F,) or batched (B, T) / (B, F)

    def __post_init__(self):
        if self.kind not in AXES:
            raise ValueError(f"kind must be one of {AXES}, got {self.kind!r}")


class BranchCoefficients:
    """Blend weights for the three fusion branches.

    Learned form stores three raw logits and re-normalizes them with softmax
    on every forward pass; the fixed form uses the constant triple
    (0.33, 0.33, 0.33), which deliberately sums to 0.99.
    """

    def __init__(self, logits=None, fixed=None):
        if (logits is None) == (fixed is None):
            raise ValueError("exactly one of logits/fixed must be given")
        self.logits = logits
        self.fixed = fixed

    @classmethod
    def learned(cls, dtype=np.float32):
        # equal initial logits give the uniform (1/3, 1/3, 1/3) start
        return cls(logits=Tensor(np.zeros(3, dtype=dtype), requires_grad=True))

    @classmethod
    def fixed_variant(cls, dtype=np.float32):
        return cls(fixed=np.full(3, FIXED_COEFFICIENT, dtype=dtype))

    @property
    def is_learned(self):
        return self.logits is not None

    def normalized(self):
        """Coefficient triple as a tensor; softmax of the logits if learned."""
        if self.is_learned:
            return normalize_coefficients(self.logits)
        return Tensor(self.fixed)

    def normalized_values(self):
        return np.array(self.normalized().data, copy=True)


def normalize_coefficients(logits):
    """Softmax over exactly three logits."""
    if logits.data.shape != (3,):
        raise ShapeError(f"expected 3 logits, got shape {logits.data.shape}")
    return ad.softmax(logits)


def channel_squeeze(u, weight, bias):
    """Squeeze C channels to one with a 1x1 convolution."""
    if weight.data.shape[:2] != (1, 1) or weight.data.shape[3] != 1:
        raise ShapeError(f"squeeze kernel must be 1x1xCx1, got {weight.data.shape}")
    return ad.conv2d(u, weight, bias, padding="same")


def axis_attention_weights(v, kind):
    """Gates from a single-channel map: mean-pool the other axis, sigmoid.

    ``kind="time"`` pools over frequency and yields length-T gates;
    ``kind="frequency"`` pools over time and yields length-F gates.
    """
    if kind == "time":
        pooled = ad.global_avg_pool_axis(v, "frequency")
    elif kind == "frequency":
        pooled = ad.global_avg_pool_axis(v, "time")
    else:
        raise ValueError(f"kind must be one of {AXES}, got {kind!r}")
    return AxisActivations(kind, ad.sigmoid(pooled))


def rescale(u, activations):
    """Broadcast-multiply a feature map by axis gates."""
    vals = activations.values
    batched = u.data.ndim == 4
    t_axis = 1 if batched else 0
    f_axis = 2 if batched else 1
    axis_len = u.data.shape[t_axis if activations.kind == "time" else f_axis]
    if vals.data.shape[-1] != axis_len:
        raise ShapeError(
            f"{activations.kind} gates of length {vals.data.shape[-1]} "
            f"do not match axis length {axis_len}"
        )
    if activations.kind == "time":
        shape = vals.data.shape + (1, 1)
    else:
        shape = vals.data.shape[:-1] + (1,) + vals.data.shape[-1:] + (1,)
    return ad.mul(u, ad.reshape(vals, shape))


def temporal_attention(u, params):
    """Gate U per time frame: rescale(U, sigmoid(GAP_F(1x1(U; theta_T))))."""
    v = channel_squeeze(u, params.theta_t_weight, params.theta_t_bias)
    return rescale(u, axis_attention_weights(v, "time"))


def spectral_attention(u, params):
    """Gate U per frequency band, the mirror of temporal attention."""
    v = channel_squeeze(u, params.theta_f_weight, params.theta_f_bias)
    return rescale(u, axis_attention_weights(v, "frequency"))


def parallel_fuse(u_t, u_f, u, coeffs):
    """Weighted sum of the two attended maps and the shortcut branch."""
    if not (u_t.data.shape == u_f.data.shape == u.data.shape):
        raise ShapeError(
            f"branch shapes differ: {u_t.data.shape}, {u_f.data.shape}, {u.data.shape}"
        )
    w = coeffs.normalized() if isinstance(coeffs, BranchCoefficients) else coeffs
    out = ad.mul(u_t, ad.index_scalar(w, 0))
    out = ad.add(out, ad.mul(u_f, ad.index_scalar(w, 1)))
    return ad.add(out, ad.mul(u, ad.index_scalar(w, 2)))


def serial_concat(u, params, order):
    """Chain the two attentions: "TS" is temporal then spectral, "ST" reverse."""
    if order not in SERIAL_ORDERS:
        raise ValueError(f"order must be one of {SERIAL_ORDERS}, got {order!r}")
    if order == "TS":
        return spectral_attention(temporal_attention(u, params), params)
    return temporal_attention(spectral_attention(u, params), params)
