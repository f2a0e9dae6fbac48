"""End-to-end optimization: Adam with exponential learning-rate decay,
categorical cross entropy over soft labels, mixup and SpecAugment.

The loop draws shuffled mini-batches without replacement per epoch, augments
them, and applies one Adam step per iteration; everything is driven by a
single seeded generator, so a (seed, manifest, config) triple fully
determines the trained parameters and the metrics log.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as datamod
from .autodiff import NumericError, ShapeError, Tensor


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; defaults are the full-scale protocol values."""

    lr0: float = 0.01
    lr_decay: float = 0.98
    lr_decay_every: int = 5
    batch_size: int = 64
    max_iters: int = 2000
    mixup_alpha: float = 0.2
    time_masks: int = 2
    time_mask_width: int = 16
    freq_masks: int = 2
    freq_mask_width: int = 8
    seed: int = 0
    eval_fold: int = 2
    eval_every: int = 100
    stop_train_acc: float = 0.0  # > 0 stops early once periodic train accuracy reaches it

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("mixup_alpha", "stop_train_acc", "seed"):
                if v < 0:
                    raise ValueError(f"{f.name} must be >= 0, got {v}")
            elif v <= 0:
                raise ValueError(f"{f.name} must be positive, got {v}")

    def with_overrides(self, **kwargs):
        return replace(self, **kwargs)

    @classmethod
    def from_file(cls, path):
        """Parse a line-oriented key=value config file; unknown keys error."""
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            if key not in types:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            kwargs[key] = float(value) if types[key] == "float" else int(value)
        return cls(**kwargs)


def lr_schedule(iteration, lr0=0.01, decay=0.98, every=5):
    """Piecewise-constant exponential decay: lr0 * decay^(iter // every)."""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    return lr0 * decay ** (iteration // every)


def one_hot(labels, n_classes, dtype=np.float32):
    out = np.zeros((len(labels), n_classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def cross_entropy(logits, targets):
    """Mean over the batch of -sum_k t_k * log softmax(z)_k.

    ``targets`` are soft label rows summing to 1 (mixup produces these).
    Log-probabilities come from max-shifted logits for stability.
    """
    zd = logits.data
    t = np.asarray(targets, dtype=zd.dtype)
    if zd.ndim != 2 or t.shape != zd.shape:
        raise ShapeError(f"logits {zd.shape} and targets {t.shape} must both be (batch, K)")
    if not np.allclose(t.sum(axis=1), 1.0, atol=1e-3):
        raise ValueError("target rows must sum to 1 (soft labels)")
    b = zd.shape[0]
    shifted = zd - zd.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -(t * logp).sum() / b
    probs = np.exp(logp)

    def bwd(g):
        return (g * (probs - t) / b,)

    return ad.custom_op("cross_entropy", np.asarray(loss, dtype=zd.dtype), (logits,), bwd)


@dataclass
class OptimizerState:
    """Adam moment accumulators, one pair per parameter."""

    m: list
    v: list
    step: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def adam_step(params, grads, state, lr):
    """One Adam update with default betas and bias correction, in place."""
    state.step += 1
    t = state.step
    b1, b2 = ADAM_BETA1, ADAM_BETA2
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p.data -= (lr * mhat / (np.sqrt(vhat) + ADAM_EPS)).astype(p.data.dtype)


def mixup(features_a, labels_a, features_b, labels_b, lam):
    """Convex combination of two batches; labels become soft labels.

    ``lam`` is a scalar or per-pair vector in [0, 1], typically drawn from
    Beta(alpha, alpha).
    """
    if features_a.shape != features_b.shape or labels_a.shape != labels_b.shape:
        raise ShapeError("mixup needs equal-shaped batches")
    lam = np.asarray(lam, dtype=features_a.dtype)
    lx = lam.reshape((-1,) + (1,) * (features_a.ndim - 1)) if lam.ndim else lam
    ly = lam.reshape(-1, 1) if lam.ndim else lam
    x = lx * features_a + (1 - lx) * features_b
    y = ly * labels_a + (1 - ly) * labels_b
    return x, y


def spec_augment(feature, rng, time_masks=2, time_mask_width=16, freq_masks=2, freq_mask_width=8):
    """Mask random time and frequency stripes with the feature's mean value.

    Stripe widths are drawn uniformly from [0, max_width]; the input is not
    modified.
    """
    arr = np.array(feature, copy=True)
    grid = arr[:, :, 0] if arr.ndim == 3 else arr
    t, f = grid.shape
    if time_mask_width >= t or freq_mask_width >= f:
        raise ValueError(
            f"mask widths ({time_mask_width}, {freq_mask_width}) must be smaller "
            f"than the feature dims ({t}, {f})"
        )
    fill = grid.mean()
    for _ in range(time_masks):
        width = int(rng.integers(0, time_mask_width + 1))
        if width:
            start = int(rng.integers(0, t - width + 1))
            grid[start : start + width, :] = fill
    for _ in range(freq_masks):
        width = int(rng.integers(0, freq_mask_width + 1))
        if width:
            start = int(rng.integers(0, f - width + 1))
            grid[:, start : start + width] = fill
    return arr


@dataclass
class MetricsRow:
    iteration: int
    lr: float
    loss: float
    train_acc: float | None = None
    eval_acc: float | None = None


def write_metrics(path, rows):
    """Metrics CSV: iter,lr,loss,train_acc,eval_acc (acc cells empty between evals)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "lr", "loss", "train_acc", "eval_acc"])
        for r in rows:
            writer.writerow(
                [
                    r.iteration,
                    f"{r.lr:.10g}",
                    f"{r.loss:.10g}",
                    "" if r.train_acc is None else f"{r.train_acc:.6g}",
                    "" if r.eval_acc is None else f"{r.eval_acc:.6g}",
                ]
            )


@dataclass
class TrainResult:
    model: object
    metrics: list
    final_train_acc: float
    final_eval_acc: float | None


def _accuracy(model, features, labels, batch=64):
    correct = 0
    for i in range(0, len(features), batch):
        logits = model.forward(Tensor(features[i : i + batch]), training=False).data
        correct += int((logits.argmax(axis=1) == labels[i : i + batch]).sum())
    return correct / len(features)


def train(model, entries, store, config, log_progress=None):
    """Optimize ``model`` on the manifest's train fold.

    Features come from ``store`` (cache-backed or computed); the eval fold, if
    present, is scored at every evaluation point. Returns a TrainResult whose
    metrics list mirrors the CSV log.
    """
    train_entries, eval_entries = datamod.split_folds(entries, config.eval_fold)
    if not train_entries:
        raise ValueError(f"no training clips (every fold == eval fold {config.eval_fold})")
    n_classes = model.config.n_classes
    if datamod.n_classes_of(entries) > n_classes:
        raise ValueError(
            f"manifest has labels up to {datamod.n_classes_of(entries) - 1} "
            f"but the model only has {n_classes} classes"
        )

    x_train = store.features(train_entries)
    y_train = np.array([e.label for e in train_entries])
    if x_train.shape[1] < 2 or x_train.shape[2] < 2:
        raise ValueError(f"features of shape {x_train.shape[1:]} are too small for the model")
    x_eval = y_eval = None
    if eval_entries:
        x_eval = store.features(eval_entries)
        y_eval = np.array([e.label for e in eval_entries])

    # probe one forward pass so shape mismatches fail before the first step
    model.forward(Tensor(x_train[:1]), training=False)

    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    state = OptimizerState.for_params(params)
    n = len(x_train)
    labels_1h = one_hot(y_train, n_classes)

    rows = []
    order = []
    final_train_acc = 0.0
    final_eval_acc = None
    iteration = 0
    while iteration < config.max_iters:
        if not order:
            order = list(rng.permutation(n))
        take = min(config.batch_size, len(order))
        idx = np.array([order.pop(0) for _ in range(take)])
        iteration += 1

        xb = x_train[idx]
        yb = labels_1h[idx]
        if config.mixup_alpha > 0:
            perm = rng.permutation(len(idx))
            lam = rng.beta(config.mixup_alpha, config.mixup_alpha, size=len(idx)).astype(np.float32)
            xb, yb = mixup(xb, yb, xb[perm], yb[perm], lam)
        xb = np.stack(
            [
                spec_augment(
                    s,
                    rng,
                    config.time_masks,
                    config.time_mask_width,
                    config.freq_masks,
                    config.freq_mask_width,
                )
                for s in xb
            ]
        )

        lr = lr_schedule(iteration - 1, config.lr0, config.lr_decay, config.lr_decay_every)
        ad.zero_grad(params)
        with ad.Tape() as tape:
            logits = model.forward(Tensor(xb), training=True)
            loss = cross_entropy(logits, yb)
        loss_val = float(loss.data)
        if not math.isfinite(loss_val):
            raise NumericError(f"loss became non-finite at iteration {iteration}")
        grads = tape.backward(loss, params=params)
        adam_step(params, grads, state, lr)

        row = MetricsRow(iteration, lr, loss_val)
        at_eval = iteration % config.eval_every == 0 or iteration == config.max_iters
        if at_eval:
            row.train_acc = _accuracy(model, x_train, y_train)
            final_train_acc = row.train_acc
            if x_eval is not None:
                row.eval_acc = _accuracy(model, x_eval, y_eval)
                final_eval_acc = row.eval_acc
            if log_progress:
                log_progress(row)
        rows.append(row)
        if config.stop_train_acc > 0 and at_eval and row.train_acc >= config.stop_train_acc:
            break
    return TrainResult(model, rows, final_train_acc, final_eval_acc)
