"""Noise-robustness protocols: SNR-controlled mixing in the waveform domain,
stripe noise in the feature domain, accuracy evaluation under noise, and
channel-averaged feature-map dumps for inspecting what a block attends to.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import frontend
from .autodiff import Tensor
from .frontend import Waveform

NOISE_KINDS = ("gaussian", "external-clip")


@dataclass(frozen=True)
class NoiseSpec:
    """What to inject at evaluation time: noise type and target SNR in dB.

    ``snr_db=math.inf`` is the no-noise sentinel. External clips need a
    source WAV, which is tiled or randomly cropped to the signal length.
    """

    kind: str
    snr_db: float
    source_path: str | None = None

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"noise kind must be one of {NOISE_KINDS}, got {self.kind!r}")
        if math.isnan(self.snr_db):
            raise ValueError("snr_db must not be NaN")
        if self.kind == "external-clip" and not self.source_path:
            raise ValueError("external-clip noise needs a source_path")


@dataclass(frozen=True)
class RegionMask:
    """Inclusive index range along one feature axis."""

    axis: str
    start: int
    end: int

    def __post_init__(self):
        if self.axis not in ("time", "frequency"):
            raise ValueError(f"axis must be 'time' or 'frequency', got {self.axis!r}")
        if not (0 <= self.start <= self.end):
            raise ValueError(f"need 0 <= start <= end, got [{self.start}, {self.end}]")

    @property
    def width(self):
        return self.end - self.start + 1

    def check_bounds(self, axis_len):
        if self.end >= axis_len:
            raise ValueError(
                f"{self.axis} mask [{self.start}, {self.end}] out of range for length {axis_len}"
            )

    def scaled_to(self, from_len, to_len):
        """Map the range onto a coarser/finer grid (e.g. a pooled block output)."""
        start = self.start * to_len // from_len
        end = min(to_len - 1, self.end * to_len // from_len)
        return RegionMask(self.axis, start, max(start, end))


def add_noise_snr(signal, noise, snr_db):
    """Mix ``noise`` into ``signal`` scaled to a target SNR.

    Power is the mean squared amplitude over the clip; with
    snr_db = 10 log10(P_signal / P_noise_scaled). An infinite SNR returns the
    signal untouched.
    """
    if snr_db == math.inf:
        return signal
    if noise.samples.size < signal.samples.size:
        raise ValueError(
            f"noise of {noise.samples.size} samples shorter than signal "
            f"({signal.samples.size}); tile or crop it first"
        )
    p_signal = float(np.mean(signal.samples**2))
    if p_signal == 0.0:
        raise ValueError("cannot set an SNR against a silent signal")
    n = noise.samples[: signal.samples.size]
    p_noise = float(np.mean(n**2))
    if p_noise == 0.0:
        raise ValueError("noise source is silent")
    target_noise_power = p_signal / (10.0 ** (snr_db / 10.0))
    scale = math.sqrt(target_noise_power / p_noise)
    return Waveform(signal.samples + scale * n, signal.sample_rate)


def realized_snr_db(mixed, clean):
    """Measure the SNR actually present in a mixed waveform."""
    noise = mixed.samples - clean.samples
    return 10.0 * math.log10(float(np.mean(clean.samples**2)) / float(np.mean(noise**2)))


def noise_waveform(spec, signal, rng):
    """Materialize a noise waveform matching the signal's length and rate."""
    n = signal.samples.size
    if spec.kind == "gaussian":
        return Waveform(rng.standard_normal(n), signal.sample_rate)
    clip = frontend.load_wav(spec.source_path)
    clip = frontend.resample_linear(clip, signal.sample_rate)
    samples = clip.samples
    if samples.size < n:
        reps = -(-n // samples.size)
        samples = np.tile(samples, reps)
    if samples.size > n:
        start = int(rng.integers(0, samples.size - n + 1))
        samples = samples[start : start + n]
    return Waveform(samples, signal.sample_rate)


def apply_noise(signal, spec, rng):
    if spec is None or spec.snr_db == math.inf:
        return signal
    return add_noise_snr(signal, noise_waveform(spec, signal, rng), spec.snr_db)


def mask_region_noise(feature, mask, rng):
    """Add Gaussian noise inside one stripe of a log-mel feature.

    The noise std equals the clean feature's own standard deviation; cells
    outside the stripe are copied bit-identically.
    """
    values = feature.values if isinstance(feature, frontend.LogMelFeature) else feature
    out = np.array(values, copy=True)
    grid = out[:, :, 0] if out.ndim == 3 else out
    t, f = grid.shape
    mask.check_bounds(t if mask.axis == "time" else f)
    std = float(grid.std())
    if mask.axis == "time":
        region = grid[mask.start : mask.end + 1, :]
    else:
        region = grid[:, mask.start : mask.end + 1]
    region += rng.normal(0.0, std, size=region.shape).astype(grid.dtype)
    if isinstance(feature, frontend.LogMelFeature):
        return frontend.LogMelFeature(out, feature.hop_seconds, feature.window_seconds)
    return out


@dataclass
class EvalReport:
    accuracy: float
    n_clips: int
    per_class: dict  # label -> (correct, total)

    def rows(self):
        return [(label, c, t, c / t) for label, (c, t) in sorted(self.per_class.items())]


def evaluate(model, entries, store, noise=None, seed=0, eval_fold=2):
    """Accuracy over the manifest's eval fold, optionally under injected noise.

    Noise goes into the waveform domain before featurization, one seeded draw
    per clip in manifest order, so reports are reproducible.
    """
    from . import data as datamod
    from . import models as modelsmod

    _, eval_entries = datamod.split_folds(entries, eval_fold)
    if not eval_entries:
        raise ValueError(f"no clips in eval fold {eval_fold}")
    rng = np.random.default_rng(seed)
    correct = 0
    per_class = {}
    for entry in eval_entries:
        if noise is None or noise.snr_db == math.inf:
            feat = store.feature(entry)
        else:
            w = store.waveform(entry)
            noisy = apply_noise(w, noise, rng)
            feat = frontend.featurize_waveform(noisy, store.cfg).values
        pred, _ = modelsmod.predict(model, feat)
        c, t = per_class.get(entry.label, (0, 0))
        hit = int(pred == entry.label)
        per_class[entry.label] = (c + hit, t + 1)
        correct += hit
    return EvalReport(correct / len(eval_entries), len(eval_entries), per_class)


def write_noise_report(path, rows, append=False):
    """Report CSV with rows (noise_kind, snr_db, model, accuracy)."""
    path = Path(path)
    exists = path.exists()
    mode = "a" if append and exists else "w"
    with open(path, mode, newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["noise_kind", "snr_db", "model", "accuracy"])
        for kind, snr, name, acc in rows:
            snr_text = "inf" if snr == math.inf else f"{snr:g}"
            writer.writerow([kind, snr_text, name, f"{acc:.6g}"])


def block_feature_map(model, feature, block):
    """Channel-averaged output of one block (1-based index) as a T' x F' grid."""
    n_blocks = len(model.blocks)
    if not 1 <= block <= n_blocks:
        raise ValueError(f"block must be in 1..{n_blocks}, got {block}")
    captured = {}
    model.forward(Tensor(np.asarray(feature, dtype=model.dtype)), training=False, capture_blocks=captured)
    out = captured[block].data
    if out.ndim == 4:
        out = out[0]
    return out.mean(axis=2)


def dump_feature_maps(model, feature, block, out_path):
    """Write a block's channel-averaged map as TSFA plus a CSV twin.

    Returns the grid. The CSV twin lives next to ``out_path`` with a .csv
    suffix, one row per time step.
    """
    grid = block_feature_map(model, feature, block)
    out_path = Path(out_path)
    frontend.write_feature(out_path, grid.astype(np.float32))
    csv_path = out_path.with_suffix(".csv")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for row in grid:
            writer.writerow([f"{v:.8g}" for v in row])
    return grid


def suppression_ratio(clean_map, noisy_map, mask):
    """Mean |activation| in the masked region, noisy over clean.

    Values below 1 mean the model suppresses the noisy region relative to how
    it responds on clean input.
    """
    clean = np.asarray(clean_map, dtype=np.float64)
    noisy = np.asarray(noisy_map, dtype=np.float64)
    if clean.shape != noisy.shape:
        raise ValueError(f"map shapes differ: {clean.shape} vs {noisy.shape}")
    t, f = clean.shape
    mask.check_bounds(t if mask.axis == "time" else f)
    if mask.axis == "time":
        c = clean[mask.start : mask.end + 1, :]
        n = noisy[mask.start : mask.end + 1, :]
    else:
        c = clean[:, mask.start : mask.end + 1]
        n = noisy[:, mask.start : mask.end + 1]
    denom = float(np.abs(c).mean())
    if denom == 0.0:
        raise ValueError("clean map is zero inside the masked region")
    return float(np.abs(n).mean()) / denom
