"""Raw audio to fixed-size log-mel spectrogram inputs.

Pipeline: decode WAV -> resample (linear) -> pad/truncate to a fixed length
-> Hann-windowed power STFT (40 ms window, 20 ms hop) -> 40-band mel
filterbank -> log10 with a floor. Features are cached one binary file per
clip in the little-endian "TSFA" format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

__all__ = [
    "AudioError",
    "Waveform",
    "LogMelFeature",
    "MelFilterbank",
    "FrontendConfig",
    "load_wav",
    "write_wav",
    "resample_linear",
    "fix_length",
    "stft",
    "hz_to_mel",
    "mel_to_hz",
    "build_mel_filterbank",
    "log_mel",
    "featurize_waveform",
    "write_feature",
    "read_feature",
    "TSFA_MAGIC",
    "TSFA_VERSION",
]

TSFA_MAGIC = b"TSFA"
TSFA_VERSION = 1

LOG_FLOOR = 1e-10


class AudioError(ValueError):
    """Unreadable or malformed audio input."""


@dataclass(frozen=True)
class Waveform:
    """Mono audio samples in [-1, 1] at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise AudioError(f"sample rate must be positive, got {self.sample_rate}")
        if self.samples.size == 0:
            raise AudioError("empty waveform")
        if not np.isfinite(self.samples).all():
            raise AudioError("waveform contains non-finite samples")

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class LogMelFeature:
    """T x F x 1 log-mel energies plus the framing that produced them."""

    values: np.ndarray
    hop_seconds: float
    window_seconds: float

    @property
    def frame_count(self):
        return self.values.shape[0]

    @property
    def mel_bands(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class MelFilterbank:
    """Triangular mel filters sampled at FFT bin centers, peak-normalized."""

    weights: np.ndarray  # (n_fft // 2 + 1, n_mels)
    fmin: float
    fmax: float
    breakpoints_hz: np.ndarray  # (n_mels + 2,)


@dataclass(frozen=True)
class FrontendConfig:
    """Featurization settings; the defaults match the evaluation protocol."""

    sample_rate: int = 44100
    clip_seconds: float = 5.0
    window_seconds: float = 0.040
    hop_seconds: float = 0.020
    n_mels: int = 40
    fmin: float = 0.0
    fmax: float | None = None  # None -> sample_rate / 2
    log_floor: float = LOG_FLOOR

    def with_overrides(self, **kwargs):
        return replace(self, **kwargs)


# ---------------------------------------------------------------------------
# WAV I/O (RIFF/WAVE, PCM 16-bit or IEEE float 32-bit)


def load_wav(path):
    """Decode a WAV file to a mono waveform.

    16-bit PCM samples are scaled by 1/32768; multichannel audio is averaged
    down to mono.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise AudioError(f"cannot read {path}: {e}") from e
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise AudioError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos : pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise AudioError(f"{path}: truncated {chunk_id.decode(errors='replace')} chunk")
        if chunk_id == b"fmt ":
            fmt = body
        elif chunk_id == b"data":
            data = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned

    if fmt is None or len(fmt) < 16:
        raise AudioError(f"{path}: missing fmt chunk")
    if data is None:
        raise AudioError(f"{path}: missing data chunk")
    audio_format, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if channels < 1:
        raise AudioError(f"{path}: invalid channel count {channels}")

    if audio_format == 1 and bits == 16:
        samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif audio_format == 3 and bits == 32:
        samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise AudioError(
            f"{path}: unsupported codec (format tag {audio_format}, {bits}-bit); "
            "only 16-bit PCM and 32-bit IEEE float are handled"
        )
    if samples.size == 0:
        raise AudioError(f"{path}: zero audio frames")
    if samples.size % channels:
        raise AudioError(f"{path}: data size not a whole number of frames")
    if channels > 1:
        samples = samples.reshape(-1, channels).mean(axis=1)
    return Waveform(samples, rate)


def write_wav(path, waveform, fmt="pcm16"):
    """Write a mono waveform as 16-bit PCM or 32-bit float WAV."""
    samples = np.asarray(waveform.samples, dtype=np.float64)
    if fmt == "pcm16":
        scaled = np.clip(np.rint(samples * 32768.0), -32768, 32767).astype("<i2")
        payload = scaled.tobytes()
        audio_format, bits = 1, 16
    elif fmt == "float32":
        payload = samples.astype("<f4").tobytes()
        audio_format, bits = 3, 32
    else:
        raise ValueError(f"unknown wav format {fmt!r}")
    rate = waveform.sample_rate
    block = bits // 8
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(payload),
        b"WAVE",
        b"fmt ",
        16,
        audio_format,
        1,
        rate,
        rate * block,
        block,
        bits,
        b"data",
        len(payload),
    )
    Path(path).write_bytes(header + payload)


# ---------------------------------------------------------------------------
# resampling and length fixing


def resample_linear(w, target_rate):
    """Linear-interpolation resampling; identity when rates already match."""
    if target_rate <= 0:
        raise AudioError(f"target rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return w
    n = w.samples.size
    n_out = int(round(n * target_rate / w.sample_rate))
    positions = np.arange(n_out) * (w.sample_rate / target_rate)
    out = np.interp(positions, np.arange(n), w.samples)
    return Waveform(out, target_rate)


def fix_length(w, seconds):
    """Zero-pad or truncate at the tail to exactly round(seconds * rate) samples."""
    if seconds <= 0:
        raise ValueError(f"target length must be positive, got {seconds}")
    n = int(round(seconds * w.sample_rate))
    cur = w.samples.size
    if cur == n:
        return w
    if cur > n:
        return Waveform(w.samples[:n].copy(), w.sample_rate)
    out = np.zeros(n, dtype=w.samples.dtype)
    out[:cur] = w.samples
    return Waveform(out, w.sample_rate)


# ---------------------------------------------------------------------------
# STFT and mel


def frame_count(n_samples, window, hop):
    return (n_samples - window) // hop + 1


def next_pow2(n):
    return 1 << (int(n) - 1).bit_length()


def _hann(length, dtype=np.float64):
    # periodic Hann, the usual analysis window for overlapping frames
    n = np.arange(length, dtype=dtype)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)


def stft(w, window_seconds=0.040, hop_seconds=0.020):
    """Power spectrogram of shape (frames, n_fft // 2 + 1).

    Frames start at sample 0 with no center padding; each Hann-windowed frame
    is zero-padded to the next power of two before the one-sided DFT, and the
    output holds magnitude-squared values.
    """
    win = int(round(window_seconds * w.sample_rate))
    hop = int(round(hop_seconds * w.sample_rate))
    if win <= 0 or hop <= 0:
        raise ValueError("window and hop must span at least one sample")
    n = w.samples.size
    if n < win:
        raise AudioError(
            f"clip of {n} samples is shorter than one {win}-sample analysis window"
        )
    n_fft = next_pow2(win)
    frames = np.lib.stride_tricks.sliding_window_view(w.samples, win)[::hop]
    windowed = frames * _hann(win)
    spec = np.fft.rfft(windowed, n=n_fft, axis=1)
    return (spec.real**2 + spec.imag**2).astype(np.float64)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def build_mel_filterbank(n_fft, rate, n_mels=40, fmin=0.0, fmax=None):
    """Triangular filters with breakpoints equally spaced on the mel scale.

    Filter k rises from breakpoint k-1 to k and falls to k+1; after sampling
    at the FFT bin centers each filter is scaled so its peak weight is 1.
    """
    if fmax is None:
        fmax = rate / 2.0
    if n_mels < 1:
        raise ValueError(f"n_mels must be >= 1, got {n_mels}")
    if not (0 <= fmin < fmax <= rate / 2.0):
        raise ValueError(f"need 0 <= fmin < fmax <= rate/2, got fmin={fmin}, fmax={fmax}")
    mels = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    breakpoints = mel_to_hz(mels)
    n_bins = n_fft // 2 + 1
    bin_hz = np.arange(n_bins) * (rate / n_fft)

    weights = np.zeros((n_bins, n_mels), dtype=np.float64)
    for m in range(n_mels):
        left, center, right = breakpoints[m], breakpoints[m + 1], breakpoints[m + 2]
        rising = (bin_hz - left) / (center - left)
        falling = (right - bin_hz) / (right - center)
        tri = np.maximum(0.0, np.minimum(rising, falling))
        peak = tri.max()
        if peak <= 0.0:
            raise ValueError(
                f"mel band {m} ({left:.1f}-{right:.1f} Hz) covers no FFT bins; "
                "use a larger n_fft or fewer bands"
            )
        weights[:, m] = tri / peak
    return MelFilterbank(weights, float(fmin), float(fmax), breakpoints)


def log_mel(spec, fb, window_seconds=0.040, hop_seconds=0.020, floor=LOG_FLOOR):
    """Apply the filterbank and a floored log10; output is T x n_mels x 1."""
    if spec.shape[1] != fb.weights.shape[0]:
        raise ValueError(
            f"spectrogram has {spec.shape[1]} bins but filterbank expects {fb.weights.shape[0]}"
        )
    mel = spec @ fb.weights
    values = np.log10(np.maximum(mel, floor)).astype(np.float32)[:, :, None]
    return LogMelFeature(values, hop_seconds=hop_seconds, window_seconds=window_seconds)


def featurize_waveform(w, cfg):
    """Full clip pipeline: resample, fix length, STFT, mel, log."""
    w = resample_linear(w, cfg.sample_rate)
    w = fix_length(w, cfg.clip_seconds)
    spec = stft(w, cfg.window_seconds, cfg.hop_seconds)
    n_fft = next_pow2(int(round(cfg.window_seconds * cfg.sample_rate)))
    fb = build_mel_filterbank(n_fft, cfg.sample_rate, cfg.n_mels, cfg.fmin, cfg.fmax)
    return log_mel(spec, fb, cfg.window_seconds, cfg.hop_seconds, cfg.log_floor)


# ---------------------------------------------------------------------------
# TSFA feature cache


def write_feature(path, values):
    """Write a T x F (or T x F x 1) grid as a TSFA cache file."""
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise ValueError(f"expected a T x F grid, got shape {arr.shape}")
    t, f = arr.shape
    header = TSFA_MAGIC + struct.pack("<III", TSFA_VERSION, t, f)
    Path(path).write_bytes(header + arr.astype("<f4").tobytes())


def read_feature(path):
    """Read a TSFA cache file back as a T x F x 1 float32 array."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != TSFA_MAGIC:
        raise AudioError(f"{path}: not a TSFA feature file")
    version, t, f = struct.unpack_from("<III", raw, 4)
    if version != TSFA_VERSION:
        raise AudioError(f"{path}: unsupported TSFA version {version}")
    expected = 16 + 4 * t * f
    if len(raw) < expected:
        raise AudioError(f"{path}: truncated TSFA file")
    values = np.frombuffer(raw, dtype="<f4", count=t * f, offset=16).reshape(t, f)
    return np.ascontiguousarray(values)[:, :, None]
