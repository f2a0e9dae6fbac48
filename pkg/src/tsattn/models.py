"""CNN10-style backbone and its attention variants.

The backbone stacks four convolutional blocks (two 3x3 conv + BN + ReLU
layers each, then 2x2 average pooling) with 64/128/256/512 channels, followed
by global mean pooling and two fully-connected layers. Attention, when
configured, sits after a block's last conv stage and before its pooling.
Presets cover the eleven named full-scale variants plus two small desk-scale
models for quick experiments.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
import struct
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import attention as att
from .autodiff import RunningStats, ShapeError, Tensor

CHECKPOINT_MAGIC = b"TSAM"
CHECKPOINT_VERSION = 1

ATTENTION_VARIANTS = (
    "none",
    "temporal",
    "spectral",
    "parallel_learned",
    "parallel_fixed",
    "concat_TS",
    "concat_ST",
)


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int
    block_channels: tuple = (64, 128, 256, 512)
    convs_per_block: int = 2
    kernel_size: int = 3
    fc_hidden: int = 512
    in_channels: int = 1
    attention_variant: str = "none"
    attention_blocks: tuple = ()
    preset: str = ""

    def __post_init__(self):
        if self.n_classes < 2:
            raise ModelError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.attention_variant not in ATTENTION_VARIANTS:
            raise ModelError(
                f"unknown attention variant {self.attention_variant!r}; "
                f"valid: {', '.join(ATTENTION_VARIANTS)}"
            )
        blocks = tuple(sorted(set(self.attention_blocks)))
        object.__setattr__(self, "attention_blocks", blocks)
        object.__setattr__(self, "block_channels", tuple(self.block_channels))
        if (self.attention_variant == "none") != (not blocks):
            raise ModelError("attention_blocks must be empty iff the variant is 'none'")
        valid = set(range(1, len(self.block_channels) + 1))
        if not set(blocks) <= valid:
            raise ModelError(f"attention_blocks {blocks} outside blocks {sorted(valid)}")

    def to_text(self):
        lines = [
            f"n_classes={self.n_classes}",
            f"block_channels={','.join(str(c) for c in self.block_channels)}",
            f"convs_per_block={self.convs_per_block}",
            f"kernel_size={self.kernel_size}",
            f"fc_hidden={self.fc_hidden}",
            f"in_channels={self.in_channels}",
            f"attention_variant={self.attention_variant}",
            f"attention_blocks={','.join(str(b) for b in self.attention_blocks)}",
            f"preset={self.preset}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kwargs = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            if key in ("n_classes", "convs_per_block", "kernel_size", "fc_hidden", "in_channels"):
                kwargs[key] = int(value)
            elif key in ("block_channels", "attention_blocks"):
                kwargs[key] = tuple(int(v) for v in value.split(",") if v)
            elif key in ("attention_variant", "preset"):
                kwargs[key] = value
            else:
                raise ModelError(f"unknown model config key {key!r}")
        return cls(**kwargs)


def _preset_table():
    full = (64, 128, 256, 512)
    small = (8, 16)

    def cfg(**kw):
        return lambda n: ModelConfig(n_classes=n, **kw)

    table = {
        "CNN10": cfg(block_channels=full),
        "T-CNN10": cfg(block_channels=full, attention_variant="temporal", attention_blocks=(1, 2, 3, 4)),
        "S-CNN10": cfg(block_channels=full, attention_variant="spectral", attention_blocks=(1, 2, 3, 4)),
        "TS-CNN10": cfg(block_channels=full, attention_variant="parallel_learned", attention_blocks=(1, 2, 3, 4)),
        "TS-CNN10-fixed": cfg(block_channels=full, attention_variant="parallel_fixed", attention_blocks=(1, 2, 3, 4)),
        "TS-CNN10-concat": cfg(block_channels=full, attention_variant="concat_TS", attention_blocks=(1, 2, 3, 4)),
        "ST-CNN10-concat": cfg(block_channels=full, attention_variant="concat_ST", attention_blocks=(1, 2, 3, 4)),
        "CNN-small": cfg(block_channels=small, fc_hidden=32),
        "TS-small": cfg(block_channels=small, fc_hidden=32, attention_variant="parallel_learned", attention_blocks=(1, 2)),
    }
    for b in (1, 2, 3, 4):
        table[f"TS-CNN10-{b}"] = cfg(
            block_channels=full, attention_variant="parallel_learned", attention_blocks=(b,)
        )
    return table


PRESETS = _preset_table()


def preset_config(name, n_classes):
    if name not in PRESETS:
        raise ModelError(f"unknown preset {name!r}; valid presets: {', '.join(sorted(PRESETS))}")
    cfg = PRESETS[name](n_classes)
    return replace(cfg, preset=name)


@dataclass
class ConvLayer:
    weight: Tensor
    bias: Tensor
    gamma: Tensor
    beta: Tensor
    stats: RunningStats

    def parameters(self):
        return [self.weight, self.bias, self.gamma, self.beta]


@dataclass
class AttentionSite:
    variant: str
    params: att.AttentionParams
    coeffs: att.BranchCoefficients | None = None

    def parameters(self):
        out = self.params.tensors()
        if self.coeffs is not None and self.coeffs.is_learned:
            out.append(self.coeffs.logits)
        return out


@dataclass
class Block:
    convs: list
    site: AttentionSite | None = None

    def parameters(self):
        out = []
        for c in self.convs:
            out.extend(c.parameters())
        if self.site is not None:
            out.extend(self.site.parameters())
        return out


class Model:
    """Built network: conv blocks, optional attention sites, classifier head."""

    def __init__(self, config, blocks, fc1_w, fc1_b, fc2_w, fc2_b, dtype):
        self.config = config
        self.blocks = blocks
        self.fc1_w, self.fc1_b = fc1_w, fc1_b
        self.fc2_w, self.fc2_b = fc2_w, fc2_b
        self.dtype = dtype

    def parameters(self):
        out = []
        for b in self.blocks:
            out.extend(b.parameters())
        out.extend([self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b])
        return out

    def state_arrays(self):
        """Every persistent array (parameters plus BN running stats), in build order."""
        out = []
        for b in self.blocks:
            for c in b.convs:
                out.extend([c.weight.data, c.bias.data, c.gamma.data, c.beta.data])
                out.extend([c.stats.mean, c.stats.var])
            if b.site is not None:
                out.extend(t.data for t in b.site.params.tensors())
                if b.site.coeffs is not None and b.site.coeffs.is_learned:
                    out.append(b.site.coeffs.logits.data)
        out.extend([self.fc1_w.data, self.fc1_b.data, self.fc2_w.data, self.fc2_b.data])
        return out

    def load_state_arrays(self, arrays):
        targets = self.state_arrays()
        if len(targets) != len(arrays):
            raise ModelError(f"checkpoint holds {len(arrays)} arrays, model needs {len(targets)}")
        for dst, src in zip(targets, arrays):
            if dst.shape != src.shape:
                raise ModelError(f"checkpoint array shape {src.shape} != model shape {dst.shape}")
            dst[...] = src

    def fusion_coefficients(self):
        """Normalized (alpha, beta, gamma) triple per parallel-fusion site."""
        out = []
        for b in self.blocks:
            if b.site is not None and b.site.coeffs is not None:
                out.append(b.site.coeffs.normalized_values())
        return out

    def _apply_attention(self, u, site):
        if site.variant == "temporal":
            return att.temporal_attention(u, site.params)
        if site.variant == "spectral":
            return att.spectral_attention(u, site.params)
        if site.variant in ("parallel_learned", "parallel_fixed"):
            u_t = att.temporal_attention(u, site.params)
            u_f = att.spectral_attention(u, site.params)
            return att.parallel_fuse(u_t, u_f, u, site.coeffs)
        if site.variant == "concat_TS":
            return att.serial_concat(u, site.params, "TS")
        return att.serial_concat(u, site.params, "ST")

    def forward(self, x, training=False, capture_blocks=None):
        """Logits for a (B, T, F, C_in) or (T, F, C_in) input.

        ``capture_blocks``, when given, is a dict filled with
        {block index (1-based): block output tensor} for introspection.
        """
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        u = x
        if u.data.ndim == 3:
            u = ad.reshape(u, (1,) + u.data.shape)
        elif u.data.ndim != 4:
            raise ShapeError(f"expected rank 3 or 4 input, got {u.data.shape}")
        if u.data.shape[3] != self.config.in_channels:
            raise ShapeError(
                f"input has {u.data.shape[3]} channels, model expects {self.config.in_channels}"
            )
        for i, block in enumerate(self.blocks, start=1):
            for conv in block.convs:
                u = ad.conv2d(u, conv.weight, conv.bias, padding="same")
                u = ad.batch_norm(u, conv.gamma, conv.beta, conv.stats, training=training)
                u = ad.relu(u)
            if block.site is not None:
                u = self._apply_attention(u, block.site)
            u = ad.avg_pool2d(u)
            if capture_blocks is not None:
                capture_blocks[i] = u
        h = ad.global_mean_pool(u)
        h = ad.relu(ad.dense(h, self.fc1_w, self.fc1_b))
        return ad.dense(h, self.fc2_w, self.fc2_b)


def build_model(config, seed=0, dtype=np.float32):
    """Deterministically initialize a model from its configuration."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype).type

    def conv_layer(cin, cout, k):
        w = ad.he_uniform((k, k, cin, cout), fan_in=k * k * cin, rng=rng, dtype=dtype)
        b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        gamma = Tensor(np.ones(cout, dtype=dtype), requires_grad=True)
        beta = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        return ConvLayer(w, b, gamma, beta, RunningStats(cout, dtype=dtype))

    blocks = []
    cin = config.in_channels
    for bi, cout in enumerate(config.block_channels, start=1):
        convs = []
        for _ in range(config.convs_per_block):
            convs.append(conv_layer(cin, cout, config.kernel_size))
            cin = cout
        site = None
        if bi in config.attention_blocks:
            params = att.AttentionParams.init(cout, rng, dtype=dtype)
            coeffs = None
            if config.attention_variant == "parallel_learned":
                coeffs = att.BranchCoefficients.learned(dtype=dtype)
            elif config.attention_variant == "parallel_fixed":
                coeffs = att.BranchCoefficients.fixed_variant(dtype=dtype)
            site = AttentionSite(config.attention_variant, params, coeffs)
        blocks.append(Block(convs, site))

    fc1_w = ad.he_uniform((config.fc_hidden, cin), fan_in=cin, rng=rng, dtype=dtype)
    fc1_b = Tensor(np.zeros(config.fc_hidden, dtype=dtype), requires_grad=True)
    fc2_w = ad.he_uniform((config.n_classes, config.fc_hidden), fan_in=config.fc_hidden, rng=rng, dtype=dtype)
    fc2_b = Tensor(np.zeros(config.n_classes, dtype=dtype), requires_grad=True)
    return Model(config, blocks, fc1_w, fc1_b, fc2_w, fc2_b, dtype)


def build_preset(name, n_classes, seed=0, dtype=np.float32):
    return build_model(preset_config(name, n_classes), seed=seed, dtype=dtype)


def count_parameters(model):
    return sum(p.data.size for p in model.parameters())


def softmax_probs(logits):
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def predict(model, feature):
    """(class id, probability vector) for one feature; ties go to the lowest id."""
    logits = model.forward(feature, training=False).data
    if logits.ndim == 2:
        logits = logits[0]
    probs = softmax_probs(logits.astype(np.float64))
    return int(np.argmax(probs)), probs


_DTYPE_CODES = {4: np.float32, 8: np.float64}


def save_model(path, model):
    """Serialize config and all state arrays; round-trips bitwise."""
    code = np.dtype(model.dtype).itemsize
    cfg_text = model.config.to_text().encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<III", CHECKPOINT_VERSION, code, len(cfg_text)), cfg_text]
    for arr in model.state_arrays():
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        chunks.append(np.ascontiguousarray(arr, dtype=f"<f{code}").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_model(path):
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise ModelError(f"{path}: not a model checkpoint (bad magic bytes)")
    version, code, cfg_len = struct.unpack_from("<III", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {version}")
    if code not in _DTYPE_CODES:
        raise ModelError(f"{path}: unknown dtype code {code}")
    dtype = _DTYPE_CODES[code]
    pos = 16
    config = ModelConfig.from_text(raw[pos : pos + cfg_len].decode("utf-8"))
    pos += cfg_len
    model = build_model(config, seed=0, dtype=dtype)
    arrays = []
    for _ in range(len(model.state_arrays())):
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", raw, pos) if rank else ()
        pos += 4 * rank
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype=f"<f{code}", count=count, offset=pos).reshape(shape)
        pos += count * code
        arrays.append(arr.astype(dtype))
    if pos != len(raw):
        raise ModelError(f"{path}: {len(raw) - pos} trailing bytes in checkpoint")
    model.load_state_arrays(arrays)
    return model
