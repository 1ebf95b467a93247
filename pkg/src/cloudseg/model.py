"""Full segmentation network: encoder -> context neck -> gated-skip decoder.

The decoder doubles resolution level by level with bilinear upsampling,
concatenating an attention-gated encoder tap at the deepest levels, and runs
two depthwise-separable units per level. A pointwise head and sigmoid yield
the per-pixel cloud probability. Ablation switches replace the pyramid neck
with a single pointwise unit and the skip gates with identity.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from .attention_gate import SkipAttention
from .backbone import Encoder
from .layers import Conv2d, DepthwiseSeparable, Identity, Module
from .pyramid import FeaturePyramid, PointwiseNeck
from .tensor import ShapeError, Tensor, bilinear_upsample2x, concat, no_grad, sigmoid

CHECKPOINT_MAGIC = b"CTFM"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Raised when a checkpoint file or its config does not match the model."""


@dataclass
class ModelConfig:
    """Every free hyperparameter of the architecture, JSON round-trippable."""

    bands: int = 4
    stem_channels: int = 8
    stage_channels: tuple[int, ...] = (16, 32, 64, 112)
    stage_blocks: tuple[int, ...] = (1, 2, 3, 3)
    token_count: int = 6
    token_dim: int = 160
    heads: int = 4
    ffn_expansion: int = 2
    mobile_expansion: int = 3
    fpm_inner: int = 72
    fpm_out: int = 128
    fpm_rates: tuple[int, ...] = (6, 12, 18)
    gate_reduction: int = 8
    gate_pool_ps: tuple[float, ...] = (1.0, 2.0)
    decoder_channels: tuple[int, ...] = (96, 48, 24, 12, 8)
    skip_levels: int = 3
    use_pyramid: bool = True
    use_skip_attention: bool = True
    threshold: float = 0.5
    bn_momentum: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.stage_blocks = tuple(int(b) for b in self.stage_blocks)
        self.fpm_rates = tuple(int(r) for r in self.fpm_rates)
        self.gate_pool_ps = tuple(float(p) for p in self.gate_pool_ps)
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        widths = (self.bands, self.stem_channels, self.token_count, self.token_dim,
                  self.fpm_inner, self.fpm_out, *self.stage_channels, *self.decoder_channels)
        if min(widths) < 1:
            raise ValueError(f"all widths must be >= 1, got {widths}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if len(self.decoder_channels) != len(self.stage_channels) + 1:
            raise ValueError("need one decoder level per stage plus the final full-resolution level")
        if self.skip_levels > len(self.stage_channels):
            raise ValueError(f"at most {len(self.stage_channels)} gated skips are available")

    @property
    def deep_stride(self) -> int:
        return 2 ** (1 + len(self.stage_channels))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))

    # -- presets ----------------------------------------------------------

    @classmethod
    def reference(cls, **overrides) -> "ModelConfig":
        """The full-size network the profiler targets at 384x384 inputs."""
        return cls(**overrides)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Desk-scale network for CPU training on small synthetic scenes."""
        base = dict(stem_channels=6, stage_channels=(10, 14, 20, 28), stage_blocks=(1, 1, 1, 1),
                    token_count=2, token_dim=32, heads=2, fpm_inner=12, fpm_out=24,
                    decoder_channels=(20, 16, 12, 8, 6))
        base.update(overrides)
        return cls(**base)

    @classmethod
    def gradcheck_scale(cls, **overrides) -> "ModelConfig":
        """Minimal widths for exhaustive float64 finite-difference checks."""
        base = dict(bands=2, stem_channels=4, stage_channels=(6, 8, 10, 12),
                    stage_blocks=(1, 1, 1, 1), token_count=2, token_dim=8, heads=2,
                    fpm_inner=6, fpm_out=8, decoder_channels=(8, 8, 6, 6, 4))
        base.update(overrides)
        return cls(**base)


def ablation_variants(config: ModelConfig) -> list[tuple[str, ModelConfig]]:
    """The four neck/gate combinations, weakest first."""
    rows = []
    for name, pyramid, gates in [
        ("backbone", False, False),
        ("backbone+pyramid", True, False),
        ("backbone+skip_gates", False, True),
        ("backbone+pyramid+skip_gates", True, True),
    ]:
        rows.append((name, dataclasses.replace(config, use_pyramid=pyramid,
                                               use_skip_attention=gates)))
    return rows


class CloudSegModel(Module):
    """Per-pixel cloud probability network defined by a :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        super().__init__()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(config.seed)
        self.encoder = Encoder(
            config.bands, config.stem_channels, config.stage_channels, config.stage_blocks,
            config.token_count, config.token_dim, config.heads,
            config.ffn_expansion, config.mobile_expansion, dtype=dtype, rng=rng)
        deep_ch = config.stage_channels[-1]
        if config.use_pyramid:
            self.neck = FeaturePyramid(deep_ch, config.fpm_inner, config.fpm_out,
                                       config.fpm_rates, dtype=dtype, rng=rng)
        else:
            self.neck = PointwiseNeck(deep_ch, config.fpm_out, dtype=dtype, rng=rng)

        # taps by output stride: stem at 2, stage outputs at 4, 8, ...
        tap_channels = {2: config.stem_channels}
        for i, ch in enumerate(config.stage_channels[:-1]):
            tap_channels[2 ** (i + 2)] = ch
        self.skip_strides: list[int | None] = []
        self.skip_gates: list[Module] = []
        self.decoder: list[DepthwiseSeparable] = []
        in_ch = config.fpm_out
        stride = config.deep_stride
        for level, width in enumerate(config.decoder_channels):
            stride //= 2
            if level < config.skip_levels and stride in tap_channels:
                skip_ch = tap_channels[stride]
                self.skip_strides.append(stride)
                if config.use_skip_attention:
                    self.skip_gates.append(SkipAttention(skip_ch, config.gate_reduction,
                                                         config.gate_pool_ps, dtype=dtype, rng=rng))
                else:
                    self.skip_gates.append(Identity())
            else:
                skip_ch = 0
                self.skip_strides.append(None)
                self.skip_gates.append(Identity())
            self.decoder.append(DepthwiseSeparable(in_ch + skip_ch, width, dtype=dtype, rng=rng))
            self.decoder.append(DepthwiseSeparable(width, width, dtype=dtype, rng=rng))
            in_ch = width
        self.head = Conv2d(in_ch, 1, 1, bias=True, dtype=dtype, rng=rng)
        for _, m in self.named_modules():
            if hasattr(m, "momentum"):
                m.momentum = config.bn_momentum

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.bands:
            raise ShapeError(f"expected N,{self.config.bands},H,W input, got {x.shape}")
        encoded = self.encoder(x)
        y = self.neck(encoded.features[self.config.deep_stride])
        for level, stride in enumerate(self.skip_strides):
            y = bilinear_upsample2x(y)
            if stride is not None:
                skip = self.skip_gates[level](encoded.features[stride])
                y = concat([y, skip], axis=1)
            y = self.decoder[2 * level](y)
            y = self.decoder[2 * level + 1](y)
        return sigmoid(self.head(y))

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        """Inference-mode probabilities for an N,bands,H,W array."""
        was_training = self.training
        self.train(False)
        try:
            with no_grad():
                out = self.forward(Tensor(np.asarray(x), dtype=self.dtype))
        finally:
            self.train(was_training)
        return out.data[:, 0]

    def predict_mask(self, x: np.ndarray, threshold: float | None = None) -> np.ndarray:
        """Binary cloud mask; pixels at exactly the threshold count as cloud."""
        thr = self.config.threshold if threshold is None else threshold
        if not 0.0 < thr < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {thr}")
        return (self.predict_proba(x) >= thr).astype(np.uint8)

    def named_state(self):
        """Parameters plus batchnorm running statistics, by dotted path."""
        for name, p in self.named_parameters():
            yield name, p.data
        for name, b in self.named_buffers():
            yield name, b


_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_checkpoint(model: CloudSegModel, path) -> None:
    entries = list(model.named_state())
    cfg_blob = model.config.to_json().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(cfg_blob)))
        fh.write(cfg_blob)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            blob = name.encode("utf-8")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<B", _DTYPE_TAGS[np.dtype(arr.dtype)]))
            fh.write(struct.pack("<B", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<I", extent))
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            fh.write(le.tobytes())


def load_checkpoint(path) -> CloudSegModel:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", fh.read(4))
        config = ModelConfig.from_json(fh.read(cfg_len).decode("utf-8"))
        (n_entries,) = struct.unpack("<I", fh.read(4))
        stored: dict[str, np.ndarray] = {}
        for _ in range(n_entries):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (tag,) = struct.unpack("<B", fh.read(1))
            (rank,) = struct.unpack("<B", fh.read(1))
            shape = tuple(struct.unpack("<I", fh.read(4))[0] for _ in range(rank))
            if tag not in _TAG_DTYPES:
                raise CheckpointError(f"{path}: unknown dtype tag {tag} for '{name}'")
            dt = _TAG_DTYPES[tag]
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(count * dt.itemsize), dtype=dt).reshape(shape)
            stored[name] = arr

    model = CloudSegModel(config, dtype=_TAG_DTYPES[0] if not stored else
                          list(stored.values())[0].dtype.newbyteorder("="))
    expected = dict(model.named_state())
    if set(expected) != set(stored):
        missing = sorted(set(expected) - set(stored))
        extra = sorted(set(stored) - set(expected))
        raise CheckpointError(f"{path}: state mismatch (missing={missing[:3]}, extra={extra[:3]})")
    params = dict(model.named_parameters())
    buffers = {name: (mod, attr) for name, mod, attr in _buffer_slots(model)}
    for name, arr in stored.items():
        if expected[name].shape != arr.shape:
            raise CheckpointError(f"{path}: shape mismatch for '{name}': "
                                  f"{arr.shape} vs {expected[name].shape}")
        native = arr.astype(arr.dtype.newbyteorder("="), copy=True)
        if name in params:
            params[name].data = native
        else:
            mod, attr = buffers[name]
            setattr(mod, attr, native)
    return model


def _buffer_slots(model: Module):
    for path, module in model.named_modules():
        for attr in module._buffer_names:
            yield (f"{path}.{attr}" if path else attr), module, attr
