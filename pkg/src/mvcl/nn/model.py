"""Encoder / projector configurations and the multi-view model state."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigError, ShapeError
from .layers import (
    AdaptiveAvgPool2d,
    BatchNorm1d,
    Conv2d,
    Flatten,
    L2Normalize,
    Linear,
    MaxPool2d,
    ReLU,
    Sequential,
    conv_out,
)

# default (full-scale) encoder: 5856 + 230592 + 221312 parameters
DEFAULT_ENCODER_PARAMS = 457_760


@dataclass
class EncoderConfig:
    in_channels: int = 1
    conv_channels: tuple = (48, 192, 128)
    kernels: tuple = (11, 5, 3)
    strides: tuple = (4, 1, 1)
    paddings: tuple = (2, 2, 1)
    pool_after: tuple = (True, True, False)
    pool_kernel: int = 3
    pool_stride: int = 2
    adaptive_out: tuple = (4, 4)
    input_size: int = 224

    def __post_init__(self):
        for name in ("conv_channels", "kernels", "strides", "paddings", "pool_after", "adaptive_out"):
            setattr(self, name, tuple(getattr(self, name)))
        if len(self.conv_channels) != 3:
            raise ConfigError(f"conv_channels needs exactly three entries, got {self.conv_channels}")
        for name in ("kernels", "strides", "paddings", "pool_after"):
            if len(getattr(self, name)) != 3:
                raise ConfigError(f"{name} needs three entries")
        self.feature_shape()  # validates the receptive field

    @property
    def output_dim(self):
        return self.conv_channels[-1] * self.adaptive_out[0] * self.adaptive_out[1]

    def feature_shape(self, size=None):
        """Spatial size after the conv stack for a square input; raises if too small."""
        n = self.input_size if size is None else size
        for k, s, p, pool in zip(self.kernels, self.strides, self.paddings, self.pool_after):
            n = conv_out(n, k, s, p)
            if n < 1:
                raise ConfigError(f"input size {size or self.input_size} too small for the conv stack")
            if pool:
                n = conv_out(n, self.pool_kernel, self.pool_stride, 0)
                if n < 1:
                    raise ConfigError(f"input size {size or self.input_size} too small for pooling")
        return n


@dataclass
class ProjectorConfig:
    layer_widths: tuple = (2048, 2048, 128)
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    norm_eps: float = 1e-12

    def __post_init__(self):
        self.layer_widths = tuple(self.layer_widths)
        if len(self.layer_widths) != 3:
            raise ConfigError("projector needs three layer widths")


PRESETS = {
    "full": (EncoderConfig(), ProjectorConfig()),
    "tiny": (
        EncoderConfig(conv_channels=(8, 16, 16), kernels=(5, 3, 3), strides=(1, 1, 1),
                      paddings=(2, 1, 1), adaptive_out=(4, 4), input_size=32),
        ProjectorConfig(layer_widths=(64, 64, 32)),
    ),
    "reduced": (
        EncoderConfig(conv_channels=(2, 3, 2), kernels=(3, 3, 3), strides=(1, 1, 1),
                      paddings=(1, 1, 1), pool_kernel=2, pool_stride=2, adaptive_out=(2, 2),
                      input_size=8),
        ProjectorConfig(layer_widths=(4, 4, 3)),
    ),
}


def preset(name):
    try:
        enc, proj = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
    return EncoderConfig(**asdict(enc)), ProjectorConfig(**asdict(proj))


def build_encoder(cfg: EncoderConfig, rng, dtype=np.float32) -> Sequential:
    layers = []
    c_in = cfg.in_channels
    for i, (c, k, s, p, pool) in enumerate(
        zip(cfg.conv_channels, cfg.kernels, cfg.strides, cfg.paddings, cfg.pool_after), start=1
    ):
        layers.append((f"conv{i}", Conv2d(c_in, c, k, s, p, rng=rng, dtype=dtype)))
        layers.append((f"relu{i}", ReLU()))
        if pool:
            layers.append((f"pool{i}", MaxPool2d(cfg.pool_kernel, cfg.pool_stride)))
        c_in = c
    layers.append(("avgpool", AdaptiveAvgPool2d(cfg.adaptive_out)))
    layers.append(("flatten", Flatten()))
    return Sequential(layers)


def build_projector(cfg: ProjectorConfig, d_in: int, rng, dtype=np.float32) -> Sequential:
    w1, w2, w3 = cfg.layer_widths
    return Sequential([
        ("fc1", Linear(d_in, w1, rng=rng, dtype=dtype)),
        ("bn1", BatchNorm1d(w1, cfg.bn_eps, cfg.bn_momentum, dtype=dtype)),
        ("relu1", ReLU()),
        ("fc2", Linear(w1, w2, rng=rng, dtype=dtype)),
        ("bn2", BatchNorm1d(w2, cfg.bn_eps, cfg.bn_momentum, dtype=dtype)),
        ("relu2", ReLU()),
        ("fc3", Linear(w2, w3, rng=rng, dtype=dtype)),
        ("l2norm", L2Normalize(cfg.norm_eps)),
    ])


@dataclass
class ModelState:
    """One private encoder + projector per plane id, plus optimizer bookkeeping."""

    encoder_config: EncoderConfig
    projector_config: ProjectorConfig
    plane_ids: tuple
    seed: int = 0
    dtype: str = "float32"
    epoch: int = 0
    step: int = 0
    encoders: dict = field(default_factory=dict, repr=False)
    projectors: dict = field(default_factory=dict, repr=False)
    velocity: dict = field(default_factory=dict, repr=False)

    @classmethod
    def init(cls, encoder_config, projector_config, plane_ids, seed=0, dtype="float32"):
        st = cls(encoder_config, projector_config, tuple(sorted(set(int(p) for p in plane_ids))), seed, dtype)
        for p in st.plane_ids:
            # independent stream per view
            rng = np.random.default_rng([seed, p])
            st.encoders[p] = build_encoder(encoder_config, rng, np.dtype(dtype))
            st.projectors[p] = build_projector(projector_config, encoder_config.output_dim, rng, np.dtype(dtype))
        return st

    # -- forward passes -------------------------------------------------
    def encode(self, plane_id, batch, train=False):
        if plane_id not in self.encoders:
            raise ConfigError(f"model has no encoder for plane {plane_id}; planes are {self.plane_ids}")
        ec = self.encoder_config
        if batch.ndim != 4 or batch.shape[1] != ec.in_channels:
            raise ShapeError(f"encoder expects [B, {ec.in_channels}, H, W], got {batch.shape}")
        return self.encoders[plane_id].forward(batch.astype(self.dtype, copy=False), train)

    def project(self, plane_id, y, train=False):
        return self.projectors[plane_id].forward(y, train)

    # -- parameters -----------------------------------------------------
    def modules(self):
        for p in self.plane_ids:
            yield f"view{p}.encoder.", self.encoders[p]
            yield f"view{p}.projector.", self.projectors[p]

    def named_parameters(self):
        for prefix, mod in self.modules():
            yield from mod.named_parameters(prefix)

    def named_buffers(self):
        for prefix, mod in self.modules():
            yield from mod.named_buffers(prefix)

    def named_grads(self):
        for prefix, mod in self.modules():
            yield from mod.named_grads(prefix)

    def parameters(self):
        return dict(self.named_parameters())

    def buffers(self):
        return dict(self.named_buffers())

    def grads(self):
        return {k: g for k, g in self.named_grads() if g is not None}

    def zero_grad(self):
        for _, mod in self.modules():
            mod.zero_grad()

    def encoder_parameters(self):
        return {k: v for k, v in self.named_parameters() if ".encoder." in k}

    def num_parameters(self, encoder_only=False):
        params = self.encoder_parameters() if encoder_only else self.parameters()
        return int(sum(v.size for v in params.values()))

    def astype(self, dtype):
        """Copy of the state with every parameter, buffer and velocity cast to ``dtype``."""
        new = ModelState.init(self.encoder_config, self.projector_config, self.plane_ids, self.seed, dtype)
        new.epoch, new.step = self.epoch, self.step
        src_p, src_b = self.parameters(), self.buffers()
        for k, v in new.named_parameters():
            v[...] = src_p[k]
        for k, v in new.named_buffers():
            v[...] = src_b[k]
        new.velocity = {k: v.astype(dtype) for k, v in self.velocity.items()}
        return new
