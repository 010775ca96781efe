"""YOLOv5-style detector: focus stem, CSP backbone, FPN+PAN neck, anchor head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .tensor import (
    DEFAULT_DTYPE,
    RunningStats,
    Tape,
    Tensor,
    add,
    batch_norm2d,
    concat_channels,
    conv2d,
    leaky_relu,
    subsample2,
    upsample_nearest2x,
)

# (depth_multiple, width_multiple)
PRESETS = {
    "n": (0.33, 0.25),
    "s": (0.33, 0.50),
    "m": (0.67, 0.75),
    "l": (1.00, 1.00),
    "x": (1.33, 1.25),
}

# anchor (w, h) pairs in pixels for a 640 input, one row per stride 8/16/32
BASE_ANCHORS = (
    ((10, 13), (16, 30), (33, 23)),
    ((30, 61), (62, 45), (59, 119)),
    ((116, 90), (156, 198), (373, 326)),
)
STRIDES = (8, 16, 32)

# slice order of the focus stem: (row offset, col offset)
FOCUS_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


def default_anchors(input_size: int) -> list:
    scale = input_size / 640.0
    return [[[w * scale, h * scale] for w, h in level] for level in BASE_ANCHORS]


@dataclass
class ModelConfig:
    depth_multiple: float = PRESETS["n"][0]
    width_multiple: float = PRESETS["n"][1]
    num_classes: int = 1
    input_size: int = 416
    anchors: Optional[list] = None
    strides: tuple = STRIDES
    leaky_slope: float = 0.1
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    head_init: str = "prior"  # or "kaiming": Kaiming weights and zero biases like every other conv

    def __post_init__(self):
        if self.head_init not in ("prior", "kaiming"):
            raise ValueError(f"head_init must be 'prior' or 'kaiming', got {self.head_init!r}")
        if not self.depth_multiple > 0 or not self.width_multiple > 0:
            raise ValueError("depth_multiple and width_multiple must be positive")
        if int(self.num_classes) != self.num_classes or self.num_classes < 1:
            raise ValueError(f"num_classes must be a positive integer, got {self.num_classes}")
        if self.input_size <= 0 or self.input_size % 32:
            raise ValueError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        self.strides = tuple(int(s) for s in self.strides)
        if self.strides != STRIDES:
            raise ValueError(f"strides must be {STRIDES}, got {self.strides}")
        if self.anchors is None:
            self.anchors = default_anchors(self.input_size)
        anchors = np.asarray(self.anchors, dtype=float)
        if anchors.shape != (3, 3, 2):
            raise ValueError(f"anchors must be 3 scales x 3 (w, h) pairs, got shape {anchors.shape}")
        if not np.all(anchors > 0):
            raise ValueError("anchor dimensions must be positive")
        self.anchors = anchors.tolist()

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        depth, width = PRESETS[name]
        kwargs = {"depth_multiple": depth, "width_multiple": width}
        kwargs.update(overrides)
        return cls(**kwargs)

    @property
    def outputs_per_anchor(self) -> int:
        return 5 + self.num_classes

    def channels(self, base: int) -> int:
        return max(8, int(round(base * self.width_multiple / 8)) * 8)

    def repeats(self, base: int) -> int:
        return max(1, round(base * self.depth_multiple))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strides"] = list(self.strides)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def kaiming_uniform(rng: np.random.Generator, shape: tuple, slope: float) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    gain = math.sqrt(2.0 / (1.0 + slope ** 2))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def head_bias_prior(cfg: "ModelConfig", stride: int) -> np.ndarray:
    """Start near the expected rates: ~8 objects per 640px image, class prob ~0.6."""
    bias = np.zeros((3, cfg.outputs_per_anchor))
    bias[:, 4] = np.log(8.0 / (cfg.input_size / stride) ** 2)
    bias[:, 5:] = np.log(0.6 / (cfg.num_classes - 0.99))
    return bias.reshape(-1)


class ConvBlock:
    """conv (no bias) -> batch norm -> leaky relu."""

    def __init__(self, model: "DetectorModel", name: str, c_in: int, c_out: int, k: int = 1, stride: int = 1):
        self.name = name
        self.c_in, self.c_out = c_in, c_out
        self.k, self.stride = k, stride
        cfg = model.config
        self.weight = model.add_param(f"{name}.conv.weight", kaiming_uniform(model.rng, (c_out, c_in, k, k), cfg.leaky_slope))
        self.gamma = model.add_param(f"{name}.bn.gamma", np.ones(c_out))
        self.beta = model.add_param(f"{name}.bn.beta", np.zeros(c_out))
        self.stats = model.add_stats(f"{name}.bn", c_out)
        self.model = model

    def __call__(self, x: Tensor, tape: Optional[Tape], training: bool) -> Tensor:
        cfg = self.model.config
        y = conv2d(x, self.weight, None, self.stride, self.k // 2, tape=tape)
        y = batch_norm2d(y, self.gamma, self.beta, cfg.bn_eps, self.stats, training, tape=tape)
        return leaky_relu(y, cfg.leaky_slope, tape=tape)


class Bottleneck:
    def __init__(self, model, name, channels, shortcut=True):
        self.cv1 = ConvBlock(model, f"{name}.cv1", channels, channels, 1)
        self.cv2 = ConvBlock(model, f"{name}.cv2", channels, channels, 3)
        self.shortcut = shortcut

    def __call__(self, x, tape, training):
        y = self.cv2(self.cv1(x, tape, training), tape, training)
        return add(x, y, tape=tape) if self.shortcut else y


class CSPBlock:
    """Two half-width 1x1 paths, one through residual bottlenecks, fused by a 1x1 conv."""

    def __init__(self, model, name, c_in, c_out, repeats, shortcut=True):
        if repeats < 1:
            raise ValueError(f"CSP block needs at least one bottleneck, got {repeats}")
        hidden = c_out // 2
        self.cv1 = ConvBlock(model, f"{name}.cv1", c_in, hidden, 1)
        self.cv2 = ConvBlock(model, f"{name}.cv2", c_in, hidden, 1)
        self.blocks = [Bottleneck(model, f"{name}.m.{i}", hidden, shortcut) for i in range(repeats)]
        self.cv3 = ConvBlock(model, f"{name}.cv3", 2 * hidden, c_out, 1)

    def __call__(self, x, tape, training):
        a = self.cv1(x, tape, training)
        for block in self.blocks:
            a = block(a, tape, training)
        b = self.cv2(x, tape, training)
        return self.cv3(concat_channels([a, b], tape=tape), tape, training)


def focus_slices(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Stack the four stride-2 pixel grids along channels: N x 4C x H/2 x W/2."""
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise ValueError(f"focus needs even height and width, got {h}x{w}")
    return concat_channels([subsample2(x, r, c, tape=tape) for r, c in FOCUS_OFFSETS], tape=tape)


def reassemble_slices(sliced: np.ndarray) -> np.ndarray:
    """Inverse of focus_slices on raw arrays."""
    n, c4, h2, w2 = sliced.shape
    c = c4 // 4
    out = np.empty((n, c, 2 * h2, 2 * w2), dtype=sliced.dtype)
    for idx, (r, col) in enumerate(FOCUS_OFFSETS):
        out[:, :, r::2, col::2] = sliced[:, idx * c:(idx + 1) * c]
    return out


class Focus:
    def __init__(self, model, name, c_in, c_out, k=3):
        self.conv = ConvBlock(model, f"{name}.conv", 4 * c_in, c_out, k)

    def __call__(self, x, tape, training):
        return self.conv(focus_slices(x, tape), tape, training)


class DetectorModel:
    """Layer graph plus a registry of named parameters and batch-norm statistics."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=DEFAULT_DTYPE):
        self.config = config
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.params: dict = {}
        self.stats: dict = {}
        self.rng = np.random.default_rng(seed)
        self._build()
        del self.rng

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def add_stats(self, name: str, channels: int) -> RunningStats:
        stats = RunningStats.init(channels, self.dtype, self.config.bn_momentum)
        self.stats[name] = stats
        return stats

    def _build(self):
        cfg = self.config
        ch, rep = cfg.channels, cfg.repeats
        c1, c2, c3, c4, c5 = ch(64), ch(128), ch(256), ch(512), ch(1024)
        self.focus = Focus(self, "backbone.0", 3, c1)
        self.down1 = ConvBlock(self, "backbone.1", c1, c2, 3, 2)
        self.csp1 = CSPBlock(self, "backbone.2", c2, c2, rep(3))
        self.down2 = ConvBlock(self, "backbone.3", c2, c3, 3, 2)
        self.csp2 = CSPBlock(self, "backbone.4", c3, c3, rep(9))
        self.down3 = ConvBlock(self, "backbone.5", c3, c4, 3, 2)
        self.csp3 = CSPBlock(self, "backbone.6", c4, c4, rep(9))
        self.down4 = ConvBlock(self, "backbone.7", c4, c5, 3, 2)
        self.csp4 = CSPBlock(self, "backbone.8", c5, c5, rep(3))
        # top-down
        self.lat5 = ConvBlock(self, "neck.0", c5, c4, 1)
        self.td4 = CSPBlock(self, "neck.1", 2 * c4, c4, rep(3))
        self.lat4 = ConvBlock(self, "neck.2", c4, c3, 1)
        self.td3 = CSPBlock(self, "neck.3", 2 * c3, c3, rep(3))
        # bottom-up
        self.down_p3 = ConvBlock(self, "neck.4", c3, c3, 3, 2)
        self.bu4 = CSPBlock(self, "neck.5", 2 * c3, c4, rep(3))
        self.down_p4 = ConvBlock(self, "neck.6", c4, c4, 3, 2)
        self.bu5 = CSPBlock(self, "neck.7", 2 * c4, c5, rep(3))
        out = 3 * cfg.outputs_per_anchor
        self.head = []
        for i, c in enumerate((c3, c4, c5)):
            if cfg.head_init == "prior":
                bound = 1.0 / np.sqrt(c)
                weight = self.rng.uniform(-bound, bound, (out, c, 1, 1))
                bias = head_bias_prior(cfg, cfg.strides[i])
            else:
                weight = kaiming_uniform(self.rng, (out, c, 1, 1), cfg.leaky_slope)
                bias = np.zeros(out)
            w = self.add_param(f"head.{i}.weight", weight)
            b = self.add_param(f"head.{i}.bias", bias)
            self.head.append((w, b))

    def forward(self, batch: Tensor, mode: str = "eval", tape: Optional[Tape] = None) -> list:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        s = self.config.input_size
        if len(batch.shape) != 4 or batch.shape[1] != 3 or batch.shape[2:] != (s, s):
            raise ValueError(f"expected input N x 3 x {s} x {s}, got {batch.shape}")
        if batch.dtype != self.dtype:
            batch = Tensor(batch.data.astype(self.dtype))
        t = mode == "train"
        x = self.focus(batch, tape, t)
        x = self.csp1(self.down1(x, tape, t), tape, t)
        p3 = self.csp2(self.down2(x, tape, t), tape, t)
        p4 = self.csp3(self.down3(p3, tape, t), tape, t)
        p5 = self.csp4(self.down4(p4, tape, t), tape, t)

        l5 = self.lat5(p5, tape, t)
        x = concat_channels([upsample_nearest2x(l5, tape=tape), p4], tape=tape)
        l4 = self.lat4(self.td4(x, tape, t), tape, t)
        x = concat_channels([upsample_nearest2x(l4, tape=tape), p3], tape=tape)
        out3 = self.td3(x, tape, t)
        x = concat_channels([self.down_p3(out3, tape, t), l4], tape=tape)
        out4 = self.bu4(x, tape, t)
        x = concat_channels([self.down_p4(out4, tape, t), l5], tape=tape)
        out5 = self.bu5(x, tape, t)

        return [conv2d(f, w, b, tape=tape) for f, (w, b) in zip((out3, out4, out5), self.head)]

    __call__ = forward

    def parameters(self) -> list:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        state = {name: p.data.copy() for name, p in self.params.items()}
        for name, st in self.stats.items():
            state[f"{name}.running_mean"] = st.mean.copy()
            state[f"{name}.running_var"] = st.var.copy()
        return state

    def load_state_dict(self, state: dict) -> None:
        expected = set(self.params) | {f"{n}.running_{k}" for n in self.stats for k in ("mean", "var")}
        missing = expected - set(state)
        extra = set(state) - expected
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, p in self.params.items():
            p.assign_(state[name])
        for name, st in self.stats.items():
            st.mean[...] = state[f"{name}.running_mean"]
            st.var[...] = state[f"{name}.running_var"]

    def astype(self, dtype) -> "DetectorModel":
        clone = DetectorModel(self.config, self.seed, dtype)
        clone.load_state_dict(self.state_dict())
        return clone


def build_model(config: ModelConfig, seed: int = 0, dtype=DEFAULT_DTYPE) -> DetectorModel:
    return DetectorModel(config, seed, dtype)


def forward(model: DetectorModel, batch: Tensor, mode: str = "eval", tape: Optional[Tape] = None) -> list:
    return model.forward(batch, mode, tape)


def param_count(model) -> int:
    return int(sum(p.size for p in model.params.values()))
