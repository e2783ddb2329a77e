"""ToolNetMS, ToolNetH and an FCN-8s style baseline.

All three share a VGG-like encoder: ``scales`` stages of two 3x3 conv+PReLU
layers with 2x2 max pooling between stages. They differ in how the per-scale
class scores are turned into a full-resolution prediction:

* ToolNetMS sums scores in a cascade from the coarsest scale to the finest,
  upsampling 2x between scales, and applies one softmax at the end.
* ToolNetH upsamples every scale's scores straight to full resolution, turns
  each into a probability map, and fuses them with learned scalar weights.
* The baseline adds fc6/fc7 layers after the encoder and fuses scores from
  the three coarsest scales only, upsampling the input/8 map 8x at the end.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .layers import PRELU_INIT, DropoutState, bilinear_kernel, dropout, he_init, prelu, upsample_padding
from .losses import DICE_EPS, MSDLConfig, dice_loss, fuse_scales, msdl
from .tensor import Tensor, add, conv2d, conv_transpose2d, maxpool2d, softmax_channels

ARCHITECTURES = ("toolnet-ms", "toolnet-h", "baseline")


class ResizeRequiredError(ValueError):
    """Input spatial size is not divisible by the network's total stride."""


@dataclass
class ArchConfig:
    in_channels: int = 3
    num_classes: int = 2
    scales: int = 6
    base_width: int = 32
    width_growth: int = 2
    width_multiplier: float = 1.0
    width_cap: int = 512
    fc_width: int = 4096
    dropout: float = 0.5
    input_size: tuple[int, int] = (64, 64)
    renormalize_fused: bool = True

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        if self.scales < 2:
            raise ValueError(f"need at least 2 scales, got {self.scales}")
        if self.base_width < 1:
            raise ValueError("base_width must be >= 1")
        if self.width_multiplier <= 0:
            raise ValueError("width_multiplier must be positive")
        check_divisible(self.input_size, self.scales)

    @property
    def total_stride(self) -> int:
        return 2 ** (self.scales - 1)

    def stage_widths(self) -> list[int]:
        widths = []
        for j in range(self.scales):
            raw = min(self.base_width * self.width_growth ** j, self.width_cap)
            widths.append(max(1, int(round(raw * self.width_multiplier))))
        return widths

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def check_divisible(size, scales: int) -> None:
    stride = 2 ** (scales - 1)
    h, w = size
    if h % stride or w % stride:
        raise ResizeRequiredError(
            f"input size {h}x{w} must be divisible by {stride} (2^(scales-1)); resize the image")


def full_scale_config(arch: str) -> ArchConfig:
    """Configurations whose parameter counts land in the 6.5M to 8.5M band (baseline: about 134M)."""
    if arch == "baseline":
        return ArchConfig(base_width=64, width_cap=512, fc_width=4096, input_size=(576, 704))
    return ArchConfig(base_width=32, width_cap=512, width_multiplier=0.875, input_size=(576, 704))


def desk_config(arch: str) -> ArchConfig:
    """Small configurations that train on a CPU in minutes at 64x64."""
    if arch == "baseline":
        return ArchConfig(base_width=16, width_cap=128, fc_width=512)
    return ArchConfig(base_width=8, width_cap=32)


@dataclass
class ScalePredictions:
    final: Tensor
    per_scale: list[Tensor] = field(default_factory=list)
    fused: Optional[Tensor] = None


class Network:
    """A built architecture: ordered named parameters plus a forward rule."""

    arch = ""

    def __init__(self, cfg: ArchConfig, seed: int = 0, initialize: bool = True):
        self.cfg = cfg
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self.no_decay: set[str] = set()
        self._rng = np.random.default_rng(seed) if initialize else None
        self._has_forward = False
        self.build()
        self._rng = None

    # -- construction helpers ------------------------------------------------

    def _add(self, name: str, shape: tuple[int, ...], init: str, decay: bool = True) -> None:
        if self._rng is None:
            data = np.zeros(shape)
        elif init == "he":
            data = he_init(shape, self._rng)
        elif init == "prelu":
            data = np.full(shape, PRELU_INIT)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init.startswith("bilinear"):
            data = bilinear_kernel(int(init.split(":")[1]), shape[0])
        elif init.startswith("const"):
            data = np.full(shape, float(init.split(":")[1]))
        else:
            raise ValueError(f"unknown initialiser {init!r}")
        self.params[name] = Tensor(data, requires_grad=True, name=name)
        if not decay:
            self.no_decay.add(name)

    def _add_conv(self, name: str, cin: int, cout: int, k: int, init: str = "he") -> None:
        self._add(f"{name}.weight", (cout, cin, k, k), init)
        self._add(f"{name}.bias", (cout,), "zeros")

    def _add_upsample(self, name: str, factor: int) -> None:
        k = self.cfg.num_classes
        size = 2 * factor - factor % 2
        self._add(f"{name}.weight", (k, k, size, size), f"bilinear:{factor}")

    def _build_encoder(self) -> list[int]:
        widths = self.cfg.stage_widths()
        cin = self.cfg.in_channels
        for j, w in enumerate(widths, start=1):
            for layer in (1, 2):
                self._add_conv(f"enc{j}.conv{layer}", cin, w, 3)
                self._add(f"enc{j}.prelu{layer}.slope", (w,), "prelu", decay=False)
                cin = w
        return widths

    def build(self) -> None:
        raise NotImplementedError

    # -- forward helpers -----------------------------------------------------

    def _conv(self, name: str, x: Tensor, pad: int = 0) -> Tensor:
        return conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], 1, pad)

    def _upsample(self, name: str, x: Tensor, factor: int) -> Tensor:
        return conv_transpose2d(x, self.params[f"{name}.weight"], factor, upsample_padding(factor))

    def _dropout(self, name: str, x: Tensor, training: bool, iteration: int) -> Tensor:
        state = DropoutState(self.cfg.dropout, training, name, self.seed)
        return dropout(x, state, iteration)

    def _encode(self, image: Tensor, training: bool, iteration: int, final_dropout: bool = True) -> list[Tensor]:
        feats = []
        x = image
        m = self.cfg.scales
        for j in range(1, m + 1):
            for layer in (1, 2):
                x = self._conv(f"enc{j}.conv{layer}", x, pad=1)
                x = prelu(x, self.params[f"enc{j}.prelu{layer}.slope"])
            if j == m and final_dropout:
                x = self._dropout(f"enc{j}.dropout", x, training, iteration)
            feats.append(x)
            if j < m:
                x = maxpool2d(x, 2, 2)
        return feats

    def _check_input(self, image: Tensor) -> None:
        if image.data.ndim != 4 or image.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected a 1x{self.cfg.in_channels}xHxW image, got {image.shape}")
        check_divisible(image.shape[2:], self.cfg.scales)

    # -- public API ------------------------------------------------------------

    def forward(self, image: Tensor, mode: str = "eval", iteration: int = 0) -> ScalePredictions:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        self._check_input(image)
        preds = self._forward(image, mode == "train", iteration)
        self._has_forward = True
        return preds

    def _forward(self, image: Tensor, training: bool, iteration: int) -> ScalePredictions:
        raise NotImplementedError

    def loss(self, preds: ScalePredictions, target: Tensor):
        """Training loss; returns ``(total, terms)`` with terms as floats."""
        total = dice_loss(preds.final, target)
        return total, [total.item()]

    def loss_names(self) -> list[str]:
        return ["dice"]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def backward(self, loss: Tensor) -> None:
        if not self._has_forward:
            raise RuntimeError("backward called before any forward pass")
        self.zero_grad()
        loss.backward()

    def astype(self, dtype) -> "Network":
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ValueError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, arr in arrays.items():
            p = self.params[k]
            if arr.shape != p.shape:
                raise ValueError(f"parameter {k}: checkpoint shape {arr.shape} != network shape {p.shape}")
            p.data = np.array(arr, dtype=p.data.dtype)


class ToolNetMS(Network):
    arch = "toolnet-ms"

    def build(self) -> None:
        widths = self._build_encoder()
        k = self.cfg.num_classes
        for j, w in enumerate(widths, start=1):
            self._add_conv(f"score{j}", w, k, 1, init="zeros")
        for j in range(1, self.cfg.scales):
            self._add_upsample(f"up{j}", 2)

    def _forward(self, image, training, iteration):
        feats = self._encode(image, training, iteration)
        m = self.cfg.scales
        running = self._conv(f"score{m}", feats[-1])
        for j in range(m - 1, 0, -1):
            running = add(self._upsample(f"up{j}", running, 2), self._conv(f"score{j}", feats[j - 1]))
        return ScalePredictions(final=softmax_channels(running))


class ToolNetH(Network):
    arch = "toolnet-h"

    def build(self) -> None:
        widths = self._build_encoder()
        k = self.cfg.num_classes
        for j, w in enumerate(widths, start=1):
            self._add_conv(f"score{j}", w, k, 1, init="zeros")
            if j > 1:
                self._add_upsample(f"up{j}", 2 ** (j - 1))
        m = self.cfg.scales
        self._add("fuse.weight", (m,), f"const:{1.0 / m!r}", decay=False)

    def _forward(self, image, training, iteration):
        feats = self._encode(image, training, iteration)
        per_scale = []
        for j, f in enumerate(feats, start=1):
            score = self._conv(f"score{j}", f)
            if j > 1:
                score = self._upsample(f"up{j}", score, 2 ** (j - 1))
            per_scale.append(softmax_channels(score))
        fused = fuse_scales(per_scale, self.params["fuse.weight"])
        if self.cfg.renormalize_fused:
            fused = softmax_channels(fused)
        return ScalePredictions(final=fused, per_scale=per_scale, fused=fused)

    def loss(self, preds, target):
        total, terms = msdl(preds.per_scale, preds.fused, target, MSDLConfig(self.cfg.scales))
        return total, [t.item() for t in terms]

    def loss_names(self) -> list[str]:
        return ["fused"] + [f"scale{j}" for j in range(1, self.cfg.scales + 1)]


class BaselineFCN8s(Network):
    arch = "baseline"

    def build(self) -> None:
        if self.cfg.scales < 4:
            raise ValueError("the FCN-8s baseline needs at least 4 scales")
        widths = self._build_encoder()
        m, k, fc = self.cfg.scales, self.cfg.num_classes, self.cfg.fc_width
        self._add_conv("fc6", widths[-1], fc, 7)
        self._add("fc6.prelu.slope", (fc,), "prelu", decay=False)
        self._add_conv("fc7", fc, fc, 1)
        self._add("fc7.prelu.slope", (fc,), "prelu", decay=False)
        self._add_conv("score_fc", fc, k, 1, init="zeros")
        self._add_conv(f"score{m - 1}", widths[m - 2], k, 1, init="zeros")
        self._add_conv(f"score{m - 2}", widths[m - 3], k, 1, init="zeros")
        self._add_upsample("up_fc", 2)
        self._add_upsample(f"up{m - 1}", 2)
        self._add_upsample("up_final", 2 ** (m - 3))

    def _forward(self, image, training, iteration):
        feats = self._encode(image, training, iteration, final_dropout=False)
        m = self.cfg.scales
        x = self._conv("fc6", feats[-1], pad=3)
        x = self._dropout("fc6.dropout", prelu(x, self.params["fc6.prelu.slope"]), training, iteration)
        x = self._conv("fc7", x)
        x = self._dropout("fc7.dropout", prelu(x, self.params["fc7.prelu.slope"]), training, iteration)
        score = self._conv("score_fc", x)
        score = add(self._upsample("up_fc", score, 2), self._conv(f"score{m - 1}", feats[m - 2]))
        score = add(self._upsample(f"up{m - 1}", score, 2), self._conv(f"score{m - 2}", feats[m - 3]))
        # score now sits at the third-coarsest scale (input/8 when scales == 6)
        final = self._upsample("up_final", score, 2 ** (m - 3))
        return ScalePredictions(final=softmax_channels(final))


_BUILDERS = {"toolnet-ms": ToolNetMS, "toolnet-h": ToolNetH, "baseline": BaselineFCN8s}


def build_network(arch: str, cfg: Optional[ArchConfig] = None, seed: int = 0, initialize: bool = True) -> Network:
    if arch not in _BUILDERS:
        raise ValueError(f"unknown architecture {arch!r}; choose from {', '.join(ARCHITECTURES)}")
    return _BUILDERS[arch](cfg or desk_config(arch), seed=seed, initialize=initialize)


def build_toolnet_ms(cfg: ArchConfig, seed: int = 0, initialize: bool = True) -> ToolNetMS:
    return ToolNetMS(cfg, seed, initialize)


def build_toolnet_h(cfg: ArchConfig, seed: int = 0, initialize: bool = True) -> ToolNetH:
    return ToolNetH(cfg, seed, initialize)


def build_baseline_fcn8s(cfg: ArchConfig, seed: int = 0, initialize: bool = True) -> BaselineFCN8s:
    return BaselineFCN8s(cfg, seed, initialize)


def count_parameters(net: Network) -> int:
    return sum(p.size for p in net.params.values())
