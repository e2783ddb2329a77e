"""PReLU, dropout and weight initialisers."""
from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, _result

PRELU_INIT = 0.25


def prelu(x: Tensor, a: Tensor) -> Tensor:
    """Per-channel parametric ReLU: ``max(0, x) + a_c * min(0, x)``."""
    if x.data.ndim != 4:
        raise ShapeError(f"prelu input must be NCHW, got {x.shape}")
    if a.shape != (x.shape[1],):
        raise ShapeError(f"prelu slope has shape {a.shape}, expected ({x.shape[1]},)")
    xd = x.data
    slope = a.data[None, :, None, None]
    pos = xd > 0
    neg = np.minimum(xd, 0)
    out = np.where(pos, xd, slope * xd)

    def grad_fn(g):
        gx = np.where(pos, g, g * slope) if x.requires_grad else None
        ga = (g * neg).sum(axis=(0, 2, 3)) if a.requires_grad else None
        return gx, ga

    return _result(out, (x, a), grad_fn, "prelu")


@dataclass
class DropoutState:
    """Configuration of one dropout layer.

    The keep-mask for a given iteration is drawn from a stream seeded by
    ``(seed, name, iteration)`` so it never depends on evaluation order.
    """

    p: float = 0.5
    training: bool = False
    name: str = "dropout"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"dropout probability must lie in [0, 1], got {self.p}")

    def rng(self, iteration: int) -> np.random.Generator:
        key = zlib.crc32(self.name.encode("utf-8"))
        return np.random.default_rng(np.random.SeedSequence([self.seed, key, iteration]))


def dropout(x: Tensor, state: DropoutState, iteration: int = 0) -> Tensor:
    """Inverted dropout; the identity in eval mode or when ``p == 0``."""
    if not state.training or state.p == 0.0:
        return x
    if state.p >= 1.0:
        raise ValueError("dropout with p=1 in training mode zeroes every activation")
    keep = state.rng(iteration).random(x.shape) >= state.p
    mask = keep.astype(x.dtype) / (1.0 - state.p)
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def he_init(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Zero-mean Gaussian with variance ``2 / fan_in`` (fan_in = inC * kH * kW)."""
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def bilinear_kernel(factor: int, channels: int) -> np.ndarray:
    """Transposed-convolution weights performing bilinear upsampling by ``factor``.

    Shape is (channels, channels, k, k) with ``k = 2 * factor - factor % 2``;
    off-diagonal channel pairs are zero. Use with stride ``factor`` and
    padding :func:`upsample_padding`.
    """
    if factor < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {factor}")
    size = 2 * factor - factor % 2
    center = factor - 0.5 if size % 2 == 0 else factor - 1
    og = np.arange(size)
    profile = 1 - np.abs(og - center) / factor
    filt = np.outer(profile, profile)
    weight = np.zeros((channels, channels, size, size))
    weight[np.arange(channels), np.arange(channels)] = filt
    return weight


def upsample_padding(factor: int) -> int:
    size = 2 * factor - factor % 2
    return (size - factor) // 2
