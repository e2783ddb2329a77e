"""Rank-4 tensors with reverse-mode automatic differentiation.

Every value flowing through a network is a :class:`Tensor` holding an NCHW
numpy array. Operations record their parents and a closure that maps the
output gradient to input gradients; :func:`backward` walks that tape in
reverse topological order.
"""
from __future__ import annotations

import logging
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, c: float) -> "Tensor":
        return scale(self, c)

    __rmul__ = __mul__

    def backward(self) -> None:
        backward(self)


def _result(data: np.ndarray, parents: Iterable[Tensor], grad_fn, op: str) -> Tensor:
    out = Tensor(data)
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = grad_fn
    out.op = op
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    The loss must be a 1x1x1x1 tensor produced by a forward pass.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward needs a scalar 1x1x1x1 loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor requiring grad; run a forward pass first")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


# ---------------------------------------------------------------------------
# window helpers shared by the convolution family and pooling


def _gather(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Copy strided windows of a padded NCHW array into (N, C, kh, kw, ho, wo)."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols


def _scatter(cols: np.ndarray, out: np.ndarray, stride: int) -> None:
    """Adjoint of :func:`_gather`: add (N, C, kh, kw, h, w) windows into ``out``."""
    kh, kw, h, w = cols.shape[2:]
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * h:stride, j:j + stride * w:stride] += cols[:, :, i, j]


def _check_rank4(name: str, t: Tensor) -> None:
    if t.data.ndim != 4:
        raise ShapeError(f"{name} must be rank-4 NCHW, got shape {t.shape}")


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------------------
# operations


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of NCHW ``x`` with an (outC, inC, kH, kW) kernel."""
    _check_rank4("input", x)
    _check_rank4("kernel", kernel)
    if stride < 1 or pad < 0:
        raise ValueError(f"need stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    n, c, h, w = x.shape
    oc, ic, kh, kw = kernel.shape
    if c != ic:
        raise ShapeError(f"input has {c} channels but kernel expects {ic} (kernel shape {kernel.shape})")
    if bias is not None and bias.shape != (oc,):
        raise ShapeError(f"bias shape {bias.shape} does not match {oc} output channels")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _gather(xp, kh, kw, stride, ho, wo)
    out = np.tensordot(kernel.data, cols, axes=([1, 2, 3], [1, 2, 3])).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    kdata = kernel.data

    def grad_fn(g):
        gx = gk = gb = None
        if x.requires_grad:
            dcols = np.tensordot(kdata, g, axes=([0], [1])).transpose(3, 0, 1, 2, 4, 5)
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            _scatter(dcols, dxp, stride)
            gx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        if kernel.requires_grad:
            gk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, parents, grad_fn, "conv2d")


def conv2d_direct(x: np.ndarray, kernel: np.ndarray, bias: Optional[np.ndarray] = None,
                  stride: int = 1, pad: int = 0) -> np.ndarray:
    """Reference direct-loop convolution, one output pixel at a time.

    Slow; kept as the ground truth the vectorised kernel is tested against.
    """
    n, c, h, w = x.shape
    oc, _, kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)
    out = np.zeros((n, oc, ho, wo), dtype=x.dtype)
    for b in range(n):
        for o in range(oc):
            for i in range(ho):
                for j in range(wo):
                    win = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, o, i, j] = np.sum(win * kernel[o])
            if bias is not None:
                out[b, o] += bias[o]
    return out


def conv_transpose2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution with an (inC, outC, kH, kW) kernel.

    This is the exact adjoint of :func:`conv2d` with the same kernel, stride
    and padding; output size is ``(H - 1) * stride - 2 * pad + kH``.
    """
    _check_rank4("input", x)
    _check_rank4("kernel", kernel)
    n, c, h, w = x.shape
    ic, oc, kh, kw = kernel.shape
    if c != ic:
        raise ShapeError(f"input has {c} channels but transposed kernel expects {ic} (kernel shape {kernel.shape})")
    if stride < 1 or pad < 0:
        raise ValueError(f"need stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    if kh < stride or kw < stride:
        raise ShapeError(f"kernel {kh}x{kw} smaller than stride {stride}")
    hf, wf = (h - 1) * stride + kh, (w - 1) * stride + kw
    if hf - 2 * pad < 1 or wf - 2 * pad < 1:
        raise ShapeError(f"padding {pad} leaves an empty output")

    cols = np.tensordot(kernel.data, x.data, axes=([0], [1])).transpose(3, 0, 1, 2, 4, 5)
    full = np.zeros((n, oc, hf, wf), dtype=cols.dtype)
    _scatter(cols, full, stride)
    out = np.ascontiguousarray(full[:, :, pad:hf - pad, pad:wf - pad])
    kdata, xdata = kernel.data, x.data

    def grad_fn(g):
        gp = np.zeros((n, oc, hf, wf), dtype=g.dtype)
        gp[:, :, pad:hf - pad, pad:wf - pad] = g
        gcols = _gather(gp, kh, kw, stride, h, w)
        gx = gk = None
        if x.requires_grad:
            gx = np.tensordot(kdata, gcols, axes=([1, 2, 3], [1, 2, 3])).transpose(1, 0, 2, 3)
        if kernel.requires_grad:
            gk = np.tensordot(xdata, gcols, axes=([0, 2, 3], [0, 4, 5]))
        return gx, gk

    return _result(out, (x, kernel), grad_fn, "conv_transpose2d")


def maxpool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Window max; gradient goes to the first maximum in row-major window order."""
    _check_rank4("input", x)
    if k < 1 or stride < 1:
        raise ValueError(f"need k >= 1 and stride >= 1, got k={k}, stride={stride}")
    n, c, h, w = x.shape
    if h < k or w < k:
        raise ShapeError(f"pool window {k}x{k} larger than input {h}x{w}")
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    cols = _gather(x.data, k, k, stride, ho, wo).reshape(n, c, k * k, ho, wo)
    idx = np.argmax(cols, axis=2)[:, :, None]
    out = np.take_along_axis(cols, idx, axis=2)[:, :, 0]

    def grad_fn(g):
        dcols = np.zeros((n, c, k * k, ho, wo), dtype=g.dtype)
        np.put_along_axis(dcols, idx, g[:, :, None], axis=2)
        dx = np.zeros((n, c, h, w), dtype=g.dtype)
        _scatter(dcols.reshape(n, c, k, k, ho, wo), dx, stride)
        return (dx,)

    return _result(out, (x,), grad_fn, "maxpool2d")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs identical shapes, got {a.shape} and {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Full inner product of two same-shape tensors as a 1x1x1x1 tensor."""
    if a.shape != b.shape:
        raise ShapeError(f"dot needs identical shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = np.full((1, 1, 1, 1), np.sum(ad * bd), dtype=ad.dtype)
    return _result(out, (a, b), lambda g: (g.item() * bd, g.item() * ad), "dot")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    for t in xs:
        _check_rank4("concat operand", t)
    ref = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat needs matching batch/H/W, got {ref} and {t.shape}")
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]
    out = np.concatenate([t.data for t in xs], axis=1)
    return _result(out, xs, lambda g: np.split(g, splits, axis=1), "concat")


def softmax_channels(x: Tensor) -> Tensor:
    _check_rank4("input", x)
    if x.shape[1] < 1:
        raise ShapeError("softmax needs at least one channel")
    e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    s = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _result(s, (x,), grad_fn, "softmax")


# ---------------------------------------------------------------------------
# gradient verification


def finite_diff_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], name: str,
                      eps: float = 1e-5, samples: Optional[int] = 32, seed: int = 0,
                      kink_tol: float = 1e-2) -> float:
    """Compare the analytic gradient of one parameter with central differences.

    ``loss_fn`` must rebuild the graph from ``params`` on every call. Returns
    ``max |analytic - numeric| / max(1, |numeric|)`` over the sampled
    coordinates. Coordinates where the one-sided slopes disagree by more than
    ``kink_tol`` sit on a non-differentiable point (a maxpool tie, a PReLU
    hinge) and are skipped.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    backward(loss)
    base = loss.item()
    target = params[name]
    analytic = target.grad.reshape(-1).copy()
    flat = target.data.reshape(-1)

    coords = np.arange(flat.size)
    if samples is not None and samples < flat.size:
        coords = np.random.default_rng(seed).choice(flat.size, size=samples, replace=False)

    worst = 0.0
    skipped = 0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        up = loss_fn().item()
        flat[i] = orig - eps
        down = loss_fn().item()
        flat[i] = orig
        numeric = (up - down) / (2 * eps)
        fwd, bwd = (up - base) / eps, (base - down) / eps
        if abs(fwd - bwd) > kink_tol * max(1.0, abs(numeric)):
            skipped += 1
            continue
        worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(numeric)))
    if skipped:
        logger.debug("finite_diff_check(%s): skipped %d kink coordinates", name, skipped)
    return worst
