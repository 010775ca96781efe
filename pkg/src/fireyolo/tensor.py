"""Minimal dense tensors with an explicit reverse-mode tape.

Every operator takes an optional ``tape``. When a tape is given and any
input requires a gradient, the operator appends a record holding its inputs,
its output and a closure mapping the output gradient to input gradients.
``backward`` replays those records in reverse and accumulates ``.grad``.

Arrays default to float32. float64 tensors are accepted everywhere so that
finite-difference checks are not swamped by rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class Tensor:
    __slots__ = ("_data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        self._data = np.asarray(arr, order="C")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def dtype(self):
        return self._data.dtype

    @property
    def size(self) -> int:
        return self._data.size

    def item(self) -> float:
        if self._data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self._data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self._data

    def assign_(self, values) -> None:
        """Overwrite values in place; the shape may not change."""
        values = np.asarray(values, dtype=self._data.dtype)
        if values.shape != self._data.shape:
            raise ValueError(f"cannot assign shape {values.shape} into tensor of shape {self.shape}")
        self._data[...] = values

    def astype(self, dtype) -> "Tensor":
        return Tensor(self._data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self._data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match tensor shape {self.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self._data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


@dataclass
class _Record:
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered log of differentiable operations for one forward pass."""

    records: list = field(default_factory=list)
    replayed: bool = False

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward) -> None:
        if self.replayed:
            raise RuntimeError("tape was already replayed; call reset() before recording again")
        self.records.append(_Record(tuple(inputs), output, backward))

    def reset(self) -> None:
        self.records.clear()
        self.replayed = False

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every requires_grad tensor on the tape."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.replayed:
        raise RuntimeError("tape replayed twice without reset")
    tape.replayed = True
    loss.accumulate_grad(np.ones(loss.shape, dtype=loss.dtype))
    for rec in reversed(tape.records):
        g = rec.output.grad
        if g is None:
            continue
        grads = rec.backward(g)
        for inp, gi in zip(rec.inputs, grads):
            if gi is not None and inp.requires_grad:
                inp.accumulate_grad(gi)


def _track(tape: Optional[Tape], inputs: Sequence[Tensor], out: Tensor, fn) -> Tensor:
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(inputs, out, fn)
    return out


def _check_nchw(x: Tensor, what: str) -> None:
    if len(x.shape) != 4:
        raise ValueError(f"{what}: expected an NCHW tensor, got shape {x.shape}")


# --------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + hspan:stride, j:j + wspan:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im(dcols: np.ndarray, shape: tuple, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, hp, wp = shape
    dxp = np.zeros(shape, dtype=dcols.dtype)
    dcols = dcols.reshape(n, c, k, k, ho, wo)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + hspan:stride, j:j + wspan:stride] += dcols[:, :, i, j]
    return dxp


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, tape: Optional[Tape] = None) -> Tensor:
    """2-D cross-correlation, NCHW input and OIKK weights."""
    _check_nchw(x, "conv2d input")
    if len(weight.shape) != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"conv2d weight must be O x I x K x K, got {weight.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0 (got {stride}, {padding})")
    n, c, h, w = x.shape
    o, i, k, _ = weight.shape
    if c != i:
        raise ValueError(f"conv2d channel mismatch: input has {c} channels, weight expects {i}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d bias must have shape ({o},), got {bias.shape}")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ValueError(f"conv2d kernel {k} does not fit input {h}x{w} with padding {padding}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError("conv2d produces an empty spatial output")

    wmat = weight.data.reshape(o, i * k * k)
    if k == 1 and stride == 1 and padding == 0:
        cols = x.data.reshape(n, c, h * w)
        padded_shape = None
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        padded_shape = xp.shape
        cols = _im2col(xp, k, stride, ho, wo)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    result = Tensor(out.reshape(n, o, ho, wo))

    def _backward(g):
        g2 = g.reshape(n, o, ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g2)
            if padded_shape is None:
                gx = dcols.reshape(x.shape)
            else:
                dxp = _col2im(dcols, padded_shape, k, stride, ho, wo)
                gx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _track(tape, inputs, result, _backward)


# --------------------------------------------------------------------------
# normalization


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def init(cls, channels: int, dtype=DEFAULT_DTYPE, momentum: float = 0.1) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum)


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
                 running_stats: Optional[RunningStats] = None, training: bool = True,
                 tape: Optional[Tape] = None) -> Tensor:
    """Per-channel normalization over N, H, W.

    In training mode the batch statistics are used and ``running_stats`` (if
    given) is updated in place with unbiased variance. In eval mode the running
    statistics are required.
    """
    _check_nchw(x, "batch_norm2d input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm2d: gamma/beta must have shape ({c},), got {gamma.shape}/{beta.shape}")
    if not eps > 0:
        raise ValueError(f"batch_norm2d: eps must be positive, got {eps}")
    xd = x.data
    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mean = xd.mean(axis=(0, 2, 3))
        xc = xd - mean[None, :, None, None]
        var = np.square(xc).mean(axis=(0, 2, 3))
        if running_stats is not None:
            mom = running_stats.momentum
            unbiased = var * (m / max(m - 1, 1))
            running_stats.mean[...] = (1 - mom) * running_stats.mean + mom * mean
            running_stats.var[...] = (1 - mom) * running_stats.var + mom * unbiased
    else:
        if running_stats is None:
            raise ValueError("batch_norm2d in eval mode needs running statistics")
        mean = running_stats.mean.astype(xd.dtype)
        var = running_stats.var.astype(xd.dtype)
        xc = xd - mean[None, :, None, None]
    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = xc * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    result = Tensor(out)

    def _backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad or (training and x.requires_grad) else None
        gb = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            scale = (gamma.data * inv_std)[None, :, None, None]
            if training:
                m = g.shape[0] * g.shape[2] * g.shape[3]
                gx = scale * (g - (gb / m)[None, :, None, None] - xhat * (gg / m)[None, :, None, None])
            else:
                gx = g * scale
        return gx, (gg if gamma.requires_grad else None), (gb if beta.requires_grad else None)

    return _track(tape, (x, gamma, beta), result, _backward)


# --------------------------------------------------------------------------
# elementwise


def leaky_relu(x: Tensor, alpha: float = 0.1, tape: Optional[Tape] = None) -> Tensor:
    if not 0 < alpha < 1:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {alpha}")
    xd = x.data
    a = xd.dtype.type(alpha)
    result = Tensor(np.maximum(xd, xd * a))

    def _backward(g):
        slope = (xd >= 0).astype(xd.dtype)
        slope *= 1 - a
        slope += a
        return (g * slope,)

    return _track(tape, (x,), result, _backward)


def sigmoid_array(a: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so no overflow for any |a|
    e = np.exp(-np.abs(a))
    return np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype, copy=False)


def sigmoid(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    s = sigmoid_array(x.data)
    result = Tensor(s)
    return _track(tape, (x,), result, lambda g: (g * s * (1 - s),))


def add(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    result = Tensor(a.data + b.data)
    return _track(tape, (a, b), result, lambda g: (g, g))


def sum_all(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    result = Tensor(np.array(x.data.sum(dtype=np.float64), dtype=x.dtype))
    return _track(tape, (x,), result, lambda g: (np.full(x.shape, g.reshape(-1)[0], dtype=x.dtype),))


# --------------------------------------------------------------------------
# layout


def concat_channels(inputs: Sequence[Tensor], tape: Optional[Tape] = None) -> Tensor:
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    for t in inputs:
        _check_nchw(t, "concat_channels input")
    n, _, h, w = inputs[0].shape
    for t in inputs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ValueError(f"concat_channels: spatial/batch mismatch {inputs[0].shape} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])
    result = Tensor(np.concatenate([t.data for t in inputs], axis=1))

    def _backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(inputs)))

    return _track(tape, tuple(inputs), result, _backward)


def split_channels(x: Tensor, sizes: Sequence[int], tape: Optional[Tape] = None) -> list:
    """Inverse of concat_channels for the given channel counts."""
    _check_nchw(x, "split_channels input")
    if sum(sizes) != x.shape[1]:
        raise ValueError(f"split sizes {list(sizes)} do not add up to {x.shape[1]} channels")
    outs = []
    start = 0
    for size in sizes:
        lo, hi = start, start + size

        def _backward(g, lo=lo, hi=hi):
            full = np.zeros(x.shape, dtype=g.dtype)
            full[:, lo:hi] = g
            return (full,)

        outs.append(_track(tape, (x,), Tensor(x.data[:, lo:hi].copy()), _backward))
        start = hi
    return outs


def subsample2(x: Tensor, row: int, col: int, tape: Optional[Tape] = None) -> Tensor:
    """Every second pixel starting at (row, col), each offset 0 or 1."""
    _check_nchw(x, "subsample2 input")
    if row not in (0, 1) or col not in (0, 1):
        raise ValueError("subsample2 offsets must be 0 or 1")
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise ValueError(f"subsample2 needs even spatial dims, got {h}x{w}")
    result = Tensor(x.data[:, :, row::2, col::2].copy())

    def _backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, :, row::2, col::2] = g
        return (full,)

    return _track(tape, (x,), result, _backward)


def upsample_nearest2x(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    _check_nchw(x, "upsample_nearest2x input")
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)
    result = Tensor(out)

    def _backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _track(tape, (x,), result, _backward)
