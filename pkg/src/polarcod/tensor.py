"""Minimal deterministic NCHW tensor engine with reverse-mode differentiation.

Tensors wrap float64 (or float32) numpy arrays. Every op that touches a
tensor requiring gradients records a closure; ``backward()`` on a scalar
replays them in reverse topological order, accumulates ``.grad`` on leaves
and releases the graph. Tensors handed between threads must have their
graph released first; independent graphs never share mutable state.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float64

_grad_enabled = True
_check_finite = False


def set_default_dtype(dtype) -> None:
    global DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / probing)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Assert finiteness of every op output inside the block."""
    global _check_finite
    prev = _check_finite
    _check_finite = enabled
    try:
        yield
    finally:
        _check_finite = prev


def _finite(arr: np.ndarray, what: str) -> np.ndarray:
    if _check_finite and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {what}")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_grad_fn", "_released")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._prev: tuple = ()
        self._grad_fn = None
        self._released = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return reduce_sum(self)

    def mean(self):
        return reduce_mean(self)

    def backward(self) -> None:
        backward(self)


@dataclass
class Spectrum:
    """Frequency-domain pair of planes; same shape as the transformed tensor."""

    real: Tensor
    imag: Tensor

    @property
    def shape(self):
        return self.real.shape


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))


def _node(data: np.ndarray, prev: tuple, grad_fn, what: str) -> Tensor:
    """Wrap an op result; records the closure only if grads are live."""
    _finite(data, what)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in prev):
        out.requires_grad = True
        out._prev = prev
        out._grad_fn = grad_fn
    return out


def _reduce_to(shape: tuple, g: np.ndarray) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    if len(shape) < g.ndim:
        g = g.sum(axis=tuple(range(g.ndim - len(shape))))
    axes = tuple(i for i, (s, gs) in enumerate(zip(shape, g.shape)) if s == 1 and gs > 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcastable(a: np.ndarray, b: np.ndarray, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{opname}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# -- elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcastable(a.data, b.data, "add")
    out_data = a.data + b.data

    def grad_fn(g):
        a.accumulate_grad(_reduce_to(a.data.shape, g))
        b.accumulate_grad(_reduce_to(b.data.shape, g))

    return _node(out_data, (a, b), grad_fn, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcastable(a.data, b.data, "sub")
    out_data = a.data - b.data

    def grad_fn(g):
        a.accumulate_grad(_reduce_to(a.data.shape, g))
        b.accumulate_grad(_reduce_to(b.data.shape, -g))

    return _node(out_data, (a, b), grad_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcastable(a.data, b.data, "mul")
    out_data = a.data * b.data

    def grad_fn(g):
        a.accumulate_grad(_reduce_to(a.data.shape, g * b.data))
        b.accumulate_grad(_reduce_to(b.data.shape, g * a.data))

    return _node(out_data, (a, b), grad_fn, "mul")


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0.0)

    def grad_fn(g):
        x.accumulate_grad(g * mask)

    return _node(out_data, (x,), grad_fn, "relu")


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    s = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                 np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))

    def grad_fn(g):
        x.accumulate_grad(g * s * (1.0 - s))

    return _node(s, (x,), grad_fn, "sigmoid")


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Per-element binary cross-entropy from logits; target is a constant."""
    x = _as_tensor(logits)
    t = np.asarray(target, dtype=x.dtype)
    out_data = np.maximum(x.data, 0.0) - x.data * t + np.log1p(np.exp(-np.abs(x.data)))

    def grad_fn(g):
        s = 1.0 / (1.0 + np.exp(-x.data))
        x.accumulate_grad(g * (s - t))

    return _node(out_data, (x,), grad_fn, "bce_with_logits")


def reduce_sum(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out_data = np.asarray(x.data.sum())

    def grad_fn(g):
        x.accumulate_grad(np.broadcast_to(g, x.data.shape).copy())

    return _node(out_data, (x,), grad_fn, "sum")


def reduce_mean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size
    out_data = np.asarray(x.data.mean())

    def grad_fn(g):
        x.accumulate_grad(np.broadcast_to(g / n, x.data.shape).copy())

    return _node(out_data, (x,), grad_fn, "mean")


# -- convolution and pooling ----------------------------------------------


def _conv_out_size(size: int, k: int, stride: int, pad: int, dil: int) -> int:
    eff = dil * (k - 1) + 1
    out = (size + 2 * pad - eff) // stride + 1
    if out < 1:
        raise ValueError(f"window (kernel {k}, dilation {dil}) larger than padded input of size {size + 2 * pad}")
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, dh: int, dw: int,
            oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i * dh: i * dh + sh * oh: sh, j * dw: j * dw + sw * ow: sw]
    return cols


def _col2im_add(dxp: np.ndarray, dcols: np.ndarray, kh: int, kw: int, sh: int, sw: int,
                dh: int, dw: int, oh: int, ow: int) -> None:
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i * dh: i * dh + sh * oh: sh, j * dw: j * dw + sw * ow: sw] += dcols[:, :, i, j]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation over NCHW input with OIHW weights."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.data.shape} and {weight.data.shape}")
    n, cin, h, w = x.data.shape
    cout, cin_w, kh, kw = weight.data.shape
    if cin != cin_w:
        raise ValueError(f"conv2d: input has {cin} channels but kernel expects {cin_w}")
    if bias is not None and bias.data.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.data.shape} does not match {cout} output channels")
    oh = _conv_out_size(h, kh, stride, padding, dilation)
    ow = _conv_out_size(w, kw, stride, padding, dilation)

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, stride, dilation, dilation, oh, ow)
    out_data = np.tensordot(weight.data, cols, axes=([1, 2, 3], [1, 2, 3])).transpose(1, 0, 2, 3)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]

    prev = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g):
        if bias is not None:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
        weight.accumulate_grad(np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5])))
        dcols = np.tensordot(g, weight.data, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros_like(xp)
        _col2im_add(dxp, dcols, kh, kw, stride, stride, dilation, dilation, oh, ow)
        x.accumulate_grad(dxp[:, :, padding: padding + h, padding: padding + w] if padding else dxp)

    return _node(out_data, prev, grad_fn, "conv2d")


def avg_pool2d(x: Tensor, window: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Windowed average; zero padding counts toward the window area."""
    x = _as_tensor(x)
    if window == -1:
        return global_avg_pool(x)
    if window < 1:
        raise ValueError(f"pool window must be >= 1 or the -1 global sentinel, got {window}")
    stride = stride or window
    n, c, h, w = x.data.shape
    oh = _conv_out_size(h, window, stride, padding, 1)
    ow = _conv_out_size(w, window, stride, padding, 1)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, window, window, stride, stride, 1, 1, oh, ow)
    out_data = cols.mean(axis=(2, 3))
    area = window * window

    def grad_fn(g):
        dcols = np.broadcast_to(g[:, :, None, None] / area, (n, c, window, window, oh, ow))
        dxp = np.zeros_like(xp)
        _col2im_add(dxp, dcols, window, window, stride, stride, 1, 1, oh, ow)
        x.accumulate_grad(dxp[:, :, padding: padding + h, padding: padding + w] if padding else dxp)

    return _node(out_data, (x,), grad_fn, "avg_pool2d")


def max_pool2d(x: Tensor, window: int, stride: int | None = None, padding: int = 0) -> Tensor:
    x = _as_tensor(x)
    if window < 1:
        raise ValueError(f"pool window must be >= 1, got {window}")
    stride = stride or window
    n, c, h, w = x.data.shape
    oh = _conv_out_size(h, window, stride, padding, 1)
    ow = _conv_out_size(w, window, stride, padding, 1)
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    else:
        xp = x.data
    cols = _im2col(xp, window, window, stride, stride, 1, 1, oh, ow).reshape(n, c, window * window, oh, ow)
    idx = cols.argmax(axis=2)
    out_data = np.take_along_axis(cols, idx[:, :, None], axis=2)[:, :, 0]

    def grad_fn(g):
        dcols = np.zeros_like(cols)
        np.put_along_axis(dcols, idx[:, :, None], g[:, :, None], axis=2)
        dxp = np.zeros((n, c) + xp.shape[2:], dtype=g.dtype)
        _col2im_add(dxp, dcols.reshape(n, c, window, window, oh, ow),
                    window, window, stride, stride, 1, 1, oh, ow)
        x.accumulate_grad(dxp[:, :, padding: padding + h, padding: padding + w] if padding else dxp)

    return _node(out_data, (x,), grad_fn, "max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, shape (N, C, 1, 1), broadcastable to x."""
    x = _as_tensor(x)
    n, c, h, w = x.data.shape
    out_data = x.data.mean(axis=(2, 3), keepdims=True)

    def grad_fn(g):
        x.accumulate_grad(np.broadcast_to(g / (h * w), x.data.shape).copy())

    return _node(out_data, (x,), grad_fn, "global_avg_pool")


def batch_norm(x: Tensor, scale: Tensor, shift: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization; batch statistics in training mode (running
    buffers updated in place), running statistics in eval mode."""
    x = _as_tensor(x)
    c = x.data.shape[1]
    if scale.data.shape != (c,) or shift.data.shape != (c,):
        raise ValueError(f"batch_norm: scale/shift must have shape ({c},)")
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean, var = running_mean, running_var
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * ivar[None, :, None, None]
    out_data = scale.data[None, :, None, None] * xhat + shift.data[None, :, None, None]

    def grad_fn(g):
        shift.accumulate_grad(g.sum(axis=(0, 2, 3)))
        scale.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
        dxhat = g * scale.data[None, :, None, None]
        if training:
            m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
            sum_dxhat = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (dxhat - sum_dxhat / m - xhat * sum_dxhat_xhat / m) * ivar[None, :, None, None]
        else:
            dx = dxhat * ivar[None, :, None, None]
        x.accumulate_grad(dx)

    return _node(out_data, (x, scale, shift), grad_fn, "batch_norm")


# -- Fourier ---------------------------------------------------------------


def fft2(x: Tensor) -> Spectrum:
    """Unnormalized forward 2-D DFT over the spatial axes."""
    x = _as_tensor(x)
    f = np.fft.fft2(x.data, axes=(-2, -1))
    re_data = np.ascontiguousarray(f.real)
    im_data = np.ascontiguousarray(f.imag)

    def grad_re(g):
        x.accumulate_grad(np.fft.fft2(g, axes=(-2, -1)).real)

    def grad_im(g):
        x.accumulate_grad(np.fft.fft2(g, axes=(-2, -1)).imag)

    return Spectrum(real=_node(re_data, (x,), grad_re, "fft2"),
                    imag=_node(im_data, (x,), grad_im, "fft2"))


def ifft2(s: Spectrum, residue_tol: float | None = None) -> Tensor:
    """1/(H*W)-normalized inverse DFT; returns the real part.

    When residue_tol is given, the discarded imaginary part must stay below
    it in max magnitude.
    """
    re, im = s.real, s.imag
    z = re.data + 1j * im.data
    y = np.fft.ifft2(z, axes=(-2, -1))
    if residue_tol is not None and np.abs(y.imag).max() > residue_tol:
        raise FloatingPointError(f"ifft2 imaginary residue {np.abs(y.imag).max():.3e} exceeds {residue_tol:.3e}")
    out_data = np.ascontiguousarray(y.real)
    hw = out_data.shape[-2] * out_data.shape[-1]

    def grad_fn(g):
        gz = np.fft.fft2(g, axes=(-2, -1)) / hw
        re.accumulate_grad(gz.real)
        im.accumulate_grad(gz.imag)

    return _node(out_data, (re, im), grad_fn, "ifft2")


def amp_phase(s: Spectrum, eps: float = 1e-12) -> tuple[Tensor, Tensor]:
    """Amplitude sqrt(re^2+im^2+eps) and phase atan2(im, re), eps-guarded."""
    re, im = s.real, s.imag
    r2 = re.data ** 2 + im.data ** 2
    amp_data = np.sqrt(r2 + eps)
    zero = (re.data == 0) & (im.data == 0)
    phase_data = np.arctan2(im.data, re.data + eps * zero)

    def grad_amp(g):
        re.accumulate_grad(g * re.data / amp_data)
        im.accumulate_grad(g * im.data / amp_data)

    def grad_phase(g):
        denom = np.maximum(r2, eps)
        re.accumulate_grad(g * (-im.data) / denom)
        im.accumulate_grad(g * re.data / denom)

    return (_node(amp_data, (re, im), grad_amp, "amp_phase"),
            _node(phase_data, (re, im), grad_phase, "amp_phase"))


def polar_recombine(amplitude: Tensor, phase: Tensor) -> Spectrum:
    amplitude, phase = _as_tensor(amplitude), _as_tensor(phase)
    if amplitude.data.shape != phase.data.shape:
        raise ValueError(f"polar_recombine: amplitude {amplitude.data.shape} vs phase {phase.data.shape}")
    cos_p, sin_p = np.cos(phase.data), np.sin(phase.data)
    re_data = amplitude.data * cos_p
    im_data = amplitude.data * sin_p

    def grad_re(g):
        amplitude.accumulate_grad(g * cos_p)
        phase.accumulate_grad(g * (-amplitude.data * sin_p))

    def grad_im(g):
        amplitude.accumulate_grad(g * sin_p)
        phase.accumulate_grad(g * amplitude.data * cos_p)

    return Spectrum(real=_node(re_data, (amplitude, phase), grad_re, "polar_recombine"),
                    imag=_node(im_data, (amplitude, phase), grad_im, "polar_recombine"))


# -- resampling and channel plumbing ----------------------------------------


def _bilinear_weights(out_size: int, in_size: int, dtype):
    # half-pixel-center convention; degenerates to identity when sizes match
    src = (np.arange(out_size, dtype=dtype) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0, in_size - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    x = _as_tensor(x)
    n, c, h, w = x.data.shape
    y0, y1, fy = _bilinear_weights(out_h, h, x.data.dtype)
    x0, x1, fx = _bilinear_weights(out_w, w, x.data.dtype)
    fy = fy[:, None]
    fx = fx[None, :]
    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    out_data = (w00 * x.data[:, :, y0[:, None], x0[None, :]]
                + w01 * x.data[:, :, y0[:, None], x1[None, :]]
                + w10 * x.data[:, :, y1[:, None], x0[None, :]]
                + w11 * x.data[:, :, y1[:, None], x1[None, :]])

    def grad_fn(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (slice(None), slice(None), y0[:, None], x0[None, :]), g * w00)
        np.add.at(dx, (slice(None), slice(None), y0[:, None], x1[None, :]), g * w01)
        np.add.at(dx, (slice(None), slice(None), y1[:, None], x0[None, :]), g * w10)
        np.add.at(dx, (slice(None), slice(None), y1[:, None], x1[None, :]), g * w11)
        x.accumulate_grad(dx)

    return _node(out_data, (x,), grad_fn, "resize_bilinear")


def upsample2x(x: Tensor) -> Tensor:
    _, _, h, w = x.data.shape
    return resize_bilinear(x, 2 * h, 2 * w)


def concat(tensors: list[Tensor]) -> Tensor:
    """Concatenate along the channel axis."""
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum([t.data.shape[1] for t in tensors])[:-1]

    def grad_fn(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=1)):
            t.accumulate_grad(piece)

    return _node(out_data, tuple(tensors), grad_fn, "concat")


def chunk2(x: Tensor) -> tuple[Tensor, Tensor]:
    """Split channels into two equal halves, preserving order."""
    x = _as_tensor(x)
    c = x.data.shape[1]
    if c % 2 != 0:
        raise ValueError(f"chunk2 requires an even channel count, got {c}")
    half = c // 2

    def grad_lo(g):
        dx = np.zeros_like(x.data)
        dx[:, :half] = g
        x.accumulate_grad(dx)

    def grad_hi(g):
        dx = np.zeros_like(x.data)
        dx[:, half:] = g
        x.accumulate_grad(dx)

    lo = _node(np.ascontiguousarray(x.data[:, :half]), (x,), grad_lo, "chunk2")
    hi = _node(np.ascontiguousarray(x.data[:, half:]), (x,), grad_hi, "chunk2")
    return lo, hi


# -- backward ---------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Reverse-replay the graph under a scalar; leaves accumulate ``.grad``.

    The traversed graph is released afterwards; a second backward through any
    of its nodes raises.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss._released:
        raise RuntimeError("backward called on a released graph")
    if loss._grad_fn is None and not loss.requires_grad:
        raise RuntimeError("loss does not require gradients; nothing to differentiate")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        if node._released:
            raise RuntimeError("graph contains a released node; rebuild the forward pass")
        stack.append((node, True))
        for p in node._prev:
            if id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._grad_fn is not None and node.grad is not None:
            node._grad_fn(node.grad)
    for node in topo:
        if node._grad_fn is not None:
            node._grad_fn = None
            node._prev = ()
            node._released = True
            node.grad = None
