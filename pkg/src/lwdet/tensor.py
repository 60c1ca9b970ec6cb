"""NCHW float32 tensor kernels.

Tensors are plain ``numpy.ndarray`` objects of dtype float32 and rank 4.
Every function here is pure: inputs are never written to and results are
fresh arrays.
"""

import contextvars
import struct
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "ConvWeights",
    "as_tensor",
    "conv2d",
    "batchnorm_infer",
    "silu",
    "leaky_relu",
    "sigmoid",
    "relu",
    "maxpool2d",
    "upsample_nearest2x",
    "concat_channels",
    "channel_split",
    "channel_shuffle",
    "global_avg_pool",
    "conv1d_channels",
    "tensor_to_bytes",
    "tensor_from_bytes",
    "save_tensor",
    "load_tensor",
    "flop_counter",
    "record_flops",
]

DTYPE = np.float32
_NTSR_MAGIC = b"NTSR"
_FLOPS = contextvars.ContextVar("lwdet_flops", default=None)


@contextmanager
def flop_counter():
    """Collect FLOPs reported by kernels run inside the block.

    Yields a one-element list holding the running total.
    """
    box = [0]
    token = _FLOPS.set(box)
    try:
        yield box
    finally:
        _FLOPS.reset(token)


def record_flops(n):
    box = _FLOPS.get()
    if box is not None:
        box[0] += int(n)


class ShapeError(ValueError):
    """Raised when tensor dimensions do not fit an operation."""


def as_tensor(x, name="x"):
    """Validate ``x`` as a rank-4 tensor and return it as float32."""
    arr = np.asarray(x)
    if arr.ndim != 4:
        raise ShapeError(f"{name}: expected rank-4 NCHW tensor, got shape {arr.shape}")
    if arr.dtype != DTYPE:
        arr = arr.astype(DTYPE)
    return arr


@dataclass(frozen=True)
class ConvWeights:
    kernel: np.ndarray
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=DTYPE)
        if k.ndim != 4:
            raise ShapeError(f"kernel: expected (c_out, c_in/groups, k_h, k_w), got {k.shape}")
        if self.groups < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(
                f"invalid conv config stride={self.stride} padding={self.padding} groups={self.groups}"
            )
        if k.shape[0] % self.groups:
            raise ShapeError(f"c_out={k.shape[0]} not divisible by groups={self.groups}")
        object.__setattr__(self, "kernel", k)
        if self.bias is not None:
            b = np.asarray(self.bias, dtype=DTYPE).reshape(-1)
            if b.shape[0] != k.shape[0]:
                raise ShapeError(f"bias length {b.shape[0]} != c_out {k.shape[0]}")
            object.__setattr__(self, "bias", b)

    @property
    def c_out(self):
        return self.kernel.shape[0]

    @property
    def c_in(self):
        return self.kernel.shape[1] * self.groups


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _pad(x, pad, value=0.0):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _im2col(xp, kh, kw, stride, oh, ow):
    # (c, H, W) -> (oh*ow, c*kh*kw)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :oh, :ow]
    c = xp.shape[0]
    return win.transpose(1, 2, 0, 3, 4).reshape(oh * ow, c * kh * kw)


def _dense_conv(xp, kernel, stride, oh, ow):
    # xp: (n, c, H, W) padded; kernel: (co, c, kh, kw)
    n = xp.shape[0]
    co, _, kh, kw = kernel.shape
    kmat = kernel.reshape(co, -1)
    out = np.empty((n, co, oh, ow), dtype=DTYPE)
    for i in range(n):
        if kh == 1 and kw == 1:
            src = xp[i, :, ::stride, ::stride][:, :oh, :ow]
            out[i] = (kmat @ src.reshape(src.shape[0], -1)).reshape(co, oh, ow)
        else:
            cols = _im2col(xp[i], kh, kw, stride, oh, ow)
            out[i] = (cols @ kmat.T).T.reshape(co, oh, ow)
    return out


def _depthwise_conv(xp, kernel, stride, oh, ow):
    # one filter per channel: kernel (c, 1, kh, kw)
    _, _, kh, kw = kernel.shape
    n, c = xp.shape[:2]
    out = np.zeros((n, c, oh, ow), dtype=DTYPE)
    for dy in range(kh):
        for dx in range(kw):
            tap = kernel[:, 0, dy, dx].reshape(1, c, 1, 1)
            window = xp[:, :, dy : dy + stride * (oh - 1) + 1 : stride, dx : dx + stride * (ow - 1) + 1 : stride]
            out += window * tap
    return out


def conv2d(x, w: ConvWeights):
    """2-D cross-correlation with zero padding, grouped if ``w.groups > 1``."""
    x = as_tensor(x)
    n, c, h, wd = x.shape
    co, cig, kh, kw = w.kernel.shape
    if c != w.c_in:
        raise ShapeError(
            f"input channels {c} != kernel c_in {cig} x groups {w.groups} = {w.c_in}"
        )
    oh = _out_size(h, kh, w.stride, w.padding)
    ow = _out_size(wd, kw, w.stride, w.padding)
    if oh <= 0 or ow <= 0:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * w.padding}x{wd + 2 * w.padding}"
        )
    xp = _pad(x, w.padding)
    if w.groups == 1:
        out = _dense_conv(xp, w.kernel, w.stride, oh, ow)
    elif cig == 1 and co == w.groups:
        out = _depthwise_conv(xp, w.kernel, w.stride, oh, ow)
    else:
        g = w.groups
        cpg, opg = c // g, co // g
        parts = [
            _dense_conv(xp[:, j * cpg : (j + 1) * cpg], w.kernel[j * opg : (j + 1) * opg], w.stride, oh, ow)
            for j in range(g)
        ]
        out = np.concatenate(parts, axis=1)
    if w.bias is not None:
        out += w.bias.reshape(1, co, 1, 1)
    record_flops(2 * out.size * cig * kh * kw)
    return out


def _channel_vector(v, c, name):
    v = np.asarray(v, dtype=DTYPE).reshape(-1)
    if v.shape[0] != c:
        raise ShapeError(f"{name}: length {v.shape[0]} != channels {c}")
    return v


def batchnorm_infer(x, gamma, beta, mean, var, eps=1e-3):
    """Inference-mode batch norm using fixed running statistics."""
    x = as_tensor(x)
    c = x.shape[1]
    gamma = _channel_vector(gamma, c, "gamma")
    beta = _channel_vector(beta, c, "beta")
    mean = _channel_vector(mean, c, "mean")
    var = _channel_vector(var, c, "var")
    if np.any(var < 0):
        raise ValueError("var must be non-negative")
    scale = gamma / np.sqrt(var + DTYPE(eps))
    shift = beta - mean * scale
    record_flops(2 * x.size)
    return x * scale.reshape(1, c, 1, 1) + shift.reshape(1, c, 1, 1)


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(DTYPE)


def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    record_flops(x.size)
    return _sigmoid(x)


def silu(x):
    x = np.asarray(x, dtype=DTYPE)
    record_flops(x.size)
    return x * _sigmoid(x)


def leaky_relu(x, slope=0.1):
    x = np.asarray(x, dtype=DTYPE)
    record_flops(x.size)
    return np.where(x >= 0, x, x * DTYPE(slope)).astype(DTYPE)


def relu(x):
    x = np.asarray(x, dtype=DTYPE)
    record_flops(x.size)
    return np.maximum(x, DTYPE(0))


def maxpool2d(x, k, stride=None, pad=0):
    """Sliding-window max. Padded cells hold -inf and never win."""
    x = as_tensor(x)
    stride = k if stride is None else stride
    if k < 1 or stride < 1 or pad < 0:
        raise ValueError(f"invalid pool config k={k} stride={stride} pad={pad}")
    h, w = x.shape[2:]
    if k > h + 2 * pad or k > w + 2 * pad:
        raise ShapeError(f"pool window {k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    oh = _out_size(h, k, stride, pad)
    ow = _out_size(w, k, stride, pad)
    xp = _pad(x, pad, value=-np.inf)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    out = win.max(axis=(4, 5))
    record_flops((k * k - 1) * out.size)
    return out


def upsample_nearest2x(x):
    x = as_tensor(x)
    return x.repeat(2, axis=2).repeat(2, axis=3)


def concat_channels(xs):
    xs = [as_tensor(t, f"xs[{i}]") for i, t in enumerate(xs)]
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    n, _, h, w = xs[0].shape
    for i, t in enumerate(xs[1:], 1):
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"xs[{i}] shape {t.shape} incompatible with {xs[0].shape} outside channels")
    return np.concatenate(xs, axis=1)


def channel_split(x, c1):
    x = as_tensor(x)
    c = x.shape[1]
    if not 0 < c1 < c:
        raise ShapeError(f"split point {c1} outside (0, {c})")
    return x[:, :c1].copy(), x[:, c1:].copy()


def channel_shuffle(x, g):
    """Reshape channels to (g, c/g), transpose, flatten."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    if g < 1 or c % g:
        raise ShapeError(f"channels {c} not divisible by groups {g}")
    return x.reshape(n, g, c // g, h, w).transpose(0, 2, 1, 3, 4).reshape(n, c, h, w)


def global_avg_pool(x):
    x = as_tensor(x)
    record_flops(x.size)
    return x.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(DTYPE)


def conv1d_channels(v, kernel):
    """Zero-padded 'same' cross-correlation along the last axis.

    ``v`` is a length-c vector or an (n, c) batch of them; one shared kernel.
    """
    v = np.asarray(v, dtype=DTYPE)
    kernel = np.asarray(kernel, dtype=DTYPE).reshape(-1)
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ValueError(f"kernel length must be odd, got {k}")
    squeeze = v.ndim == 1
    rows = v.reshape(1, -1) if squeeze else v
    half = k // 2
    padded = np.pad(rows, ((0, 0), (half, half)))
    out = np.zeros_like(rows)
    c = rows.shape[1]
    for j in range(k):
        out += kernel[j] * padded[:, j : j + c]
    record_flops(2 * k * rows.size)
    return out[0] if squeeze else out


def tensor_to_bytes(x):
    x = as_tensor(x)
    header = _NTSR_MAGIC + struct.pack("<4I", *x.shape)
    return header + np.ascontiguousarray(x, dtype="<f4").tobytes()


def tensor_from_bytes(buf):
    buf = bytes(buf)
    if len(buf) < 20 or buf[:4] != _NTSR_MAGIC:
        raise ValueError("not an NTSR tensor file")
    dims = struct.unpack("<4I", buf[4:20])
    count = int(np.prod(dims, dtype=np.int64))
    body = buf[20:]
    if len(body) != 4 * count:
        raise ValueError(f"NTSR payload is {len(body)} bytes, expected {4 * count} for dims {dims}")
    return np.frombuffer(body, dtype="<f4").astype(DTYPE).reshape(dims)


def save_tensor(x, path):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(x))


def load_tensor(path):
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
