"""Named architectural units built from the tensor kernels.

Each block class knows the weights it needs (``param_shapes``) and applies
itself given a mapping from relative weight names to arrays. Sub-blocks
read through a prefixed view, so a block can be driven by a model's full
weight manifest or by a small standalone dict.
"""

import math
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ConvWeights, ShapeError

FUSION_EPS = 1e-4
BN_EPS = 1e-3


class Prefixed(Mapping):
    """Read-only view of ``base`` restricted to keys under ``prefix.``."""

    def __init__(self, base, prefix):
        self._base = base
        self._prefix = prefix + "." if prefix else ""

    def __getitem__(self, key):
        return self._base[self._prefix + key]

    def __iter__(self):
        n = len(self._prefix)
        return (k[n:] for k in self._base if k.startswith(self._prefix))

    def __len__(self):
        return sum(1 for _ in self)


def sub(weights, prefix):
    return Prefixed(weights, prefix)


def _prefixed(prefix, shapes):
    return {f"{prefix}.{k}": v for k, v in shapes.items()}


@dataclass(frozen=True)
class ConvBnAct:
    """conv2d -> batch norm -> optional SiLU. Convs here carry no bias."""

    c_in: int
    c_out: int
    k: int = 1
    stride: int = 1
    groups: int = 1
    act: bool = True

    def __post_init__(self):
        if self.c_in % self.groups or self.c_out % self.groups:
            raise ShapeError(f"channels {self.c_in}->{self.c_out} not divisible by groups {self.groups}")

    @property
    def padding(self):
        return self.k // 2

    def param_shapes(self):
        c = self.c_out
        return {
            "conv.weight": (c, self.c_in // self.groups, self.k, self.k),
            "bn.weight": (c,),
            "bn.bias": (c,),
            "bn.running_mean": (c,),
            "bn.running_var": (c,),
        }

    def __call__(self, x, w):
        y = T.conv2d(x, ConvWeights(w["conv.weight"], None, self.stride, self.padding, self.groups))
        y = T.batchnorm_infer(
            y, w["bn.weight"], w["bn.bias"], w["bn.running_mean"], w["bn.running_var"], BN_EPS
        )
        return T.silu(y) if self.act else y


def conv_bn_act(x, weights, k, stride, act=True):
    kernel = np.asarray(weights["conv.weight"])
    block = ConvBnAct(kernel.shape[1], kernel.shape[0], k, stride, act=act)
    return block(x, weights)


@dataclass(frozen=True)
class StemBlock:
    """3x3/2 conv, then a strided-conv branch and a max-pool branch, fused by 1x1."""

    c_in: int = 3
    c_out: int = 24
    c_mid: int = 12

    def _parts(self):
        return {
            "conv1": ConvBnAct(self.c_in, self.c_out, 3, 2),
            "branch_a1": ConvBnAct(self.c_out, self.c_mid, 1, 1),
            "branch_a2": ConvBnAct(self.c_mid, self.c_out, 3, 2),
            "fuse": ConvBnAct(2 * self.c_out, self.c_out, 1, 1),
        }

    def param_shapes(self):
        out = {}
        for name, part in self._parts().items():
            out.update(_prefixed(name, part.param_shapes()))
        return out

    def __call__(self, x, w):
        x = T.as_tensor(x)
        if x.shape[1] != self.c_in:
            raise ShapeError(f"stem expects {self.c_in} input channels, got {x.shape[1]}")
        h, wd = x.shape[2:]
        if h % 4 or wd % 4:
            raise ShapeError(f"stem needs spatial dims divisible by 4, got {h}x{wd}")
        p = self._parts()
        y = p["conv1"](x, sub(w, "conv1"))
        a = p["branch_a2"](p["branch_a1"](y, sub(w, "branch_a1")), sub(w, "branch_a2"))
        b = T.maxpool2d(y, 2, 2, 0)
        return p["fuse"](T.concat_channels([a, b]), sub(w, "fuse"))


def stem_block(x, weights):
    return StemBlock()(x, weights)


@dataclass(frozen=True)
class ShuffleUnitS1:
    """Stride-1 unit: split halves, transform the right one, concat, shuffle."""

    c: int

    def __post_init__(self):
        if self.c % 2:
            raise ShapeError(f"s1 unit needs an even channel count, got {self.c}")

    def _parts(self):
        h = self.c // 2
        return {
            "pw1": ConvBnAct(h, h, 1, 1),
            "dw": ConvBnAct(h, h, 3, 1, groups=h, act=False),
            "pw2": ConvBnAct(h, h, 1, 1),
        }

    def param_shapes(self):
        out = {}
        for name, part in self._parts().items():
            out.update(_prefixed(name, part.param_shapes()))
        return out

    def __call__(self, x, w):
        x = T.as_tensor(x)
        if x.shape[1] != self.c:
            raise ShapeError(f"s1 unit configured for {self.c} channels, got {x.shape[1]}")
        left, right = T.channel_split(x, self.c // 2)
        p = self._parts()
        for name in ("pw1", "dw", "pw2"):
            right = p[name](right, sub(w, name))
        return T.channel_shuffle(T.concat_channels([left, right]), 2)


def shuffle_unit_s1(x, weights):
    return ShuffleUnitS1(np.asarray(x).shape[1])(x, weights)


@dataclass(frozen=True)
class ShuffleUnitS2:
    """Stride-2 unit: both branches downsample with a depthwise 3x3/2."""

    c_in: int
    c_out: int

    def __post_init__(self):
        if self.c_out % 2:
            raise ShapeError(f"s2 unit needs an even c_out, got {self.c_out}")

    def _parts(self):
        h = self.c_out // 2
        return {
            "left_dw": ConvBnAct(self.c_in, self.c_in, 3, 2, groups=self.c_in, act=False),
            "left_pw": ConvBnAct(self.c_in, h, 1, 1),
            "right_pw1": ConvBnAct(self.c_in, h, 1, 1),
            "right_dw": ConvBnAct(h, h, 3, 2, groups=h, act=False),
            "right_pw2": ConvBnAct(h, h, 1, 1),
        }

    def param_shapes(self):
        out = {}
        for name, part in self._parts().items():
            out.update(_prefixed(name, part.param_shapes()))
        return out

    def __call__(self, x, w):
        x = T.as_tensor(x)
        if x.shape[1] != self.c_in:
            raise ShapeError(f"s2 unit configured for {self.c_in} channels, got {x.shape[1]}")
        if min(x.shape[2:]) < 1:
            raise ShapeError(f"s2 unit got empty spatial input {x.shape}")
        p = self._parts()
        left = p["left_pw"](p["left_dw"](x, sub(w, "left_dw")), sub(w, "left_pw"))
        right = x
        for name in ("right_pw1", "right_dw", "right_pw2"):
            right = p[name](right, sub(w, name))
        return T.channel_shuffle(T.concat_channels([left, right]), 2)


def shuffle_unit_s2(x, weights, c_out):
    return ShuffleUnitS2(np.asarray(x).shape[1], c_out)(x, weights)


@dataclass(frozen=True)
class SPPF:
    """Three chained k x k stride-1 max pools between two 1x1 convs."""

    c: int
    k: int = 5

    def __post_init__(self):
        if self.k % 2 == 0:
            raise ValueError(f"SPPF pool size must be odd, got {self.k}")
        if self.c % 2:
            raise ShapeError(f"SPPF needs an even channel count, got {self.c}")

    def _parts(self):
        h = self.c // 2
        return {"cv1": ConvBnAct(self.c, h, 1, 1), "cv2": ConvBnAct(4 * h, self.c, 1, 1)}

    def param_shapes(self):
        out = {}
        for name, part in self._parts().items():
            out.update(_prefixed(name, part.param_shapes()))
        return out

    def pyramid(self, x, w):
        """Return the reduced map and its three cascaded pools."""
        x0 = self._parts()["cv1"](x, sub(w, "cv1"))
        pools = [x0]
        for _ in range(3):
            pools.append(T.maxpool2d(pools[-1], self.k, 1, self.k // 2))
        return pools

    def __call__(self, x, w):
        return self._parts()["cv2"](T.concat_channels(self.pyramid(x, w)), sub(w, "cv2"))


def sppf(x, weights, k=5):
    return SPPF(np.asarray(x).shape[1], k)(x, weights)


def eca_kernel_size(c, gamma=2, b=1):
    """Adaptive odd 1-D kernel size for ``c`` channels."""
    t = abs(math.log2(c) / gamma + b / gamma)
    k = int(math.floor(t + 0.5))
    if k % 2 == 0:
        k += 1
    return max(k, 1)


@dataclass(frozen=True)
class EcaParams:
    kernel: np.ndarray
    gamma: int = 2
    b: int = 1

    def __post_init__(self):
        k = np.asarray(self.kernel, dtype=np.float32).reshape(-1)
        if k.shape[0] < 1 or k.shape[0] % 2 == 0:
            raise ValueError(f"ECA kernel length must be odd and >= 1, got {k.shape[0]}")
        object.__setattr__(self, "kernel", k)


def eca(x, params):
    x = T.as_tensor(x)
    n, c = x.shape[:2]
    s = T.global_avg_pool(x).reshape(n, c)
    a = T.sigmoid(T.conv1d_channels(s, params.kernel))
    T.record_flops(x.size)
    return x * a.reshape(n, c, 1, 1)


@dataclass(frozen=True)
class ECA:
    c: int

    @property
    def k(self):
        return eca_kernel_size(self.c)

    def param_shapes(self):
        return {"weight": (self.k,)}

    def __call__(self, x, w):
        return eca(x, EcaParams(w["weight"]))


def fusion_coefficients(w, eps=FUSION_EPS):
    """Fast-normalized fusion weights: max(w, 0) / (sum + eps), in float64."""
    u = np.maximum(np.asarray(w, dtype=np.float64).reshape(-1), 0.0)
    denom = u.sum() + eps
    if denom == 0.0:
        return np.zeros_like(u)
    return u / denom


def weighted_sum(inputs, coefficients):
    inputs = [T.as_tensor(t, f"inputs[{i}]") for i, t in enumerate(inputs)]
    if len(inputs) != len(coefficients):
        raise ShapeError(f"{len(inputs)} inputs but {len(coefficients)} coefficients")
    shape = inputs[0].shape
    for i, t in enumerate(inputs[1:], 1):
        if t.shape != shape:
            raise ShapeError(f"fusion input {i} has shape {t.shape}, expected {shape}")
    out = np.zeros(shape, dtype=T.DTYPE)
    for coef, t in zip(coefficients, inputs):
        out += T.DTYPE(coef) * t
    T.record_flops((2 * len(inputs) - 1) * out.size)
    return out


@dataclass(frozen=True)
class FusionNode:
    """Weighted fusion of ``input_count`` same-shape maps followed by a 3x3 ConvBnAct."""

    input_count: int
    c: int
    eps: float = FUSION_EPS

    def __post_init__(self):
        if self.input_count < 2:
            raise ValueError(f"fusion node needs >= 2 inputs, got {self.input_count}")
        if not self.eps > 0:
            raise ValueError("fusion epsilon must be positive")

    def _post(self):
        return ConvBnAct(self.c, self.c, 3, 1)

    def param_shapes(self):
        shapes = {"w": (self.input_count,)}
        shapes.update(_prefixed("post", self._post().param_shapes()))
        return shapes

    def coefficients(self, w):
        raw = np.asarray(w["w"])
        if raw.shape != (self.input_count,):
            raise ShapeError(f"fusion weights shape {raw.shape}, expected ({self.input_count},)")
        return fusion_coefficients(raw, self.eps)

    def __call__(self, inputs, w):
        if len(inputs) != self.input_count:
            raise ShapeError(f"fusion node expects {self.input_count} inputs, got {len(inputs)}")
        fused = weighted_sum(inputs, self.coefficients(w))
        return self._post()(fused, sub(w, "post"))


def fast_fusion(inputs, node, weights):
    return node(inputs, weights)


@dataclass(frozen=True)
class DetectHead:
    """1x1 conv with bias to raw per-anchor predictions; no activation."""

    c_in: int
    c_out: int

    def param_shapes(self):
        return {"weight": (self.c_out, self.c_in, 1, 1), "bias": (self.c_out,)}

    def __call__(self, x, w):
        return T.conv2d(x, ConvWeights(w["weight"], w["bias"]))
