"""Detector graph: ShuffleNetV2 + stem + SPPF + ECA backbone, MBiFPN neck, heads.

A :class:`Model` is a :class:`ModelSpec` plus a flat, ordered manifest of
named weight arrays. The graph is described once by :func:`_graph`; both
the manifest and the forward pass are derived from it, so names and
shapes cannot drift apart.
"""

import math
import struct
from collections import Counter
from collections.abc import Mapping
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from ._rng import fnv1a64, uniform_block
from .blocks import (
    ECA,
    SPPF,
    ConvBnAct,
    DetectHead,
    FusionNode,
    ShuffleUnitS1,
    ShuffleUnitS2,
    StemBlock,
    sub,
)
from .tensor import ShapeError

REFERENCE_PARAMS_M = 5.07
REFERENCE_FLOPS_G = 9.4

DEFAULT_ANCHORS = (
    ((10, 13), (16, 30), (33, 23)),
    ((30, 61), (62, 45), (59, 119)),
    ((116, 90), (156, 198), (373, 326)),
)

_WEIGHT_MAGIC = b"NWTS"
_WEIGHT_VERSION = 1
_RUNNING = ("running_mean", "running_var")


class WeightFileError(ValueError):
    """Weight file is malformed or does not match the model spec."""


@dataclass(frozen=True)
class ModelSpec:
    input_size: int = 640
    nc: int = 4
    stem_width: int = 24
    stem_mid: int = 12
    stage_widths: tuple = (116, 232, 464)
    stage_repeats: tuple = (3, 7, 3)
    neck_width: int = 128
    anchors: tuple = DEFAULT_ANCHORS
    strides: tuple = (8, 16, 32)
    eca_levels: tuple = ("p5",)
    same_level_skip: bool = True
    sppf_k: int = 5

    @property
    def head_channels(self):
        return 3 * (5 + self.nc)

    def grids(self, input_size=None):
        s = self.input_size if input_size is None else input_size
        return tuple(s // st for st in self.strides)

    def validate(self):
        if self.nc < 1:
            raise ValueError(f"nc must be >= 1, got {self.nc}")
        if self.input_size <= 0 or self.input_size % 32:
            raise ValueError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if len(self.stage_widths) != 3 or len(self.stage_repeats) != 3:
            raise ValueError("stage plan must have exactly three stages")
        if tuple(self.strides) != (8, 16, 32):
            raise ValueError(f"strides must be (8, 16, 32), got {self.strides}")
        if len(self.anchors) != 3:
            raise ValueError("anchor table needs exactly three levels")
        for lvl, triple in enumerate(self.anchors):
            if len(triple) != 3:
                raise ValueError(f"anchor level {lvl} needs exactly 3 anchors")
            for aw, ah in triple:
                if not (aw > 0 and ah > 0):
                    raise ValueError(f"anchor level {lvl} has non-positive size ({aw}, {ah})")
        for lvl in self.eca_levels:
            if lvl not in ("p3", "p4", "p5"):
                raise ValueError(f"unknown ECA level {lvl!r}")
        return self


@dataclass
class Model:
    spec: ModelSpec
    weights: dict = field(default_factory=dict)

    def __post_init__(self):
        self.graph = _graph(self.spec)
        self.manifest = _manifest(self.graph)

    def params(self):
        missing = [n for n in self.manifest if n not in self.weights]
        if missing:
            raise KeyError(f"model weights not initialized; first missing tensor: {missing[0]}")
        return self.weights


def _graph(spec):
    """Ordered (name, block) pairs for every weighted unit in the network."""
    spec.validate()
    nodes = [("backbone.stem", StemBlock(3, spec.stem_width, spec.stem_mid))]
    c = spec.stem_width
    for si, (width, reps) in enumerate(zip(spec.stage_widths, spec.stage_repeats), start=2):
        name = f"backbone.stage{si}"
        try:
            nodes.append((f"{name}.0", ShuffleUnitS2(c, width)))
            nodes += [(f"{name}.{i}", ShuffleUnitS1(width)) for i in range(1, reps + 1)]
        except ShapeError as exc:
            raise ShapeError(f"{name}: {exc}") from None
        c = width
    c3, c4, c5 = spec.stage_widths
    try:
        nodes.append(("backbone.sppf", SPPF(c5, spec.sppf_k)))
    except (ShapeError, ValueError) as exc:
        raise ShapeError(f"backbone.sppf: {exc}") from None
    for lvl, ch in zip(("p3", "p4", "p5"), (c3, c4, c5)):
        if lvl in spec.eca_levels:
            nodes.append((f"backbone.eca_{lvl}", ECA(ch)))
    wn = spec.neck_width
    nodes += [
        ("neck.proj3", ConvBnAct(c3, wn, 1, 1)),
        ("neck.proj4", ConvBnAct(c4, wn, 1, 1)),
        ("neck.proj5", ConvBnAct(c5, wn, 1, 1)),
        ("neck.td4", FusionNode(2, wn)),
        ("neck.out3", FusionNode(2, wn)),
        ("neck.down3", ConvBnAct(wn, wn, 3, 2)),
        ("neck.out4", FusionNode(3 if spec.same_level_skip else 2, wn)),
        ("neck.down4", ConvBnAct(wn, wn, 3, 2)),
        ("neck.out5", FusionNode(2, wn)),
    ]
    nodes += [(f"head.p{lvl}", DetectHead(wn, spec.head_channels)) for lvl in (3, 4, 5)]
    return dict(nodes)


def _manifest(graph):
    out = {}
    for prefix, block in graph.items():
        for name, shape in block.param_shapes().items():
            out[f"{prefix}.{name}"] = tuple(shape)
    return out


def build_model(spec=None):
    return Model(spec if spec is not None else ModelSpec())


def _is_running(name):
    return name.rsplit(".", 1)[-1] in _RUNNING


def _init_value(name, shape, seed):
    leaf = name.rsplit(".", 1)[-1]
    parent = name.rsplit(".", 2)[-2] if name.count(".") >= 1 else ""
    if leaf == "w":
        return np.ones(shape, dtype=T.DTYPE)
    if parent == "bn":
        fill = 1.0 if leaf in ("weight", "running_var") else 0.0
        return np.full(shape, fill, dtype=T.DTYPE)
    if leaf == "bias":
        return np.zeros(shape, dtype=T.DTYPE)
    count = int(np.prod(shape))
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
    bound = math.sqrt(1.0 / fan_in)
    u = uniform_block((seed + fnv1a64(name)) & ((1 << 64) - 1), count)
    return (bound * (2.0 * u - 1.0)).astype(T.DTYPE).reshape(shape)


def init_weights(m, seed=0):
    """Deterministic initialization; returns a new Model."""
    seed = int(seed)
    if not 0 <= seed < 1 << 64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    weights = {name: _init_value(name, shape, seed) for name, shape in m.manifest.items()}
    return Model(m.spec, weights)


class _Tracker(Mapping):
    def __init__(self, weights):
        self._w = weights
        self.hits = Counter()

    def __getitem__(self, key):
        value = self._w[key]
        self.hits[key] += 1
        return value

    def __iter__(self):
        return iter(self._w)

    def __len__(self):
        return len(self._w)


def _check_input(x):
    x = T.as_tensor(x)
    n, c, h, w = x.shape
    if c != 3:
        raise ShapeError(f"model input needs 3 channels, got {c}")
    if h % 32 or w % 32 or h == 0 or w == 0:
        raise ShapeError(f"model input spatial dims must be positive multiples of 32, got {h}x{w}")
    return x


def _run_backbone(graph, spec, w, x):
    y = graph["backbone.stem"](x, sub(w, "backbone.stem"))
    feats = []
    for si, reps in zip((2, 3, 4), spec.stage_repeats):
        for i in range(reps + 1):
            name = f"backbone.stage{si}.{i}"
            y = graph[name](y, sub(w, name))
        feats.append(y)
    p3, p4, p5 = feats
    p5 = graph["backbone.sppf"](p5, sub(w, "backbone.sppf"))
    levels = {"p3": p3, "p4": p4, "p5": p5}
    for lvl in ("p3", "p4", "p5"):
        name = f"backbone.eca_{lvl}"
        if name in graph:
            levels[lvl] = graph[name](levels[lvl], sub(w, name))
    return levels["p3"], levels["p4"], levels["p5"]


def _run_neck(graph, spec, w, p3, p4, p5):
    p3, p4, p5 = (T.as_tensor(t, n) for t, n in ((p3, "P3"), (p4, "P4"), (p5, "P5")))
    h3, w3 = p3.shape[2:]
    if p4.shape[2:] != (h3 // 2, w3 // 2) or p5.shape[2:] != (h3 // 4, w3 // 4) or h3 % 4 or w3 % 4:
        raise ShapeError(
            f"pyramid is not a factor-2 ladder: {p3.shape[2:]}, {p4.shape[2:]}, {p5.shape[2:]}"
        )

    def call(name, *args):
        return graph[name](*args, sub(w, name))

    q3 = call("neck.proj3", p3)
    q4 = call("neck.proj4", p4)
    q5 = call("neck.proj5", p5)
    td4 = call("neck.td4", [q4, T.upsample_nearest2x(q5)])
    n3 = call("neck.out3", [q3, T.upsample_nearest2x(td4)])
    d3 = call("neck.down3", n3)
    if spec.same_level_skip:
        n4 = call("neck.out4", [q4, td4, d3])
    else:
        n4 = call("neck.out4", [td4, d3])
    n5 = call("neck.out5", [q5, call("neck.down4", n4)])
    return n3, n4, n5


def _run_heads(graph, w, n3, n4, n5):
    return tuple(graph[f"head.p{lvl}"](t, sub(w, f"head.p{lvl}")) for lvl, t in zip((3, 4, 5), (n3, n4, n5)))


def backbone_forward(m, x):
    return _run_backbone(m.graph, m.spec, m.params(), _check_input(x))


def mbifpn_forward(m, p3, p4, p5):
    return _run_neck(m.graph, m.spec, m.params(), p3, p4, p5)


def head_forward(m, n3, n4, n5):
    return _run_heads(m.graph, m.params(), n3, n4, n5)


def _forward(m, x, w):
    x = _check_input(x)
    p = _run_backbone(m.graph, m.spec, w, x)
    n = _run_neck(m.graph, m.spec, w, *p)
    return _run_heads(m.graph, w, *n)


def forward(m, x):
    """Raw head outputs (R3, R4, R5) for an (n, 3, S, S) batch."""
    return _forward(m, x, m.params())


def weight_usage(m, x):
    """Run one forward pass and return how often each weight was read."""
    tracker = _Tracker(m.params())
    _forward(m, x, tracker)
    return tracker.hits


def _shape_items(m):
    if isinstance(m, Model):
        return m.manifest.items()
    return ((k, np.shape(v) if not isinstance(v, tuple) else v) for k, v in m.items())


def count_params(m, include_running=False):
    """Trainable element count; BN running statistics only with ``include_running``."""
    total = 0
    for name, shape in _shape_items(m):
        if include_running or not _is_running(name):
            total += int(np.prod(shape, dtype=np.int64))
    return total


def count_running_stats(m):
    return sum(int(np.prod(s, dtype=np.int64)) for n, s in _shape_items(m) if _is_running(n))


def count_flops(m, input_shape=None):
    """FLOPs of one forward pass (2 x MACs for convs)."""
    if input_shape is None:
        input_shape = (1, 3, m.spec.input_size, m.spec.input_size)
    if len(input_shape) == 2:
        input_shape = (1, 3, *input_shape)
    weights = m.weights if m.weights else init_weights(m, 0).weights
    with T.flop_counter() as box:
        _forward(m, np.zeros(input_shape, dtype=T.DTYPE), weights)
    return box[0]


def weights_to_bytes(m):
    w = m.params()
    chunks = [_WEIGHT_MAGIC, struct.pack("<II", _WEIGHT_VERSION, len(m.manifest))]
    for name, shape in m.manifest.items():
        arr = np.asarray(w[name], dtype=T.DTYPE)
        if arr.shape != shape:
            raise WeightFileError(f"{name}: shape {arr.shape} != manifest {shape}")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def _read_entries(buf):
    view = memoryview(buf)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise WeightFileError(f"truncated weight file while reading {what}")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4, "magic")) != _WEIGHT_MAGIC:
        raise WeightFileError("not an NWTS weight file")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != _WEIGHT_VERSION:
        raise WeightFileError(f"unsupported weight file version {version}")
    entries = {}
    try:
        for i in range(count):
            _read_one(take, i, entries)
    except (UnicodeDecodeError, struct.error, ValueError) as exc:
        if isinstance(exc, WeightFileError):
            raise
        raise WeightFileError(f"corrupt weight file: {exc}") from None
    if pos != len(view):
        raise WeightFileError(f"{len(view) - pos} trailing bytes after {count} tensors")
    return entries


def _read_one(take, i, entries):
    (nlen,) = struct.unpack("<H", take(2, f"name length of tensor {i}"))
    name = bytes(take(nlen, f"name of tensor {i}")).decode("utf-8")
    (rank,) = struct.unpack("<B", take(1, f"rank of {name}"))
    dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
    size = int(np.prod(dims, dtype=np.int64))
    data = np.frombuffer(take(4 * size, f"data of {name}"), dtype="<f4")
    if name in entries:
        raise WeightFileError(f"duplicate tensor {name}")
    entries[name] = data.astype(T.DTYPE).reshape(dims)


def weights_from_bytes(spec, buf):
    entries = _read_entries(bytes(buf))
    m = build_model(spec)
    for name, shape in m.manifest.items():
        if name not in entries:
            raise WeightFileError(f"missing tensor {name}")
        if entries[name].shape != shape:
            raise WeightFileError(f"{name}: file shape {entries[name].shape} != expected {shape}")
    extra = [n for n in entries if n not in m.manifest]
    if extra:
        raise WeightFileError(f"unexpected tensor {extra[0]}")
    return Model(m.spec, {n: entries[n] for n in m.manifest})


def save_weights(m, path):
    with open(path, "wb") as fh:
        fh.write(weights_to_bytes(m))


def load_weights(spec, path):
    with open(path, "rb") as fh:
        return weights_from_bytes(spec, fh.read())


def with_weights(m, updates):
    """Copy of ``m`` with selected tensors replaced."""
    w = dict(m.params())
    for name, value in updates.items():
        if name not in m.manifest:
            raise KeyError(name)
        w[name] = np.asarray(value, dtype=T.DTYPE).reshape(m.manifest[name])
    return Model(replace(m.spec), w)
