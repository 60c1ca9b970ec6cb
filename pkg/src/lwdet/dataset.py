"""Annotation formats, PPM images, augmentation with label propagation, splits, letterbox."""

import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, replace

import numpy as np

from ._rng import SplitMix64
from .detect import Box, fixed
from .evaluation import CLASS_NAMES

CLASS_IDS = {name: i for i, name in enumerate(CLASS_NAMES)}
LETTERBOX_FILL = 114


class AnnotationError(ValueError):
    pass


class ImageFormatError(ValueError):
    pass


@dataclass(frozen=True)
class VocObject:
    name: str
    xmin: float
    ymin: float
    xmax: float
    ymax: float


@dataclass(frozen=True)
class ImageAnnotation:
    image_id: str
    width: int
    height: int
    objects: tuple = ()

    def validate(self):
        if self.width <= 0 or self.height <= 0:
            raise AnnotationError(f"{self.image_id}: non-positive image size {self.width}x{self.height}")
        for i, o in enumerate(self.objects):
            if o.name not in CLASS_IDS:
                raise AnnotationError(f"{self.image_id}: object {i} has unknown class {o.name!r}")
            if not (0 <= o.xmin < o.xmax <= self.width and 0 <= o.ymin < o.ymax <= self.height):
                raise AnnotationError(
                    f"{self.image_id}: object {i} box ({o.xmin}, {o.ymin}, {o.xmax}, {o.ymax}) "
                    f"invalid for {self.width}x{self.height}"
                )
        return self


@dataclass(frozen=True)
class YoloLabel:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float


@dataclass(frozen=True)
class Image:
    """8-bit RGB image; ``pixels`` is (height, width, 3) uint8."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.dtype != np.uint8:
            raise ImageFormatError(f"expected (h, w, 3) uint8 pixels, got {px.shape} {px.dtype}")

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def height(self):
        return self.pixels.shape[0]


@dataclass(frozen=True)
class Sample:
    image: Image
    annotation: ImageAnnotation

    @property
    def image_id(self):
        return self.annotation.image_id


def _number(node, tag, where):
    el = node.find(tag)
    if el is None or el.text is None:
        raise AnnotationError(f"{where}: missing <{tag}>")
    try:
        return float(el.text.strip())
    except ValueError:
        raise AnnotationError(f"{where}: <{tag}> is not a number: {el.text!r}") from None


def parse_voc_xml(data, image_id=None):
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise AnnotationError(f"malformed XML: {exc}") from None
    if image_id is None:
        fn = root.findtext("filename")
        image_id = fn.rsplit(".", 1)[0] if fn else "image"
    size = root.find("size")
    if size is None:
        raise AnnotationError(f"{image_id}: missing <size>")
    width = int(_number(size, "width", image_id))
    height = int(_number(size, "height", image_id))
    objects = []
    for i, obj in enumerate(root.findall("object")):
        name = (obj.findtext("name") or "").strip()
        box = obj.find("bndbox")
        where = f"{image_id} object {i}"
        if box is None:
            raise AnnotationError(f"{where}: missing <bndbox>")
        objects.append(
            VocObject(name, *(_number(box, t, where) for t in ("xmin", "ymin", "xmax", "ymax")))
        )
    return ImageAnnotation(image_id, width, height, tuple(objects)).validate()


def _fmt_coord(v):
    return str(int(v)) if float(v).is_integer() else fixed(v)


def to_voc_xml(ann):
    parts = [
        "<annotation>",
        f"  <filename>{ann.image_id}.ppm</filename>",
        f"  <size><width>{ann.width}</width><height>{ann.height}</height><depth>3</depth></size>",
    ]
    for o in ann.objects:
        parts.append(
            f"  <object><name>{o.name}</name><bndbox>"
            f"<xmin>{_fmt_coord(o.xmin)}</xmin><ymin>{_fmt_coord(o.ymin)}</ymin>"
            f"<xmax>{_fmt_coord(o.xmax)}</xmax><ymax>{_fmt_coord(o.ymax)}</ymax>"
            f"</bndbox></object>"
        )
    parts.append("</annotation>")
    return "\n".join(parts) + "\n"


def to_yolo_labels(ann):
    W, H = ann.width, ann.height
    return [
        YoloLabel(
            CLASS_IDS[o.name],
            (o.xmin + o.xmax) / (2 * W),
            (o.ymin + o.ymax) / (2 * H),
            (o.xmax - o.xmin) / W,
            (o.ymax - o.ymin) / H,
        )
        for o in ann.objects
    ]


def to_yolo_txt(ann):
    return "".join(
        f"{lb.class_id} {fixed(lb.cx)} {fixed(lb.cy)} {fixed(lb.w)} {fixed(lb.h)}\n" for lb in to_yolo_labels(ann)
    )


def parse_yolo_txt(text):
    labels = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise AnnotationError(f"label line {lineno}: expected 5 fields, got {len(parts)}")
        cid = int(parts[0])
        if not 0 <= cid < len(CLASS_NAMES):
            raise AnnotationError(f"label line {lineno}: class id {cid} out of range")
        labels.append(YoloLabel(cid, *map(float, parts[1:])))
    return labels


def from_yolo_labels(labels, width, height, image_id="image"):
    objects = []
    for lb in labels:
        x1 = min(max((lb.cx - lb.w / 2) * width, 0.0), width)
        x2 = min(max((lb.cx + lb.w / 2) * width, 0.0), width)
        y1 = min(max((lb.cy - lb.h / 2) * height, 0.0), height)
        y2 = min(max((lb.cy + lb.h / 2) * height, 0.0), height)
        objects.append(VocObject(CLASS_NAMES[lb.class_id], x1, y1, x2, y2))
    return ImageAnnotation(image_id, width, height, tuple(objects))


def from_yolo_txt(text, width, height, image_id="image"):
    return from_yolo_labels(parse_yolo_txt(text), width, height, image_id)


def ground_truths(ann):
    """Evaluation ground truths for an annotation."""
    from .evaluation import GroundTruth

    return [GroundTruth(CLASS_IDS[o.name], Box(o.xmin, o.ymin, o.xmax, o.ymax)) for o in ann.objects]


# -- images ----------------------------------------------------------------


def _ppm_tokens(data, count):
    """Read ``count`` whitespace-separated header tokens; return them and the data offset."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PPM header")
        tokens.append(data[start:pos])
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise ImageFormatError("PPM header must end with a single whitespace byte")
    return tokens, pos + 1


def read_ppm(data):
    data = bytes(data)
    if data[:2] != b"P6":
        raise ImageFormatError("not a binary PPM (P6) file")
    (magic, w, h, maxval), off = _ppm_tokens(data, 4)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise ImageFormatError("non-numeric PPM header field") from None
    if maxval != 255:
        raise ImageFormatError(f"unsupported PPM maxval {maxval}; only 255 is handled")
    need = w * h * 3
    body = data[off : off + need]
    if len(body) < need:
        raise ImageFormatError(f"PPM pixel data is {len(body)} bytes, expected {need}")
    return Image(np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy())


def write_ppm(img):
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(img.pixels, dtype=np.uint8).tobytes()


# -- augmentation ----------------------------------------------------------


def flip_horizontal(img, ann):
    W = ann.width
    objects = tuple(replace(o, xmin=W - o.xmax, xmax=W - o.xmin) for o in ann.objects)
    return Image(img.pixels[:, ::-1].copy()), replace(ann, objects=objects)


def adjust_brightness_contrast(img, alpha, beta):
    """``clamp(round(alpha * p + beta), 0, 255)`` with round-half-up."""
    v = np.floor(alpha * img.pixels.astype(np.float64) + beta + 0.5)
    return Image(np.clip(v, 0, 255).astype(np.uint8))


def expand_dataset(corpus, target_total, seed=0):
    """Append augmented copies of random sources until ``target_total`` items."""
    corpus = list(corpus)
    if target_total < len(corpus):
        raise ValueError(f"target_total {target_total} is below the corpus size {len(corpus)}")
    if not corpus and target_total:
        raise ValueError("cannot expand an empty corpus")
    rng = SplitMix64(seed)
    sources = corpus[:]
    out = corpus[:]
    k = 0
    while len(out) < target_total:
        src = sources[rng.below(len(sources))]
        do_flip = rng.uniform() < 0.5
        do_bc = rng.uniform() < 0.5
        img, ann = src.image, src.annotation
        tag = ""
        if do_bc:
            alpha = 0.8 + 0.4 * rng.uniform()
            beta = -30.0 + 60.0 * rng.uniform()
            img = adjust_brightness_contrast(img, alpha, beta)
            tag += "b"
        if do_flip or not do_bc:
            img, ann = flip_horizontal(img, ann)
            tag = "f" + tag
        new_id = f"{src.image_id}__aug{k:05d}_{tag}"
        out.append(Sample(img, replace(ann, image_id=new_id)))
        k += 1
    return out


def split(corpus, ratio=0.9, seed=0):
    """Fisher-Yates shuffle then cut at ``round(ratio * N)``."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    items = list(corpus)
    rng = SplitMix64(seed)
    for i in range(len(items) - 1, 0, -1):
        j = rng.below(i + 1)
        items[i], items[j] = items[j], items[i]
    n_train = int(math.floor(ratio * len(items) + 0.5))
    return items[:n_train], items[n_train:]


# -- network input ---------------------------------------------------------


def letterbox(img, target=640):
    """Aspect-preserving nearest-neighbor resize onto a gray square canvas.

    Returns ``(tensor, scale, pad_x, pad_y)``; ``pad_x``/``pad_y`` are the
    left/top offsets, the odd extra pixel going right/bottom.
    """
    W, H = img.width, img.height
    scale = min(target / W, target / H)
    nw = min(target, max(1, int(math.floor(W * scale + 0.5))))
    nh = min(target, max(1, int(math.floor(H * scale + 0.5))))
    xs = np.minimum(((np.arange(nw) + 0.5) * W / nw).astype(np.int64), W - 1)
    ys = np.minimum(((np.arange(nh) + 0.5) * H / nh).astype(np.int64), H - 1)
    resized = img.pixels[ys][:, xs]
    pad_x, pad_y = (target - nw) // 2, (target - nh) // 2
    canvas = np.full((target, target, 3), LETTERBOX_FILL, dtype=np.uint8)
    canvas[pad_y : pad_y + nh, pad_x : pad_x + nw] = resized
    tensor = (canvas.transpose(2, 0, 1)[None].astype(np.float32)) / np.float32(255.0)
    return tensor, scale, pad_x, pad_y


def unletterbox_box(box, scale, pad_x, pad_y, width, height):
    """Map a canvas-space box back to source pixels, clipped to the image."""

    def fx(v):
        return min(max((v - pad_x) / scale, 0.0), float(width))

    def fy(v):
        return min(max((v - pad_y) / scale, 0.0), float(height))

    return Box(fx(box.x1), fy(box.y1), fx(box.x2), fy(box.y2))


def synthetic_corpus(count, size=32, seed=0, max_objects=3):
    """Random images with random valid annotations, for tests and demos."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        W, H = (size, size) if isinstance(size, int) else size
        pixels = rng.integers(0, 256, size=(H, W, 3), dtype=np.uint8)
        objs = []
        for _ in range(int(rng.integers(1, max_objects + 1))):
            x1, x2 = sorted(rng.choice(W + 1, size=2, replace=False))
            y1, y2 = sorted(rng.choice(H + 1, size=2, replace=False))
            objs.append(VocObject(CLASS_NAMES[int(rng.integers(0, 4))], int(x1), int(y1), int(x2), int(y2)))
        out.append(Sample(Image(pixels), ImageAnnotation(f"img{i:05d}", W, H, tuple(objs))))
    return out
