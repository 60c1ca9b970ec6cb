"""scikit-learn style front end for the detector.

``fit`` only materializes weights (from a file or a seeded initializer);
there is no training loop. ``predict`` runs letterbox -> forward -> decode
-> NMS -> back-projection per image.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .dataset import Image, letterbox, unletterbox_box
from .detect import DEFAULT_CONF, DEFAULT_NMS_IOU, Detection, decode, nms
from .evaluation import EVAL_IOU, evaluate
from .model import ModelSpec, build_model, forward, init_weights, load_weights


def check_threshold(value, name):
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {value}")
    return value


def check_image(img):
    """Accept an :class:`Image` or an (h, w, 3) uint8 array."""
    if isinstance(img, Image):
        return img
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an (h, w, 3) image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating) or arr.min() < 0 or arr.max() > 255:
            raise ValueError(f"image pixels must be uint8 in [0, 255], got dtype {arr.dtype}")
        arr = arr.astype(np.uint8)
    return Image(arr)


def check_images(X):
    if isinstance(X, (Image, np.ndarray)) and not (isinstance(X, np.ndarray) and X.ndim == 4):
        X = [X]
    return [check_image(x) for x in X]


def detect_image(model, img, conf_thresh=DEFAULT_CONF, iou_thresh=DEFAULT_NMS_IOU):
    """Full single-image inference in source pixel coordinates."""
    img = check_image(img)
    size = model.spec.input_size
    x, scale, pad_x, pad_y = letterbox(img, size)
    raws = forward(model, x)
    dets = []
    for raw, anchors, stride in zip(raws, model.spec.anchors, model.spec.strides):
        dets += decode(raw, anchors, stride, conf_thresh, image_size=(size, size))
    dets = nms(dets, iou_thresh)
    out = []
    for d in dets:
        box = unletterbox_box(d.box, scale, pad_x, pad_y, img.width, img.height)
        out.append(Detection(box, d.class_id, d.score))
    return out


class LetterboxTransformer(TransformerMixin, BaseEstimator):
    """Images -> (n, 3, S, S) float32 network input batch."""

    def __init__(self, input_size=640):
        self.input_size = input_size

    def fit(self, X=None, y=None):
        if self.input_size <= 0 or self.input_size % 32:
            raise ValueError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        imgs = check_images(X)
        return np.concatenate([letterbox(im, self.input_size)[0] for im in imgs], axis=0)


class WoodDefectDetector(BaseEstimator):
    """Lightweight single-shot defect detector.

    Parameters
    ----------
    input_size : int
        Square network input side, a multiple of 32.
    n_classes : int
        Number of defect classes.
    conf_thresh, nms_iou : float
        Inference score cutoff and NMS overlap threshold.
    eval_iou : float
        Matching threshold used by :meth:`score`.
    weights : str or None
        Path to an NWTS weight file; when None, weights come from ``seed``.
    seed : int
        Initialization seed.
    """

    def __init__(self, input_size=640, n_classes=4, conf_thresh=DEFAULT_CONF, nms_iou=DEFAULT_NMS_IOU,
                 eval_iou=EVAL_IOU, weights=None, seed=0):
        self.input_size = input_size
        self.n_classes = n_classes
        self.conf_thresh = conf_thresh
        self.nms_iou = nms_iou
        self.eval_iou = eval_iou
        self.weights = weights
        self.seed = seed

    def fit(self, X=None, y=None):
        for name in ("conf_thresh", "nms_iou", "eval_iou"):
            check_threshold(getattr(self, name), name)
        spec = ModelSpec(input_size=self.input_size, nc=self.n_classes)
        if self.weights is not None:
            self.model_ = load_weights(spec, self.weights)
        else:
            self.model_ = init_weights(build_model(spec), self.seed)
        return self

    def predict(self, X):
        """One list of :class:`Detection` per input image."""
        check_is_fitted(self, "model_")
        return [detect_image(self.model_, im, self.conf_thresh, self.nms_iou) for im in check_images(X)]

    def score(self, X, y):
        """mAP of ``predict(X)`` against per-image ground-truth lists ``y``."""
        report = evaluate(self.predict(X), y, nc=self.n_classes, iou_thresh=self.eval_iou)
        return report.map
