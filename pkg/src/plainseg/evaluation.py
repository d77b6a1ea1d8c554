"""Semantic inference from mask-classification outputs, sliding windows, mIoU, timing."""
from __future__ import annotations

import platform
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .ops import interp_matrix, sigmoid_np

IGNORE_INDEX = 255


def _softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def semantic_scores(class_logits: np.ndarray, mask_logits: np.ndarray, size: tuple | None = None) -> np.ndarray:
    """score[c, x] = sum_q softmax(class)_q[c] * sigmoid(mask)_q[x] over real classes.

    class_logits [B, Q, K+1], mask_logits [B, Q, h, w]. Mask logits are resized
    bilinearly to ``size`` before the sigmoid. Returns [B, K, H, W].
    """
    cls = np.asarray(class_logits, dtype=np.float64)
    masks = np.asarray(mask_logits, dtype=np.float64)
    if cls.ndim == 2:
        cls, masks = cls[None], masks[None]
    h, w = masks.shape[-2:]
    if size is not None and tuple(size) != (h, w):
        masks = interp_matrix(h, size[0]) @ masks @ interp_matrix(w, size[1]).T
    probs = _softmax(cls, -1)[..., :-1]
    return np.einsum("bqc,bqhw->bchw", probs, sigmoid_np(masks))


def semantic_inference(class_logits, mask_logits, size: tuple | None = None) -> np.ndarray:
    """Label map(s) by argmax over :func:`semantic_scores`."""
    scores = semantic_scores(class_logits, mask_logits, size)
    labels = scores.argmax(axis=1)
    return labels[0] if np.ndim(class_logits) == 2 else labels


def _window_starts(n: int, crop: int, stride: int) -> list[int]:
    if n <= crop:
        return [0]
    starts = list(range(0, n - crop + 1, stride))
    if starts[-1] + crop < n:
        starts.append(n - crop)
    return starts


def sliding_window_inference(score_fn: Callable[[np.ndarray], np.ndarray], image: np.ndarray,
                             crop: int, stride: int, num_classes: int | None = None) -> np.ndarray:
    """Average per-window class scores over overlapping crops.

    ``score_fn`` maps [B, C, h, w] crops to [B, K, h, w] scores. When the crop
    covers the image the whole image is scored in one call. The last window on
    each axis is shifted to end at the border.
    """
    if stride > crop or stride <= 0:
        raise ValueError(f"stride must be in (0, crop], got stride={stride}, crop={crop}")
    squeeze = image.ndim == 3
    img = image[None] if squeeze else image
    B, _, H, W = img.shape
    if crop >= H and crop >= W:
        out = score_fn(img)
        return out[0] if squeeze else out
    acc = None
    count = np.zeros((H, W), dtype=np.float64)
    for y in _window_starts(H, crop, stride):
        for x in _window_starts(W, crop, stride):
            win = img[:, :, y : y + crop, x : x + crop]
            s = score_fn(win)
            if acc is None:
                acc = np.zeros((B, s.shape[1], H, W), dtype=np.float64)
            acc[:, :, y : y + win.shape[2], x : x + win.shape[3]] += s
            count[y : y + win.shape[2], x : x + win.shape[3]] += 1
    out = acc / count
    return out[0] if squeeze else out


@dataclass
class ConfusionMatrix:
    """Rows = ground truth, columns = prediction."""

    num_classes: int
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)

    def update(self, gt: np.ndarray, pred: np.ndarray, ignore_index: int = IGNORE_INDEX) -> "ConfusionMatrix":
        gt = np.asarray(gt).reshape(-1).astype(np.int64)
        pred = np.asarray(pred).reshape(-1).astype(np.int64)
        keep = gt != ignore_index
        K = self.num_classes
        self.counts += np.bincount(gt[keep] * K + pred[keep], minlength=K * K).reshape(K, K)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def miou(conf: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN where a class is absent from GT and prediction) and their mean."""
    c = conf.counts.astype(np.float64)
    if c.sum() == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(c)
    denom = c.sum(0) + c.sum(1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(denom > 0, tp / denom, np.nan)
    return iou, float(np.nanmean(iou))


def benchmark(fn: Callable[[], object], warmup: int = 2, repeats: int = 10) -> dict:
    """Median wall time of ``fn`` in milliseconds after ``warmup`` untimed calls."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return {
        "median_ms": statistics.median(times),
        "times_ms": times,
        "hardware": f"{platform.machine()} {platform.processor() or ''} python {platform.python_version()}".strip(),
    }


def evaluate_dataset(model, images: np.ndarray, labels: np.ndarray, crop: int | None = None,
                     stride: int | None = None, batch_size: int = 10) -> tuple[np.ndarray, float]:
    """Per-class IoU and mIoU of ``model`` over a labelled set with sliding windows."""
    K = model.cfg.num_classes
    crop = crop or images.shape[-1]
    stride = stride or crop
    conf = ConfusionMatrix(K)
    model.eval()
    for i in range(0, len(images), batch_size):
        scores = sliding_window_inference(model.predict_scores, images[i : i + batch_size], crop, stride)
        conf.update(labels[i : i + batch_size], scores.argmax(axis=1))
    return miou(conf)


def benchmark_model(model, input_shape: tuple, warmup: int = 2, repeats: int = 10, seed: int = 0) -> dict:
    """Median eval-mode forward time on a random input of ``input_shape`` [B, C, H, W]."""
    x = np.random.default_rng(seed).standard_normal(input_shape)
    model.eval()
    res = benchmark(lambda: model.predict_scores(x), warmup, repeats)
    res["input_shape"] = tuple(input_shape)
    return res
