"""Pose and segmentation task math: heatmap targets, losses, decoding, OKS, mIoU."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

HEATMAP_SIGMA = 2.0
HEATMAP_STRIDE = 4

# per-keypoint sigmas published with the COCO keypoint evaluation; the falloff
# constant in the OKS exponent is twice the sigma
COCO_SIGMAS = np.array([0.26, 0.25, 0.25, 0.35, 0.35, 0.79, 0.79, 0.72, 0.72,
                        0.62, 0.62, 1.07, 1.07, 0.87, 0.87, 0.89, 0.89]) / 10.0
COCO_FALLOFF = 2.0 * COCO_SIGMAS


@dataclass
class KeypointSet:
    """K keypoints in input-image pixels with COCO-style visibility flags."""

    points: np.ndarray
    visibility: np.ndarray
    scale: float = 1.0
    falloff: np.ndarray | None = None
    # peak heatmap response per keypoint, filled in by decoding
    scores: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.visibility = np.asarray(self.visibility, dtype=np.int64).reshape(-1)
        if self.visibility.shape[0] != self.points.shape[0]:
            raise ShapeError("points and visibility disagree on K")
        if np.any((self.visibility < 0) | (self.visibility > 2)):
            raise ValueError("visibility flags must be 0, 1 or 2")
        if self.scale <= 0:
            raise ValueError("object scale must be positive")
        if self.falloff is None:
            self.falloff = COCO_FALLOFF.copy() if self.num_keypoints == 17 else np.full(self.num_keypoints, 0.1)
        self.falloff = np.asarray(self.falloff, dtype=np.float64).reshape(-1)
        if self.falloff.shape[0] != self.num_keypoints or np.any(self.falloff <= 0):
            raise ValueError("falloff needs one positive constant per keypoint")

    @property
    def num_keypoints(self) -> int:
        return self.points.shape[0]

    def check_bounds(self, height: int, width: int) -> None:
        vis = self.visibility > 0
        x, y = self.points[vis, 0], self.points[vis, 1]
        if np.any((x < 0) | (x > width - 1) | (y < 0) | (y > height - 1)):
            raise ValueError("visible keypoint outside the image")


def make_gaussian_targets(keypoints: KeypointSet | list[KeypointSet], input_dims: tuple[int, int],
                          sigma: float = HEATMAP_SIGMA) -> np.ndarray:
    """Heatmaps of shape (N, K, H/4, W/4) with an unnormalized-amplitude-1 Gaussian per visible keypoint.

    Input pixel (x, y) lands at heatmap coordinate (x/4, y/4); the Gaussian is evaluated
    around that continuous point.
    """
    h, w = input_dims
    if h % HEATMAP_STRIDE or w % HEATMAP_STRIDE:
        raise ShapeError(f"input dims {h}x{w} must be divisible by {HEATMAP_STRIDE}")
    sets = [keypoints] if isinstance(keypoints, KeypointSet) else list(keypoints)
    hh, ww = h // HEATMAP_STRIDE, w // HEATMAP_STRIDE
    ys = np.arange(hh, dtype=np.float64)[:, None]
    xs = np.arange(ww, dtype=np.float64)[None, :]
    out = np.zeros((len(sets), sets[0].num_keypoints, hh, ww))
    for n, kps in enumerate(sets):
        for k in range(kps.num_keypoints):
            if kps.visibility[k] == 0:
                continue
            cx, cy = kps.points[k] / HEATMAP_STRIDE
            out[n, k] = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * sigma ** 2))
    return out


def mse_heatmap_loss(pred: Tensor, target: Tensor | np.ndarray) -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    return ops.mean(ops.square(ops.sub(pred, target)))


# scan order of the 4-neighbourhood: up, left, right, down (row-major)
_NEIGHBOURS = ((0, -1), (-1, 0), (1, 0), (0, 1))


def decode_channel(hm: np.ndarray) -> tuple[float, float, float] | None:
    """Heatmap-space (x, y, peak) for one channel, or None when nothing is detected."""
    hh, ww = hm.shape
    idx = int(np.argmax(hm))
    peak = float(hm.flat[idx])
    if peak <= 0:
        return None
    y, x = divmod(idx, ww)
    best, shift = 0.0, (0, 0)
    for dx, dy in _NEIGHBOURS:
        nx, ny = x + dx, y + dy
        if 0 <= nx < ww and 0 <= ny < hh and hm[ny, nx] > best:
            best, shift = float(hm[ny, nx]), (dx, dy)
    return x + 0.25 * shift[0], y + 0.25 * shift[1], peak


def decode_keypoints(heatmaps: np.ndarray | Tensor, scale: float = 1.0, falloff=None) -> list[KeypointSet]:
    """Argmax plus a quarter-pixel step toward the strongest 4-neighbour, mapped back to input pixels.

    Ties go to the first position in row-major scan order. Channels whose maximum is not
    positive come back with visibility 0.
    """
    hm = heatmaps.data if isinstance(heatmaps, Tensor) else np.asarray(heatmaps, dtype=np.float64)
    if hm.ndim == 3:
        hm = hm[None]
    if hm.ndim != 4:
        raise ShapeError(f"expected (N, K, h, w) heatmaps, got {hm.shape}")
    results = []
    for n in range(hm.shape[0]):
        k = hm.shape[1]
        pts = np.zeros((k, 2))
        vis = np.zeros(k, dtype=np.int64)
        scores = np.zeros(k)
        for j in range(k):
            found = decode_channel(hm[n, j])
            if found is None:
                continue
            x, y, peak = found
            pts[j] = (x * HEATMAP_STRIDE, y * HEATMAP_STRIDE)
            vis[j] = 2
            scores[j] = peak
        results.append(KeypointSet(pts, vis, scale, falloff, scores))
    return results


def oks(pred: KeypointSet, truth: KeypointSet) -> float:
    """Object keypoint similarity; scale and falloff come from ``truth``."""
    if pred.num_keypoints != truth.num_keypoints:
        raise ShapeError("keypoint counts differ")
    vis = truth.visibility > 0
    if not vis.any():
        raise ValueError("OKS is undefined without visible ground-truth keypoints")
    d2 = ((pred.points - truth.points) ** 2).sum(axis=1)
    e = np.exp(-d2 / (2.0 * truth.scale ** 2 * truth.falloff ** 2))
    return float(e[vis].sum() / vis.sum())


# ---------------------------------------------------------------------------
# segmentation


def softmax_ce_seg_loss(logits: Tensor, target: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Upsample 1/4-resolution logits to the label size, then pixel-averaged cross-entropy."""
    target = np.asarray(target)
    if target.ndim != 3:
        raise ShapeError(f"target must be (N, H, W), got {target.shape}")
    up = ops.bilinear_resize(logits, target.shape[1], target.shape[2])
    return ops.softmax_cross_entropy(up, target, ignore_index)


def miou(pred: np.ndarray, target: np.ndarray, num_classes: int, ignore_index: int = 255):
    """Per-class IoU (NaN where the union is empty) and their mean over the defined classes."""
    pred = np.asarray(pred).reshape(-1)
    target = np.asarray(target).reshape(-1)
    if pred.shape != target.shape:
        raise ShapeError("prediction and target sizes differ")
    keep = target != ignore_index
    pred, target = pred[keep], target[keep]
    if np.any((target < 0) | (target >= num_classes)) or np.any((pred < 0) | (pred >= num_classes)):
        raise ValueError("labels must lie in [0, num_classes)")
    conf = np.bincount(target * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / np.maximum(union, 1), np.nan)
    defined = iou[~np.isnan(iou)]
    return iou, float(defined.mean()) if defined.size else float("nan")
