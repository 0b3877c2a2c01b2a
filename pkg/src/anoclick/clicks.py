"""Click primitives: tensor encoding, annotator simulation, refinement protocol."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .metrics import iou, noc_from_trace

_STRUCTURE_8 = np.ones((3, 3), dtype=bool)


class OutOfBoundsClickError(Exception):
    """Click coordinates fall outside the image."""


@dataclass(frozen=True)
class Click:
    x: int              # pixel column
    y: int              # pixel row
    positive: bool      # True = anomalous, False = normal
    index: int = 0      # interaction ordinal within a session

    @property
    def polarity(self) -> int:
        return 1 if self.positive else 0

    def to_dict(self) -> dict:
        return {"x": int(self.x), "y": int(self.y), "polarity": self.polarity}

    @classmethod
    def from_dict(cls, d: dict, index: int = 0) -> "Click":
        return cls(x=int(d["x"]), y=int(d["y"]), positive=bool(d["polarity"]), index=index)


@dataclass
class AnomalyMask:
    scores: np.ndarray            # (H, W) in [0, 1]
    threshold: float = 0.5

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float32)
        if self.scores.ndim != 2:
            raise ValueError("mask scores must be 2-D")
        if self.scores.min() < 0.0 or self.scores.max() > 1.0:
            raise ValueError("mask scores must lie in [0, 1]")
        if not (0.0 < self.threshold < 1.0):
            raise ValueError("threshold must lie in (0, 1)")

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape

    def binary(self) -> np.ndarray:
        return self.scores >= self.threshold

    @classmethod
    def empty(cls, shape, threshold: float = 0.5) -> "AnomalyMask":
        return cls(scores=np.zeros(shape, dtype=np.float32), threshold=threshold)


@dataclass
class ClickEncoding:
    positive_map: np.ndarray      # (H, W) float32 {0, 1}
    negative_map: np.ndarray
    previous_mask: np.ndarray     # (H, W) float32 in [0, 1]


def _disk_offsets(radius: int) -> np.ndarray:
    r = int(radius)
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    keep = dy * dy + dx * dx <= r * r
    return np.stack([dy[keep], dx[keep]], axis=1)


def encode_clicks(clicks, previous_mask, resolution, radius: int) -> ClickEncoding:
    """Stamp a disk per click into the matching polarity map."""
    h, w = resolution
    positive = np.zeros((h, w), dtype=np.float32)
    negative = np.zeros((h, w), dtype=np.float32)
    offsets = _disk_offsets(radius)
    for click in clicks:
        if not (0 <= click.x < w and 0 <= click.y < h):
            raise OutOfBoundsClickError(
                f"click ({click.x}, {click.y}) outside {w}x{h} image"
            )
        ys = click.y + offsets[:, 0]
        xs = click.x + offsets[:, 1]
        keep = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        target = positive if click.positive else negative
        target[ys[keep], xs[keep]] = 1.0
    if previous_mask is None:
        prev = np.zeros((h, w), dtype=np.float32)
    else:
        prev = np.asarray(
            previous_mask.scores if isinstance(previous_mask, AnomalyMask) else previous_mask,
            dtype=np.float32,
        )
        if prev.shape != (h, w):
            raise ValueError("previous mask resolution mismatch")
    return ClickEncoding(positive_map=positive, negative_map=negative, previous_mask=prev)


def _error_regions(pred: np.ndarray, gt: np.ndarray):
    """Connected false-negative and false-positive components with areas."""
    regions = []
    for mask, positive in (((gt & ~pred), True), ((pred & ~gt), False)):
        labels, n = ndimage.label(mask, structure=_STRUCTURE_8)
        for r in range(1, n + 1):
            region = labels == r
            regions.append((int(region.sum()), positive, region))
    return regions


def _region_center(region: np.ndarray) -> tuple[int, int]:
    """Interior point farthest from the region boundary (row-major ties).

    The image frame counts as boundary, hence the zero padding.
    """
    padded = np.pad(region, 1)
    dist = ndimage.distance_transform_edt(padded)[1:-1, 1:-1]
    flat = int(np.argmax(dist))
    y, x = np.unravel_index(flat, region.shape)
    return int(y), int(x)


def simulate_next_click(prediction: AnomalyMask, gt: np.ndarray, index: int = 0):
    """Annotator model: click the center of the largest error region.

    Returns None when the binarized prediction equals the ground truth.
    """
    gt = np.asarray(gt).astype(bool)
    if gt.shape != prediction.shape:
        raise ValueError("prediction and ground truth shapes differ")
    pred = prediction.binary()
    regions = _error_regions(pred, gt)
    if not regions:
        return None
    area, positive, region = max(regions, key=lambda t: t[0])
    y, x = _region_center(region)
    return Click(x=x, y=y, positive=positive, index=index)


def run_click_protocol(predict, gt: np.ndarray, max_clicks: int = 20,
                       iou_target: float = 0.8, threshold: float = 0.5,
                       on_step=None):
    """Alternate simulated clicks and model refinement from an empty mask.

    ``predict(clicks, previous_scores) -> scores`` runs one refinement.
    ``on_step(click_count, scores)`` observes each refined map. Returns
    the per-click IoU trace and the number of clicks to reach the target
    (capped at ``max_clicks``).
    """
    if max_clicks < 1:
        raise ValueError("max_clicks must be >= 1")
    gt = np.asarray(gt).astype(bool)
    mask = AnomalyMask.empty(gt.shape, threshold=threshold)
    clicks: list[Click] = []
    trace: list[float] = []
    for t in range(max_clicks):
        click = simulate_next_click(mask, gt, index=t)
        if click is None:
            trace.append(1.0)
            if on_step is not None:
                on_step(t + 1, mask.scores)
            break
        clicks.append(click)
        scores = predict(list(clicks), mask.scores)
        mask = AnomalyMask(scores=scores, threshold=threshold)
        trace.append(iou(mask.binary(), gt))
        if on_step is not None:
            on_step(t + 1, mask.scores)
    return trace, noc_from_trace(trace, iou_target, cap=max_clicks)


def first_training_click(rng: np.random.Generator, gt: np.ndarray):
    """Uniformly random positive click inside the anomaly (None if none)."""
    ys, xs = np.nonzero(gt)
    if len(ys) == 0:
        return None
    i = int(rng.integers(len(ys)))
    return Click(x=int(xs[i]), y=int(ys[i]), positive=True, index=0)


def next_training_click(rng: np.random.Generator, prediction: AnomalyMask,
                        gt: np.ndarray, jitter: float = 0.3, index: int = 0):
    """Error-region click with a jitter fraction of uniform in-region picks."""
    gt = np.asarray(gt).astype(bool)
    regions = _error_regions(prediction.binary(), gt)
    if not regions:
        return None
    area, positive, region = max(regions, key=lambda t: t[0])
    if rng.random() < jitter:
        ys, xs = np.nonzero(region)
        i = int(rng.integers(len(ys)))
        y, x = int(ys[i]), int(xs[i])
    else:
        y, x = _region_center(region)
    return Click(x=x, y=y, positive=positive, index=index)
