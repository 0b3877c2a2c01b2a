"""Position-tagged patch features and their residuals against a reference bank.

A test image becomes a grid of patch features; each grid cell is matched to
the closest reference vector whose stored position falls inside a Chebyshev
window around the cell, and the element-wise absolute difference raised to
a power forms the residual descriptor that feeds the network.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bank import ReferenceBank
from .extractors import PatchFeatureExtractor


class MatchWindowError(Exception):
    """Some grid cell has no bank candidate inside the position window."""


@dataclass
class FeatureGrid:
    vectors: np.ndarray  # (h_f, w_f, dim) float32
    source_resolution: tuple[int, int]

    def __post_init__(self):
        if self.vectors.ndim != 3:
            raise ValueError("feature grid must be (h, w, dim)")
        if not np.isfinite(self.vectors).all():
            raise ValueError("feature grid contains non-finite values")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.vectors.shape[0], self.vectors.shape[1]

    @property
    def dim(self) -> int:
        return self.vectors.shape[2]


@dataclass
class ResidualGrid:
    residuals: np.ndarray  # (h_f, w_f, dim), non-negative
    theta: float
    matched_indices: np.ndarray  # (h_f, w_f) int64 into the bank

    def __post_init__(self):
        if self.residuals.shape[:2] != self.matched_indices.shape:
            raise ValueError("residuals and matched_indices disagree on grid shape")
        if self.theta <= 0:
            raise ValueError("theta must be positive")


def extract_features(image: np.ndarray, extractor: PatchFeatureExtractor) -> FeatureGrid:
    vectors = extractor(image)
    return FeatureGrid(vectors=vectors, source_resolution=(image.shape[0], image.shape[1]))


def match_reference(grid: FeatureGrid, bank: ReferenceBank, window_radius: int = 1):
    """Per-cell nearest reference vector under a positional window.

    For cell (r, c) the candidates are bank entries whose stored position
    is within Chebyshev distance ``window_radius``; the closest by
    Euclidean distance wins, ties broken by lowest bank index. Returns
    (matched_vectors, matched_indices).
    """
    if window_radius < 0:
        raise ValueError("window_radius must be >= 0")
    if bank.dim != grid.dim:
        raise ValueError(
            f"bank dimension {bank.dim} != feature dimension {grid.dim}"
        )
    h, w = grid.grid_shape
    # bucket bank entries by stored position, keeping index order
    buckets: dict[tuple[int, int], list[int]] = {}
    for idx, (pr, pc) in enumerate(bank.positions):
        buckets.setdefault((int(pr), int(pc)), []).append(idx)

    matched = np.empty((h, w, grid.dim), dtype=np.float32)
    indices = np.empty((h, w), dtype=np.int64)
    offsets = range(-window_radius, window_radius + 1)
    for r in range(h):
        for c in range(w):
            cand: list[int] = []
            for dr in offsets:
                for dc in offsets:
                    cand.extend(buckets.get((r + dr, c + dc), ()))
            if not cand:
                raise MatchWindowError(
                    f"cell ({r}, {c}): no reference inside window radius {window_radius}"
                )
            cand.sort()
            cand_arr = np.asarray(cand)
            diffs = bank.vectors[cand_arr] - grid.vectors[r, c][None, :]
            dists = np.einsum("nd,nd->n", diffs, diffs)
            best = cand_arr[int(np.argmin(dists))]
            matched[r, c] = bank.vectors[best]
            indices[r, c] = best
    return matched, indices


def compute_residuals(grid: FeatureGrid, matched: np.ndarray, theta: float = 2.0) -> np.ndarray:
    """Element-wise |feature - matched|^theta per grid cell."""
    if theta <= 0:
        raise ValueError("theta must be positive")
    matched = np.asarray(matched, dtype=np.float32)
    if matched.shape != grid.vectors.shape:
        raise ValueError("matched reference shape differs from feature grid")
    if not np.isfinite(matched).all():
        raise ValueError("matched references contain non-finite values")
    return np.abs(grid.vectors.astype(np.float64) - matched.astype(np.float64)) ** theta


def residual_grid(grid: FeatureGrid, bank: ReferenceBank, window_radius: int = 1,
                  theta: float = 2.0) -> ResidualGrid:
    matched, indices = match_reference(grid, bank, window_radius)
    residuals = compute_residuals(grid, matched, theta).astype(np.float32)
    return ResidualGrid(residuals=residuals, theta=theta, matched_indices=indices)
