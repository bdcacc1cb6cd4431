"""Soft class-boundary regression targets.

Label transitions are extracted with 4-connectivity, widened by an L1
(diamond) dilation, scored by the truncated Euclidean distance to the
nearest pixel outside the band, scaled by the class-balance factor beta and
normalised to [0, 1].
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

BETA_MODES = ("background_total", "background_boundary")


@dataclass
class LabelMap:
    values: np.ndarray
    num_classes: int
    ignore_label: int | None = 255

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValueError(f"label map must be 2-D, got shape {self.values.shape}")
        v = self.values[self.valid]
        if v.size and (v.min() < 0 or v.max() >= self.num_classes):
            raise ValueError(f"label values outside [0, {self.num_classes})")

    @property
    def valid(self) -> np.ndarray:
        if self.ignore_label is None:
            return np.ones(self.values.shape, bool)
        return self.values != self.ignore_label

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class BoundaryBand:
    mask: np.ndarray
    radius: int = 0


@dataclass
class BoundaryTarget:
    values: np.ndarray
    beta: float
    radius: int
    truncation: float
    boundary_free: bool = False
    beta_mode: str = "background_total"

    @property
    def band(self) -> np.ndarray:
        return self.values > 0

    def loss_weights(self) -> np.ndarray:
        return boundary_loss_weights(self.values, self.beta, self.beta_mode, self.boundary_free)


def extract_class_boundaries(labels: LabelMap) -> BoundaryBand:
    """Mark every pixel whose 4-neighbour carries a different class.

    Pairs involving an ignore-labelled pixel never create a transition.
    """
    v, ok = labels.values, labels.valid
    mask = np.zeros(v.shape, bool)
    vert = (v[1:] != v[:-1]) & ok[1:] & ok[:-1]
    mask[1:] |= vert
    mask[:-1] |= vert
    horiz = (v[:, 1:] != v[:, :-1]) & ok[:, 1:] & ok[:, :-1]
    mask[:, 1:] |= horiz
    mask[:, :-1] |= horiz
    return BoundaryBand(mask, 0)


def _shift_or(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def dilate_diamond(band: BoundaryBand, radius: int) -> BoundaryBand:
    """Dilation by the L1 ball of ``radius`` (r repeated cross dilations)."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    mask = band.mask.astype(bool, copy=True)
    for _ in range(radius):
        mask = _shift_or(mask)
    return BoundaryBand(mask, band.radius + radius)


def _axis_distance(background: np.ndarray, reach: int) -> np.ndarray:
    """Distance along axis 0 to the nearest background pixel, inf beyond ``reach``."""
    dist = np.full(background.shape, np.inf)
    dist[background] = 0.0
    for k in range(1, reach + 1):
        hit = np.zeros(background.shape, bool)
        hit[:-k] |= background[k:]
        hit[k:] |= background[:-k]
        np.minimum(dist, np.where(hit, float(k), np.inf), out=dist)
    return dist


def truncated_edt(band: BoundaryBand, truncation: float) -> np.ndarray:
    """Exact Euclidean distance from band pixels to the nearest non-band
    pixel, clipped at ``truncation``; zero off the band.

    Separable two-pass form restricted to the truncation window: distances
    beyond ``truncation`` never matter, so each pass only looks
    ``ceil(truncation)`` pixels away. The result is exact, not chamfer.
    """
    if truncation <= 0:
        raise ValueError("truncation must be > 0")
    mask = band.mask.astype(bool)
    out = np.zeros(mask.shape)
    if not mask.any():
        return out
    background = ~mask
    if not background.any():
        warnings.warn("boundary band covers the whole raster; all distances set to the truncation", RuntimeWarning)
        out[:] = truncation
        return out
    reach = math.ceil(truncation)
    col = _axis_distance(background, reach)
    col_sq = col * col
    best = col_sq.copy()
    for j in range(1, reach + 1):
        left = np.full(mask.shape, np.inf)
        left[:, j:] = col_sq[:, :-j]
        right = np.full(mask.shape, np.inf)
        right[:, :-j] = col_sq[:, j:]
        np.minimum(best, np.minimum(left, right) + j * j, out=best)
    out[mask] = np.minimum(np.sqrt(best[mask]), truncation)
    return out


def compute_beta(band: BoundaryBand, mode: str = "background_total") -> float:
    """Class-balance factor: background/total, or background/boundary."""
    mask = band.mask.astype(bool)
    n_band = int(mask.sum())
    if n_band == 0:
        raise ValueError("empty boundary band: beta is undefined")
    n_bg = mask.size - n_band
    if mode == "background_total":
        return n_bg / mask.size
    if mode == "background_boundary":
        return n_bg / n_band
    raise ValueError(f"unknown beta mode {mode!r}; use one of {BETA_MODES}")


def make_boundary_target(labels: LabelMap, radius: int = 3, truncation: float | None = None, beta_mode: str = "background_total") -> BoundaryTarget:
    if truncation is None:
        truncation = radius + 1
    band = dilate_diamond(extract_class_boundaries(labels), radius)
    if not band.mask.any():
        return BoundaryTarget(np.zeros(labels.shape, np.float32), 0.0, radius, truncation, True, beta_mode)
    beta = compute_beta(band, beta_mode)
    dist = truncated_edt(band, truncation)
    y = beta * dist
    # a band covering everything gives beta == 0 under background/total
    y = y / y.max() if y.max() > 0 else dist / dist.max()
    return BoundaryTarget(y.astype(np.float32), beta, radius, truncation, False, beta_mode)


def boundary_loss_weights(values: np.ndarray, beta: float, beta_mode: str = "background_total", boundary_free: bool = False) -> np.ndarray:
    """Per-pixel weights for the regression loss.

    Band pixels get ``beta``; background pixels get ``1 - beta`` for the
    background/total reading and ``1`` for background/boundary. Both give the
    same band:background ratio (#background : #band).
    """
    band = values > 0
    if boundary_free or not band.any():
        return np.ones(values.shape, np.float32)
    bg_weight = 1.0 - beta if beta_mode == "background_total" else 1.0
    return np.where(band, beta, bg_weight).astype(np.float32)
