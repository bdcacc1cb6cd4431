"""Overlapping-tile inference with summed class scores, and model ensembles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boundaries import LabelMap
from .ops import ShapeError

DEFAULT_STRIDES = (150, 200, 220)
DEFAULT_TILE = 256


@dataclass
class TileGrid:
    hw: tuple[int, int]
    tile: int
    stride: int
    windows: list[tuple[int, int]]


@dataclass
class ScoreMap:
    scores: np.ndarray    # (classes, h, w) float64 sums
    coverage: np.ndarray  # (h, w) number of tiles that hit each pixel

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape[1:]

    def normalized(self) -> np.ndarray:
        """Per-pixel probabilities: divide by coverage, renormalise sums to 1."""
        if (self.coverage < 1).any():
            raise ValueError("score map has uncovered pixels")
        p = self.scores / self.coverage
        s = p.sum(axis=0, keepdims=True)
        return p / np.where(s > 0, s, 1.0)


def _origins(dim: int, tile: int, stride: int) -> list[int]:
    out = []
    k = 0
    while True:
        o = min(k * stride, dim - tile)
        if not out or o != out[-1]:
            out.append(o)
        if o >= dim - tile:
            return out
        k += 1


def plan_tiles(hw: tuple[int, int], tile: int = DEFAULT_TILE, stride: int = DEFAULT_STRIDES[0]) -> TileGrid:
    """Tile origins at multiples of ``stride``, the last one clamped so every
    window lies inside the raster. ``hw`` below ``tile`` is treated as the
    padded size ``tile``."""
    if tile < 1 or stride < 1:
        raise ValueError("tile and stride must be >= 1")
    h, w = (max(d, tile) for d in hw)
    rows, cols = _origins(h, tile, stride), _origins(w, tile, stride)
    return TileGrid((h, w), tile, stride, [(r, c) for r in rows for c in cols])


def _model_inputs(model, image: np.ndarray, height: np.ndarray) -> dict:
    feeds = {"image": image, "height": height}
    out = {}
    for name, chans in model.inputs.items():
        if name not in feeds:
            raise ShapeError(f"model input {name!r} cannot be fed from image/height rasters")
        if feeds[name].shape[1] != chans:
            raise ShapeError(f"model input {name!r} expects {chans} channels, raster has {feeds[name].shape[1]}")
        out[name] = feeds[name]
    return out


def predict_raster(model, image: np.ndarray, height: np.ndarray, tile: int = DEFAULT_TILE,
                   strides=DEFAULT_STRIDES, batch: int = 4, order_rng: np.random.Generator | None = None,
                   normalize: bool = False) -> ScoreMap:
    """Run ``model`` over overlapping tiles for each stride and sum the
    ``class_probs`` of every tile into a float64 accumulator.

    ``model`` needs ``inputs`` (name -> channels) and ``forward(feeds, mode)``.
    ``order_rng`` shuffles tile order (the sum is order-independent up to
    rounding). ``normalize`` divides by coverage and renormalises.
    """
    if image.ndim != 3 or height.ndim != 3 or image.shape[1:] != height.shape[1:]:
        raise ShapeError(f"image {image.shape} and height {height.shape} must be aligned (c, h, w) rasters")
    h, w = image.shape[1:]
    ph, pw = max(0, tile - h), max(0, tile - w)
    if ph or pw:
        pad = ((0, 0), (0, ph), (0, pw))
        image, height = np.pad(image, pad, mode="reflect"), np.pad(height, pad, mode="reflect")
    H, W = image.shape[1:]
    scores = None
    coverage = np.zeros((H, W), np.int64)
    jobs = [(r, c) for s in strides for (r, c) in plan_tiles((H, W), tile, s).windows]
    if order_rng is not None:
        jobs = [jobs[i] for i in order_rng.permutation(len(jobs))]
    for start in range(0, len(jobs), batch):
        chunk = jobs[start:start + batch]
        img = np.stack([image[:, r:r + tile, c:c + tile] for r, c in chunk])
        hgt = np.stack([height[:, r:r + tile, c:c + tile] for r, c in chunk])
        probs = model.forward(_model_inputs(model, img, hgt), "infer")["class_probs"]
        if scores is None:
            scores = np.zeros((probs.shape[1], H, W))
        for (r, c), p in zip(chunk, probs):
            scores[:, r:r + tile, c:c + tile] += p
            coverage[r:r + tile, c:c + tile] += 1
    sm = ScoreMap(scores[:, :h, :w].copy(), coverage[:h, :w].copy())
    if normalize:
        sm = ScoreMap(sm.normalized(), np.ones_like(sm.coverage))
    return sm


def ensemble_average(maps: list[ScoreMap]) -> ScoreMap:
    """Mean of the members' per-pixel class probabilities."""
    if not maps:
        raise ValueError("no score maps to average")
    shape = maps[0].scores.shape
    for m in maps[1:]:
        if m.scores.shape != shape:
            raise ShapeError(f"score map shape {m.scores.shape} != {shape}")
    mean = np.mean([m.normalized() for m in maps], axis=0)
    return ScoreMap(mean, np.ones(shape[1:], np.int64))


def argmax_labels(scores: ScoreMap, num_classes: int | None = None) -> LabelMap:
    """Per-pixel argmax; ties go to the lowest class id."""
    k = scores.scores.shape[0]
    return LabelMap(np.argmax(scores.scores, axis=0).astype(np.uint8), num_classes or k, None)
