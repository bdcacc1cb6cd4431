"""Synthetic aerial scenes with image, DSM/nDSM and five-class labels.

Scenes are built from simple primitives so labels and geometry agree by
construction: roads and plazas (impervious) over grass (low vegetation),
textured tree crowns, rotated building footprints with flat roofs, and cars
parked on impervious ground.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import formats
from .boundaries import LabelMap, make_boundary_target
from .data import CLASS_NAMES, IGNORE_LABEL, scene_paths

IMPERVIOUS, BUILDING, LOW_VEG, TREE, CAR = range(5)

DEFAULT_MIX = {"road": 1.0, "building": 1.0, "tree": 1.0, "car": 1.0, "plaza": 1.0}

ROOF_COLORS = [(178, 84, 62), (138, 136, 134), (96, 94, 104), (190, 120, 90)]
CAR_COLORS = [(200, 30, 30), (30, 40, 190), (230, 230, 230), (20, 20, 20), (210, 190, 40)]


@dataclass
class SyntheticScene:
    image: np.ndarray   # (h, w, 3) uint8
    dsm: np.ndarray     # (h, w) float32 metres
    ndsm: np.ndarray    # (h, w) float32 metres above ground
    labels: np.ndarray  # (h, w) uint8 class ids
    seed: int


def _rect_mask(yy, xx, cy, cx, half_h, half_w, angle):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = c * dy + s * dx
    v = -s * dy + c * dx
    return (np.abs(u) <= half_h) & (np.abs(v) <= half_w)


def _blob_mask(yy, xx, cy, cx, radius, rng):
    ang = np.arctan2(yy - cy, xx - cx)
    k = rng.integers(3, 7)
    wobble = 1 + 0.18 * np.sin(k * ang + rng.uniform(0, 2 * np.pi)) + 0.08 * np.sin((k + 3) * ang + rng.uniform(0, 2 * np.pi))
    dist = np.hypot(yy - cy, xx - cx)
    return dist <= radius * wobble, dist / (radius * wobble)


def _smooth_noise(shape, rng, scale: int = 4) -> np.ndarray:
    """Cheap correlated noise: upsampled coarse grid, zero mean, unit-ish std."""
    h, w = shape
    coarse = rng.standard_normal((h // scale + 2, w // scale + 2))
    up = np.repeat(np.repeat(coarse, scale, axis=0), scale, axis=1)[:h, :w]
    k = np.ones(scale) / scale
    up = np.apply_along_axis(lambda r: np.convolve(r, k, mode="same"), 1, up)
    up = np.apply_along_axis(lambda r: np.convolve(r, k, mode="same"), 0, up)
    return (up - up.mean()) / (up.std() + 1e-9)


def _count(rng, base: float, area_scale: float, weight: float) -> int:
    lam = base * area_scale * weight
    return int(rng.poisson(lam)) if lam > 0 else 0


def generate_scene(hw: tuple[int, int], seed: int, class_mix: dict | None = None) -> SyntheticScene:
    h, w = hw
    if min(h, w) < 64:
        raise ValueError(f"scenes need at least 64x64 pixels, got {hw}")
    mix = dict(DEFAULT_MIX)
    mix.update(class_mix or {})
    rng = np.random.default_rng(seed)
    area = h * w / (128 * 128)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    labels = np.full((h, w), LOW_VEG, np.uint8)
    ndsm = np.zeros((h, w))
    img = np.zeros((h, w, 3))

    grass = np.array([118, 168, 86]) + rng.normal(0, 8, 3)
    img[:] = grass + 14 * _smooth_noise((h, w), rng, 8)[..., None]

    pave = np.array([134, 132, 128]) + rng.normal(0, 6, 3)

    def paint_impervious(mask):
        labels[mask] = IMPERVIOUS
        ndsm[mask] = 0
        img[mask] = pave

    n_roads = max(1, _count(rng, 2.0, np.sqrt(area), mix["road"])) if mix["road"] > 0 else 0
    for _ in range(n_roads):
        vertical = rng.random() < 0.5
        angle = rng.normal(0, 0.15) + (np.pi / 2 if vertical else 0.0)
        cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
        paint_impervious(_rect_mask(yy, xx, cy, cx, 4 * max(h, w), rng.uniform(5, 10), angle))
    for _ in range(_count(rng, 2.0, area, mix["plaza"])):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        paint_impervious(_rect_mask(yy, xx, cy, cx, rng.uniform(6, 16), rng.uniform(6, 16), rng.uniform(0, np.pi)))

    n_trees = max(1, _count(rng, 9.0, area, mix["tree"])) if mix["tree"] > 0 else 0
    for _ in range(n_trees):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        r = rng.uniform(5, 12)
        m, rel = _blob_mask(yy, xx, cy, cx, r, rng)
        if rng.random() < 0.7:
            m &= labels != IMPERVIOUS
        top = rng.uniform(5, 14)
        labels[m] = TREE
        ndsm[m] = np.maximum(ndsm[m], top * (1 - 0.6 * rel[m] ** 2))
        img[m] = np.array([52, 98, 48]) + rng.normal(0, 6, 3)

    n_buildings = max(1, _count(rng, 3.5, area, mix["building"])) if mix["building"] > 0 else 0
    for _ in range(n_buildings):
        cy, cx = rng.uniform(0.1, 0.9) * h, rng.uniform(0.1, 0.9) * w
        m = _rect_mask(yy, xx, cy, cx, rng.uniform(6, 18), rng.uniform(6, 18), rng.uniform(0, np.pi))
        labels[m] = BUILDING
        ndsm[m] = rng.uniform(5, 15)
        img[m] = np.array(ROOF_COLORS[rng.integers(len(ROOF_COLORS))]) + rng.normal(0, 6, 3)

    if mix["car"] > 0:
        want = max(1, _count(rng, 4.0, area, mix["car"]))
        placed, tries = 0, 0
        while placed < want and tries < 200:
            tries += 1
            cy, cx = rng.uniform(3, h - 3), rng.uniform(3, w - 3)
            m = _rect_mask(yy, xx, cy, cx, 2.0, 4.0, rng.uniform(0, np.pi))
            if not m.any() or (labels[m] != IMPERVIOUS).mean() > 0.05:
                continue
            labels[m] = CAR
            ndsm[m] = rng.uniform(1.3, 1.8)
            img[m] = np.array(CAR_COLORS[rng.integers(len(CAR_COLORS))]) + rng.normal(0, 8, 3)
            placed += 1

    tex = rng.normal(0, 1, (h, w))
    texture = np.where(labels == TREE, 22.0, np.where(labels == LOW_VEG, 7.0, 5.0))
    img += (tex * texture)[..., None] + rng.normal(0, 3, (h, w, 3))
    # slight blur mixes colours across object edges
    img = (img + np.roll(img, 1, 0) + np.roll(img, 1, 1) + np.roll(img, (1, 1), (0, 1))) / 4
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    terrain = 100 + rng.uniform(-2, 2) * (yy / h) + rng.uniform(-2, 2) * (xx / w) + 0.5 * _smooth_noise((h, w), rng, 16)
    ndsm_obs = np.maximum(ndsm + rng.normal(0, 0.15, (h, w)), 0)
    dsm = terrain + ndsm + rng.normal(0, 0.05, (h, w))
    return SyntheticScene(image, dsm.astype(np.float32), ndsm_obs.astype(np.float32), labels, seed)


def scene_seeds(n: int, seed: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def generate_scenes(n: int, hw: tuple[int, int], seed: int, class_mix: dict | None = None) -> list[SyntheticScene]:
    return [generate_scene(hw, s, class_mix) for s in scene_seeds(n, seed)]


def synth_generate(out_dir, n_scenes: int, hw: tuple[int, int] = (128, 128), class_mix: dict | None = None,
                   seed: int = 0, radius: int = 3, truncation: float | None = None,
                   beta_mode: str = "background_total") -> list[str]:
    """Write ``n_scenes`` scenes plus precomputed boundary targets to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, s in enumerate(scene_seeds(n_scenes, seed)):
        sc = generate_scene(hw, s, class_mix)
        name = f"scene_{i:04d}"
        paths = scene_paths(out, name)
        formats.write_png(paths["image"], sc.image)
        formats.write_heights(paths["height"], sc.dsm, sc.ndsm)
        formats.write_label_png(paths["labels"], sc.labels)
        tgt = make_boundary_target(LabelMap(sc.labels, len(CLASS_NAMES), IGNORE_LABEL), radius, truncation, beta_mode)
        formats.write_boundary_target(paths["boundary"], tgt.values, tgt.beta, radius, tgt.truncation, tgt.boundary_free)
        formats.write_png(paths["preview"], np.rint(tgt.values * 255))
        names.append(name)
    manifest = {
        "scenes": names, "hw": list(hw), "seed": seed, "class_mix": class_mix or {},
        "radius": radius, "truncation": truncation if truncation is not None else radius + 1,
        "beta_mode": beta_mode, "classes": list(CLASS_NAMES),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return names
