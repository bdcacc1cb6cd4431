"""In-memory datasets and on-disk scene directories."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import formats
from .boundaries import LabelMap, make_boundary_target

CLASS_NAMES = ("impervious", "building", "low_veg", "tree", "car")
IGNORE_LABEL = 255
HEIGHT_OFFSET = 100.0
HEIGHT_SCALE = 10.0


def normalize_image(rgb: np.ndarray) -> np.ndarray:
    """``(h, w, 3)`` uint8 -> ``(3, h, w)`` float32 roughly centred on 0."""
    return (rgb.astype(np.float32).transpose(2, 0, 1) / 255.0) - 0.5


def normalize_heights(dsm: np.ndarray, ndsm: np.ndarray) -> np.ndarray:
    return np.stack([(dsm - HEIGHT_OFFSET) / HEIGHT_SCALE, ndsm / HEIGHT_SCALE]).astype(np.float32)


@dataclass
class Dataset:
    images: np.ndarray
    heights: np.ndarray
    labels: np.ndarray
    boundaries: np.ndarray
    betas: np.ndarray
    boundary_free: np.ndarray
    num_classes: int = len(CLASS_NAMES)
    ignore_label: int = IGNORE_LABEL
    beta_mode: str = "background_total"
    names: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.images[idx], self.heights[idx], self.labels[idx], self.boundaries[idx],
            self.betas[idx], self.boundary_free[idx], self.num_classes, self.ignore_label,
            self.beta_mode, tuple(np.asarray(self.names)[idx]) if self.names else (),
        )


def dataset_from_scenes(scenes, radius: int = 3, truncation: float | None = None, beta_mode: str = "background_total") -> Dataset:
    """Build a dataset from objects with ``image``, ``dsm``, ``ndsm``, ``labels``."""
    images, heights, labels, bnds, betas, free = [], [], [], [], [], []
    for sc in scenes:
        images.append(normalize_image(sc.image))
        heights.append(normalize_heights(sc.dsm, sc.ndsm))
        labels.append(sc.labels.astype(np.int64))
        tgt = make_boundary_target(LabelMap(sc.labels, len(CLASS_NAMES), IGNORE_LABEL), radius, truncation, beta_mode)
        bnds.append(tgt.values)
        betas.append(tgt.beta)
        free.append(tgt.boundary_free)
    return Dataset(
        np.stack(images), np.stack(heights), np.stack(labels), np.stack(bnds),
        np.asarray(betas), np.asarray(free), beta_mode=beta_mode,
    )


def scene_paths(root, name: str) -> dict[str, Path]:
    root = Path(root)
    return {
        "image": root / f"{name}_image.png",
        "height": root / f"{name}_height.bin",
        "labels": root / f"{name}_labels.png",
        "boundary": root / f"{name}_boundary.bin",
        "preview": root / f"{name}_boundary.png",
    }


def list_scenes(root) -> list[str]:
    manifest = Path(root) / "manifest.json"
    if manifest.exists():
        return list(json.loads(manifest.read_text())["scenes"])
    return sorted(p.name[: -len("_image.png")] for p in Path(root).glob("*_image.png"))


def load_scene_inputs(root, name: str) -> tuple[np.ndarray, np.ndarray]:
    paths = scene_paths(root, name)
    image = normalize_image(formats.read_png(paths["image"]))
    dsm, ndsm = formats.read_heights(paths["height"])
    return image, normalize_heights(dsm, ndsm)


def load_dataset(root, names: list[str] | None = None, beta_mode: str = "background_total") -> Dataset:
    """Load scenes written by the synthetic generator (or laid out the same way)."""
    names = names if names is not None else list_scenes(root)
    if not names:
        raise FileNotFoundError(f"no scenes found in {root}")
    images, heights, labels, bnds, betas, free = [], [], [], [], [], []
    for name in names:
        paths = scene_paths(root, name)
        img, hgt = load_scene_inputs(root, name)
        images.append(img)
        heights.append(hgt)
        labels.append(formats.read_label_png(paths["labels"]))
        if paths["boundary"].exists():
            t = formats.read_boundary_target(paths["boundary"])
            bnds.append(t["values"])
            betas.append(t["beta"])
            free.append(t["boundary_free"])
        else:
            tgt = make_boundary_target(LabelMap(labels[-1], len(CLASS_NAMES), IGNORE_LABEL), beta_mode=beta_mode)
            bnds.append(tgt.values)
            betas.append(tgt.beta)
            free.append(tgt.boundary_free)
    return Dataset(
        np.stack(images), np.stack(heights), np.stack(labels), np.stack(bnds),
        np.asarray(betas), np.asarray(free), beta_mode=beta_mode, names=tuple(names),
    )
