"""Desk-scale synthetic comparison: boundary-assisted vs plain segmenter.

Both arms share data, seed and segmenter schedule (pretrain iterations plus a
batch-1 fine-tune at the lower rate). The assembled arm additionally gets a
pretrained boundary detector; that is the only difference.
"""

from __future__ import annotations

import logging
import tempfile
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import graph as G
from . import metrics, synth, tiling
from . import training as T
from .data import Dataset, dataset_from_scenes

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    n_scenes: int = 200
    n_train: int = 160
    hw: int = 128
    data_seed: int = 0
    base_width: int = 16
    depth: int = 3
    crop: int = 64
    boundary_iters: int = 500
    boundary_lr: float = 1e-2
    seg_iters: int = 700
    seg_lr: float = 3e-2
    finetune_iters: int = 300
    finetune_lr: float = 3e-3
    arch_overrides: dict = field(default_factory=dict)

    def arch(self) -> G.ArchConfig:
        return G.ArchConfig(base_width=self.base_width, depth=self.depth, **self.arch_overrides)

    def stage_configs(self, seed: int) -> dict[str, T.TrainConfig]:
        cfgs = T.default_train_configs(seed=seed, crop=self.crop)
        step = lambda n: max(1, int(0.6 * n))  # one x0.1 drop at 60% of each stage
        cfgs["boundary_pretrain"] = replace(cfgs["boundary_pretrain"], base_lr=self.boundary_lr,
                                            total_iters=self.boundary_iters, lr_step_iters=step(self.boundary_iters))
        for key in ("segmenter_pretrain", "per_scale"):
            cfgs[key] = replace(cfgs[key], base_lr=self.seg_lr, total_iters=self.seg_iters, lr_step_iters=step(self.seg_iters))
        cfgs["assembled_finetune"] = replace(cfgs["assembled_finetune"], base_lr=self.finetune_lr,
                                             total_iters=self.finetune_iters, lr_step_iters=step(self.finetune_iters))
        return cfgs


def make_split(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    ds = dataset_from_scenes(synth.generate_scenes(cfg.n_scenes, (cfg.hw, cfg.hw), cfg.data_seed))
    return ds.subset(range(cfg.n_train)), ds.subset(range(cfg.n_train, cfg.n_scenes))


def score_maps(model, ds: Dataset, tile: int | None = None, strides=None) -> list[tiling.ScoreMap]:
    """Tiled prediction for every raster; defaults to one tile per raster."""
    tile = tile or ds.labels.shape[1]
    strides = strides or (tile,)
    return [tiling.predict_raster(model, ds.images[i], ds.heights[i], tile, strides) for i in range(len(ds))]


def evaluate_maps(maps: list[tiling.ScoreMap], ds: Dataset) -> metrics.ConfusionMatrix:
    cm = metrics.ConfusionMatrix(np.zeros((ds.num_classes,) * 2, np.int64))
    for m, ref in zip(maps, ds.labels):
        cm = cm + metrics.confusion(tiling.argmax_labels(m).values, ref, ds.num_classes, ds.ignore_label)
    return cm


def train_plain_segmenter(train: Dataset, cfg: ExperimentConfig, seed: int) -> G.ModelGraph:
    """SEG·H without boundary input, on the assembled arm's segmenter schedule."""
    cfgs = cfg.stage_configs(seed)
    seg = G.build_seg_h(cfg.arch(), seed=seed + 1)
    T.train_stage(seg, train, cfgs["segmenter_pretrain"])
    T.train_stage(seg, train, replace(cfgs["assembled_finetune"], stage="segmenter_pretrain"))
    return seg


def train_assembled(train: Dataset, cfg: ExperimentConfig, seed: int, workdir=None, **kw) -> T.PipelineResult:
    with tempfile.TemporaryDirectory() as tmp:
        return T.staged_pipeline(train, cfg.arch(), cfg.stage_configs(seed), workdir or tmp, seed=seed, **kw)


def train_fcn(train: Dataset, cfg: ExperimentConfig, seed: int) -> G.ModelGraph:
    cfgs = cfg.stage_configs(seed)
    fcn = G.build_fcn_style(cfg.arch(), seed=seed + 7)
    T.train_stage(fcn, train, cfgs["segmenter_pretrain"])
    T.train_stage(fcn, train, replace(cfgs["assembled_finetune"], stage="segmenter_pretrain"))
    return fcn


def compare(cfg: ExperimentConfig, seeds=(0, 1, 2), split=None, keep_models: bool = False) -> dict:
    """Validation OA of both arms per seed.

    With ``keep_models`` the trained graphs are returned under ``"models"``,
    keyed by seed, as ``{"assembled": ..., "plain": ...}``.
    """
    train, val = split or make_split(cfg)
    rows, models = [], {}
    for seed in seeds:
        t0 = time.time()
        asm = train_assembled(train, cfg, seed).graph
        oa_asm = metrics.overall_accuracy(evaluate_maps(score_maps(asm, val), val))
        seg = train_plain_segmenter(train, cfg, seed)
        oa_seg = metrics.overall_accuracy(evaluate_maps(score_maps(seg, val), val))
        rows.append({"seed": seed, "assembled": oa_asm, "plain": oa_seg, "seconds": time.time() - t0})
        if keep_models:
            models[seed] = {"assembled": asm, "plain": seg}
        log.info("seed %d: assembled %.4f plain %.4f (%.0fs)", seed, oa_asm, oa_seg, rows[-1]["seconds"])
    out = {
        "rows": rows,
        "median_assembled": float(np.median([r["assembled"] for r in rows])),
        "median_plain": float(np.median([r["plain"] for r in rows])),
    }
    if keep_models:
        out["models"] = models
    return out
