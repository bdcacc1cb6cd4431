"""Staged SGD training with geometric augmentation."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import graph as G
from .boundaries import boundary_loss_weights
from .data import Dataset
from .initializers import xavier_init  # noqa: F401  (public re-export)
from .ops import loss_softmax_xent, loss_weighted_l2

log = logging.getLogger(__name__)

STAGES = ("boundary_pretrain", "segmenter_pretrain", "per_scale", "assembled_finetune")
STAGE_LOSSES = {
    "boundary_pretrain": {"l2"},
    "segmenter_pretrain": {"xent"},
    "per_scale": {"xent"},
    "assembled_finetune": {"l2", "xent"},
}


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    base_lr: float = 1e-2
    lr_step_iters: int = 12000
    lr_factor: float = 0.1
    total_iters: int = 1000
    batch_size: int = 2
    momentum: float = 0.9
    weight_decay: float = 0.00015
    seed: int = 0
    stage: str = "segmenter_pretrain"
    crop: int | None = None
    augment: bool = True
    # parameter-name prefix -> learning-rate multiplier (0 freezes)
    lr_scales: dict[str, float] = field(default_factory=dict)

    def validate(self) -> "TrainConfig":
        if min(self.base_lr, self.lr_factor, self.momentum, self.weight_decay) < 0:
            raise ValueError("learning rates, momentum and weight decay must be >= 0")
        if self.batch_size < 1 or self.total_iters < 0 or self.lr_step_iters < 1:
            raise ValueError("batch_size and lr_step_iters must be >= 1, total_iters >= 0")
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; use one of {STAGES}")
        return self


@dataclass
class AugmentConfig:
    scale_range: tuple[float, float] = (1.0, 1.2)
    rotation_range: tuple[float, float] = (0.0, 15.0)
    shear_range: tuple[float, float] = (0.0, 8.0)
    translation_range: tuple[float, float] = (-5.0, 5.0)
    hflip: float = 0.5
    vflip: float = 0.5


@dataclass
class TraceRow:
    iter: int
    stage: str
    loss: float
    lr: float


def lr_at(it: int, cfg: TrainConfig) -> float:
    """Step schedule: ``base_lr * lr_factor ** (it // lr_step_iters)``."""
    if it < 0:
        raise ValueError("iteration must be >= 0")
    return cfg.base_lr * cfg.lr_factor ** (it // cfg.lr_step_iters)


def _lr_scale(name: str, scales: dict[str, float]) -> float:
    best, scale = -1, 1.0
    for prefix, s in scales.items():
        if name.startswith(prefix) and len(prefix) > best:
            best, scale = len(prefix), s
    return scale


def sgd_step(params: dict, grads: dict, lr: float, momentum: float, weight_decay: float,
             velocity: dict, lr_scales: dict[str, float] | None = None) -> dict:
    """In-place momentum SGD: ``v = m*v - lr*(g + wd*w); w += v``."""
    for name, w in params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {w.shape} for {name!r}")
        eff = lr * _lr_scale(name, lr_scales or {})
        if eff == 0:
            continue
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(w)
        v *= momentum
        v -= eff * (g + weight_decay * w)
        w += v
    return params


# --------------------------------------------------------------------------
# augmentation


def sample_affine(cfg: AugmentConfig, rng: np.random.Generator) -> dict:
    return {
        "scale": rng.uniform(*cfg.scale_range),
        "rotation": rng.uniform(*cfg.rotation_range),
        "shear": rng.uniform(*cfg.shear_range),
        "translation": (rng.uniform(*cfg.translation_range), rng.uniform(*cfg.translation_range)),
        "hflip": bool(rng.random() < cfg.hflip),
        "vflip": bool(rng.random() < cfg.vflip),
    }


IDENTITY_AFFINE = {"scale": 1.0, "rotation": 0.0, "shear": 0.0, "translation": (0.0, 0.0), "hflip": False, "vflip": False}


def _affine_matrix(p: dict) -> np.ndarray:
    """Forward map in (row, col) coordinates: scale, then shear, then rotation."""
    th = math.radians(p["rotation"])
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    shear = np.array([[1.0, 0.0], [math.tan(math.radians(p["shear"])), 1.0]])
    return rot @ shear @ (p["scale"] * np.eye(2))


def _is_identity_geometry(p: dict) -> bool:
    return p["scale"] == 1 and p["rotation"] == 0 and p["shear"] == 0 and tuple(p["translation"]) == (0, 0)


def _warp(plane: np.ndarray, matrix, offset, order: int, mode: str, cval: float) -> np.ndarray:
    return ndimage.affine_transform(plane, matrix, offset=offset, order=order, mode=mode, cval=cval, prefilter=False)


def apply_affine(params: dict, images=(), labels=(), targets=(), ignore_label: int = 255):
    """Apply one sampled transform to aligned rasters.

    ``images`` are ``(..., h, w)`` real arrays resampled bilinearly;
    ``labels`` and ``targets`` use nearest neighbour, labels falling outside
    the source become ``ignore_label`` and targets 0. Also returns a validity
    mask (pixels that map inside the source).
    """
    shape = None
    for arr in (*images, *labels, *targets):
        shape = arr.shape[-2:] if shape is None else shape
        if arr.shape[-2:] != shape:
            raise ValueError("rasters are not aligned")
    h, w = shape
    valid = np.ones((h, w), bool)
    imgs, labs, tgts = [np.array(a, copy=True) for a in images], [np.array(a, copy=True) for a in labels], [np.array(a, copy=True) for a in targets]
    if not _is_identity_geometry(params):
        fwd = _affine_matrix(params)
        inv = np.linalg.inv(fwd)
        center = np.array([(h - 1) / 2, (w - 1) / 2])
        offset = center - inv @ (center + np.asarray(params["translation"]))

        def each(arr, order, mode, cval):
            flat = arr.reshape(-1, h, w)
            out = np.stack([_warp(p, inv, offset, order, mode, cval) for p in flat])
            return out.reshape(arr.shape).astype(arr.dtype)

        imgs = [each(a, 1, "nearest", 0.0) for a in imgs]
        labs = [each(a, 0, "constant", ignore_label) for a in labs]
        tgts = [each(a, 0, "constant", 0.0) for a in tgts]
        valid = _warp(np.ones((h, w)), inv, offset, 0, "constant", 0.0) > 0.5
    flips = ()
    if params["vflip"]:
        flips += (-2,)
    if params["hflip"]:
        flips += (-1,)
    if flips:
        imgs = [np.flip(a, flips).copy() for a in imgs]
        labs = [np.flip(a, flips).copy() for a in labs]
        tgts = [np.flip(a, flips).copy() for a in tgts]
        valid = np.flip(valid, tuple(f + 2 for f in flips)).copy()
    return imgs, labs, tgts, valid


def augment_pair(image, height, labels, cfg: AugmentConfig, rng: np.random.Generator,
                 boundary=None, ignore_label: int = 255, params: dict | None = None):
    """Transform an aligned (image, height, labels[, boundary]) set with one
    random affine + flips; returns a tuple in the same order."""
    params = params or sample_affine(cfg, rng)
    targets = () if boundary is None else (boundary,)
    imgs, labs, tgts, _ = apply_affine(params, (image, height), (labels,), targets, ignore_label)
    out = (imgs[0], imgs[1], labs[0])
    return out + (tgts[0],) if boundary is not None else out


# --------------------------------------------------------------------------
# batches and losses


@dataclass
class Batch:
    image: np.ndarray
    height: np.ndarray
    labels: np.ndarray
    boundary: np.ndarray
    weights: np.ndarray


def make_batch(ds: Dataset, idx, crop: int | None, rng: np.random.Generator,
               aug: AugmentConfig | None) -> Batch:
    idx = np.asarray(idx)
    h, w = ds.labels.shape[1:]
    image, height, labels, bnd = ds.images[idx], ds.heights[idx], ds.labels[idx], ds.boundaries[idx]
    if crop is not None and (crop < h or crop < w):
        ch, cw = min(crop, h), min(crop, w)
        parts = [[], [], [], []]
        for k in range(len(idx)):
            y0 = int(rng.integers(0, h - ch + 1))
            x0 = int(rng.integers(0, w - cw + 1))
            sl = (slice(y0, y0 + ch), slice(x0, x0 + cw))
            parts[0].append(image[k][(slice(None),) + sl])
            parts[1].append(height[k][(slice(None),) + sl])
            parts[2].append(labels[k][sl])
            parts[3].append(bnd[k][sl])
        image, height, labels, bnd = (np.stack(p) for p in parts)
    valid = np.ones(labels.shape, bool)
    if aug is not None:
        params = sample_affine(aug, rng)
        (image, height), (labels,), (bnd,), v = apply_affine(params, (image, height), (labels,), (bnd,), ds.ignore_label)
        valid = np.broadcast_to(v, labels.shape)
    weights = np.stack([
        boundary_loss_weights(bnd[k], ds.betas[i], ds.beta_mode, bool(ds.boundary_free[i]))
        for k, i in enumerate(idx)
    ]) * valid
    return Batch(image.astype(np.float32), height.astype(np.float32), labels, bnd.astype(np.float32), weights.astype(np.float32))


def graph_inputs(graph: G.ModelGraph, image, height, boundary=None) -> dict:
    """Map raster batches onto a graph's declared inputs.

    Standalone segmenters built for boundary channels are fed the given
    boundary map directly.
    """
    feeds = {"image": image, "height": height}
    out = {}
    for name, chans in graph.inputs.items():
        if name == "boundary":
            out[name] = boundary[:, None]
            continue
        x = feeds[name]
        if chans == x.shape[1] + 1:
            if boundary is None:
                raise ValueError(f"graph input {name!r} needs a boundary channel")
            x = np.concatenate([x, boundary[:, None]], axis=1)
        out[name] = x
    return out


def compute_losses(graph: G.ModelGraph, batch: Batch, active: set[str], ignore_label: int = 255):
    """Evaluate every active loss node on the cached forward pass.

    Returns ``(total, seeds, parts)`` where ``seeds`` feed ``graph.backward``.
    """
    total, seeds, parts = 0.0, {}, {}
    for node in graph.loss_nodes():
        kind = node.attrs["loss"]
        if kind not in active:
            continue
        pred = graph.activation(node.name)
        if kind == "xent":
            val, grad = loss_softmax_xent(pred, batch.labels, ignore_label)
        else:
            wts = batch.weights[:, None]
            if wts.sum() <= 0:
                continue
            val, grad = loss_weighted_l2(pred, batch.boundary[:, None].astype(pred.dtype), wts.astype(pred.dtype))
        weight = node.attrs.get("weight", 1.0)
        total += weight * val
        seeds[node.name] = (weight * grad).astype(pred.dtype)
        parts[node.name] = val
    return total, seeds, parts


def dataset_loss(graph: G.ModelGraph, dataset: Dataset, stage: str, batch_size: int = 8) -> float:
    """Pixel-weighted mean stage loss over whole rasters, inference mode, no
    augmentation. Used to compare stages on fixed data."""
    total, count = 0.0, 0
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        batch = make_batch(dataset, idx, None, np.random.default_rng(0), None)
        graph.forward(graph_inputs(graph, batch.image, batch.height, batch.boundary), "infer")
        total += compute_losses(graph, batch, STAGE_LOSSES[stage], dataset.ignore_label)[0] * len(idx)
        count += len(idx)
    return total / count


def train_stage(graph: G.ModelGraph, dataset: Dataset, cfg: TrainConfig,
                aug: AugmentConfig | None = None, log_every: int = 0) -> tuple[G.ModelGraph, list[TraceRow]]:
    """Run ``cfg.total_iters`` mini-batch SGD iterations on ``graph`` in place."""
    cfg.validate()
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if aug is None and cfg.augment:
        aug = AugmentConfig()
    if not cfg.augment:
        aug = None
    rng = np.random.default_rng(cfg.seed)
    active = STAGE_LOSSES[cfg.stage]
    velocity: dict[str, np.ndarray] = {}
    trace: list[TraceRow] = []
    n = len(dataset)
    for it in range(cfg.total_iters):
        idx = rng.choice(n, cfg.batch_size, replace=cfg.batch_size > n)
        batch = make_batch(dataset, idx, cfg.crop, rng, aug)
        graph.forward(graph_inputs(graph, batch.image, batch.height, batch.boundary), "train", rng)
        loss, seeds, parts = compute_losses(graph, batch, active, dataset.ignore_label)
        if not math.isfinite(loss):
            raise TrainingDivergedError(
                f"stage {cfg.stage}: loss became {loss} at iteration {it} (lr {lr_at(it, cfg):g}); "
                f"per-node losses: {parts}"
            )
        graph.backward(seeds)
        lr = lr_at(it, cfg)
        sgd_step(graph.params, graph.grads, lr, cfg.momentum, cfg.weight_decay, velocity, cfg.lr_scales)
        trace.append(TraceRow(it, cfg.stage, loss, lr))
        if log_every and (it % log_every == 0 or it == cfg.total_iters - 1):
            log.info("%s iter %d loss %.4f lr %g", cfg.stage, it, loss, lr)
    return graph, trace


def write_trace_csv(path, rows: list[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iter", "stage", "loss", "lr"])
        for r in rows:
            wr.writerow([r.iter, r.stage, repr(float(r.loss)), repr(float(r.lr))])


# --------------------------------------------------------------------------
# staged pipeline


def default_train_configs(seed: int = 0, iters: int = 500, crop: int | None = None) -> dict[str, TrainConfig]:
    """Per-stage defaults: batch 5 for the boundary detector, 2 for the
    segmenter stages, 1 with a 10x smaller rate for the assembled fine-tune."""
    return {
        "boundary_pretrain": TrainConfig(base_lr=1e-2, total_iters=iters, batch_size=5, seed=seed, stage="boundary_pretrain", crop=crop),
        "segmenter_pretrain": TrainConfig(base_lr=1e-2, total_iters=iters, batch_size=2, seed=seed + 1, stage="segmenter_pretrain", crop=crop),
        "per_scale": TrainConfig(base_lr=1e-2, total_iters=iters, batch_size=2, seed=seed + 2, stage="per_scale", crop=crop),
        "assembled_finetune": TrainConfig(base_lr=1e-3, total_iters=iters, batch_size=1, seed=seed + 3, stage="assembled_finetune", crop=crop),
    }


@dataclass
class PipelineResult:
    graph: G.ModelGraph
    traces: dict[str, list[TraceRow]]
    weight_files: dict[str, Path]
    # stage losses on the probe set before and after each stage's training
    initial_losses: dict[str, float]
    final_losses: dict[str, float]


def _frozen(cfg: TrainConfig, prefix: str) -> TrainConfig:
    scales = dict(cfg.lr_scales)
    scales[prefix] = 0.0
    return replace(cfg, lr_scales=scales)


def staged_pipeline(dataset: Dataset, arch: G.ArchConfig, train_cfgs: dict[str, TrainConfig], workdir,
                    aug: AugmentConfig | None = None, skip_boundary_pretrain: bool = False,
                    reinject_skip: bool = True, seed: int = 0, log_every: int = 0,
                    probe: Dataset | None = None) -> PipelineResult:
    """Boundary pretraining, segmenter pretraining behind the frozen detector
    (per scale, then jointly, for three-scale models) and end-to-end
    fine-tuning of the assembled network.

    Every stage writes its weights to ``workdir``; later stages import them by
    partial load. Stage losses are measured on ``probe`` (default: the first
    16 training rasters) before and after each stage.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    probe = probe if probe is not None else dataset.subset(np.arange(min(16, len(dataset))))
    traces: dict[str, list[TraceRow]] = {}
    files: dict[str, Path] = {}
    initial: dict[str, float] = {}
    final: dict[str, float] = {}

    def run(graph, stage_key, cfg, name):
        initial[name] = dataset_loss(graph, probe, cfg.stage)
        _, tr = train_stage(graph, dataset, cfg, aug, log_every)
        final[name] = dataset_loss(graph, probe, cfg.stage)
        traces[name] = tr
        files[name] = workdir / f"{name}.edgw"
        G.save_weights(graph, files[name])
        return graph

    hed = G.build_hed_h(arch, seed=seed)
    if not skip_boundary_pretrain:
        run(hed, "boundary_pretrain", train_cfgs["boundary_pretrain"], "boundary_pretrain")
    else:
        files["boundary_pretrain"] = workdir / "boundary_pretrain.edgw"
        G.save_weights(hed, files["boundary_pretrain"])

    seg_arch = replace(arch, boundary_channels=True, reinject_skip=reinject_skip)
    if arch.scales == 1:
        seg = G.build_seg_h(seg_arch, seed=seed + 1)
        asm = G.assemble_boundary_segmenter(hed.copy(), seg, reinject_skip)
        run(asm, "segmenter_pretrain", _frozen(train_cfgs["segmenter_pretrain"], "hed."), "segmenter_pretrain")
        final_graph = G.assemble_boundary_segmenter(G.build_hed_h(arch, seed=seed), G.build_seg_h(seg_arch, seed=seed + 1), reinject_skip)
        stage_files = ["boundary_pretrain", "segmenter_pretrain"]
    else:
        for k in range(3):
            branch = G.build_scale_branch(seg_arch, k, seed=seed + 1 + k)
            asm = G.assemble_boundary_segmenter(hed.copy(), branch, reinject_skip)
            run(asm, "segmenter_pretrain", _frozen(train_cfgs["segmenter_pretrain"], "hed."), f"segmenter_pretrain_s{k}")
        ms = G.assemble_boundary_segmenter(hed.copy(), G.build_multiscale_seg(seg_arch, 3, seed=seed + 1), reinject_skip)
        for k in range(3):
            G.load_weights(ms, files[f"segmenter_pretrain_s{k}"], strict=False)
        run(ms, "per_scale", _frozen(train_cfgs["per_scale"], "hed."), "per_scale")
        final_graph = G.assemble_boundary_segmenter(G.build_hed_h(arch, seed=seed), G.build_multiscale_seg(seg_arch, 3, seed=seed + 1), reinject_skip)
        stage_files = ["boundary_pretrain"] + [f"segmenter_pretrain_s{k}" for k in range(3)] + ["per_scale"]

    for name in stage_files:
        G.load_weights(final_graph, files[name], strict=False)
    run(final_graph, "assembled_finetune", train_cfgs["assembled_finetune"], "assembled_finetune")
    return PipelineResult(final_graph, traces, files, initial, final)
