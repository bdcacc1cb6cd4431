"""Command-line entry point: ``edgeseg <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import tempfile
import traceback
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import formats, metrics, synth, tiling
from . import graph as G
from . import training as T
from .boundaries import LabelMap, make_boundary_target
from .config import PipelineConfig, load_config
from .data import CLASS_NAMES, IGNORE_LABEL, list_scenes, load_dataset, load_scene_inputs, scene_paths
from .ops import ConfigError, DataError, ShapeError

log = logging.getLogger("edgeseg")

MODEL_FILE = "model.json"
WEIGHTS_FILE = "final.edgw"
USER_ERRORS = (ConfigError, DataError, ShapeError, formats.FormatError, G.WeightMismatchError,
               T.TrainingDivergedError, FileNotFoundError, NotADirectoryError, ValueError)


def _strides(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"strides must be comma-separated integers, got {text!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("need at least one positive stride")
    return vals


def _mix(text: str) -> dict:
    out = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        k, sep, v = item.partition("=")
        if not sep or k not in synth.DEFAULT_MIX:
            raise argparse.ArgumentTypeError(f"class mix entries look like road=1.0; keys {sorted(synth.DEFAULT_MIX)}")
        out[k] = float(v)
    return out


def _split_names(names: list[str], split: str, val_fraction: float) -> list[str]:
    n_val = int(round(len(names) * val_fraction))
    if split == "train":
        return names[: len(names) - n_val]
    if split == "val":
        return names[len(names) - n_val:]
    return names


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    names = synth.synth_generate(args.out, args.n, (args.hw, args.hw), args.mix, args.seed,
                                 args.radius, args.truncation, args.beta_mode)
    print(f"wrote {len(names)} scenes to {args.out}")
    return 0


def cmd_boundaries(args) -> int:
    labels = formats.read_label_png(args.labels)
    tgt = make_boundary_target(LabelMap(labels, len(CLASS_NAMES), IGNORE_LABEL), args.radius, args.truncation, args.beta_mode)
    out = Path(args.out)
    formats.write_boundary_target(out, tgt.values, tgt.beta, args.radius, tgt.truncation, tgt.boundary_free)
    preview = Path(args.preview) if args.preview else out.with_suffix(".png")
    formats.write_png(preview, np.rint(tgt.values * 255))
    flag = " boundary_free" if tgt.boundary_free else ""
    print(f"{out}: beta={tgt.beta:.6f} radius={args.radius} truncation={tgt.truncation:g}{flag}")
    return 0


def _build_segmenter(kind: str, arch: G.ArchConfig, seed: int) -> G.ModelGraph:
    if kind == "fcn":
        return G.build_fcn_style(arch, seed=seed + 7)
    return G.build_multiscale_seg(arch, arch.scales, seed=seed + 1)


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    seed = cfg.pipeline.seed if args.seed is None else args.seed
    data_dir = args.data or cfg.data.dir
    names = _split_names(list_scenes(data_dir), "train", cfg.data.val_fraction)
    if not names:
        raise DataError(f"no training scenes in {data_dir}")
    ds = load_dataset(data_dir, names, cfg.data.beta_mode)
    out = Path(args.out or cfg.pipeline.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stages = {k: replace(v, seed=v.seed + seed) for k, v in cfg.stages.items()}
    if args.model == "assembled":
        res = T.staged_pipeline(ds, cfg.arch, stages, out, cfg.augment, cfg.pipeline.skip_boundary_pretrain,
                                cfg.pipeline.reinject_skip, seed, log_every=args.log_every)
        graph, traces = res.graph, res.traces
        arch = replace(cfg.arch, boundary_channels=True, reinject_skip=cfg.pipeline.reinject_skip)
    else:
        graph = _build_segmenter(args.model, cfg.arch, seed)
        _, tr = T.train_stage(graph, ds, stages["segmenter_pretrain"], cfg.augment, args.log_every)
        traces, arch = {"segmenter_pretrain": tr}, cfg.arch
    G.save_weights(graph, out / WEIGHTS_FILE)
    rows = [r for tr in traces.values() for r in tr]
    T.write_trace_csv(out / "loss_trace.csv", rows)
    meta = {"model": args.model, "arch": asdict(arch), "seed": seed,
            "reinject_skip": cfg.pipeline.reinject_skip, "weights": WEIGHTS_FILE}
    (out / MODEL_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True))
    print(f"trained {args.model} on {len(ds)} scenes; final loss {rows[-1].loss:.4f}; weights in {out / WEIGHTS_FILE}")
    return 0


def load_model(model_dir) -> G.ModelGraph:
    model_dir = Path(model_dir)
    meta = json.loads((model_dir / MODEL_FILE).read_text())
    arch_d = meta["arch"]
    arch_d["dropout"] = tuple(arch_d["dropout"])
    arch = G.ArchConfig(**arch_d)
    if meta["model"] == "assembled":
        base = replace(arch, boundary_channels=False, reinject_skip=False)
        graph = G.assemble_boundary_segmenter(G.build_hed_h(base), G.build_multiscale_seg(arch, arch.scales), meta["reinject_skip"])
    else:
        graph = _build_segmenter(meta["model"], arch, 0)
    G.load_weights(graph, model_dir / meta["weights"])
    return graph


def cmd_infer(args) -> int:
    graph = load_model(args.model)
    names = _split_names(list_scenes(args.data), args.split, args.val_fraction)
    if not names:
        raise DataError(f"no scenes selected in {args.data}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in names:
        image, height = load_scene_inputs(args.data, name)
        sm = tiling.predict_raster(graph, image, height, args.tile, args.strides, normalize=args.normalize)
        formats.write_scores(out / f"{name}_scores.bin", sm.scores.astype(np.float32), sm.coverage)
        formats.write_label_png(out / f"{name}_pred.png", tiling.argmax_labels(sm).values)
    print(f"predicted {len(names)} rasters into {out}")
    return 0


def _read_scoremap(path) -> tiling.ScoreMap:
    scores, coverage = formats.read_scores(path)
    return tiling.ScoreMap(scores.astype(np.float64), coverage)


def cmd_ensemble(args) -> int:
    dirs = [Path(d) for d in args.inputs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = sorted(p.name for p in dirs[0].glob("*_scores.bin"))
    if not names:
        raise DataError(f"no *_scores.bin files in {dirs[0]}")
    for fname in names:
        sm = tiling.ensemble_average([_read_scoremap(d / fname) for d in dirs])
        formats.write_scores(out / fname, sm.scores.astype(np.float32), sm.coverage)
        formats.write_label_png(out / fname.replace("_scores.bin", "_pred.png"), tiling.argmax_labels(sm).values)
    print(f"averaged {len(dirs)} models over {len(names)} rasters into {out}")
    return 0


def _pairs(pred: Path, ref: Path) -> list[tuple[Path, Path]]:
    if pred.is_file():
        return [(pred, ref)]
    pairs = []
    for p in sorted(pred.glob("*_pred.png")):
        r = scene_paths(ref, p.name[: -len("_pred.png")])["labels"]
        if not r.exists():
            raise FileNotFoundError(f"no reference labels {r} for {p}")
        pairs.append((p, r))
    if not pairs:
        raise DataError(f"no *_pred.png files in {pred}")
    return pairs


def cmd_eval(args) -> int:
    k = len(CLASS_NAMES)
    cm = metrics.ConfusionMatrix(np.zeros((k, k), np.int64))
    for p, r in _pairs(Path(args.pred), Path(args.ref)):
        cm = cm + metrics.confusion(formats.read_label_png(p), formats.read_label_png(r), k, IGNORE_LABEL)
    print(metrics.report(cm, CLASS_NAMES), end="")
    if args.csv:
        Path(args.csv).write_text(metrics.report_csv(cm, CLASS_NAMES))
    failures = metrics.check_thresholds(cm, args.min_oa)
    for f in failures:
        print(f"threshold failed: {f}", file=sys.stderr)
    return 1 if failures else 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="edgeseg", description=__doc__,
                                 epilog="EDGESEG_THREADS sets the BLAS thread count.",
                                 formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    def target_flags(p):
        p.add_argument("--radius", type=int, default=3, help="boundary band dilation radius")
        p.add_argument("--truncation", type=float, default=4.0, help="distance transform truncation")
        p.add_argument("--beta-mode", default="background_total", choices=["background_total", "background_boundary"])

    p = sub.add_parser("synth", help="generate synthetic scenes", formatter_class=fmt)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--hw", type=int, default=128)
    p.add_argument("--mix", type=_mix, default=None, help="class weights, e.g. car=2,tree=0.5")
    p.add_argument("--seed", type=int, default=0)
    target_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("boundaries", help="label PNG -> boundary target file", formatter_class=fmt)
    p.add_argument("labels")
    p.add_argument("--out", required=True)
    p.add_argument("--preview", default=None, help="preview PNG (default: OUT with .png)")
    target_flags(p)
    p.set_defaults(func=cmd_boundaries)

    p = sub.add_parser("train", help="run the staged training pipeline", formatter_class=fmt)
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--data", default=None, help="scene directory (overrides data.dir)")
    p.add_argument("--out", default=None, help="output directory (overrides pipeline.out_dir)")
    p.add_argument("--model", default="assembled", choices=["assembled", "seg", "fcn"])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="tiled prediction over a scene directory", formatter_class=fmt)
    p.add_argument("--model", required=True, help="directory written by train")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tile", type=int, default=256)
    p.add_argument("--strides", type=_strides, default=(150, 200, 220))
    p.add_argument("--split", choices=["all", "train", "val"], default="all")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--normalize", action="store_true", help="divide summed scores by coverage")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ensemble", help="average score maps of several models", formatter_class=fmt)
    p.add_argument("inputs", nargs="+", help="directories of *_scores.bin from infer")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("eval", help="confusion report of predicted vs reference labels", formatter_class=fmt)
    p.add_argument("--pred", required=True, help="predicted label PNG or directory of *_pred.png")
    p.add_argument("--ref", required=True, help="reference label PNG or scene directory")
    p.add_argument("--csv", default=None)
    p.add_argument("--min-oa", type=float, default=None, help="exit 1 if OA (0-1) is lower")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"edgeseg {args.command}: error: {msg}", file=sys.stderr)
        return 2
    except Exception:
        with tempfile.NamedTemporaryFile("w", prefix="edgeseg-crash-", suffix=".txt", delete=False) as fh:
            fh.write(f"argv: {sys.argv}\n")
            traceback.print_exc(file=fh)
        print(f"edgeseg {args.command}: internal error; diagnostic written to {fh.name}", file=sys.stderr)
        return 70


if __name__ == "__main__":
    sys.exit(main())
