"""Acceptance checks. Each test prints one ``PASS``/``FAIL criterion N`` line,
collected again in the terminal summary. The synthetic experiment (6, 7)
takes roughly a quarter of an hour on one CPU core."""

import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from edgeseg import experiment as E
from edgeseg import graph as G
from edgeseg import metrics, synth, tiling
from edgeseg import training as T
from edgeseg.data import dataset_from_scenes
from edgeseg.gradcheck import graph_grad_check

TESTS = Path(__file__).parent


def report(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)


def run_pytest(*args) -> tuple[bool, str, float]:
    t0 = time.time()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *args],
                          capture_output=True, text=True, cwd=TESTS.parent)
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr.strip()[-200:]
    return proc.returncode == 0, tail, time.time() - t0


# --------------------------------------------------------------------------


def test_criterion_1_gradients():
    ok_ops, tail, secs_ops = run_pytest(str(TESTS / "test_ops.py"), "-k", "gradients")
    tiny = G.ArchConfig(base_width=4, depth=2)
    seg_b = G.replace(tiny, boundary_channels=True, reinject_skip=True)
    rng = np.random.default_rng(0)
    graphs = {
        "hed": G.build_hed_h(tiny), "seg": G.build_seg_h(tiny), "fcn": G.build_fcn_style(tiny),
        "multiscale": G.build_multiscale_seg(tiny, 3),
        "assembled": G.assemble_boundary_segmenter(G.build_hed_h(tiny), G.build_seg_h(seg_b), True),
    }
    t0 = time.time()
    errs = {}
    for name, g in graphs.items():
        feeds = {"image": rng.standard_normal((2, 3, 16, 16)), "height": rng.standard_normal((2, 2, 16, 16))}
        errs[name] = graph_grad_check(g, feeds, 1e-3).max_rel_error
    secs = secs_ops + time.time() - t0
    ok = ok_ops and max(errs.values()) < 1e-3 and secs < 120
    worst = max(errs, key=errs.get)
    report(1, ok, f"layer grads [{tail}]; worst graph rel err {errs[worst]:.1e} ({worst}) < 1e-3; {secs:.0f}s < 120s")
    assert ok


def test_criterion_2_kernel_oracles():
    ok1, t1, s1 = run_pytest(str(TESTS / "test_ops.py"), "-k", "naive or exhaustive or unpool")
    ok2, t2, s2 = run_pytest(str(TESTS / "test_boundaries.py"), "-k", "truncated_edt_matches")
    ok = ok1 and ok2 and s1 + s2 < 60
    report(2, ok, f"conv/pool oracles [{t1}]; EDT brute force [{t2}]; {s1 + s2:.0f}s < 60s")
    assert ok


def test_criterion_3_boundary_targets():
    ok, tail, secs = run_pytest(str(TESTS / "test_boundaries.py"), "-k", "invariants_on_random_maps or two_region")
    report(3, ok, f"50 random 64x64 maps + two-region example [{tail}]")
    assert ok


REF_P = [91.6, 95.0, 85.5, 87.5, 92.1]
REF_R = [93.2, 95.3, 82.5, 92.3, 72.6]
REF_F1 = [92.4, 95.2, 83.9, 89.9, 81.2]


def _matrix_with(p: float, r: float, scale: float = 1e8) -> metrics.ConfusionMatrix:
    """Two-class counts whose class 0 has precision ``p`` and recall ``r`` (percent)."""
    tp = scale
    return metrics.ConfusionMatrix(np.rint([[tp, tp * (100 / p - 1)], [tp * (100 / r - 1), scale]]))


def test_criterion_4_metrics_fidelity():
    diffs = []
    for p, r, f in zip(REF_P, REF_R, REF_F1):
        got = 100 * metrics.per_class_prf(_matrix_with(p, r))[0].f1
        diffs.append(abs(got - f))
    bad = [i for i, d in enumerate(diffs) if d > 0.05]
    ok = not bad
    report(4, ok, "F1 from reference P/R pairs, |diff| per class = "
           + ", ".join(f"{d:.3f}" for d in diffs) + f" (tol 0.05; {len(bad)} over)")
    assert ok


class ConstantStub:
    inputs = {"image": 3, "height": 2}

    def forward(self, feeds, mode="infer"):
        n, _, h, w = feeds["image"].shape
        return {"class_probs": np.broadcast_to(np.array([0.1, 0.6, 0.3])[None, :, None, None], (n, 3, h, w)).copy()}


class PixelStub(ConstantStub):
    def forward(self, feeds, mode="infer"):
        x = feeds["image"]
        e = np.exp(np.stack([np.sin(x[:, 0] * (k + 1)) for k in range(3)], axis=1))
        return {"class_probs": e / e.sum(axis=1, keepdims=True)}


def test_criterion_5_tiling():
    rng = np.random.default_rng(0)
    sizes = [tuple(int(v) for v in rng.integers(256, 1201, 2)) for _ in range(20)]
    min_cov = min(int(_coverage(hw, s).min()) for hw in sizes for s in tiling.DEFAULT_STRIDES)
    sm = tiling.predict_raster(ConstantStub(), np.zeros((3, 700, 530)), np.zeros((2, 700, 530)))
    constant = bool((tiling.argmax_labels(sm).values == 1).all())
    img, hgt = rng.standard_normal((3, 600, 450)), rng.standard_normal((2, 600, 450))
    a = tiling.predict_raster(PixelStub(), img, hgt)
    b = tiling.predict_raster(PixelStub(), img, hgt, batch=3, order_rng=np.random.default_rng(1))
    order_err = float(np.abs(a.scores - b.scores).max())
    ok = min_cov >= 1 and constant and order_err <= 1e-6
    report(5, ok, f"min coverage {min_cov} over 20 sizes x 3 strides; constant argmax {constant}; order diff {order_err:.1e}")
    assert ok


def _coverage(hw, stride):
    cov = np.zeros(hw, np.int32)
    for r, c in tiling.plan_tiles(hw, tiling.DEFAULT_TILE, stride).windows:
        cov[r:r + tiling.DEFAULT_TILE, c:c + tiling.DEFAULT_TILE] += 1
    return cov


# --------------------------------------------------------------------------
# synthetic experiment, shared by 6 and 7


@pytest.fixture(scope="module")
def experiment():
    cfg = E.ExperimentConfig()
    split = E.make_split(cfg)
    t0 = time.time()
    res = E.compare(cfg, seeds=(0, 1, 2), split=split, keep_models=True)
    res["seconds"] = time.time() - t0
    return cfg, split, res


def test_criterion_6_synthetic_experiment(experiment):
    cfg, _, res = experiment
    rows = res["rows"]
    min_asm = min(r["assembled"] for r in rows)
    ok = min_asm >= 0.90 and res["median_assembled"] >= res["median_plain"] and res["seconds"] < 45 * 60
    per_seed = "; ".join(f"s{r['seed']} {r['assembled']:.4f}/{r['plain']:.4f}" for r in rows)
    report(6, ok, f"assembled/plain val OA {per_seed}; median {res['median_assembled']:.4f} vs {res['median_plain']:.4f}; "
           f"min assembled {min_asm:.4f} >= 0.90; {res['seconds'] / 60:.1f} min")
    assert ok


def test_criterion_7_ensemble(experiment):
    cfg, (train, val), res = experiment
    asm = res["models"][0]["assembled"]
    fcn = E.train_fcn(train, cfg, 0)
    maps_a, maps_f = E.score_maps(asm, val), E.score_maps(fcn, val)
    ens = [tiling.ensemble_average([a, f]) for a, f in zip(maps_a, maps_f)]
    sum_err = max(float(np.abs(m.scores.sum(axis=0) - 1).max()) for m in ens)
    oa = {k: metrics.overall_accuracy(E.evaluate_maps(m, val)) for k, m in (("asm", maps_a), ("fcn", maps_f), ("ens", ens))}
    ok = sum_err <= 1e-5 and oa["ens"] >= min(oa["asm"], oa["fcn"])
    report(7, ok, f"ensemble OA {oa['ens']:.4f} vs members {oa['asm']:.4f}/{oa['fcn']:.4f}; max |sum-1| {sum_err:.1e}")
    assert ok


# --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_data():
    return dataset_from_scenes(synth.generate_scenes(12, (64, 64), seed=21))


def test_criterion_8_determinism(small_data, tmp_path):
    arch = G.ArchConfig(base_width=4, depth=2)
    cfgs = T.default_train_configs(seed=3, iters=15, crop=32)
    blobs, graphs = [], []
    for k in range(2):
        res = T.staged_pipeline(small_data, arch, cfgs, tmp_path / f"run{k}", seed=3)
        G.save_weights(res.graph, tmp_path / f"final{k}.edgw")
        blobs.append({p.name: p.read_bytes() for p in sorted((tmp_path / f"run{k}").glob("*.edgw"))})
        blobs[-1]["final"] = (tmp_path / f"final{k}.edgw").read_bytes()
        graphs.append(res.graph)
    same_files = blobs[0] == blobs[1]
    feeds = {"image": small_data.images[:2], "height": small_data.heights[:2]}
    before = graphs[0].forward(feeds)["class_probs"]
    loaded = graphs[0].copy()
    for v in loaded.params.values():
        v[...] = 0
    G.load_weights(loaded, tmp_path / "final0.edgw")
    after = loaded.forward(feeds)["class_probs"]
    G.save_weights(loaded, tmp_path / "again.edgw")
    ok = same_files and np.array_equal(before, after) and (tmp_path / "again.edgw").read_bytes() == blobs[0]["final"]
    report(8, ok, f"{len(blobs[0])} weight files bit-identical across runs: {same_files}; "
           f"save/load/forward identical: {np.array_equal(before, after)}")
    assert ok


def test_criterion_9_staged_training_value(small_data, tmp_path):
    arch = G.ArchConfig(base_width=8, depth=3)
    cfgs = T.default_train_configs(seed=0, iters=150, crop=48)
    staged = T.staged_pipeline(small_data, arch, cfgs, tmp_path / "staged", seed=0)
    skipped = T.staged_pipeline(small_data, arch, cfgs, tmp_path / "skip", seed=0, skip_boundary_pretrain=True)
    a, b = staged.initial_losses["assembled_finetune"], skipped.initial_losses["assembled_finetune"]
    ok = b > a
    report(9, ok, f"initial fine-tune loss staged {a:.4f} < skipped {b:.4f}")
    assert ok
