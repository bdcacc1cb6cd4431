import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgeseg import graph as G
from edgeseg import synth
from edgeseg import training as T
from edgeseg.data import dataset_from_scenes

TINY = G.ArchConfig(base_width=4, depth=2)


@pytest.fixture(scope="module")
def toy():
    return dataset_from_scenes(synth.generate_scenes(6, (64, 64), seed=11))


def test_lr_schedule_examples():
    cfg = T.TrainConfig(base_lr=0.5)
    assert T.lr_at(0, cfg) == 0.5
    assert T.lr_at(11999, cfg) == 0.5
    assert T.lr_at(12000, cfg) == pytest.approx(0.05)
    assert T.lr_at(24001, cfg) == pytest.approx(0.005)
    with pytest.raises(ValueError):
        T.lr_at(-1, cfg)


def test_sgd_update_rule():
    w = {"a.w": np.array([1.0, -2.0])}
    g = {"a.w": np.array([0.5, 0.5])}
    vel = {}
    T.sgd_step(w, g, lr=0.1, momentum=0.9, weight_decay=0.01, velocity=vel)
    v1 = -0.1 * (np.array([0.5, 0.5]) + 0.01 * np.array([1.0, -2.0]))
    np.testing.assert_allclose(w["a.w"], np.array([1.0, -2.0]) + v1)
    prev = w["a.w"].copy()
    T.sgd_step(w, g, lr=0.1, momentum=0.9, weight_decay=0.01, velocity=vel)
    v2 = 0.9 * v1 - 0.1 * (np.array([0.5, 0.5]) + 0.01 * prev)
    np.testing.assert_allclose(w["a.w"], prev + v2)


def test_sgd_zero_lr_and_frozen_prefixes():
    rng = np.random.default_rng(0)
    w = {"hed.x": rng.standard_normal(3), "seg.x": rng.standard_normal(3), "seg.y.z": rng.standard_normal(3)}
    before = {k: v.copy() for k, v in w.items()}
    g = {k: np.ones(3) for k in w}
    T.sgd_step(w, g, 0.0, 0.9, 0.1, {})
    for k in w:
        np.testing.assert_array_equal(w[k], before[k])
    T.sgd_step(w, g, 0.1, 0.9, 0.0, {}, lr_scales={"hed.": 0.0, "seg.": 1.0, "seg.y.": 2.0})
    np.testing.assert_array_equal(w["hed.x"], before["hed.x"])
    np.testing.assert_allclose(w["seg.x"], before["seg.x"] - 0.1)
    np.testing.assert_allclose(w["seg.y.z"], before["seg.y.z"] - 0.2)  # longest prefix wins


def test_weight_decay_shrinks_norm_on_zero_gradient():
    w = {"p": np.random.default_rng(1).standard_normal(50)}
    vel = {}
    norms = [np.linalg.norm(w["p"])]
    for _ in range(20):
        T.sgd_step(w, {"p": np.zeros(50)}, 0.05, 0.9, 0.00015, vel)
        norms.append(np.linalg.norm(w["p"]))
    assert all(b < a for a, b in zip(norms, norms[1:]))


def test_sgd_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        T.sgd_step({"p": np.zeros(3)}, {"p": np.zeros(4)}, 0.1, 0.9, 0.0, {})


def test_identity_augmentation_is_noop():
    rng = np.random.default_rng(0)
    img, hgt = rng.random((3, 16, 16)), rng.random((2, 16, 16))
    lab = rng.integers(0, 5, (16, 16))
    (i2, h2), (l2,), _, valid = T.apply_affine(T.IDENTITY_AFFINE, (img, hgt), (lab,))
    np.testing.assert_array_equal(i2, img)
    np.testing.assert_array_equal(h2, hgt)
    np.testing.assert_array_equal(l2, lab)
    assert valid.all()


def test_double_flip_is_identity_and_preserves_histogram():
    rng = np.random.default_rng(1)
    img, lab = rng.random((3, 12, 10)), rng.integers(0, 5, (12, 10))
    flip = dict(T.IDENTITY_AFFINE, hflip=True, vflip=True)
    (i1,), (l1,), _, _ = T.apply_affine(flip, (img,), (lab,))
    np.testing.assert_array_equal(np.bincount(l1.ravel(), minlength=5), np.bincount(lab.ravel(), minlength=5))
    np.testing.assert_array_equal(l1, lab[::-1, ::-1])
    (i2,), (l2,), _, _ = T.apply_affine(flip, (i1,), (l1,))
    np.testing.assert_array_equal(i2, img)
    np.testing.assert_array_equal(l2, lab)


def test_rotation_marks_outside_pixels_ignore():
    lab = np.zeros((32, 32), np.int64)
    params = dict(T.IDENTITY_AFFINE, rotation=15.0, scale=1.0)
    _, (out,), (tgt,), valid = T.apply_affine(params, (), (lab,), (np.ones((32, 32)),))
    assert (out == 255).any() and out[16, 16] == 0
    np.testing.assert_array_equal(out == 255, ~valid)
    assert (tgt[~valid] == 0).all()


def test_augment_pair_same_transform_for_all_rasters():
    rng = np.random.default_rng(3)
    lab = np.zeros((24, 24), np.int64)
    lab[8:16, 8:16] = 1
    img = np.stack([lab.astype(float)] * 3)
    hgt = np.stack([lab.astype(float)] * 2)
    i, h, l, b = T.augment_pair(img, hgt, lab, T.AugmentConfig(), rng, boundary=lab.astype(float))
    inside = l == 1
    assert inside.any()
    assert (i[0][inside] > 0.5).mean() > 0.9 and (h[0][inside] > 0.5).mean() > 0.9
    np.testing.assert_array_equal(b > 0.5, inside)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(8, 40), st.integers(8, 40))
def test_augmentation_keeps_dims_and_label_set(seed, h, w):
    rng = np.random.default_rng(seed)
    lab = rng.integers(0, 5, (h, w))
    lab[0, 0] = 255
    img = rng.random((3, h, w))
    i, hh, l = T.augment_pair(img, rng.random((2, h, w)), lab, T.AugmentConfig(), rng)
    assert i.shape == img.shape and hh.shape == (2, h, w) and l.shape == lab.shape
    assert set(np.unique(l)) <= set(range(5)) | {255}


def test_train_stage_trace_and_zero_lr(toy):
    g = G.build_seg_h(TINY)
    before = {k: v.copy() for k, v in g.params.items()}
    _, trace = T.train_stage(g, toy, T.TrainConfig(base_lr=0.0, total_iters=1, batch_size=2, crop=32))
    assert len(trace) == 1
    for k in before:
        np.testing.assert_array_equal(g.params[k], before[k])
    _, trace = T.train_stage(g, toy, T.TrainConfig(total_iters=7, batch_size=2, crop=32))
    assert [r.iter for r in trace] == list(range(7))
    assert all(r.stage == "segmenter_pretrain" for r in trace)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_stage_errors(toy):
    g = G.build_seg_h(TINY)
    with pytest.raises(ValueError, match="empty"):
        T.train_stage(g, toy.subset([]), T.TrainConfig(total_iters=1))
    with pytest.raises(ValueError):
        T.train_stage(g, toy, T.TrainConfig(stage="warmup"))
    with pytest.raises(T.TrainingDivergedError, match="iteration"):
        T.train_stage(G.build_hed_h(TINY), toy, T.TrainConfig(base_lr=1e6, total_iters=30, stage="boundary_pretrain", crop=32))


def test_training_is_bit_deterministic(toy, tmp_path):
    traces = []
    for k in range(2):
        g = G.build_seg_h(TINY, seed=4)
        _, tr = T.train_stage(g, toy, T.TrainConfig(total_iters=5, batch_size=2, crop=32, seed=9))
        G.save_weights(g, tmp_path / f"{k}.edgw")
        traces.append([r.loss for r in tr])
    assert traces[0] == traces[1]
    assert (tmp_path / "0.edgw").read_bytes() == (tmp_path / "1.edgw").read_bytes()


def test_boundary_stage_uses_only_l2_losses(toy):
    g = G.build_hed_h(TINY)
    batch = T.make_batch(toy, [0, 1], 32, np.random.default_rng(0), None)
    g.forward(T.graph_inputs(g, batch.image, batch.height), "train")
    _, seeds, parts = T.compute_losses(g, batch, T.STAGE_LOSSES["boundary_pretrain"])
    assert set(seeds) == {n.name for n in g.loss_nodes()}
    assert len(parts) == TINY.depth + 1


def test_toy_boundary_net_halves_loss():
    ds = dataset_from_scenes(synth.generate_scenes(20, (64, 64), seed=5))
    g = G.build_hed_h(G.ArchConfig(base_width=8, depth=3))
    cfg = T.TrainConfig(base_lr=1e-2, total_iters=500, batch_size=5, stage="boundary_pretrain", lr_step_iters=300)
    before = T.dataset_loss(g, ds, "boundary_pretrain")
    _, trace = T.train_stage(g, ds, cfg)
    after = T.dataset_loss(g, ds, "boundary_pretrain")
    assert len(trace) == 500
    assert after < 0.5 * before


def test_trace_csv(tmp_path):
    rows = [T.TraceRow(0, "boundary_pretrain", 1.5, 0.01), T.TraceRow(1, "boundary_pretrain", 1.25, 0.01)]
    T.write_trace_csv(tmp_path / "t.csv", rows)
    with open(tmp_path / "t.csv") as fh:
        got = list(csv.reader(fh))
    assert got[0] == ["iter", "stage", "loss", "lr"]
    assert got[2] == ["1", "boundary_pretrain", "1.25", "0.01"]


def _quick_cfgs(iters=3):
    cfgs = T.default_train_configs(seed=0, iters=iters, crop=32)
    return cfgs


def test_default_stage_batch_sizes():
    cfgs = T.default_train_configs()
    assert cfgs["boundary_pretrain"].batch_size == 5
    assert cfgs["segmenter_pretrain"].batch_size == 2
    assert cfgs["assembled_finetune"].batch_size == 1
    assert cfgs["assembled_finetune"].base_lr < cfgs["segmenter_pretrain"].base_lr


def test_pipeline_artifacts_load_into_assembled_graph(toy, tmp_path):
    res = T.staged_pipeline(toy, TINY, _quick_cfgs(), tmp_path)
    assert set(res.traces) == set(T.STAGES) - {"per_scale"}
    covered = set()
    for name in ("boundary_pretrain", "segmenter_pretrain"):
        covered |= set(G.load_weights(res.graph.copy(), res.weight_files[name], strict=False))
    assert covered == set(res.graph.state_tensors())
    G.load_weights(res.graph.copy(), res.weight_files["assembled_finetune"])  # strict


def test_pipeline_freezes_boundary_detector_during_segmenter_stage(toy, tmp_path):
    res = T.staged_pipeline(toy, TINY, _quick_cfgs(), tmp_path)
    from edgeseg import formats
    hed = formats.read_tensors(res.weight_files["boundary_pretrain"])
    seg = formats.read_tensors(res.weight_files["segmenter_pretrain"])
    for k, v in hed.items():
        np.testing.assert_array_equal(seg[k], v)


def test_pipeline_finetune_starts_near_component_losses(toy, tmp_path):
    res = T.staged_pipeline(toy, TINY, _quick_cfgs(20), tmp_path)
    components = res.final_losses["boundary_pretrain"] + res.final_losses["segmenter_pretrain"]
    assert res.initial_losses["assembled_finetune"] <= 1.2 * components


def test_multiscale_pipeline_runs(toy, tmp_path):
    res = T.staged_pipeline(toy, G.replace(TINY, scales=3), _quick_cfgs(2), tmp_path)
    assert {"segmenter_pretrain_s0", "segmenter_pretrain_s1", "segmenter_pretrain_s2", "per_scale"} <= set(res.traces)
    assert res.graph.forward({"image": toy.images[:1], "height": toy.heights[:1]})["class_probs"].shape == (1, 5, 64, 64)
