import numpy as np

from edgeseg import formats, synth
from edgeseg.boundaries import LabelMap, make_boundary_target
from edgeseg.data import CLASS_NAMES, load_dataset, scene_paths


def test_same_seed_same_bytes(tmp_path):
    a = synth.synth_generate(tmp_path / "a", 3, (64, 64), seed=7)
    synth.synth_generate(tmp_path / "b", 3, (64, 64), seed=7)
    for d in ("a", "b"):
        assert sorted(p.name for p in (tmp_path / d).iterdir())
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name
    assert a == ["scene_0000", "scene_0001", "scene_0002"]


def test_different_seeds_differ():
    a = synth.generate_scene((64, 64), 1)
    b = synth.generate_scene((64, 64), 2)
    assert not np.array_equal(a.labels, b.labels)


def test_all_classes_present_in_default_corpus():
    scenes = synth.generate_scenes(20, (128, 128), seed=0)
    counts = np.bincount(np.concatenate([s.labels.ravel() for s in scenes]), minlength=len(CLASS_NAMES))
    assert (counts[: len(CLASS_NAMES)] > 0).all()
    assert len(counts) == len(CLASS_NAMES)


def test_scene_fields_are_consistent():
    s = synth.generate_scene((64, 80), 3)
    assert s.image.shape == (64, 80, 3) and s.image.dtype == np.uint8
    assert s.dsm.shape == s.ndsm.shape == s.labels.shape == (64, 80)
    assert (s.ndsm >= 0).all()
    bld = s.labels == CLASS_NAMES.index("building")
    if bld.any():
        assert s.ndsm[bld].mean() > s.ndsm[~bld].mean()


def test_class_mix_shifts_frequencies():
    car = CLASS_NAMES.index("car")
    def frac(mix):
        sc = synth.generate_scenes(10, (96, 96), seed=1, class_mix=mix)
        return np.mean([(s.labels == car).mean() for s in sc])
    assert frac({"car": 4.0}) > frac({"car": 0.25})


def test_stored_boundary_targets_regenerate(tmp_path):
    synth.synth_generate(tmp_path, 2, (64, 64), seed=3, radius=2)
    for name in ("scene_0000", "scene_0001"):
        p = scene_paths(tmp_path, name)
        stored = formats.read_boundary_target(p["boundary"])
        labels = formats.read_label_png(p["labels"])
        again = make_boundary_target(LabelMap(labels, len(CLASS_NAMES), 255), 2)
        np.testing.assert_allclose(stored["values"], again.values, atol=1e-7)
        assert stored["beta"] == again.beta and stored["radius"] == 2
    ds = load_dataset(tmp_path)
    assert len(ds) == 2 and ds.images.shape[1:] == (3, 64, 64)
