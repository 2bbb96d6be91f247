import numpy as np
import pytest

from vbiopsy.phantom import (
    ClassSignature, Manifest, PhantomConfig, balanced_labels, brain_mask_for, class_separability_report,
    generate_cohort, synthesize_case,
)
from vbiopsy.volume import load_mask, load_volume

SMALL = dict(dims=(16, 16, 16), tumor_radius_range=(2.5, 3.5))


def test_determinism_bytes(tmp_path):
    cfg = PhantomConfig(n_cases=4, seed=11, **SMALL)
    generate_cohort(cfg, tmp_path / "a")
    generate_cohort(cfg, tmp_path / "b")
    for p in sorted((tmp_path / "a").rglob("*")):
        if p.is_file():
            q = tmp_path / "b" / p.relative_to(tmp_path / "a")
            assert p.read_bytes() == q.read_bytes(), p.name


def test_case_independent_of_generation_order():
    cfg = PhantomConfig(n_cases=6, seed=2, **SMALL)
    v3, m3, _ = synthesize_case(cfg, 3, 1)
    synthesize_case(cfg, 0, 0)
    again, _, _ = synthesize_case(cfg, 3, 1)
    assert np.array_equal(v3, again)


def test_balance():
    cfg = PhantomConfig(n_cases=8, **SMALL)
    assert np.bincount(balanced_labels(cfg)).tolist() == [2, 2, 2, 2]
    cfg = PhantomConfig(n_cases=10, **SMALL)
    counts = np.bincount(balanced_labels(cfg))
    assert counts.max() - counts.min() <= 1


@pytest.mark.parametrize("index", range(6))
def test_tumor_volume_matches_sphere(index):
    cfg = PhantomConfig(n_cases=6, dims=(32, 32, 32), seed=5)
    _, tumor, meta = synthesize_case(cfg, index, index % 4)
    expect = 4 / 3 * np.pi * meta["tumor_radius"] ** 3
    assert abs(tumor.sum() - expect) <= 0.1 * expect


def test_tumor_inside_brain_and_background_quiet():
    cfg = PhantomConfig(n_cases=8, **SMALL)
    brain = brain_mask_for(cfg)
    for i in range(8):
        vol, tumor, _ = synthesize_case(cfg, i, i % 4)
        assert not (tumor & ~brain).any()
        bg = vol[~brain]
        # standard error of the mean of pure noise
        assert abs(bg.mean()) < 3 * cfg.noise_std / np.sqrt(bg.size)


def test_invalid_configs():
    with pytest.raises(ValueError):
        PhantomConfig(n_cases=2)
    with pytest.raises(ValueError):
        PhantomConfig(dims=(8, 8, 8), tumor_radius_range=(4, 6))
    with pytest.raises(ValueError):
        PhantomConfig(noise_std=-1)


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        generate_cohort(PhantomConfig(n_cases=4, **SMALL), blocker / "sub")


def test_manifest_roundtrip(tmp_path):
    m = generate_cohort(PhantomConfig(n_cases=4, **SMALL), tmp_path)
    back = Manifest.load(tmp_path / "manifest.json")
    assert back.to_json() == m.to_json()
    doc = back.to_json()
    for key in ("cases", "k_classes", "generator_config_echo"):
        assert f'"{key}"' in doc
    for c in back.cases:
        v, g = back.load_case(c)
        assert v.dims == (16, 16, 16) and g.count > 0


def _sig(mean):
    return ClassSignature(mean, 0.0, 0.0, 0.0, 0.01)


def test_separability_report_ordered(tmp_path):
    sigs = tuple(_sig(m) for m in (0.4, 0.6, 0.8, 1.0))
    m = generate_cohort(PhantomConfig(n_cases=8, class_signatures=sigs, **SMALL), tmp_path)
    rep = class_separability_report(m)
    means = [rep[k]["mean_intensity"] for k in range(4)]
    assert means == sorted(means)


def test_separability_identical_signatures_and_brute_force(tmp_path):
    sigs = (_sig(0.7), _sig(0.7))
    cfg = PhantomConfig(n_cases=6, n_classes=2, class_signatures=sigs, **SMALL)
    m = generate_cohort(cfg, tmp_path)
    rep = class_separability_report(m)
    assert abs(rep[0]["mean_intensity"] - rep[1]["mean_intensity"]) < cfg.noise_std
    for lab in (0, 1):
        vals = []
        for c in m.cases:
            if c.class_label == lab:
                v = load_volume(m.path(c.volume_path)).data
                g = load_mask(m.path(c.gt_mask_path)).as_bool()
                vals.extend(float(x) for x in v[g])
        assert np.isclose(rep[lab]["mean_intensity"], sum(vals) / len(vals), rtol=1e-9)


def test_separability_single_case(tmp_path):
    m = generate_cohort(PhantomConfig(n_cases=4, **SMALL), tmp_path)
    single = Manifest(m.cases[:1], m.k_classes, {}, m.root)
    rep = class_separability_report(single)
    v, g = m.load_case(m.cases[0])
    vox = v.data[g.as_bool()].astype(np.float64)
    (only,) = rep.values()
    assert np.isclose(only["mean_intensity"], vox.mean()) and np.isclose(only["mean_case_std"], vox.std())


def test_separability_missing_file(tmp_path):
    m = generate_cohort(PhantomConfig(n_cases=4, **SMALL), tmp_path)
    (tmp_path / m.cases[0].volume_path).unlink()
    with pytest.raises(FileNotFoundError):
        class_separability_report(m)
    with pytest.raises(ValueError):
        class_separability_report(Manifest([], 4, {}, tmp_path))
