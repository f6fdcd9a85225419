import pytest
import torch
from pydantic import ValidationError

from conftest import toy_gallery
from dualshift.color_branch import ColorOffset, PSOConfig
from dualshift.data_io import make_synthetic_dataset
from dualshift.errors import ErrorCode, ToolkitError
from dualshift.generator import (GeneratorConfig, build_manifest, combine_perturbations, derive_seed,
                                 generate_unlearnable_dataset)
from dualshift.spatial_branch import PGDConfig, ShiftRule

EPS = 8 / 255


@pytest.fixture
def clean():
    return make_synthetic_dataset(k=3, per_class=4, size=8, seed=2, name="clean")


def _config(**overrides):
    base = dict(
        rule=ShiftRule(delta_y=1, k=3),
        pgd=PGDConfig(epsilon=EPS, beta=EPS / 4, steps=3),
        pso=PSOConfig(swarm_size=4, iterations=2),
        N=3,
        master_seed=7,
    )
    base.update(overrides)
    return GeneratorConfig(**base)


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(0, 1, 2) == derive_seed(0, 1, 2)
    seeds = {derive_seed(0, phase, p) for phase in (1, 2) for p in range(10)}
    assert len(seeds) == 20
    assert derive_seed(1, 1, 0) != derive_seed(0, 1, 0)


def test_combine_perturbations_clamps():
    x = torch.full((3, 2, 2), 0.9)
    delta = torch.full((3, 2, 2), 0.02)
    out = combine_perturbations(x, delta, ColorOffset(0.2, -0.5, 0.0))
    assert torch.allclose(out[0], torch.ones((2, 2)))
    assert torch.allclose(out[1], torch.full((2, 2), 0.42))
    assert torch.allclose(out[2], torch.full((2, 2), 0.92))


def test_at_least_one_branch_is_required():
    with pytest.raises(ValidationError):
        GeneratorConfig(enable_spatial=False, enable_color=False)


def test_generated_dataset_respects_every_constraint(clean):
    gallery = toy_gallery(2, k=3, shape=(3, 8, 8), dtype=torch.float32)
    unlearnable, record = generate_unlearnable_dataset(clean, _config(), gallery)

    assert torch.equal(unlearnable.labels, clean.labels)
    assert unlearnable.images.shape == clean.images.shape
    assert unlearnable.images.min() >= 0.0 and unlearnable.images.max() <= 1.0
    assert record.spatial_within_bound
    assert max(record.spatial_linf) <= EPS + 1e-6
    assert sorted(record.color_offsets) == [0, 1, 2]
    assert set(record.color_objectives) == {0, 1, 2}
    assert {"mean_psnr", "mean_ssim", "mean_perceptual"} <= set(record.quality)
    assert record.quality["mean_perceptual"] >= 0.0


def test_color_only_offsets_are_class_wise(clean):
    gallery = toy_gallery(1, k=3, shape=(3, 8, 8), dtype=torch.float32)
    unlearnable, record = generate_unlearnable_dataset(clean, _config(enable_spatial=False), gallery)
    assert max(record.spatial_linf) == 0.0
    for i in range(len(clean)):
        offset = record.color_offsets[int(clean.labels[i])]
        expected = (clean.images[i] + torch.tensor(offset).reshape(3, 1, 1)).clamp(0, 1)
        assert torch.allclose(unlearnable.images[i], expected, atol=1e-6)


def test_disabling_color_records_zero_offsets(clean):
    gallery = toy_gallery(2, k=3, shape=(3, 8, 8), dtype=torch.float32)
    cfg = _config(enable_color=False)
    unlearnable, record = generate_unlearnable_dataset(clean, cfg, gallery)
    assert all(offset == (0.0, 0.0, 0.0) for offset in record.color_offsets.values())
    assert record.color_objectives == {}
    manifest = build_manifest(unlearnable, record, cfg)
    assert manifest.perturbation.epsilon == EPS
    assert manifest.perturbation.delta_y == 1


def test_disabling_the_ensemble_uses_the_first_member(clean):
    gallery = toy_gallery(3, k=3, shape=(3, 8, 8), dtype=torch.float32)
    solo, _ = generate_unlearnable_dataset(clean, _config(enable_ensemble=False), gallery)
    head, _ = generate_unlearnable_dataset(clean, _config(), gallery.head(1))
    assert torch.equal(solo.images, head.images)


def test_same_seed_gives_identical_output(clean):
    gallery = toy_gallery(2, k=3, shape=(3, 8, 8), dtype=torch.float32)
    a, rec_a = generate_unlearnable_dataset(clean, _config(), gallery)
    b, rec_b = generate_unlearnable_dataset(clean, _config(), gallery)
    assert torch.equal(a.images, b.images)
    assert rec_a.color_offsets == rec_b.color_offsets


def test_threaded_classes_match_sequential(clean):
    gallery = toy_gallery(2, k=3, shape=(3, 8, 8), dtype=torch.float32)
    seq, _ = generate_unlearnable_dataset(clean, _config(), gallery)
    par, _ = generate_unlearnable_dataset(clean, _config(jobs=3), gallery)
    assert torch.allclose(seq.images, par.images, atol=1e-6)


def test_rule_must_match_dataset(clean):
    gallery = toy_gallery(1, k=3, shape=(3, 8, 8), dtype=torch.float32)
    with pytest.raises(ToolkitError) as e:
        generate_unlearnable_dataset(clean, _config(rule=ShiftRule(delta_y=1, k=10)), gallery)
    assert e.value.error_code == ErrorCode.VALIDATION


def test_missing_gallery(clean, tmp_path):
    with pytest.raises(ToolkitError) as e:
        generate_unlearnable_dataset(clean, _config(gallery_dir=str(tmp_path / "none")))
    assert e.value.error_code == ErrorCode.GALLERY_MISSING
