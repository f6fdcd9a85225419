import math

import pytest
import torch

from conftest import toy_classifier
from dualshift.config import SSIM_C1, SSIM_C2
from dualshift.errors import ErrorCode, ToolkitError
from dualshift.quality_metrics import (PERCEPTUAL_BACKENDS, PerceptualReference, SSIMReference, perceptual_distance,
                                       psnr, quality_scores, register_perceptual_backend, ssim)


@pytest.mark.parametrize("diff, expected", [(0.5, 6.0206), (0.1, 20.0)])
def test_psnr_uniform_difference(diff, expected):
    a = torch.zeros((3, 8, 8), dtype=torch.float64)
    assert psnr(a, a + diff) == pytest.approx(expected, abs=1e-3)


def test_psnr_identical_images_hit_the_cap():
    a = torch.rand((3, 8, 8))
    assert psnr(a, a) == 100.0
    assert psnr(a, a, cap=60.0) == 60.0


def test_psnr_batch_returns_per_sample_values():
    a = torch.zeros((2, 3, 8, 8), dtype=torch.float64)
    b = a.clone()
    b[0] += 0.5
    values = psnr(a, b)
    assert values.dtype == torch.float64 and values.shape == (2,)
    assert values[0].item() == pytest.approx(6.0206, abs=1e-3)
    assert values[1].item() == 100.0


def test_ssim_of_an_image_with_itself_is_one():
    a = torch.rand((3, 16, 16), dtype=torch.float64)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)


def test_ssim_constant_images_closed_form():
    c1, c2 = 0.2, 0.6
    a = torch.full((3, 8, 8), c1, dtype=torch.float64)
    b = torch.full((3, 8, 8), c2, dtype=torch.float64)
    expected = (2 * c1 * c2 + SSIM_C1) / (c1 ** 2 + c2 ** 2 + SSIM_C1)
    assert ssim(a, b) == pytest.approx(expected, abs=1e-6)
    assert SSIM_C2 > 0


def test_ssim_decreases_with_noise():
    g = torch.Generator().manual_seed(0)
    a = torch.rand((3, 16, 16), generator=g, dtype=torch.float64)
    mild = a + 0.01 * torch.randn(a.shape, generator=g, dtype=torch.float64)
    strong = a + 0.2 * torch.randn(a.shape, generator=g, dtype=torch.float64)
    assert 1.0 > ssim(a, mild) > ssim(a, strong)


def test_ssim_rejects_images_smaller_than_the_window():
    a = torch.rand((3, 4, 4))
    with pytest.raises(ToolkitError) as e:
        ssim(a, a)
    assert e.value.error_code == ErrorCode.VALIDATION


def test_metrics_reject_shape_mismatch():
    with pytest.raises(ToolkitError):
        psnr(torch.zeros((3, 8, 8)), torch.zeros((3, 8, 9)))


def test_perceptual_distance_is_zero_for_identical_inputs():
    model = toy_classifier(shape=(3, 8, 8))
    a = torch.rand((3, 8, 8), dtype=torch.float64)
    assert perceptual_distance(a, a, model=model) == 0.0
    assert perceptual_distance(a, (a + 0.3).clamp(0, 1), model=model) > 0.0


def test_gallery_feature_backend_needs_a_model():
    a = torch.rand((3, 8, 8))
    with pytest.raises(ToolkitError) as e:
        perceptual_distance(a, a * 0.5)
    assert e.value.error_code == ErrorCode.CONFIG_INVALID


def test_unknown_perceptual_backend():
    a = torch.rand((3, 8, 8))
    with pytest.raises(ToolkitError) as e:
        perceptual_distance(a, a, backend="lpips-alex")
    assert e.value.error_code == ErrorCode.UNKNOWN_BACKEND


def test_registered_backend_is_used():
    def l1(a, b, model=None):
        return (a - b).abs().flatten(1).mean(dim=1)

    register_perceptual_backend("l1-test", l1)
    try:
        a = torch.zeros((2, 3, 8, 8))
        d = perceptual_distance(a, a + 0.25, backend="l1-test")
        assert torch.allclose(d, torch.full((2,), 0.25, dtype=torch.float64))
    finally:
        PERCEPTUAL_BACKENDS.pop("l1-test")


def test_quality_scores_bundle():
    model = toy_classifier(shape=(3, 8, 8))
    a = torch.rand((3, 8, 8), dtype=torch.float64)
    scores = quality_scores(a, a, model=model)
    assert scores.psnr == 100.0
    assert math.isclose(scores.ssim, 1.0, abs_tol=1e-9)
    assert scores.perceptual == 0.0


def test_ssim_reference_scores_stacked_copies():
    g = torch.Generator().manual_seed(6)
    a = torch.rand((3, 3, 8, 8), generator=g, dtype=torch.float64)
    b = torch.rand((6, 3, 8, 8), generator=g, dtype=torch.float64)
    scores = SSIMReference(a).score(b)
    assert torch.allclose(scores[:3], ssim(a, b[:3]), atol=1e-12)
    assert torch.allclose(scores[3:], ssim(a, b[3:]), atol=1e-12)
    with pytest.raises(ToolkitError):
        SSIMReference(a).score(b[:4])


def test_perceptual_reference_matches_perceptual_distance():
    model = toy_classifier(shape=(3, 8, 8))
    g = torch.Generator().manual_seed(7)
    a = torch.rand((2, 3, 8, 8), generator=g, dtype=torch.float64)
    b = torch.cat([a, torch.rand((2, 3, 8, 8), generator=g, dtype=torch.float64)])
    ref = PerceptualReference(a, model=model)
    d = ref.distance(b)
    assert d[0] == 0.0 and d[1] == 0.0
    assert torch.allclose(d[2:], perceptual_distance(a, b[2:], model=model), atol=1e-10)


def test_perceptual_distance_grows_with_noise_scale():
    model = toy_classifier(shape=(3, 8, 8))
    g = torch.Generator().manual_seed(21)
    ordered = 0
    for _ in range(100):
        a = torch.rand((3, 8, 8), generator=g, dtype=torch.float64) * 0.4 + 0.3
        noise = torch.rand((3, 8, 8), generator=g, dtype=torch.float64) * 2 - 1
        near = perceptual_distance(a, a + 0.1 * noise, model=model)
        far = perceptual_distance(a, a + 0.2 * noise, model=model)
        ordered += far >= near
    assert ordered >= 95


def test_ssim_and_perceptual_are_symmetric():
    model = toy_classifier(shape=(3, 8, 8))
    g = torch.Generator().manual_seed(22)
    a = torch.rand((10, 3, 8, 8), generator=g, dtype=torch.float64)
    b = torch.rand((10, 3, 8, 8), generator=g, dtype=torch.float64)
    assert torch.allclose(ssim(a, b), ssim(b, a), atol=1e-12)
    assert torch.allclose(perceptual_distance(a, b, model=model), perceptual_distance(b, a, model=model), atol=1e-12)


def test_quality_scores_batch_means():
    model = toy_classifier(shape=(3, 8, 8))
    g = torch.Generator().manual_seed(23)
    a = torch.rand((5, 3, 8, 8), generator=g, dtype=torch.float64)
    b = (a + 0.05 * torch.randn((5, 3, 8, 8), generator=g, dtype=torch.float64)).clamp(0, 1)
    scores = quality_scores(a, b, model=model, chunk=2)
    assert scores.psnr == pytest.approx(float(psnr(a, b).mean()), rel=1e-12)
    assert scores.ssim == pytest.approx(float(ssim(a, b).mean()), rel=1e-12)
    assert scores.perceptual == pytest.approx(float(perceptual_distance(a, b, model=model).mean()), rel=1e-9)
