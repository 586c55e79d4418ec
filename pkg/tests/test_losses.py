"""Adversarial terms, SSIM routes, pyramid perceptual score, stage composites."""

import math

import numpy as np
import pytest
import torch
from scipy.signal import convolve2d

from shufflesr.evalbench import ssim as ssim_numpy
from shufflesr.frequency import build_mask, mfs_loss
from shufflesr.losses import (
    DEFAULT_LAMBDAS,
    adv_d_loss,
    adv_g_loss,
    gaussian_pyramid,
    match_loss,
    perceptual_loss,
    pyramid_downsample,
    pyramid_ssim_distance,
    register_perceptual_scorer,
    ssim,
    stage1_losses,
    stage2_losses,
)

LN2 = math.log(2.0)


# ------------------------------------------------------------------ #
# adversarial pair and the L1 match term


def test_adversarial_terms_at_zero_logits():
    zero = torch.tensor(0.0)
    assert adv_g_loss(zero).item() == pytest.approx(LN2, abs=1e-7)
    total, real_term, fake_term = adv_d_loss(zero, zero)
    assert real_term.item() == pytest.approx(LN2, abs=1e-7)
    assert fake_term.item() == pytest.approx(LN2, abs=1e-7)
    assert total.item() == pytest.approx(2 * LN2, abs=1e-7)


def test_adversarial_terms_match_softplus_by_hand():
    r, f = torch.tensor(1.5), torch.tensor(-0.75)
    total, real_term, fake_term = adv_d_loss(r, f)
    assert real_term.item() == pytest.approx(math.log1p(math.exp(-1.5)), rel=1e-6)
    assert fake_term.item() == pytest.approx(math.log1p(math.exp(-0.75)), rel=1e-6)
    assert torch.equal(total, real_term + fake_term)
    # generator term falls as the fake logit rises
    assert adv_g_loss(torch.tensor(2.0)) < adv_g_loss(torch.tensor(-2.0))


def test_match_loss_manual_and_shape_check():
    a = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    b = torch.tensor([[1.5, 2.0], [2.0, 6.0]])
    assert match_loss(a, b).item() == pytest.approx((0.5 + 0.0 + 1.0 + 2.0) / 4)
    with pytest.raises(ValueError, match="shape mismatch"):
        match_loss(a, b[:1])


# ------------------------------------------------------------------ #
# SSIM: differentiable route vs the numpy reference


def test_ssim_identity_and_validation():
    g = torch.Generator().manual_seed(0)
    a = torch.rand(1, 3, 16, 16, generator=g)
    assert ssim(a, a).item() == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(ValueError, match="shape mismatch"):
        ssim(a, a[:, :1])
    with pytest.raises(ValueError, match="smaller than window"):
        ssim(torch.rand(1, 3, 8, 8, generator=g), torch.rand(1, 3, 8, 8, generator=g))


def test_torch_and_numpy_ssim_agree():
    rng = np.random.default_rng(7)
    a = rng.random((3, 24, 24))
    b = np.clip(a + 0.1 * rng.standard_normal((3, 24, 24)), 0.0, 1.0)
    ref = ssim_numpy(a, b)
    # float64 tensors run the same arithmetic as the reference
    got64 = ssim(torch.from_numpy(a)[None], torch.from_numpy(b)[None]).item()
    assert abs(got64 - ref) < 1e-10
    got32 = ssim(
        torch.from_numpy(a)[None].float(), torch.from_numpy(b)[None].float()
    ).item()
    assert abs(got32 - ref) < 2e-5


def test_ssim_is_differentiable():
    g = torch.Generator().manual_seed(1)
    a = torch.rand(1, 1, 16, 16, generator=g, dtype=torch.float64, requires_grad=True)
    b = torch.rand(1, 1, 16, 16, generator=g, dtype=torch.float64)
    (1.0 - ssim(a, b)).backward()
    assert a.grad is not None and torch.isfinite(a.grad).all()


# ------------------------------------------------------------------ #
# pyramid construction


def pyramid_downsample_oracle(x: np.ndarray) -> np.ndarray:
    """Reflect-pad by 2, 5-tap binomial blur, then keep every other sample."""
    k1 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
    kernel = np.outer(k1, k1)
    out = np.empty((x.shape[0], (x.shape[1] + 1) // 2, (x.shape[2] + 1) // 2))
    for ch in range(x.shape[0]):
        padded = np.pad(x[ch], 2, mode="reflect")
        blurred = convolve2d(padded, kernel, mode="valid")
        out[ch] = blurred[::2, ::2]
    return out


def test_pyramid_downsample_matches_oracle():
    rng = np.random.default_rng(3)
    for h, w in [(8, 8), (7, 6), (11, 13)]:
        x = rng.random((3, h, w))
        want = pyramid_downsample_oracle(x)
        got = pyramid_downsample(torch.from_numpy(x)[None])[0].numpy()
        assert got.shape == want.shape
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_pyramid_downsample_preserves_constants():
    x = torch.full((1, 3, 10, 10), 0.37, dtype=torch.float64)
    y = pyramid_downsample(x)
    assert y.shape == (1, 3, 5, 5)
    assert torch.allclose(y, torch.full_like(y, 0.37), atol=1e-12)


def test_gaussian_pyramid_levels_and_early_stop():
    x = torch.rand(1, 3, 32, 32)
    free = gaussian_pyramid(x, levels=3, min_size=1)
    assert [t.shape[-1] for t in free] == [32, 16, 8]
    # another halving of 16 would fall under an 11-tap window, so stop there
    capped = gaussian_pyramid(x, levels=3, min_size=11)
    assert [t.shape[-1] for t in capped] == [32, 16]
    assert torch.equal(capped[0], x)


def test_pyramid_ssim_distance_behaviour():
    g = torch.Generator().manual_seed(2)
    a = torch.rand(1, 3, 48, 48, generator=g)
    b = torch.rand(1, 3, 48, 48, generator=g)
    assert pyramid_ssim_distance(a, a).item() == pytest.approx(0.0, abs=1e-6)
    assert pyramid_ssim_distance(a, b).item() > 0.05
    # small inputs survive thanks to the early stop
    small = pyramid_ssim_distance(a[:, :, :16, :16], b[:, :, :16, :16])
    assert torch.isfinite(small)


def test_perceptual_scorer_registry():
    calls = []

    def fake_scorer(a, b):
        calls.append(1)
        return torch.tensor(0.25)

    register_perceptual_scorer("fake", fake_scorer)
    a = torch.rand(1, 3, 16, 16)
    assert perceptual_loss(a, a, scorer="fake").item() == 0.25
    assert calls == [1]
    with pytest.raises(KeyError, match="unknown perceptual scorer"):
        perceptual_loss(a, a, scorer="nope")


# ------------------------------------------------------------------ #
# stage composites


def test_stage1_losses_match_manual_composition():
    g = torch.Generator().manual_seed(4)
    student = torch.rand(2, 4, 8, 8, generator=g)
    teacher = torch.rand(2, 4, 8, 8, generator=g)
    logit = torch.tensor(0.3)
    bundle = stage1_losses(student, teacher, logit, lambda_adv=0.05)
    manual = match_loss(student, teacher) + 0.05 * adv_g_loss(logit)
    assert torch.equal(bundle.total, manual)
    assert set(bundle.components) == {"match", "adv_g"}
    assert bundle.components["match"] == pytest.approx(
        match_loss(student, teacher).item()
    )
    assert DEFAULT_LAMBDAS[0] == 0.05


def test_stage2_losses_match_manual_composition():
    g = torch.Generator().manual_seed(5)
    student = torch.rand(1, 3, 32, 32, generator=g)
    teacher = torch.rand(1, 3, 32, 32, generator=g)
    logit = torch.tensor(-0.2)
    mask = build_mask(32, 32, 8, 1)
    lambdas = (0.05, 1.0, 0.1)
    bundle = stage2_losses(student, teacher, logit, mask, lambdas=lambdas)
    manual = match_loss(student, teacher) + 0.05 * adv_g_loss(logit)
    manual = manual + 1.0 * perceptual_loss(student, teacher)
    manual = manual + 0.1 * mfs_loss(student, teacher, mask)
    assert torch.equal(bundle.total, manual)
    assert set(bundle.components) == {"match", "adv_g", "perceptual", "mfs"}


def test_stage2_zero_lambdas_log_components_without_grad():
    g = torch.Generator().manual_seed(6)
    student = torch.rand(1, 3, 32, 32, generator=g).requires_grad_(True)
    teacher = torch.rand(1, 3, 32, 32, generator=g)
    logit = torch.tensor(0.0)
    mask = build_mask(32, 32, 8, 1)
    bundle = stage2_losses(student, teacher, logit, mask, lambdas=(0.05, 0.0, 0.0))
    # values still appear in the log even though they carry no weight
    assert bundle.components["perceptual"] > 0.0
    assert bundle.components["mfs"] > 0.0
    bundle.total.backward()
    grad_bundle = student.grad.clone()

    student.grad = None
    manual = match_loss(student, teacher) + 0.05 * adv_g_loss(logit)
    manual.backward()
    assert torch.equal(grad_bundle, student.grad)
