"""Training objectives for the two distillation stages.

Adversarial pair (softplus form, scalar mean-logit D):

    generator:      sp(-D(fake))
    discriminator:  sp(-D(real)) + sp(D(fake))

Stage-1 composite: L1 latent match + lambda_adv * generator adversarial term.
Stage-2 composite adds a perceptual distance and the masked Fourier loss,
both measured against the teacher's decoded output (not ground truth).

The built-in perceptual distance is a pyramid structural-similarity score:
mean over a 3-level Gaussian pyramid of (1 - SSIM). Alternative scorers can
be registered under a name and selected per call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn.functional as F

from .frequency import FrequencyMask, mfs_loss

DEFAULT_LAMBDAS = (0.05, 1.0, 0.1)


def softplus(x: torch.Tensor) -> torch.Tensor:
    return F.softplus(x)


def adv_g_loss(fake_logit_mean: torch.Tensor) -> torch.Tensor:
    """Generator adversarial term sp(-D(fake)). Zero logits give ln 2."""
    return F.softplus(-fake_logit_mean)


def adv_d_loss(
    real_logit_mean: torch.Tensor, fake_logit_mean: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Discriminator loss sp(-D(real)) + sp(D(fake)); returns (total, real
    term, fake term)."""
    real_term = F.softplus(-real_logit_mean)
    fake_term = F.softplus(fake_logit_mean)
    return real_term + fake_term, real_term, fake_term


def match_loss(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


# ------------------------------------------------------------------ #
# structural similarity (differentiable) and the pyramid perceptual score

_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_WINDOW = 11


def _gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float32) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(a: torch.Tensor, b: torch.Tensor, window_size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Differentiable SSIM over [N,C,H,W] pairs in [0,1].

    Gaussian-weighted local moments, valid-region convolution (no padding),
    uncentered covariance, averaged over the valid map, channels, and batch.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[-1] < window_size or a.shape[-2] < window_size:
        raise ValueError(f"inputs {tuple(a.shape[-2:])} smaller than window {window_size}")
    c = a.shape[1]
    win = _gaussian_window(window_size, sigma, dtype=a.dtype).to(a.device)
    win = win.expand(c, 1, window_size, window_size).contiguous()

    mu_a = F.conv2d(a, win, groups=c)
    mu_b = F.conv2d(b, win, groups=c)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = F.conv2d(a * a, win, groups=c) - mu_aa
    var_b = F.conv2d(b * b, win, groups=c) - mu_bb
    cov = F.conv2d(a * b, win, groups=c) - mu_ab

    c1 = _SSIM_K1**2
    c2 = _SSIM_K2**2
    num = (2 * mu_ab + c1) * (2 * cov + c2)
    den = (mu_aa + mu_bb + c1) * (var_a + var_b + c2)
    return (num / den).mean()


_BLUR_1D = torch.tensor([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def pyramid_downsample(x: torch.Tensor) -> torch.Tensor:
    """Binomial blur (reflect boundary) then factor-2 subsample."""
    c = x.shape[1]
    k = _BLUR_1D.to(dtype=x.dtype, device=x.device)
    kernel = (k[:, None] * k[None, :]).expand(c, 1, 5, 5).contiguous()
    x = F.pad(x, (2, 2, 2, 2), mode="reflect")
    x = F.conv2d(x, kernel, groups=c)
    return x[:, :, ::2, ::2]


def gaussian_pyramid(x: torch.Tensor, levels: int = 3, min_size: int = 1) -> list[torch.Tensor]:
    """Up to ``levels`` octaves; stops early once another halving would drop
    either spatial dim below ``min_size``."""
    out = [x]
    for _ in range(levels - 1):
        h, w = out[-1].shape[-2:]
        if min(h, w) // 2 < min_size:
            break
        out.append(pyramid_downsample(out[-1]))
    return out


def pyramid_ssim_distance(a: torch.Tensor, b: torch.Tensor, levels: int = 3) -> torch.Tensor:
    pyr_a = gaussian_pyramid(a, levels, min_size=_SSIM_WINDOW)
    pyr_b = gaussian_pyramid(b, levels, min_size=_SSIM_WINDOW)
    scores = [1.0 - ssim(la, lb) for la, lb in zip(pyr_a, pyr_b)]
    return torch.stack(scores).mean()


PerceptualScorer = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]
_PERCEPTUAL_SCORERS: dict[str, PerceptualScorer] = {"pyramid_ssim": pyramid_ssim_distance}


def register_perceptual_scorer(name: str, fn: PerceptualScorer) -> None:
    _PERCEPTUAL_SCORERS[name] = fn


def perceptual_loss(a: torch.Tensor, b: torch.Tensor, scorer: str = "pyramid_ssim") -> torch.Tensor:
    try:
        fn = _PERCEPTUAL_SCORERS[scorer]
    except KeyError:
        raise KeyError(
            f"unknown perceptual scorer {scorer!r}; registered: {sorted(_PERCEPTUAL_SCORERS)}"
        ) from None
    return fn(a, b)


# ------------------------------------------------------------------ #
# stage composites


@dataclass
class LossBundle:
    """Total objective (a graph tensor) plus detached per-component values."""

    total: torch.Tensor
    components: dict[str, float] = field(default_factory=dict)


def stage1_losses(
    student_latent: torch.Tensor,
    teacher_latent: torch.Tensor,
    fake_logit_mean: torch.Tensor,
    lambda_adv: float = DEFAULT_LAMBDAS[0],
) -> LossBundle:
    m = match_loss(student_latent, teacher_latent)
    g = adv_g_loss(fake_logit_mean)
    total = m + lambda_adv * g
    return LossBundle(total, {"match": m.item(), "adv_g": g.item()})


def stage2_losses(
    student_img: torch.Tensor,
    teacher_img: torch.Tensor,
    fake_logit_mean: torch.Tensor,
    mask: FrequencyMask,
    lambdas: tuple[float, float, float] = DEFAULT_LAMBDAS,
    scorer: str = "pyramid_ssim",
) -> LossBundle:
    l1, l2, l3 = lambdas
    m = match_loss(student_img, teacher_img)
    g = adv_g_loss(fake_logit_mean)
    # zero-weighted components are still evaluated for the log, but without
    # building a backward graph
    if l2 != 0.0:
        p = perceptual_loss(student_img, teacher_img, scorer)
    else:
        with torch.no_grad():
            p = perceptual_loss(student_img, teacher_img, scorer)
    if l3 != 0.0:
        f = mfs_loss(student_img, teacher_img, mask)
    else:
        with torch.no_grad():
            f = mfs_loss(student_img, teacher_img, mask)
    total = m + l1 * g
    if l2 != 0.0:
        total = total + l2 * p
    if l3 != 0.0:
        total = total + l3 * f
    return LossBundle(
        total,
        {"match": m.item(), "adv_g": g.item(), "perceptual": p.item(), "mfs": f.item()},
    )
