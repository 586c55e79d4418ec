"""Fourier-domain tooling: amplitude spectra, the band-rejection mask over
sub-pixel grid frequencies, the masked spectral loss, and a periodic-artifact
diagnostic.

Spectra use the unshifted FFT layout throughout: the DC bin sits at index
(0, 0) and band indices wrap modulo the spectrum size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class FrequencyMask:
    """Binary mask over an (h, w) spectrum selecting the frequency bands where
    a factor-``r`` upsampler can imprint periodic artifacts.

    Row bands are centered at every multiple of floor(h/r), column bands at
    every multiple of floor(w/r); each band covers indices [center - s,
    center + s) modulo the axis length, i.e. 2*s bins. ``grid`` is float
    {0.,1.} shaped [h, w].
    """

    grid: torch.Tensor
    h: int
    w: int
    r: int
    s: int

    @property
    def count(self) -> int:
        return int(self.grid.sum().item())


def _band_rows(extent: int, step: int, s: int) -> torch.Tensor:
    """Bool[extent], true where index falls in a band [k*step - s, k*step + s)
    for any integer k >= 0 with k*step <= extent, wrapping modulo extent."""
    idx = torch.arange(extent)
    hit = torch.zeros(extent, dtype=torch.bool)
    for center in range(0, extent + 1, step):
        hit |= ((idx - center + s) % extent) < 2 * s
    return hit


def build_mask(h: int, w: int, r: int, s: int = 1) -> FrequencyMask:
    """Band-rejection mask for an (h, w) spectrum, shuffle factor r, half-width s.

    Preconditions: h, w >= r >= 2 and 1 <= s <= min(h, w) // (2 * r), so
    adjacent bands cannot merge into an all-pass mask.
    """
    if r < 2:
        raise ValueError(f"shuffle factor must be >= 2, got r={r}")
    if h < r or w < r:
        raise ValueError(f"spectrum {h}x{w} smaller than shuffle factor {r}")
    s_max = min(h, w) // (2 * r)
    if not (1 <= s <= s_max):
        raise ValueError(
            f"band half-width s={s} outside valid range [1, {s_max}] for h={h}, w={w}, r={r}"
        )
    rows = _band_rows(h, h // r, s)
    cols = _band_rows(w, w // r, s)
    grid = (rows[:, None] | cols[None, :]).float()
    return FrequencyMask(grid=grid, h=h, w=w, r=r, s=s)


def fft_amplitude(img: torch.Tensor) -> torch.Tensor:
    """Per-channel 2D FFT amplitude |F(img)|, unshifted: [N,C,H,W] -> [N,C,H,W]."""
    if img.ndim != 4:
        raise ValueError(f"expected [N,C,H,W], got shape {tuple(img.shape)}")
    return torch.fft.fft2(img).abs()


def mfs_loss(y_stu: torch.Tensor, y_tea: torch.Tensor, mask: FrequencyMask) -> torch.Tensor:
    """Masked L1 distance between amplitude spectra.

    mean over batch and channels of sum_{u,v} mask * | |F(y_stu)| - |F(y_tea)| |,
    normalized by the number of masked cells. Differentiable away from
    zero-amplitude bins.
    """
    if y_stu.shape != y_tea.shape:
        raise ValueError(f"shape mismatch {tuple(y_stu.shape)} vs {tuple(y_tea.shape)}")
    if y_stu.shape[-2:] != (mask.h, mask.w):
        raise ValueError(
            f"mask is {mask.h}x{mask.w} but inputs are {tuple(y_stu.shape[-2:])}"
        )
    grid = mask.grid.to(device=y_stu.device, dtype=y_stu.dtype)
    diff = (fft_amplitude(y_stu) - fft_amplitude(y_tea)).abs()
    per_image = (diff * grid).sum(dim=(-2, -1)) / mask.count
    return per_image.mean()


@dataclass
class SpectrumReport:
    """Periodic-artifact diagnostic for one image."""

    periodic_energy_ratio: float
    baseline_ratio: float
    peak_positions: list[tuple[int, int]]
    h: int
    w: int
    r: int
    s: int


def artifact_score(img: torch.Tensor, r: int = 8, s: int = 1, peak_factor: float = 8.0) -> SpectrumReport:
    """Fraction of spectral energy sitting on bands at nonzero multiples of the
    shuffle frequency, measured away from DC.

    img: [N,C,H,W] or [C,H,W]. Dims not divisible by r are center-cropped to
    the largest multiple. The near-DC block (cells whose row AND column both
    fall in the zero-multiple band) is excluded from numerator and denominator,
    and the zero-multiple bands themselves never count toward the numerator:
    global brightness and smooth shading live there, and would otherwise put
    clean photographs at a ratio near 1 regardless of artifacts. With this
    carve-out, clean content scores close to 0 and a strongly r-periodic
    output close to 1. A constant image scores 0 by convention.
    ``baseline_ratio`` is the numerator region's share of the counted area,
    the expected score of spectrally flat content.

    ``peak_positions`` lists band-grid centers (k*floor(h/r), l*floor(w/r)),
    DC excluded, whose channel-mean amplitude exceeds ``peak_factor`` times
    the median amplitude of the spectrum.
    """
    if img.ndim == 3:
        img = img.unsqueeze(0)
    if img.ndim != 4:
        raise ValueError(f"expected [C,H,W] or [N,C,H,W], got {tuple(img.shape)}")
    n, c, h, w = img.shape
    h2, w2 = (h // r) * r, (w // r) * r
    if h2 < r or w2 < r:
        raise ValueError(f"image {h}x{w} too small for factor {r}")
    if h2 != h or w2 != w:
        top, left = (h - h2) // 2, (w - w2) // 2
        img = img[:, :, top : top + h2, left : left + w2]
        h, w = h2, w2
    if r < 2:
        raise ValueError(f"shuffle factor must be >= 2, got r={r}")
    s_max = min(h, w) // (2 * r)
    if not (1 <= s <= s_max):
        raise ValueError(
            f"band half-width s={s} outside valid range [1, {s_max}] for h={h}, w={w}, r={r}"
        )
    rows0 = _band_rows(h, h, s)  # zero-multiple band only (centers 0 and h)
    cols0 = _band_rows(w, w, s)
    rows_any = _band_rows(h, h // r, s)
    cols_any = _band_rows(w, w // r, s)
    dc_block = rows0[:, None] & cols0[None, :]
    grid_nz = ((rows_any & ~rows0)[:, None] | (cols_any & ~cols0)[None, :]) & ~dc_block
    amp = fft_amplitude(img)
    energy = amp.pow(2).sum(dim=(0, 1))  # [h, w], summed over batch+channels
    total = energy[~dc_block].sum()
    masked = energy[grid_nz].sum()
    ratio = 0.0 if total <= 0 else float((masked / total).item())

    mean_amp = amp.mean(dim=(0, 1))
    median = mean_amp.median()
    peaks: list[tuple[int, int]] = []
    for u in range(0, h + 1, h // r):
        for v in range(0, w + 1, w // r):
            uu, vv = u % h, v % w
            if (uu, vv) == (0, 0):
                continue
            if (uu, vv) in peaks:
                continue
            if mean_amp[uu, vv] > peak_factor * median:
                peaks.append((uu, vv))

    counted = h * w - int(dc_block.sum().item())
    return SpectrumReport(
        periodic_energy_ratio=ratio,
        baseline_ratio=int(grid_nz.sum().item()) / counted,
        peak_positions=peaks,
        h=h,
        w=w,
        r=r,
        s=s,
    )
