"""Small convolutional VAE used as the latent-space teacher's codec.

Downsamples by 8 over three stride-2 stages into a 16-channel latent. The
bottleneck is lossy by construction (16 latent channels versus the 192 values
each latent cell covers), which is the point: it provides the finite-fidelity
contrast to the lossless sub-pixel shuffle code.

The code path is anchored: the leading latent channels carry a block-average
pyramid of the image, packed to latent resolution by sub-pixel shuffling, and
decoding starts from the unshuffled nearest-neighbor upsample of those
channels. The pyramid uses the finest block size whose packed form fits the
latent budget (8px blocks for 3 channels, 4px for 12, 2px for 48), capped one
pooling level below the identity so the latent stays a genuine bottleneck.
The conv stacks produce residual corrections around that anchor and their
output projections start at zero, so a freshly built model already
round-trips to a coarse block rendering and short training runs spend their
budget on detail rather than on rediscovering global color layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass
class VAEConfig:
    image_channels: int = 3
    latent_channels: int = 16
    base_width: int = 32
    kl_weight: float = 1e-4


class _Down(nn.Module):
    def __init__(self, c_in: int, c_out: int) -> None:
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
        self.norm = nn.GroupNorm(min(8, c_out), c_out)
        self.act = nn.SiLU()
        self.refine = nn.Conv2d(c_out, c_out, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.act(self.norm(self.conv(x)))
        return h + self.refine(h)


class _Up(nn.Module):
    def __init__(self, c_in: int, c_out: int) -> None:
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm = nn.GroupNorm(min(8, c_out), c_out)
        self.act = nn.SiLU()
        self.refine = nn.Conv2d(c_out, c_out, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
        h = self.act(self.norm(self.conv(x)))
        return h + self.refine(h)


class ToyVAE(nn.Module):
    def __init__(self, cfg: VAEConfig) -> None:
        super().__init__()
        self.cfg = cfg
        w = cfg.base_width
        self.enc_in = nn.Conv2d(cfg.image_channels, w, 3, padding=1)
        self.enc = nn.ModuleList([_Down(w, 2 * w), _Down(2 * w, 4 * w), _Down(4 * w, 4 * w)])
        self.enc_out = nn.Conv2d(4 * w, 2 * cfg.latent_channels, 3, padding=1)
        self.dec_in = nn.Conv2d(cfg.latent_channels, 4 * w, 3, padding=1)
        self.dec = nn.ModuleList([_Up(4 * w, 4 * w), _Up(4 * w, 2 * w), _Up(2 * w, w)])
        self.dec_out = nn.Conv2d(w, cfg.image_channels, 3, padding=1)
        # residual projections start at zero so the fresh model is exactly the
        # pool/upsample anchor; the logvar half starts at -4 (a nearly
        # deterministic posterior) instead of unit variance
        nn.init.zeros_(self.enc_out.weight)
        nn.init.zeros_(self.enc_out.bias)
        with torch.no_grad():
            self.enc_out.bias[cfg.latent_channels :].fill_(-4.0)
        nn.init.zeros_(self.dec_out.weight)
        nn.init.zeros_(self.dec_out.bias)

    @property
    def _anchor(self) -> tuple[int, int]:
        """(sub-shuffle factor s, packed channel count k): pool the image by
        8/s and pixel-unshuffle by s, so k = image_channels * s^2 channels
        land at latent resolution. s caps at 4; a full s=8 pack would make
        the anchor lossless."""
        c = self.cfg.image_channels
        for s in (4, 2):
            if c * s * s <= self.cfg.latent_channels:
                return s, c * s * s
        return 1, min(c, self.cfg.latent_channels)

    def encode_params(self, img: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """img: [N,3,H,W] with H,W divisible by 8 -> (mu, logvar), each
        [N,L,H/8,W/8]."""
        if img.shape[-1] % 8 or img.shape[-2] % 8:
            raise ValueError(f"VAE input dims must be divisible by 8, got {tuple(img.shape)}")
        h = self.enc_in(img)
        for block in self.enc:
            h = block(h)
        mu, logvar = self.enc_out(h).chunk(2, dim=1)
        s, k = self._anchor
        if s == 1:
            packed = nn.functional.avg_pool2d(img[:, :k], 8)
        else:
            packed = nn.functional.pixel_unshuffle(nn.functional.avg_pool2d(img, 8 // s), s)
        mu = mu + nn.functional.pad(packed, (0, 0, 0, 0, 0, self.cfg.latent_channels - k))
        return mu, logvar.clamp(-30.0, 20.0)

    def encode(
        self, img: torch.Tensor, sample: bool = False, generator: torch.Generator | None = None
    ) -> torch.Tensor:
        """Posterior mean by default; pass sample=True during VAE training."""
        mu, logvar = self.encode_params(img)
        if not sample:
            return mu
        noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
        return mu + noise * (0.5 * logvar).exp()

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        h = self.dec_in(z)
        for block in self.dec:
            h = block(h)
        s, k = self._anchor
        if s == 1:
            up = nn.functional.interpolate(z[:, :k], scale_factor=8, mode="nearest")
            up = nn.functional.pad(up, (0, 0, 0, 0, 0, self.cfg.image_channels - k))
        else:
            up = nn.functional.interpolate(
                nn.functional.pixel_shuffle(z[:, :k], s), scale_factor=8 // s, mode="nearest"
            )
        return self.dec_out(h) + up

    def forward(self, img: torch.Tensor, generator: torch.Generator | None = None):
        """Training pass: returns (reconstruction, mu, logvar)."""
        mu, logvar = self.encode_params(img)
        noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
        z = mu + noise * (0.5 * logvar).exp()
        return self.decode(z), mu, logvar

    def loss(self, img: torch.Tensor, generator: torch.Generator | None = None):
        recon, mu, logvar = self.forward(img, generator)
        rec = (recon - img).abs().mean()
        kl = 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar).mean()
        return rec + self.cfg.kl_weight * kl, {"rec": rec.item(), "kl": kl.item()}


def build_vae(cfg: VAEConfig, seed: int = 0) -> ToyVAE:
    torch.manual_seed(seed)
    return ToyVAE(cfg)
