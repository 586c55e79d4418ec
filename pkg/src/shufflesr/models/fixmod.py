"""Post-hoc output correction: swap the coarse color/brightness band of a
restored image for that of the (upsampled) input, optionally followed by a
small learned refiner.

The coarse band is the level-k approximation of a Haar-style pyramid, i.e.
repeated 2x2 block averaging expanded back by nearest-neighbour upsampling.
Subtracting an image's own approximation and adding the reference's moves the
per-channel means and low-frequency color field to the reference while
leaving high-frequency detail untouched.
"""

from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F


def haar_approximation(x: torch.Tensor, levels: int = 3) -> torch.Tensor:
    """Level-``levels`` approximation band: block-average down by 2**levels,
    nearest-upsample back. Requires dims divisible by 2**levels."""
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    div = 2**levels
    if x.shape[-1] % div or x.shape[-2] % div:
        raise ValueError(f"dims {tuple(x.shape[-2:])} must be divisible by {div}")
    a = x
    for _ in range(levels):
        a = F.avg_pool2d(a, 2)
    for _ in range(levels):
        a = F.interpolate(a, scale_factor=2, mode="nearest")
    return a


class FixModRefiner(nn.Module):
    """3-conv residual refiner; the last conv starts at zero so an untrained
    refiner is a no-op."""

    def __init__(self, channels: int = 3, width: int = 16) -> None:
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(channels, width, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, width, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, channels, 3, padding=1),
        )
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.net(x)


def fixmod_apply(
    output: torch.Tensor,
    lq_upsampled: torch.Tensor,
    refine: bool = False,
    refiner: FixModRefiner | None = None,
    levels: int = 3,
) -> torch.Tensor:
    """Color-band swap (and optional refinement), clamped to [0, 1].

    output, lq_upsampled: [N,C,H,W] with matching shapes, H and W divisible
    by 2**levels.
    """
    if output.shape != lq_upsampled.shape:
        raise ValueError(
            f"shape mismatch {tuple(output.shape)} vs {tuple(lq_upsampled.shape)}"
        )
    fixed = output - haar_approximation(output, levels) + haar_approximation(lq_upsampled, levels)
    if refine:
        if refiner is None:
            raise ValueError("refine=True requires a refiner module")
        fixed = refiner(fixed)
    return fixed.clamp(0.0, 1.0)


def train_refiner(
    refiner: FixModRefiner,
    pairs: list[tuple[torch.Tensor, torch.Tensor]],
    steps: int = 200,
    lr: float = 1e-3,
) -> float:
    """Fit the refiner on (color-fixed output, target) pairs with L1.
    Returns the final loss value."""
    opt = torch.optim.AdamW(refiner.parameters(), lr=lr, weight_decay=0.0)
    loss = torch.zeros(())
    for step in range(steps):
        x, y = pairs[step % len(pairs)]
        loss = (refiner(x) - y).abs().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    return float(loss.item())
