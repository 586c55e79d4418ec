"""Conditional UNet core and its three wiring variants.

One shared core serves three roles:

- ``teacher_latent``: latent -> latent, residual. The frozen one-step teacher.
- ``stage1``: pixel -> latent. Input is sub-pixel unshuffled (factor 8, so a
  3-channel image becomes 192 channels at 1/8 resolution) by a fresh head
  conv; the rest of the core is initialized from the teacher.
- ``stage2``: pixel -> pixel. Unshuffle, core, re-shuffle; the core predicts a
  residual on the unshuffled input and the fresh tail conv starts at zero, so
  a newly initialized stage-2 model is the identity map.

Conditioning is a fixed integer timestep plus one of two learned embedding
vectors (positive / negative), injected per block as a channel bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from ..tensor_ops import pixel_shuffle, pixel_unshuffle

VARIANTS = ("teacher_latent", "stage1", "stage2")
COND_INDEX = {"pos": 0, "neg": 1}


@dataclass
class GeneratorConfig:
    variant: str = "stage2"
    image_channels: int = 3
    latent_channels: int = 16
    shuffle_factor: int = 8
    base_width: int = 32
    depth: int = 2
    mid_blocks: int = 1
    cond_dim: int = 64
    max_width_mult: int = 4
    padding_mode: str = "zeros"

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.cond_dim % 2 != 0:
            raise ValueError("cond_dim must be even")
        if self.depth < 0:
            raise ValueError("depth must be >= 0")

    @property
    def core_in_channels(self) -> int:
        if self.variant == "teacher_latent":
            return self.latent_channels
        return self.image_channels * self.shuffle_factor**2

    @property
    def core_out_channels(self) -> int:
        if self.variant == "stage2":
            return self.image_channels * self.shuffle_factor**2
        return self.latent_channels


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps. t: [B] -> [B, dim]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half
    )
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class ConvBlock(nn.Module):
    """Two 3x3 convs with group norm, SiLU, a conditioning bias, and a
    residual connection."""

    def __init__(self, channels: int, cond_dim: int, padding_mode: str) -> None:
        super().__init__()
        groups = min(8, channels)
        while channels % groups != 0:
            groups -= 1
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, padding_mode=padding_mode)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, padding_mode=padding_mode)
        self.norm1 = nn.GroupNorm(groups, channels)
        self.norm2 = nn.GroupNorm(groups, channels)
        self.cond_proj = nn.Linear(cond_dim, channels)
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.act(self.norm1(self.conv1(x)))
        h = h + self.cond_proj(emb)[:, :, None, None]
        h = self.act(self.norm2(self.conv2(h)))
        return x + h


class ConditionalUNet(nn.Module):
    """See module docstring. ``counters`` tracks core invocations: ``calls``
    counts forward entries, ``samples`` counts batch elements processed."""

    def __init__(self, cfg: GeneratorConfig) -> None:
        super().__init__()
        self.cfg = cfg
        widths = [
            cfg.base_width * min(2**level, cfg.max_width_mult)
            for level in range(cfg.depth + 1)
        ]
        self.widths = widths
        pm = cfg.padding_mode

        self.cond_embed = nn.Embedding(2, cfg.cond_dim)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.cond_dim, cfg.cond_dim), nn.SiLU(), nn.Linear(cfg.cond_dim, cfg.cond_dim)
        )

        self.head = nn.Conv2d(cfg.core_in_channels, widths[0], 3, padding=1, padding_mode=pm)
        self.enc_blocks = nn.ModuleList(
            [ConvBlock(widths[l], cfg.cond_dim, pm) for l in range(cfg.depth)]
        )
        self.down = nn.ModuleList(
            [
                nn.Conv2d(widths[l], widths[l + 1], 3, stride=2, padding=1, padding_mode=pm)
                for l in range(cfg.depth)
            ]
        )
        self.mid_blocks = nn.ModuleList(
            [ConvBlock(widths[-1], cfg.cond_dim, pm) for _ in range(cfg.mid_blocks)]
        )
        self.up = nn.ModuleList(
            [
                nn.Conv2d(widths[l + 1], widths[l], 3, padding=1, padding_mode=pm)
                for l in reversed(range(cfg.depth))
            ]
        )
        self.dec_blocks = nn.ModuleList(
            [ConvBlock(widths[l], cfg.cond_dim, pm) for l in reversed(range(cfg.depth))]
        )
        self.tail = nn.Conv2d(widths[0], cfg.core_out_channels, 3, padding=1, padding_mode=pm)
        if cfg.variant in ("teacher_latent", "stage2"):
            # residual variants start as the identity map
            nn.init.zeros_(self.tail.weight)
            nn.init.zeros_(self.tail.bias)

        self.counters = {"calls": 0, "samples": 0}

    # ------------------------------------------------------------------ #

    def reset_counters(self) -> None:
        self.counters = {"calls": 0, "samples": 0}

    def _embedding(self, batch: int, t, cond, device) -> torch.Tensor:
        if not torch.is_tensor(t):
            t = torch.full((batch,), int(t), dtype=torch.long, device=device)
        elif t.ndim == 0:
            t = t.expand(batch).to(device)
        if isinstance(cond, str):
            idx = torch.full((batch,), COND_INDEX[cond], dtype=torch.long, device=device)
        elif torch.is_tensor(cond):
            idx = cond.to(device=device, dtype=torch.long)
        else:
            idx = torch.tensor([COND_INDEX[c] for c in cond], dtype=torch.long, device=device)
        return self.time_mlp(timestep_embedding(t, self.cfg.cond_dim)) + self.cond_embed(idx)

    def _core(self, z: torch.Tensor, emb: torch.Tensor):
        """Run the core on an already-unshuffled/latent tensor. Returns
        (output, taps); taps are the encoder-level activations (one per
        resolution level, or the last mid block output for depth 0)."""
        self.counters["calls"] += 1
        self.counters["samples"] += int(z.shape[0])
        taps: list[torch.Tensor] = []
        h = self.head(z)
        skips: list[torch.Tensor] = []
        for block, down in zip(self.enc_blocks, self.down):
            h = block(h, emb)
            taps.append(h)
            skips.append(h)
            h = down(h)
        for block in self.mid_blocks:
            h = block(h, emb)
        if not skips:
            taps.append(h)
        for up_conv, block, skip in zip(self.up, self.dec_blocks, reversed(skips)):
            # target the skip's dims: odd grids (e.g. after random-phase padding)
            # would drift under a fixed x2 upsample
            h = nn.functional.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = up_conv(h)
            h = block(h + skip, emb)
        out = self.tail(h)
        return out, taps

    def forward_core(self, x: torch.Tensor, t=499, cond="pos") -> torch.Tensor:
        """Output in the core's native space (latent for teacher/stage1,
        unshuffled sub-pixel space for stage2), before any re-shuffle."""
        cfg = self.cfg
        if cfg.variant == "teacher_latent":
            z = x
        else:
            z = pixel_unshuffle(x, cfg.shuffle_factor)
        emb = self._embedding(z.shape[0], t, cond, z.device)
        out, _ = self._core(z, emb)
        if cfg.variant in ("teacher_latent", "stage2"):
            out = z + out
        return out

    def forward(self, x: torch.Tensor, t=499, cond="pos") -> torch.Tensor:
        out = self.forward_core(x, t, cond)
        if self.cfg.variant == "stage2":
            out = pixel_shuffle(out, self.cfg.shuffle_factor)
        return out

    def features(self, x: torch.Tensor, t=499, cond="pos") -> list[torch.Tensor]:
        """Encoder-level tap activations for feature-space discrimination."""
        cfg = self.cfg
        z = x if cfg.variant == "teacher_latent" else pixel_unshuffle(x, cfg.shuffle_factor)
        emb = self._embedding(z.shape[0], t, cond, z.device)
        _, taps = self._core(z, emb)
        return taps

    @property
    def tap_channels(self) -> list[int]:
        if self.cfg.depth == 0:
            return [self.widths[-1]]
        return self.widths[:-1]

    # ------------------------------------------------------------------ #

    def load_matching(self, source: "ConditionalUNet") -> list[str]:
        """Copy every parameter/buffer whose name and shape match ``source``.
        Returns the names that were left at their fresh initialization."""
        src = source.state_dict()
        dst = self.state_dict()
        skipped = []
        for name, tensor in dst.items():
            if name in src and src[name].shape == tensor.shape:
                dst[name] = src[name].clone()
            else:
                skipped.append(name)
        self.load_state_dict(dst)
        return skipped


def build_generator(cfg: GeneratorConfig, seed: int = 0) -> ConditionalUNet:
    """Deterministically initialized generator."""
    torch.manual_seed(seed)
    return ConditionalUNet(cfg)


def init_stage1_from_teacher(stage1: ConditionalUNet, teacher: ConditionalUNet) -> list[str]:
    """Student init: copy the teacher core; the pixel-input head stays fresh."""
    if stage1.cfg.variant != "stage1" or teacher.cfg.variant != "teacher_latent":
        raise ValueError("expected a stage1 student and a teacher_latent source")
    return stage1.load_matching(teacher)


def init_stage2_from_stage1(stage2: ConditionalUNet, stage1: ConditionalUNet) -> list[str]:
    """Student init: copy the stage-1 model; the pixel-output tail stays at its
    fresh (zero) initialization so the student starts as the identity."""
    if stage2.cfg.variant != "stage2" or stage1.cfg.variant != "stage1":
        raise ValueError("expected a stage2 student and a stage1 source")
    return stage2.load_matching(stage1)
