"""Feature-space discriminator: a frozen extractor supplies multi-level
activations, and one small trainable head per tap turns each into a map of
patch logits. The scalar used in the adversarial losses is the mean over
every logit of every tap."""

from __future__ import annotations

import torch
from torch import nn

from .unet import ConditionalUNet


class DiscriminatorHeadSet(nn.Module):
    """One 2-layer pointwise-conv head per extractor tap."""

    def __init__(self, tap_channels: list[int], hidden: int = 64) -> None:
        super().__init__()
        self.heads = nn.ModuleList(
            [
                nn.Sequential(
                    nn.Conv2d(ch, hidden, 1),
                    nn.SiLU(),
                    nn.Conv2d(hidden, 1, 1),
                )
                for ch in tap_channels
            ]
        )

    def forward(self, features: list[torch.Tensor]) -> list[torch.Tensor]:
        if len(features) != len(self.heads):
            raise ValueError(f"expected {len(self.heads)} feature maps, got {len(features)}")
        return [head(f) for head, f in zip(self.heads, features)]


def freeze(module: nn.Module) -> nn.Module:
    """Mark every parameter non-trainable. Gradients still flow through the
    module's activations to its inputs."""
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def extract_features(
    extractor: ConditionalUNet, x: torch.Tensor, t=499, cond="pos"
) -> list[torch.Tensor]:
    """Tap activations of a (frozen) extractor network."""
    return extractor.features(x, t, cond)


def logit_mean(logit_maps: list[torch.Tensor]) -> torch.Tensor:
    """Mean over all logits of all taps (each map may have its own size)."""
    total = sum(m.sum() for m in logit_maps)
    count = sum(m.numel() for m in logit_maps)
    return total / count


def discriminate(heads: DiscriminatorHeadSet, features: list[torch.Tensor]) -> torch.Tensor:
    """D(.): scalar mean patch logit for a batch of inputs' features."""
    return logit_mean(heads(features))


def build_heads(tap_channels: list[int], hidden: int = 64, seed: int = 0) -> DiscriminatorHeadSet:
    torch.manual_seed(seed)
    return DiscriminatorHeadSet(tap_channels, hidden)
