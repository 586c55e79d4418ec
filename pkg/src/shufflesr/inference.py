"""One-step guided inference pipelines.

All pipelines share the conventions: inputs and outputs are [N,3,H,W] in
[0,1]; inputs whose dims are not multiples of the shuffle factor are
reflect-padded on the right/bottom and cropped back after the forward pass;
clamping happens once, at the very end of whichever pipeline ran.

Guidance modes:

- ``none``: single positive-condition pass.
- ``cfg``: one batched pass over (positive, negative) branches of the same
  input; outputs combined as omega * pos + (1 - omega) * neg.
- ``padcfg``: the two branches see differently phase-padded copies of the
  input (positive: 4 pixels on every side; negative: an off-by-one phase,
  default 3 left/top and 5 right/bottom). Combination happens in the model's
  pre-shuffle space by default, then the result is re-shuffled and cropped
  by the positive branch's pad. The one-pixel misalignment of the negative
  branch is deliberate: it perturbs the sub-pixel grid phase that periodic
  artifacts live on.

A padding self-ensemble (average over random pad phases, optionally with CFG
inside each branch) and feather-merged tiled inference wrap any of the above.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch

from .tensor_ops import PadSpec, TileConfig, crop, pad, pixel_shuffle, tile_merge, tile_split

logger = logging.getLogger(__name__)

MODES = ("none", "cfg", "padcfg")
COMBINE_SPACES = ("shuffled", "pixel")


@dataclass
class GuidanceConfig:
    mode: str = "padcfg"
    omega: float = 1.8
    pos_phase: tuple[int, int] = (4, 4)
    neg_phase: tuple[int, int] = (3, 3)
    combine_space: str = "shuffled"
    ensemble_size: int = 0
    ensemble_seed: int = 0
    t: int = 499

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.combine_space not in COMBINE_SPACES:
            raise ValueError(
                f"combine_space must be one of {COMBINE_SPACES}, got {self.combine_space!r}"
            )
        for p in (*self.pos_phase, *self.neg_phase):
            if not (0 <= p <= 8):
                raise ValueError(f"pad phases must be in [0, 8], got {p}")
        if self.ensemble_size < 0:
            raise ValueError("ensemble_size must be >= 0")
        if self.ensemble_size > 0 and self.mode == "padcfg":
            raise ValueError("the pad ensemble cannot wrap padcfg; use mode 'none' or 'cfg'")


def _phase_pad_spec(phase: tuple[int, int], total: int = 8) -> PadSpec:
    p_h, p_w = phase
    return PadSpec(left=p_h, right=total - p_h, top=p_w, bottom=total - p_w, mode="reflect")


def _ensure_divisible(x: torch.Tensor, r: int) -> tuple[torch.Tensor, int, int]:
    """Reflect-pad right/bottom so H and W are multiples of r. Returns the
    padded tensor and the original dims for cropping back."""
    h, w = x.shape[-2:]
    ph = (r - h % r) % r
    pw = (r - w % r) % r
    if ph or pw:
        logger.warning("input %dx%d not divisible by %d; padding to %dx%d", h, w, r, h + ph, w + pw)
        x = pad(x, PadSpec(left=0, right=pw, top=0, bottom=ph, mode="reflect"))
    return x, h, w


def _finish(y: torch.Tensor, clamp: bool) -> torch.Tensor:
    return y.clamp(0.0, 1.0) if clamp else y


# ------------------------------------------------------------------ #


def infer_plain(
    model, x: torch.Tensor, t: int = 499, cond: str = "pos", clamp: bool = True
) -> torch.Tensor:
    """Single positive-condition (by default) forward pass."""
    r = model.cfg.shuffle_factor
    x, h, w = _ensure_divisible(x, r)
    with torch.no_grad():
        y = model(x, t, cond)
    y = crop(y, 0, 0, h, w)
    return _finish(y, clamp)


def _dual_branch_core(model, x: torch.Tensor, t: int):
    """One batched forward over [x_pos; x_neg] halves. Returns the two
    pre-shuffle outputs."""
    n = x.shape[0] // 2
    cond = torch.cat(
        [torch.zeros(n, dtype=torch.long, device=x.device), torch.ones(n, dtype=torch.long, device=x.device)]
    )
    with torch.no_grad():
        out = model.forward_core(x, t, cond)
    return out[:n], out[n:]


def infer_cfg(model, x: torch.Tensor, g: GuidanceConfig, clamp: bool = True) -> torch.Tensor:
    """Condition guidance: omega * positive + (1 - omega) * negative, both
    branches on the unpadded input, batched as a single call.

    Degenerate weights (omega exactly 1 or 0) run only the live branch.
    That skips half the compute and keeps the output bit-identical to
    single-branch inference; batched convolution kernels are not bit-stable
    across batch sizes, so evaluating the dead branch would perturb low bits.
    """
    if g.omega == 1.0:
        return infer_plain(model, x, g.t, "pos", clamp)
    if g.omega == 0.0:
        return infer_plain(model, x, g.t, "neg", clamp)
    r = model.cfg.shuffle_factor
    x, h, w = _ensure_divisible(x, r)
    pos_core, neg_core = _dual_branch_core(model, torch.cat([x, x], dim=0), g.t)
    y = _combine_and_shuffle(model, pos_core, neg_core, g.omega, g.combine_space)
    y = crop(y, 0, 0, h, w)
    return _finish(y, clamp)


def _combine_and_shuffle(model, pos_core, neg_core, omega: float, space: str) -> torch.Tensor:
    needs_shuffle = model.cfg.variant == "stage2"
    if not needs_shuffle:
        return omega * pos_core + (1.0 - omega) * neg_core
    r = model.cfg.shuffle_factor
    if space == "shuffled":
        return pixel_shuffle(omega * pos_core + (1.0 - omega) * neg_core, r)
    return omega * pixel_shuffle(pos_core, r) + (1.0 - omega) * pixel_shuffle(neg_core, r)


def infer_padcfg(model, x: torch.Tensor, g: GuidanceConfig, clamp: bool = True) -> torch.Tensor:
    """Padding-phase guidance (see module docstring). Requires a pixel-output
    model (the padded branches must re-shuffle to pixels for cropping)."""
    if model.cfg.variant != "stage2":
        raise ValueError("padcfg needs a pixel-to-pixel (stage2) model")
    r = model.cfg.shuffle_factor
    x, h, w = _ensure_divisible(x, r)
    hp, wp = x.shape[-2:]
    if g.omega in (1.0, 0.0):
        # degenerate weights: run only the live branch (see infer_cfg); the
        # crop still follows the positive phase, so the omega=0 output keeps
        # the negative branch's deliberate one-pixel misalignment
        phase, cond = ((g.pos_phase, "pos") if g.omega == 1.0 else (g.neg_phase, "neg"))
        with torch.no_grad():
            y = model(pad(x, _phase_pad_spec(phase)), g.t, cond)
    else:
        x_pos = pad(x, _phase_pad_spec(g.pos_phase))
        x_neg = pad(x, _phase_pad_spec(g.neg_phase))
        pos_core, neg_core = _dual_branch_core(model, torch.cat([x_pos, x_neg], dim=0), g.t)
        y = _combine_and_shuffle(model, pos_core, neg_core, g.omega, g.combine_space)
    # crop by the positive branch's pad, then undo any divisibility pad
    y = crop(y, g.pos_phase[1], g.pos_phase[0], hp, wp)
    y = crop(y, 0, 0, h, w)
    return _finish(y, clamp)


def infer_ensemble(
    model,
    x: torch.Tensor,
    g: GuidanceConfig,
    pads: list[tuple[int, int]] | None = None,
    n: int | None = None,
    seed: int | None = None,
    clamp: bool = True,
) -> torch.Tensor:
    """Padding self-ensemble: for each phase pair (p_h, p_w), reflect-pad by
    (p_h, 8-p_h, p_w, 8-p_w), run the model (with CFG when g.mode == 'cfg'),
    crop the pad back, and average. Accumulation runs in float64 so averaging
    n identical branches is exactly idempotent."""
    r = model.cfg.shuffle_factor
    if pads is None:
        n = n if n is not None else (g.ensemble_size or 4)
        gen = torch.Generator()
        gen.manual_seed(seed if seed is not None else g.ensemble_seed)
        draws = torch.randint(0, 8, (n, 2), generator=gen)
        pads = [(int(a), int(b)) for a, b in draws]
    if not pads:
        raise ValueError("ensemble needs at least one pad pair")
    x, h, w = _ensure_divisible(x, r)
    hp, wp = x.shape[-2:]
    acc = None
    for p_h, p_w in pads:
        spec = _phase_pad_spec((p_h, p_w))
        xb = pad(x, spec)
        if g.mode == "cfg":
            yb = infer_cfg(model, xb, g, clamp=False)
        else:
            yb = infer_plain(model, xb, g.t, clamp=False)
        yb = crop(yb, spec.top, spec.left, hp, wp)
        acc = yb.double() if acc is None else acc + yb.double()
    y = (acc / len(pads)).to(x.dtype)
    y = crop(y, 0, 0, h, w)
    return _finish(y, clamp)


def infer_tiled(
    model, x: torch.Tensor, tiles: TileConfig, g: GuidanceConfig, clamp: bool = True
) -> torch.Tensor:
    """Split into overlapping tiles, run guided inference per tile, feather-
    merge. Tiles run sequentially (bounded memory)."""
    h, w = x.shape[-2:]
    pieces = []
    for tile, top, left in tile_split(x, tiles):
        y = run_guided(model, tile, g, clamp=False)
        pieces.append((y, top, left))
    merged = tile_merge(pieces, h, w, tiles)
    return _finish(merged, clamp)


def run_guided(
    model,
    x: torch.Tensor,
    g: GuidanceConfig,
    tiles: TileConfig | None = None,
    clamp: bool = True,
) -> torch.Tensor:
    """Dispatch on the guidance config (and optional tiling)."""
    if tiles is not None:
        return infer_tiled(model, x, tiles, g, clamp)
    if g.ensemble_size > 0:
        return infer_ensemble(model, x, g, clamp=clamp)
    if g.mode == "none":
        return infer_plain(model, x, g.t, clamp=clamp)
    if g.mode == "cfg":
        return infer_cfg(model, x, g, clamp=clamp)
    return infer_padcfg(model, x, g, clamp=clamp)


def apply_fixmod(
    result: torch.Tensor,
    lq: torch.Tensor,
    refine: bool = False,
    refiner=None,
) -> torch.Tensor:
    """Color-band correction against the (upsampled-if-needed) input."""
    from .models import fixmod_apply

    if lq.shape[-2:] != result.shape[-2:]:
        lq = torch.nn.functional.interpolate(
            lq, size=result.shape[-2:], mode="bicubic", align_corners=False
        ).clamp(0.0, 1.0)
    return fixmod_apply(result, lq, refine=refine, refiner=refiner)
