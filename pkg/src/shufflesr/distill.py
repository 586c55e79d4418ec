"""Two-stage adversarial distillation of a latent-space one-step teacher into
a pixel-space one-step student.

Stage 1 removes the encoder: a pixel-input student learns to emit the
teacher's output latent directly. The frozen teacher doubles as the
discriminator's feature extractor; small trainable heads sit on its taps.

Stage 2 removes the decoder: a pixel-to-pixel student (initialized from the
stage-1 model, identity at start) matches the teacher's decoded output, with
the stage-1 model as frozen feature extractor. Discriminator inputs are
randomly phase-padded so the heads cannot key on the sub-pixel grid
alignment; the generator's own adversarial term sees the unpadded output.
A perceptual distance and the masked Fourier loss (both against the teacher
output) complete the stage-2 objective.

Every update step is: heads first, then generator, 1:1, shared learning rate.
All randomness flows through a checkpointed torch.Generator plus the
stateless batch stream, so interrupted runs resume bit-exactly.
"""

from __future__ import annotations

import json
import math
import sys
from contextlib import contextmanager
from dataclasses import dataclass, asdict
from pathlib import Path

import torch

from .data import BatchStream, Corpus, DegradationConfig, mix_seed
from .frequency import FrequencyMask, build_mask
from .losses import DEFAULT_LAMBDAS, adv_d_loss, stage1_losses, stage2_losses
from .models import (
    ConditionalUNet,
    DiscriminatorHeadSet,
    GeneratorConfig,
    ToyVAE,
    VAEConfig,
    build_generator,
    build_vae,
    freeze,
    init_stage1_from_teacher,
    init_stage2_from_stage1,
    logit_mean,
    load_checkpoint,
    pack_module,
    pack_optimizer,
    save_checkpoint,
    unpack_module,
    unpack_optimizer,
)
from .tensor_ops import PadSpec, pad

LOG_KEYS = ("step", "stage", "match", "adv_g", "adv_d", "perceptual", "mfs", "total")


class NumericAbort(RuntimeError):
    """Raised when a loss turns non-finite; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class ModelSpec:
    """Architecture dimensions shared by the teacher and both students."""

    image_channels: int = 3
    latent_channels: int = 16
    shuffle_factor: int = 8
    base_width: int = 32
    depth: int = 2
    mid_blocks: int = 1
    cond_dim: int = 64
    vae_base_width: int = 32
    head_hidden: int = 64

    def generator_config(self, variant: str) -> GeneratorConfig:
        return GeneratorConfig(
            variant=variant,
            image_channels=self.image_channels,
            latent_channels=self.latent_channels,
            shuffle_factor=self.shuffle_factor,
            base_width=self.base_width,
            depth=self.depth,
            mid_blocks=self.mid_blocks,
            cond_dim=self.cond_dim,
        )

    def vae_config(self) -> VAEConfig:
        return VAEConfig(
            image_channels=self.image_channels,
            latent_channels=self.latent_channels,
            base_width=self.vae_base_width,
        )


@dataclass
class TeacherConfig:
    vae_steps: int = 500
    teacher_steps: int = 500
    vae_lr: float = 1e-3
    teacher_lr: float = 5e-4
    batch_size: int = 8
    t: int = 499
    neg_weight: float = 0.1
    crop_size: int | None = None
    seed: int = 0
    log_every: int = 10
    heartbeat_every: int = 100
    threads: int | None = None


@dataclass
class StageConfig:
    stage: int = 1
    steps: int = 1000
    batch_size: int = 4
    lr: float = 1e-5
    lambdas: tuple[float, float, float] = DEFAULT_LAMBDAS
    t: int = 499
    neg_cond_prob: float = 0.25
    randpad_enabled: bool = True
    mfs_enabled: bool = True
    mask_halfwidth: int = 1
    crop_size: int | None = None
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 1
    heartbeat_every: int = 50
    threads: int | None = None

    def __post_init__(self) -> None:
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")


@dataclass
class TeacherBundle:
    vae: ToyVAE
    unet: ConditionalUNet


@dataclass
class TrainState:
    cfg: StageConfig
    student: ConditionalUNet
    heads: DiscriminatorHeadSet
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    gen: torch.Generator
    step: int = 0
    mask: FrequencyMask | None = None


# ------------------------------------------------------------------ #


def randpad(
    img: torch.Tensor,
    generator: torch.Generator | None = None,
    phases: tuple[int, int] | None = None,
) -> tuple[torch.Tensor, tuple[int, int]]:
    """Random-phase pad to (H+8, W+8): draw p_h, p_w ~ U{0..7} and reflect-pad
    by (left, right, top, bottom) = (p_h, 8-p_h, p_w, 8-p_w). Pass ``phases``
    to fix the draw."""
    if phases is None:
        draws = torch.randint(0, 8, (2,), generator=generator)
        p_h, p_w = int(draws[0]), int(draws[1])
    else:
        p_h, p_w = phases
    spec = PadSpec(left=p_h, right=8 - p_h, top=p_w, bottom=8 - p_w, mode="reflect")
    return pad(img, spec), (p_h, p_w)


@contextmanager
def _frozen(module: torch.nn.Module):
    states = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, s in zip(module.parameters(), states):
            p.requires_grad_(s)


def _draw_cond(state: TrainState, batch_size: int) -> torch.Tensor:
    """Per-sample condition indices: 0 = positive, 1 = negative."""
    u = torch.rand(batch_size, generator=state.gen)
    return (u < state.cfg.neg_cond_prob).long()


def _check_finite(record: dict, state: TrainState, batch: dict, out_dir: Path | None) -> None:
    bad = [k for k, v in record.items() if isinstance(v, float) and not math.isfinite(v)]
    if not bad:
        return
    snapshot = {
        "step": state.step,
        "non_finite": bad,
        "record": record,
        "sample_meta": batch.get("meta", []),
    }
    if out_dir is not None:
        (out_dir / "abort.json").write_text(json.dumps(snapshot, indent=2, default=str))
    raise NumericAbort(f"non-finite loss component(s) {bad} at step {state.step}", snapshot)


# ------------------------------------------------------------------ #
# single optimization steps


def stage1_step(state: TrainState, batch: dict, teacher: TeacherBundle) -> dict:
    """One discriminator + generator update for stage 1. Returns the log record."""
    cfg = state.cfg
    x_l, x_h = batch["lq"], batch["hq"]
    cond = _draw_cond(state, x_l.shape[0])

    with torch.no_grad():
        z_l = teacher.vae.encode(x_l)
        z_h = teacher.vae.encode(x_h)
        z_r = teacher.unet(z_l, cfg.t, cond)

    z_g = state.student(x_l, cfg.t, cond)

    # heads update: features of real (encoded HQ) vs fake (student) latents,
    # both detached so only the heads receive gradient
    d_h = teacher.unet.features(z_h, cfg.t, cond)
    d_g = teacher.unet.features(z_g.detach(), cfg.t, cond)
    d_real = logit_mean(state.heads(d_h))
    d_fake = logit_mean(state.heads(d_g))
    loss_d, _, _ = adv_d_loss(d_real, d_fake)
    state.opt_d.zero_grad()
    loss_d.backward()
    state.opt_d.step()

    # generator update against the just-updated, now-frozen heads
    with _frozen(state.heads):
        d_g_live = teacher.unet.features(z_g, cfg.t, cond)
        fake_live = logit_mean(state.heads(d_g_live))
        bundle = stage1_losses(z_g, z_r, fake_live, cfg.lambdas[0])
        state.opt_g.zero_grad()
        bundle.total.backward()
        state.opt_g.step()

    return {
        "step": state.step,
        "stage": 1,
        "match": bundle.components["match"],
        "adv_g": bundle.components["adv_g"],
        "adv_d": loss_d.item(),
        "perceptual": 0.0,
        "mfs": 0.0,
        "total": bundle.total.item(),
        "d_real": d_real.item(),
        "d_fake": d_fake.item(),
    }


def stage2_step(
    state: TrainState, batch: dict, teacher: TeacherBundle, extractor: ConditionalUNet
) -> dict:
    """One discriminator + generator update for stage 2."""
    cfg = state.cfg
    x_l, x_h = batch["lq"], batch["hq"]
    cond = _draw_cond(state, x_l.shape[0])

    with torch.no_grad():
        z_l = teacher.vae.encode(x_l)
        z_r = teacher.unet(z_l, cfg.t, cond)
        x_r = teacher.vae.decode(z_r)

    x_g = state.student(x_l, cfg.t, cond)

    # heads update on phase-padded real/fake images (independent draws)
    if cfg.randpad_enabled:
        x_h_pad, _ = randpad(x_h, state.gen)
        x_g_pad, _ = randpad(x_g.detach(), state.gen)
    else:
        x_h_pad, _ = randpad(x_h, phases=(0, 0))
        x_g_pad, _ = randpad(x_g.detach(), phases=(0, 0))
    d_h = extractor.features(x_h_pad, cfg.t, cond)
    d_g = extractor.features(x_g_pad, cfg.t, cond)
    d_real = logit_mean(state.heads(d_h))
    d_fake = logit_mean(state.heads(d_g))
    loss_d, _, _ = adv_d_loss(d_real, d_fake)
    state.opt_d.zero_grad()
    loss_d.backward()
    state.opt_d.step()

    # generator update: adversarial term on the unpadded output
    lambdas = cfg.lambdas if cfg.mfs_enabled else (cfg.lambdas[0], cfg.lambdas[1], 0.0)
    with _frozen(state.heads):
        d_g_live = extractor.features(x_g, cfg.t, cond)
        fake_live = logit_mean(state.heads(d_g_live))
        bundle = stage2_losses(x_g, x_r, fake_live, state.mask, lambdas)
        state.opt_g.zero_grad()
        bundle.total.backward()
        state.opt_g.step()

    return {
        "step": state.step,
        "stage": 2,
        "match": bundle.components["match"],
        "adv_g": bundle.components["adv_g"],
        "adv_d": loss_d.item(),
        "perceptual": bundle.components["perceptual"],
        "mfs": bundle.components["mfs"],
        "total": bundle.total.item(),
        "d_real": d_real.item(),
        "d_fake": d_fake.item(),
    }


# ------------------------------------------------------------------ #
# full runs


def _stage_checkpoint(state: TrainState, spec: ModelSpec, path: Path) -> None:
    tensors = {}
    tensors.update(pack_module(state.student, "model"))
    tensors.update(pack_module(state.heads, "heads"))
    tg, meta_g = pack_optimizer(state.opt_g, "opt_g")
    td, meta_d = pack_optimizer(state.opt_d, "opt_d")
    tensors.update(tg)
    tensors.update(td)
    tensors["rng/randpad"] = state.gen.get_state()
    save_checkpoint(
        path,
        kind=f"stage{state.cfg.stage}",
        step=state.step,
        config={
            "stage_config": _jsonable(asdict(state.cfg)),
            "model_spec": asdict(spec),
        },
        tensors=tensors,
        meta={"opt_g": meta_g, "opt_d": meta_d},
    )


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (list, tuple)):
        return [_jsonable(v) for v in d]
    return d


def _resume_state(state: TrainState, path: str | Path) -> None:
    ck = load_checkpoint(path)
    expected = f"stage{state.cfg.stage}"
    if ck.kind != expected:
        raise ValueError(f"resume checkpoint kind {ck.kind!r} does not match {expected!r}")
    unpack_module(state.student, ck.tensors, "model")
    unpack_module(state.heads, ck.tensors, "heads")
    unpack_optimizer(state.opt_g, ck.tensors, ck.meta["opt_g"], "opt_g")
    unpack_optimizer(state.opt_d, ck.tensors, ck.meta["opt_d"], "opt_d")
    state.gen.set_state(ck.tensors["rng/randpad"].clone())
    state.step = ck.step


def run_stage(
    cfg: StageConfig,
    corpus: Corpus,
    degradation: DegradationConfig,
    teacher: TeacherBundle,
    spec: ModelSpec,
    extractor: ConditionalUNet | None = None,
    stage1_model: ConditionalUNet | None = None,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
) -> tuple[TrainState, Path | None]:
    """Run one distillation stage to cfg.steps. Returns the final state and
    the checkpoint path (None if out_dir is not given).

    Stage 1 uses the teacher UNet as feature extractor. Stage 2 requires
    ``stage1_model``; it serves as both the student's initializer and (frozen)
    the feature extractor unless a separate ``extractor`` is passed.
    """
    if cfg.threads:
        torch.set_num_threads(cfg.threads)
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    freeze(teacher.vae).eval()
    freeze(teacher.unet).eval()

    torch.manual_seed(mix_seed(cfg.seed, 100 + cfg.stage) % (2**63))
    if cfg.stage == 1:
        student = ConditionalUNet(spec.generator_config("stage1"))
        init_stage1_from_teacher(student, teacher.unet)
        extractor = teacher.unet
    else:
        if stage1_model is None:
            raise ValueError("stage 2 requires the stage-1 model")
        student = ConditionalUNet(spec.generator_config("stage2"))
        init_stage2_from_stage1(student, stage1_model)
        if extractor is None:
            extractor = stage1_model
        freeze(extractor).eval()

    heads = DiscriminatorHeadSet(extractor.tap_channels, spec.head_hidden)
    opt_g = torch.optim.AdamW(student.parameters(), lr=cfg.lr, weight_decay=0.0)
    opt_d = torch.optim.AdamW(heads.parameters(), lr=cfg.lr, weight_decay=0.0)
    gen = torch.Generator()
    gen.manual_seed(mix_seed(cfg.seed, 200 + cfg.stage) % (2**63))

    crop = cfg.crop_size or corpus.size
    mask = None
    if cfg.stage == 2:
        mask = build_mask(crop, crop, spec.shuffle_factor, cfg.mask_halfwidth)

    state = TrainState(cfg=cfg, student=student, heads=heads, opt_g=opt_g, opt_d=opt_d, gen=gen, mask=mask)
    if resume is not None:
        _resume_state(state, resume)

    stream = BatchStream(
        corpus, degradation, cfg.batch_size, epoch_seed=mix_seed(cfg.seed, 300 + cfg.stage), crop_size=crop
    )

    log_f = open(out_path / f"train_stage{cfg.stage}.jsonl", "a") if out_path else None
    ckpt_path = out_path / f"stage{cfg.stage}.ckpt" if out_path else None
    try:
        while state.step < cfg.steps:
            batch = stream.batch(state.step)
            if cfg.stage == 1:
                record = stage1_step(state, batch, teacher)
            else:
                record = stage2_step(state, batch, teacher, extractor)
            _check_finite(record, state, batch, out_path)
            if log_f and state.step % cfg.log_every == 0:
                log_f.write(json.dumps(record) + "\n")
                log_f.flush()
            if cfg.heartbeat_every and state.step % cfg.heartbeat_every == 0:
                print(
                    f"[stage{cfg.stage}] step {state.step}/{cfg.steps} "
                    f"total={record['total']:.4f} match={record['match']:.4f}",
                    file=sys.stderr,
                )
            state.step += 1
            if ckpt_path and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                _stage_checkpoint(state, spec, ckpt_path)
        if ckpt_path:
            _stage_checkpoint(state, spec, ckpt_path)
    finally:
        if log_f:
            log_f.close()
    return state, ckpt_path


# ------------------------------------------------------------------ #
# teacher pretraining (toy stand-ins for the off-the-shelf latent pipeline)


def train_teacher(
    cfg: TeacherConfig,
    spec: ModelSpec,
    corpus: Corpus,
    degradation: DegradationConfig,
    out_dir: str | Path | None = None,
) -> TeacherBundle:
    """Pretrain the toy VAE (reconstruction + KL), then the latent one-step
    teacher on frozen encodings. The positive condition maps the degraded
    latent to the clean latent; the negative condition (down-weighted) maps it
    to itself, so guidance later has a meaningful unenhanced branch."""
    if cfg.threads:
        torch.set_num_threads(cfg.threads)
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    vae = build_vae(spec.vae_config(), seed=mix_seed(cfg.seed, 10) % (2**63))
    noise_gen = torch.Generator()
    noise_gen.manual_seed(mix_seed(cfg.seed, 11) % (2**63))
    opt = torch.optim.AdamW(vae.parameters(), lr=cfg.vae_lr, weight_decay=0.0)
    stream = BatchStream(
        corpus, degradation, cfg.batch_size, epoch_seed=mix_seed(cfg.seed, 12), crop_size=cfg.crop_size
    )
    log_f = open(out_path / "train_teacher.jsonl", "a") if out_path else None
    try:
        for step in range(cfg.vae_steps):
            batch = stream.batch(step)
            loss, parts = vae.loss(batch["hq"], noise_gen)
            if not math.isfinite(loss.item()):
                raise NumericAbort(f"VAE loss non-finite at step {step}", {"step": step, **parts})
            opt.zero_grad()
            loss.backward()
            opt.step()
            if log_f and step % cfg.log_every == 0:
                log_f.write(json.dumps({"phase": "vae", "step": step, **parts}) + "\n")
            if cfg.heartbeat_every and step % cfg.heartbeat_every == 0:
                print(f"[teacher/vae] step {step}/{cfg.vae_steps} rec={parts['rec']:.4f}", file=sys.stderr)

        freeze(vae).eval()
        unet = build_generator(
            spec.generator_config("teacher_latent"), seed=mix_seed(cfg.seed, 13) % (2**63)
        )
        opt_u = torch.optim.AdamW(unet.parameters(), lr=cfg.teacher_lr, weight_decay=0.0)
        for step in range(cfg.teacher_steps):
            batch = stream.batch(cfg.vae_steps + step)
            with torch.no_grad():
                z_l = vae.encode(batch["lq"])
                z_h = vae.encode(batch["hq"])
            pos = (unet(z_l, cfg.t, "pos") - z_h).abs().mean()
            neg = (unet(z_l, cfg.t, "neg") - z_l).abs().mean()
            loss = pos + cfg.neg_weight * neg
            if not math.isfinite(loss.item()):
                raise NumericAbort(
                    f"teacher loss non-finite at step {step}",
                    {"step": step, "pos": pos.item(), "neg": neg.item()},
                )
            opt_u.zero_grad()
            loss.backward()
            opt_u.step()
            if log_f and step % cfg.log_every == 0:
                log_f.write(
                    json.dumps(
                        {"phase": "unet", "step": step, "pos": pos.item(), "neg": neg.item()}
                    )
                    + "\n"
                )
            if cfg.heartbeat_every and step % cfg.heartbeat_every == 0:
                print(f"[teacher/unet] step {step}/{cfg.teacher_steps} pos={pos.item():.4f}", file=sys.stderr)
    finally:
        if log_f:
            log_f.close()

    if out_path is not None:
        save_checkpoint(
            out_path / "vae.ckpt",
            kind="vae",
            step=cfg.vae_steps,
            config={"vae_config": asdict(spec.vae_config()), "model_spec": asdict(spec)},
            tensors=pack_module(vae, "model"),
        )
        save_checkpoint(
            out_path / "teacher.ckpt",
            kind="teacher",
            step=cfg.teacher_steps,
            config={
                "generator_config": asdict(spec.generator_config("teacher_latent")),
                "model_spec": asdict(spec),
            },
            tensors=pack_module(unet, "model"),
        )
    return TeacherBundle(vae=vae, unet=unet)


# ------------------------------------------------------------------ #
# checkpoint loading helpers


def load_teacher(out_dir: str | Path) -> tuple[TeacherBundle, ModelSpec]:
    out = Path(out_dir)
    ck_vae = load_checkpoint(out / "vae.ckpt")
    ck_unet = load_checkpoint(out / "teacher.ckpt")
    spec = ModelSpec(**ck_unet.config["model_spec"])
    vae = ToyVAE(spec.vae_config())
    unpack_module(vae, ck_vae.tensors, "model")
    unet = ConditionalUNet(spec.generator_config("teacher_latent"))
    unpack_module(unet, ck_unet.tensors, "model")
    freeze(vae).eval()
    freeze(unet).eval()
    return TeacherBundle(vae=vae, unet=unet), spec


def load_student(path: str | Path) -> tuple[ConditionalUNet, ModelSpec]:
    """Load a stage-1 or stage-2 student from its checkpoint, frozen, eval."""
    ck = load_checkpoint(path)
    if ck.kind not in ("stage1", "stage2"):
        raise ValueError(f"expected a stage checkpoint, got kind {ck.kind!r}")
    spec = ModelSpec(**ck.config["model_spec"])
    variant = "stage1" if ck.kind == "stage1" else "stage2"
    model = ConditionalUNet(spec.generator_config(variant))
    unpack_module(model, ck.tensors, "model")
    freeze(model).eval()
    return model, spec
