"""Generator variants, the toy VAE, discriminator heads, FixMod, checkpoints."""

import struct

import pytest
import torch

from shufflesr.evalbench import psnr
from shufflesr.models import (
    Checkpoint,
    CheckpointError,
    ConditionalUNet,
    DiscriminatorHeadSet,
    FixModRefiner,
    GeneratorConfig,
    ToyVAE,
    VAEConfig,
    build_generator,
    build_vae,
    fixmod_apply,
    freeze,
    haar_approximation,
    init_stage1_from_teacher,
    init_stage2_from_stage1,
    load_checkpoint,
    logit_mean,
    pack_module,
    pack_optimizer,
    save_checkpoint,
    timestep_embedding,
    train_refiner,
    unpack_module,
    unpack_optimizer,
)
from shufflesr.tensor_ops import pixel_shuffle, pixel_unshuffle

SMALL = dict(base_width=8, depth=1, mid_blocks=1, cond_dim=16, latent_channels=4)


def small_cfg(variant: str, **kw) -> GeneratorConfig:
    args = {**SMALL, **kw}
    return GeneratorConfig(variant=variant, **args)


# ------------------------------------------------------------------ #
# variants and wiring


def test_generator_config_validation_and_channel_arithmetic():
    with pytest.raises(ValueError, match="variant"):
        GeneratorConfig(variant="stage3")
    with pytest.raises(ValueError, match="even"):
        GeneratorConfig(cond_dim=33)
    with pytest.raises(ValueError, match="depth"):
        GeneratorConfig(depth=-1)
    teacher = small_cfg("teacher_latent")
    assert (teacher.core_in_channels, teacher.core_out_channels) == (4, 4)
    s1 = small_cfg("stage1")
    assert (s1.core_in_channels, s1.core_out_channels) == (3 * 64, 4)
    s2 = small_cfg("stage2")
    assert (s2.core_in_channels, s2.core_out_channels) == (3 * 64, 3 * 64)


def test_stage2_fresh_model_is_identity():
    model = build_generator(small_cfg("stage2"), seed=0)
    x = torch.rand((2, 3, 32, 40), generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        y = model(x, 499, "pos")
    assert torch.equal(y, x)


def test_round_trip_exact_where_vae_is_lossy():
    gen = torch.Generator().manual_seed(2)
    x = torch.rand((1, 3, 32, 32), generator=gen)
    assert torch.equal(pixel_shuffle(pixel_unshuffle(x, 8), 8), x)
    vae = build_vae(VAEConfig(latent_channels=4, base_width=8), seed=0)
    with torch.no_grad():
        recon = vae.decode(vae.encode(x))
    p = psnr(recon[0].numpy(), x[0].numpy())
    assert p == p and p < 60.0  # finite and clearly lossy


def test_init_stage1_copies_teacher_core_but_not_head():
    teacher = build_generator(small_cfg("teacher_latent"), seed=3)
    student = build_generator(small_cfg("stage1"), seed=4)
    skipped = init_stage1_from_teacher(student, teacher)
    # head.weight differs in input channels; head.bias has matching shape and
    # is copied by the name-and-shape rule, so only the weight stays fresh.
    assert skipped == ["head.weight"]
    src, dst = teacher.state_dict(), student.state_dict()
    copied = [n for n in dst if n not in skipped]
    assert copied, "expected shared core weights"
    for n in copied:
        assert torch.equal(dst[n], src[n]), n
    with pytest.raises(ValueError, match="stage1"):
        init_stage1_from_teacher(teacher, teacher)


def test_init_stage2_keeps_zero_tail_identity():
    teacher = build_generator(small_cfg("teacher_latent"), seed=5)
    s1 = build_generator(small_cfg("stage1"), seed=6)
    init_stage1_from_teacher(s1, teacher)
    s2 = build_generator(small_cfg("stage2"), seed=7)
    skipped = init_stage2_from_stage1(s2, s1)
    assert "tail.weight" in skipped and "tail.bias" in skipped
    assert torch.equal(s2.state_dict()["head.weight"], s1.state_dict()["head.weight"])
    x = torch.rand((1, 3, 24, 24), generator=torch.Generator().manual_seed(8))
    with torch.no_grad():
        assert torch.equal(s2(x, 499, "pos"), x)


def test_translation_covariance_modulo_factor():
    # stride-1 circular core: shifting the input by multiples of the shuffle
    # factor must shift the output identically
    cfg = small_cfg("stage2", depth=0, padding_mode="circular")
    model = build_generator(cfg, seed=9)
    x = torch.rand((1, 3, 32, 32), generator=torch.Generator().manual_seed(10))
    with torch.no_grad():
        base = model(x, 499, "pos")
        shifted = model(torch.roll(x, shifts=(8, 16), dims=(-2, -1)), 499, "pos")
    assert torch.allclose(shifted, torch.roll(base, shifts=(8, 16), dims=(-2, -1)), atol=1e-5)


def test_forward_counters():
    model = build_generator(small_cfg("stage2"), seed=11)
    x = torch.rand(3, 3, 16, 16)
    model(x)
    model(x[:1])
    assert model.counters == {"calls": 2, "samples": 4}
    model.reset_counters()
    assert model.counters == {"calls": 0, "samples": 0}


def test_condition_branches_differ_and_accept_many_forms():
    model = build_generator(small_cfg("stage1"), seed=12)
    x = torch.rand((2, 3, 16, 16), generator=torch.Generator().manual_seed(13))
    with torch.no_grad():
        pos = model(x, 499, "pos")
        neg = model(x, 499, "neg")
        by_tensor = model(x, 499, torch.tensor([0, 0]))
        by_list = model(x, 499, ["pos", "pos"])
    assert not torch.equal(pos, neg)
    assert torch.equal(pos, by_tensor)
    assert torch.equal(pos, by_list)


def test_timestep_embedding_shape_and_distinct_steps():
    t = torch.tensor([0, 1, 499])
    e = timestep_embedding(t, 16)
    assert e.shape == (3, 16)
    assert not torch.equal(e[0], e[2])
    assert torch.all(e.abs() <= 1.0)


# ------------------------------------------------------------------ #
# toy VAE


def test_vae_shapes_determinism_and_validation():
    vae = build_vae(VAEConfig(latent_channels=4, base_width=8), seed=0)
    x = torch.rand((2, 3, 16, 24), generator=torch.Generator().manual_seed(1))
    z = vae.encode(x)
    assert z.shape == (2, 4, 2, 3)
    assert torch.equal(z, vae.encode(x))  # posterior mean is deterministic
    g1 = torch.Generator().manual_seed(7)
    g2 = torch.Generator().manual_seed(7)
    assert torch.equal(vae.encode(x, sample=True, generator=g1), vae.encode(x, sample=True, generator=g2))
    assert not torch.equal(vae.encode(x, sample=True, generator=g1), z)
    assert vae.decode(z).shape == x.shape
    with pytest.raises(ValueError, match="divisible"):
        vae.encode(torch.rand(1, 3, 15, 16))
    loss, parts = vae.loss(x, torch.Generator().manual_seed(3))
    assert loss.item() == pytest.approx(parts["rec"] + vae.cfg.kl_weight * parts["kl"], rel=1e-5)


# ------------------------------------------------------------------ #
# discriminator heads


def test_logit_mean_matches_manual_total():
    maps = [torch.arange(6.0).reshape(1, 1, 2, 3), torch.tensor([[[[10.0]]]])]
    want = (sum(float(m.sum()) for m in maps)) / 7
    assert logit_mean(maps).item() == pytest.approx(want)


def test_heads_forward_and_freeze_lets_gradients_reach_inputs():
    heads = DiscriminatorHeadSet([8, 16], hidden=4)
    feats = [torch.rand(2, 8, 8, 8), torch.rand(2, 16, 4, 4)]
    logits = heads(feats)
    assert [tuple(l.shape) for l in logits] == [(2, 1, 8, 8), (2, 1, 4, 4)]
    with pytest.raises(ValueError, match="feature maps"):
        heads(feats[:1])

    freeze(heads)
    assert all(not p.requires_grad for p in heads.parameters())
    x = torch.rand(1, 8, 8, 8, requires_grad=True)
    out = heads([x, torch.zeros(1, 16, 4, 4)])
    logit_mean(out).backward()
    assert x.grad is not None and x.grad.abs().sum() > 0


# ------------------------------------------------------------------ #
# FixMod


def haar_oracle(x: torch.Tensor, levels: int) -> torch.Tensor:
    """Block means by explicit reshaping, expanded back with repeat."""
    b = 2**levels
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // b, b, w // b, b).mean(dim=(3, 5))
    return blocks.repeat_interleave(b, dim=2).repeat_interleave(b, dim=3)


def test_haar_approximation_matches_block_average_oracle():
    gen = torch.Generator().manual_seed(14)
    for levels, h, w in [(1, 8, 8), (2, 16, 24), (3, 32, 32)]:
        x = torch.rand((2, 3, h, w), generator=gen)
        assert torch.allclose(haar_approximation(x, levels), haar_oracle(x, levels), atol=1e-6)
    with pytest.raises(ValueError, match="divisible"):
        haar_approximation(torch.rand(1, 3, 20, 32), levels=3)
    with pytest.raises(ValueError, match="levels"):
        haar_approximation(torch.rand(1, 3, 32, 32), levels=0)


def test_fixmod_swaps_low_frequency_band():
    gen = torch.Generator().manual_seed(15)
    # amplitudes chosen so the final clamp never engages
    out = 0.5 + 0.1 * (torch.rand((1, 3, 32, 32), generator=gen) - 0.5)
    lq = 0.5 + 0.1 * (torch.rand((1, 3, 32, 32), generator=gen) - 0.5)
    fixed = fixmod_apply(out, lq)
    # coarse band comes from lq, detail band from the restored output
    assert torch.allclose(haar_approximation(fixed), haar_approximation(lq), atol=1e-5)
    assert torch.allclose(
        fixed - haar_approximation(fixed), out - haar_approximation(out), atol=1e-5
    )
    # an untrained refiner (zero-initialized last conv) is a no-op
    refiner = FixModRefiner()
    assert torch.equal(fixmod_apply(out, lq, refine=True, refiner=refiner), fixed)
    with pytest.raises(ValueError, match="refiner"):
        fixmod_apply(out, lq, refine=True)
    with pytest.raises(ValueError, match="mismatch"):
        fixmod_apply(out, torch.rand(1, 3, 16, 16))


def test_train_refiner_learns_constant_offset():
    torch.manual_seed(16)
    refiner = FixModRefiner(width=8)
    x = torch.rand((1, 3, 16, 16), generator=torch.Generator().manual_seed(17))
    y = (x + 0.1).clamp(0, 1)
    initial = (refiner(x) - y).abs().mean().item()
    final = train_refiner(refiner, [(x, y)], steps=150, lr=1e-2)
    assert final < 0.5 * initial


# ------------------------------------------------------------------ #
# checkpoint container


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = build_generator(small_cfg("stage1"), seed=18)
    opt = torch.optim.AdamW(model.parameters(), lr=1e-3, weight_decay=0.0)
    x = torch.rand((2, 3, 16, 16), generator=torch.Generator().manual_seed(19))
    for _ in range(3):
        loss = model(x, 499, "pos").square().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()

    tensors = pack_module(model, "model")
    opt_tensors, opt_meta = pack_optimizer(opt, "opt")
    rng = torch.rand(5, dtype=torch.float64)
    path = tmp_path / "m.ckpt"
    save_checkpoint(
        path,
        kind="stage1",
        step=3,
        config={"note": "unit", "lr": 1e-3},
        tensors={**tensors, **opt_tensors, "rng/probe": rng},
        meta={"opt": opt_meta},
    )

    ck = load_checkpoint(path)
    assert isinstance(ck, Checkpoint)
    assert (ck.kind, ck.step) == ("stage1", 3)
    assert ck.config == {"note": "unit", "lr": 1e-3}
    for name, t in {**tensors, **opt_tensors, "rng/probe": rng}.items():
        assert torch.equal(ck.tensors[name], t), name

    fresh = build_generator(small_cfg("stage1"), seed=99)
    unpack_module(fresh, ck.tensors, "model")
    for name, t in model.state_dict().items():
        assert torch.equal(fresh.state_dict()[name], t), name
    fresh_opt = torch.optim.AdamW(fresh.parameters(), lr=1e-3, weight_decay=0.0)
    unpack_optimizer(fresh_opt, ck.tensors, ck.meta["opt"], "opt")
    got_state = fresh_opt.state_dict()["state"]
    want_state = opt.state_dict()["state"]
    assert got_state.keys() == want_state.keys()
    for pid in want_state:
        assert torch.equal(got_state[pid]["exp_avg"], want_state[pid]["exp_avg"])


def test_checkpoint_rejects_bad_magic_and_version(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad)

    import json

    header = json.dumps({"format_version": 99, "kind": "x", "step": 0, "config": {}, "meta": {}, "tensors": []}).encode()
    versioned = tmp_path / "v99.ckpt"
    versioned.write_bytes(b"SSRCKPT1" + struct.pack("<Q", len(header)) + header)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(versioned)

    with pytest.raises(CheckpointError, match="dtype"):
        save_checkpoint(tmp_path / "c.ckpt", "x", 0, {}, {"t": torch.zeros(2, dtype=torch.complex64)})


def test_checkpoint_save_is_atomic(tmp_path):
    path = tmp_path / "atomic.ckpt"
    save_checkpoint(path, "x", 0, {}, {"t": torch.arange(4.0)})
    assert path.exists()
    assert not path.with_suffix(".ckpt.tmp").exists()
