"""Command-line entry point.

One command per workflow: train-teacher, distill, infer, eval, profile,
analyze-spectrum, manifest. Every command reads a strict YAML config (unknown
keys are errors), writes a resolved-config snapshot beside its outputs, and
exits with a distinct code per failure class:

    0  success
    2  config error (bad YAML, unknown/invalid keys, bad flag combinations)
    3  data error (missing/unreadable inputs)
    4  numeric abort (non-finite loss during training)
    5  out of memory

The env var SHUFFLESR_DEVICE overrides any configured device.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from .data import (
    Corpus,
    DataError,
    DegradationConfig,
    load_user_corpus,
    make_synthetic_corpus,
    write_manifest,
)
from .distill import (
    ModelSpec,
    NumericAbort,
    StageConfig,
    TeacherConfig,
    load_student,
    load_teacher,
    run_stage,
    train_teacher,
)
from .evalbench import MetricReport, compare_runs, evaluate, get_metric, write_report
from .frequency import artifact_score
from .inference import GuidanceConfig, apply_fixmod, run_guided
from .manifest import generate_repro_manifest, verify_registry, write_repro_manifest
from .profiling import ProfileSpec, plot_profile, profile_pipeline, write_profile_csv
from .tensor_ops import TileConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_OOM = 5

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


class ConfigError(ValueError):
    """Invalid configuration: bad YAML, unknown keys, inconsistent flags."""


# ------------------------------------------------------------------ #
# strict config parsing


def _load_yaml(path: str | Path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be a mapping, got {type(raw).__name__}")
    return raw


def _check_keys(raw: dict, allowed: set[str], where: str) -> None:
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(
            f"unknown key(s) {sorted(unknown)} in {where}; allowed: {sorted(allowed)}"
        )


def build_section(cls, raw: dict | None, where: str):
    """Build a config dataclass from a YAML mapping, rejecting unknown keys.
    YAML lists are coerced to tuples for fields whose default is a tuple."""
    raw = dict(raw or {})
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    _check_keys(raw, names, where)
    for f in dataclasses.fields(cls):
        if f.name in raw and isinstance(raw[f.name], list):
            raw[f.name] = tuple(
                tuple(v) if isinstance(v, list) else v for v in raw[f.name]
            )
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class DataSection:
    """Where training images come from."""

    kind: str = "synthetic"  # synthetic | folder
    count: int = 24
    size: int = 128
    seed: int = 0
    path: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("synthetic", "folder"):
            raise ValueError(f"data.kind must be 'synthetic' or 'folder', got {self.kind!r}")
        if self.kind == "folder" and not self.path:
            raise ValueError("data.kind 'folder' requires data.path")


def build_corpus(section: DataSection) -> Corpus:
    if section.kind == "synthetic":
        return make_synthetic_corpus(section.count, section.size, section.seed)
    return load_user_corpus(section.path, section.size)


def resolve_device(configured: str | None) -> str:
    """Env override first, then the config value, then cpu."""
    device = os.environ.get("SHUFFLESR_DEVICE") or configured or "cpu"
    if device != "cpu" and not device.startswith("cuda"):
        raise ConfigError(f"unknown device {device!r}; expected 'cpu' or 'cuda[:N]'")
    if device.startswith("cuda") and not torch.cuda.is_available():
        raise ConfigError(f"device {device!r} requested but CUDA is not available")
    return device


def _require_cpu(device: str, command: str) -> None:
    if device != "cpu":
        raise ConfigError(f"{command} runs on cpu in this implementation, got {device!r}")


def write_snapshot(out_dir: str | Path, command: str, payload: dict) -> Path:
    """Resolved-config echo written beside the command's outputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"config.{command}.json"
    path.write_text(json.dumps(payload, indent=2, default=str))
    return path


# ------------------------------------------------------------------ #
# image I/O


def _load_image(path: Path) -> torch.Tensor:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)


def _save_image(t: torch.Tensor, path: Path) -> None:
    if t.ndim == 4:
        t = t[0]
    arr = (t.clamp(0, 1) * 255.0).round().byte().permute(1, 2, 0).numpy()
    Image.fromarray(arr).save(path)


def _collect_images(inputs: list[str]) -> list[Path]:
    found: list[Path] = []
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            found.extend(
                q for q in sorted(p.iterdir()) if q.suffix.lower() in IMAGE_EXTENSIONS
            )
        elif p.is_file():
            found.append(p)
        else:
            raise DataError(f"input not found: {p}")
    if not found:
        raise DataError(f"no images found under {inputs}")
    return found


# ------------------------------------------------------------------ #
# commands


def cmd_train_teacher(args) -> int:
    raw = _load_yaml(args.config)
    _check_keys(raw, {"model", "teacher", "data", "degradation", "device"}, "config")
    spec = build_section(ModelSpec, raw.get("model"), "model")
    teacher_cfg = build_section(TeacherConfig, raw.get("teacher"), "teacher")
    data_cfg = build_section(DataSection, raw.get("data"), "data")
    degradation = build_section(DegradationConfig, raw.get("degradation"), "degradation")
    device = resolve_device(raw.get("device"))
    _require_cpu(device, "train-teacher")

    write_snapshot(
        args.out,
        "train-teacher",
        {
            "command": "train-teacher",
            "device": device,
            "model": asdict(spec),
            "teacher": asdict(teacher_cfg),
            "data": asdict(data_cfg),
            "degradation": asdict(degradation),
        },
    )
    corpus = build_corpus(data_cfg)
    write_manifest(corpus, degradation, Path(args.out) / "corpus_manifest.json")
    train_teacher(teacher_cfg, spec, corpus, degradation, out_dir=args.out)
    print(f"teacher checkpoints written to {args.out}")
    return EXIT_OK


def cmd_distill(args) -> int:
    raw = _load_yaml(args.config)
    _check_keys(raw, {"model", "stage", "data", "degradation", "device"}, "config")
    raw_stage = dict(raw.get("stage") or {})
    if args.stage is not None:
        raw_stage["stage"] = args.stage
    elif "stage" not in raw_stage:
        raise ConfigError("pass --stage 1|2 or set stage.stage in the config")
    stage_cfg = build_section(StageConfig, raw_stage, "stage")
    data_cfg = build_section(DataSection, raw.get("data"), "data")
    degradation = build_section(DegradationConfig, raw.get("degradation"), "degradation")
    device = resolve_device(raw.get("device"))
    _require_cpu(device, "distill")

    teacher, spec = load_teacher(args.teacher)
    if raw.get("model") is not None:
        configured = build_section(ModelSpec, raw["model"], "model")
        if asdict(configured) != asdict(spec):
            raise ConfigError(
                "config model section disagrees with the teacher checkpoint's "
                f"architecture: {asdict(configured)} vs {asdict(spec)}"
            )

    stage1_model = None
    if stage_cfg.stage == 2:
        if not args.stage1:
            raise ConfigError("stage 2 requires --stage1 pointing at the stage-1 checkpoint")
        stage1_model, spec1 = load_student(args.stage1)
        if stage1_model.cfg.variant != "stage1":
            raise ConfigError(f"--stage1 must be a stage-1 checkpoint, got {stage1_model.cfg.variant}")
        if asdict(spec1) != asdict(spec):
            raise ConfigError("stage-1 checkpoint architecture disagrees with the teacher's")
    elif args.stage1:
        raise ConfigError("--stage1 only applies to --stage 2")

    write_snapshot(
        args.out,
        f"distill-stage{stage_cfg.stage}",
        {
            "command": "distill",
            "device": device,
            "teacher": str(args.teacher),
            "stage1": str(args.stage1) if args.stage1 else None,
            "resume": str(args.resume) if args.resume else None,
            "model": asdict(spec),
            "stage": asdict(stage_cfg),
            "data": asdict(data_cfg),
            "degradation": asdict(degradation),
        },
    )
    corpus = build_corpus(data_cfg)
    _, ckpt = run_stage(
        stage_cfg,
        corpus,
        degradation,
        teacher,
        spec,
        stage1_model=stage1_model,
        out_dir=args.out,
        resume=args.resume,
    )
    print(f"stage {stage_cfg.stage} checkpoint written to {ckpt}")
    return EXIT_OK


def _guidance_from(args, raw: dict) -> GuidanceConfig:
    section = dict(raw.get("guidance") or {})
    overrides = {
        "mode": args.mode,
        "omega": args.omega,
        "combine_space": args.combine_space,
        "ensemble_size": args.ensemble,
        "ensemble_seed": args.ensemble_seed,
        "t": args.timestep,
        "pos_phase": tuple(args.pos_phase) if args.pos_phase else None,
        "neg_phase": tuple(args.neg_phase) if args.neg_phase else None,
    }
    for key, value in overrides.items():
        if value is not None:
            section[key] = value
    return build_section(GuidanceConfig, section, "guidance")


def cmd_infer(args) -> int:
    raw = _load_yaml(args.config) if args.config else {}
    _check_keys(raw, {"guidance", "tile", "device"}, "config")
    guidance = _guidance_from(args, raw)

    tile_raw = dict(raw.get("tile") or {})
    if args.tile is not None:
        tile_raw.update({"tile_h": args.tile, "tile_w": args.tile})
    if args.overlap is not None:
        tile_raw["overlap"] = args.overlap
    tiles = build_section(TileConfig, tile_raw, "tile") if tile_raw else None

    device = resolve_device(args.device or raw.get("device"))
    if args.threads:
        torch.set_num_threads(args.threads)

    model, _ = load_student(args.model)
    if model.cfg.variant != "stage2":
        raise ConfigError(
            f"infer needs a stage-2 (pixel-space) checkpoint, got {model.cfg.variant!r}"
        )
    model.to(device)

    paths = _collect_images(args.input)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_snapshot(
        out_dir,
        "infer",
        {
            "command": "infer",
            "model": str(args.model),
            "device": device,
            "inputs": [str(p) for p in paths],
            "guidance": asdict(guidance),
            "tile": asdict(tiles) if tiles else None,
            "fixmod": bool(args.fixmod),
            "threads": args.threads,
        },
    )

    timings = []
    for p in paths:
        x = _load_image(p).to(device)
        start = time.perf_counter()
        y = run_guided(model, x, guidance, tiles=tiles)
        if args.fixmod:
            y = apply_fixmod(y, x)
        elapsed_ms = (time.perf_counter() - start) * 1000.0
        out_path = out_dir / (p.stem + ".png")
        _save_image(y.cpu(), out_path)
        timings.append({"name": p.name, "ms": round(elapsed_ms, 3)})
        print(f"{p.name}: {elapsed_ms:.1f} ms -> {out_path}")

    (out_dir / "infer_timing.json").write_text(
        json.dumps(
            {
                "device": device,
                "mode": guidance.mode,
                "omega": guidance.omega,
                "per_image": timings,
                "total_ms": round(sum(t["ms"] for t in timings), 3),
            },
            indent=2,
        )
    )
    return EXIT_OK


def _load_report(path: Path) -> MetricReport:
    payload = json.loads(path.read_text())
    aggregates = {k: float(v) for k, v in payload.get("aggregates", {}).items()}
    return MetricReport(
        per_image=payload.get("per_image", []),
        aggregates=aggregates,
        n_inf=payload.get("n_inf", {}),
    )


def cmd_eval(args) -> int:
    for m in args.metrics:
        try:
            get_metric(m)
        except KeyError as exc:
            raise ConfigError(str(exc)) from exc

    out_paths = _collect_images([args.outputs])
    ref_paths = _collect_images([args.refs])
    by_name_out = {p.name: p for p in out_paths}
    by_name_ref = {p.name: p for p in ref_paths}
    shared = sorted(set(by_name_out) & set(by_name_ref))
    if not shared:
        stems_out = {p.stem: p for p in out_paths}
        stems_ref = {p.stem: p for p in ref_paths}
        shared_stems = sorted(set(stems_out) & set(stems_ref))
        if not shared_stems:
            raise DataError(
                f"no filenames shared between {args.outputs} and {args.refs}"
            )
        pairs = [(s, stems_out[s], stems_ref[s]) for s in shared_stems]
    else:
        pairs = [(n, by_name_out[n], by_name_ref[n]) for n in shared]

    names = [n for n, _, _ in pairs]
    outputs = [_load_image(p)[0].numpy() for _, p, _ in pairs]
    references = [_load_image(p)[0].numpy() for _, _, p in pairs]
    report = evaluate(outputs, references, names, tuple(args.metrics))

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_report(report, out_path, csv_path=args.csv)
    write_snapshot(
        out_path.parent,
        "eval",
        {
            "command": "eval",
            "outputs": str(args.outputs),
            "refs": str(args.refs),
            "metrics": list(args.metrics),
            "n_pairs": len(pairs),
        },
    )
    for m, v in report.aggregates.items():
        print(f"{m}: {v:.6g} over {len(pairs)} pairs")

    if args.compare:
        other = _load_report(Path(args.compare))
        comparison = compare_runs(other, report)
        cmp_path = out_path.with_name(out_path.stem + "_compare.json")
        cmp_path.write_text(json.dumps(comparison, indent=2))
        for m, row in comparison.items():
            print(f"{m}: {row['a']} -> {row['b']} ({row['sign']})")
    return EXIT_OK


def cmd_profile(args) -> int:
    raw = _load_yaml(args.config) if args.config else {}
    _check_keys(raw, {"profile", "device"}, "config")
    spec = build_section(ProfileSpec, raw.get("profile"), "profile")
    device = resolve_device(args.device or raw.get("device") or spec.device)
    spec = dataclasses.replace(spec, device=device)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_snapshot(out_dir, "profile", {"command": "profile", "profile": asdict(spec)})
    records = profile_pipeline(spec)
    write_profile_csv(records, out_dir / "profile.csv")
    plot_profile(records, out_dir / "profile.png")
    for r in records:
        line = f"{r.pipeline} {r.size}px: {r.status}"
        if r.status == "ok":
            line += f" total={r.total_ms:.1f} ms peak={r.peak_memory_mb:.0f} MB"
        print(line)
    return EXIT_OK


def cmd_analyze_spectrum(args) -> int:
    paths = _collect_images(args.input)
    per_image = []
    for p in paths:
        img = _load_image(p)
        rep = artifact_score(img, r=args.factor, s=args.halfwidth, peak_factor=args.peak_factor)
        per_image.append(
            {
                "name": p.name,
                "periodic_energy_ratio": rep.periodic_energy_ratio,
                "baseline_ratio": rep.baseline_ratio,
                "n_peaks": len(rep.peak_positions),
                "peaks": [list(pk) for pk in rep.peak_positions],
            }
        )
        print(
            f"{p.name}: periodic_energy_ratio={rep.periodic_energy_ratio:.4f} "
            f"(flat-content baseline {rep.baseline_ratio:.4f}, {len(rep.peak_positions)} peaks)"
        )
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    mean_ratio = float(np.mean([r["periodic_energy_ratio"] for r in per_image]))
    out_path.write_text(
        json.dumps(
            {
                "factor": args.factor,
                "halfwidth": args.halfwidth,
                "peak_factor": args.peak_factor,
                "per_image": per_image,
                "mean_periodic_energy_ratio": mean_ratio,
            },
            indent=2,
        )
    )
    write_snapshot(
        out_path.parent,
        "analyze-spectrum",
        {
            "command": "analyze-spectrum",
            "inputs": [str(p) for p in paths],
            "factor": args.factor,
            "halfwidth": args.halfwidth,
            "peak_factor": args.peak_factor,
        },
    )
    return EXIT_OK


def cmd_manifest(args) -> int:
    if args.verify:
        problems = verify_registry(repo_root=args.repo_root)
        if problems:
            for p in problems:
                print(f"manifest: {p}", file=sys.stderr)
            return 1
        print("manifest registry verified: all operations and tests present")
    if args.out:
        write_repro_manifest(args.out)
        print(f"manifest written to {args.out}")
    elif not args.verify:
        print(generate_repro_manifest())
    return EXIT_OK


# ------------------------------------------------------------------ #
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shufflesr",
        description="One-step pixel-space super-resolution: train, distill, infer, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="pretrain the toy latent pipeline (VAE + one-step model)")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="run one adversarial distillation stage")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", type=int, choices=(1, 2))
    p.add_argument("--teacher", required=True, help="directory with vae.ckpt and teacher.ckpt")
    p.add_argument("--stage1", help="stage-1 checkpoint (required for --stage 2)")
    p.add_argument("--resume", help="resume from a stage checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("infer", help="run guided inference on images")
    p.add_argument("--model", required=True, help="stage-2 checkpoint")
    p.add_argument("--input", nargs="+", required=True, help="image files or directories")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="optional YAML with guidance/tile sections")
    p.add_argument("--mode", choices=("none", "cfg", "padcfg"))
    p.add_argument("--omega", type=float)
    p.add_argument("--pos-phase", nargs=2, type=int, metavar=("PH", "PW"))
    p.add_argument("--neg-phase", nargs=2, type=int, metavar=("PH", "PW"))
    p.add_argument("--combine-space", choices=("shuffled", "pixel"))
    p.add_argument("--ensemble", type=int, help="pad self-ensemble size (0 disables)")
    p.add_argument("--ensemble-seed", type=int)
    p.add_argument("--timestep", type=int)
    p.add_argument("--tile", type=int, help="tile side in pixels (multiples of 8)")
    p.add_argument("--overlap", type=int)
    p.add_argument("--fixmod", action="store_true", help="apply color-band correction")
    p.add_argument("--device")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score outputs against references")
    p.add_argument("--outputs", required=True)
    p.add_argument("--refs", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--csv", help="optional per-image CSV path")
    p.add_argument("--metrics", nargs="+", default=["psnr", "ssim"])
    p.add_argument("--compare", help="earlier report JSON to diff against")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", help="latency/peak-memory grid over both pipelines")
    p.add_argument("--config", help="YAML with a profile section")
    p.add_argument("--out", required=True)
    p.add_argument("--device")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("analyze-spectrum", help="periodic-artifact score of images")
    p.add_argument("--input", nargs="+", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--factor", type=int, default=8)
    p.add_argument("--halfwidth", type=int, default=1)
    p.add_argument("--peak-factor", type=float, default=8.0)
    p.set_defaults(func=cmd_analyze_spectrum)

    p = sub.add_parser("manifest", help="emit or verify the reproduction manifest")
    p.add_argument("--out", help="markdown output path")
    p.add_argument("--verify", action="store_true")
    p.add_argument("--repo-root", default=".")
    p.set_defaults(func=cmd_manifest)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MemoryError:
        print("out of memory", file=sys.stderr)
        return EXIT_OOM
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
