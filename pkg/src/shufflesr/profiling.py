"""Latency / memory profiling of the latent-codec pipeline versus the
pixel-space pipeline.

Each (pipeline, size) record runs in a fresh subprocess so peak memory is an
honest per-run high-water mark (resident set on CPU, allocator peak on an
accelerator) and so an out-of-memory condition kills only the child. A memory
budget can be imposed on the child (address-space rlimit), which is also how
OOM handling is exercised without destabilizing the host: the record comes
back with status "oom" instead of crashing the run.

Timing: 2 warmup passes, then the median over ``reps`` timed passes.
"""

from __future__ import annotations

import csv
import json
import math
import statistics
import subprocess
import sys
import time
from dataclasses import dataclass, asdict
from pathlib import Path

PIPELINES = ("latent", "pixel")


@dataclass
class ProfileSpec:
    pipelines: tuple[str, ...] = PIPELINES
    sizes: tuple[int, ...] = (256, 512, 1024)
    reps: int = 5
    warmup: int = 2
    device: str = "cpu"
    mode: str = "none"  # guidance inside the pixel pipeline: none | padcfg
    base_width: int = 32
    depth: int = 2
    mid_blocks: int = 1
    latent_channels: int = 16
    vae_base_width: int = 32
    mem_limit_mb: int | None = None
    seed: int = 0
    threads: int = 1

    def __post_init__(self) -> None:
        for p in self.pipelines:
            if p not in PIPELINES:
                raise ValueError(f"unknown pipeline {p!r}; choices: {PIPELINES}")
        for s in self.sizes:
            if s % 8 != 0:
                raise ValueError(f"profile sizes must be multiples of 8, got {s}")


@dataclass
class ProfileRecord:
    pipeline: str
    size: int
    status: str = "ok"  # ok | oom | error
    reps: int = 0
    encode_ms: float = math.nan
    core_ms: float = math.nan
    decode_ms: float = math.nan
    guidance_ms: float = 0.0
    total_ms: float = math.nan
    peak_memory_mb: float = math.nan
    device: str = "cpu"
    tile_count: int = 1
    note: str = ""


def _worker_payload(spec: ProfileSpec, pipeline: str, size: int) -> dict:
    d = asdict(spec)
    d.update({"pipeline": pipeline, "size": size})
    return d


def profile_pipeline(spec: ProfileSpec) -> list[ProfileRecord]:
    """Run the full grid; one subprocess per record. Never raises on a failed
    record; failures are encoded in ``status``."""
    records = []
    for pipeline in spec.pipelines:
        for size in spec.sizes:
            payload = json.dumps(_worker_payload(spec, pipeline, size))
            try:
                proc = subprocess.run(
                    [sys.executable, "-m", "shufflesr.profiling", "--worker"],
                    input=payload,
                    capture_output=True,
                    text=True,
                    timeout=1800,
                )
            except subprocess.TimeoutExpired:
                records.append(
                    ProfileRecord(pipeline=pipeline, size=size, status="error", note="timeout")
                )
                continue
            rec = _parse_worker_output(proc, pipeline, size, spec.device)
            records.append(rec)
    return records


def _parse_worker_output(proc, pipeline: str, size: int, device: str) -> ProfileRecord:
    for line in reversed(proc.stdout.strip().splitlines() or [""]):
        if line.startswith("{"):
            try:
                d = json.loads(line)
                return ProfileRecord(**d)
            except (json.JSONDecodeError, TypeError):
                break
    # child died without a record: treat a memory-style death as OOM
    note = (proc.stderr or "")[-500:]
    status = "oom" if ("MemoryError" in note or proc.returncode in (-9, 137)) else "error"
    return ProfileRecord(pipeline=pipeline, size=size, status=status, device=device, note=note.strip()[-200:])


def write_profile_csv(records: list[ProfileRecord], path: str | Path) -> None:
    fields = list(asdict(records[0]).keys()) if records else ["pipeline", "size", "status"]
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for r in records:
            writer.writerow(asdict(r))


def plot_profile(records: list[ProfileRecord], path: str | Path) -> None:
    """Latency-vs-size PNG, one line per pipeline; OOM points marked."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for pipeline in sorted({r.pipeline for r in records}):
        ok = [(r.size, r.total_ms) for r in records if r.pipeline == pipeline and r.status == "ok"]
        if ok:
            xs, ys = zip(*sorted(ok))
            ax.plot(xs, ys, marker="o", label=pipeline)
        oom = [r.size for r in records if r.pipeline == pipeline and r.status == "oom"]
        for s in oom:
            ax.axvline(s, linestyle=":", alpha=0.4)
            ax.annotate("OOM", (s, ax.get_ylim()[1]), fontsize=8, ha="center")
    ax.set_xlabel("input size (px)")
    ax.set_ylabel("median latency (ms)")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ------------------------------------------------------------------ #
# subprocess worker


def _apply_mem_limit(mb: int) -> None:
    import resource

    limit = mb * 1024 * 1024
    resource.setrlimit(resource.RLIMIT_AS, (limit, limit))


def _peak_rss_mb() -> float:
    import resource

    ru = resource.getrusage(resource.RUSAGE_SELF)
    return ru.ru_maxrss / 1024.0  # linux reports KB


def _worker() -> int:
    cfg = json.loads(sys.stdin.read())
    pipeline, size = cfg["pipeline"], cfg["size"]
    record = {
        "pipeline": pipeline,
        "size": size,
        "status": "ok",
        "reps": cfg["reps"],
        "device": cfg["device"],
        "guidance_ms": 0.0,
        "tile_count": 1,
        "note": "",
    }
    try:
        if cfg.get("mem_limit_mb"):
            _apply_mem_limit(cfg["mem_limit_mb"])
        import torch

        torch.set_num_threads(cfg.get("threads", 1))
        from .distill import ModelSpec
        from .inference import GuidanceConfig, infer_padcfg
        from .models import ConditionalUNet, ToyVAE, freeze

        spec = ModelSpec(
            base_width=cfg["base_width"],
            depth=cfg["depth"],
            mid_blocks=cfg["mid_blocks"],
            latent_channels=cfg["latent_channels"],
            vae_base_width=cfg["vae_base_width"],
        )
        device = torch.device(cfg["device"])
        use_cuda = device.type == "cuda"
        torch.manual_seed(cfg["seed"])
        x = torch.rand(1, 3, size, size, device=device)

        if pipeline == "latent":
            vae = freeze(ToyVAE(spec.vae_config())).eval().to(device)
            unet = freeze(ConditionalUNet(spec.generator_config("teacher_latent"))).eval().to(device)

            def run():
                t0 = time.perf_counter()
                with torch.no_grad():
                    z = vae.encode(x)
                t1 = time.perf_counter()
                with torch.no_grad():
                    z = unet(z, 499, "pos")
                t2 = time.perf_counter()
                with torch.no_grad():
                    _ = vae.decode(z).clamp(0, 1)
                t3 = time.perf_counter()
                return (t1 - t0, t2 - t1, t3 - t2)

        else:
            model = freeze(ConditionalUNet(spec.generator_config("stage2"))).eval().to(device)
            guided = cfg.get("mode", "none") == "padcfg"
            g = GuidanceConfig(mode="padcfg") if guided else None

            def run():
                if guided:
                    t0 = time.perf_counter()
                    _ = infer_padcfg(model, x, g)
                    t3 = time.perf_counter()
                    return (0.0, t3 - t0, 0.0)
                t0 = time.perf_counter()
                with torch.no_grad():
                    _ = model(x, 499, "pos").clamp(0, 1)
                t3 = time.perf_counter()
                return (0.0, t3 - t0, 0.0)

        if use_cuda:
            torch.cuda.reset_peak_memory_stats(device)
        for _ in range(cfg["warmup"]):
            run()
        samples = []
        for _ in range(cfg["reps"]):
            samples.append(run())
        enc = statistics.median(s[0] for s in samples) * 1e3
        core = statistics.median(s[1] for s in samples) * 1e3
        dec = statistics.median(s[2] for s in samples) * 1e3
        tot = statistics.median(sum(s) for s in samples) * 1e3
        record.update(encode_ms=enc, core_ms=core, decode_ms=dec, total_ms=tot)
        if use_cuda:
            record["peak_memory_mb"] = torch.cuda.max_memory_allocated(device) / 2**20
        else:
            record["peak_memory_mb"] = _peak_rss_mb()
    except Exception as exc:  # classified, never re-raised: the record carries the status
        msg = str(exc)
        is_oom = (
            isinstance(exc, MemoryError)
            or (isinstance(exc, OSError) and getattr(exc, "errno", None) == 12)
            or "alloc" in msg.lower()
            or "memory" in msg.lower()
        )
        record.update(
            status="oom" if is_oom else "error",
            encode_ms=math.nan,
            core_ms=math.nan,
            decode_ms=math.nan,
            total_ms=math.nan,
            peak_memory_mb=math.nan,
            note=msg[:200],
        )
    print(json.dumps(record))
    return 0


if __name__ == "__main__":
    if "--worker" in sys.argv:
        sys.exit(_worker())
    print("usage: python -m shufflesr.profiling --worker  (reads a JSON spec on stdin)", file=sys.stderr)
    sys.exit(2)
