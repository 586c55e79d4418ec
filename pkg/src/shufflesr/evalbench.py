"""Reference metrics and evaluation reports.

PSNR and SSIM here are the plain-numpy reference implementations (scipy
convolution, float64). The differentiable torch SSIM used inside the training
losses is a separate route; tests hold the two against each other.

PSNR of identical images is +inf. Aggregates report the mean over finite
values plus a count of infinite ones; if every value is infinite the
aggregate is inf. JSON serialization writes infinities as the string "inf".
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from scipy.signal import convolve2d

SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _to_chw(x) -> np.ndarray:
    if torch.is_tensor(x):
        x = x.detach().cpu().numpy()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ValueError(f"expected [C,H,W] or [H,W], got shape {x.shape}")
    return x


def psnr(a, b, data_range: float = 1.0) -> float:
    """10 log10(data_range^2 / MSE); +inf when the images are identical."""
    a, b = _to_chw(a), _to_chw(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, data_range: float = 1.0, window_size: int = 11, sigma: float = 1.5) -> float:
    """Gaussian-weighted structural similarity, valid-region convolution,
    uncentered covariance, averaged over the map and channels."""
    a, b = _to_chw(a), _to_chw(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.shape[-1] < window_size or a.shape[-2] < window_size:
        raise ValueError(f"images {a.shape[-2:]} smaller than the {window_size}-tap window")
    win = _gaussian_window(window_size, sigma)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    scores = []
    for ch in range(a.shape[0]):
        x, y = a[ch], b[ch]
        mu_x = convolve2d(x, win, mode="valid")
        mu_y = convolve2d(y, win, mode="valid")
        mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
        var_x = convolve2d(x * x, win, mode="valid") - mu_xx
        var_y = convolve2d(y * y, win, mode="valid") - mu_yy
        cov = convolve2d(x * y, win, mode="valid") - mu_xy
        s = ((2 * mu_xy + c1) * (2 * cov + c2)) / ((mu_xx + mu_yy + c1) * (var_x + var_y + c2))
        scores.append(float(s.mean()))
    return float(np.mean(scores))


# ------------------------------------------------------------------ #
# metric registry (external scorers plug in here)

MetricFn = Callable[[object, object], float]
_METRICS: dict[str, MetricFn] = {"psnr": psnr, "ssim": ssim}


def register_metric(name: str, fn: MetricFn) -> None:
    _METRICS[name] = fn


def get_metric(name: str) -> MetricFn:
    try:
        return _METRICS[name]
    except KeyError:
        raise KeyError(f"unknown metric {name!r}; registered: {sorted(_METRICS)}") from None


def make_command_metric(command: list[str]) -> MetricFn:
    """Wrap an external scorer invoked as ``command <output.png> <ref.png>``
    that prints a single float on stdout."""
    import subprocess
    import tempfile

    from PIL import Image

    def _save(x, path):
        arr = _to_chw(x)
        arr = (np.clip(arr, 0, 1) * 255).round().astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(arr).save(path)

    def scorer(a, b) -> float:
        with tempfile.TemporaryDirectory() as td:
            pa, pb = str(Path(td) / "out.png"), str(Path(td) / "ref.png")
            _save(a, pa)
            _save(b, pb)
            out = subprocess.run(
                [*command, pa, pb], capture_output=True, text=True, check=True
            ).stdout.strip()
        return float(out.splitlines()[-1])

    return scorer


# ------------------------------------------------------------------ #
# evaluation reports


@dataclass
class MetricReport:
    per_image: list[dict]
    aggregates: dict[str, float]
    n_inf: dict[str, int] = field(default_factory=dict)


def _aggregate(values: list[float]) -> tuple[float, int]:
    finite = [v for v in values if math.isfinite(v)]
    n_inf = sum(1 for v in values if math.isinf(v))
    if not finite:
        return (math.inf if n_inf else math.nan), n_inf
    return float(np.mean(finite)), n_inf


def evaluate(
    outputs: list,
    references: list,
    names: list[str] | None = None,
    metrics: tuple[str, ...] = ("psnr", "ssim"),
) -> MetricReport:
    if len(outputs) != len(references):
        raise ValueError(f"{len(outputs)} outputs vs {len(references)} references")
    names = names or [f"img{i:04d}" for i in range(len(outputs))]
    fns = {m: get_metric(m) for m in metrics}
    per_image = []
    for name, out, ref in zip(names, outputs, references):
        row = {"name": name}
        for m, fn in fns.items():
            row[m] = float(fn(out, ref))
        per_image.append(row)
    aggregates: dict[str, float] = {}
    n_inf: dict[str, int] = {}
    for m in metrics:
        agg, ninf = _aggregate([row[m] for row in per_image])
        aggregates[m] = agg
        n_inf[m] = ninf
    return MetricReport(per_image=per_image, aggregates=aggregates, n_inf=n_inf)


def _json_safe(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, float) and math.isnan(v):
        return "nan"
    return v


def write_report(report: MetricReport, json_path: str | Path, csv_path: str | Path | None = None) -> None:
    payload = {
        "per_image": [{k: _json_safe(v) for k, v in row.items()} for row in report.per_image],
        "aggregates": {k: _json_safe(v) for k, v in report.aggregates.items()},
        "n_inf": report.n_inf,
    }
    Path(json_path).write_text(json.dumps(payload, indent=2))
    if csv_path is not None:
        fields = list(report.per_image[0].keys()) if report.per_image else ["name"]
        with open(csv_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=fields)
            writer.writeheader()
            for row in report.per_image:
                writer.writerow({k: _json_safe(v) for k, v in row.items()})


def compare_runs(a: MetricReport, b: MetricReport) -> dict[str, dict]:
    """Per-metric aggregate deltas (b - a) with a sign summary."""
    out = {}
    for m in a.aggregates:
        if m not in b.aggregates:
            continue
        va, vb = a.aggregates[m], b.aggregates[m]
        delta = vb - va if (math.isfinite(va) and math.isfinite(vb)) else math.nan
        sign = "equal"
        if vb > va:
            sign = "improved" if m in ("psnr", "ssim") else "increased"
        elif vb < va:
            sign = "regressed" if m in ("psnr", "ssim") else "decreased"
        out[m] = {"a": _json_safe(va), "b": _json_safe(vb), "delta": _json_safe(delta), "sign": sign}
    return out
