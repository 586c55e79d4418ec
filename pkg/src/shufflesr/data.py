"""Synthetic training data: procedural high-quality images, a parametric
degradation cascade, and a deterministic batch stream.

Determinism contract: every sample drawn anywhere in training is a pure
function of (epoch_seed, global sample position). Batches are therefore
random-access (``BatchStream.batch(step)``), which is what makes checkpoint
resume bit-reproducible without replaying the stream.

Degraded inputs are returned pre-upsampled to the clean image's size (single
bicubic step at the end of the cascade), so every model in the pipeline sees
size-matched pairs.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter

logger = logging.getLogger(__name__)

_RESAMPLE = {
    "bicubic": Image.BICUBIC,
    "bilinear": Image.BILINEAR,
    "nearest": Image.NEAREST,
}


class DataError(RuntimeError):
    """Raised for unusable datasets or corrupt sample sources."""


def mix_seed(*parts: int) -> int:
    """Stable 63-bit hash of integer parts (Python's hash() is salted)."""
    key = ":".join(str(int(p)) for p in parts).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little") >> 1


# ------------------------------------------------------------------ #
# synthetic corpus


@dataclass
class Corpus:
    images: list[np.ndarray]  # each [H, W, 3] uint8
    size: int
    seed: int
    source: str = "synthetic"

    def __len__(self) -> int:
        return len(self.images)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for img in self.images:
            h.update(img.tobytes())
        return h.hexdigest()


def _gradient(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    theta = rng.uniform(0, 2 * np.pi)
    ramp = xx * np.cos(theta) + yy * np.sin(theta)
    ramp = (ramp - ramp.min()) / (np.ptp(ramp) + 1e-9)
    c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    return ramp[..., None] * c1 + (1 - ramp[..., None]) * c0


def _add_gabor(img: np.ndarray, rng: np.random.Generator) -> None:
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0, size, 2)
    freq = rng.uniform(0.05, 0.45)
    theta = rng.uniform(0, np.pi)
    width = rng.uniform(size * 0.08, size * 0.3)
    carrier = np.cos(2 * np.pi * freq * ((xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)))
    envelope = np.exp(-(((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * width**2)))
    amp = rng.uniform(0.1, 0.4)
    color = rng.uniform(-1, 1, 3)
    img += amp * (carrier * envelope)[..., None] * color


def _add_polygon(img: np.ndarray, rng: np.random.Generator) -> None:
    from PIL import ImageDraw

    size = img.shape[0]
    n_pts = int(rng.integers(3, 7))
    cy, cx = rng.uniform(size * 0.2, size * 0.8, 2)
    radius = rng.uniform(size * 0.08, size * 0.35)
    angles = np.sort(rng.uniform(0, 2 * np.pi, n_pts))
    pts = [
        (cx + radius * rng.uniform(0.6, 1.0) * np.cos(a), cy + radius * rng.uniform(0.6, 1.0) * np.sin(a))
        for a in angles
    ]
    overlay = Image.fromarray((np.clip(img, 0, 1) * 255).astype(np.uint8))
    draw = ImageDraw.Draw(overlay)
    color = tuple(int(v) for v in rng.integers(0, 256, 3))
    draw.polygon(pts, fill=color)
    blend = rng.uniform(0.5, 1.0)
    poly = np.asarray(overlay).astype(np.float64) / 255.0
    img[:] = blend * poly + (1 - blend) * img


def _add_glyphs(img: np.ndarray, rng: np.random.Generator) -> None:
    """Dot-matrix glyph blocks: 5x7 random binary grids scaled up, a crude
    stand-in for rendered text."""
    size = img.shape[0]
    n_chars = int(rng.integers(2, 6))
    cell = int(rng.integers(2, 5))
    gh, gw = 7 * cell, 5 * cell
    y0 = int(rng.integers(0, max(1, size - gh)))
    x0 = int(rng.integers(0, max(1, size - gw * n_chars - n_chars * cell)))
    color = rng.uniform(0, 1, 3)
    for k in range(n_chars):
        glyph = rng.random((7, 5)) < 0.45
        block = np.kron(glyph, np.ones((cell, cell), dtype=bool))
        xs = x0 + k * (gw + cell)
        if xs + gw > size or y0 + gh > size:
            break
        region = img[y0 : y0 + gh, xs : xs + gw]
        region[block] = color


def make_synthetic_corpus(n: int, size: int = 128, seed: int = 0) -> Corpus:
    """Procedural corpus of n images, size x size, deterministic in seed."""
    if size % 8 != 0:
        raise DataError(f"corpus image size must be a multiple of 8, got {size}")
    images = []
    for i in range(n):
        rng = np.random.default_rng(mix_seed(seed, i))
        img = _gradient(rng, size)
        for _ in range(int(rng.integers(1, 4))):
            _add_gabor(img, rng)
        for _ in range(int(rng.integers(1, 3))):
            _add_polygon(img, rng)
        if rng.random() < 0.7:
            _add_glyphs(img, rng)
        images.append((np.clip(img, 0, 1) * 255).round().astype(np.uint8))
    return Corpus(images=images, size=size, seed=seed)


def load_user_corpus(directory: str | Path, size: int = 128) -> Corpus:
    """Ingest PNG/JPEG files: center-crop to square, resize to size.
    Unreadable files are skipped with a warning."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"corpus directory not found: {directory}")
    images = []
    skipped = 0
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() not in (".png", ".jpg", ".jpeg"):
            continue
        try:
            with Image.open(path) as im:
                im = im.convert("RGB")
                w, h = im.size
                side = min(w, h)
                left, top = (w - side) // 2, (h - side) // 2
                im = im.crop((left, top, left + side, top + side)).resize(
                    (size, size), Image.BICUBIC
                )
                images.append(np.asarray(im))
        except Exception as exc:  # unreadable or truncated file
            skipped += 1
            logger.warning("skipping unreadable image %s: %s", path.name, exc)
    if not images:
        raise DataError(f"no readable images in {directory} (skipped {skipped})")
    if skipped:
        logger.warning("corpus loaded with %d unreadable files skipped", skipped)
    return Corpus(images=images, size=size, seed=0, source=str(directory))


def write_manifest(corpus: Corpus, cfg: "DegradationConfig", path: str | Path) -> None:
    manifest = {
        "source": corpus.source,
        "seed": corpus.seed,
        "size": corpus.size,
        "count": len(corpus),
        "content_hash": corpus.content_hash(),
        "degradation": asdict(cfg),
        "images": [{"id": i, "seed": mix_seed(corpus.seed, i)} for i in range(len(corpus))],
    }
    Path(path).write_text(json.dumps(manifest, indent=2))


# ------------------------------------------------------------------ #
# degradation cascade


@dataclass
class DegradationConfig:
    blur_sigma: tuple[float, float] = (0.4, 2.4)
    scales: tuple[int, ...] = (2, 3, 4)
    kernels: tuple[str, ...] = ("bicubic", "bilinear", "nearest")
    noise_sigma: tuple[float, float] = (0.0, 0.08)
    jpeg_quality: tuple[int, int] = (35, 95)
    second_pass_prob: float = 0.3
    second_pass_strength: tuple[float, float] = (0.2, 0.5)

    def __post_init__(self) -> None:
        for s in self.scales:
            if s < 1:
                raise ValueError(f"scales must be >= 1, got {self.scales}")
        for k in self.kernels:
            if k not in _RESAMPLE:
                raise ValueError(f"unknown kernel {k!r}; choices: {sorted(_RESAMPLE)}")
        if not (0.0 <= self.second_pass_prob <= 1.0):
            raise ValueError("second_pass_prob must be in [0, 1]")


@dataclass
class SamplePair:
    hq: torch.Tensor  # [3, H, W] float32 in [0, 1]
    lq: torch.Tensor  # [3, H, W] float32 in [0, 1], pre-upsampled
    meta: dict = field(default_factory=dict)


def _jpeg_roundtrip(arr: np.ndarray, quality: int) -> np.ndarray:
    """arr float [0,1] HWC -> JPEG encode/decode -> float [0,1]."""
    im = Image.fromarray((np.clip(arr, 0, 1) * 255).round().astype(np.uint8))
    buf = io.BytesIO()
    im.save(buf, format="JPEG", quality=int(quality), subsampling=0)
    buf.seek(0)
    return np.asarray(Image.open(buf)).astype(np.float64) / 255.0


def _blur(arr: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return arr
    return gaussian_filter(arr, sigma=(sigma, sigma, 0.0), mode="reflect")


def _resize(arr: np.ndarray, size_wh: tuple[int, int], kernel: str) -> np.ndarray:
    im = Image.fromarray((np.clip(arr, 0, 1) * 255).round().astype(np.uint8))
    return np.asarray(im.resize(size_wh, _RESAMPLE[kernel])).astype(np.float64) / 255.0


def degrade(hq: np.ndarray, cfg: DegradationConfig, seed: int) -> SamplePair:
    """Apply the cascade to one [H,W,3] uint8 image.

    blur -> integer downscale -> additive Gaussian noise -> JPEG ->
    (optional lighter second blur+noise+JPEG pass) -> bicubic upsample back.
    All parameters are drawn up front from the seed, so the draw sequence is
    identical whether or not the second pass fires.
    """
    rng = np.random.default_rng(seed)
    h, w = hq.shape[:2]

    sigma = rng.uniform(*cfg.blur_sigma)
    scale = int(rng.choice(np.asarray(cfg.scales)))
    kernel = str(rng.choice(np.asarray(cfg.kernels, dtype=object)))
    noise = rng.uniform(*cfg.noise_sigma)
    quality = int(rng.integers(cfg.jpeg_quality[0], cfg.jpeg_quality[1] + 1))
    second = bool(rng.random() < cfg.second_pass_prob)
    strength = rng.uniform(*cfg.second_pass_strength)
    kernel2 = str(rng.choice(np.asarray(cfg.kernels, dtype=object)))

    arr = hq.astype(np.float64) / 255.0
    arr = _blur(arr, sigma)
    arr = _resize(arr, (max(1, w // scale), max(1, h // scale)), kernel)
    if noise > 0:
        arr = np.clip(arr + rng.normal(0.0, noise, arr.shape), 0, 1)
    arr = _jpeg_roundtrip(arr, quality)
    if second:
        arr = _blur(arr, sigma * strength)
        if noise > 0:
            arr = np.clip(arr + rng.normal(0.0, noise * strength, arr.shape), 0, 1)
        arr = _jpeg_roundtrip(arr, min(95, quality + 20))
        _ = kernel2  # reserved draw keeps the sequence fixed
    arr = _resize(arr, (w, h), "bicubic")

    meta = {
        "seed": int(seed),
        "blur_sigma": float(sigma),
        "scale": scale,
        "kernel": kernel,
        "noise_sigma": float(noise),
        "jpeg_quality": quality,
        "second_pass": second,
        "second_strength": float(strength),
    }
    to_t = lambda a: torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1))).float()
    return SamplePair(hq=to_t(hq.astype(np.float64) / 255.0), lq=to_t(arr), meta=meta)


# ------------------------------------------------------------------ #
# deterministic batch stream


class BatchStream:
    """Random-access batch source over a corpus.

    Epoch e visits the corpus in a permutation seeded by (epoch_seed, e);
    the sample at global position g gets crop offsets and degradation
    parameters from seed mix(epoch_seed, g). ``batch(step)`` is a pure
    function, so training can resume at any step without replay.
    """

    def __init__(
        self,
        corpus: Corpus,
        cfg: DegradationConfig,
        batch_size: int,
        epoch_seed: int,
        crop_size: int | None = None,
    ) -> None:
        if len(corpus) == 0:
            raise DataError("empty corpus")
        if crop_size is not None:
            if crop_size % 8 != 0:
                raise DataError(f"crop_size must be a multiple of 8, got {crop_size}")
            if crop_size > corpus.size:
                raise DataError(f"crop_size {crop_size} exceeds image size {corpus.size}")
        self.corpus = corpus
        self.cfg = cfg
        self.batch_size = batch_size
        self.epoch_seed = epoch_seed
        self.crop_size = crop_size or corpus.size

    def _sample(self, position: int) -> SamplePair:
        n = len(self.corpus)
        epoch, slot = divmod(position, n)
        order = np.random.default_rng(mix_seed(self.epoch_seed, epoch)).permutation(n)
        idx = int(order[slot])
        seed = mix_seed(self.epoch_seed, position)
        img = self.corpus.images[idx]
        crop = self.crop_size
        if crop < img.shape[0] or crop < img.shape[1]:
            rng = np.random.default_rng(mix_seed(seed, 0xC0FFEE))
            oy = 8 * int(rng.integers(0, (img.shape[0] - crop) // 8 + 1))
            ox = 8 * int(rng.integers(0, (img.shape[1] - crop) // 8 + 1))
            img = img[oy : oy + crop, ox : ox + crop]
        pair = degrade(img, self.cfg, seed)
        pair.meta["image_id"] = idx
        pair.meta["position"] = position
        return pair

    def batch(self, step: int) -> dict:
        pairs = [self._sample(step * self.batch_size + j) for j in range(self.batch_size)]
        return {
            "hq": torch.stack([p.hq for p in pairs]),
            "lq": torch.stack([p.lq for p in pairs]),
            "meta": [p.meta for p in pairs],
        }

    def __iter__(self):
        step = 0
        while True:
            yield self.batch(step)
            step += 1


def held_out_pairs(
    corpus: Corpus, cfg: DegradationConfig, n: int, seed: int, crop_size: int | None = None
) -> list[SamplePair]:
    """Fixed evaluation pairs drawn from a disjoint seed stream."""
    stream = BatchStream(corpus, cfg, batch_size=1, epoch_seed=mix_seed(seed, 0xE0A1), crop_size=crop_size)
    return [stream._sample(i) for i in range(n)]
