"""Spatial tensor plumbing: sub-pixel (un)shuffle, padding, cropping, tiling.

All functions operate on float tensors shaped [N, C, H, W]. The sub-pixel
channel layout is the standard one: unshuffling with factor ``r`` maps input
pixel ``(n, c, y*r + dy, x*r + dx)`` to output channel ``c*r*r + dy*r + dx``
at cell ``(y, x)``. Shuffle is its exact inverse, so the round trip is
bit-lossless.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


class ShapeError(ValueError):
    """Raised when a tensor's shape violates an operation's precondition."""


def _check_nchw(x: torch.Tensor, name: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be 4D [N,C,H,W], got shape {tuple(x.shape)}")


def pixel_unshuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """Space-to-depth: [N, C, H, W] -> [N, C*r*r, H/r, W/r].

    Requires H and W divisible by r; the error names the offending axis.
    """
    _check_nchw(x)
    if r < 1:
        raise ValueError(f"shuffle factor must be >= 1, got {r}")
    n, c, h, w = x.shape
    if h % r != 0:
        raise ShapeError(f"height {h} not divisible by shuffle factor {r}")
    if w % r != 0:
        raise ShapeError(f"width {w} not divisible by shuffle factor {r}")
    return F.pixel_unshuffle(x, r)


def pixel_shuffle(z: torch.Tensor, r: int) -> torch.Tensor:
    """Depth-to-space: [N, C*r*r, H, W] -> [N, C, H*r, W*r]. Inverse of
    :func:`pixel_unshuffle` for the same r."""
    _check_nchw(z)
    if r < 1:
        raise ValueError(f"shuffle factor must be >= 1, got {r}")
    n, c, h, w = z.shape
    if c % (r * r) != 0:
        raise ShapeError(f"channel count {c} not divisible by r*r = {r * r}")
    return F.pixel_shuffle(z, r)


@dataclass(frozen=True)
class PadSpec:
    """Padding amounts per side, in pixels. ``mode`` is 'reflect' or
    'constant'; reflect excludes the border pixel from the mirror."""

    left: int
    right: int
    top: int
    bottom: int
    mode: str = "reflect"
    value: float = 0.0

    def __post_init__(self) -> None:
        for side in (self.left, self.right, self.top, self.bottom):
            if side < 0:
                raise ValueError(f"pad amounts must be >= 0, got {self.as_tuple()}")
        if self.mode not in ("reflect", "constant"):
            raise ValueError(f"pad mode must be 'reflect' or 'constant', got {self.mode!r}")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.left, self.right, self.top, self.bottom)


def pad(x: torch.Tensor, spec: PadSpec) -> torch.Tensor:
    """Pad [N,C,H,W] -> [N,C,H+top+bottom,W+left+right]."""
    _check_nchw(x)
    n, c, h, w = x.shape
    if spec.mode == "reflect":
        # reflect without border repeat needs pad < dim
        if spec.left >= w or spec.right >= w:
            raise ShapeError(f"reflect pad ({spec.left},{spec.right}) must be < width {w}")
        if spec.top >= h or spec.bottom >= h:
            raise ShapeError(f"reflect pad ({spec.top},{spec.bottom}) must be < height {h}")
        return F.pad(x, spec.as_tuple(), mode="reflect")
    return F.pad(x, spec.as_tuple(), mode="constant", value=spec.value)


def crop(x: torch.Tensor, top: int, left: int, height: int, width: int) -> torch.Tensor:
    """Slice a [height, width] window at (top, left). Bounds-checked."""
    _check_nchw(x)
    n, c, h, w = x.shape
    if top < 0 or left < 0 or height < 1 or width < 1:
        raise ShapeError(f"bad crop window top={top} left={left} h={height} w={width}")
    if top + height > h or left + width > w:
        raise ShapeError(
            f"crop window ({top}+{height}, {left}+{width}) exceeds input ({h}, {w})"
        )
    return x[:, :, top : top + height, left : left + width]


def crop_pad_inverse(x: torch.Tensor, spec: PadSpec, height: int, width: int) -> torch.Tensor:
    """Crop that exactly undoes ``pad(x, spec)`` back to (height, width)."""
    return crop(x, spec.top, spec.left, height, width)


@dataclass(frozen=True)
class TileConfig:
    """Overlapping tile grid. Tile dims and overlap must be multiples of the
    shuffle factor; overlap must stay below half the tile in each axis."""

    tile_h: int
    tile_w: int
    overlap: int
    factor: int = 8

    def __post_init__(self) -> None:
        if self.tile_h <= 0 or self.tile_w <= 0:
            raise ValueError(f"tile dims must be positive, got {self.tile_h}x{self.tile_w}")
        if self.overlap < 0:
            raise ValueError(f"overlap must be >= 0, got {self.overlap}")
        for name, v in (("tile_h", self.tile_h), ("tile_w", self.tile_w), ("overlap", self.overlap)):
            if v % self.factor != 0:
                raise ValueError(f"{name}={v} must be a multiple of factor {self.factor}")
        if self.overlap >= min(self.tile_h, self.tile_w) // 2:
            raise ValueError(
                f"overlap {self.overlap} must be < min(tile)/2 = {min(self.tile_h, self.tile_w) // 2}"
            )


def _tile_starts(extent: int, tile: int, overlap: int) -> list[int]:
    """Start offsets covering [0, extent) with the given overlap; the last
    tile is pulled back flush with the border."""
    if tile >= extent:
        return [0]
    stride = tile - overlap
    starts = list(range(0, extent - tile, stride))
    starts.append(extent - tile)
    return starts


def tile_split(x: torch.Tensor, cfg: TileConfig) -> list[tuple[torch.Tensor, int, int]]:
    """Split into overlapping tiles. Returns (tile, top, left) triples in
    row-major order. Tiles clip to the image if it is smaller than the tile."""
    _check_nchw(x)
    n, c, h, w = x.shape
    th, tw = min(cfg.tile_h, h), min(cfg.tile_w, w)
    tiles = []
    for top in _tile_starts(h, th, cfg.overlap):
        for left in _tile_starts(w, tw, cfg.overlap):
            tiles.append((x[:, :, top : top + th, left : left + tw], top, left))
    return tiles


def _feather_profile(start: int, tile: int, overlap: int, total: int) -> torch.Tensor:
    """1D blend weight for a tile spanning [start, start+tile) of [0, total).

    Interior weight 1; linear ramp over the overlap band on sides that have a
    neighbouring tile (image borders keep weight 1 so coverage never drops).
    """
    w = torch.ones(tile, dtype=torch.float64)
    if overlap > 0:
        ramp = (torch.arange(overlap, dtype=torch.float64) + 1.0) / (overlap + 1.0)
        if start > 0:
            w[:overlap] = torch.minimum(w[:overlap], ramp)
        if start + tile < total:
            w[-overlap:] = torch.minimum(w[-overlap:], ramp.flip(0))
    return w


def tile_merge(
    tiles: list[tuple[torch.Tensor, int, int]],
    height: int,
    width: int,
    cfg: TileConfig,
) -> torch.Tensor:
    """Feathered overlap-average merge back to [N, C, height, width].

    Blending runs in float64 and casts back, so merging unmodified tiles of a
    single image reproduces that image exactly.
    """
    if not tiles:
        raise ValueError("tile_merge needs at least one tile")
    first = tiles[0][0]
    n, c = first.shape[0], first.shape[1]
    acc = torch.zeros((n, c, height, width), dtype=torch.float64)
    weight = torch.zeros((1, 1, height, width), dtype=torch.float64)
    for t, top, left in tiles:
        th, tw = t.shape[2], t.shape[3]
        wy = _feather_profile(top, th, cfg.overlap, height)
        wx = _feather_profile(left, tw, cfg.overlap, width)
        w2d = (wy[:, None] * wx[None, :]).reshape(1, 1, th, tw)
        acc[:, :, top : top + th, left : left + tw] += t.double() * w2d
        weight[:, :, top : top + th, left : left + tw] += w2d
    if (weight == 0).any():
        raise ValueError("tile set does not cover the output canvas")
    return (acc / weight).to(first.dtype)
