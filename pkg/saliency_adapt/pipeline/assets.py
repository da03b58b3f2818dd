"""Foreground/background asset pools.

Two sources feed the compositor: a procedural generator (anti-aliased
shapes over muted textures) and folders of PNG files. Both yield the same
asset types keyed by stable ids.
"""

from __future__ import annotations

import colorsys
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from saliency_adapt.core.errors import InvalidArgumentError
from saliency_adapt.core.imaging import GrayMap, RgbaImage, RgbImage, resize_float
from saliency_adapt.core.persistence import PersistentStore

logger = logging.getLogger(__name__)

FOREGROUND_DIR = "foregrounds"
BACKGROUND_DIR = "backgrounds"
SUPERSAMPLE = 4
# Smallest 8-bit alpha that survives the alpha >= 0.5 label threshold.
MIN_PEAK_ALPHA = 128


@dataclass(frozen=True, slots=True)
class ForegroundAsset:
    asset_id: str
    image: RgbaImage

    def __post_init__(self) -> None:
        peak = int(self.image.pixels[:, :, 3].max())
        if peak < MIN_PEAK_ALPHA:
            raise InvalidArgumentError(
                f"Foreground {self.asset_id!r} peaks at alpha {peak}; at least {MIN_PEAK_ALPHA} is needed for a label"
            )


@dataclass(frozen=True, slots=True)
class BackgroundAsset:
    asset_id: str
    image: RgbImage
    min_dims: tuple[int, int] = field(default=(1, 1), compare=False)

    def __post_init__(self) -> None:
        if not self.meets(self.min_dims):
            raise InvalidArgumentError(
                f"Background {self.asset_id!r} is {self.image.height}x{self.image.width}; "
                f"at least {self.min_dims[0]}x{self.min_dims[1]} is required"
            )

    def meets(self, min_dims: tuple[int, int]) -> bool:
        return self.image.height >= min_dims[0] and self.image.width >= min_dims[1]


def _vivid_color(rng: np.random.Generator) -> np.ndarray:
    rgb = colorsys.hsv_to_rgb(rng.uniform(0.0, 1.0), rng.uniform(0.7, 1.0), rng.uniform(0.75, 1.0))
    return np.array(rgb) * 255.0


def _muted_color(rng: np.random.Generator) -> np.ndarray:
    rgb = colorsys.hsv_to_rgb(rng.uniform(0.0, 1.0), rng.uniform(0.05, 0.35), rng.uniform(0.3, 0.75))
    return np.array(rgb) * 255.0


def _linear_ramp(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Values in [0, 1] increasing along a random direction."""
    angle = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    ramp = yy * np.sin(angle) + xx * np.cos(angle)
    span = ramp.max() - ramp.min()
    return (ramp - ramp.min()) / span if span > 0 else np.zeros_like(ramp)


def _shape_mask(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Soft alpha for a random ellipse, star-shaped polygon or their union."""
    big_w, big_h = width * SUPERSAMPLE, height * SUPERSAMPLE
    canvas = Image.new("L", (big_w, big_h), color=0)
    draw = ImageDraw.Draw(canvas)
    kind = int(rng.integers(0, 3))
    if kind in (0, 2):
        mx, my = rng.uniform(0.0, 0.15, size=2)
        draw.ellipse(
            [mx * big_w, my * big_h, (1.0 - mx) * big_w - 1, (1.0 - my) * big_h - 1],
            fill=255,
        )
    if kind in (1, 2):
        corners = int(rng.integers(3, 9))
        angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, size=corners))
        radii = rng.uniform(0.6, 1.0, size=corners)
        cx, cy = big_w / 2.0, big_h / 2.0
        points = [
            (cx + r * (big_w / 2.0 - 1) * np.cos(a), cy + r * (big_h / 2.0 - 1) * np.sin(a))
            for a, r in zip(angles, radii)
        ]
        draw.polygon(points, fill=255)
    alpha = np.asarray(canvas.resize((width, height), Image.Resampling.BOX), dtype=np.uint8).copy()
    if alpha.max() == 0:
        alpha[height // 2, width // 2] = 255
    elif alpha.max() < MIN_PEAK_ALPHA:
        alpha = np.rint(alpha * (255.0 / alpha.max())).astype(np.uint8)
    return alpha


def _procedural_foreground(asset_id: str, dims: tuple[int, int], rng: np.random.Generator) -> ForegroundAsset:
    height, width = dims
    alpha = _shape_mask(height, width, rng)
    if rng.uniform() < 0.5:
        color = np.broadcast_to(_vivid_color(rng), (height, width, 3))
    else:
        ramp = _linear_ramp(height, width, rng)[:, :, None]
        color = (1.0 - ramp) * _vivid_color(rng) + ramp * _vivid_color(rng)
    rgba = np.concatenate([np.rint(color), alpha[:, :, None].astype(np.float64)], axis=2)
    return ForegroundAsset(asset_id, RgbaImage(rgba.astype(np.uint8)))


def _procedural_background(asset_id: str, dims: tuple[int, int], rng: np.random.Generator) -> BackgroundAsset:
    height, width = dims
    kind = int(rng.integers(0, 3))
    if kind == 0:
        grid = int(rng.integers(3, 7))
        coarse = np.stack([_muted_color(rng) for _ in range(grid * grid)]).reshape(grid, grid, 3)
        texture = resize_float(coarse, height, width)
    elif kind == 1:
        ramp = _linear_ramp(height, width, rng)[:, :, None]
        texture = (1.0 - ramp) * _muted_color(rng) + ramp * _muted_color(rng)
    else:
        ramp = _linear_ramp(height, width, rng)[:, :, None]
        periods = rng.uniform(2.0, 6.0)
        wave = 0.5 + 0.5 * np.sin(2.0 * np.pi * periods * ramp)
        low, high = _muted_color(rng), _muted_color(rng)
        texture = low + 0.35 * wave * (high - low)
    return BackgroundAsset(asset_id, RgbImage(np.clip(np.rint(texture), 0, 255).astype(np.uint8)), dims)


def procedural_assets(
    n_fg: int,
    n_bg: int,
    seed: int,
    *,
    canvas_dims: tuple[int, int] = (64, 64),
    foreground_extent: tuple[float, float] = (0.35, 0.75),
    background_dims: tuple[int, int] | None = None,
) -> tuple[list[ForegroundAsset], list[BackgroundAsset]]:
    """Generate ``n_fg`` shapes and ``n_bg`` textures; each asset draws from its own seeded stream."""
    if n_fg < 1 or n_bg < 1:
        raise InvalidArgumentError(f"procedural_assets needs n_fg, n_bg >= 1, got {n_fg}, {n_bg}")
    background_dims = background_dims or canvas_dims
    fg_root, bg_root = np.random.SeedSequence(seed).spawn(2)
    foregrounds = []
    for index, child in enumerate(fg_root.spawn(n_fg)):
        rng = np.random.default_rng(child)
        dims = tuple(max(4, round(rng.uniform(*foreground_extent) * side)) for side in canvas_dims)
        foregrounds.append(_procedural_foreground(f"fg_{index:05d}", dims, rng))
    backgrounds = [
        _procedural_background(f"bg_{index:05d}", background_dims, np.random.default_rng(child))
        for index, child in enumerate(bg_root.spawn(n_bg))
    ]
    logger.debug("Generated %d procedural foregrounds and %d backgrounds (seed %d)", n_fg, n_bg, seed)
    return foregrounds, backgrounds


def save_assets(foregrounds: list[ForegroundAsset], backgrounds: list[BackgroundAsset], root: Path) -> None:
    store = PersistentStore(root)
    for fg in foregrounds:
        store.write_png(f"{FOREGROUND_DIR}/{fg.asset_id}.png", fg.image)
    for bg in backgrounds:
        store.write_png(f"{BACKGROUND_DIR}/{bg.asset_id}.png", bg.image)


def _as_rgba(image: RgbImage | RgbaImage | GrayMap) -> RgbaImage:
    if isinstance(image, RgbaImage):
        return image
    rgb = as_rgb(image).pixels
    opaque = np.full(rgb.shape[:2] + (1,), 255, dtype=np.uint8)
    return RgbaImage(np.concatenate([rgb, opaque], axis=2))


def as_rgb(image: RgbImage | RgbaImage | GrayMap) -> RgbImage:
    if isinstance(image, RgbImage):
        return image
    if isinstance(image, RgbaImage):
        return RgbImage(image.pixels[:, :, :3].copy())
    levels = np.rint(image.values * 255.0).astype(np.uint8)
    return RgbImage(np.repeat(levels[:, :, None], 3, axis=2))


def load_assets(
    root: Path,
    min_background_dims: tuple[int, int] = (64, 64),
) -> tuple[list[ForegroundAsset], list[BackgroundAsset]]:
    """Ingest ``root/foregrounds/*.png`` and ``root/backgrounds/*.png`` sorted by file name.

    Backgrounds smaller than ``min_background_dims`` are skipped; foregrounds
    whose alpha never reaches ``MIN_PEAK_ALPHA`` are skipped.
    """
    store = PersistentStore(root)
    foregrounds: list[ForegroundAsset] = []
    for path in sorted(store.path(FOREGROUND_DIR).glob("*.png")):
        image = _as_rgba(store.read_png(path.relative_to(store.root)))
        if int(image.pixels[:, :, 3].max()) < MIN_PEAK_ALPHA:
            logger.warning("Skipping foreground %s: no pixel reaches alpha %d", path.name, MIN_PEAK_ALPHA)
            continue
        foregrounds.append(ForegroundAsset(path.stem, image))
    backgrounds: list[BackgroundAsset] = []
    for path in sorted(store.path(BACKGROUND_DIR).glob("*.png")):
        image = as_rgb(store.read_png(path.relative_to(store.root)))
        if image.height < min_background_dims[0] or image.width < min_background_dims[1]:
            logger.warning(
                "Skipping background %s: %dx%d is below the %dx%d minimum",
                path.name,
                image.height,
                image.width,
                *min_background_dims,
            )
            continue
        backgrounds.append(BackgroundAsset(path.stem, image, min_background_dims))
    if not foregrounds or not backgrounds:
        raise InvalidArgumentError(
            f"{root} must hold at least one usable PNG in {FOREGROUND_DIR}/ and {BACKGROUND_DIR}/"
        )
    logger.info("Loaded %d foregrounds and %d backgrounds from %s", len(foregrounds), len(backgrounds), root)
    return foregrounds, backgrounds
