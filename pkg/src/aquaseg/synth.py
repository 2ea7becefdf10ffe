"""Two-resolution synthetic scene generator.

Each scene is built at the fine (VHR) grid: a per-band land reflectance
field (base level + coarse terrain variation + pixel noise) with water
bodies painted over it. Water is the union of meandering river ribbons and
filled ellipse lakes; inside water the NIR band drops well below the land
level, which is the discriminative cue. The coarse (HR) twin of a scene is
the block average of the fine image, with its mask re-binarized at 0.5
coverage, and an optional radiometric or texture shift applied to emulate
the two sources coming from different distributions.

Scene roles: the first ``n_hr`` scenes are stored at the coarse grid with
labels, the next ``n_vhr_labelled`` at the fine grid with labels, the rest
at the fine grid without labels. Everything is driven by one seed; scene i
uses the substream ``scene/i`` so counts can change without reshuffling
other scenes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (BAND_STATS_NAME, ManifestEntry, MaskImage, RasterImage,
                   compute_band_stats, save_band_stats, save_manifest, write_raster)
from .errors import ConfigError
from .prng import PrngState
from .tensor import block_mean

SHIFT_KINDS = ("none", "radiometric", "texture")

# land / water reflectance base levels for (R, G, B, NIR)
LAND_BASE = (0.30, 0.35, 0.25, 0.55)
WATER_BASE = (0.08, 0.10, 0.14, 0.045)


@dataclass
class SynthConfig:
    n_hr: int = 60
    n_vhr_labelled: int = 12
    n_vhr_unlabelled: int = 4
    vhr_size: int = 512
    factor: int = 4                       # VHR -> HR derivation factor
    rivers: tuple[int, int] = (1, 2)      # per-scene count range, inclusive
    river_halfwidth_frac: tuple[float, float] = (0.004, 0.015)
    lakes: tuple[int, int] = (0, 2)
    lake_axis_frac: tuple[float, float] = (0.02, 0.09)
    noise_amp: float = 0.03
    coarse_amp: float = 0.04
    shift: str = "none"                   # none | radiometric | texture
    shift_gain: float = 1.15
    shift_offset: float = 0.05
    texture_amp: float = 0.08
    seed: int = 0

    def __post_init__(self):
        if self.shift not in SHIFT_KINDS:
            raise ConfigError(f"unknown shift {self.shift!r}; expected one of {SHIFT_KINDS}")
        if self.factor < 2:
            raise ConfigError(f"factor must be >= 2, got {self.factor}")
        if self.vhr_size % self.factor:
            raise ConfigError(f"vhr_size {self.vhr_size} must be divisible by factor {self.factor}")
        for name in ("n_hr", "n_vhr_labelled", "n_vhr_unlabelled"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclass
class SynthScene:
    index: int
    role: str
    split: str
    image: np.ndarray = field(repr=False)  # (4, h, w) float32
    mask: np.ndarray | None = field(repr=False, default=None)  # (h, w) uint8


def _paint_river(mask: np.ndarray, rng: PrngState, halfwidth: int) -> None:
    """Meandering ribbon crossing the full scene, stamped column by column."""
    size = mask.shape[0]
    vertical = rng.randbelow(2) == 1
    pos = rng.uniform_range(0.2, 0.8, 1)[0] * size
    vel = rng.uniform_range(-0.5, 0.5, 1)[0]
    kicks = rng.uniform_range(-0.3, 0.3, size)
    for t in range(size):
        vel = min(1.5, max(-1.5, vel + kicks[t]))
        pos = min(size - 1.0, max(0.0, pos + vel))
        center = int(pos)
        lo = max(0, center - halfwidth)
        hi = min(size, center + halfwidth + 1)
        if vertical:
            mask[t, lo:hi] = 1
        else:
            mask[lo:hi, t] = 1


def _paint_lake(mask: np.ndarray, rng: PrngState, axis_lo: float, axis_hi: float) -> None:
    size = mask.shape[0]
    cx = rng.uniform_range(0.15, 0.85, 1)[0] * size
    cy = rng.uniform_range(0.15, 0.85, 1)[0] * size
    a = max(2.0, rng.uniform_range(axis_lo, axis_hi, 1)[0] * size)
    b = max(2.0, rng.uniform_range(axis_lo, axis_hi, 1)[0] * size)
    theta = rng.uniform_range(0.0, math.pi, 1)[0]
    reach = int(max(a, b)) + 2
    y0, y1 = max(0, int(cy) - reach), min(size, int(cy) + reach + 1)
    x0, x1 = max(0, int(cx) - reach), min(size, int(cx) + reach + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dx = xx - cx
    dy = yy - cy
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    mask[y0:y1, x0:x1] |= inside.astype(np.uint8)


def _scene_vhr(config: SynthConfig, rng: PrngState) -> tuple[np.ndarray, np.ndarray]:
    """One fine-grid scene: (image (4, s, s) float32, mask (s, s) uint8)."""
    s = config.vhr_size
    land = np.array(LAND_BASE) + rng.uniform_range(-0.04, 0.04, 4)
    water = np.array(WATER_BASE) + rng.uniform_range(-0.015, 0.015, 4)

    # shared low-frequency terrain brightness
    coarse_cells = 8 if s % 8 == 0 else 1
    coarse = rng.normal(coarse_cells * coarse_cells).reshape(coarse_cells, coarse_cells)
    coarse = np.repeat(np.repeat(coarse, s // coarse_cells, axis=0), s // coarse_cells, axis=1)

    mask = np.zeros((s, s), dtype=np.uint8)
    for _ in range(rng.randint(*config.rivers)):
        halfwidth = max(1, int(round(rng.uniform_range(*config.river_halfwidth_frac, 1)[0] * s)))
        _paint_river(mask, rng, halfwidth)
    for _ in range(rng.randint(*config.lakes)):
        _paint_lake(mask, rng, *config.lake_axis_frac)

    image = np.empty((4, s, s), dtype=np.float32)
    in_water = mask.astype(bool)
    for b in range(4):
        land_field = land[b] + config.coarse_amp * coarse + \
            config.noise_amp * rng.normal(s * s).reshape(s, s)
        water_field = water[b] + 0.4 * config.noise_amp * rng.normal(s * s).reshape(s, s)
        image[b] = np.where(in_water, water_field, land_field).astype(np.float32)
    return image, mask


def derive_hr(image: np.ndarray, mask: np.ndarray | None, config: SynthConfig,
              rng: PrngState) -> tuple[np.ndarray, np.ndarray | None]:
    """Coarse twin of a fine scene, with the configured distribution shift."""
    hr_img = block_mean(image, config.factor).astype(np.float32)
    hr_mask = None
    if mask is not None:
        hr_mask = (block_mean(mask.astype(np.float32), config.factor) >= 0.5).astype(np.uint8)
    if config.shift == "radiometric":
        hr_img = (hr_img * config.shift_gain + config.shift_offset).astype(np.float32)
    elif config.shift == "texture":
        extra = config.texture_amp * rng.normal(hr_img.size).reshape(hr_img.shape)
        hr_img = (hr_img + extra).astype(np.float32)
    return hr_img, hr_mask


def assign_splits(n: int, labelled: bool) -> list[str]:
    """train/val/test tags for n scenes of one role. Unlabelled scenes all
    train; labelled roles keep at least one val and one test when n >= 3."""
    if not labelled or n < 2:
        return ["train"] * n
    if n == 2:
        return ["train", "val"]
    n_val = max(1, round(n * 0.15))
    n_test = max(1, round(n * 0.15))
    n_train = n - n_val - n_test
    return ["train"] * n_train + ["val"] * n_val + ["test"] * n_test


def synth_generate(config: SynthConfig) -> list[SynthScene]:
    """Generate every scene in memory. Same config (incl. seed), same bits."""
    root = PrngState(config.seed)
    role_plan = (
        ("hr_labelled", config.n_hr),
        ("vhr_labelled", config.n_vhr_labelled),
        ("vhr_unlabelled", config.n_vhr_unlabelled),
    )
    scenes: list[SynthScene] = []
    index = 0
    for role, count in role_plan:
        splits = assign_splits(count, labelled=role != "vhr_unlabelled")
        for k in range(count):
            rng = root.derive(f"scene/{index}")
            image, mask = _scene_vhr(config, rng)
            if role == "hr_labelled":
                image, mask = derive_hr(image, mask, config, rng)
            elif role == "vhr_unlabelled":
                mask = None
            scenes.append(SynthScene(index=index, role=role, split=splits[k],
                                     image=image, mask=mask))
            index += 1
    return scenes


def write_dataset(scenes: list[SynthScene], out_dir) -> Path:
    """Persist scenes as AQR files plus manifest.csv and band_stats.txt;
    returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries: list[ManifestEntry] = []
    train_images = []
    for scene in scenes:
        stem = f"scene_{scene.index:04d}_{scene.role}"
        image_name = f"{stem}.aqr"
        write_raster(RasterImage.from_array(scene.image), out_dir / image_name)
        mask_name = None
        if scene.mask is not None:
            mask_name = f"{stem}_mask.aqr"
            write_raster(MaskImage(data=scene.mask).to_raster(), out_dir / mask_name)
        if scene.split == "train":
            train_images.append(scene.image)
        entries.append(ManifestEntry(image_path=image_name, mask_path=mask_name,
                                     role=scene.role, split=scene.split))
    manifest_path = out_dir / "manifest.csv"
    save_manifest(manifest_path, entries)
    save_band_stats(out_dir / BAND_STATS_NAME, compute_band_stats(train_images))
    return manifest_path
