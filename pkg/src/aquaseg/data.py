"""Raster I/O, dataset manifests, patch extraction, normalization, batching.

File formats owned here:

* AQR raster: magic ``AQR1``, little-endian u32 width, height, bands, dtype
  code (0 = u8, 1 = f32), then band-sequential row-major payload.
* manifest CSV with header ``image_path,mask_path,role,split``; paths are
  relative to the manifest's directory; unlabelled entries leave mask_path
  empty.
* ``band_stats.txt`` sidecar: one ``band mean std`` line per band, computed
  over the train split only.
* binary PGM (P5) export for eyeballing masks and predictions.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ConfigError, ContractError, ShapeError, TruncatedFileError
from .prng import PrngState
from .tensor import Tensor4

AQR_MAGIC = b"AQR1"
DTYPE_CODES = {"u8": 0, "f32": 1}
DTYPE_NAMES = {0: "u8", 1: "f32"}
NP_DTYPES = {"u8": np.dtype("<u1"), "f32": np.dtype("<f4")}

ROLES = ("hr_labelled", "vhr_labelled", "vhr_unlabelled")
SPLITS = ("train", "val", "test")

VARIANCE_FLOOR = 1e-6
BAND_STATS_NAME = "band_stats.txt"


@dataclass
class RasterImage:
    """Multi-band raster; ``data`` is (bands, height, width), band-sequential."""
    width: int
    height: int
    bands: int
    dtype: str  # "u8" | "f32"
    data: np.ndarray

    def __post_init__(self):
        if self.dtype not in DTYPE_CODES:
            raise ConfigError(f"unsupported raster dtype {self.dtype!r}")
        expected = (self.bands, self.height, self.width)
        if tuple(self.data.shape) != expected:
            raise ShapeError(f"raster data shape {self.data.shape} does not match "
                             f"declared dims {expected}")
        self.data = np.ascontiguousarray(self.data, dtype=NP_DTYPES[self.dtype])

    @classmethod
    def from_array(cls, data: np.ndarray) -> "RasterImage":
        data = np.asarray(data)
        dtype = "u8" if data.dtype == np.uint8 else "f32"
        arr = data if dtype == "u8" else data.astype(np.float32)
        return cls(width=arr.shape[2], height=arr.shape[1], bands=arr.shape[0],
                   dtype=dtype, data=arr)


@dataclass
class MaskImage:
    """Single-band binary mask, values strictly in {0, 1}."""
    data: np.ndarray  # (height, width) uint8

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if self.data.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {self.data.shape}")
        if not np.all((self.data == 0) | (self.data == 1)):
            raise ContractError("mask contains values other than 0 and 1")

    def to_raster(self) -> RasterImage:
        return RasterImage(width=self.data.shape[1], height=self.data.shape[0],
                           bands=1, dtype="u8", data=self.data[None])

    @classmethod
    def from_raster(cls, raster: RasterImage) -> "MaskImage":
        if raster.bands != 1 or raster.dtype != "u8":
            raise ContractError(f"mask raster must be 1-band u8, got {raster.bands} "
                                f"bands of {raster.dtype}")
        return cls(data=raster.data[0])


def write_raster(img: RasterImage, path) -> None:
    header = AQR_MAGIC + struct.pack("<4I", img.width, img.height, img.bands,
                                     DTYPE_CODES[img.dtype])
    Path(path).write_bytes(header + img.data.tobytes())


def read_raster(path) -> RasterImage:
    raw = Path(path).read_bytes()
    if len(raw) < 20:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes is too short for an AQR header")
    if raw[:4] != AQR_MAGIC:
        raise BadMagicError(f"{path}: bad magic, not an AQR raster")
    width, height, bands, code = struct.unpack("<4I", raw[4:20])
    if code not in DTYPE_NAMES:
        raise ConfigError(f"{path}: unsupported dtype code {code}")
    dtype = DTYPE_NAMES[code]
    itemsize = NP_DTYPES[dtype].itemsize
    expected = 20 + width * height * bands * itemsize
    if len(raw) != expected:
        raise TruncatedFileError(f"{path}: payload is {len(raw) - 20} bytes, dims "
                                 f"{width}x{height}x{bands} ({dtype}) require {expected - 20}")
    data = np.frombuffer(raw[20:], dtype=NP_DTYPES[dtype]).reshape(bands, height, width)
    return RasterImage(width=width, height=height, bands=bands, dtype=dtype, data=data.copy())


def write_pgm(path, gray: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255) from a 2-D uint8 array."""
    gray = np.ascontiguousarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ShapeError(f"PGM export needs a 2-D array, got shape {gray.shape}")
    header = f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + gray.tobytes())


# ---------------------------------------------------------------------------
# patch extraction

@dataclass
class Patch:
    image: RasterImage
    mask: MaskImage | None
    ox: int
    oy: int


def patch_grid_count(width: int, height: int, size: int, stride: int) -> int:
    return ((width - size) // stride + 1) * ((height - size) // stride + 1)


def patchify(image: RasterImage, mask: MaskImage | None, size: int,
             stride: int | None = None) -> list[Patch]:
    """Tile ``image`` (and mask, identically) into size×size windows placed at
    multiples of ``stride``; windows never cross the image border, trailing
    pixels are dropped."""
    if stride is None:
        stride = size
    if not isinstance(size, int) or size < 1:
        raise ConfigError(f"patch size must be a positive integer, got {size!r}")
    if not isinstance(stride, int) or stride < 1:
        raise ConfigError(f"stride must be a positive integer, got {stride!r}")
    if size > min(image.width, image.height):
        raise ShapeError(f"patch size {size} exceeds image dims "
                         f"{image.width}x{image.height}")
    if mask is not None and mask.data.shape != (image.height, image.width):
        raise ShapeError(f"mask shape {mask.data.shape} does not match image dims "
                         f"({image.height}, {image.width})")
    patches = []
    for oy in range(0, image.height - size + 1, stride):
        for ox in range(0, image.width - size + 1, stride):
            sub = image.data[:, oy:oy + size, ox:ox + size]
            pimg = RasterImage(width=size, height=size, bands=image.bands,
                               dtype=image.dtype, data=sub.copy())
            pmask = None
            if mask is not None:
                pmask = MaskImage(data=mask.data[oy:oy + size, ox:ox + size].copy())
            patches.append(Patch(image=pimg, mask=pmask, ox=ox, oy=oy))
    return patches


# ---------------------------------------------------------------------------
# normalization

@dataclass
class BandStats:
    mean: np.ndarray  # (bands,) float64
    std: np.ndarray   # (bands,) float64


def compute_band_stats(images) -> BandStats:
    """Per-band mean/std over an iterable of (bands, h, w) float arrays.

    Accumulates in float64 with a fixed order; the variance is floored at
    1e-6 before the square root so constant bands normalize to zero."""
    total = None
    total_sq = None
    count = 0
    bands = None
    for arr in images:
        a = np.asarray(arr, dtype=np.float64)
        if bands is None:
            bands = a.shape[0]
            total = np.zeros(bands)
            total_sq = np.zeros(bands)
        elif a.shape[0] != bands:
            raise ShapeError(f"inconsistent band count: {a.shape[0]} vs {bands}")
        total += a.sum(axis=(1, 2))
        total_sq += (a * a).sum(axis=(1, 2))
        count += a.shape[1] * a.shape[2]
    if count == 0:
        raise ConfigError("cannot compute band stats from an empty image set")
    mean = total / count
    var = total_sq / count - mean * mean
    std = np.sqrt(np.maximum(var, VARIANCE_FLOOR))
    return BandStats(mean=mean, std=std)


def save_band_stats(path, stats: BandStats) -> None:
    lines = [f"{i} {float(stats.mean[i])!r} {float(stats.std[i])!r}"
             for i in range(len(stats.mean))]
    Path(path).write_text("\n".join(lines) + "\n")


def load_band_stats(path) -> BandStats:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"band stats file not found: {path} (normalization "
                                f"statistics must be computed on the train split first)")
    means, stds = [], []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        _, m, s = line.split()
        means.append(float(m))
        stds.append(float(s))
    return BandStats(mean=np.array(means), std=np.array(stds))


def normalize(batch: np.ndarray, stats: BandStats) -> Tensor4:
    """Per-band affine map to ~zero mean / unit variance using frozen train
    statistics; returns a float32 Tensor4 off the tape."""
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim != 4:
        raise ShapeError(f"normalize expects (n, c, h, w), got shape {batch.shape}")
    if batch.shape[1] != len(stats.mean):
        raise ShapeError(f"normalize: batch has {batch.shape[1]} bands, stats cover "
                         f"{len(stats.mean)}")
    mean = stats.mean.astype(np.float32).reshape(1, -1, 1, 1)
    std = stats.std.astype(np.float32).reshape(1, -1, 1, 1)
    return Tensor4((batch - mean) / std)


# ---------------------------------------------------------------------------
# manifests and batching

MANIFEST_HEADER = ["image_path", "mask_path", "role", "split"]


@dataclass
class ManifestEntry:
    image_path: str
    mask_path: str | None
    role: str
    split: str


@dataclass
class DatasetManifest:
    base_dir: Path
    entries: list[ManifestEntry]

    def select(self, role: str, split: str) -> list[ManifestEntry]:
        if role not in ROLES:
            raise ConfigError(f"unknown role {role!r}; expected one of {ROLES}")
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}; expected one of {SPLITS}")
        return [e for e in self.entries if e.role == role and e.split == split]

    def resolve(self, rel_path: str) -> Path:
        return self.base_dir / rel_path

    def stats_path(self) -> Path:
        return self.base_dir / BAND_STATS_NAME


def save_manifest(path, entries: list[ManifestEntry]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for e in entries:
            writer.writerow([e.image_path, e.mask_path or "", e.role, e.split])


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    base_dir = path.parent
    entries: list[ManifestEntry] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ConfigError(f"{path}: manifest header {header} != {MANIFEST_HEADER}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            image_path, mask_path, role, split = row
            mask = mask_path or None
            if role not in ROLES:
                raise ConfigError(f"{path}:{lineno}: unknown role {role!r}")
            if split not in SPLITS:
                raise ConfigError(f"{path}:{lineno}: unknown split {split!r}")
            if role == "vhr_unlabelled" and mask is not None:
                raise ConfigError(f"{path}:{lineno}: unlabelled entry must not carry a mask")
            if role != "vhr_unlabelled" and mask is None:
                raise ConfigError(f"{path}:{lineno}: labelled entry is missing its mask")
            if not (base_dir / image_path).exists():
                raise FileNotFoundError(f"{path}:{lineno}: image {image_path} not found "
                                        f"under {base_dir}")
            if mask is not None and not (base_dir / mask).exists():
                raise FileNotFoundError(f"{path}:{lineno}: mask {mask} not found under {base_dir}")
            entries.append(ManifestEntry(image_path=image_path, mask_path=mask,
                                         role=role, split=split))
    return DatasetManifest(base_dir=base_dir, entries=entries)


def load_raster_f32(path) -> np.ndarray:
    """Read a raster as (bands, h, w) float32; u8 payloads scale to [0, 1]."""
    raster = read_raster(path)
    arr = raster.data.astype(np.float32)
    if raster.dtype == "u8":
        arr /= 255.0
    return arr


def load_image_f32(manifest: DatasetManifest, entry: ManifestEntry,
                   cache: dict | None = None) -> np.ndarray:
    key = ("img", entry.image_path)
    if cache is not None and key in cache:
        return cache[key]
    arr = load_raster_f32(manifest.resolve(entry.image_path))
    if cache is not None:
        cache[key] = arr
    return arr


def load_mask_f32(manifest: DatasetManifest, entry: ManifestEntry,
                  cache: dict | None = None) -> np.ndarray:
    key = ("mask", entry.mask_path)
    if cache is not None and key in cache:
        return cache[key]
    mask = MaskImage.from_raster(read_raster(manifest.resolve(entry.mask_path)))
    arr = mask.data.astype(np.float32)[None]  # (1, h, w)
    if cache is not None:
        cache[key] = arr
    return arr


def iterate_batches(manifest: DatasetManifest, role: str, split: str, batch_size: int,
                    rng: PrngState, drop_last: bool | None = None, cache: dict | None = None):
    """One shuffled epoch over the role's split.

    Training passes drop the final short batch; evaluation keeps it (default
    follows the split). Yields (images, masks) float32 arrays, masks None for
    the unlabelled role.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    entries = manifest.select(role, split)
    if drop_last is None:
        drop_last = split == "train"
    order = list(range(len(entries)))
    rng.shuffle(order)
    labelled = role != "vhr_unlabelled"
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        if drop_last and len(chunk) < batch_size:
            return
        images = np.stack([load_image_f32(manifest, entries[i], cache) for i in chunk])
        masks = None
        if labelled:
            masks = np.stack([load_mask_f32(manifest, entries[i], cache) for i in chunk])
        yield images, masks
