"""U-Net construction and persistence.

The architecture is a width-configurable encoder-decoder: per stage, a block
of 3x3 convs (each followed by relu), then 2x2 maxpool; a single-conv
bottleneck; a decoder that upsamples with stride-2 transposed convs,
concatenates the matching encoder features, and fuses with one 3x3 conv;
finally a 1x1 conv head emitting one logit channel. No batch norm, no
dropout. Weights use He-uniform fan-in init, biases start at zero.

Checkpoints use the AQCK container: magic ``AQCK``, u32 version, u32 tensor
count, then per tensor u32 name length + UTF-8 name, u32 ndim, u32 dims,
raw little-endian float32 data. Training metadata (epoch, seed, config echo)
rides along as extra ``meta/...`` tensors so the byte layout stays uniform.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ConfigError, ShapeError, TruncatedFileError
from .prng import PrngState
from .tensor import Tensor4, concat_channels, conv2d, conv_transpose2d, maxpool2d, relu

PRESETS = {
    "micro": dict(depth=3, encoder_block_convs=(1, 1, 1), encoder_channels=(8, 16, 32)),
    "ternaus11-lite": dict(depth=5, encoder_block_convs=(1, 1, 2, 2, 2),
                           encoder_channels=(32, 64, 128, 256, 256)),
}

AQCK_MAGIC = b"AQCK"
AQCK_VERSION = 1


@dataclass(frozen=True)
class UNetConfig:
    depth: int
    encoder_block_convs: tuple[int, ...]
    encoder_channels: tuple[int, ...]
    in_channels: int = 4
    preset: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "encoder_block_convs", tuple(self.encoder_block_convs))
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if len(self.encoder_channels) != self.depth or len(self.encoder_block_convs) != self.depth:
            raise ConfigError(
                f"depth {self.depth} needs {self.depth}-long channel/conv lists, got "
                f"channels {self.encoder_channels} and convs {self.encoder_block_convs}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if any(c < 1 for c in self.encoder_channels) or any(c < 1 for c in self.encoder_block_convs):
            raise ConfigError("encoder channel and conv counts must all be >= 1")

    @classmethod
    def from_preset(cls, name: str, in_channels: int = 4) -> "UNetConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
        return cls(in_channels=in_channels, preset=name, **PRESETS[name])

    @property
    def spatial_divisor(self) -> int:
        return 2 ** self.depth


def parameter_specs(config: UNetConfig) -> dict[str, tuple[tuple[int, ...], int | None]]:
    """Ordered name -> (shape, fan_in) map; fan_in None marks a zero-init bias."""
    specs: dict[str, tuple[tuple[int, ...], int | None]] = {}
    prev = config.in_channels
    for i in range(config.depth):
        ch = config.encoder_channels[i]
        for j in range(config.encoder_block_convs[i]):
            specs[f"enc{i}.conv{j}.weight"] = ((ch, prev, 3, 3), prev * 9)
            specs[f"enc{i}.conv{j}.bias"] = ((1, ch, 1, 1), None)
            prev = ch
    c = config.encoder_channels[-1]
    specs["bottleneck.conv0.weight"] = ((c, c, 3, 3), c * 9)
    specs["bottleneck.conv0.bias"] = ((1, c, 1, 1), None)
    prev = c
    for i in reversed(range(config.depth)):
        ch = config.encoder_channels[i]
        # transposed-conv weights are stored (in_c, out_c, kh, kw)
        specs[f"dec{i}.up.weight"] = ((prev, ch, 2, 2), prev * 4)
        specs[f"dec{i}.conv0.weight"] = ((ch, 2 * ch, 3, 3), 2 * ch * 9)
        specs[f"dec{i}.conv0.bias"] = ((1, ch, 1, 1), None)
        prev = ch
    specs["head.weight"] = ((1, prev, 1, 1), prev)
    specs["head.bias"] = ((1, 1, 1, 1), None)
    return specs


@dataclass
class UNetModel:
    config: UNetConfig
    parameters: dict[str, Tensor4] = field(repr=False)

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters.values())

    def zero_grads(self) -> None:
        for p in self.parameters.values():
            p.grad = None


def he_uniform(rng: PrngState, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    u = rng.uniform(int(np.prod(shape)))
    return ((u * 2.0 - 1.0) * bound).astype(dtype).reshape(shape)


def build_unet(config: UNetConfig, rng: PrngState, dtype=np.float32) -> UNetModel:
    """Instantiate parameters for ``config``; same seed, same bits."""
    params: dict[str, Tensor4] = {}
    for name, (shape, fan_in) in parameter_specs(config).items():
        if fan_in is None:
            arr = np.zeros(shape, dtype=dtype)
        else:
            arr = he_uniform(rng, shape, fan_in, dtype)
        params[name] = Tensor4(arr, requires_grad=True, dtype=dtype)
    return UNetModel(config=config, parameters=params)


def unet_forward(model: UNetModel, batch: Tensor4) -> Tensor4:
    """Run the network; returns logits of shape (n, 1, h, w)."""
    cfg = model.config
    if batch.c != cfg.in_channels:
        raise ShapeError(f"unet_forward: batch shape {batch.shape} has {batch.c} channels, "
                         f"model expects {cfg.in_channels}")
    div = cfg.spatial_divisor
    if batch.h % div or batch.w % div:
        raise ShapeError(f"unet_forward: spatial dims of {batch.shape} must be divisible "
                         f"by {div} (depth {cfg.depth})")
    p = model.parameters
    skips = []
    cur = batch
    for i in range(cfg.depth):
        for j in range(cfg.encoder_block_convs[i]):
            cur = relu(conv2d(cur, p[f"enc{i}.conv{j}.weight"], p[f"enc{i}.conv{j}.bias"],
                              stride=1, padding=1))
        skips.append(cur)
        cur = maxpool2d(cur, 2)
    cur = relu(conv2d(cur, p["bottleneck.conv0.weight"], p["bottleneck.conv0.bias"],
                      stride=1, padding=1))
    for i in reversed(range(cfg.depth)):
        cur = conv_transpose2d(cur, p[f"dec{i}.up.weight"], stride=2)
        cur = concat_channels(cur, skips[i])
        cur = relu(conv2d(cur, p[f"dec{i}.conv0.weight"], p[f"dec{i}.conv0.bias"],
                          stride=1, padding=1))
    return conv2d(cur, p["head.weight"], p["head.bias"], stride=1, padding=0)


# ---------------------------------------------------------------------------
# AQCK container

def write_named_arrays(path, named: dict[str, np.ndarray]) -> None:
    buf = bytearray()
    buf += AQCK_MAGIC
    buf += struct.pack("<I", AQCK_VERSION)
    buf += struct.pack("<I", len(named))
    for name, arr in named.items():
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb))
        buf += nb
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def read_named_arrays(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise TruncatedFileError(f"{path}: needed {pos + n} bytes, file has {len(raw)}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(4) != AQCK_MAGIC:
        raise BadMagicError(f"{path}: bad magic, not an AQCK checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != AQCK_VERSION:
        raise BadMagicError(f"{path}: unsupported AQCK version {version}")
    (count,) = struct.unpack("<I", take(4))
    named: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
        named[name] = data.copy()
    return named


def encode_text(s: str) -> np.ndarray:
    return np.array([float(ord(ch)) for ch in s], dtype=np.float32)


def decode_text(arr: np.ndarray) -> str:
    return "".join(chr(int(round(float(v)))) for v in np.asarray(arr).reshape(-1))


def encode_seed(seed: int) -> np.ndarray:
    return np.array([(seed >> k) & 0xFFFF for k in (48, 32, 16, 0)], dtype=np.float32)


def decode_seed(arr: np.ndarray) -> int:
    chunks = [int(round(float(v))) for v in np.asarray(arr).reshape(-1)]
    return (chunks[0] << 48) | (chunks[1] << 32) | (chunks[2] << 16) | chunks[3]


def config_meta(config: UNetConfig, prefix: str = "meta/config") -> dict[str, np.ndarray]:
    return {
        f"{prefix}/in_channels": np.array([config.in_channels], dtype=np.float32),
        f"{prefix}/depth": np.array([config.depth], dtype=np.float32),
        f"{prefix}/encoder_channels": np.array(config.encoder_channels, dtype=np.float32),
        f"{prefix}/encoder_block_convs": np.array(config.encoder_block_convs, dtype=np.float32),
        f"{prefix}/preset": encode_text(config.preset),
    }


def config_from_meta(named: dict[str, np.ndarray], prefix: str = "meta/config") -> UNetConfig:
    def ints(key):
        return tuple(int(round(float(v))) for v in named[f"{prefix}/{key}"].reshape(-1))
    return UNetConfig(
        depth=ints("depth")[0],
        encoder_block_convs=ints("encoder_block_convs"),
        encoder_channels=ints("encoder_channels"),
        in_channels=ints("in_channels")[0],
        preset=decode_text(named[f"{prefix}/preset"]),
    )


def save_checkpoint(model: UNetModel, path, epoch: int = 0, seed: int = 0,
                    mode: str = "unet_vhr", extra_meta: dict[str, np.ndarray] | None = None) -> None:
    named: dict[str, np.ndarray] = {name: p.data for name, p in model.parameters.items()}
    named.update(config_meta(model.config))
    named["meta/epoch"] = np.array([epoch], dtype=np.float32)
    named["meta/seed"] = encode_seed(seed)
    named["meta/mode"] = encode_text(mode)
    if extra_meta:
        named.update(extra_meta)
    write_named_arrays(path, named)


def model_from_arrays(named: dict[str, np.ndarray], prefix: str = "",
                      config_prefix: str = "meta/config") -> UNetModel:
    config = config_from_meta(named, config_prefix)
    params: dict[str, Tensor4] = {}
    for name, (shape, _) in parameter_specs(config).items():
        key = prefix + name
        if key not in named:
            raise ShapeError(f"checkpoint is missing tensor {key!r} required by its config")
        arr = named[key]
        if tuple(arr.shape) != shape:
            raise ShapeError(f"checkpoint tensor {key!r} has shape {tuple(arr.shape)}, "
                             f"config requires {shape}")
        params[name] = Tensor4(arr, requires_grad=True)
    return UNetModel(config=config, parameters=params)


def load_checkpoint(path) -> tuple[UNetModel, dict]:
    """Returns (model, meta) where meta has epoch, seed and mode."""
    named = read_named_arrays(path)
    model = model_from_arrays(named)
    meta = {
        "epoch": int(round(float(named["meta/epoch"][0]))),
        "seed": decode_seed(named["meta/seed"]),
        "mode": decode_text(named["meta/mode"]),
    }
    if "meta/train_samples" in named:
        meta["train_samples"] = int(round(float(named["meta/train_samples"][0])))
    return model, meta
