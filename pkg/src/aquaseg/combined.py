"""Dual-network model: one U-Net per resolution tier plus the bridge
between them.

Three input streams feed one training step. Labelled very-high-resolution
patches supervise network 1 (loss l1). Labelled high-resolution patches
supervise network 2 (loss l2). Unlabelled very-high-resolution patches go
through network 1 directly and through network 2 via a block-average
downsample / nearest-neighbor upsample bridge; the two probability fields
are tied together by a consistency loss (l3) in the same BCE+Dice family,
with gradients flowing into both networks unless a per-side detach flag is
set. The step loss is ``w1*l1 + w2*l2 + w3*l3``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .losses import combined_loss, consistency_dice, soft_target_bce
from .nn import (UNetModel, config_meta, decode_seed, decode_text, encode_seed,
                 encode_text, model_from_arrays, read_named_arrays, unet_forward,
                 write_named_arrays)
from .tensor import Tensor4, add, avgpool_downsample, scale, sigmoid, upsample_nearest

DEFAULT_LOSS_WEIGHTS = (1.0, 1.0, 0.1)
DEFAULT_BRIDGE_FACTOR = 4


@dataclass
class CombinedModel:
    unet1: UNetModel  # very-high-resolution stream
    unet2: UNetModel  # high-resolution stream
    bridge_factor: int = DEFAULT_BRIDGE_FACTOR
    weights: tuple[float, float, float] = DEFAULT_LOSS_WEIGHTS
    l3_detach_unet1: bool = False
    l3_detach_unet2: bool = False

    def __post_init__(self):
        if self.bridge_factor < 2:
            raise ConfigError(f"bridge_factor must be >= 2, got {self.bridge_factor}")
        if len(self.weights) != 3 or any((not np.isfinite(w)) or w < 0 for w in self.weights):
            raise ConfigError(f"loss weights must be 3 finite non-negative values, got {self.weights}")

    def named_parameters(self) -> dict[str, Tensor4]:
        out = {f"unet1/{k}": p for k, p in self.unet1.parameters.items()}
        out.update({f"unet2/{k}": p for k, p in self.unet2.parameters.items()})
        return out

    def zero_grads(self) -> None:
        self.unet1.zero_grads()
        self.unet2.zero_grads()


@dataclass
class TriBatch:
    """One step's worth of data for the three streams. ``vhr_unlabelled``
    may be None, which drops l3 from the step entirely."""
    hr_images: Tensor4
    hr_masks: Tensor4
    vhr_images: Tensor4
    vhr_masks: Tensor4
    vhr_unlabelled: Tensor4 | None = None


@dataclass
class CombinedLossReport:
    l1: float
    l2: float
    l3: float
    total: float
    node: Tensor4 = field(repr=False)


def bridge_down(vhr: Tensor4, factor: int) -> Tensor4:
    """Block-average a very-high-resolution tensor down to the coarse grid."""
    return avgpool_downsample(vhr, factor)


def bridge_up(hr_logits: Tensor4, factor: int) -> Tensor4:
    """Nearest-neighbor expansion of coarse logits back to the fine grid."""
    return upsample_nearest(hr_logits, factor)


def _check_stream(name: str, images: Tensor4, masks: Tensor4 | None, model: UNetModel) -> None:
    if images.c != model.config.in_channels:
        raise ShapeError(f"{name} stream: images {images.shape} have {images.c} channels, "
                         f"network expects {model.config.in_channels}")
    div = model.config.spatial_divisor
    if images.h % div or images.w % div:
        raise ShapeError(f"{name} stream: spatial dims of {images.shape} must be divisible by {div}")
    if masks is not None:
        expected = (images.n, 1, images.h, images.w)
        if masks.shape != expected:
            raise ShapeError(f"{name} stream: masks {masks.shape} must be {expected}")


def combined_forward(model: CombinedModel, batch: TriBatch) -> CombinedLossReport:
    """One tri-stream forward pass; returns losses and the scalar node.

    The total is assembled as ``(w1*l1 + w2*l2) + w3*l3`` in exactly that
    expression order, so reports can be recomputed bitwise from components.
    """
    _check_stream("vhr_labelled", batch.vhr_images, batch.vhr_masks, model.unet1)
    _check_stream("hr", batch.hr_images, batch.hr_masks, model.unet2)
    w1, w2, w3 = (float(w) for w in model.weights)

    l1 = combined_loss(unet_forward(model.unet1, batch.vhr_images), batch.vhr_masks)
    l2 = combined_loss(unet_forward(model.unet2, batch.hr_images), batch.hr_masks)
    supervised = add(scale(l1.total, w1), scale(l2.total, w2))

    if batch.vhr_unlabelled is None:
        return CombinedLossReport(l1=l1.total.item(), l2=l2.total.item(), l3=0.0,
                                  total=supervised.item(), node=supervised)

    u = batch.vhr_unlabelled
    f = model.bridge_factor
    if u.h % f or u.w % f:
        raise ShapeError(f"vhr_unlabelled stream: spatial dims of {u.shape} must be "
                         f"divisible by bridge factor {f}")
    _check_stream("vhr_unlabelled", u, None, model.unet1)
    down = bridge_down(u, f)
    _check_stream("vhr_unlabelled (bridged)", down, None, model.unet2)

    p_fine = sigmoid(unet_forward(model.unet1, u))
    p_coarse = sigmoid(bridge_up(unet_forward(model.unet2, down), f))
    if model.l3_detach_unet1:
        p_fine = p_fine.detach()
    if model.l3_detach_unet2:
        p_coarse = p_coarse.detach()
    l3 = add(scale(soft_target_bce(p_fine, p_coarse), 0.5),
             scale(consistency_dice(p_fine, p_coarse), 0.5))
    total = add(supervised, scale(l3, w3))
    return CombinedLossReport(l1=l1.total.item(), l2=l2.total.item(), l3=l3.item(),
                              total=total.item(), node=total)


def recompose_total(weights: tuple[float, float, float],
                    l1: float, l2: float, l3: float, with_l3: bool = True) -> float:
    """Recompute the step total from reported components with the same
    float32 expression order the forward pass uses."""
    w1, w2, w3 = weights
    s = np.float32(np.float32(np.float32(l1) * np.float32(w1)) +
                   np.float32(np.float32(l2) * np.float32(w2)))
    if with_l3:
        s = np.float32(s + np.float32(np.float32(l3) * np.float32(w3)))
    return float(s)


# ---------------------------------------------------------------------------
# persistence: both networks in one AQCK file, names prefixed unet1/ and unet2/

def save_combined_checkpoint(model: CombinedModel, path, epoch: int = 0, seed: int = 0,
                             extra_meta: dict[str, np.ndarray] | None = None) -> None:
    named: dict[str, np.ndarray] = {}
    for prefix, net in (("unet1", model.unet1), ("unet2", model.unet2)):
        for name, p in net.parameters.items():
            named[f"{prefix}/{name}"] = p.data
    named.update(config_meta(model.unet1.config, "meta/unet1/config"))
    named.update(config_meta(model.unet2.config, "meta/unet2/config"))
    named["meta/bridge_factor"] = np.array([model.bridge_factor], dtype=np.float32)
    named["meta/weights"] = np.array(model.weights, dtype=np.float32)
    named["meta/l3_detach"] = np.array(
        [int(model.l3_detach_unet1), int(model.l3_detach_unet2)], dtype=np.float32)
    named["meta/epoch"] = np.array([epoch], dtype=np.float32)
    named["meta/seed"] = encode_seed(seed)
    named["meta/mode"] = encode_text("combined")
    if extra_meta:
        named.update(extra_meta)
    write_named_arrays(path, named)


def load_combined_checkpoint(path) -> tuple[CombinedModel, dict]:
    named = read_named_arrays(path)
    unet1 = model_from_arrays(named, prefix="unet1/", config_prefix="meta/unet1/config")
    unet2 = model_from_arrays(named, prefix="unet2/", config_prefix="meta/unet2/config")
    detach = [bool(int(round(float(v)))) for v in named["meta/l3_detach"].reshape(-1)]
    model = CombinedModel(
        unet1=unet1,
        unet2=unet2,
        bridge_factor=int(round(float(named["meta/bridge_factor"][0]))),
        weights=tuple(float(v) for v in named["meta/weights"].reshape(-1)),
        l3_detach_unet1=detach[0],
        l3_detach_unet2=detach[1],
    )
    meta = {
        "epoch": int(round(float(named["meta/epoch"][0]))),
        "seed": decode_seed(named["meta/seed"]),
        "mode": decode_text(named["meta/mode"]),
    }
    if "meta/train_samples" in named:
        meta["train_samples"] = int(round(float(named["meta/train_samples"][0])))
    return model, meta


def is_combined_checkpoint(path) -> bool:
    named = read_named_arrays(path)
    return any(name.startswith("unet1/") for name in named)
