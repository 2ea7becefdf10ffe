"""Optimization and experiment loops.

Adam with bias correction drives both the single-network baseline and the
tri-stream combined run. All randomness derives from one seed through named
substreams (``unet1``, ``unet2``, ``data/<role>``, ``ablate/subsample``),
which is what makes a combined run with the consistency weight at zero
reproduce the baseline's parameter trajectory bit for bit.

The combined epoch is anchored to the high-resolution stream (the largest
one); the two smaller streams cycle and reshuffle on wraparound.

Train logs are line-oriented CSV ``epoch,step,l1,l2,l3,total`` with no
timestamps, so identical runs produce identical bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .combined import (CombinedModel, TriBatch, combined_forward, is_combined_checkpoint,
                       load_combined_checkpoint, save_combined_checkpoint)
from .data import DatasetManifest, compute_band_stats, iterate_batches, load_band_stats, \
    load_image_f32, normalize, save_band_stats
from .errors import ConfigError, ContractError
from .losses import MetricsReport, binarize, combined_loss, dice_metric, iou_metric
from .nn import UNetConfig, UNetModel, build_unet, load_checkpoint, save_checkpoint, unet_forward
from .prng import PrngState
from .tensor import Tensor4, backward, no_grad, reset_graph, sigmoid

MODES = ("unet_vhr", "unet_hr", "combined")
DEFAULT_EPOCHS = {"unet_vhr": 25, "unet_hr": 25, "combined": 40}
MODE_ROLE = {"unet_vhr": "vhr_labelled", "unet_hr": "hr_labelled"}


@dataclass
class TrainConfig:
    mode: str = "unet_vhr"
    preset: str = "ternaus11-lite"
    epochs: int | None = None            # None -> 25 for unet modes, 40 for combined
    batch_size: int = 4                  # single-network batch
    batch_hr: int = 4                    # combined: high-resolution stream
    batch_vhr: int = 2                   # combined: labelled fine stream
    batch_unlabelled: int = 1            # combined: unlabelled fine stream
    learning_rate: float = 1e-3
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 0.1)
    bridge_factor: int = 4
    seed: int = 0
    checkpoint_path: str | None = None
    eval_every_epoch: bool = False
    threshold: float = 0.5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.epochs is not None and self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        for name in ("batch_size", "batch_hr", "batch_vhr", "batch_unlabelled"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if len(self.loss_weights) != 3 or any(
                (not math.isfinite(w)) or w < 0 for w in self.loss_weights):
            raise ConfigError(f"loss weights must be 3 finite non-negative values, "
                              f"got {self.loss_weights}")
        if not (0.0 < self.threshold < 1.0):
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")

    @property
    def resolved_epochs(self) -> int:
        return DEFAULT_EPOCHS[self.mode] if self.epochs is None else self.epochs


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamParams:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class OptimizerState:
    """Per-parameter first/second moment accumulators plus the step counter."""

    def __init__(self, params: dict[str, Tensor4], hyper: AdamParams | None = None):
        self.hyper = hyper or AdamParams()
        self.step = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}


def adam_step(params: dict[str, Tensor4], state: OptimizerState) -> None:
    """Standard Adam update with bias correction; missing grads are zeros."""
    hp = state.hyper
    state.step += 1
    bc1 = 1.0 - hp.beta1 ** state.step
    bc2 = 1.0 - hp.beta2 ** state.step
    for name, p in params.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        if g is None:
            m *= hp.beta1
            v *= hp.beta2
        else:
            if not np.all(np.isfinite(g)):
                raise ContractError(f"non-finite gradient for parameter {name!r}")
            m *= hp.beta1
            m += (1.0 - hp.beta1) * g
            v *= hp.beta2
            v += (1.0 - hp.beta2) * (g * g)
        p.data -= hp.lr * (m / bc1) / (np.sqrt(v / bc2) + hp.eps)


# ---------------------------------------------------------------------------
# logging

@dataclass
class TrainLog:
    steps: list[tuple[int, int, float, float, float, float]] = field(default_factory=list)
    val_reports: list[tuple[int, MetricsReport]] = field(default_factory=list)

    def record(self, epoch: int, step: int, l1: float, l2: float, l3: float,
               total: float) -> None:
        self.steps.append((epoch, step, l1, l2, l3, total))

    def to_csv(self) -> str:
        lines = ["epoch,step,l1,l2,l3,total"]
        for epoch, step, l1, l2, l3, total in self.steps:
            lines.append(f"{epoch},{step},{l1!r},{l2!r},{l3!r},{total!r}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


def ensure_band_stats(manifest: DatasetManifest):
    """Load the dataset's normalization stats, computing them from the train
    split (all roles) and persisting the sidecar on first use."""
    path = manifest.stats_path()
    if path.exists():
        return load_band_stats(path)
    train = [e for e in manifest.entries if e.split == "train"]
    if not train:
        raise ConfigError("cannot compute band stats: manifest has no train entries")
    stats = compute_band_stats(load_image_f32(manifest, e) for e in train)
    save_band_stats(path, stats)
    return stats


# ---------------------------------------------------------------------------
# evaluation

def evaluate_model(model: UNetModel, manifest: DatasetManifest, role: str, split: str,
                   threshold: float = 0.5, batch_size: int = 4, stats=None,
                   cache: dict | None = None) -> MetricsReport:
    """Forward every sample of the split once, threshold the probabilities,
    and average per-sample IoU/Dice."""
    if role == "vhr_unlabelled":
        raise ConfigError("cannot evaluate on the unlabelled role: it has no masks")
    entries = manifest.select(role, split)
    if not entries:
        raise ConfigError(f"evaluate: split {split!r} of role {role!r} is empty")
    if stats is None:
        stats = load_band_stats(manifest.stats_path())
    rng = PrngState(0)  # order is irrelevant: every sample scores independently
    ious: list[float] = []
    dices: list[float] = []
    with no_grad():
        for images, masks in iterate_batches(manifest, role, split, batch_size, rng,
                                             drop_last=False, cache=cache):
            probs = sigmoid(unet_forward(model, normalize(images, stats))).data
            for i in range(images.shape[0]):
                pred = binarize(probs[i, 0], threshold)
                truth = masks[i, 0].astype(np.uint8)
                ious.append(iou_metric(pred, truth))
                dices.append(dice_metric(pred, truth))
    return MetricsReport.from_samples(ious, dices)


def evaluate_checkpoint(path, manifest: DatasetManifest, split: str,
                        threshold: float = 0.5) -> tuple[MetricsReport, dict]:
    """Evaluate a saved model. Combined checkpoints are scored through their
    fine-resolution network on the labelled fine split."""
    if is_combined_checkpoint(path):
        model, meta = load_combined_checkpoint(path)
        role = "vhr_labelled"
        net = model.unet1
    else:
        net, meta = load_checkpoint(path)
        role = MODE_ROLE.get(meta.get("mode", "unet_vhr"), "vhr_labelled")
    report = evaluate_model(net, manifest, role, split, threshold)
    meta["role"] = role
    return report, meta


# ---------------------------------------------------------------------------
# training loops

def _loss_columns(mode: str, total: float) -> tuple[float, float, float]:
    if mode == "unet_vhr":
        return total, 0.0, 0.0
    return 0.0, total, 0.0


def train_unet(config: TrainConfig, manifest: DatasetManifest) -> tuple[UNetModel, TrainLog]:
    if config.mode not in MODE_ROLE:
        raise ConfigError(f"train_unet needs mode unet_vhr or unet_hr, got {config.mode!r}")
    role = MODE_ROLE[config.mode]
    if not manifest.select(role, "train"):
        raise ConfigError(f"train split of role {role!r} is empty")
    stats = ensure_band_stats(manifest)
    seed_root = PrngState(config.seed)
    model = build_unet(UNetConfig.from_preset(config.preset), seed_root.derive("unet1"))
    data_rng = seed_root.derive(f"data/{role}")
    opt = OptimizerState(model.parameters, AdamParams(lr=config.learning_rate))
    log = TrainLog()
    cache: dict = {}
    best_iou = -1.0
    step = 0
    for epoch in range(config.resolved_epochs):
        for images, masks in iterate_batches(manifest, role, "train", config.batch_size,
                                             data_rng, cache=cache):
            reset_graph()
            lv = combined_loss(unet_forward(model, normalize(images, stats)), Tensor4(masks))
            backward(lv.total)
            adam_step(model.parameters, opt)
            model.zero_grads()
            total = lv.total.item()
            l1, l2, l3 = _loss_columns(config.mode, total)
            log.record(epoch, step, l1, l2, l3, total)
            step += 1
        if config.eval_every_epoch and manifest.select(role, "val"):
            report = evaluate_model(model, manifest, role, "val", config.threshold,
                                    config.batch_size, stats, cache)
            log.val_reports.append((epoch, report))
            if config.checkpoint_path and report.mean_iou > best_iou:
                best_iou = report.mean_iou
                save_checkpoint(model, str(config.checkpoint_path) + ".best",
                                epoch=epoch + 1, seed=config.seed, mode=config.mode,
                                extra_meta=_train_samples_meta(manifest, role))
    reset_graph()
    if config.checkpoint_path:
        save_checkpoint(model, config.checkpoint_path, epoch=config.resolved_epochs,
                        seed=config.seed, mode=config.mode,
                        extra_meta=_train_samples_meta(manifest, role))
    return model, log


def _train_samples_meta(manifest: DatasetManifest, role: str) -> dict[str, np.ndarray]:
    n = len(manifest.select(role, "train"))
    return {"meta/train_samples": np.array([n], dtype=np.float32)}


class _CyclingBatches:
    """Endless batch stream over one role; reshuffles on every wraparound."""

    def __init__(self, manifest: DatasetManifest, role: str, batch_size: int,
                 rng: PrngState, cache: dict):
        self.manifest = manifest
        self.role = role
        self.batch_size = batch_size
        self.rng = rng
        self.cache = cache
        self._iter = self._fresh()

    def _fresh(self):
        return iterate_batches(self.manifest, self.role, "train", self.batch_size,
                               self.rng, drop_last=True, cache=self.cache)

    def next(self):
        try:
            return next(self._iter)
        except StopIteration:
            self._iter = self._fresh()
            return next(self._iter)


def train_combined(config: TrainConfig, manifest: DatasetManifest) -> tuple[CombinedModel, TrainLog]:
    if config.mode != "combined":
        raise ConfigError(f"train_combined needs mode 'combined', got {config.mode!r}")
    w3 = config.loss_weights[2]
    use_unlabelled = w3 > 0
    for role, batch in (("hr_labelled", config.batch_hr), ("vhr_labelled", config.batch_vhr)):
        n = len(manifest.select(role, "train"))
        if n < batch:
            raise ConfigError(f"train split of role {role!r} has {n} entries, "
                              f"needs at least one batch of {batch}")
    if use_unlabelled and not manifest.select("vhr_unlabelled", "train"):
        raise ConfigError("train split of role 'vhr_unlabelled' is empty "
                          "(required when the consistency weight is nonzero)")
    stats = ensure_band_stats(manifest)
    seed_root = PrngState(config.seed)
    model = CombinedModel(
        unet1=build_unet(UNetConfig.from_preset(config.preset), seed_root.derive("unet1")),
        unet2=build_unet(UNetConfig.from_preset(config.preset), seed_root.derive("unet2")),
        bridge_factor=config.bridge_factor,
        weights=tuple(config.loss_weights),
    )
    params = model.named_parameters()
    opt = OptimizerState(params, AdamParams(lr=config.learning_rate))
    log = TrainLog()
    cache: dict = {}
    hr_rng = seed_root.derive("data/hr_labelled")
    vhr_stream = _CyclingBatches(manifest, "vhr_labelled", config.batch_vhr,
                                 seed_root.derive("data/vhr_labelled"), cache)
    unl_stream = None
    if use_unlabelled:
        unl_stream = _CyclingBatches(manifest, "vhr_unlabelled", config.batch_unlabelled,
                                     seed_root.derive("data/vhr_unlabelled"), cache)
    best_iou = -1.0
    step = 0
    for epoch in range(config.resolved_epochs):
        for hr_images, hr_masks in iterate_batches(manifest, "hr_labelled", "train",
                                                   config.batch_hr, hr_rng, cache=cache):
            vhr_images, vhr_masks = vhr_stream.next()
            tri = TriBatch(
                hr_images=normalize(hr_images, stats),
                hr_masks=Tensor4(hr_masks),
                vhr_images=normalize(vhr_images, stats),
                vhr_masks=Tensor4(vhr_masks),
                vhr_unlabelled=(normalize(unl_stream.next()[0], stats)
                                if unl_stream is not None else None),
            )
            reset_graph()
            report = combined_forward(model, tri)
            backward(report.node)
            adam_step(params, opt)
            model.zero_grads()
            log.record(epoch, step, report.l1, report.l2, report.l3, report.total)
            step += 1
        if config.eval_every_epoch and manifest.select("vhr_labelled", "val"):
            val = evaluate_model(model.unet1, manifest, "vhr_labelled", "val",
                                 config.threshold, config.batch_vhr, stats, cache)
            log.val_reports.append((epoch, val))
            if config.checkpoint_path and val.mean_iou > best_iou:
                best_iou = val.mean_iou
                save_combined_checkpoint(model, str(config.checkpoint_path) + ".best",
                                         epoch=epoch + 1, seed=config.seed,
                                         extra_meta=_train_samples_meta(manifest, "vhr_labelled"))
    reset_graph()
    if config.checkpoint_path:
        save_combined_checkpoint(model, config.checkpoint_path, epoch=config.resolved_epochs,
                                 seed=config.seed,
                                 extra_meta=_train_samples_meta(manifest, "vhr_labelled"))
    return model, log


# ---------------------------------------------------------------------------
# training-set-size ablation

@dataclass
class AblationTable:
    """Rows of (training_samples, baseline IoU/Dice, combined IoU/Dice)."""
    rows: list[tuple[int, float, float, float, float]]

    def to_csv(self) -> str:
        lines = ["training_samples,unet_iou,unet_dice,combined_iou,combined_dice"]
        for size, ui, ud, ci, cd in self.rows:
            lines.append(f"{size},{ui:.4f},{ud:.4f},{ci:.4f},{cd:.4f}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        header = f"{'train_samples':>13} | {'unet IoU':>8} {'unet Dice':>9} | " \
                 f"{'comb IoU':>8} {'comb Dice':>9}"
        sep = "-" * len(header)
        lines = [header, sep]
        for size, ui, ud, ci, cd in self.rows:
            lines.append(f"{size:>13} | {ui:>8.4f} {ud:>9.4f} | {ci:>8.4f} {cd:>9.4f}")
        return "\n".join(lines)


def nested_subsets(n: int, sizes: list[int], rng: PrngState) -> dict[int, list[int]]:
    """For each requested size, the indices of the chosen subsample, kept in
    original order. Smaller subsets are prefixes of larger ones after one
    shared shuffle, so size A ⊂ size B whenever A <= B, and the full size
    reproduces the original list exactly."""
    order = list(range(n))
    rng.shuffle(order)
    return {size: sorted(order[:size]) for size in sizes}


def ablate_training_size(sizes: list[int], config: TrainConfig,
                         manifest: DatasetManifest) -> AblationTable:
    """Train the baseline and the combined model on shrinking labelled-fine
    subsets, scoring both on the fixed test split."""
    vhr_train = manifest.select("vhr_labelled", "train")
    for size in sizes:
        if size < 1 or size > len(vhr_train):
            raise ConfigError(f"ablation size {size} out of range 1..{len(vhr_train)}")
    if not manifest.select("vhr_labelled", "test"):
        raise ConfigError("ablation needs a nonempty test split for role 'vhr_labelled'")
    stats = ensure_band_stats(manifest)
    subsets = nested_subsets(len(vhr_train), sizes,
                             PrngState(config.seed).derive("ablate/subsample"))
    rows = []
    for size in sizes:
        chosen = {id(vhr_train[i]) for i in subsets[size]}
        entries = [e for e in manifest.entries
                   if not (e.role == "vhr_labelled" and e.split == "train")
                   or id(e) in chosen]
        sub = DatasetManifest(base_dir=manifest.base_dir, entries=entries)
        baseline, _ = train_unet(replace(config, mode="unet_vhr",
                                         batch_size=min(config.batch_size, size),
                                         checkpoint_path=None), sub)
        comb, _ = train_combined(replace(config, mode="combined",
                                         batch_vhr=min(config.batch_vhr, size),
                                         checkpoint_path=None), sub)
        base_report = evaluate_model(baseline, manifest, "vhr_labelled", "test",
                                     config.threshold, config.batch_size, stats)
        comb_report = evaluate_model(comb.unet1, manifest, "vhr_labelled", "test",
                                     config.threshold, config.batch_size, stats)
        rows.append((size, base_report.mean_iou, base_report.mean_dice,
                     comb_report.mean_iou, comb_report.mean_dice))
    return AblationTable(rows=rows)
