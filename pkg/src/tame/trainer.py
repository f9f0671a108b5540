"""Two-pass training of the attention module over a frozen backbone.

Each step runs the backbone on the clean batch to get the taps and the
model-truth classes, builds the train-mode explanation for those classes,
upsamples it to image size, masks the image with it and runs the backbone a
second time.  Only the attention parameters are updated.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from tame.attention import AttentionModule, VariantFlags
from tame.autodiff import Tensor, backward, bilinear_upsample, masked
from tame.backbone import Backbone, model_truth
from tame.data import MASK_FILLS, ImageSet
from tame.errors import ConfigError, NumericError
from tame.evaluator import DEFAULT_THRESHOLDS, MetricsReport, TameSource, evaluate
from tame.objective import LossBreakdown, LossWeights, total_loss
from tame.optim import SGD, OneCycle, OneCycleSchedule, one_cycle_lr

__all__ = [
    "TrainConfig", "EpochRecord", "FitResult", "TrainingAborted",
    "train_step", "fit", "select_epoch", "one_cycle_lr",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 32
    max_lr: float = 0.05
    start_div: float = 25.0
    final_div: float = 1e4
    peak_fraction: float = 0.3
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    weights: LossWeights = LossWeights()
    flags: VariantFlags = VariantFlags()
    mask_fill: str = "mean"
    fusion_init_scale: float = 0.1
    eval_batch_size: int = 50
    threads: int = 1

    def __post_init__(self):
        if self.fusion_init_scale <= 0:
            raise ConfigError("fusion_init_scale must be positive")
        if self.mask_fill not in MASK_FILLS:
            raise ConfigError(f"mask_fill must be one of {MASK_FILLS}")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.max_lr <= 0:
            raise ConfigError("max_lr must be positive")
        if not 0 < self.peak_fraction < 1:
            raise ConfigError("peak_fraction must lie in (0, 1)")

    @property
    def schedule(self) -> OneCycle:
        return OneCycle(self.start_div, self.final_div, self.peak_fraction)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    """Mean training losses of one epoch and the validation metrics after it."""

    epoch: int
    loss: dict
    ad: dict
    ic: dict

    def metric(self, name: str, v) -> float:
        return (self.ad if name == "ad" else self.ic)[v]

    def row(self) -> dict:
        out = {"epoch": self.epoch}
        out.update({k: self.loss[k] for k in ("total", "ce", "area", "variation")})
        for v in sorted(self.ad, reverse=True):
            out[f"AD{v}"] = self.ad[v]
            out[f"IC{v}"] = self.ic[v]
        return out


@dataclass
class FitResult:
    attention: AttentionModule
    best_epoch: int
    records: list
    lr_history: list
    best_state: dict = field(default_factory=dict)


class TrainingAborted(NumericError):
    """Raised when training diverges; ``records`` holds the epochs completed so far."""

    def __init__(self, message: str, records: list, lr_history: list):
        super().__init__(message)
        self.records = records
        self.lr_history = lr_history


def _explain_and_mask(x: Tensor, backbone: Backbone, attention: AttentionModule, fill=None):
    logits, features = backbone.forward_with_taps(x, attention.tap_names)
    labels = model_truth(logits)
    psi = attention.explain(features, labels, mode="train")
    n, (h, w) = psi.shape[0], x.shape[2:]
    up = bilinear_upsample(psi.reshape(n, 1, *psi.shape[1:]), h, w).reshape(n, h, w)
    return labels, psi, masked(x, up, fill)


def train_step(
    images: np.ndarray,
    backbone: Backbone,
    attention: AttentionModule,
    optimizer: SGD,
    lr: float,
    weights: LossWeights = LossWeights(),
    fill=None,
) -> LossBreakdown:
    """One optimisation step on a normalised ``N x C x H x W`` batch; returns the batch-mean breakdown.

    ``fill`` is the normalised colour that masked-out pixels blend towards.
    """
    if not backbone.frozen:
        raise ConfigError("the backbone must be frozen before training the attention module")
    x = Tensor(images)
    labels, psi, masked_x = _explain_and_mask(x, backbone, attention, fill)
    logits = backbone.forward(masked_x)
    # the loss itself is cheap, so it runs in 64-bit whatever the model dtype
    breakdown = total_loss(logits.astype(np.float64), labels, psi.astype(np.float64), weights)
    optimizer.zero_grad()
    backward(breakdown.total)
    for name, p in attention.named_parameters().items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient for {name}")
    optimizer.step(lr)
    return breakdown


def select_epoch(records: list, v=15) -> int:
    """Index of the record with the highest IC(v), then lowest AD(v), then the earliest."""
    if not records:
        raise ValueError("no epoch records to select from")
    return min(range(len(records)), key=lambda i: (-records[i].ic[v], records[i].ad[v], i))


def validate(attention: AttentionModule, backbone: Backbone, images: np.ndarray, config: TrainConfig,
             fill=None) -> MetricsReport:
    return evaluate(TameSource(attention), backbone, images, DEFAULT_THRESHOLDS,
                    batch_size=config.eval_batch_size, threads=config.threads, fill=fill)


def fit(
    train: ImageSet,
    val: ImageSet,
    backbone: Backbone,
    config: TrainConfig = TrainConfig(),
    on_epoch_end: Optional[Callable[[EpochRecord, AttentionModule], None]] = None,
) -> FitResult:
    """Train a fresh attention module and return the weights of the selected epoch."""
    if len(train) == 0 or len(val) == 0:
        raise ValueError("training and validation splits must be non-empty")
    if not backbone.frozen:
        raise ConfigError("the backbone must be frozen before training the attention module")
    bcfg = backbone.config
    attention = AttentionModule(bcfg.feature_channels(), bcfg.num_classes, config.flags, seed=config.seed,
                                dtype=backbone.dtype, tap_names=bcfg.tap_layers,
                                fusion_init_scale=config.fusion_init_scale)
    optimizer = SGD(attention.parameters(), momentum=config.momentum, weight_decay=config.weight_decay)
    x_train = train.normalized(backbone.dtype)
    x_val = val.normalized(backbone.dtype)
    fill = train.fill_value(config.mask_fill)
    steps = -(-len(train) // config.batch_size)
    schedule = OneCycleSchedule(config.epochs * steps, config.max_lr, config.schedule)
    rng = np.random.default_rng([config.seed, 2])
    records, states = [], []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train))
        sums = dict.fromkeys(("total", "ce", "area", "variation"), 0.0)
        for s in range(steps):
            idx = order[s * config.batch_size:(s + 1) * config.batch_size]
            lr = next(schedule)
            try:
                parts = train_step(x_train[idx], backbone, attention, optimizer, lr, config.weights, fill).to_floats()
            except NumericError as exc:
                raise TrainingAborted(f"attention training diverged at epoch {epoch}, step {s} (lr {lr:.3g}): {exc}",
                                      records, list(schedule.consumed)) from exc
            for k in sums:
                sums[k] += parts[k] * len(idx)
        loss = {k: v / len(train) for k, v in sums.items()}
        report = validate(attention, backbone, x_val, config, fill)
        record = EpochRecord(epoch, loss, dict(report.ad), dict(report.ic))
        records.append(record)
        states.append(attention.copy_state())
        logger.info("epoch %d: loss %.4f AD15 %.2f IC15 %.2f", epoch, loss["total"], record.ad[15], record.ic[15])
        if on_epoch_end is not None:
            on_epoch_end(record, attention)
    best = select_epoch(records)
    attention.load_state_dict(states[best])
    return FitResult(attention, best + 1, records, list(schedule.consumed), states[best])
