"""Small VGG-style classifier with named feature taps.

Layer names follow ``block{b}.conv{j}`` (pre-activation), ``block{b}.relu{j}``,
``block{b}.pool``, then ``fc1``, ``fc1.relu`` (when a hidden head layer is
configured) and ``logits``.  By default the last feature map is reduced by a
global max-pool before the head, which makes the classifier insensitive to
where a shape sits in the image.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from tame.autodiff import Tensor, backward, conv2d, linear, log_softmax, maxpool2d, take_rows
from tame.data import ImageSet
from tame.errors import ConfigError, NumericError
from tame.optim import SGD, OneCycle, OneCycleSchedule

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BlockSpec:
    convs: int = 2
    width: int = 16
    pool: bool = True


DEFAULT_BLOCKS = (BlockSpec(2, 16), BlockSpec(2, 32), BlockSpec(2, 64))
HEAD_POOLS = ("flatten", "avg", "max")


def default_taps(blocks: Sequence[BlockSpec], point: str = "pool") -> tuple[str, ...]:
    """One tap per block: after its max-pool (``"pool"``) or after the ReLU feeding it (``"conv"``)."""
    if point not in ("pool", "conv"):
        raise ConfigError(f"tap point must be 'pool' or 'conv', got {point!r}")
    names = []
    for b, blk in enumerate(blocks, start=1):
        if point == "pool" and blk.pool:
            names.append(f"block{b}.pool")
        else:
            names.append(f"block{b}.relu{blk.convs}")
    return tuple(names)


@dataclass(frozen=True)
class BackboneConfig:
    input_channels: int = 3
    input_size: tuple = (64, 64)
    blocks: tuple = DEFAULT_BLOCKS
    head_width: int = 64
    num_classes: int = 3
    head_pool: str = "max"
    tap_layers: tuple = field(default_factory=lambda: default_taps(DEFAULT_BLOCKS))

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "blocks", tuple(b if isinstance(b, BlockSpec) else BlockSpec(*b) for b in self.blocks))
        object.__setattr__(self, "tap_layers", tuple(self.tap_layers))
        self.validate()

    def layer_names(self) -> list[str]:
        names = []
        for b, blk in enumerate(self.blocks, start=1):
            for j in range(1, blk.convs + 1):
                names += [f"block{b}.conv{j}", f"block{b}.relu{j}"]
            if blk.pool:
                names.append(f"block{b}.pool")
        if self.head_width:
            names += ["fc1", "fc1.relu"]
        names.append("logits")
        return names

    def layer_shapes(self) -> dict[str, tuple[int, int, int]]:
        """``C x H x W`` of every convolutional-stage activation."""
        h, w = self.input_size
        shapes = {}
        for b, blk in enumerate(self.blocks, start=1):
            for j in range(1, blk.convs + 1):
                shapes[f"block{b}.conv{j}"] = shapes[f"block{b}.relu{j}"] = (blk.width, h, w)
            if blk.pool:
                h, w = h // 2, w // 2
                shapes[f"block{b}.pool"] = (blk.width, h, w)
        return shapes

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if not self.blocks or any(b.convs < 1 or b.width < 1 for b in self.blocks):
            raise ConfigError("every block needs at least one conv and positive width")
        h, w = self.input_size
        for blk in self.blocks:
            if blk.pool:
                if h % 2 or w % 2:
                    raise ConfigError(f"input size {self.input_size} not divisible by the pooling stack")
                h, w = h // 2, w // 2
        if self.head_pool not in HEAD_POOLS:
            raise ConfigError(f"head_pool must be one of {HEAD_POOLS}")
        if self.head_pool == "max" and h != w:
            raise ConfigError("head_pool 'max' needs square final feature maps")
        if not self.tap_layers:
            raise ConfigError("tap_layers must not be empty")
        order = {n: i for i, n in enumerate(self.layer_names())}
        shapes = self.layer_shapes()
        for name in self.tap_layers:
            if name not in shapes:
                raise ConfigError(f"unknown tap layer {name!r}; choose from {sorted(shapes)}")
        idx = [order[n] for n in self.tap_layers]
        if idx != sorted(set(idx)):
            raise ConfigError("tap_layers must be distinct and ordered from shallow to deep")

    def feature_channels(self) -> tuple[int, ...]:
        shapes = self.layer_shapes()
        return tuple(shapes[n][0] for n in self.tap_layers)

    def to_dict(self) -> dict:
        return {
            "input_channels": self.input_channels,
            "input_size": list(self.input_size),
            "blocks": [[b.convs, b.width, b.pool] for b in self.blocks],
            "head_width": self.head_width,
            "num_classes": self.num_classes,
            "head_pool": self.head_pool,
            "tap_layers": list(self.tap_layers),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        d["blocks"] = tuple(BlockSpec(*b) for b in d.get("blocks", [[b.convs, b.width, b.pool] for b in DEFAULT_BLOCKS]))
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


class FeatureMapSet:
    """Ordered ``(layer_name, tensor)`` pairs tapped from one forward pass."""

    def __init__(self, entries: Sequence[tuple[str, Tensor]]):
        self.entries = list(entries)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    @property
    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.entries)

    def __getitem__(self, key):
        if isinstance(key, str):
            return dict(self.entries)[key]
        return self.entries[key][1]

    def last(self, k: int) -> "FeatureMapSet":
        return FeatureMapSet(self.entries[len(self.entries) - k:])


class Backbone:
    """The classifier ``f``.  Parameters are float32 unless another dtype is given."""

    def __init__(self, config: BackboneConfig, seed: int = 0, dtype=np.float32, params: Optional[dict] = None):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        c = config.input_channels
        h, w = config.input_size
        for b, blk in enumerate(config.blocks, start=1):
            for j in range(1, blk.convs + 1):
                fan_in = c * 9
                self._add(f"block{b}.conv{j}.weight", rng.normal(0, np.sqrt(2.0 / fan_in), (blk.width, c, 3, 3)))
                self._add(f"block{b}.conv{j}.bias", np.zeros(blk.width))
                c = blk.width
            if blk.pool:
                h, w = h // 2, w // 2
        flat = c * h * w if config.head_pool == "flatten" else c
        if config.head_width:
            self._add("fc1.weight", rng.normal(0, np.sqrt(2.0 / flat), (config.head_width, flat)))
            self._add("fc1.bias", np.zeros(config.head_width))
            flat = config.head_width
        self._add("logits.weight", rng.normal(0, np.sqrt(1.0 / flat), (config.num_classes, flat)))
        self._add("logits.bias", np.zeros(config.num_classes))
        if params is not None:
            self.load_state_dict(params)
        self.frozen = False

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value.astype(self.dtype), requires_grad=True)

    # ---------------------------------------------------------------- state
    def freeze(self) -> "Backbone":
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise ConfigError(f"parameter names do not match the configuration: {sorted(missing)}")
        for k, v in state.items():
            if self.params[k].shape != np.shape(v):
                raise ConfigError(f"parameter {k}: shape {np.shape(v)} != expected {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.dtype)

    def normalise_activations(self, images: np.ndarray, batch_size: int = 64) -> list[float]:
        """Rescale every conv layer to unit RMS activation on ``images`` without changing the logits.

        ReLU and max-pool commute with positive scaling, so dividing conv layer ``l``
        by ``s_l`` (its bias by the running product) scales every later
        convolutional activation by a constant; the first dense layer absorbs the
        product.  The classifier is unchanged up to float rounding while the
        feature maps handed to an attention module become O(1).  Returns the
        per-layer factors.
        """
        scales, total = [], 1.0
        for b, blk in enumerate(self.config.blocks, 1):
            for j in range(1, blk.convs + 1):
                name = f"block{b}.relu{j}"
                w, bias = self.params[f"block{b}.conv{j}.weight"], self.params[f"block{b}.conv{j}.bias"]
                # the input already carries 1/total from the layers before
                bias.data = (bias.data.astype(np.float64) / total).astype(self.dtype)
                sq = 0.0
                for i in range(0, len(images), batch_size):
                    a = self._run(images[i:i + batch_size], (name,))[1][name].data.astype(np.float64)
                    sq += float((a ** 2).sum()) / a[0].size
                s = float(np.sqrt(sq / len(images)))
                if not np.isfinite(s) or s <= 0:
                    s = 1.0
                total *= s
                w.data = (w.data.astype(np.float64) / s).astype(self.dtype)
                bias.data = (bias.data.astype(np.float64) / s).astype(self.dtype)
                scales.append(s)
        head = self.params["fc1.weight" if self.config.head_width else "logits.weight"]
        head.data = (head.data.astype(np.float64) * total).astype(self.dtype)
        return scales

    # -------------------------------------------------------------- forward
    def _run(self, x, taps: Sequence[str]):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        single = x.ndim == 3
        if single:
            x = x.reshape(1, *x.shape)
        expected = (self.config.input_channels, *self.config.input_size)
        if tuple(x.shape[1:]) != expected:
            raise ConfigError(f"input shape {tuple(x.shape[1:])} does not match backbone input {expected}")
        unknown = set(taps) - set(self.config.layer_names())
        if unknown:
            raise ConfigError(f"unknown tap layer(s) {sorted(unknown)}")
        want = set(taps)
        found = {}
        p = self.params
        for b, blk in enumerate(self.config.blocks, start=1):
            for j in range(1, blk.convs + 1):
                x = conv2d(x, p[f"block{b}.conv{j}.weight"], p[f"block{b}.conv{j}.bias"], padding=1)
                if f"block{b}.conv{j}" in want:
                    found[f"block{b}.conv{j}"] = x
                x = x.relu()
                if f"block{b}.relu{j}" in want:
                    found[f"block{b}.relu{j}"] = x
            if blk.pool:
                x = maxpool2d(x, 2)
                if f"block{b}.pool" in want:
                    found[f"block{b}.pool"] = x
        if self.config.head_pool == "avg":
            x = x.mean(axis=(2, 3))
        elif self.config.head_pool == "max":
            x = maxpool2d(x, x.shape[2])
        x = x.reshape(x.shape[0], -1)
        if self.config.head_width:
            x = linear(x, p["fc1.weight"], p["fc1.bias"])
            if "fc1" in want:
                found["fc1"] = x
            x = x.relu()
            if "fc1.relu" in want:
                found["fc1.relu"] = x
        logits = linear(x, p["logits.weight"], p["logits.bias"])
        entries = [(n, found[n] if n != "logits" else logits) for n in taps]
        if single:
            logits = logits.reshape(-1)
            entries = [(n, t.reshape(*t.shape[1:])) for n, t in entries]
        return logits, FeatureMapSet(entries)

    def forward(self, x) -> Tensor:
        return self._run(x, ())[0]

    __call__ = forward

    def forward_with_taps(self, x, taps: Optional[Sequence[str]] = None) -> tuple[Tensor, FeatureMapSet]:
        return self._run(x, self.config.tap_layers if taps is None else taps)

    def predict_proba(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        out = []
        for i in range(0, len(images), batch_size):
            z = self.forward(images[i:i + batch_size]).data
            z = z - z.max(axis=1, keepdims=True)
            e = np.exp(z)
            out.append(e / e.sum(axis=1, keepdims=True))
        return np.concatenate(out) if out else np.zeros((0, self.config.num_classes), self.dtype)


def model_truth(logits) -> np.ndarray | int:
    """Arg-max class; the lowest index wins ties.  Accepts ``(Classes,)`` or ``(N, Classes)``."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if z.ndim == 1:
        return int(np.argmax(z))
    return np.argmax(z, axis=1)


def accuracy(model: Backbone, images: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> float:
    if len(labels) == 0:
        return float("nan")
    pred = model.predict_proba(images, batch_size).argmax(axis=1)
    return float((pred == labels).mean())


# ---------------------------------------------------------------- training
@dataclass(frozen=True)
class BackboneTrainSettings:
    epochs: int = 10
    batch_size: int = 32
    max_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    shift: int = 4
    clip_norm: float = 1.0
    rescale_samples: int = 256
    seed: int = 0


@dataclass
class BackboneReport:
    val_accuracy: float
    initial_val_accuracy: float
    epoch_losses: list = field(default_factory=list)
    epoch_train_accuracy: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "val_accuracy": self.val_accuracy,
            "initial_val_accuracy": self.initial_val_accuracy,
            "epoch_losses": self.epoch_losses,
            "epoch_train_accuracy": self.epoch_train_accuracy,
        }


def random_shift(batch: np.ndarray, max_shift: int, rng: np.random.Generator) -> np.ndarray:
    """Translate each image by up to ``max_shift`` pixels, filling with zeros (the channel mean)."""
    if max_shift <= 0:
        return batch
    n, c, h, w = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (max_shift, max_shift), (max_shift, max_shift)))
    offs = rng.integers(0, 2 * max_shift + 1, size=(n, 2))
    return np.stack([padded[i, :, dy:dy + h, dx:dx + w] for i, (dy, dx) in enumerate(offs)])


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the old norm."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
    if norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


def train_backbone(
    config: BackboneConfig,
    train: ImageSet,
    val: ImageSet,
    settings: BackboneTrainSettings = BackboneTrainSettings(),
) -> tuple[Backbone, BackboneReport]:
    """Supervised training with cross-entropy, SGD+momentum and a one-cycle schedule.

    The returned model is frozen.
    """
    if len(np.unique(train.labels)) < config.num_classes:
        raise ConfigError(f"training split has fewer than {config.num_classes} distinct labels")
    model = Backbone(config, seed=settings.seed)
    rng = np.random.default_rng([settings.seed, 1])
    x_train, x_val = train.normalized(), val.normalized()
    report = BackboneReport(val_accuracy=float("nan"), initial_val_accuracy=accuracy(model, x_val, val.labels))
    steps = -(-len(train) // settings.batch_size)
    schedule = OneCycleSchedule(max(settings.epochs * steps, 1), settings.max_lr, OneCycle())
    opt = SGD(model.params.values(), momentum=settings.momentum, weight_decay=settings.weight_decay)
    for epoch in range(settings.epochs):
        order = rng.permutation(len(train))
        total, correct = 0.0, 0
        for s in range(steps):
            idx = order[s * settings.batch_size:(s + 1) * settings.batch_size]
            xb = random_shift(x_train[idx], settings.shift, rng)
            yb = train.labels[idx]
            opt.zero_grad()
            try:
                logits = model.forward(Tensor(xb))
                loss = -take_rows(log_softmax(logits), yb).mean()
                backward(loss)
            except NumericError as exc:
                raise NumericError(f"backbone training diverged at epoch {epoch + 1}, step {s}: {exc}") from exc
            if settings.clip_norm:
                clip_grad_norm(opt.params, settings.clip_norm)
            opt.step(next(schedule))
            total += loss.item() * len(idx)
            correct += int((model_truth(logits) == yb).sum())
        report.epoch_losses.append(total / len(train))
        report.epoch_train_accuracy.append(correct / len(train))
        logger.info("backbone epoch %d: loss %.4f train acc %.3f", epoch + 1, total / len(train), correct / len(train))
    if settings.rescale_samples:
        model.normalise_activations(x_train[:settings.rescale_samples])
    report.val_accuracy = accuracy(model, x_val, val.labels)
    return model.freeze(), report
