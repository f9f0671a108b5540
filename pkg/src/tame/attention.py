"""Multi-branch attention module that turns tapped feature maps into explanation maps.

Each feature branch maps one tapped layer ``C_i x H_i x W_i`` to an attention
map ``C_i x H_e x W_e`` (``H_e``/``W_e`` are the largest tapped spatial sizes)::

    act(BN(conv1x1(x)) + x)  ->  bilinear upsample

The fusion branch concatenates all attention maps along channels and projects
them to one channel per class with another 1x1 convolution.  In training mode
the result is squashed with a sigmoid; at inference each class slice is
min-max rescaled instead.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Union

import numpy as np

from tame.autodiff import Tensor, batchnorm2d, bilinear_upsample, concat, conv2d, take_rows
from tame.errors import ConfigError, ShapeError

MODES = ("train", "inference")
ACTIVATIONS = ("relu", "sigmoid")


@dataclass(frozen=True)
class VariantFlags:
    """Architecture switches for the ablation variants; defaults are the full architecture."""

    skip_connection: bool = True
    batch_norm: bool = True
    branch_activation: str = "relu"
    layer_subset: int = 3

    def __post_init__(self):
        if self.branch_activation not in ACTIVATIONS:
            raise ConfigError(f"branch_activation must be one of {ACTIVATIONS}")
        if self.layer_subset < 1:
            raise ConfigError("layer_subset must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BranchParams:
    weight: Tensor
    bias: Tensor
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray

    @property
    def channels(self) -> int:
        return self.weight.shape[0]


@dataclass
class FusionParams:
    weight: Tensor
    bias: Tensor


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def feature_branch(
    x: Tensor, params: BranchParams, flags: VariantFlags, out_size: tuple[int, int], training: bool = True
) -> Tensor:
    """One feature branch on an ``N x C_i x H_i x W_i`` input."""
    if x.ndim != 4 or x.shape[1] != params.channels:
        raise ShapeError(f"feature branch expects N x {params.channels} x H x W, got {x.shape}")
    h = conv2d(x, params.weight, params.bias)
    if flags.batch_norm:
        h = batchnorm2d(h, params.gamma, params.beta, params.running_mean, params.running_var, training)
    if flags.skip_connection:
        h = h + x
    h = h.relu() if flags.branch_activation == "relu" else h.sigmoid()
    return bilinear_upsample(h, *out_size)


def fuse(maps: Sequence[Tensor], fusion: FusionParams, mode: str = "train") -> Tensor:
    """Concatenate attention maps in order and project to ``N x Classes x H_e x W_e``.

    Train mode applies the sigmoid; inference mode returns the raw projection
    to be min-max rescaled per class slice.
    """
    _check_mode(mode)
    spatial = {tuple(m.shape[2:]) for m in maps}
    if len(spatial) != 1:
        raise ShapeError(f"attention maps disagree on spatial size (axes 2,3): {sorted(spatial)}")
    stacked = concat(maps, axis=1) if len(maps) > 1 else maps[0]
    if stacked.shape[1] != fusion.weight.shape[1]:
        raise ShapeError(f"fusion expects {fusion.weight.shape[1]} channels on axis 1, got {stacked.shape[1]}")
    logits = conv2d(stacked, fusion.weight, fusion.bias)
    return logits.sigmoid() if mode == "train" else logits


def rescale_minmax(values: Union[Tensor, np.ndarray]) -> np.ndarray:
    """Min-max rescale each 2-D slice (last two axes) to [0, 1]; constant slices become 0."""
    x = values.data if isinstance(values, Tensor) else np.asarray(values)
    lo = x.min(axis=(-2, -1), keepdims=True)
    hi = x.max(axis=(-2, -1), keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1)
    return np.where(span > 0, (x - lo) / safe, 0).astype(x.dtype)


class AttentionModule:
    """Trainable attention module over the taps of a frozen backbone.

    Args:
        channels: Channel count of every tapped layer, shallow to deep.
        num_classes: Output slices of the explanation map.
        flags: Architecture variant.  ``layer_subset`` keeps the deepest taps.
        tap_names: Optional names of the tapped layers (stored with the weights).
        fusion_init_scale: Factor on the fusion weight init; the fusion bias starts at 0.
            Backbone taps are large and object-aligned, so a full-scale fusion init
            starts some class slices already saturated and their gradients vanish.
    """

    def __init__(
        self,
        channels: Sequence[int],
        num_classes: int,
        flags: VariantFlags = VariantFlags(),
        seed: int = 0,
        dtype=np.float32,
        tap_names: Optional[Sequence[str]] = None,
        fusion_init_scale: float = 0.1,
    ):
        if fusion_init_scale <= 0:
            raise ConfigError("fusion_init_scale must be positive")
        if flags.layer_subset > len(channels):
            raise ConfigError(f"layer_subset {flags.layer_subset} exceeds the {len(channels)} available taps")
        self.all_channels = tuple(int(c) for c in channels)
        self.tap_names = tuple(tap_names) if tap_names is not None else tuple(f"tap{i}" for i in range(len(channels)))
        if len(self.tap_names) != len(self.all_channels):
            raise ConfigError("tap_names and channels differ in length")
        self.num_classes = int(num_classes)
        self.flags = flags
        self.dtype = np.dtype(dtype)
        self.channels = self.all_channels[len(self.all_channels) - flags.layer_subset:]
        rng = np.random.default_rng(seed)

        def uniform(fan_in, shape, scale=1.0):
            bound = scale / np.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, shape).astype(self.dtype), requires_grad=True)

        self.branches = [
            BranchParams(
                weight=uniform(c, (c, c, 1, 1)),
                bias=uniform(c, (c,)),
                gamma=Tensor(np.ones(c, self.dtype), requires_grad=True),
                beta=Tensor(np.zeros(c, self.dtype), requires_grad=True),
                running_mean=np.zeros(c, self.dtype),
                running_var=np.ones(c, self.dtype),
            )
            for c in self.channels
        ]
        total = sum(self.channels)
        self.fusion = FusionParams(uniform(total, (num_classes, total, 1, 1), fusion_init_scale),
                                   Tensor(np.zeros(num_classes, self.dtype), requires_grad=True))

    @property
    def active_taps(self) -> tuple[str, ...]:
        return self.tap_names[len(self.tap_names) - len(self.channels):]

    # ---------------------------------------------------------------- params
    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, b in enumerate(self.branches):
            out[f"branch{i}.conv.weight"] = b.weight
            out[f"branch{i}.conv.bias"] = b.bias
            if self.flags.batch_norm:
                out[f"branch{i}.bn.gamma"] = b.gamma
                out[f"branch{i}.bn.beta"] = b.beta
        out["fusion.conv.weight"] = self.fusion.weight
        out["fusion.conv.bias"] = self.fusion.bias
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data for k, v in self.named_parameters().items()}
        if self.flags.batch_norm:
            for i, b in enumerate(self.branches):
                state[f"branch{i}.bn.running_mean"] = b.running_mean
                state[f"branch{i}.bn.running_var"] = b.running_var
        return state

    def load_state_dict(self, state: dict) -> None:
        expected = self.state_dict()
        mismatch = set(expected) ^ set(state)
        if mismatch:
            raise ConfigError(f"attention parameter names do not match the variant: {sorted(mismatch)}")
        for k, v in state.items():
            if expected[k].shape != np.shape(v):
                raise ConfigError(f"attention parameter {k}: shape {np.shape(v)} != {expected[k].shape}")
            expected[k][...] = np.asarray(v, dtype=self.dtype)

    def copy_state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_dict().items()}

    # --------------------------------------------------------------- forward
    def _select(self, features) -> list[Tensor]:
        tensors = list(features.tensors) if hasattr(features, "tensors") else list(features)
        if len(tensors) == len(self.all_channels):
            tensors = tensors[len(tensors) - len(self.channels):]
        elif len(tensors) != len(self.channels):
            raise ShapeError(f"expected {len(self.all_channels)} or {len(self.channels)} feature maps, got {len(tensors)}")
        return [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]

    def explanation_map(self, features, mode: str = "train") -> Tensor:
        """Full explanation map ``N x Classes x H_e x W_e`` (or ``Classes x H_e x W_e`` unbatched)."""
        _check_mode(mode)
        tensors = self._select(features)
        single = tensors[0].ndim == 3
        if single:
            tensors = [t.reshape(1, *t.shape) for t in tensors]
        out_size = (max(t.shape[2] for t in tensors), max(t.shape[3] for t in tensors))
        training = mode == "train"
        branches = self.branches if training else [self._frozen_branch(b) for b in self.branches]
        fusion = self.fusion if training else FusionParams(self.fusion.weight.detach(), self.fusion.bias.detach())
        maps = [feature_branch(t, b, self.flags, out_size, training) for t, b in zip(tensors, branches)]
        e = fuse(maps, fusion, mode)
        if not training:
            e = Tensor(rescale_minmax(e))
        return e.reshape(*e.shape[1:]) if single else e

    @staticmethod
    def _frozen_branch(b: BranchParams) -> BranchParams:
        return BranchParams(b.weight.detach(), b.bias.detach(), b.gamma.detach(), b.beta.detach(),
                            b.running_mean, b.running_var)

    def explain(self, features, class_id, mode: str = "train") -> Tensor:
        """Slice of the explanation map for ``class_id`` (an int or one index per sample)."""
        e = self.explanation_map(features, mode)
        single = e.ndim == 3
        if single:
            e = e.reshape(1, *e.shape)
        idx = np.broadcast_to(np.asarray(class_id, dtype=np.int64), (e.shape[0],))
        if np.any(idx < 0) or np.any(idx >= self.num_classes):
            raise ValueError(f"class index out of range [0, {self.num_classes})")
        psi = take_rows(e, idx)
        return psi.reshape(*psi.shape[1:]) if single else psi

    __call__ = explanation_map
