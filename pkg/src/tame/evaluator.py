"""Average Drop / Increase in Confidence under top-v% saliency masking.

For every image the clean pass gives the model-truth class and its softmax
confidence.  The saliency map is upscaled to image size, thresholded to its
top ``v`` percent of pixels (original values kept) and multiplied into the
image (removed pixels blend towards a fill colour).  The masked pass is
scored on the same class.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from tame.attention import AttentionModule
from tame.autodiff import Tensor, bilinear_upsample, masked, softmax
from tame.errors import ConfigError, ShapeError

DEFAULT_THRESHOLDS = (100, 50, 15)
BASELINE_KINDS = ("random", "center", "constant", "ones")


def threshold_topv(psi: np.ndarray, v: float) -> np.ndarray:
    """Keep the ``k = max(1, round(v/100 * H*W))`` largest pixels of each ``H x W`` slice.

    Kept pixels retain their values; ties at the cut go to the earlier row-major index.
    """
    if not 0 < v <= 100:
        raise ValueError(f"threshold must lie in (0, 100], got {v}")
    psi = np.asarray(psi)
    h, w = psi.shape[-2:]
    k = max(1, int(round(v / 100.0 * h * w)))
    flat = psi.reshape(-1, h * w)
    order = np.argsort(-flat, axis=1, kind="stable")[:, :k]
    keep = np.zeros(flat.shape, dtype=bool)
    np.put_along_axis(keep, order, True, axis=1)
    return np.where(keep, flat, 0).astype(psi.dtype).reshape(psi.shape)


def _check_pair(clean, masked):
    clean = np.asarray(clean, dtype=np.float64)
    masked = np.asarray(masked, dtype=np.float64)
    if clean.shape != masked.shape or clean.ndim != 1:
        raise ShapeError(f"confidence lists differ: {clean.shape} vs {masked.shape}")
    if clean.size == 0:
        raise ValueError("empty evaluation set")
    return clean, masked


def average_drop(clean_conf, masked_conf) -> float:
    """``100/N * sum(max(0, clean - masked) / clean)``."""
    clean, masked = _check_pair(clean_conf, masked_conf)
    if np.any(clean <= 0):
        raise ValueError("clean confidence must be positive to normalise the drop")
    return float(100.0 * np.sum(np.maximum(0.0, clean - masked) / clean) / clean.size)


def increase_confidence(clean_conf, masked_conf) -> float:
    """Percentage of samples whose masked confidence is strictly higher."""
    clean, masked = _check_pair(clean_conf, masked_conf)
    return float(100.0 * np.count_nonzero(masked > clean) / clean.size)


# ---------------------------------------------------------------- sources
class SaliencySource:
    """Produces one saliency map per image.

    ``__call__`` gets the normalised image batch, the model-truth classes, the
    backbone taps of the clean pass and the global image indices of the batch.
    """

    name = "source"

    def __call__(self, images: np.ndarray, classes: np.ndarray, features, indices: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class TameSource(SaliencySource):
    """Inference-mode explanations of a trained attention module."""

    name = "tame"

    def __init__(self, attention: AttentionModule):
        self.attention = attention

    def __call__(self, images, classes, features, indices):
        return self.attention.explain(features, classes, mode="inference").data


def baseline_saliency(kind: str, dims: tuple[int, int], seed: int = 0) -> np.ndarray:
    """Reference maps: i.i.d. uniform, a radial ramp peaking at the centre, all 0.5 or all ones."""
    h, w = dims
    if h < 1 or w < 1:
        raise ValueError(f"invalid dims {dims}")
    if kind == "random":
        return np.random.default_rng(seed).uniform(0.0, 1.0, (h, w))
    if kind == "center":
        yy, xx = np.mgrid[0:h, 0:w]
        r = np.hypot(yy - h // 2, xx - w // 2)
        return 1.0 - r / (r.max() + 1.0)
    if kind == "constant":
        return np.full((h, w), 0.5)
    if kind == "ones":
        return np.ones((h, w))
    raise ValueError(f"unknown baseline kind {kind!r}; choose from {BASELINE_KINDS}")


class BaselineSource(SaliencySource):
    """Baseline maps; random maps are seeded per image index so batching never changes them."""

    def __init__(self, kind: str, dims: Optional[tuple[int, int]] = None, seed: int = 0):
        if kind not in BASELINE_KINDS:
            raise ValueError(f"unknown baseline kind {kind!r}; choose from {BASELINE_KINDS}")
        self.kind = kind
        self.dims = dims
        self.seed = seed
        self.name = kind

    def __call__(self, images, classes, features, indices):
        dims = self.dims or images.shape[2:]
        return np.stack([baseline_saliency(self.kind, dims, seed=hash_seed(self.seed, i)) for i in indices])


def hash_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, int(index)])


# ----------------------------------------------------------------- report
@dataclass
class MetricsReport:
    source: str
    count: int
    ad: dict = field(default_factory=dict)
    ic: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def thresholds(self) -> list:
        return list(self.ad)

    def rows(self) -> list[tuple]:
        return [(self.source, v, self.ad[v], self.ic[v]) for v in self.ad]

    def to_dict(self) -> dict:
        return {"source": self.source, "count": self.count, "ad": self.ad, "ic": self.ic, "provenance": self.provenance}


def metrics_csv(reports: Sequence[MetricsReport], provenance: Optional[dict] = None) -> str:
    """CSV text with one ``source,threshold,AD,IC`` row per source and threshold."""
    buf = io.StringIO()
    for k, value in sorted((provenance or {}).items()):
        buf.write(f"# {k}={value}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["source", "threshold", "AD", "IC"])
    for rep in reports:
        for source, v, ad, ic in rep.rows():
            writer.writerow([source, _fmt_threshold(v), repr(ad), repr(ic)])
    return buf.getvalue()


def metrics_table(reports: Sequence[MetricsReport]) -> str:
    lines = [f"{'source':<10} {'v%':>5} {'AD':>8} {'IC':>8}"]
    for rep in reports:
        for source, v, ad, ic in rep.rows():
            lines.append(f"{source:<10} {_fmt_threshold(v):>5} {ad:8.2f} {ic:8.2f}")
    return "\n".join(lines)


def _fmt_threshold(v) -> str:
    return str(int(v)) if float(v).is_integer() else str(v)


def report_from_confidences(source: str, clean, masked_by_threshold: dict, provenance: Optional[dict] = None) -> MetricsReport:
    report = MetricsReport(source, len(clean), provenance=dict(provenance or {}))
    for v, masked in masked_by_threshold.items():
        report.ad[v] = average_drop(clean, masked)
        report.ic[v] = increase_confidence(clean, masked)
    return report


# --------------------------------------------------------------- harness
def _probabilities(logits: Tensor) -> np.ndarray:
    return softmax(logits).data.astype(np.float64)


def _score_chunk(source, backbone, images, indices, thresholds, fill):
    x = Tensor(images)
    logits, features = backbone.forward_with_taps(x)
    probs = _probabilities(logits)
    classes = probs.argmax(axis=1)
    rows = np.arange(len(classes))
    clean = probs[rows, classes]
    psi = np.asarray(source(images, classes, features, indices), dtype=images.dtype)
    if psi.ndim != 3 or psi.shape[0] != len(images):
        raise ShapeError(f"saliency source returned {psi.shape}, expected N x h x w")
    h, w = images.shape[2:]
    if psi.shape[1:] != (h, w):
        psi = bilinear_upsample(Tensor(psi[:, None]), h, w).data[:, 0]
    scores = {}
    for v in thresholds:
        mask = threshold_topv(psi, v)
        out = backbone.forward(masked(Tensor(images), mask[:, None], fill))
        scores[v] = _probabilities(out)[rows, classes]
    return clean, scores


def evaluate(
    source: SaliencySource,
    backbone,
    images: np.ndarray,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    batch_size: int = 50,
    threads: int = 1,
    num_classes: Optional[int] = None,
    provenance: Optional[dict] = None,
    fill=None,
) -> MetricsReport:
    """AD/IC of ``source`` over normalised ``images`` (``N x C x H x W``).

    Masked-out pixels blend towards the normalised colour ``fill`` (per channel,
    default 0, i.e. the dataset mean).

    Work is split into fixed chunks of ``batch_size`` images regardless of
    ``threads`` and results are combined in index order, so the report does not
    depend on the thread count.
    """
    classes_out = backbone.config.num_classes
    if num_classes is not None and num_classes != classes_out:
        raise ConfigError(f"dataset has {num_classes} classes but the backbone predicts {classes_out}")
    attention = getattr(source, "attention", None)
    if attention is not None and attention.num_classes != classes_out:
        raise ConfigError(f"attention module has {attention.num_classes} classes, backbone {classes_out}")
    if len(images) == 0:
        raise ValueError("empty evaluation set")
    starts = range(0, len(images), batch_size)

    def work(s):
        idx = np.arange(s, min(s + batch_size, len(images)))
        return _score_chunk(source, backbone, images[idx], idx, thresholds, fill)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(s) for s in starts]
    clean = np.concatenate([c for c, _ in parts])
    masked = {v: np.concatenate([m[v] for _, m in parts]) for v in thresholds}
    return report_from_confidences(source.name, clean, masked, provenance)
