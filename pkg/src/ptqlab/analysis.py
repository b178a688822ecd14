"""Distribution comparison and evaluation metrics.

Quantization shifts the value distributions of weights and activations;
this module measures those shifts with the two-sample Kolmogorov-Smirnov
statistic and kernel density estimates of per-token losses, and reports
classification accuracy with a per-class breakdown.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .corpus import Dataset
from .models import (
    Hooks,
    IDENTITY_HOOKS,
    disc_logits_batch,
    gen_class_losses_batch,
    gen_token_losses_batch,
    iter_batches,
)
from .nn import pad_batch
from .quant import QuantizedModel

KDE_GRID_POINTS = 512
MAX_SITE_VALUES = 1_000_000
REPORT_SITES = ("embedding", "lstm_hidden", "linear")


@dataclass(frozen=True)
class KsResult:
    """Two-sample KS distance with the sizes that produced it."""

    statistic: float
    n_a: int
    n_b: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.statistic <= 1.0:
            raise ValueError(f"statistic {self.statistic} outside [0, 1]")
        if min(self.n_a, self.n_b) < 1:
            raise ValueError("sample sizes must be positive")


def ks_statistic(a, b) -> KsResult:
    """sup_x |F_a(x) - F_b(x)| over the two empirical CDFs.

    Both ECDFs are right-continuous step functions, so the supremum is
    attained at a pooled sample point evaluated from the right; a merged
    sorted sweep finds it in O(n log n).
    """
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample")
    pooled = np.concatenate([a, b])
    f_a = np.searchsorted(a, pooled, side="right") / a.size
    f_b = np.searchsorted(b, pooled, side="right") / b.size
    return KsResult(statistic=float(np.abs(f_a - f_b).max()),
                    n_a=a.size, n_b=b.size)


@dataclass(frozen=True)
class KdeCurve:
    """Density estimate on a fixed grid."""

    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    peak_location: float

    @property
    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid))


def kde(samples, bandwidth: float | None = None) -> KdeCurve:
    """Gaussian-kernel density on a 512-point grid.

    The default bandwidth is Silverman's rule 1.06 * sigma * n^(-1/5).
    A constant sample has no spread to estimate; it degrades to a narrow
    spike at the value, with a warning.
    """
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if samples.size < 2:
        raise ValueError("need at least 2 samples")
    if bandwidth is None:
        sigma = float(np.std(samples, ddof=1))
        bandwidth = 1.06 * sigma * samples.size ** (-1.0 / 5.0)
    if bandwidth <= 0:
        warnings.warn("constant sample: returning a spike at the value",
                      stacklevel=2)
        bandwidth = max(abs(float(samples[0])), 1.0) * 1e-3
    lo = samples.min() - 3.0 * bandwidth
    hi = samples.max() + 3.0 * bandwidth
    grid = np.linspace(lo, hi, KDE_GRID_POINTS)
    density = np.zeros_like(grid)
    norm = 1.0 / (np.sqrt(2.0 * np.pi) * bandwidth * samples.size)
    for start in range(0, samples.size, 10_000):
        chunk = samples[start:start + 10_000]
        z = (grid[:, None] - chunk[None, :]) / bandwidth
        density += norm * np.exp(-0.5 * z * z).sum(axis=1)
    return KdeCurve(grid=grid, density=density, bandwidth=float(bandwidth),
                    peak_location=float(grid[int(np.argmax(density))]))


@dataclass(frozen=True)
class Metrics:
    """Exact-match accuracy with a per-class breakdown.

    `classes` lists the label values present; `per_class` and
    `class_counts` align with it, so overall accuracy equals the
    count-weighted mean of per-class accuracies.
    """

    accuracy: float
    classes: np.ndarray
    per_class: np.ndarray
    class_counts: np.ndarray
    num_samples: int


def accuracy(predictions, labels) -> Metrics:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(
            f"length mismatch: {predictions.shape} vs {labels.shape}")
    if labels.size < 1:
        raise ValueError("need at least one sample")
    correct = predictions == labels
    classes = np.unique(labels)
    per_class = np.array([correct[labels == c].mean() for c in classes])
    counts = np.array([(labels == c).sum() for c in classes])
    return Metrics(accuracy=float(correct.mean()), classes=classes,
                   per_class=per_class, class_counts=counts,
                   num_samples=labels.size)


def weight_shift_report(layer_before: np.ndarray,
                        layer_after: np.ndarray) -> KsResult:
    """KS distance between the flattened values of a layer pre and post
    quantization."""
    if layer_before.shape != layer_after.shape:
        raise ValueError(
            f"shape mismatch: {layer_before.shape} vs {layer_after.shape}")
    return ks_statistic(layer_before.ravel(), layer_after.ravel())


class _SiteRecorder(Hooks):
    """Collects every value observed at one site, delegating transforms
    (and off-site observations) to an inner hook set."""

    def __init__(self, site: str, inner: Hooks = IDENTITY_HOOKS):
        self.site = site
        self.inner = inner
        self.chunks: list[np.ndarray] = []

    def transform(self, site: str, values: np.ndarray) -> np.ndarray:
        return self.inner.transform(site, values)

    def observe(self, site: str, values: np.ndarray, count: int = 1) -> None:
        self.inner.observe(site, values, count)
        if site == self.site:
            flat = np.asarray(values, dtype=np.float64).ravel()
            self.chunks.append(np.repeat(flat, count) if count != 1 else flat)

    def values(self, cap: int) -> np.ndarray:
        if not self.chunks:
            return np.empty(0)
        pooled = np.concatenate(self.chunks)
        if pooled.size > cap:
            stride = int(np.ceil(pooled.size / cap))
            pooled = pooled[::stride]
        return pooled


def _unwrap(model) -> tuple[object, Hooks]:
    if isinstance(model, QuantizedModel):
        return model.model, model.inference_hooks()
    return model, IDENTITY_HOOKS


def _site_values(model, data, site: str, pad_id: int, batch_size: int,
                 cap: int) -> np.ndarray:
    raw, inner = _unwrap(model)
    internal = {"embedding": "embedding_out", "lstm_hidden": "lstm_hidden",
                "linear": ("head_out" if raw.model_type == "disc"
                           else "decoder_out")}[site]
    recorder = _SiteRecorder(internal, inner)
    token_lists = data.token_lists() if isinstance(data, Dataset) \
        else [list(t) for t in data]
    if raw.model_type == "gen":
        token_lists = [t if len(t) >= 2 else t + [pad_id] for t in token_lists]
    for idx in iter_batches(len(token_lists), batch_size):
        ids, mask = pad_batch([token_lists[i] for i in idx], pad_id)
        if raw.model_type == "disc":
            disc_logits_batch(raw, ids, mask, recorder)
        else:
            gen_class_losses_batch(raw, ids, mask, recorder)
    return recorder.values(cap)


def activation_shift_report(model_a, model_b, probe, site: str,
                            probe_b=None, pad_id: int = 0,
                            batch_size: int = 64,
                            max_values: int = MAX_SITE_VALUES) -> KsResult:
    """KS distance between activation values at one site.

    Two comparison modes: two models on the same probe data
    (model_b given), or one model on two datasets (model_b=None and
    probe_b given). Values pooled per side are capped at `max_values`
    by deterministic stride subsampling.
    """
    if site not in REPORT_SITES:
        raise ValueError(f"unknown site {site!r}; choose from {REPORT_SITES}")
    if (model_b is None) == (probe_b is None):
        raise ValueError("provide exactly one of model_b or probe_b")
    vals_a = _site_values(model_a, probe, site, pad_id, batch_size, max_values)
    if model_b is not None:
        vals_b = _site_values(model_b, probe, site, pad_id, batch_size,
                              max_values)
    else:
        vals_b = _site_values(model_a, probe_b, site, pad_id, batch_size,
                              max_values)
    return ks_statistic(vals_a, vals_b)


@dataclass
class TokenLossSamples:
    """Per-token cross-entropy losses pooled over a dataset."""

    losses: np.ndarray
    num_skipped: int = 0
    num_sequences: int = 0

    def __len__(self) -> int:
        return self.losses.size


def token_loss_samples(model, data: Dataset, y_mode: bool = True,
                       pad_id: int = 0,
                       batch_size: int = 64) -> TokenLossSamples:
    """One next-token loss per predicted position per sequence.

    With y_mode the decoder is conditioned on each sample's true label;
    otherwise losses under all candidate labels are pooled. Sequences
    with fewer than 2 tokens cannot be scored and are skipped, with the
    skip count reported.
    """
    raw, hooks = _unwrap(model)
    if raw.model_type != "gen":
        raise ValueError("token losses are defined for generative models")
    token_lists = data.token_lists()
    labels = data.labels()
    keep = [i for i, t in enumerate(token_lists) if len(t) >= 2]
    skipped = len(token_lists) - len(keep)
    pooled: list[np.ndarray] = []
    for chunk_idx in iter_batches(len(keep), batch_size):
        idx = [keep[i] for i in chunk_idx]
        ids, mask = pad_batch([token_lists[i] for i in idx], pad_id)
        valid = mask[:, 1:] > 0
        if y_mode:
            per_tok = gen_token_losses_batch(raw, ids, mask, labels[idx],
                                             hooks)
            pooled.append(per_tok[valid])
        else:
            for y in range(raw.num_classes):
                y_arr = np.full(len(idx), y, dtype=np.int64)
                per_tok = gen_token_losses_batch(raw, ids, mask, y_arr, hooks)
                pooled.append(per_tok[valid])
    losses = np.concatenate(pooled) if pooled else np.empty(0)
    return TokenLossSamples(losses=np.asarray(losses, dtype=np.float64),
                            num_skipped=skipped, num_sequences=len(keep))
