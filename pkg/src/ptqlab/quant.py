"""Post-training quantization engine.

Weights are fake-quantized per tensor with min/max symmetric scales;
activations get per-site scales from a two-pass observer calibration
(pass 1 min/max, pass 2 fixed-edge histogram, percentile clipping).
Quantized inference reuses the model forwards with a hook that fake-
quantizes every activation site on the fly; gate internals and biases stay
full precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import Dataset
from .models import (
    DiscModel,
    GenModel,
    Hooks,
    _gen_safe_tokens,
    disc_logits_batch,
    gen_class_losses_batch,
    gen_token_losses_batch,
    iter_batches,
    predict_batch,
)
from .nn import pad_batch

HISTOGRAM_BINS = 2048


class CalibrationError(RuntimeError):
    """An activation site is missing statistics or quantization params."""


@dataclass(frozen=True)
class QuantSpec:
    """How to quantize: bitwidth, signedness, symmetry, and how activation
    ranges are reduced to a scale (minmax or percentile clipping)."""

    bitwidth: int = 8
    signed: bool = True
    symmetric: bool = True
    scale_method: str = "percentile"
    percentile: float = 99.99

    def __post_init__(self) -> None:
        if not 2 <= self.bitwidth <= 8:
            raise ValueError(f"bitwidth {self.bitwidth} outside [2, 8]")
        if self.scale_method not in ("minmax", "percentile"):
            raise ValueError(f"unknown scale_method {self.scale_method!r}")
        if not 50.0 < self.percentile < 100.0:
            raise ValueError("percentile must be in (50, 100)")


@dataclass(frozen=True)
class QuantParams:
    """Affine map between reals and integer codes: code = round(v/scale) + zero."""

    scale: float
    zero_point: int
    qmin: int
    qmax: int
    bitwidth: int

    def __post_init__(self) -> None:
        if self.qmin >= self.qmax:
            raise ValueError("qmin must be < qmax")
        if self.scale <= 0:
            raise ValueError("scale must be positive")


def quant_range(spec: QuantSpec) -> tuple[int, int]:
    """Integer code range: signed uses the symmetric +-(2^(b-1)-1) span,
    unsigned the full [0, 2^b - 1]."""
    if spec.bitwidth < 2:
        raise ValueError("bitwidth must be >= 2")
    if spec.signed:
        top = 2 ** (spec.bitwidth - 1) - 1
        return -top, top
    return 0, 2 ** spec.bitwidth - 1


def _params_from_range(vmin: float, vmax: float, spec: QuantSpec) -> QuantParams:
    qmin, qmax = quant_range(spec)
    if spec.symmetric:
        amax = max(abs(vmin), abs(vmax))
        scale = amax / qmax if amax > 0 else 1.0
        zero = 0
    else:
        spread = vmax - vmin
        scale = spread / (qmax - qmin) if spread > 0 else 1.0
        zero = int(round(-vmin / scale))
    return QuantParams(scale=float(scale), zero_point=zero, qmin=qmin,
                       qmax=qmax, bitwidth=spec.bitwidth)


def compute_scale_minmax(values: np.ndarray, spec: QuantSpec) -> QuantParams:
    """Scale/zero-point from the full observed range of a tensor."""
    values = np.asarray(values)
    if values.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    if not np.all(np.isfinite(values)):
        raise ValueError("non-finite values in tensor")
    return _params_from_range(float(values.min()), float(values.max()), spec)


class ActivationObserver:
    """Two-pass range statistics for one activation site.

    Pass 1 accumulates min/max; `begin_histogram` then fixes 2048 bin
    edges over that range and pass 2 fills counts, so percentiles can be
    read by linear interpolation with bounded memory. `count` weights a
    batch of rows that would appear `count` times if the consuming tensor
    were materialized.
    """

    def __init__(self, site: str):
        self.site = site
        self.vmin = math.inf
        self.vmax = -math.inf
        self.n_seen = 0
        self.counts: np.ndarray | None = None
        self._edges: tuple[float, float] | None = None

    def update(self, values: np.ndarray, count: int = 1) -> None:
        values = np.asarray(values)
        if values.size == 0:
            return
        if self.counts is None:
            self.vmin = min(self.vmin, float(values.min()))
            self.vmax = max(self.vmax, float(values.max()))
            self.n_seen += values.size * count
        else:
            lo, hi = self._edges
            hist, _ = np.histogram(values, bins=HISTOGRAM_BINS, range=(lo, hi))
            self.counts += hist * count

    @property
    def fed(self) -> bool:
        return self.n_seen > 0

    def begin_histogram(self) -> None:
        if not self.fed:
            raise CalibrationError(f"site {self.site!r} observed no values")
        lo, hi = self.vmin, self.vmax
        if hi <= lo:
            hi = lo + 1.0  # degenerate constant stream; percentile short-circuits
        self._edges = (lo, hi)
        self.counts = np.zeros(HISTOGRAM_BINS, dtype=np.int64)

    def percentile(self, q: float) -> float:
        if not self.fed:
            raise CalibrationError(f"site {self.site!r} observed no values")
        if self.vmax <= self.vmin:
            return self.vmin
        if self.counts is None or self.counts.sum() == 0:
            raise CalibrationError(
                f"site {self.site!r} has no histogram; run the second pass")
        lo, hi = self._edges
        width = (hi - lo) / HISTOGRAM_BINS
        cum = np.cumsum(self.counts)
        total = cum[-1]
        target = q / 100.0 * total
        idx = int(np.searchsorted(cum, target))
        if idx >= HISTOGRAM_BINS:
            return hi
        prev = cum[idx - 1] if idx > 0 else 0
        frac = (target - prev) / self.counts[idx] if self.counts[idx] else 0.0
        return lo + (idx + frac) * width

    def percentile_range(self, p: float) -> tuple[float, float]:
        return self.percentile(100.0 - p), self.percentile(p)

    def minmax_range(self) -> tuple[float, float]:
        if not self.fed:
            raise CalibrationError(f"site {self.site!r} observed no values")
        return self.vmin, self.vmax


def compute_scale_percentile(observer: ActivationObserver,
                             spec: QuantSpec) -> QuantParams:
    """Scale/zero-point from percentile-clipped observer statistics."""
    lo, hi = observer.percentile_range(spec.percentile)
    return _params_from_range(lo, hi, spec)


def fake_quantize(values: np.ndarray, params: QuantParams) -> np.ndarray:
    """Round-trip through the integer grid: out = (clip(round(v/scale + z),
    qmin, qmax) - z) * scale. Rounding is numpy's half-to-even."""
    values = np.asarray(values)
    codes = np.clip(np.round(values / params.scale + params.zero_point),
                    params.qmin, params.qmax)
    return (codes - params.zero_point) * params.scale


def quantizable_tensor_names(model) -> tuple[str, ...]:
    """Weight tensors subject to quantization; biases (suffix _b) stay FP."""
    return tuple(name for name in model.tensors() if not name.endswith("_b"))


class QuantizeHooks(Hooks):
    """Applies fake quantization at every calibrated activation site."""

    def __init__(self, act_params: dict[str, QuantParams],
                 passthrough: bool = False):
        self.act_params = act_params
        self.passthrough = passthrough

    def transform(self, site: str, values: np.ndarray) -> np.ndarray:
        if self.passthrough:
            return values
        params = self.act_params.get(site)
        if params is None:
            raise CalibrationError(f"activation site {site!r} is not calibrated")
        return fake_quantize(values, params)


class ObserverHooks(Hooks):
    """Feeds activation observers; dataflow itself is untouched."""

    def __init__(self, observers: dict[str, ActivationObserver]):
        self.observers = observers

    def observe(self, site: str, values: np.ndarray, count: int = 1) -> None:
        self.observers[site].update(values, count)


@dataclass
class QuantizedModel:
    """A model with fake-quantized weights plus per-site activation params.

    `fp_final_layer` keeps the original full-precision final linear weight
    so the data-aware refinement stage can re-quantize it from scratch.
    With `passthrough` set, weights are copied verbatim and inference
    applies no activation quantization (the FP reference path).
    """

    model: DiscModel | GenModel
    spec: QuantSpec
    weight_params: dict[str, QuantParams]
    fp_final_layer: np.ndarray
    act_params: dict[str, QuantParams] = field(default_factory=dict)
    passthrough: bool = False
    gpfq_report: object | None = None

    @property
    def model_type(self) -> str:
        return self.model.model_type

    @property
    def calibrated(self) -> bool:
        return self.passthrough or all(
            site in self.act_params for site in self.model.sites)

    def inference_hooks(self) -> QuantizeHooks:
        if not self.calibrated:
            missing = [s for s in self.model.sites if s not in self.act_params]
            raise CalibrationError(f"uncalibrated sites: {missing}")
        return QuantizeHooks(self.act_params, passthrough=self.passthrough)

    def predict(self, token_lists: list[list[int]], pad_id: int = 0,
                batch_size: int = 64) -> np.ndarray:
        tokens = _gen_safe_tokens(token_lists, self.model_type == "gen", pad_id)
        return predict_batch(self.model, tokens, pad_id,
                             hooks=self.inference_hooks(),
                             batch_size=batch_size)


def quantize_weights(model, spec: QuantSpec,
                     passthrough: bool = False) -> QuantizedModel:
    """Fake-quantize every weight tensor per-tensor with min/max scales.

    Biases are copied bit-identically; activation sites remain uncalibrated.
    """
    clone = model.clone()
    fp_final = model.tensors()[model.final_layer_name].copy()
    weight_params: dict[str, QuantParams] = {}
    if not passthrough:
        minmax_spec = QuantSpec(bitwidth=spec.bitwidth, signed=spec.signed,
                                symmetric=spec.symmetric,
                                scale_method="minmax",
                                percentile=spec.percentile)
        for name in quantizable_tensor_names(clone):
            tensor = clone.tensors()[name]
            params = compute_scale_minmax(tensor, minmax_spec)
            tensor[...] = fake_quantize(tensor, params)
            weight_params[name] = params
    return QuantizedModel(model=clone, spec=spec, weight_params=weight_params,
                          fp_final_layer=fp_final, passthrough=passthrough)


def _calibration_tokens(data) -> list[list[int]]:
    if isinstance(data, Dataset):
        return data.token_lists()
    return [list(t) for t in data]


def calibrate(qmodel: QuantizedModel, data, pad_id: int = 0,
              batch_size: int = 64, use_labels: bool = False,
              labels: np.ndarray | None = None) -> QuantizedModel:
    """Set every activation site's quantization params from two observer
    passes over the calibration data.

    Only token sequences are consumed. For the generative model the
    default scores each sequence under all candidate labels; with
    `use_labels=True` (and `labels` given explicitly, or a labeled Dataset)
    it instead runs the training-style forward under each sample's own
    label.
    """
    if qmodel.passthrough:
        return qmodel
    token_lists = _calibration_tokens(data)
    if not token_lists:
        raise ValueError("empty calibration data")
    is_gen = qmodel.model_type == "gen"
    token_lists = _gen_safe_tokens(token_lists, is_gen, pad_id)
    if use_labels and labels is None:
        if not isinstance(data, Dataset):
            raise ValueError("use_labels=True needs labels or a labeled Dataset")
        labels = data.labels()

    model = qmodel.model
    observers = {site: ActivationObserver(site) for site in model.sites}
    hooks = ObserverHooks(observers)

    def run_pass() -> None:
        for idx in iter_batches(len(token_lists), batch_size):
            ids, mask = pad_batch([token_lists[i] for i in idx], pad_id)
            if not is_gen:
                disc_logits_batch(model, ids, mask, hooks)
            elif use_labels:
                gen_token_losses_batch(model, ids, mask, labels[idx], hooks)
            else:
                gen_class_losses_batch(model, ids, mask, hooks)

    run_pass()
    for site, obs in observers.items():
        if not obs.fed:
            raise CalibrationError(f"site {site!r} observed no values")
    if qmodel.spec.scale_method == "percentile":
        for obs in observers.values():
            obs.begin_histogram()
        run_pass()
        qmodel.act_params = {
            site: compute_scale_percentile(obs, qmodel.spec)
            for site, obs in observers.items()
        }
    else:
        qmodel.act_params = {
            site: _params_from_range(*obs.minmax_range(), qmodel.spec)
            for site, obs in observers.items()
        }
    return qmodel


def quantized_forward(qmodel: QuantizedModel, tokens, label: int | None = None):
    """Run one sequence through the quantized model.

    Discriminative: returns the logits vector. Generative: returns the
    generation loss under `label`.
    """
    hooks = qmodel.inference_hooks()
    ids, mask = pad_batch([list(tokens)], pad_id=0)
    if qmodel.model_type == "disc":
        if label is not None:
            raise ValueError("label is only meaningful for the generative model")
        return disc_logits_batch(qmodel.model, ids, mask, hooks)[0]
    if label is None:
        raise ValueError("generative forward needs a label to score under")
    losses = gen_class_losses_batch(qmodel.model, ids, mask, hooks)
    return float(losses[0, label])
