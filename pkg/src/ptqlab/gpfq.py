"""Greedy path-following quantization (GPFQ) of the final linear layer.

Each output row w of the layer is re-quantized against paired calibration
activations: X holds the full-precision model's inputs to the layer, X~ the
quantized model's inputs. Walking the coordinates in order, the running
residual u tracks the output error accumulated so far and each weight is
snapped to the alphabet level that best cancels it:

    q_t = nearest level to <X~_t, u + w_t X_t> / ||X~_t||^2
    u  <- u + w_t X_t - q_t X~_t

which greedily minimizes ||Xw - X~q||^2. MSQ (independent nearest-level
rounding) is the baseline the refinement must beat on the same data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Dataset
from .models import _gen_safe_tokens, run_encoder
from .nn import pad_batch
from .quant import CalibrationError, QuantParams, QuantizedModel, fake_quantize

DEGENERATE_NORM = 1e-12
DEFAULT_MAX_ROWS = 50_000


@dataclass
class CalibrationActivations:
    """Aligned layer-input rows from the FP and quantized forward passes."""

    x_fp: np.ndarray
    x_quant: np.ndarray

    def __post_init__(self) -> None:
        if self.x_fp.shape != self.x_quant.shape:
            raise ValueError(
                f"shape mismatch {self.x_fp.shape} vs {self.x_quant.shape}")
        if self.x_fp.ndim != 2 or self.x_fp.shape[0] < 1:
            raise ValueError("need at least one activation row")

    @property
    def num_rows(self) -> int:
        return self.x_fp.shape[0]

    @property
    def width(self) -> int:
        return self.x_fp.shape[1]


@dataclass(frozen=True)
class QuantAlphabet:
    """The finite value grid {step * (k - zero) : k in [qmin, qmax]}."""

    step: float
    qmin: int
    qmax: int
    zero_point: int = 0

    @classmethod
    def from_params(cls, params: QuantParams) -> "QuantAlphabet":
        return cls(step=params.scale, qmin=params.qmin, qmax=params.qmax,
                   zero_point=params.zero_point)

    @property
    def levels(self) -> np.ndarray:
        codes = np.arange(self.qmin, self.qmax + 1)
        return self.step * (codes - self.zero_point)

    def _params(self) -> QuantParams:
        return QuantParams(scale=self.step, zero_point=self.zero_point,
                           qmin=self.qmin, qmax=self.qmax,
                           bitwidth=max(int(np.ceil(np.log2(
                               self.qmax - self.qmin + 1))), 2))

    def nearest(self, values: np.ndarray) -> np.ndarray:
        """Snap to the closest level (half-to-even at midpoints)."""
        return fake_quantize(np.asarray(values, dtype=np.float64),
                             self._params())


def msq(w: np.ndarray, alphabet: QuantAlphabet) -> np.ndarray:
    """Memoryless scalar quantization: independent nearest-level rounding."""
    return alphabet.nearest(w)


def gpfq_quantize_row(w: np.ndarray, acts: CalibrationActivations,
                      alphabet: QuantAlphabet) -> tuple[np.ndarray, float]:
    """Greedy quantization of one weight row; reference implementation.

    Returns (q, final residual norm ||Xw - X~q||). Coordinates whose
    quantized activation column is numerically zero fall back to MSQ.
    """
    x_fp = np.asarray(acts.x_fp, dtype=np.float64)
    x_q = np.asarray(acts.x_quant, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (acts.width,):
        raise ValueError(f"weight row length {w.shape} != width {acts.width}")
    u = np.zeros(acts.num_rows)
    q = np.zeros_like(w)
    for t in range(w.size):
        col_q = x_q[:, t]
        denom = float(col_q @ col_q)
        step_target = u + w[t] * x_fp[:, t]
        if denom < DEGENERATE_NORM:
            q[t] = alphabet.nearest(w[t])
        else:
            q[t] = alphabet.nearest(float(col_q @ step_target) / denom)
        u = step_target - q[t] * col_q
    return q, float(np.linalg.norm(u))


def gpfq_quantize_rows(weights: np.ndarray, acts: CalibrationActivations,
                       alphabet: QuantAlphabet) -> tuple[np.ndarray, np.ndarray]:
    """All rows at once via Gram matrices; same greedy path as the
    per-row reference, vectorized across rows.

    With A = X~'X and B = X~'X~, the step projection for every row r is
    <X~_t, u_r + w_rt X_t> = W[:, :t] A[t, :t] - Q[:, :t] B[t, :t]
    + W[:, t] A[t, t], so the residual vectors never materialize.
    Returns (Q, per-row final residual norms).
    """
    x_fp = np.asarray(acts.x_fp, dtype=np.float64)
    x_q = np.asarray(acts.x_quant, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    n_rows, width = weights.shape
    if width != acts.width:
        raise ValueError(f"weight width {width} != activation width {acts.width}")
    a = x_q.T @ x_fp
    b = x_q.T @ x_q
    q = np.zeros_like(weights)
    for t in range(width):
        denom = b[t, t]
        if denom < DEGENERATE_NORM:
            q[:, t] = alphabet.nearest(weights[:, t])
            continue
        proj = weights[:, :t] @ a[t, :t] - q[:, :t] @ b[t, :t] \
            + weights[:, t] * a[t, t]
        q[:, t] = alphabet.nearest(proj / denom)
    c = x_fp.T @ x_fp
    sq = ((weights @ c) * weights).sum(axis=1) \
        - 2.0 * ((q @ a) * weights).sum(axis=1) \
        + ((q @ b) * q).sum(axis=1)
    return q, np.sqrt(np.maximum(sq, 0.0))


def layer_objective(weights: np.ndarray, quantized: np.ndarray,
                    acts: CalibrationActivations) -> float:
    """Total squared output error sum_rows ||X w_r - X~ q_r||^2."""
    diff = acts.x_fp @ np.asarray(weights, dtype=np.float64).T \
        - acts.x_quant @ np.asarray(quantized, dtype=np.float64).T
    return float(np.sum(diff * diff))


class _RowSink:
    def __init__(self, max_rows: int):
        self.max_rows = max_rows
        self.rows_fp: list[np.ndarray] = []
        self.rows_q: list[np.ndarray] = []
        self.count = 0
        self.truncated = False

    @property
    def full(self) -> bool:
        return self.count >= self.max_rows

    def add(self, fp_rows: np.ndarray, q_rows: np.ndarray) -> None:
        if self.full:
            self.truncated = True
            return
        room = self.max_rows - self.count
        if fp_rows.shape[0] > room:
            fp_rows, q_rows = fp_rows[:room], q_rows[:room]
            self.truncated = True
        self.rows_fp.append(np.asarray(fp_rows, dtype=np.float64))
        self.rows_q.append(np.asarray(q_rows, dtype=np.float64))
        self.count += fp_rows.shape[0]


def collect_layer_inputs(fp_model, qmodel: QuantizedModel, calib,
                         pad_id: int = 0, batch_size: int = 64,
                         max_rows: int = DEFAULT_MAX_ROWS,
                         use_labels: bool = False,
                         labels: np.ndarray | None = None,
                         reference: str = "fp") -> CalibrationActivations:
    """Paired final-layer inputs from the FP and calibrated models.

    Discriminative: one row per sample (the head input). Generative: one
    row [h_t; l_y] per scored position per candidate label — all C labels
    by default, or each sample's own label with `use_labels=True`. Rows
    are collected in deterministic first-come order and truncated at
    `max_rows`. With reference="quantized" the FP side is replaced by the
    quantized side (both objective terms then use X~).
    """
    if reference not in ("fp", "quantized"):
        raise ValueError(f"unknown reference {reference!r}")
    if not qmodel.calibrated:
        raise CalibrationError("calibrate the model before collecting inputs")
    token_lists = calib.token_lists() if isinstance(calib, Dataset) \
        else [list(t) for t in calib]
    if not token_lists:
        raise ValueError("empty calibration data")
    is_gen = qmodel.model_type == "gen"
    token_lists = _gen_safe_tokens(token_lists, is_gen, pad_id)
    if use_labels and labels is None:
        if not isinstance(calib, Dataset):
            raise ValueError("use_labels=True needs labels or a labeled Dataset")
        labels = calib.labels()

    qhooks = qmodel.inference_hooks()
    sink = _RowSink(max_rows)
    for start in range(0, len(token_lists), batch_size):
        if sink.full:
            break
        chunk = token_lists[start:start + batch_size]
        ids, mask = pad_batch(chunk, pad_id)
        states_fp = run_encoder(fp_model, ids, mask)
        states_q = run_encoder(qmodel.model, ids, mask, qhooks)
        if not is_gen:
            h_fp = states_fp[:, -1]
            h_q = qhooks.transform("head_in", states_q[:, -1])
            sink.add(h_fp, h_q)
            continue
        lab_fp = fp_model.label_embedding
        lab_q = qhooks.transform("decoder_in", qmodel.model.label_embedding)
        chunk_labels = labels[start:start + batch_size] if use_labels else None
        for t in range(ids.shape[1] - 1):
            valid = mask[:, t + 1] > 0
            if not valid.any():
                break
            h_fp = states_fp[valid, t]
            h_q = qhooks.transform("decoder_in", states_q[:, t])[valid]
            if use_labels:
                y = chunk_labels[valid]
                sink.add(np.hstack([h_fp, lab_fp[y]]),
                         np.hstack([h_q, lab_q[y]]))
            else:
                for y in range(fp_model.num_classes):
                    sink.add(
                        np.hstack([h_fp, np.broadcast_to(
                            lab_fp[y], (h_fp.shape[0], lab_fp.shape[1]))]),
                        np.hstack([h_q, np.broadcast_to(
                            lab_q[y], (h_q.shape[0], lab_q.shape[1]))]))
    x_q = np.vstack(sink.rows_q)
    x_fp = x_q.copy() if reference == "quantized" else np.vstack(sink.rows_fp)
    return CalibrationActivations(x_fp=x_fp, x_quant=x_q)


@dataclass
class GpfqReport:
    """Pre/post objective audit for one refinement run."""

    objective_before: float
    objective_after: float
    rows: int
    width: int
    num_weight_rows: int


def gpfq_refine(qmodel: QuantizedModel,
                acts: CalibrationActivations) -> QuantizedModel:
    """Re-quantize the final linear layer row by row against `acts`.

    The original FP weights are the starting point and the layer keeps its
    existing alphabet (scale and code range from weight quantization), so
    only the code assignment changes. Every other tensor, including all
    biases, is untouched. The objective audit lands in qmodel.gpfq_report.
    """
    layer_name = qmodel.model.final_layer_name
    target = qmodel.model.tensors()[layer_name]
    fp_weights = qmodel.fp_final_layer
    if acts.width != fp_weights.shape[1]:
        raise ValueError(
            f"activation width {acts.width} != layer input {fp_weights.shape[1]}")
    if qmodel.passthrough:
        qmodel.gpfq_report = GpfqReport(0.0, 0.0, acts.num_rows, acts.width,
                                        fp_weights.shape[0])
        return qmodel
    alphabet = QuantAlphabet.from_params(qmodel.weight_params[layer_name])
    before = layer_objective(fp_weights, target, acts)
    refined, _ = gpfq_quantize_rows(fp_weights, acts, alphabet)
    target[...] = refined.astype(target.dtype)
    qmodel.gpfq_report = GpfqReport(
        objective_before=before,
        objective_after=layer_objective(fp_weights, target, acts),
        rows=acts.num_rows,
        width=acts.width,
        num_weight_rows=fp_weights.shape[0],
    )
    return qmodel
