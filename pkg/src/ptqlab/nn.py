"""Dense numerical core: embedding lookup, a single-layer LSTM with manual
backprop, linear head, softmax/cross-entropy, Adam, and a generic
early-stopping training loop.

Everything operates on plain numpy arrays. Model-level assembly (batching,
masking, loss wiring) lives in `models`; this module supplies the cell-level
math and the optimizer/training mechanics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

PROB_FLOOR = 1e-12
GRAD_CLIP_NORM = 5.0


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function, elementwise."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax with max-subtraction for overflow safety."""
    z = np.asarray(z)
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z)
    shifted = z - np.max(z, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def cross_entropy(probs: np.ndarray, target: int) -> float:
    """Negative log-likelihood of `target` with a probability floor."""
    probs = np.asarray(probs)
    if not 0 <= target < probs.shape[-1]:
        raise IndexError(f"target {target} outside [0, {probs.shape[-1]})")
    return float(-np.log(max(float(probs[target]), PROB_FLOOR)))


def embedding_forward(embedding: np.ndarray, tokens) -> np.ndarray:
    """Gather embedding rows; row t of the output is embedding[tokens[t]]."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= embedding.shape[0]):
        raise IndexError(
            f"token id outside [0, {embedding.shape[0]})")
    return embedding[ids]


@dataclass
class LstmParams:
    """Gate parameters with rows stacked in the fixed order [i, f, g, o].

    w_x: (4h, d) input weights, w_h: (4h, h) recurrent weights, b: (4h,).
    """

    w_x: np.ndarray
    w_h: np.ndarray
    b: np.ndarray

    def __post_init__(self) -> None:
        four_h, d = self.w_x.shape
        if four_h % 4 != 0:
            raise ValueError("w_x first dimension must be 4*h")
        h = four_h // 4
        if self.w_h.shape != (four_h, h):
            raise ValueError(f"w_h shape {self.w_h.shape} != ({four_h}, {h})")
        if self.b.shape != (four_h,):
            raise ValueError(f"b shape {self.b.shape} != ({four_h},)")

    @property
    def hidden_size(self) -> int:
        return self.w_x.shape[0] // 4

    @property
    def input_size(self) -> int:
        return self.w_x.shape[1]


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden_size: int, dtype=np.float32,
              batch: int | None = None) -> "LstmState":
        shape = (hidden_size,) if batch is None else (batch, hidden_size)
        return cls(h=np.zeros(shape, dtype=dtype), c=np.zeros(shape, dtype=dtype))


def lstm_cell_forward(params: LstmParams, u: np.ndarray, h_prev: np.ndarray,
                      c_prev: np.ndarray) -> tuple[np.ndarray, np.ndarray, dict]:
    """One LSTM step on a vector (d,) or batch (B, d).

    Returns (h, c, cache); the cache holds what the backward pass needs.
    """
    hs = params.hidden_size
    pre = u @ params.w_x.T + h_prev @ params.w_h.T + params.b
    i = sigmoid(pre[..., :hs])
    f = sigmoid(pre[..., hs:2 * hs])
    g = np.tanh(pre[..., 2 * hs:3 * hs])
    o = sigmoid(pre[..., 3 * hs:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    cache = {"u": u, "h_prev": h_prev, "c_prev": c_prev,
             "i": i, "f": f, "g": g, "o": o, "tc": tc}
    return h, c, cache


def lstm_step(params: LstmParams, u: np.ndarray, state: LstmState) -> LstmState:
    """Single recurrence step; rejects non-finite inputs."""
    u = np.asarray(u)
    if not np.all(np.isfinite(u)):
        raise ValueError("non-finite LSTM input")
    h, c, _ = lstm_cell_forward(params, u, state.h, state.c)
    return LstmState(h=h, c=c)


def lstm_forward(params: LstmParams, inputs: np.ndarray,
                 state: LstmState | None = None) -> tuple[np.ndarray, LstmState]:
    """Fold lstm_step over a (T, d) input sequence; returns (T, h) and the
    final state."""
    inputs = np.asarray(inputs)
    if inputs.ndim != 2 or inputs.shape[0] < 1:
        raise ValueError("inputs must be (T, d) with T >= 1")
    if state is None:
        state = LstmState.zeros(params.hidden_size, dtype=inputs.dtype)
    hs = np.empty((inputs.shape[0], params.hidden_size), dtype=inputs.dtype)
    for t in range(inputs.shape[0]):
        state = lstm_step(params, inputs[t], state)
        hs[t] = state.h
    return hs, state


def lstm_cell_backward(params: LstmParams, cache: dict, dh: np.ndarray,
                       dc: np.ndarray) -> dict:
    """Backward through one cell step.

    Returns gradients {du, dh_prev, dc_prev, w_x, w_h, b}; the parameter
    entries are this step's contributions, to be accumulated by the caller.
    """
    i, f, g, o, tc = cache["i"], cache["f"], cache["g"], cache["o"], cache["tc"]
    dc_total = dc + dh * o * (1.0 - tc * tc)
    d_pre = np.concatenate([
        dc_total * g * i * (1.0 - i),
        dc_total * cache["c_prev"] * f * (1.0 - f),
        dc_total * i * (1.0 - g * g),
        dh * tc * o * (1.0 - o),
    ], axis=-1)
    flat = d_pre if d_pre.ndim == 2 else d_pre[None, :]
    u = cache["u"] if cache["u"].ndim == 2 else cache["u"][None, :]
    h_prev = cache["h_prev"] if cache["h_prev"].ndim == 2 else cache["h_prev"][None, :]
    return {
        "du": d_pre @ params.w_x,
        "dh_prev": d_pre @ params.w_h,
        "dc_prev": dc_total * f,
        "w_x": flat.T @ u,
        "w_h": flat.T @ h_prev,
        "b": flat.sum(axis=0),
    }


def linear_forward(weight: np.ndarray, bias: np.ndarray, x: np.ndarray) -> np.ndarray:
    """z = W x + b for a vector x, or x W^T + b for a batch (B, in)."""
    x = np.asarray(x)
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"input size {x.shape[-1]} != weight cols {weight.shape[1]}")
    return x @ weight.T + bias


def init_embedding(vocab_size: int, dim: int, rng: np.random.Generator,
                   dtype=np.float32) -> np.ndarray:
    return rng.normal(0.0, 0.1, size=(vocab_size, dim)).astype(dtype)


def init_lstm(input_size: int, hidden_size: int, rng: np.random.Generator,
              dtype=np.float32) -> LstmParams:
    """Uniform(-1/sqrt(h), 1/sqrt(h)) weights, forget-gate bias +1."""
    bound = 1.0 / np.sqrt(hidden_size)
    w_x = rng.uniform(-bound, bound, size=(4 * hidden_size, input_size))
    w_h = rng.uniform(-bound, bound, size=(4 * hidden_size, hidden_size))
    b = np.zeros(4 * hidden_size)
    b[hidden_size:2 * hidden_size] = 1.0
    return LstmParams(w_x=w_x.astype(dtype), w_h=w_h.astype(dtype),
                      b=b.astype(dtype))


def init_linear(out_size: int, in_size: int, rng: np.random.Generator,
                dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / np.sqrt(in_size)
    weight = rng.uniform(-bound, bound, size=(out_size, in_size)).astype(dtype)
    bias = np.zeros(out_size, dtype=dtype)
    return weight, bias


def pad_batch(token_lists: list[list[int]], pad_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to the batch max length.

    Returns (ids, mask) shaped (B, T); mask is 1.0 on real positions.
    """
    if not token_lists:
        raise ValueError("empty batch")
    max_len = max(len(t) for t in token_lists)
    ids = np.full((len(token_lists), max_len), pad_id, dtype=np.int64)
    mask = np.zeros((len(token_lists), max_len), dtype=np.float32)
    for row, toks in enumerate(token_lists):
        ids[row, :len(toks)] = toks
        mask[row, :len(toks)] = 1.0
    return ids, mask


def clip_gradients(grads: dict[str, np.ndarray],
                   max_norm: float = GRAD_CLIP_NORM) -> float:
    """Scale all gradients in place so the global L2 norm is <= max_norm.

    Returns the pre-clip global norm.
    """
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g, dtype=np.float64)))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    max_epochs: int = 10
    patience: int = 2
    seed: int = 0
    clip_norm: float = GRAD_CLIP_NORM
    train_noise: object | None = None  # corpus.NoiseSpec; nn stays text-agnostic

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def init_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, applied to the params in place."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for key, p in params.items():
        g = grads[key]
        m = state.m[key]
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        p -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps_adam)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0

    @property
    def best_val_accuracy(self) -> float:
        return max(self.val_accuracy) if self.val_accuracy else float("nan")


def train_loop(params: Mapping[str, np.ndarray],
               make_batches: Callable[[int, np.random.Generator], Iterable],
               loss_and_grads: Callable[[object], tuple[float, dict[str, np.ndarray]]],
               evaluate: Callable[[], float],
               cfg: TrainConfig) -> TrainHistory:
    """Generic epoch loop: Adam with gradient clipping, validation-accuracy
    early stopping, best-checkpoint restore.

    `make_batches(epoch, rng)` yields opaque batches; `loss_and_grads`
    returns the mean batch loss and gradients keyed like `params`. Stops
    once validation accuracy has not improved for `patience` consecutive
    epochs (patience=0 trains exactly one epoch) and restores the
    best-validation parameters before returning.
    """
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.init_like(params)
    history = TrainHistory()
    best_acc = -np.inf
    best_snapshot = {k: p.copy() for k, p in params.items()}
    epochs_since_improve = 0

    for epoch in range(1, cfg.max_epochs + 1):
        losses = []
        for batch in make_batches(epoch, rng):
            loss, grads = loss_and_grads(batch)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss {loss} at epoch {epoch}, batch {len(losses)}")
            clip_gradients(grads, cfg.clip_norm)
            adam_step(params, grads, state, cfg)
            losses.append(loss)
        history.train_loss.append(float(np.mean(losses)) if losses else float("nan"))

        val_acc = float(evaluate())
        history.val_accuracy.append(val_acc)
        if val_acc > best_acc:
            best_acc = val_acc
            best_snapshot = {k: p.copy() for k, p in params.items()}
            history.best_epoch = epoch
            epochs_since_improve = 0
        else:
            epochs_since_improve += 1
        history.stopped_epoch = epoch
        if epochs_since_improve >= cfg.patience:
            break

    for key, p in params.items():
        p[...] = best_snapshot[key]
    return history
