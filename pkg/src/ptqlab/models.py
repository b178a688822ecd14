"""The two classifier architectures.

A discriminative model reads the token sequence with an LSTM and applies a
linear head over classes to the final hidden state. A generative model
scores a sequence under each candidate class label by conditioning a linear
next-token decoder on [h_t; label_embedding[y]] and classifies by lowest
total generation loss.

All batched forwards route activations through a `Hooks` object at named
sites, so the same code path serves full-precision inference, fake-quantized
inference, calibration observation, and activation recording.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .corpus import Dataset, NoiseSpec, Vocab, corrupt_dataset
from .nn import (
    PROB_FLOOR,
    LstmParams,
    LstmState,
    TrainConfig,
    TrainHistory,
    embedding_forward,
    init_embedding,
    init_linear,
    init_lstm,
    linear_forward,
    log_softmax,
    lstm_cell_backward,
    lstm_cell_forward,
    lstm_forward,
    pad_batch,
    softmax,
    train_loop,
)

DISC_SITES = ("embedding_out", "lstm_hidden", "head_in", "head_out")
GEN_SITES = ("embedding_out", "lstm_hidden", "decoder_in", "decoder_out")

MAX_TOKEN_LOSS = -math.log(PROB_FLOOR)


class Hooks:
    """No-op activation hooks; subclasses intercept specific sites.

    `transform` rewrites the tensor that downstream computation consumes
    (e.g. fake quantization); `observe` sees only rows from real, unpadded
    positions, post-transform, with `count` giving the multiplicity each
    row would have if the tensor were materialized per consumer.
    """

    def transform(self, site: str, values: np.ndarray) -> np.ndarray:
        return values

    def observe(self, site: str, values: np.ndarray, count: int = 1) -> None:
        pass


IDENTITY_HOOKS = Hooks()


@dataclass
class DiscModel:
    """Embedding -> LSTM -> linear head over classes."""

    embedding: np.ndarray
    lstm: LstmParams
    head_w: np.ndarray
    head_b: np.ndarray

    def __post_init__(self) -> None:
        if self.head_w.shape[0] < 2:
            raise ValueError("discriminative model needs at least 2 classes")
        if self.head_w.shape[1] != self.lstm.hidden_size:
            raise ValueError("head input size must equal LSTM hidden size")
        if self.embedding.shape[1] != self.lstm.input_size:
            raise ValueError("embedding dim must equal LSTM input size")

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def num_classes(self) -> int:
        return self.head_w.shape[0]

    @property
    def model_type(self) -> str:
        return "disc"

    @property
    def final_layer_name(self) -> str:
        return "head_w"

    @property
    def sites(self) -> tuple[str, ...]:
        return DISC_SITES

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "embedding": self.embedding,
            "lstm_w_x": self.lstm.w_x,
            "lstm_w_h": self.lstm.w_h,
            "lstm_b": self.lstm.b,
            "head_w": self.head_w,
            "head_b": self.head_b,
        }

    def clone(self) -> "DiscModel":
        return DiscModel(
            embedding=self.embedding.copy(),
            lstm=LstmParams(self.lstm.w_x.copy(), self.lstm.w_h.copy(),
                            self.lstm.b.copy()),
            head_w=self.head_w.copy(),
            head_b=self.head_b.copy(),
        )


@dataclass
class GenModel:
    """Embedding -> LSTM -> class-conditional next-token decoder.

    decoder_w has shape (V, h + d_label); its left block multiplies the
    hidden state and its right block the label embedding.
    """

    embedding: np.ndarray
    label_embedding: np.ndarray
    lstm: LstmParams
    decoder_w: np.ndarray
    decoder_b: np.ndarray

    def __post_init__(self) -> None:
        h = self.lstm.hidden_size
        d_label = self.label_embedding.shape[1]
        if self.decoder_w.shape != (self.embedding.shape[0], h + d_label):
            raise ValueError(
                f"decoder shape {self.decoder_w.shape} != "
                f"({self.embedding.shape[0]}, {h + d_label})")
        if self.embedding.shape[1] != self.lstm.input_size:
            raise ValueError("embedding dim must equal LSTM input size")

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def num_classes(self) -> int:
        return self.label_embedding.shape[0]

    @property
    def label_dim(self) -> int:
        return self.label_embedding.shape[1]

    @property
    def model_type(self) -> str:
        return "gen"

    @property
    def final_layer_name(self) -> str:
        return "decoder_w"

    @property
    def sites(self) -> tuple[str, ...]:
        return GEN_SITES

    def tensors(self) -> dict[str, np.ndarray]:
        return {
            "embedding": self.embedding,
            "label_embedding": self.label_embedding,
            "lstm_w_x": self.lstm.w_x,
            "lstm_w_h": self.lstm.w_h,
            "lstm_b": self.lstm.b,
            "decoder_w": self.decoder_w,
            "decoder_b": self.decoder_b,
        }

    def clone(self) -> "GenModel":
        return GenModel(
            embedding=self.embedding.copy(),
            label_embedding=self.label_embedding.copy(),
            lstm=LstmParams(self.lstm.w_x.copy(), self.lstm.w_h.copy(),
                            self.lstm.b.copy()),
            decoder_w=self.decoder_w.copy(),
            decoder_b=self.decoder_b.copy(),
        )


def init_disc_model(vocab_size: int, embedding_dim: int, hidden_dim: int,
                    num_classes: int, rng: np.random.Generator,
                    dtype=np.float32) -> DiscModel:
    head_w, head_b = init_linear(num_classes, hidden_dim, rng, dtype)
    return DiscModel(
        embedding=init_embedding(vocab_size, embedding_dim, rng, dtype),
        lstm=init_lstm(embedding_dim, hidden_dim, rng, dtype),
        head_w=head_w,
        head_b=head_b,
    )


def init_gen_model(vocab_size: int, embedding_dim: int, hidden_dim: int,
                   num_classes: int, label_dim: int, rng: np.random.Generator,
                   dtype=np.float32) -> GenModel:
    decoder_w, decoder_b = init_linear(vocab_size, hidden_dim + label_dim,
                                       rng, dtype)
    return GenModel(
        embedding=init_embedding(vocab_size, embedding_dim, rng, dtype),
        label_embedding=init_embedding(num_classes, label_dim, rng, dtype),
        lstm=init_lstm(embedding_dim, hidden_dim, rng, dtype),
        decoder_w=decoder_w,
        decoder_b=decoder_b,
    )


def run_encoder(model, ids: np.ndarray, mask: np.ndarray,
                hooks: Hooks = IDENTITY_HOOKS) -> np.ndarray:
    """Embedding + LSTM over a padded batch.

    Returns carried hidden states (B, T, h): at padded positions the last
    real hidden state persists, so [:, -1] is always the final state.
    """
    batch, seq_len = ids.shape
    hs = model.lstm.hidden_size
    emb = embedding_forward(model.embedding, ids)
    emb = hooks.transform("embedding_out", emb)
    hooks.observe("embedding_out", emb[mask > 0])
    h = np.zeros((batch, hs), dtype=emb.dtype)
    c = np.zeros((batch, hs), dtype=emb.dtype)
    out = np.empty((batch, seq_len, hs), dtype=emb.dtype)
    for t in range(seq_len):
        h_new, c_new, _ = lstm_cell_forward(model.lstm, emb[:, t], h, c)
        h_new = hooks.transform("lstm_hidden", h_new)
        m_t = mask[:, t:t + 1]
        if m_t.min() > 0:
            hooks.observe("lstm_hidden", h_new)
            h, c = h_new, c_new
        else:
            hooks.observe("lstm_hidden", h_new[mask[:, t] > 0])
            h = m_t * h_new + (1.0 - m_t) * h
            c = m_t * c_new + (1.0 - m_t) * c
        out[:, t] = h
    return out


def disc_logits_batch(model: DiscModel, ids: np.ndarray, mask: np.ndarray,
                      hooks: Hooks = IDENTITY_HOOKS) -> np.ndarray:
    states = run_encoder(model, ids, mask, hooks)
    h_final = hooks.transform("head_in", states[:, -1])
    hooks.observe("head_in", h_final)
    logits = linear_forward(model.head_w, model.head_b, h_final)
    logits = hooks.transform("head_out", logits)
    hooks.observe("head_out", logits)
    return logits


def disc_logits(model: DiscModel, tokens) -> np.ndarray:
    """Logits for a single token sequence."""
    ids, mask = pad_batch([list(tokens)], pad_id=0)
    return disc_logits_batch(model, ids, mask)[0]


def disc_classify(model: DiscModel, tokens) -> int:
    """Argmax class; ties resolve to the lowest index."""
    return int(np.argmax(disc_logits(model, tokens)))


def gen_class_losses_batch(model: GenModel, ids: np.ndarray, mask: np.ndarray,
                           hooks: Hooks = IDENTITY_HOOKS) -> np.ndarray:
    """Generation loss of every sequence under every candidate label.

    Returns (B, C): entry [b, y] is the summed next-token cross-entropy of
    sequence b decoded under label y. The decoder input [h_t; l_y] is
    never materialized: W [h; l] = W_h h + W_l l exactly, and the
    per-tensor input transform applies elementwise to each part.
    """
    batch, seq_len = ids.shape
    n_classes = model.num_classes
    states = run_encoder(model, ids, mask, hooks)
    h_dim = model.lstm.hidden_size
    w_hidden = model.decoder_w[:, :h_dim]
    w_label = model.decoder_w[:, h_dim:]

    labels_q = hooks.transform("decoder_in", model.label_embedding)
    total_steps = int(mask[:, 1:].sum())
    hooks.observe("decoder_in", labels_q, count=max(total_steps, 1))
    label_shift = labels_q @ w_label.T  # (C, V)

    losses = np.zeros((batch, n_classes), dtype=states.dtype)
    floor = np.asarray(MAX_TOKEN_LOSS, dtype=states.dtype)
    for t in range(seq_len - 1):
        valid = mask[:, t + 1] > 0
        if not valid.any():
            break
        h_q = hooks.transform("decoder_in", states[:, t])
        hooks.observe("decoder_in", h_q[valid], count=n_classes)
        base = h_q @ w_hidden.T + model.decoder_b  # (B, V)
        targets = ids[valid, t + 1]
        rows = np.flatnonzero(valid)
        for y in range(n_classes):
            logits = base + label_shift[y]
            logits = hooks.transform("decoder_out", logits)
            hooks.observe("decoder_out", logits[valid])
            logp = log_softmax(logits[valid], axis=-1)
            tok = np.minimum(-logp[np.arange(len(rows)), targets], floor)
            losses[rows, y] += tok
    return losses


def gen_token_losses_batch(model: GenModel, ids: np.ndarray, mask: np.ndarray,
                           labels: np.ndarray,
                           hooks: Hooks = IDENTITY_HOOKS) -> np.ndarray:
    """Per-position next-token losses under each sample's own label.

    Returns (B, T-1) with zeros at padded positions.
    """
    batch, seq_len = ids.shape
    states = run_encoder(model, ids, mask, hooks)
    h_dim = model.lstm.hidden_size
    w_hidden = model.decoder_w[:, :h_dim]
    w_label = model.decoder_w[:, h_dim:]
    labels_q = hooks.transform("decoder_in", model.label_embedding)
    own_labels = labels_q[labels]  # (B, d_label)
    shift = own_labels @ w_label.T  # (B, V)

    out = np.zeros((batch, max(seq_len - 1, 0)), dtype=states.dtype)
    floor = np.asarray(MAX_TOKEN_LOSS, dtype=states.dtype)
    for t in range(seq_len - 1):
        valid = mask[:, t + 1] > 0
        if not valid.any():
            break
        h_q = hooks.transform("decoder_in", states[:, t])
        hooks.observe("decoder_in", h_q[valid])
        hooks.observe("decoder_in", own_labels[valid])
        logits = h_q @ w_hidden.T + model.decoder_b + shift
        logits = hooks.transform("decoder_out", logits)
        hooks.observe("decoder_out", logits[valid])
        logp = log_softmax(logits[valid], axis=-1)
        tok = np.minimum(-logp[np.arange(int(valid.sum())), ids[valid, t + 1]],
                         floor)
        out[valid, t] = tok
    return out


def gen_sequence_loss(model: GenModel, tokens, label: int) -> float:
    """Summed next-token cross-entropy of one sequence under one label.

    Position t is scored from the hidden state after reading tokens[:t+1];
    the first token is conditioned on, never scored.
    """
    tokens = list(tokens)
    if len(tokens) < 2:
        raise ValueError("sequence too short for generative scoring")
    if not 0 <= label < model.num_classes:
        raise IndexError(f"label {label} outside [0, {model.num_classes})")
    emb = embedding_forward(model.embedding, tokens)
    states, _ = lstm_forward(model.lstm, emb)
    l_y = model.label_embedding[label]
    total = 0.0
    for t in range(len(tokens) - 1):
        z = linear_forward(model.decoder_w, model.decoder_b,
                           np.concatenate([states[t], l_y]))
        probs = softmax(z)
        total += min(-math.log(max(float(probs[tokens[t + 1]]), PROB_FLOOR)),
                     MAX_TOKEN_LOSS)
    return float(total)


def gen_classify(model: GenModel, tokens,
                 class_log_prior: np.ndarray | None = None) -> int:
    """Label with the lowest generation loss; ties resolve downward.

    With `class_log_prior`, scores become loss - log p(y), a maximum
    a-posteriori correction (off by default: uniform prior assumed).
    """
    scores = np.array([gen_sequence_loss(model, tokens, y)
                       for y in range(model.num_classes)])
    if class_log_prior is not None:
        scores = scores - np.asarray(class_log_prior)
    return int(np.argmin(scores))


def disc_loss_and_grads(model: DiscModel, ids: np.ndarray, mask: np.ndarray,
                        labels: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over the batch and gradients for every tensor."""
    batch, seq_len = ids.shape
    hs = model.lstm.hidden_size
    emb = embedding_forward(model.embedding, ids)
    h = np.zeros((batch, hs), dtype=emb.dtype)
    c = np.zeros((batch, hs), dtype=emb.dtype)
    caches = []
    for t in range(seq_len):
        h_new, c_new, cache = lstm_cell_forward(model.lstm, emb[:, t], h, c)
        m_t = mask[:, t:t + 1]
        h = m_t * h_new + (1.0 - m_t) * h
        c = m_t * c_new + (1.0 - m_t) * c
        caches.append(cache)

    logits = linear_forward(model.head_w, model.head_b, h)
    probs = softmax(logits, axis=-1)
    picked = np.maximum(probs[np.arange(batch), labels], PROB_FLOOR)
    loss = float(np.mean(-np.log(picked)))

    dlogits = probs.copy()
    dlogits[np.arange(batch), labels] -= 1.0
    dlogits /= batch

    grads = {name: np.zeros_like(tensor) for name, tensor in model.tensors().items()}
    grads["head_w"] += dlogits.T @ h
    grads["head_b"] += dlogits.sum(axis=0)
    dh = dlogits @ model.head_w
    dc = np.zeros_like(dh)
    d_emb = np.zeros_like(emb)
    for t in range(seq_len - 1, -1, -1):
        m_t = mask[:, t:t + 1]
        dh_cell = m_t * dh
        dc_cell = m_t * dc
        step = lstm_cell_backward(model.lstm, caches[t], dh_cell, dc_cell)
        grads["lstm_w_x"] += step["w_x"]
        grads["lstm_w_h"] += step["w_h"]
        grads["lstm_b"] += step["b"]
        d_emb[:, t] = step["du"]
        dh = (1.0 - m_t) * dh + step["dh_prev"]
        dc = (1.0 - m_t) * dc + step["dc_prev"]
    flat_ids = ids.reshape(-1)
    np.add.at(grads["embedding"], flat_ids, d_emb.reshape(-1, emb.shape[-1]))
    return loss, grads


def gen_loss_and_grads(model: GenModel, ids: np.ndarray, mask: np.ndarray,
                       labels: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Teacher-forced next-token loss under each sample's own label.

    Loss is the mean over all real predicted positions; gradients cover
    every tensor including the label embedding rows used.
    """
    batch, seq_len = ids.shape
    if seq_len < 2:
        raise ValueError("sequence too short for generative scoring")
    hs = model.lstm.hidden_size
    emb = embedding_forward(model.embedding, ids)
    h = np.zeros((batch, hs), dtype=emb.dtype)
    c = np.zeros((batch, hs), dtype=emb.dtype)
    caches = []
    carried_h = []
    for t in range(seq_len):
        h_new, c_new, cache = lstm_cell_forward(model.lstm, emb[:, t], h, c)
        m_t = mask[:, t:t + 1]
        h = m_t * h_new + (1.0 - m_t) * h
        c = m_t * c_new + (1.0 - m_t) * c
        caches.append(cache)
        carried_h.append(h)

    w_hidden = model.decoder_w[:, :hs]
    w_label = model.decoder_w[:, hs:]
    lab = model.label_embedding[labels]  # (B, d_label)
    shift = lab @ w_label.T

    n_tokens = max(int(mask[:, 1:].sum()), 1)
    grads = {name: np.zeros_like(tensor) for name, tensor in model.tensors().items()}
    g_w_hidden = grads["decoder_w"][:, :hs]
    g_w_label = grads["decoder_w"][:, hs:]
    dlab = np.zeros_like(lab)
    dh_steps = [None] * seq_len
    loss = 0.0
    for t in range(seq_len - 1):
        valid = mask[:, t + 1] > 0
        if not valid.any():
            dh_steps[t] = np.zeros((batch, hs), dtype=emb.dtype)
            continue
        h_t = carried_h[t]
        logits = h_t @ w_hidden.T + model.decoder_b + shift
        probs = softmax(logits, axis=-1)
        targets = ids[np.arange(batch), t + 1]
        picked = np.maximum(probs[np.arange(batch), targets], PROB_FLOOR)
        loss += float(-np.log(picked[valid]).sum())
        dlogits = probs
        dlogits[np.arange(batch), targets] -= 1.0
        dlogits *= (valid.astype(emb.dtype) / n_tokens)[:, None]
        g_w_hidden += dlogits.T @ h_t
        g_w_label += dlogits.T @ lab
        grads["decoder_b"] += dlogits.sum(axis=0)
        dlab += dlogits @ w_label
        dh_steps[t] = dlogits @ w_hidden
    np.add.at(grads["label_embedding"], labels, dlab)

    dh = np.zeros((batch, hs), dtype=emb.dtype)
    dc = np.zeros((batch, hs), dtype=emb.dtype)
    d_emb = np.zeros_like(emb)
    for t in range(seq_len - 1, -1, -1):
        if dh_steps[t] is not None:
            dh = dh + dh_steps[t]
        m_t = mask[:, t:t + 1]
        step = lstm_cell_backward(model.lstm, caches[t], m_t * dh, m_t * dc)
        grads["lstm_w_x"] += step["w_x"]
        grads["lstm_w_h"] += step["w_h"]
        grads["lstm_b"] += step["b"]
        d_emb[:, t] = step["du"]
        dh = (1.0 - m_t) * dh + step["dh_prev"]
        dc = (1.0 - m_t) * dc + step["dc_prev"]
    np.add.at(grads["embedding"], ids.reshape(-1), d_emb.reshape(-1, emb.shape[-1]))
    return loss / n_tokens, grads


def iter_batches(n: int, batch_size: int,
                 rng: np.random.Generator | None = None) -> Iterator[np.ndarray]:
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def predict_batch(model, token_lists: list[list[int]], pad_id: int = 0,
                  hooks: Hooks = IDENTITY_HOOKS, batch_size: int = 64) -> np.ndarray:
    """Predicted class per sequence, batched, for either model type."""
    preds = np.empty(len(token_lists), dtype=np.int64)
    for idx in iter_batches(len(token_lists), batch_size):
        ids, mask = pad_batch([token_lists[i] for i in idx], pad_id)
        if model.model_type == "disc":
            logits = disc_logits_batch(model, ids, mask, hooks)
            preds[idx] = np.argmax(logits, axis=-1)
        else:
            losses = gen_class_losses_batch(model, ids, mask, hooks)
            preds[idx] = np.argmin(losses, axis=-1)
    return preds


def _require_min_len(token_lists: list[list[int]], model) -> None:
    if model.model_type == "gen" and any(len(t) < 2 for t in token_lists):
        raise ValueError("sequence too short for generative scoring")


def train_model(model, train_ds: Dataset, val_ds: Dataset, vocab: Vocab,
                cfg: TrainConfig, max_len: int | None = None) -> TrainHistory:
    """Train either model type with Adam, early stopping on val accuracy.

    With cfg.train_noise set, every epoch corrupts the raw training texts
    afresh (then re-tokenizes); validation stays clean.
    """
    is_gen = model.model_type == "gen"
    params = {k: v for k, v in model.tensors().items()}
    val_tokens = _gen_safe_tokens(val_ds.token_lists(), is_gen)
    val_labels = val_ds.labels()

    def make_batches(epoch: int, rng: np.random.Generator) -> Iterable:
        ds = train_ds
        if cfg.train_noise is not None:
            ds = corrupt_dataset(train_ds, cfg.train_noise, rng, vocab, max_len)
        token_lists = _gen_safe_tokens(ds.token_lists(), is_gen)
        labels = ds.labels()
        for idx in iter_batches(len(token_lists), cfg.batch_size, rng):
            ids, mask = pad_batch([token_lists[i] for i in idx], vocab.pad_id)
            yield ids, mask, labels[idx]

    def loss_and_grads(batch):
        ids, mask, labels = batch
        if is_gen:
            return gen_loss_and_grads(model, ids, mask, labels)
        return disc_loss_and_grads(model, ids, mask, labels)

    def evaluate() -> float:
        preds = predict_batch(model, val_tokens, vocab.pad_id,
                              batch_size=max(cfg.batch_size, 64))
        return float(np.mean(preds == val_labels))

    return train_loop(params, make_batches, loss_and_grads, evaluate, cfg)


def _gen_safe_tokens(token_lists: list[list[int]], is_gen: bool,
                     pad_id: int = 0) -> list[list[int]]:
    """Generative scoring needs T >= 2; pad singleton sequences."""
    if not is_gen:
        return token_lists
    return [t if len(t) >= 2 else t + [pad_id] for t in token_lists]
