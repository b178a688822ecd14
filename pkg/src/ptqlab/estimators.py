"""Scikit-learn style wrappers around the functional pipeline.

The functional modules keep training, quantization, and evaluation as
plain data-in data-out steps; these classes bundle them into the usual
fit/predict shape so the lab composes with sklearn tooling. X is always
an iterable of raw strings and y an array of labels.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .corpus import (
    CalibrationPlan,
    Dataset,
    LabeledSample,
    build_vocab,
    clean_text,
    sample_calibration,
    split_dataset,
    tokenize,
    tokenize_dataset,
)
from .gpfq import collect_layer_inputs, gpfq_refine
from .models import (
    disc_logits_batch,
    gen_class_losses_batch,
    init_disc_model,
    init_gen_model,
    predict_batch,
    train_model,
)
from .nn import TrainConfig, pad_batch, softmax
from .quant import QuantSpec, calibrate, quantize_weights


def _as_texts(X) -> list[str]:
    if isinstance(X, str):
        raise ValueError("X must be an iterable of strings, not one string")
    texts = [str(t) for t in X]
    if not texts:
        raise ValueError("X is empty")
    return texts


class _LstmTextClassifier(ClassifierMixin, BaseEstimator):
    """Shared fit/predict plumbing; subclasses pick the model type."""

    model_type = ""

    def __init__(self, vocab_size=5000, embedding_dim=64, hidden_dim=64,
                 max_len=64, learning_rate=0.001, batch_size=32,
                 max_epochs=10, patience=2, val_fraction=0.15, seed=0):
        self.vocab_size = vocab_size
        self.embedding_dim = embedding_dim
        self.hidden_dim = hidden_dim
        self.max_len = max_len
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.val_fraction = val_fraction
        self.seed = seed

    def _init_model(self, vocab_size: int, n_classes: int,
                    rng: np.random.Generator):
        raise NotImplementedError

    def _tokenized(self, X, y=None) -> Dataset:
        """Cleaned, tokenized dataset; generative scoring needs length 2,
        so singleton sequences get one pad appended."""
        check_is_fitted(self, "vocab_")
        texts = _as_texts(X)
        labels = np.zeros(len(texts), dtype=int) if y is None else self._encode(y)
        samples = []
        for text, label in zip(texts, labels):
            cleaned = clean_text(text)
            ids = tokenize(cleaned, self.vocab_, self.max_len)
            if self.model_type == "gen" and len(ids) < 2:
                ids = ids + [self.vocab_.pad_id]
            samples.append(LabeledSample(text=cleaned, label=int(label),
                                         tokens=tuple(ids)))
        return Dataset(samples=samples, num_classes=len(self.classes_),
                       split="predict")

    def _encode(self, y) -> np.ndarray:
        y = np.asarray(y)
        idx = np.searchsorted(self.classes_, y)
        bad = (idx >= len(self.classes_)) | (self.classes_[np.minimum(
            idx, len(self.classes_) - 1)] != y)
        if np.any(bad):
            raise ValueError(f"unknown labels: {np.unique(y[bad])}")
        return idx

    def fit(self, X, y):
        texts = _as_texts(X)
        y = np.asarray(y)
        if len(y) != len(texts):
            raise ValueError("X and y length mismatch")
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least 2 classes")
        cleaned = [clean_text(t) for t in texts]
        self.vocab_ = build_vocab(cleaned, max_size=self.vocab_size)
        encoded = np.searchsorted(self.classes_, y)
        full = Dataset(
            samples=[LabeledSample(text=t, label=int(l))
                     for t, l in zip(cleaned, encoded)],
            num_classes=len(self.classes_), split="train")
        train_ds, val_ds = split_dataset(full, 1.0 - self.val_fraction,
                                         seed=self.seed)
        train_tok = tokenize_dataset(train_ds, self.vocab_, self.max_len)
        val_tok = tokenize_dataset(val_ds, self.vocab_, self.max_len)
        rng = np.random.default_rng(self.seed)
        self.model_ = self._init_model(self.vocab_.size, len(self.classes_), rng)
        cfg = TrainConfig(learning_rate=self.learning_rate,
                          batch_size=self.batch_size,
                          max_epochs=self.max_epochs,
                          patience=self.patience, seed=self.seed)
        self.history_ = train_model(self.model_, train_tok, val_tok,
                                    self.vocab_, cfg)
        return self

    def predict(self, X):
        ds = self._tokenized(X)
        preds = predict_batch(self.model_, ds.token_lists(),
                              pad_id=self.vocab_.pad_id)
        return self.classes_[preds]

    def predict_proba(self, X):
        ds = self._tokenized(X)
        scores = []
        token_lists = ds.token_lists()
        for start in range(0, len(token_lists), 64):
            chunk = token_lists[start:start + 64]
            ids, mask = pad_batch(chunk, self.vocab_.pad_id)
            scores.append(self._class_scores(ids, mask))
        return softmax(np.concatenate(scores, axis=0), axis=-1)

    def _class_scores(self, ids, mask) -> np.ndarray:
        raise NotImplementedError


class DiscriminativeLstmClassifier(_LstmTextClassifier):
    """LSTM encoder with a linear class head; probabilities are the
    softmax of the head logits."""

    model_type = "disc"

    def _init_model(self, vocab_size, n_classes, rng):
        return init_disc_model(vocab_size, self.embedding_dim,
                               self.hidden_dim, n_classes, rng)

    def _class_scores(self, ids, mask):
        return disc_logits_batch(self.model_, ids, mask)


class GenerativeLstmClassifier(_LstmTextClassifier):
    """Class-conditional language model; a class's score is the negated
    mean token loss of the sequence under that class."""

    model_type = "gen"

    def __init__(self, vocab_size=5000, embedding_dim=64, hidden_dim=64,
                 label_dim=64, max_len=64, learning_rate=0.001,
                 batch_size=32, max_epochs=10, patience=2,
                 val_fraction=0.15, seed=0):
        super().__init__(vocab_size=vocab_size, embedding_dim=embedding_dim,
                         hidden_dim=hidden_dim, max_len=max_len,
                         learning_rate=learning_rate, batch_size=batch_size,
                         max_epochs=max_epochs, patience=patience,
                         val_fraction=val_fraction, seed=seed)
        self.label_dim = label_dim

    def _init_model(self, vocab_size, n_classes, rng):
        return init_gen_model(vocab_size, self.embedding_dim,
                              self.hidden_dim, n_classes, self.label_dim, rng)

    def _class_scores(self, ids, mask):
        return -gen_class_losses_batch(self.model_, ids, mask)


class PostTrainingQuantizer(ClassifierMixin, BaseEstimator):
    """Quantizes a fitted classifier: weight quantization, then activation
    calibration on the data given to fit, then greedy refinement of the
    final linear layer. The wrapped estimator is left untouched; predict
    runs the quantized model.

    Labels are used only to stratify the calibration sample (conditional
    and coverage schemes); the calibration and refinement passes themselves
    never read them.
    """

    def __init__(self, estimator=None, bitwidth=8, scheme="conditional",
                 coverage_k=None, fraction=0.25, scale_method="percentile",
                 percentile=99.99, refine=True, max_refine_rows=20000,
                 seed=0):
        self.estimator = estimator
        self.bitwidth = bitwidth
        self.scheme = scheme
        self.coverage_k = coverage_k
        self.fraction = fraction
        self.scale_method = scale_method
        self.percentile = percentile
        self.refine = refine
        self.max_refine_rows = max_refine_rows
        self.seed = seed

    def fit(self, X, y=None):
        est = self.estimator
        if est is None or not hasattr(est, "model_"):
            raise ValueError("estimator must be a fitted LSTM classifier")
        if y is None and self.scheme != "unconditional":
            raise ValueError(f"scheme {self.scheme!r} needs labels to stratify")
        self.classes_ = est.classes_
        plan = CalibrationPlan(scheme=self.scheme, fraction=self.fraction,
                               seed=self.seed, coverage_k=self.coverage_k)
        calib = sample_calibration(est._tokenized(X, y), plan)
        spec = QuantSpec(bitwidth=self.bitwidth,
                         scale_method=self.scale_method,
                         percentile=self.percentile)
        qm = quantize_weights(est.model_, spec)
        calibrate(qm, calib, pad_id=est.vocab_.pad_id)
        if self.refine:
            acts = collect_layer_inputs(est.model_, qm, calib,
                                        pad_id=est.vocab_.pad_id,
                                        max_rows=self.max_refine_rows)
            gpfq_refine(qm, acts)
        self.quantized_ = qm
        self.report_ = qm.gpfq_report
        return self

    def predict(self, X):
        check_is_fitted(self, "quantized_")
        ds = self.estimator._tokenized(X)
        preds = self.quantized_.predict(ds.token_lists(),
                                        pad_id=self.estimator.vocab_.pad_id)
        return self.classes_[preds]
