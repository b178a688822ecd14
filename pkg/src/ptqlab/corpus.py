"""Text corpus handling: cleaning, vocabulary, tokenization, dataset IO,
character-level noise injection, and calibration-set sampling."""

from __future__ import annotations

import csv
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

# characters that survive clean_text; also the default noise alphabet
CLEAN_ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789 "

_NON_CLEAN_RE = re.compile(r"[^a-z0-9\s]+")


class DatasetError(ValueError):
    """Raised for malformed dataset files or infeasible sampling requests."""


@dataclass(frozen=True)
class Vocab:
    """Token <-> id mapping with reserved pad/unk entries.

    Ids 0 and 1 are always pad and unk; ranked corpus tokens follow.
    """

    token_to_id: dict[str, int]
    id_to_token: list[str]
    pad_id: int = 0
    unk_id: int = 1

    def __post_init__(self) -> None:
        if self.pad_id == self.unk_id:
            raise ValueError("pad_id and unk_id must differ")
        if len(self.id_to_token) < 2:
            raise ValueError("vocabulary must contain at least pad and unk")
        for token, idx in self.token_to_id.items():
            if self.id_to_token[idx] != token:
                raise ValueError(f"token_to_id/id_to_token mismatch at id {idx}")

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def id_for(self, token: str) -> int:
        return self.token_to_id.get(token, self.unk_id)


@dataclass(frozen=True)
class LabeledSample:
    """One document: raw (cleaned) text, optional token ids, class label."""

    text: str
    label: int
    tokens: tuple[int, ...] | None = None


@dataclass
class Dataset:
    samples: list[LabeledSample]
    num_classes: int
    split: str = "train"

    def __post_init__(self) -> None:
        if not self.samples:
            raise DatasetError("empty dataset")
        bad = [s.label for s in self.samples if not 0 <= s.label < self.num_classes]
        if bad:
            raise DatasetError(f"label {bad[0]} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.samples)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def texts(self) -> list[str]:
        return [s.text for s in self.samples]

    def token_lists(self) -> list[list[int]]:
        if any(s.tokens is None for s in self.samples):
            raise ValueError("dataset is not tokenized; call tokenize_dataset first")
        return [list(s.tokens) for s in self.samples]


@dataclass(frozen=True)
class CalibrationPlan:
    """How to draw a calibration subset from a training set.

    scheme 'unconditional' samples uniformly at random, 'conditional'
    stratifies equally per class, and 'coverage' restricts to the first
    `coverage_k` class indices.
    """

    scheme: str = "unconditional"
    fraction: float = 0.25
    seed: int = 0
    coverage_k: int | None = None

    def __post_init__(self) -> None:
        if self.scheme not in ("unconditional", "conditional", "coverage"):
            raise ValueError(f"unknown calibration scheme {self.scheme!r}")
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction must be in (0, 1]")
        if self.scheme == "coverage":
            if self.coverage_k is None or self.coverage_k < 1:
                raise ValueError("coverage scheme needs coverage_k >= 1")


@dataclass(frozen=True)
class NoiseSpec:
    """Character-substitution noise: each character is independently
    replaced with probability epsilon by a uniform draw from alphabet."""

    epsilon: float
    alphabet: str = CLEAN_ALPHABET
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must be in [0, 1]")
        if self.epsilon > 0 and not self.alphabet:
            raise ValueError("noise alphabet is empty but epsilon > 0")


def clean_text(raw: str) -> str:
    """Lowercase, drop characters outside [a-z0-9 ], collapse whitespace."""
    stripped = _NON_CLEAN_RE.sub("", raw.lower())
    return " ".join(stripped.split())


def build_vocab(corpus: Iterable[str], max_size: int, min_freq: int = 1) -> Vocab:
    """Frequency-ranked vocabulary over whitespace-split tokens.

    Ties in frequency break lexicographically so builds are deterministic.
    Ids: 0 pad, 1 unk, then the top (max_size - 2) ranked tokens.
    """
    if max_size < 2:
        raise ValueError("max_size must be >= 2 to fit pad and unk")
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    counts: Counter[str] = Counter()
    for text in corpus:
        counts.update(text.split())
    ranked = sorted(
        (tok for tok, c in counts.items() if c >= min_freq),
        key=lambda tok: (-counts[tok], tok),
    )[: max_size - 2]
    id_to_token = [PAD_TOKEN, UNK_TOKEN, *ranked]
    token_to_id = {tok: i for i, tok in enumerate(id_to_token)}
    return Vocab(token_to_id=token_to_id, id_to_token=id_to_token)


def tokenize(text: str, vocab: Vocab, max_len: int | None = None) -> list[int]:
    """Map whitespace-split tokens to ids; unknown -> unk, empty -> [pad]."""
    ids = [vocab.id_for(tok) for tok in text.split()]
    if max_len is not None:
        ids = ids[:max_len]
    if not ids:
        ids = [vocab.pad_id]
    return ids


def tokenize_dataset(dataset: Dataset, vocab: Vocab, max_len: int | None = None) -> Dataset:
    samples = [
        replace(s, tokens=tuple(tokenize(s.text, vocab, max_len)))
        for s in dataset.samples
    ]
    return Dataset(samples=samples, num_classes=dataset.num_classes, split=dataset.split)


def inject_noise(text: str, spec: NoiseSpec, rng: np.random.Generator) -> str:
    """Corrupt a string by independent per-character substitution.

    Length is always preserved; the replacement draw may coincide with the
    original character.
    """
    if spec.epsilon == 0.0 or not text:
        return text
    chars = np.frombuffer(text.encode("utf-32-le"), dtype=np.uint32).copy()
    hit = rng.random(len(chars)) < spec.epsilon
    n_hit = int(hit.sum())
    if n_hit:
        alphabet = np.frombuffer(spec.alphabet.encode("utf-32-le"), dtype=np.uint32)
        chars[hit] = rng.choice(alphabet, size=n_hit)
    return chars.tobytes().decode("utf-32-le")


def corrupt_dataset(dataset: Dataset, spec: NoiseSpec, rng: np.random.Generator,
                    vocab: Vocab, max_len: int | None = None) -> Dataset:
    """Noise every text and re-tokenize, so corrupted words fall back to
    unknown or other vocabulary entries."""
    samples = []
    for s in dataset.samples:
        noisy = inject_noise(s.text, spec, rng)
        samples.append(LabeledSample(text=noisy, label=s.label,
                                     tokens=tuple(tokenize(noisy, vocab, max_len))))
    return Dataset(samples=samples, num_classes=dataset.num_classes, split=dataset.split)


def load_dataset(path: str | Path, fmt: str = "csv",
                 num_classes: int | None = None, split: str = "train") -> Dataset:
    """Load a labeled text dataset.

    csv rows are (class_index_1based, title, description); jsonl rows are
    {"label": <0-based int>, "text": str}. Text is cleaned on load and the
    class count is inferred from the max label unless given.
    """
    path = Path(path)
    if fmt == "csv":
        rows = _read_csv_rows(path)
    elif fmt == "jsonl":
        rows = _read_jsonl_rows(path)
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")
    if not rows:
        raise DatasetError(f"empty dataset: {path}")
    max_label = max(label for label, _ in rows)
    n_classes = num_classes if num_classes is not None else max_label + 1
    if max_label >= n_classes:
        raise DatasetError(f"label {max_label} outside [0, {n_classes}) in {path}")
    samples = [LabeledSample(text=text, label=label) for label, text in rows]
    return Dataset(samples=samples, num_classes=n_classes, split=split)


def _read_csv_rows(path: Path) -> list[tuple[int, str]]:
    rows: list[tuple[int, str]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, record in enumerate(csv.reader(fh), start=1):
            if not record:
                continue
            if len(record) != 3:
                raise DatasetError(f"{path}:{lineno}: expected 3 columns, got {len(record)}")
            raw_label, title, description = record
            try:
                label_1based = int(raw_label)
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: bad class index {raw_label!r}") from exc
            if label_1based < 1:
                raise DatasetError(f"{path}:{lineno}: class index {label_1based} is not 1-based")
            rows.append((label_1based - 1, clean_text(title + " " + description)))
    return rows


def _read_jsonl_rows(path: Path) -> list[tuple[int, str]]:
    rows: list[tuple[int, str]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                label = int(obj["label"])
                text = obj["text"]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: malformed jsonl row") from exc
            if label < 0:
                raise DatasetError(f"{path}:{lineno}: negative label {label}")
            rows.append((label, clean_text(text)))
    return rows


def save_dataset_csv(dataset: Dataset, path: str | Path) -> None:
    """Write (class_index_1based, title, description) rows; the full text
    goes into the description column."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_ALL)
        for s in dataset.samples:
            writer.writerow([s.label + 1, "", s.text])


def split_dataset(dataset: Dataset, train_fraction: float = 0.8,
                  seed: int = 0) -> tuple[Dataset, Dataset]:
    """Deterministic shuffled split; first ceil(fraction * n) samples train."""
    n = len(dataset)
    if n < 2:
        raise DatasetError("need at least 2 samples to split")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    order = np.random.default_rng(seed).permutation(n)
    cut = math.ceil(train_fraction * n)
    train = [dataset.samples[i] for i in order[:cut]]
    val = [dataset.samples[i] for i in order[cut:]]
    return (
        Dataset(train, num_classes=dataset.num_classes, split="train"),
        Dataset(val, num_classes=dataset.num_classes, split="val"),
    )


def sample_calibration(dataset: Dataset, plan: CalibrationPlan) -> Dataset:
    """Draw a calibration subset per the plan.

    Labels are kept on the returned samples for bookkeeping only; the
    calibration and GPFQ stages never consume them.
    """
    n = len(dataset)
    m = math.ceil(plan.fraction * n)
    rng = np.random.default_rng(plan.seed)
    labels = dataset.labels()

    if plan.scheme == "unconditional":
        picks = rng.choice(n, size=m, replace=False)
    else:
        k = dataset.num_classes if plan.scheme == "conditional" else plan.coverage_k
        assert k is not None
        if k > dataset.num_classes:
            raise ValueError(f"coverage_k {k} exceeds num_classes {dataset.num_classes}")
        if plan.scheme == "conditional":
            base, extra = divmod(m, k)
            quotas = [base + (1 if c < extra else 0) for c in range(k)]
        else:
            quotas = [m // k] * k
        picks_list: list[np.ndarray] = []
        for cls, quota in enumerate(quotas):
            pool = np.flatnonzero(labels == cls)
            if len(pool) < quota:
                raise DatasetError(
                    f"class {cls} has {len(pool)} samples, {quota} needed for calibration")
            picks_list.append(rng.choice(pool, size=quota, replace=False))
        picks = np.concatenate(picks_list) if picks_list else np.array([], dtype=np.int64)

    if len(picks) < 1:
        raise DatasetError("calibration plan selects no samples")
    samples = [dataset.samples[i] for i in picks]
    return Dataset(samples, num_classes=dataset.num_classes, split="calib")
