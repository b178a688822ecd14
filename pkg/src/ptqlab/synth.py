"""Synthetic four-class news-style corpus.

Each class owns a pool of topical content words; a shared pool supplies
function words and numerals. Documents mix the two with Zipf-like word
frequencies, so class identity is carried by which content words appear
and how often.

The classes are deliberately uneven in style. Class 0 reads like
generic wire copy: short, mostly shared words, flat frequencies, hard
to predict token by token. Class 3 is formulaic boilerplate: long,
mostly class words, steep frequencies, so a language model can call
the next token with high confidence. Predictability rises with class
index, and with it the spread of hidden states and logits a model
produces. The value ranges a calibration set observes therefore depend
strongly on which classes it covers, which is what the
calibration-composition experiments need.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Dataset, LabeledSample, clean_text

CLASS_WORDS = (
    ("treaty", "border", "minister", "embassy", "summit", "parliament",
     "sanction", "envoy", "regime", "ceasefire", "diplomat", "election",
     "coalition", "protest", "refugee", "senate", "governor", "tribunal",
     "decree", "militia", "province", "premier", "delegation", "armistice",
     "consulate", "mandate", "uprising", "accord", "veto", "customs"),
    ("playoff", "striker", "tournament", "goalkeeper", "homerun", "marathon",
     "stadium", "coach", "referee", "penalty", "league", "transfer",
     "injury", "champion", "sprint", "batting", "fixture", "midfield",
     "podium", "relay", "roster", "huddle", "dugout", "slalom", "regatta",
     "innings", "derby", "kickoff", "lineup", "overtime"),
    ("shares", "merger", "dividend", "quarterly", "earnings", "startup",
     "takeover", "inflation", "futures", "retailer", "profit", "lawsuit",
     "bankruptcy", "tariff", "investor", "audit", "forecast", "hedge",
     "payroll", "revenue", "stockpile", "subsidy", "venture", "ledger",
     "margin", "broker", "buyout", "surplus", "pension", "invoice"),
    ("telescope", "genome", "quantum", "satellite", "neuron", "algorithm",
     "browser", "vaccine", "asteroid", "reactor", "silicon", "protein",
     "galaxy", "encryption", "robot", "fossil", "molecule", "spacecraft",
     "laser", "enzyme", "microchip", "particle", "orbit", "cipher",
     "antenna", "polymer", "nebula", "circuit", "sensor", "plasma"),
)

SHARED_WORDS = (
    "the", "a", "of", "to", "in", "on", "for", "and", "with", "after",
    "over", "amid", "report", "announced", "today", "officials", "sources",
    "group", "plan", "deal", "talks", "move", "latest", "review", "update",
    "statement", "early", "major", "record", "annual", "global", "local",
    "national", "weekly", "leaders", "agency", "program", "figures",
    "growth", "decline", "surge", "crisis", "outlook", "effort", "support",
    "pressure", "response", "campaign", "meeting", "decision", "7", "12",
    "50", "100", "2024", "said", "new", "first", "last", "this", "week",
    "month", "year", "next", "despite", "between", "among", "against",
    "during", "before", "while", "under", "above", "ahead", "draft",
    "notes", "claims", "views", "terms", "range", "level", "share",
    "raise", "calls", "plans", "signs", "steps", "costs", "gains",
    "limit", "value", "trend", "focus", "shift", "phase", "stage",
    "round", "panel", "board", "chief", "staff", "press",
)


@dataclass(frozen=True)
class CorpusSpec:
    """Generation knobs, all per class.

    `overlap_by_class[k]` is the probability a word slot in a class-k
    document draws from the shared pool instead of the class pool;
    `zipf_exponent_by_class[k]` sets how concentrated the class pool
    draws are. Low overlap plus a steep exponent makes a class
    repetitive and highly predictable; high overlap plus a flat
    exponent makes it diffuse. A single-class calibration set then
    genuinely under-covers the value ranges the other classes drive."""

    num_classes: int = 4
    overlap_by_class: tuple[float, ...] = (0.85, 0.5, 0.3, 0.15)
    title_words: tuple[int, int] = (3, 6)
    body_words_by_class: tuple[tuple[int, int], ...] = (
        (8, 14), (14, 22), (20, 30), (26, 38))
    zipf_exponent_by_class: tuple[float, ...] = (0.4, 1.2, 2.5, 4.0)
    pool_by_class: tuple[int | tuple[int, ...], ...] = (0, 1, 2, 3)
    pool_order_by_class: tuple[int, ...] = (0, 0, 0, 0)
    shared_run_by_class: tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)
    phrase_offset_by_class: tuple[int, ...] = (0, 0, 0, 0)
    phrase_len_by_class: tuple[int, ...] = (1, 1, 1, 1)
    phrase_prob_by_class: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
    phrase_openers_by_class: tuple[int, ...] = (0, 0, 0, 0)
    shared_zipf_exponent: float = 1.0

    def __post_init__(self) -> None:
        if not 1 <= self.num_classes <= len(CLASS_WORDS):
            raise ValueError(
                f"num_classes must be in [1, {len(CLASS_WORDS)}]")
        if len(self.overlap_by_class) < self.num_classes:
            raise ValueError("need an overlap per class")
        if any(not 0.0 <= v <= 1.0 for v in self.overlap_by_class):
            raise ValueError("overlap must be in [0, 1]")
        if len(self.body_words_by_class) < self.num_classes:
            raise ValueError("need a body length range per class")
        if len(self.zipf_exponent_by_class) < self.num_classes:
            raise ValueError("need a frequency exponent per class")
        if len(self.pool_by_class) < self.num_classes:
            raise ValueError("need a word pool per class")
        flat = [p for sel in self.pool_by_class
                for p in (sel if isinstance(sel, tuple) else (sel,))]
        if any(not 0 <= p < len(CLASS_WORDS) for p in flat):
            raise ValueError(f"pool indices must be in [0, {len(CLASS_WORDS)})")
        if len(self.pool_order_by_class) < self.num_classes:
            raise ValueError("need a pool order per class")
        if any(v < 0 for v in self.pool_order_by_class):
            raise ValueError("pool order ids must be >= 0")
        if len(self.shared_run_by_class) < self.num_classes:
            raise ValueError("need a shared run length per class")
        if any(v < 0 for v in self.shared_run_by_class):
            raise ValueError("shared run length must be >= 0")
        if len(self.phrase_offset_by_class) < self.num_classes:
            raise ValueError("need a phrase offset per class")
        if any(v < 0 for v in self.phrase_offset_by_class):
            raise ValueError("phrase offset must be >= 0")
        if len(self.phrase_len_by_class) < self.num_classes:
            raise ValueError("need a phrase length per class")
        if any(v < 1 for v in self.phrase_len_by_class):
            raise ValueError("phrase length must be >= 1")
        if len(self.phrase_prob_by_class) < self.num_classes:
            raise ValueError("need a phrase probability per class")
        if any(not 0.0 <= v <= 1.0 for v in self.phrase_prob_by_class):
            raise ValueError("phrase probability must be in [0, 1]")
        if len(self.phrase_openers_by_class) < self.num_classes:
            raise ValueError("need an opener count per class")
        if any(v < 0 for v in self.phrase_openers_by_class):
            raise ValueError("opener counts must be >= 0")
        if self.shared_zipf_exponent < 0:
            raise ValueError("shared frequency exponent must be >= 0")


PROFILES: dict[str, CorpusSpec] = {
    "default": CorpusSpec(),
    # Composition profile: one short boilerplate class whose top words
    # always open the same five-word runs, against three long diffuse
    # classes that share one vocabulary union under different rankings.
    # Single-class calibration then sees sharp next-token logits that the
    # other classes never produce, which is the contrast the
    # calibration-composition experiments measure.
    "composition": CorpusSpec(
        overlap_by_class=(0.10, 0.45, 0.40, 0.40),
        body_words_by_class=((9, 13), (30, 42), (30, 42), (30, 42)),
        zipf_exponent_by_class=(0.0, 1.2, 1.8, 1.5),
        pool_by_class=((0, 1, 2, 3),) * 4,
        pool_order_by_class=(1, 14, 15, 15),
        phrase_offset_by_class=(1, 0, 0, 0),
        phrase_len_by_class=(5, 1, 1, 1),
        phrase_openers_by_class=(4, 0, 0, 0),
        shared_zipf_exponent=0.5,
    ),
}


def _zipf_probs(size: int, exponent: float = 1.0) -> np.ndarray:
    weights = 1.0 / (np.arange(size) + 2.0) ** exponent
    return weights / weights.sum()


def _draw_words(rng: np.random.Generator, count: int, label: int,
                spec: CorpusSpec) -> list[str]:
    """Word slots flip between the shared pool (flat Zipf) and the class
    pool, whose concentration is the class's frequency exponent. High
    exponents yield repetitive, highly predictable documents. A pool entry
    may also be a tuple of pool indices, meaning their concatenation, so
    several classes can draw from one joint vocabulary. A nonzero pool
    order id reranks that vocabulary with a fixed permutation before the
    exponent applies: classes sharing a pool but not an order id have the
    same support with different frequent words, so no word is ever
    impossible under any class. Classes sharing both differ only in
    exponent and are separable just by word frequencies, with small
    margins.

    With a nonzero shared run length the flips are made in bursts: shared
    words arrive in geometric runs of that mean instead of token by token,
    so class evidence is separated by stretches of generic text. The class
    run mean is set so the overall shared fraction stays at the overlap.

    A nonzero phrase offset turns class draws into set phrases: the drawn
    word is followed by pool words `offset` places apart, `phrase_len`
    words in total, fired on each class draw with `phrase_prob`. With a
    nonzero opener count only draws of the top-ranked words that many or
    fewer open a phrase; those few words then always introduce the same
    run, so the phrase body is predictable from the opener while the rest
    of the document stays loose."""
    selected = spec.pool_by_class[label]
    if isinstance(selected, tuple):
        class_pool = [w for p in selected for w in CLASS_WORDS[p]]
    else:
        class_pool = list(CLASS_WORDS[selected])
    order_id = spec.pool_order_by_class[label]
    if order_id:
        order = np.random.default_rng(order_id).permutation(len(class_pool))
        class_pool = [class_pool[i] for i in order]
    class_probs = _zipf_probs(len(class_pool),
                              spec.zipf_exponent_by_class[label])
    shared_probs = _zipf_probs(len(SHARED_WORDS), spec.shared_zipf_exponent)
    overlap = spec.overlap_by_class[label]
    run_mean = spec.shared_run_by_class[label]
    flags: list[bool] = []
    if run_mean > 0 and 0.0 < overlap < 1.0:
        class_mean = run_mean * (1.0 - overlap) / overlap
        use_shared = rng.random() < overlap
        while len(flags) < count:
            mean = run_mean if use_shared else class_mean
            run = int(rng.geometric(min(1.0, 1.0 / max(mean, 1.0))))
            flags.extend([use_shared] * run)
            use_shared = not use_shared
        flags = flags[:count]
    else:
        flags = [rng.random() < overlap for _ in range(count)]
    offset = spec.phrase_offset_by_class[label]
    phrase_len = spec.phrase_len_by_class[label] if offset > 0 else 1
    phrase_prob = spec.phrase_prob_by_class[label]
    openers = spec.phrase_openers_by_class[label]
    words: list[str] = []
    skip = 0
    for shared in flags:
        if skip > 0:
            skip -= 1
            continue
        if shared:
            words.append(SHARED_WORDS[rng.choice(len(SHARED_WORDS),
                                                 p=shared_probs)])
            continue
        start = int(rng.choice(len(class_pool), p=class_probs))
        words.append(class_pool[start])
        if phrase_len > 1 and openers and start >= openers:
            continue
        if phrase_len > 1 and rng.random() >= phrase_prob:
            continue
        for j in range(1, phrase_len):
            if len(words) >= count:
                break
            words.append(class_pool[(start + j * offset) % len(class_pool)])
            skip += 1
    return words[:count]


def generate_rows(n: int, seed: int,
                  spec: CorpusSpec = CorpusSpec()) -> list[tuple[int, str, str]]:
    """n (label, title, body) rows, classes balanced, order shuffled."""
    if n < 1:
        raise ValueError("need n >= 1")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % spec.num_classes
    labels = labels[rng.permutation(n)]
    rows = []
    for label in labels:
        lo, hi = spec.body_words_by_class[int(label)]
        n_title = int(rng.integers(spec.title_words[0],
                                   spec.title_words[1] + 1))
        n_body = int(rng.integers(lo, hi + 1))
        title = " ".join(_draw_words(rng, n_title, int(label), spec))
        body = " ".join(_draw_words(rng, n_body, int(label), spec))
        rows.append((int(label), title, body))
    return rows


def rows_to_dataset(rows: list[tuple[int, str, str]], split: str,
                    num_classes: int = 4) -> Dataset:
    samples = [LabeledSample(text=clean_text(f"{title} {body}"), label=label)
               for label, title, body in rows]
    return Dataset(samples=samples, num_classes=num_classes, split=split)


def write_rows_csv(rows: list[tuple[int, str, str]], path: str | Path) -> None:
    """AG-News-style CSV: (1-based class index, title, description)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_ALL)
        for label, title, body in rows:
            writer.writerow([label + 1, title, body])


def make_datasets(n_train: int, n_test: int, seed: int,
                  spec: CorpusSpec = CorpusSpec()) -> tuple[Dataset, Dataset]:
    """Train and test splits from disjoint generator streams."""
    train_rows = generate_rows(n_train, seed, spec)
    test_rows = generate_rows(n_test, seed + 1_000_003, spec)
    return (rows_to_dataset(train_rows, "train", spec.num_classes),
            rows_to_dataset(test_rows, "test", spec.num_classes))
