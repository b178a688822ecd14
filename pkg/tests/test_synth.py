"""Tests for the synthetic news-style corpus generator."""

from collections import Counter

import numpy as np
import pytest

from ptqlab.corpus import CLEAN_ALPHABET, load_dataset
from ptqlab.synth import (
    CLASS_WORDS,
    SHARED_WORDS,
    CorpusSpec,
    _draw_words,
    generate_rows,
    make_datasets,
    rows_to_dataset,
    write_rows_csv,
)


def _words(spec, label, count=4000, seed=0):
    return _draw_words(np.random.default_rng(seed), count, label, spec)


class TestCorpusSpecValidation:
    def test_defaults_valid(self):
        CorpusSpec()

    @pytest.mark.parametrize(
        "kwargs, message",
        [
            (dict(num_classes=0), "num_classes"),
            (dict(num_classes=5), "num_classes"),
            (dict(overlap_by_class=(0.5,)), "overlap per class"),
            (dict(overlap_by_class=(0.5, 0.5, 0.5, 1.5)), "in \\[0, 1\\]"),
            (dict(body_words_by_class=((5, 9),)), "body length"),
            (dict(zipf_exponent_by_class=(1.0,)), "frequency exponent"),
            (dict(pool_by_class=(0, 1, 2)), "word pool"),
            (dict(pool_by_class=(0, 1, 2, 4)), "pool indices"),
            (dict(pool_by_class=(0, 1, 2, (1, 7))), "pool indices"),
            (dict(pool_order_by_class=(0,)), "pool order per class"),
            (dict(pool_order_by_class=(0, 0, 0, -1)), "pool order ids"),
            (dict(shared_run_by_class=(1.0,)), "shared run"),
            (dict(shared_run_by_class=(0, 0, 0, -2)), "shared run"),
            (dict(phrase_offset_by_class=(1,)), "phrase offset"),
            (dict(phrase_offset_by_class=(0, 0, 0, -1)), "phrase offset"),
            (dict(phrase_len_by_class=(1,)), "phrase length"),
            (dict(phrase_len_by_class=(1, 1, 1, 0)), "phrase length"),
            (dict(phrase_prob_by_class=(1.0,)), "phrase probability"),
            (dict(phrase_prob_by_class=(1.0, 1.0, 1.0, 1.1)), "probability"),
            (dict(phrase_openers_by_class=(0,)), "opener count"),
            (dict(phrase_openers_by_class=(0, 0, 0, -1)), "opener counts"),
            (dict(shared_zipf_exponent=-0.1), "shared frequency"),
        ],
    )
    def test_rejects_bad_fields(self, kwargs, message):
        with pytest.raises(ValueError, match=message):
            CorpusSpec(**kwargs)

    def test_extra_per_class_entries_allowed(self):
        """Tuples longer than num_classes are fine; only a shortfall is an
        error, so one spec literal can serve several class counts."""
        CorpusSpec(num_classes=2)


class TestDrawWords:
    def test_overlap_one_is_all_shared(self):
        spec = CorpusSpec(overlap_by_class=(1.0, 1.0, 1.0, 1.0))
        assert set(_words(spec, 2, count=500)) <= set(SHARED_WORDS)

    def test_overlap_zero_is_all_class_pool(self):
        spec = CorpusSpec(overlap_by_class=(0.0, 0.0, 0.0, 0.0))
        for label in range(4):
            assert set(_words(spec, label, count=500)) <= set(CLASS_WORDS[label])

    def test_overlap_sets_shared_fraction(self):
        spec = CorpusSpec(overlap_by_class=(0.3, 0.3, 0.3, 0.3))
        drawn = _words(spec, 0, count=6000)
        shared = sum(w in SHARED_WORDS for w in drawn)
        assert abs(shared / len(drawn) - 0.3) < 0.05

    def test_flat_exponent_spreads_over_pool(self):
        spec = CorpusSpec(overlap_by_class=(0.0,) * 4,
                          zipf_exponent_by_class=(0.0,) * 4)
        counts = Counter(_words(spec, 1))
        assert len(counts) == len(CLASS_WORDS[1])
        assert max(counts.values()) < 3 * min(counts.values())

    def test_steep_exponent_concentrates(self):
        spec = CorpusSpec(overlap_by_class=(0.0,) * 4,
                          zipf_exponent_by_class=(6.0,) * 4)
        counts = Counter(_words(spec, 1))
        top = counts.most_common(1)[0][1]
        assert top / sum(counts.values()) > 0.5

    def test_union_pool_support(self):
        """A tuple pool entry concatenates the listed pools, so the class
        draws from their union."""
        spec = CorpusSpec(overlap_by_class=(0.0,) * 4,
                          zipf_exponent_by_class=(0.0,) * 4,
                          pool_by_class=((0, 2), 1, 2, 3))
        seen = set(_words(spec, 0, count=8000))
        union = set(CLASS_WORDS[0]) | set(CLASS_WORDS[2])
        assert seen == union

    def test_pool_order_preserves_support(self):
        spec = CorpusSpec(overlap_by_class=(0.0,) * 4,
                          zipf_exponent_by_class=(0.0,) * 4,
                          pool_order_by_class=(9, 0, 0, 0))
        assert set(_words(spec, 0, count=8000)) == set(CLASS_WORDS[0])

    def test_pool_order_changes_frequency_leader(self):
        """Classes sharing a pool but not an order id concentrate on
        different words under the same steep exponent."""
        base = dict(overlap_by_class=(0.0,) * 4,
                    zipf_exponent_by_class=(3.0,) * 4,
                    pool_by_class=((0, 1, 2, 3),) * 4)
        plain = CorpusSpec(**base)
        ranked = CorpusSpec(**base, pool_order_by_class=(9, 0, 0, 0))
        top_plain = Counter(_words(plain, 0)).most_common(1)[0][0]
        top_ranked = Counter(_words(ranked, 0)).most_common(1)[0][0]
        assert top_plain != top_ranked

    def test_pool_order_deterministic(self):
        """The permutation depends only on the order id, not on the draw
        stream, so two classes with the same pool and id share a leader."""
        spec = CorpusSpec(overlap_by_class=(0.0,) * 4,
                          zipf_exponent_by_class=(3.0,) * 4,
                          pool_by_class=((0, 1), (0, 1), 2, 3),
                          pool_order_by_class=(9, 9, 0, 0))
        a = Counter(_words(spec, 0, seed=5))
        b = Counter(_words(spec, 1, seed=11))
        assert a.most_common(1)[0][0] == b.most_common(1)[0][0]

    def test_phrases_follow_pool_successors(self):
        """With offset 1 and probability 1 every class draw opens a run of
        consecutive pool words."""
        spec = CorpusSpec(overlap_by_class=(0.0,) * 4,
                          phrase_offset_by_class=(1, 0, 0, 0),
                          phrase_len_by_class=(3, 1, 1, 1))
        pool = list(CLASS_WORDS[0])
        drawn = _words(spec, 0, count=300)
        follows = [pool[(pool.index(a) + 1) % len(pool)] == b
                   for a, b in zip(drawn, drawn[1:])]
        assert sum(follows) / len(follows) > 0.6

    def test_phrase_prob_zero_disables_runs(self):
        base = dict(overlap_by_class=(0.0,) * 4,
                    phrase_offset_by_class=(1, 0, 0, 0),
                    phrase_len_by_class=(4, 1, 1, 1))
        pool = list(CLASS_WORDS[0])

        def successor_rate(spec):
            drawn = _words(spec, 0, count=2000)
            hits = [pool[(pool.index(a) + 1) % len(pool)] == b
                    for a, b in zip(drawn, drawn[1:])]
            return sum(hits) / len(hits)

        on = successor_rate(CorpusSpec(**base, phrase_prob_by_class=(1.0,) * 4))
        off = successor_rate(CorpusSpec(**base, phrase_prob_by_class=(0.0,) * 4))
        assert on > 0.7
        assert off < 0.2

    def test_openers_gate_phrase_starts(self):
        """With an opener count only top-ranked draws introduce runs: the
        top word is always followed by its successor, while deep pool words
        are followed by fresh draws."""
        spec = CorpusSpec(overlap_by_class=(0.0,) * 4,
                          zipf_exponent_by_class=(0.8,) * 4,
                          phrase_offset_by_class=(1, 0, 0, 0),
                          phrase_len_by_class=(3, 1, 1, 1),
                          phrase_openers_by_class=(2, 0, 0, 0))
        pool = list(CLASS_WORDS[0])
        drawn = _words(spec, 0, count=6000)
        after = {w: Counter() for w in pool}
        for a, b in zip(drawn, drawn[1:]):
            after[a][b] += 1
        opener_follow = after[pool[0]]
        assert set(opener_follow) == {pool[1]}
        deep = after[pool[20]]
        assert deep and set(deep) != {pool[21]}

    def test_shared_runs_keep_overall_overlap(self):
        """Bursty shared runs change the arrangement, not the fraction."""
        spec = CorpusSpec(overlap_by_class=(0.4,) * 4,
                          shared_run_by_class=(5.0,) * 4)
        drawn = _words(spec, 1, count=8000)
        shared = sum(w in SHARED_WORDS for w in drawn)
        assert abs(shared / len(drawn) - 0.4) < 0.07

    def test_shared_runs_are_bursty(self):
        spec_run = CorpusSpec(overlap_by_class=(0.4,) * 4,
                              shared_run_by_class=(6.0,) * 4)
        spec_iid = CorpusSpec(overlap_by_class=(0.4,) * 4)

        def mean_run(spec):
            flags = [w in SHARED_WORDS for w in _words(spec, 1, count=8000)]
            runs, current = [], 0
            for f in flags:
                if f:
                    current += 1
                elif current:
                    runs.append(current)
                    current = 0
            return float(np.mean(runs))

        assert mean_run(spec_run) > 2 * mean_run(spec_iid)

    def test_exact_count(self):
        drawn = _words(CorpusSpec(), 3, count=37)
        assert len(drawn) == 37


class TestGenerateRows:
    def test_deterministic(self):
        assert generate_rows(60, seed=3) == generate_rows(60, seed=3)

    def test_seed_changes_rows(self):
        assert generate_rows(60, seed=3) != generate_rows(60, seed=4)

    def test_rejects_empty(self):
        with pytest.raises(ValueError, match="n >= 1"):
            generate_rows(0, seed=0)

    def test_balanced_classes(self):
        rows = generate_rows(200, seed=1)
        counts = Counter(label for label, _, _ in rows)
        assert counts == {0: 50, 1: 50, 2: 50, 3: 50}

    def test_near_balance_when_not_divisible(self):
        counts = Counter(label for label, _, _ in generate_rows(10, seed=1))
        assert max(counts.values()) - min(counts.values()) <= 1

    def test_labels_shuffled(self):
        labels = [label for label, _, _ in generate_rows(100, seed=2)]
        assert labels != sorted(labels)

    def test_word_counts_match_spec(self):
        spec = CorpusSpec()
        for label, title, body in generate_rows(120, seed=5, spec=spec):
            lo, hi = spec.body_words_by_class[label]
            assert spec.title_words[0] <= len(title.split()) <= spec.title_words[1]
            assert lo <= len(body.split()) <= hi

    def test_respects_num_classes(self):
        spec = CorpusSpec(num_classes=2)
        labels = {label for label, _, _ in generate_rows(40, seed=0, spec=spec)}
        assert labels == {0, 1}


class TestDatasetConversion:
    def test_rows_to_dataset_cleans_and_joins(self):
        rows = [(2, "Top Story", "body text here")]
        ds = rows_to_dataset(rows, split="train")
        assert ds.samples[0].text == "top story body text here"
        assert ds.samples[0].label == 2
        assert ds.num_classes == 4
        assert ds.split == "train"

    def test_texts_stay_in_clean_alphabet(self):
        ds = rows_to_dataset(generate_rows(80, seed=9), split="test")
        for sample in ds.samples:
            assert set(sample.text) <= set(CLEAN_ALPHABET)

    def test_csv_round_trip(self, tmp_path):
        rows = generate_rows(40, seed=7)
        path = tmp_path / "corpus.csv"
        write_rows_csv(rows, path)
        loaded = load_dataset(path, fmt="csv", num_classes=4)
        direct = rows_to_dataset(rows, split="train")
        assert [s.label for s in loaded.samples] == [s.label for s in direct.samples]
        assert [s.text for s in loaded.samples] == [s.text for s in direct.samples]

    def test_csv_labels_one_based(self, tmp_path):
        path = tmp_path / "corpus.csv"
        write_rows_csv([(0, "t", "b")], path)
        assert path.read_text().startswith('"1"')

    def test_make_datasets_shapes(self):
        train, test = make_datasets(48, 12, seed=0)
        assert len(train.samples) == 48
        assert len(test.samples) == 12
        assert (train.split, test.split) == ("train", "test")

    def test_make_datasets_disjoint_streams(self):
        train, test = make_datasets(40, 40, seed=0)
        train_texts = {s.text for s in train.samples}
        test_texts = {s.text for s in test.samples}
        assert len(train_texts & test_texts) < 5

    def test_make_datasets_deterministic(self):
        a_train, a_test = make_datasets(30, 10, seed=4)
        b_train, b_test = make_datasets(30, 10, seed=4)
        assert [s.text for s in a_train.samples] == [s.text for s in b_train.samples]
        assert [s.text for s in a_test.samples] == [s.text for s in b_test.samples]
