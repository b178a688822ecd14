"""Tests for the discriminative and generative classifiers: forward
composition, classification rules, batched-vs-single consistency, gradient
checks against finite differences, and end-to-end training on separable
toy corpora."""

import math

import numpy as np
import pytest

from ptqlab.corpus import (
    Dataset,
    LabeledSample,
    build_vocab,
    split_dataset,
    tokenize_dataset,
)
from ptqlab.models import (
    DiscModel,
    GenModel,
    Hooks,
    disc_classify,
    disc_logits,
    disc_logits_batch,
    disc_loss_and_grads,
    gen_class_losses_batch,
    gen_classify,
    gen_loss_and_grads,
    gen_sequence_loss,
    gen_token_losses_batch,
    init_disc_model,
    init_gen_model,
    predict_batch,
    run_encoder,
    train_model,
)
from ptqlab.nn import (
    LstmParams,
    TrainConfig,
    embedding_forward,
    linear_forward,
    lstm_forward,
    pad_batch,
    softmax,
)


def _zero_disc(vocab=5, dim=4, hidden=3, classes=2):
    return DiscModel(
        embedding=np.zeros((vocab, dim)),
        lstm=LstmParams(np.zeros((4 * hidden, dim)), np.zeros((4 * hidden, hidden)),
                        np.zeros(4 * hidden)),
        head_w=np.zeros((classes, hidden)),
        head_b=np.zeros(classes),
    )


def _zero_gen(vocab=4, dim=3, hidden=3, classes=3, label_dim=2):
    return GenModel(
        embedding=np.zeros((vocab, dim)),
        label_embedding=np.zeros((classes, label_dim)),
        lstm=LstmParams(np.zeros((4 * hidden, dim)), np.zeros((4 * hidden, hidden)),
                        np.zeros(4 * hidden)),
        decoder_w=np.zeros((vocab, hidden + label_dim)),
        decoder_b=np.zeros(vocab),
    )


class TestDiscForward:
    def test_zero_model_uniform(self):
        model = _zero_disc()
        probs = softmax(disc_logits(model, [1, 2, 3]))
        np.testing.assert_allclose(probs, [0.5, 0.5], atol=1e-12)

    def test_bias_dominates_zero_weights(self):
        model = _zero_disc()
        model.head_b[:] = [0.0, 1.0]
        for tokens in ([1], [2, 3, 4], [0, 0]):
            np.testing.assert_allclose(disc_logits(model, tokens), [0.0, 1.0])

    def test_matches_composition_of_primitives(self):
        rng = np.random.default_rng(0)
        model = init_disc_model(10, 5, 6, 3, rng, dtype=np.float64)
        tokens = [3, 1, 7, 2]
        emb = embedding_forward(model.embedding, tokens)
        _, final = lstm_forward(model.lstm, emb)
        expected = linear_forward(model.head_w, model.head_b, final.h)
        np.testing.assert_allclose(disc_logits(model, tokens), expected, atol=1e-12)

    def test_batched_matches_single_with_mixed_lengths(self):
        rng = np.random.default_rng(1)
        model = init_disc_model(12, 5, 6, 4, rng, dtype=np.float64)
        seqs = [[1, 2, 3, 4, 5], [6], [7, 8, 9]]
        ids, mask = pad_batch(seqs, pad_id=0)
        batched = disc_logits_batch(model, ids, mask)
        for row, seq in enumerate(seqs):
            np.testing.assert_allclose(batched[row], disc_logits(model, seq),
                                       atol=1e-10)


class TestDiscClassify:
    def test_argmax(self):
        model = _zero_disc(classes=4)
        model.head_b[:] = [0.0, 1.0, 0.0, 0.0]
        assert disc_classify(model, [1, 2]) == 1

    def test_tie_goes_to_lowest_index(self):
        assert disc_classify(_zero_disc(classes=4), [1, 2]) == 0

    def test_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(2)
        model = init_disc_model(10, 4, 5, 3, rng)
        for _ in range(20):
            tokens = rng.integers(0, 10, size=rng.integers(1, 8)).tolist()
            logits = disc_logits(model, tokens)
            assert int(np.argmax(logits)) == int(np.argmax(3.0 * logits + 7.0))
            assert int(np.argmax(logits)) == int(np.argmax(softmax(logits)))


class TestGenSequenceLoss:
    def test_zero_model_uniform_decoder(self):
        model = _zero_gen(vocab=4)
        loss = gen_sequence_loss(model, [0, 1, 2, 3, 1], 0)
        assert loss == pytest.approx(4 * math.log(4), rel=1e-6)

    def test_bias_forcing_true_tokens(self):
        model = _zero_gen(vocab=4)
        model.decoder_b[2] = 50.0
        # every next token is 2, which the bias makes near-certain
        assert gen_sequence_loss(model, [1, 2, 2, 2], 0) == pytest.approx(0.0, abs=1e-6)

    def test_matches_stepwise_oracle(self):
        rng = np.random.default_rng(3)
        model = init_gen_model(8, 4, 5, 3, 3, rng, dtype=np.float64)
        tokens = [2, 5, 1, 7, 0]
        label = 1
        emb = embedding_forward(model.embedding, tokens)
        states, _ = lstm_forward(model.lstm, emb)
        expected = 0.0
        for t in range(len(tokens) - 1):
            z = model.decoder_w @ np.concatenate(
                [states[t], model.label_embedding[label]]) + model.decoder_b
            expected += -math.log(softmax(z)[tokens[t + 1]])
        assert gen_sequence_loss(model, tokens, label) == pytest.approx(
            expected, abs=1e-9)

    def test_too_short_rejected(self):
        with pytest.raises(ValueError, match="too short"):
            gen_sequence_loss(_zero_gen(), [1], 0)

    def test_additive_over_splits_with_threaded_state(self):
        """Per-step losses from the full pass equal losses recomputed from
        any split point when the LSTM state is carried across the split."""
        rng = np.random.default_rng(4)
        model = init_gen_model(9, 4, 6, 2, 3, rng, dtype=np.float64)
        tokens = [1, 4, 2, 8, 3, 5]
        label = 1
        emb = embedding_forward(model.embedding, tokens)
        states, _ = lstm_forward(model.lstm, emb)

        def step_loss(t):
            z = model.decoder_w @ np.concatenate(
                [states[t], model.label_embedding[label]]) + model.decoder_b
            return -math.log(softmax(z)[tokens[t + 1]])

        total = gen_sequence_loss(model, tokens, label)
        for split in range(1, len(tokens) - 1):
            prefix = sum(step_loss(t) for t in range(split))
            suffix = sum(step_loss(t) for t in range(split, len(tokens) - 1))
            assert total == pytest.approx(prefix + suffix, abs=1e-9)


class TestGenClassify:
    def test_single_class(self):
        model = _zero_gen(classes=1)
        assert gen_classify(model, [1, 2, 3]) == 0

    def test_zero_model_ties_to_zero(self):
        model = _zero_gen(classes=3)
        assert gen_classify(model, [0, 1, 2]) == 0

    def test_recovers_planted_class(self):
        """Label embeddings steer the decoder toward class-exclusive
        tokens, so sequences of those tokens are classified correctly."""
        model = _zero_gen(vocab=4, classes=2, label_dim=2)
        model.label_embedding[0] = [1.0, 0.0]
        model.label_embedding[1] = [0.0, 1.0]
        # decoder: label 0 boosts tokens 0/1, label 1 boosts tokens 2/3
        model.decoder_w[0, 3] = 5.0
        model.decoder_w[1, 3] = 5.0
        model.decoder_w[2, 4] = 5.0
        model.decoder_w[3, 4] = 5.0
        assert gen_classify(model, [0, 1, 0, 1]) == 0
        assert gen_classify(model, [2, 3, 2, 3]) == 1

    def test_equals_likelihood_maximization(self):
        rng = np.random.default_rng(5)
        model = init_gen_model(7, 4, 5, 4, 3, rng)
        for _ in range(10):
            tokens = rng.integers(0, 7, size=5).tolist()
            losses = [gen_sequence_loss(model, tokens, y) for y in range(4)]
            assert gen_classify(model, tokens) == int(
                np.argmax(np.exp(-np.array(losses))))

    def test_prior_correction_changes_scores(self):
        model = _zero_gen(classes=2)
        prior = np.log(np.array([0.01, 0.99]))
        assert gen_classify(model, [1, 2], class_log_prior=prior) == 1


class TestGenBatched:
    def test_class_losses_match_single(self):
        rng = np.random.default_rng(6)
        model = init_gen_model(11, 5, 6, 3, 4, rng, dtype=np.float64)
        seqs = [[1, 2, 3, 4, 5, 6], [7, 8], [9, 10, 1]]
        ids, mask = pad_batch(seqs, pad_id=0)
        losses = gen_class_losses_batch(model, ids, mask)
        for row, seq in enumerate(seqs):
            for y in range(3):
                assert losses[row, y] == pytest.approx(
                    gen_sequence_loss(model, seq, y), abs=1e-9)

    def test_token_losses_match_and_sum(self):
        rng = np.random.default_rng(7)
        model = init_gen_model(9, 4, 5, 2, 3, rng, dtype=np.float64)
        seqs = [[1, 2, 3, 4], [5, 6]]
        labels = np.array([1, 0])
        ids, mask = pad_batch(seqs, pad_id=0)
        tok = gen_token_losses_batch(model, ids, mask, labels)
        assert tok.shape == (2, 3)
        assert tok[1, 1] == 0.0 and tok[1, 2] == 0.0
        for row, seq in enumerate(seqs):
            assert tok[row].sum() == pytest.approx(
                gen_sequence_loss(model, seq, int(labels[row])), abs=1e-9)


class TestEncoderHooks:
    def test_observe_sees_only_real_positions(self):
        rng = np.random.default_rng(8)
        model = init_disc_model(10, 4, 5, 2, rng)
        seqs = [[1, 2, 3], [4]]
        ids, mask = pad_batch(seqs, pad_id=0)
        seen = {}

        class Recorder(Hooks):
            def observe(self, site, values, count=1):
                seen.setdefault(site, []).append((values.shape[0], count))

        disc_logits_batch(model, ids, mask, Recorder())
        assert sum(n for n, _ in seen["embedding_out"]) == 4
        assert sum(n for n, _ in seen["lstm_hidden"]) == 4
        assert sum(n for n, _ in seen["head_in"]) == 2

    def test_transform_rewrites_dataflow(self):
        rng = np.random.default_rng(9)
        model = init_disc_model(10, 4, 5, 2, rng, dtype=np.float64)

        class Zeroing(Hooks):
            def transform(self, site, values):
                if site == "head_in":
                    return np.zeros_like(values)
                return values

        ids, mask = pad_batch([[1, 2]], pad_id=0)
        logits = disc_logits_batch(model, ids, mask, Zeroing())
        np.testing.assert_allclose(logits[0], model.head_b, atol=1e-12)

    def test_gen_decoder_site_multiplicities(self):
        rng = np.random.default_rng(10)
        model = init_gen_model(8, 4, 5, 3, 3, rng)
        seqs = [[1, 2, 3], [4, 5]]
        ids, mask = pad_batch(seqs, pad_id=0)
        rows = {"decoder_in": 0}

        class Counter(Hooks):
            def observe(self, site, values, count=1):
                if site == "decoder_in":
                    rows[site] += values.shape[0] * count

        gen_class_losses_batch(model, ids, mask, Counter())
        # 3 scored steps, 3 classes: hidden rows 3*3=9, label rows 3*3=9
        assert rows["decoder_in"] == 18


def _finite_difference_check(model, tensors, loss_fn, eps=1e-5, tol=1e-6):
    loss, grads = loss_fn()
    for name, tensor in tensors.items():
        flat = tensor.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up, _ = loss_fn()
            flat[i] = orig - eps
            down, _ = loss_fn()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * eps)
        analytic = grads[name].reshape(-1)
        rel = np.linalg.norm(analytic - numeric) / max(
            np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
        assert rel < tol, f"{name}: relative error {rel:.2e}"


class TestGradients:
    def test_disc_gradients_match_finite_differences(self):
        rng = np.random.default_rng(11)
        model = init_disc_model(20, 8, 8, 3, rng, dtype=np.float64)
        seqs = [[1, 5, 9, 13, 17], [2, 6, 10], [3]]
        ids, mask = pad_batch(seqs, pad_id=0)
        labels = np.array([0, 2, 1])
        _finite_difference_check(
            model, model.tensors(),
            lambda: disc_loss_and_grads(model, ids, mask, labels))

    def test_gen_gradients_match_finite_differences(self):
        rng = np.random.default_rng(12)
        model = init_gen_model(20, 8, 8, 3, 6, rng, dtype=np.float64)
        seqs = [[1, 5, 9, 13, 17], [2, 6, 10, 14], [3, 7]]
        ids, mask = pad_batch(seqs, pad_id=0)
        labels = np.array([0, 2, 1])
        _finite_difference_check(
            model, model.tensors(),
            lambda: gen_loss_and_grads(model, ids, mask, labels))

    def test_confident_model_has_tiny_gradients(self):
        model = _zero_disc(classes=2)
        model.head_b[:] = [60.0, -60.0]
        ids, mask = pad_batch([[1, 2], [3, 4]], pad_id=0)
        loss, grads = disc_loss_and_grads(model, ids, mask, np.array([0, 0]))
        assert loss == pytest.approx(0.0, abs=1e-12)
        for g in grads.values():
            assert np.abs(g).max() < 1e-12

    def test_padding_matches_unpadded_gradients(self):
        """A sample padded out to a longer batch must produce the same
        gradients as the same sample alone, unpadded."""
        rng = np.random.default_rng(13)
        model = init_disc_model(15, 6, 7, 3, rng, dtype=np.float64)
        seq = [1, 2, 3]
        ids_a, mask_a = pad_batch([seq], pad_id=0)
        ids_b, mask_b = pad_batch([seq + [0, 0, 0]], pad_id=0)
        mask_b[0, 3:] = 0.0
        loss_a, grads_a = disc_loss_and_grads(model, ids_a, mask_a, np.array([1]))
        loss_b, grads_b = disc_loss_and_grads(model, ids_b, mask_b, np.array([1]))
        assert loss_a == pytest.approx(loss_b, abs=1e-12)
        for name in grads_a:
            np.testing.assert_allclose(grads_a[name], grads_b[name], atol=1e-12)


CLASS_WORDS = {
    0: ["alpha", "bravo", "charlie", "delta"],
    1: ["xray", "yankee", "zulu", "whiskey"],
}


def _toy_corpus(n_per_class, seed=0, num_classes=2):
    rng = np.random.default_rng(seed)
    samples = []
    for cls in range(num_classes):
        words = CLASS_WORDS[cls]
        for _ in range(n_per_class):
            text = " ".join(rng.choice(words, size=rng.integers(3, 7)))
            samples.append(LabeledSample(text=text, label=cls))
    return Dataset(samples, num_classes=num_classes)


def _prepared_toy(n_per_class=40, seed=0):
    ds = _toy_corpus(n_per_class, seed)
    train, val = split_dataset(ds, seed=seed)
    vocab = build_vocab([s.text for s in train.samples], max_size=50)
    return tokenize_dataset(train, vocab), tokenize_dataset(val, vocab), vocab


class TestTraining:
    def test_disc_separable_corpus(self):
        train, val, vocab = _prepared_toy(n_per_class=60)
        rng = np.random.default_rng(0)
        model = init_disc_model(vocab.size, 16, 16, 2, rng)
        cfg = TrainConfig(max_epochs=5, patience=5, seed=0, batch_size=16,
                          learning_rate=0.005)
        hist = train_model(model, train, val, vocab, cfg)
        assert hist.best_val_accuracy >= 0.99

    def test_gen_separable_corpus(self):
        train, val, vocab = _prepared_toy(n_per_class=60)
        rng = np.random.default_rng(0)
        model = init_gen_model(vocab.size, 16, 16, 2, 8, rng)
        cfg = TrainConfig(max_epochs=5, patience=5, seed=0, batch_size=16,
                          learning_rate=0.005)
        hist = train_model(model, train, val, vocab, cfg)
        assert hist.best_val_accuracy >= 0.99

    def test_loss_decreases_over_first_steps(self):
        """Ten Adam steps on a fixed batch reduce the loss for at least
        nine of ten seeds."""
        train, _, vocab = _prepared_toy()
        from ptqlab.nn import AdamState, adam_step
        token_lists = train.token_lists()
        labels = train.labels()
        ids, mask = pad_batch(token_lists[:32], vocab.pad_id)
        batch_labels = labels[:32]
        wins = 0
        for seed in range(10):
            model = init_disc_model(vocab.size, 16, 16, 2,
                                    np.random.default_rng(seed))
            params = model.tensors()
            state = AdamState.init_like(params)
            cfg = TrainConfig()
            first = last = None
            for _ in range(10):
                loss, grads = disc_loss_and_grads(model, ids, mask, batch_labels)
                if first is None:
                    first = loss
                last = loss
                adam_step(params, grads, state, cfg)
            wins += last < first
        assert wins >= 9

    def test_same_seed_identical_history(self):
        train, val, vocab = _prepared_toy()

        def run():
            model = init_disc_model(vocab.size, 12, 12, 2,
                                    np.random.default_rng(7))
            hist = train_model(model, train, val, vocab,
                               TrainConfig(max_epochs=3, patience=3, seed=7))
            return hist, model

        hist_a, model_a = run()
        hist_b, model_b = run()
        assert hist_a.train_loss == hist_b.train_loss
        assert hist_a.val_accuracy == hist_b.val_accuracy
        for name, tensor in model_a.tensors().items():
            np.testing.assert_array_equal(tensor, model_b.tensors()[name])

    def test_train_noise_still_learns(self):
        from ptqlab.corpus import NoiseSpec
        train, val, vocab = _prepared_toy(n_per_class=60)
        model = init_disc_model(vocab.size, 16, 16, 2, np.random.default_rng(1))
        cfg = TrainConfig(max_epochs=5, patience=5, seed=1, batch_size=16,
                          learning_rate=0.005,
                          train_noise=NoiseSpec(epsilon=0.05))
        hist = train_model(model, train, val, vocab, cfg)
        assert hist.best_val_accuracy >= 0.9

    def test_predict_batch_both_types(self):
        train, val, vocab = _prepared_toy()
        rng = np.random.default_rng(2)
        disc = init_disc_model(vocab.size, 12, 12, 2, rng)
        gen = init_gen_model(vocab.size, 12, 12, 2, 6, rng)
        tokens = val.token_lists()
        for model in (disc, gen):
            preds = predict_batch(model, tokens, vocab.pad_id)
            assert preds.shape == (len(tokens),)
            assert set(np.unique(preds)) <= {0, 1}
