"""Tests for confidence weighting, window losses, and the closed-form trainer."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from speclab.drafting import Feature, no_feature
from speclab.models import (
    TabularModel,
    Vocabulary,
    make_synthetic_target,
    next_distribution,
)
from speclab.training import (
    CatWeights,
    TrainConfig,
    TrainingWindow,
    build_training_windows,
    cat_weights,
    decay_weights,
    parse_train_config_file,
    sample_corpus,
    target_confidences,
    train_tabular_drafter,
    window_loss,
)


def _onehot(v, i):
    arr = np.zeros(v)
    arr[i] = 1.0
    return arr


class TestTargetConfidences:
    def test_deterministic_target_gives_ones(self):
        vocab = Vocabulary(3)
        eye = np.eye(3)
        table = {(t,): eye[(t + 1) % 3] for t in range(3)}
        target = TabularModel(1, vocab, table, np.full(3, 1 / 3))
        seq = [0, 1, 2, 0, 1]
        assert target_confidences(target, seq, 1, 4) == [1.0] * 4

    def test_matches_per_position_lookup(self):
        target = make_synthetic_target(3, vocab_size=5, order=2, concentration=0.5)
        rng = np.random.default_rng(1)
        seq = list(rng.integers(0, 5, size=12))
        conf = target_confidences(target, seq, 2, 6)
        for k in range(6):
            dist = next_distribution(target, seq[: 2 + k])
            assert conf[k] == float(dist[seq[2 + k]])

    def test_uniform_target(self):
        vocab = Vocabulary(4)
        target = TabularModel(1, vocab, {}, np.full(4, 0.25))
        assert target_confidences(target, [0, 1, 2, 3], 1, 3) == [0.25] * 3

    def test_window_outside_sequence_rejected(self):
        vocab = Vocabulary(2)
        target = TabularModel(1, vocab, {}, np.full(2, 0.5))
        with pytest.raises(ValueError):
            target_confidences(target, [0, 1], 1, 3)


class TestCatWeights:
    def test_cumulative_product_example(self):
        w = cat_weights([0.8, 0.5, 1.0])
        assert w.weights == (1.0, 0.8, 0.4)

    def test_all_ones_reduce_to_uniform(self):
        assert cat_weights([1.0] * 5).weights == (1.0,) * 5

    def test_constant_confidence_equals_decay_exactly(self):
        for c in (0.3, 0.5, 0.8, 1.0):
            assert list(cat_weights([c] * 6).weights) == decay_weights(c, 6)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=24))
    def test_recursion_is_exact(self, conf):
        w = cat_weights(conf)
        assert w.weights[0] == 1.0
        for k in range(len(conf) - 1):
            assert w.weights[k + 1] == w.weights[k] * w.confidences[k]
        assert all(b <= a for a, b in zip(w.weights, w.weights[1:]))

    def test_zero_confidence_is_clamped(self):
        w = cat_weights([0.0, 0.5])
        assert w.confidences[0] == 1e-12
        assert w.weights[1] == 1e-12

    def test_invalid_confidence_rejected(self):
        with pytest.raises(ValueError):
            cat_weights([0.5, 1.2])

    def test_broken_recursion_rejected(self):
        with pytest.raises(ValueError, match="recursion"):
            CatWeights(confidences=(0.5, 0.5), weights=(1.0, 0.9))

    def test_weights_must_start_at_one(self):
        with pytest.raises(ValueError, match="start at 1"):
            CatWeights(confidences=(0.5,), weights=(0.5,))


class TestDecayWeights:
    def test_gamma_one_uniform(self):
        assert decay_weights(1.0, 4) == [1.0, 1.0, 1.0, 1.0]

    def test_geometric(self):
        assert decay_weights(0.8, 3) == [1.0, 0.8, 0.8 * 0.8]

    def test_invalid_gamma(self):
        with pytest.raises(ValueError):
            decay_weights(0.0, 3)
        with pytest.raises(ValueError):
            decay_weights(1.2, 3)


def _window(vocab_size, prefix_ctx, future, dists, weights, feature_symbol=None):
    vocab = Vocabulary(vocab_size)
    feature = Feature(feature_symbol) if feature_symbol is not None else no_feature(vocab)
    return TrainingWindow(
        prefix_context=tuple(prefix_ctx),
        future_tokens=tuple(future),
        target_dists=tuple(np.asarray(d, dtype=float) for d in dists),
        feature=feature,
        weights=weights,
    )


class TestWindowLoss:
    def test_zero_kl_when_drafter_matches_target(self):
        # Drafter rows equal the window's target dists at the masked contexts,
        # so only the CE term remains.
        vocab = Vocabulary(3)
        m = vocab.mask_id
        rows = {(0, 1): [0.6, 0.3, 0.1], (1, m): [0.2, 0.5, 0.3]}
        drafter = TabularModel(2, vocab, rows, np.full(3, 1 / 3))
        window = _window(
            3, (0, 1), (1, 1), [rows[(0, 1)], rows[(1, m)]], cat_weights([1.0, 1.0])
        )
        config = TrainConfig(draft_len=2, beta=0.5, weighting="uniform")
        expected_ce = -math.log(0.3) - math.log(0.5)
        assert window_loss(drafter, window, config) == pytest.approx(0.5 * expected_ce, abs=1e-12)

    def test_zero_weights_leave_single_position(self):
        vocab = Vocabulary(2)
        m = vocab.mask_id
        drafter = TabularModel(
            1, vocab, {(0,): [0.75, 0.25], (m,): [0.5, 0.5]}, np.full(2, 0.5)
        )
        weights = CatWeights(confidences=(0.0, 0.0), weights=(1.0, 0.0))
        window = _window(2, (0,), (1, 1), [[0.5, 0.5], [0.5, 0.5]], weights)
        config = TrainConfig(draft_len=2, beta=1.0)
        # beta*CE_0 + KD_0 only
        ce0 = -math.log(0.25)
        p = np.array([0.5, 0.5])
        kd0 = float(np.sum(p * (np.log(p) - np.log([0.75, 0.25]))))
        assert window_loss(drafter, window, config) == pytest.approx(ce0 + kd0, abs=1e-12)

    def test_matches_independent_summation(self):
        rng = np.random.default_rng(8)
        target = make_synthetic_target(9, vocab_size=4, order=2, concentration=0.5)
        corpus = sample_corpus(target, 3, 10, rng)
        config = TrainConfig(draft_len=3, rho=0.3, beta=0.7, weighting="cat", seed=5)
        windows = build_training_windows(target, corpus, config, np.random.default_rng(6))
        drafter = train_tabular_drafter(windows, config)
        for window in windows[:10]:
            direct = 0.0
            base = window.prefix_context
            if window.feature.symbol != target.vocab.none_feature_id:
                base = base + (window.feature.symbol,)
            for k, y in enumerate(window.future_tokens):
                ctx = (base + (target.vocab.mask_id,) * k)[-drafter.order:]
                q = next_distribution(drafter, ctx)
                p = window.target_dists[k]
                ce = -math.log(q[y])
                kd = sum(
                    p[i] * (math.log(p[i]) - math.log(q[i])) for i in range(4) if p[i] > 0
                )
                direct += window.weights.weights[k] * (0.7 * ce + kd)
            assert window_loss(drafter, window, config) == pytest.approx(direct, abs=1e-12)

    def test_zero_mass_reports_overflow(self):
        vocab = Vocabulary(2)
        drafter = TabularModel(1, vocab, {(0,): [1.0, 0.0]}, [1.0, 0.0])
        window = _window(2, (0,), (1,), [[0.0, 1.0]], cat_weights([1.0]))
        config = TrainConfig(draft_len=1, beta=1.0, kd_weight=0.0, smoothing=0.0)
        assert window_loss(drafter, window, config) == math.inf


class TestBuildTrainingWindows:
    def _target(self):
        return make_synthetic_target(17, vocab_size=4, order=2, concentration=0.4)

    def test_window_counts(self):
        target = self._target()
        config = TrainConfig(draft_len=4, rho=0.0)
        rng = np.random.default_rng(0)
        assert len(build_training_windows(target, [[0, 1, 2, 3, 0]], config, rng)) == 1
        assert len(build_training_windows(target, [[0, 1, 2, 3, 0, 1, 2]], config, rng)) == 3

    def test_short_sequences_skipped(self):
        target = self._target()
        config = TrainConfig(draft_len=4)
        rng = np.random.default_rng(0)
        assert build_training_windows(target, [[0, 1, 2, 3]], config, rng) == []

    def test_uniform_weights_are_all_ones(self):
        target = self._target()
        config = TrainConfig(draft_len=3, weighting="uniform")
        windows = build_training_windows(
            target, [[0, 1, 2, 3, 0, 1]], config, np.random.default_rng(0)
        )
        assert all(w.weights.weights == (1.0, 1.0, 1.0) for w in windows)

    def test_rho_one_gives_pure_sentinel_features(self):
        target = self._target()
        config = TrainConfig(draft_len=3, rho=1.0)
        windows = build_training_windows(
            target, [[0, 1, 2, 3, 0, 1, 2]], config, np.random.default_rng(0)
        )
        assert all(w.feature.symbol == target.vocab.none_feature_id for w in windows)

    def test_rho_zero_always_injects_features(self):
        target = self._target()
        config = TrainConfig(draft_len=3, rho=0.0)
        windows = build_training_windows(
            target, [[0, 1, 2, 3, 0, 1, 2]], config, np.random.default_rng(0)
        )
        assert all(w.feature.symbol in target.vocab.feature_ids for w in windows)

    def test_cat_confidences_match_target_dists(self):
        target = self._target()
        config = TrainConfig(draft_len=3, weighting="cat")
        windows = build_training_windows(
            target, sample_corpus(target, 2, 9, np.random.default_rng(1)),
            config, np.random.default_rng(2),
        )
        assert windows
        for w in windows:
            for k, y in enumerate(w.future_tokens):
                raw = float(w.target_dists[k][y])
                assert w.weights.confidences[k] == min(max(raw, 1e-12), 1.0)

    def test_drafter_order_truncates_prefix_context(self):
        target = self._target()
        config = TrainConfig(draft_len=3, drafter_order=1)
        windows = build_training_windows(
            target, [[0, 1, 2, 3, 0, 1]], config, np.random.default_rng(0)
        )
        assert all(len(w.prefix_context) == 1 for w in windows)


class TestTrainTabularDrafter:
    def test_weighted_frequency_hand_example(self):
        # Two windows hit the shared masked context (m,) at position 1 with
        # weights 1 and 0.25 on tokens 0 and 1. With beta=1 and one-hot
        # distillation the doubled soft counts normalize to (0.8, 0.2).
        def two_step_window(second_label, first_conf):
            return _window(
                2,
                (0,),
                (0, second_label),
                [_onehot(2, 0), _onehot(2, second_label)],
                cat_weights([first_conf, 1.0]),
            )

        windows = [two_step_window(0, 1.0), two_step_window(1, 0.25)]
        config = TrainConfig(draft_len=2, beta=1.0, smoothing=0.0)
        drafter = train_tabular_drafter(windows, config)
        mask_ctx = (Vocabulary(2).mask_id,)
        np.testing.assert_allclose(drafter.table[mask_ctx], [0.8, 0.2], atol=1e-15)

    def test_pure_distillation_recovers_target_row(self):
        vocab = Vocabulary(3)
        p = np.array([0.2, 0.5, 0.3])
        window = _window(3, (1,), (1,), [p], cat_weights([1.0]))
        config = TrainConfig(draft_len=1, beta=0.0, smoothing=0.0)
        drafter = train_tabular_drafter([window], config)
        np.testing.assert_array_equal(drafter.table[(1,)], p)

    def test_reduces_to_masked_event_estimation_with_kd_off(self):
        target = make_synthetic_target(23, vocab_size=4, order=2, concentration=0.5)
        corpus = sample_corpus(target, 4, 12, np.random.default_rng(3))
        config = TrainConfig(
            draft_len=3, rho=1.0, beta=1.0, weighting="uniform",
            kd_weight=0.0, smoothing=0.1,
        )
        windows = build_training_windows(target, corpus, config, np.random.default_rng(4))
        drafter = train_tabular_drafter(windows, config)
        table, fallback = oracles.addk_masked_event_model(
            corpus, target.vocab, order=2, draft_len=3, smoothing=0.1
        )
        assert set(drafter.table) == set(table)
        for ctx in table:
            np.testing.assert_array_equal(drafter.table[ctx], table[ctx])
        np.testing.assert_array_equal(drafter.fallback, fallback)

    def test_onehot_distillation_matches_estimation_at_zero_smoothing(self):
        # With one-hot target dists the CE and KD soft counts coincide, so the
        # doubled counts normalize to the same table when smoothing is zero.
        vocab = Vocabulary(3)
        windows = []
        for y in (0, 1, 1, 2):
            windows.append(_window(3, (2,), (y,), [_onehot(3, y)], cat_weights([1.0])))
        cfg_onehot = TrainConfig(draft_len=1, beta=1.0, kd_weight=1.0, smoothing=0.0)
        cfg_plain = TrainConfig(draft_len=1, beta=1.0, kd_weight=0.0, smoothing=0.0)
        a = train_tabular_drafter(windows, cfg_onehot)
        b = train_tabular_drafter(windows, cfg_plain)
        np.testing.assert_array_equal(a.table[(2,)], b.table[(2,)])

    def test_random_perturbations_never_beat_closed_form(self):
        target = make_synthetic_target(29, vocab_size=3, order=1, concentration=0.8)
        corpus = sample_corpus(target, 3, 8, np.random.default_rng(5))
        config = TrainConfig(draft_len=2, rho=1.0, beta=0.4, smoothing=0.0)
        windows = build_training_windows(target, corpus, config, np.random.default_rng(6))
        drafter = train_tabular_drafter(windows, config)
        base_loss = sum(window_loss(drafter, w, config) for w in windows)
        rng = np.random.default_rng(7)
        for _ in range(200):
            noisy_table = {}
            for ctx, row in drafter.table.items():
                jitter = np.clip(np.asarray(row) + rng.normal(0, 0.05, row.size), 1e-9, None)
                noisy_table[ctx] = jitter / jitter.sum()
            noisy = TabularModel(drafter.order, drafter.vocab, noisy_table, drafter.fallback)
            noisy_loss = sum(window_loss(noisy, w, config) for w in windows)
            assert noisy_loss >= base_loss - 1e-9

    def test_matches_projected_gradient_descent(self):
        # Numeric-optimizer oracle: literal PGD over the per-context simplex
        # converges to the closed form on a well-conditioned instance.
        target = make_synthetic_target(31, vocab_size=3, order=1, concentration=2.0)
        corpus = sample_corpus(target, 2, 7, np.random.default_rng(9))
        config = TrainConfig(draft_len=2, rho=1.0, beta=0.5, smoothing=0.0, weighting="cat")
        windows = build_training_windows(target, corpus, config, np.random.default_rng(10))
        drafter = train_tabular_drafter(windows, config)
        terms_by_ctx = oracles.group_loss_terms(windows, target.vocab, 1)
        for ctx, terms in terms_by_ctx.items():
            q_pgd, loss_pgd = oracles.pgd_minimize_context(
                terms, 3, config.beta, config.kd_weight
            )
            np.testing.assert_allclose(drafter.table[ctx], q_pgd, atol=1e-6)
            closed = oracles.direct_context_loss(
                np.asarray(drafter.table[ctx]), terms, config.beta, config.kd_weight
            )
            assert closed <= loss_pgd + 1e-6

    def test_zero_windows_rejected(self):
        with pytest.raises(ValueError, match="zero windows"):
            train_tabular_drafter([], TrainConfig(draft_len=2))

    def test_draft_len_mismatch_rejected(self):
        window = _window(2, (0,), (1,), [[0.5, 0.5]], cat_weights([1.0]))
        with pytest.raises(ValueError, match="draft_len"):
            train_tabular_drafter([window], TrainConfig(draft_len=3))


class TestTrainConfig:
    def test_published_defaults(self):
        config = TrainConfig()
        assert config.draft_len == 16
        assert config.rho == 0.1
        assert config.beta == 0.1
        assert config.weighting == "cat"

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"draft_len": 0},
            {"rho": -0.1},
            {"rho": 1.1},
            {"beta": -1.0},
            {"weighting": "linear"},
            {"gamma": 0.0},
            {"gamma": 1.5},
            {"smoothing": -0.5},
            {"kd_weight": -0.1},
            {"drafter_order": 0},
        ],
    )
    def test_invalid_values_rejected(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


class TestConfigFileParsing:
    def test_aliases_and_casting(self):
        text = """
        Training Draft Length K = 8
        Stochastic Gating Ratio = 0.2
        CE Loss Coefficient = 0.3
        weighting = decay
        gamma = 0.9
        seed = 5
        """
        kwargs, ignored = parse_train_config_file(text)
        assert kwargs == {
            "draft_len": 8, "rho": 0.2, "beta": 0.3,
            "weighting": "decay", "gamma": 0.9, "seed": 5,
        }
        assert ignored == []
        TrainConfig(**kwargs)

    def test_gradient_keys_ignored_with_report(self):
        text = "learning_rate = 1e-5\noptimizers = AdamW\nK = 4\n"
        kwargs, ignored = parse_train_config_file(text)
        assert kwargs == {"draft_len": 4}
        assert set(ignored) == {"learning_rate", "optimizers"}

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            parse_train_config_file("dropout = 0.5\n")

    def test_comments_and_blank_lines_skipped(self):
        kwargs, _ = parse_train_config_file("# comment\n\nrho = 0.4  # trailing\n")
        assert kwargs == {"rho": 0.4}
