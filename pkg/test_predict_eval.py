import unittest

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logit

from mixture_hawkes.bmh_model import (
    BmhKGlobals,
    BmhKItemParams,
    BmhPGlobals,
    BmhPItemParams,
    FeatureConfig,
    KernelModel,
    PopularityModel,
    PriorConfig,
    class_alpha,
    membership_probs,
)
from mixture_hawkes.data_io import Item
from mixture_hawkes.errors import DomainError, ModelMismatchError
from mixture_hawkes.hawkes_core import Cascade, HawkesParams, PowerLawKernel
from mixture_hawkes.mixture_dmm import BorelMixture, DmmModel, KernelMixture, dmm_holdout_nll
from mixture_hawkes.predict_eval import (
    FollowerDistribution,
    HeadlineScores,
    QuantileSummary,
    SourceSummary,
    benchmark_are,
    benchmark_nll,
    better_than_average_probability,
    evaluate_are,
    evaluate_nll,
    item_kernel_nll,
    predict_item_half_life,
    predict_item_popularity,
    predict_items,
    predictions_frame,
    summarize_by_style,
)


def popularity_k1(alpha=0.5, gamma=0.0):
    g = BmhPGlobals(
        delta_alpha=[logit(alpha)],
        delta_z_alpha=np.zeros(0),
        beta_z_alpha=np.zeros((0, 1)),
        gamma_alpha=[[gamma]],
        gamma_z_alpha=np.zeros((0, 1)),
        sigma_p_alpha=[1.0],
        omega_alpha=[[1.0]],
    )
    return PopularityModel(g, BmhPItemParams([], np.zeros((0, 1))), FeatureConfig(1, 1), PriorConfig.default(1))


def popularity_k2():
    g = BmhPGlobals(
        delta_alpha=np.array([-1.0, 0.5]),
        delta_z_alpha=np.array([0.3]),
        beta_z_alpha=np.array([[-0.7]]),
        gamma_alpha=np.array([[0.2], [-0.1]]),
        gamma_z_alpha=np.array([[0.4]]),
        sigma_p_alpha=np.ones(4),
        omega_alpha=np.eye(4),
    )
    return PopularityModel(g, BmhPItemParams([], np.zeros((0, 4))), FeatureConfig(1, 1), PriorConfig.default(2))


def kernel_k1(theta=2.0, d=10.0, gamma=0.0, item_blocks=None):
    g = BmhKGlobals(
        delta_theta=np.log([theta]),
        delta_d=np.log([d]),
        sigma_theta_d=np.ones((1, 2)),
        omega_theta_d=np.eye(2)[None],
        gamma_theta=[[gamma]],
        delta_z_theta=np.zeros(0),
        beta_z_theta=np.zeros((0, 1)),
        gamma_z_theta=np.zeros((0, 1)),
        sigma_z_theta=np.zeros(0),
        omega_z_theta=np.zeros((0, 0)),
    )
    ids, p_theta = item_blocks or ([], np.zeros((0, 1, 2)))
    items = BmhKItemParams(ids, p_theta, np.zeros((len(ids), 0)))
    return KernelModel(g, items, FeatureConfig(1, 1), PriorConfig.default(k_theta=1))


def kernel_k2():
    g = BmhKGlobals(
        delta_theta=np.zeros(2),
        delta_d=np.log([10.0, 100.0]),
        sigma_theta_d=np.ones((2, 2)),
        omega_theta_d=np.tile(np.eye(2), (2, 1, 1)),
        gamma_theta=np.zeros((2, 1)),
        delta_z_theta=np.array([0.2]),
        beta_z_theta=np.array([[1.0]]),
        gamma_z_theta=np.array([[0.3]]),
        sigma_z_theta=np.ones(2),
        omega_z_theta=np.eye(2),
    )
    return KernelModel(g, BmhKItemParams([], np.zeros((0, 2, 2)), np.zeros((0, 2))), FeatureConfig(1, 1),
                       PriorConfig.default(k_theta=2))


def summary_at(x, mean_count=3.0, history=None):
    history = np.zeros((1, 1)) if history is None else history
    return SourceSummary(mean_count, FollowerDistribution.point_mass([x]), history)


class TestPopularityPrediction(unittest.TestCase):

    def test_single_class_is_expected_borel_size(self):
        prediction = predict_item_popularity(popularity_k1(0.5), [0.7], summary_at(0.1, mean_count=3.0))
        self.assertAlmostEqual(prediction.popularity, 6.0)
        self.assertEqual(prediction.flags, [])

    def test_two_classes_at_a_point_mass(self):
        model = popularity_k2()
        g = model.global_params
        y, x, count = [1.0], [0.5], 4.0
        z = membership_probs([0.0, 0.3], [[0.0], [-0.7]], x, [[0.0], [0.4]], y)
        alphas = [class_alpha(g.delta_alpha[k], g.gamma_alpha[k], y) for k in range(2)]
        expected = count * sum(z[k] / (1.0 - alphas[k]) for k in range(2))
        prediction = predict_item_popularity(model, y, summary_at(x[0], count))
        self.assertAlmostEqual(prediction.popularity, expected, places=12)
        np.testing.assert_allclose(prediction.popularity_memberships, z)

    def test_literal_formula_uses_logit_centres(self):
        model = popularity_k2()
        g = model.global_params
        y, x = [1.0], [0.5]
        z = membership_probs([0.0, 0.3], [[0.0], [-0.7]], x, [[0.0], [0.4]], y)
        centres = g.delta_alpha + g.gamma_alpha @ np.array(y)
        prediction = predict_item_popularity(model, y, summary_at(x[0], 2.0), literal=True)
        self.assertAlmostEqual(prediction.popularity, 2.0 * float(z @ centres), places=12)
        self.assertIn("literal_popularity_formula", prediction.flags)

    def test_alpha_is_clamped(self):
        with self.assertLogs("mixture_hawkes.predict_eval", level="WARNING"):
            prediction = predict_item_popularity(popularity_k1(0.999), [0.0], summary_at(0.0, 1.0), "hot")
        self.assertAlmostEqual(prediction.popularity, 200.0)
        self.assertIn("alpha_clamped", prediction.flags)

    def test_dimension_checks(self):
        with self.assertRaises(ModelMismatchError):
            predict_item_popularity(popularity_k1(), [0.1, 0.2], summary_at(0.0))
        with self.assertRaises(ModelMismatchError):
            predict_item_popularity(kernel_k1(), [0.1], summary_at(0.0))
        wide = SourceSummary(1.0, FollowerDistribution.point_mass([[0.0, 1.0]]), np.zeros((1, 1)))
        with self.assertRaises(ModelMismatchError):
            predict_item_popularity(popularity_k1(), [0.1], wide)


class TestHalfLifePrediction(unittest.TestCase):

    def test_literal_and_analytic_forms_differ(self):
        model = kernel_k1(theta=2.0, d=10.0)
        literal = predict_item_half_life(model, [0.0], summary_at(0.0))
        analytic = predict_item_half_life(model, [0.0], summary_at(0.0), formula="analytic")
        self.assertAlmostEqual(literal.half_life, 30.0)
        self.assertAlmostEqual(analytic.half_life, 10.0 * (np.sqrt(2.0) - 1.0))
        self.assertIn("analytic_half_life", analytic.flags)

    def test_forms_agree_at_unit_theta(self):
        model = kernel_k1(theta=1.0, d=10.0)
        literal = predict_item_half_life(model, [0.3], summary_at(0.0))
        analytic = predict_item_half_life(model, [0.3], summary_at(0.0), formula="analytic")
        self.assertAlmostEqual(literal.half_life, 10.0)
        self.assertAlmostEqual(analytic.half_life, 10.0)

    def test_linear_in_follower_distribution(self):
        model = kernel_k2()
        low = predict_item_half_life(model, [0.2], summary_at(-1.0)).half_life
        high = predict_item_half_life(model, [0.2], summary_at(2.0)).half_life
        for weight in (0.0, 0.25, 0.5, 0.9):
            mixed = SourceSummary(3.0, FollowerDistribution([[-1.0], [2.0]], [weight, 1.0 - weight]), np.zeros((1, 1)))
            value = predict_item_half_life(model, [0.2], mixed).half_life
            self.assertAlmostEqual(value, weight * low + (1.0 - weight) * high, places=10)

    def test_exponent_is_capped(self):
        model = kernel_k1(theta=np.exp(4.0), d=1.0)
        with self.assertLogs("mixture_hawkes.predict_eval", level="WARNING"):
            prediction = predict_item_half_life(model, [0.0], summary_at(0.0))
        self.assertIn("exponent_capped", prediction.flags)
        self.assertAlmostEqual(prediction.half_life, np.expm1(np.log(2.0) * 30.0))

    def test_unknown_formula(self):
        with self.assertRaises(ValueError):
            predict_item_half_life(kernel_k1(), [0.0], summary_at(0.0), formula="median")

    def test_predict_items_frame(self):
        items = [Item("a", [0.1], [Cascade([0.0, 1.0], features_x=[0.0])]),
                 Item("b", [-0.4], [Cascade([0.0], features_x=[0.0])])]
        predictions = predict_items(items, summary_at(0.0), popularity_k2(), kernel_k2())
        frame = predictions_frame(predictions)
        self.assertEqual(list(frame["item_id"]), ["a", "b"])
        for column in ("popularity", "half_life", "popularity_class_2", "half_life_class_1", "flags"):
            self.assertIn(column, frame.columns)


class TestMetrics(unittest.TestCase):

    def test_are_zero_for_exact_predictions(self):
        report = evaluate_are([3.0, 10.0], [3, 10], ["a", "b"])
        np.testing.assert_array_equal(report.values, [0.0, 0.0])
        self.assertEqual(report.item_ids, ["a", "b"])

    def test_are_rejects_empty_items(self):
        with self.assertRaises(DomainError):
            evaluate_are([1.0], [0])
        with self.assertRaises(ModelMismatchError):
            evaluate_are([1.0, 2.0], [1])

    @given(
        pairs=st.lists(st.tuples(st.floats(0.0, 1e4), st.integers(1, 10_000)), min_size=1, max_size=20),
        scale=st.floats(1.0, 100.0),
    )
    @settings(max_examples=100, deadline=None)
    def test_are_is_scale_invariant(self, pairs, scale):
        predicted = np.array([p for p, _ in pairs])
        actual = np.array([a for _, a in pairs], dtype=float)
        base = evaluate_are(predicted, actual).values
        scaled = evaluate_are(scale * predicted, scale * actual).values
        np.testing.assert_allclose(scaled, base, rtol=1e-9, atol=1e-12)

    def test_quantile_summary_format(self):
        summary = QuantileSummary.from_values([1.0, 2.0, 3.0, 4.0, 5.0])
        self.assertEqual(str(summary), "3.000 (2.000, 4.000)")

    def test_single_class_nll_matches_dmm(self):
        cascades = [Cascade([0.0, 1.0, 4.0], features_x=[0.2]), Cascade([0.0, 7.0], features_x=[-0.3])]
        item = Item("a", [0.5], cascades)
        model = kernel_k1(item_blocks=(["a"], np.log([[[1.5, 12.0]]])))
        expected = dmm_holdout_nll(KernelMixture([PowerLawKernel(1.5, 12.0)], np.ones(1)), cascades)
        self.assertAlmostEqual(item_kernel_nll(model, item), expected, places=10)
        source_mean = dmm_holdout_nll(KernelMixture([PowerLawKernel(2.0, 10.0)], np.ones(1)), cascades)
        self.assertAlmostEqual(item_kernel_nll(model, item, use_item_blocks=False), source_mean, places=10)

    def test_nll_excludes_items_without_timing_data(self):
        items = [Item("a", [0.0], [Cascade([0.0, 2.0], features_x=[0.0])]),
                 Item("b", [0.0], [Cascade([0.0], features_x=[0.0])])]
        report = evaluate_nll(kernel_k1(), items)
        self.assertEqual(report.item_ids, ["a"])
        self.assertEqual(report.excluded_items, ["b"])
        self.assertEqual(report.to_dict()["n_items"], 1)

    def test_benchmarks(self):
        items = [Item("a", [0.0], [Cascade([0.0, 2.0, 3.0]), Cascade([0.0])]),
                 Item("b", [0.0], [Cascade([0.0])])]
        dmm = DmmModel(BorelMixture(np.array([0.5]), np.ones(1)), KernelMixture([PowerLawKernel(1.0, 5.0)], np.ones(1)))
        rows = benchmark_nll(items, dmm, HawkesParams(0.5, PowerLawKernel(1.0, 5.0)))
        self.assertEqual(set(rows), {"dmm", "joint_hawkes"})
        self.assertAlmostEqual(rows["dmm"].values[0], rows["joint_hawkes"].values[0])
        self.assertEqual(rows["dmm"].excluded_items, ["b"])
        are = benchmark_are(items, dmm, summary_at(0.0, mean_count=1.5))
        np.testing.assert_allclose(are.values, [abs(3.0 - 4.0) / 4.0, abs(3.0 - 1.0) / 1.0])


class TestWhatIf(unittest.TestCase):

    def setUp(self):
        rng = np.random.default_rng(3)
        self.history = rng.standard_normal((200, 1))
        follower = FollowerDistribution([[-1.0], [0.0], [1.5]], [0.3, 0.5, 0.2], sample_size=500)
        self.summary = SourceSummary(1.0, follower, self.history)
        self.popularity = popularity_k1(0.4, gamma=0.5)
        self.kernel = kernel_k1(theta=1.2, d=60.0, gamma=0.4)

    def test_mean_headline_is_a_coin_flip(self):
        scores = better_than_average_probability(
            self.popularity, self.kernel, self.history.mean(axis=0), self.summary, replicates=1000, seed=0)
        self.assertAlmostEqual(scores.popularity_probability[0], 0.5, delta=0.05)
        self.assertAlmostEqual(scores.half_life_probability[0], 0.5, delta=0.05)

    def test_strong_headline_wins(self):
        y = self.history.mean(axis=0) + 3.0
        scores = better_than_average_probability(self.popularity, self.kernel, y, self.summary, replicates=200)
        self.assertGreater(scores.popularity_probability[0], 0.9)
        self.assertGreater(scores.half_life_probability[0], 0.9)

    def test_same_seed_same_scores(self):
        y = self.history[:5]
        first = better_than_average_probability(self.popularity, self.kernel, y, self.summary, 100, seed=9)
        second = better_than_average_probability(self.popularity, self.kernel, y, self.summary, 100, seed=9)
        np.testing.assert_array_equal(first.popularity_probability, second.popularity_probability)

    def test_point_predictions_match_direct_prediction(self):
        y = self.history[:3]
        scores = better_than_average_probability(self.popularity, self.kernel, y, self.summary, 50)
        for row, value in zip(y, scores.popularity):
            self.assertAlmostEqual(value, predict_item_popularity(self.popularity, row, self.summary).popularity)
        for row, value in zip(y, scores.half_life):
            self.assertAlmostEqual(value, predict_item_half_life(self.kernel, row, self.summary).half_life)

    def test_needs_history(self):
        empty = SourceSummary(1.0, self.summary.follower_dist, np.zeros((0, 1)))
        with self.assertRaises(DomainError):
            better_than_average_probability(self.popularity, self.kernel, [0.0], empty)

    def test_style_summary(self):
        scores = HeadlineScores(
            headline_ids=["h1", "h2", "h3"],
            popularity=np.array([1.0, 2.0, 3.0]),
            half_life=np.array([10.0, 20.0, 30.0]),
            popularity_probability=np.array([0.2, 0.6, 0.4]),
            half_life_probability=np.array([0.5, 0.5, 0.9]),
            styles=["news", "clickbait", "news"],
        )
        summary = summarize_by_style(scores)
        self.assertEqual(sorted(summary), ["clickbait", "news"])
        self.assertEqual(summary["news"]["count"], 2)
        self.assertAlmostEqual(summary["news"]["popularity"]["median"], 0.3)
        self.assertEqual(list(scores.to_frame().columns)[:2], ["headline_id", "style"])
        with self.assertRaises(DomainError):
            summarize_by_style(HeadlineScores(["h"], np.ones(1), np.ones(1), np.ones(1), np.ones(1)))


if __name__ == "__main__":
    unittest.main()
