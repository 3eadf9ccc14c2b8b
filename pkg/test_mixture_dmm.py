import os
import tempfile
import unittest

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from mixture_hawkes.errors import DegenerateComponentError, DomainError, ModelMismatchError
from mixture_hawkes.hawkes_core import (
    Cascade,
    HawkesParams,
    PowerLawKernel,
    borel_log_likelihood,
    borel_log_pmf,
    kernel_half_life,
    kernel_log_likelihood,
    simulate_cascades,
)
from mixture_hawkes.mixture_dmm import (
    BorelMixture,
    DmmModel,
    EmConfig,
    EmReport,
    KernelMixture,
    _check_monotone,
    dmm_holdout_nll,
    dmm_predict_popularity,
    dmm_product,
    fit_bmm,
    fit_dmm,
    fit_joint_hawkes,
    fit_kmm,
    load_dmm,
    save_dmm,
)


def borel_mixture_sample(alphas, weights, count, seed, n_max=20_000):
    rng = np.random.default_rng(seed)
    support = np.arange(1, n_max + 1)
    probs = sum(w * np.exp(borel_log_pmf(support, a)) for a, w in zip(alphas, weights))
    return rng.choice(support, size=count, p=probs / probs.sum())


class TestBorelMixture(unittest.TestCase):

    def test_recovers_two_components(self):
        sizes = borel_mixture_sample((0.2, 0.7), (0.6, 0.4), 20_000, seed=3)
        mixture = fit_bmm(sizes, 2, EmConfig(restarts=2, tolerance=1e-10, max_iterations=2000))
        np.testing.assert_allclose(mixture.alphas, [0.2, 0.7], atol=0.02)
        np.testing.assert_allclose(mixture.weights, [0.6, 0.4], atol=0.03)
        self.assertTrue(mixture.report.is_monotone())
        self.assertTrue(mixture.report.monotone)
        self.assertEqual(len(mixture.report.restart_log_likelihoods), 3)

    def test_single_component_is_closed_form(self):
        mixture = fit_bmm([2, 2, 2], 1)
        self.assertAlmostEqual(mixture.alphas[0], 0.5)
        self.assertAlmostEqual(mixture.weights[0], 1.0)

    def test_all_singletons_hit_the_boundary(self):
        mixture = fit_bmm([1] * 50, 1)
        self.assertTrue(mixture.report.boundary)
        self.assertLess(mixture.alphas[0], 1e-6)

    def test_collapsed_component_is_pruned(self):
        sizes = borel_mixture_sample((0.3,), (1.0,), 2000, seed=1)
        with self.assertLogs("mixture_hawkes.mixture_dmm", level="WARNING"):
            mixture = fit_bmm(sizes, 2, EmConfig(min_weight=0.5, restarts=0))
        self.assertEqual(mixture.n_components, 1)
        self.assertTrue(mixture.report.pruned_components)

    def test_collapsed_component_raises_without_pruning(self):
        sizes = borel_mixture_sample((0.3,), (1.0,), 2000, seed=1)
        with self.assertRaises(DegenerateComponentError) as context:
            fit_bmm(sizes, 2, EmConfig(min_weight=0.5, restarts=0, prune_degenerate=False))
        self.assertEqual(context.exception.iteration, 1)

    def test_too_few_distinct_sizes(self):
        with self.assertRaises(DomainError):
            fit_bmm([1, 1, 1], 2)
        with self.assertRaises(DomainError):
            fit_bmm([1, 2], 0)

    def test_components_are_sorted(self):
        mixture = BorelMixture(np.array([0.6, 0.1]), np.array([0.3, 0.7]))
        np.testing.assert_array_equal(mixture.alphas, [0.1, 0.6])
        np.testing.assert_array_equal(mixture.weights, [0.7, 0.3])

    @given(
        alpha=st.floats(0.01, 0.99),
        sizes=st.lists(st.integers(1, 500), min_size=1, max_size=30),
    )
    @settings(max_examples=100, deadline=None)
    def test_single_component_matches_borel(self, alpha, sizes):
        mixture = BorelMixture(np.array([alpha]), np.array([1.0]))
        expected = float(np.sum(borel_log_pmf(np.array(sizes), alpha)))
        self.assertAlmostEqual(mixture.log_likelihood(sizes), expected, delta=1e-9 * max(1.0, abs(expected)))
        constant = expected - borel_log_likelihood(sizes, alpha)
        other = 0.5 if alpha != 0.5 else 0.25
        shifted = float(np.sum(borel_log_pmf(np.array(sizes), other))) - borel_log_likelihood(sizes, other)
        self.assertAlmostEqual(constant, shifted, delta=1e-8 * max(1.0, abs(constant)))

    def test_decrease_is_recorded_on_the_report(self):
        report = EmReport(log_likelihood_trace=[-100.0, -90.0, -95.0])
        with self.assertLogs("mixture_hawkes.mixture_dmm", level="WARNING"):
            _check_monotone(report, EmConfig(), "BMM")
        self.assertFalse(report.monotone)
        self.assertFalse(report.to_dict()["monotone"])

    def test_decrease_within_slack_is_monotone(self):
        report = EmReport(log_likelihood_trace=[-100.0, -100.0 - 1e-12])
        _check_monotone(report, EmConfig(), "BMM")
        self.assertTrue(report.monotone)


class TestKernelMixture(unittest.TestCase):

    def test_recovers_two_components(self):
        fast = PowerLawKernel(0.5, 1.0)
        slow = PowerLawKernel(2.0, 100.0)
        cascades = simulate_cascades(HawkesParams(0.6, fast), 1500, rng_seed=10)
        cascades += simulate_cascades(HawkesParams(0.6, slow), 1500, rng_seed=11)
        mixture = fit_kmm(cascades, 2, EmConfig(restarts=1, max_iterations=300, tolerance=1e-9))
        expected = np.array([kernel_half_life(fast), kernel_half_life(slow)])
        np.testing.assert_allclose(mixture.half_lives, expected, rtol=0.15)
        informative = np.array([c.size >= 2 for c in cascades])
        fast_share = informative[:1500].sum() / informative.sum()
        np.testing.assert_allclose(mixture.weights, [fast_share, 1.0 - fast_share], atol=0.05)
        self.assertTrue(mixture.report.is_monotone())
        self.assertTrue(mixture.report.monotone)

    def test_single_interevent_is_a_boundary_fit(self):
        mixture = fit_kmm([Cascade([0.0, 10.0])], 1, EmConfig(restarts=0))
        self.assertTrue(mixture.report.boundary)

    def test_requires_informative_cascades(self):
        with self.assertRaises(DomainError):
            fit_kmm([Cascade([0.0]), Cascade([0.0])], 1)
        with self.assertRaises(DomainError):
            fit_kmm([Cascade([0.0, 1.0])], 2)

    def test_components_sorted_by_half_life(self):
        mixture = KernelMixture([PowerLawKernel(1.0, 100.0), PowerLawKernel(1.0, 1.0)], np.array([0.2, 0.8]))
        self.assertLess(mixture.half_lives[0], mixture.half_lives[1])
        np.testing.assert_array_equal(mixture.weights, [0.8, 0.2])

    def test_single_component_matches_kernel_likelihood(self):
        kernel = PowerLawKernel(1.4, 25.0)
        cascades = simulate_cascades(HawkesParams(0.7, kernel), 40, rng_seed=2)
        mixture = KernelMixture([kernel], np.array([1.0]))
        self.assertAlmostEqual(mixture.log_likelihood(cascades), kernel_log_likelihood(cascades, kernel), places=8)


class TestDualMixture(unittest.TestCase):

    def setUp(self):
        self.model = DmmModel(
            BorelMixture(np.array([0.2, 0.5]), np.array([0.25, 0.75])),
            KernelMixture([PowerLawKernel(1.0, 10.0)], np.array([1.0])),
        )

    def test_predict_popularity(self):
        self.assertAlmostEqual(dmm_predict_popularity(self.model, 4.0), 7.25)

    def test_predict_popularity_clamps_alpha(self):
        borel = BorelMixture(np.array([0.999]), np.array([1.0]))
        self.assertAlmostEqual(dmm_predict_popularity(borel, 1.0), 200.0)
        with self.assertRaises(DomainError):
            dmm_predict_popularity(borel, 0.0)

    def test_product_weights(self):
        product = dmm_product(self.model.borel, self.model.kernel)
        np.testing.assert_allclose(product.product_weights, [[0.25], [0.75]])

    def test_holdout_nll_is_per_event(self):
        kernel = self.model.kernel.kernels[0]
        cascades = [Cascade([0.0, 1.0, 4.0]), Cascade([0.0]), Cascade([0.0, 2.0])]
        expected = -kernel_log_likelihood(cascades, kernel) / 3
        self.assertAlmostEqual(dmm_holdout_nll(self.model, cascades), expected)
        with self.assertRaises(DomainError):
            dmm_holdout_nll(self.model, [Cascade([0.0])])

    def test_save_and_load(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = save_dmm(self.model, os.path.join(tmp, "dmm.json"), {"seed": 3})
            loaded = load_dmm(path)
        np.testing.assert_allclose(loaded.borel.alphas, self.model.borel.alphas)
        np.testing.assert_allclose(loaded.borel.weights, self.model.borel.weights)
        self.assertEqual(loaded.kernel.kernels, self.model.kernel.kernels)

    def test_load_rejects_other_artifacts(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "broken.json")
            with open(path, "w", encoding="utf-8") as handle:
                handle.write('{"kind": "dmm", "schema_version": 1, "payload": {"borel": {}}}')
            with self.assertRaises(ModelMismatchError):
                load_dmm(path)

    def test_fit_dmm_and_joint_benchmark(self):
        truth = HawkesParams(0.5, PowerLawKernel(1.2, 20.0))
        cascades = simulate_cascades(truth, 3000, rng_seed=6)
        joint = fit_joint_hawkes(cascades)
        self.assertAlmostEqual(joint.alpha, 0.5, delta=0.03)
        self.assertAlmostEqual(kernel_half_life(joint.kernel) / kernel_half_life(truth.kernel), 1.0, delta=0.15)
        model = fit_dmm(cascades, 1, 1, EmConfig(restarts=0))
        self.assertAlmostEqual(model.borel.alphas[0], joint.alpha, delta=1e-6)


if __name__ == "__main__":
    unittest.main()
