import json
import os
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import numpy as np
from scipy import stats

from mixture_hawkes.data_io import (
    CACHE_ENV,
    Corpus,
    Item,
    SyntheticSpec,
    SyntheticSpecBuilder,
    corpus_lines,
    default_kernel_truth,
    default_popularity_truth,
    generate_synthetic_corpus,
    load_corpus,
    load_headlines,
    save_corpus,
    source_summary,
    split_corpus,
    standardize_features,
)
from mixture_hawkes.errors import CorpusFormatError, DomainError, ModelMismatchError
from mixture_hawkes.hawkes_core import Cascade, borel_pmf

HEADER = {"schema_version": 1, "source_id": "gazette", "standardized": False, "standardization": None}


def raw_corpus(followers_per_item, source_id="gazette"):
    items = []
    for i, followers in enumerate(followers_per_item):
        cascades = [Cascade([0.0, 1.0 + j], followers=f) for j, f in enumerate(followers)]
        items.append(Item(f"item-{i}", [float(i), 1.0 - i], cascades))
    return Corpus(source_id, items)


class CorpusFileTest(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def write_lines(self, name, records):
        path = Path(self.tmp.name) / name
        path.write_text("\n".join(r if isinstance(r, str) else json.dumps(r) for r in records) + "\n",
                        encoding="utf-8")
        return path


class TestLoadCorpus(CorpusFileTest):

    def test_minimal_file(self):
        path = self.write_lines("c.jsonl", [
            HEADER,
            {"item_id": "a", "y": [0.5, 1.0], "headline": "Budget passes",
             "cascades": [{"t": [0, 4.5, 9], "followers": 12}, {"t": [0], "followers": 0}]},
        ])
        corpus = load_corpus(path)
        self.assertEqual(corpus.source_id, "gazette")
        self.assertFalse(corpus.standardized)
        self.assertEqual(corpus.n_cascades, 2)
        self.assertEqual(corpus.item("a").headline, "Budget passes")
        self.assertEqual(corpus.item("a").popularity, 4)
        self.assertEqual(corpus.dim_y, 2)

    def test_times_are_rebased(self):
        path = self.write_lines("c.jsonl", [
            HEADER, {"item_id": "a", "y": [0.0], "cascades": [{"t": [100, 105, 110], "followers": 3}]},
        ])
        np.testing.assert_allclose(load_corpus(path).items[0].cascades[0].event_times, [0.0, 5.0, 10.0])

    def test_unsorted_times_report_the_line(self):
        path = self.write_lines("c.jsonl", [
            HEADER,
            {"item_id": "a", "y": [0.0], "cascades": [{"t": [0, 1], "followers": 3}]},
            {"item_id": "b", "y": [0.0], "cascades": [{"t": [0, 5, 3], "followers": 3}]},
        ])
        with self.assertRaises(CorpusFormatError) as context:
            load_corpus(path)
        self.assertEqual(context.exception.line_number, 3)
        self.assertIn("cascade 0 of item 'b'", str(context.exception))
        self.assertIn("unsorted", str(context.exception))

    def test_event_before_seed(self):
        path = self.write_lines("c.jsonl", [
            HEADER, {"item_id": "a", "y": [0.0], "cascades": [{"t": [10, 5], "followers": 1}]},
        ])
        with self.assertRaises(CorpusFormatError) as context:
            load_corpus(path)
        self.assertIn("before its seed", str(context.exception))

    def test_format_errors(self):
        cases = {
            "missing followers": [HEADER, {"item_id": "a", "y": [0.0], "cascades": [{"t": [0]}]}],
            "bad json": [HEADER, "{not json"],
            "bad version": [{**HEADER, "schema_version": 9}],
            "duplicate": [HEADER,
                          {"item_id": "a", "y": [0.0], "cascades": [{"t": [0], "followers": 1}]},
                          {"item_id": "a", "y": [0.0], "cascades": [{"t": [0], "followers": 1}]}],
            "ragged y": [HEADER,
                         {"item_id": "a", "y": [0.0], "cascades": [{"t": [0], "followers": 1}]},
                         {"item_id": "b", "y": [0.0, 1.0], "cascades": [{"t": [0], "followers": 1}]}],
            "no cascades": [HEADER, {"item_id": "a", "y": [0.0], "cascades": []}],
        }
        for name, records in cases.items():
            with self.subTest(name):
                with self.assertRaises(CorpusFormatError):
                    load_corpus(self.write_lines(f"{name}.jsonl", records))
        with self.assertRaises(CorpusFormatError):
            load_corpus(Path(self.tmp.name) / "absent.jsonl")

    def test_standardized_corpus_needs_features(self):
        header = {**HEADER, "standardized": True,
                  "standardization": {"x_mean": [0.0], "x_std": [1.0], "y_mean": [0.0], "y_std": [1.0]}}
        path = self.write_lines("c.jsonl", [header, {"item_id": "a", "y": [0.0], "cascades": [{"t": [0]}]}])
        with self.assertRaises(CorpusFormatError) as context:
            load_corpus(path)
        self.assertIn("lacks standardized features", str(context.exception))

    def test_save_is_byte_stable(self):
        corpus = raw_corpus([[5, 50], [500]])
        first = save_corpus(corpus, Path(self.tmp.name) / "first.jsonl")
        second = save_corpus(load_corpus(first), Path(self.tmp.name) / "second.jsonl")
        self.assertEqual(first.read_bytes(), second.read_bytes())

    def test_cache_returns_the_same_corpus(self):
        path = save_corpus(raw_corpus([[5, 50], [500]]), Path(self.tmp.name) / "c.jsonl")
        cache_dir = Path(self.tmp.name) / "cache"
        with mock.patch.dict(os.environ, {CACHE_ENV: str(cache_dir)}):
            first = load_corpus(path)
            self.assertEqual(len(list(cache_dir.glob("corpus-*.pickle"))), 1)
            second = load_corpus(path)
        self.assertEqual(corpus_lines(first), corpus_lines(second))


class TestStandardization(unittest.TestCase):

    def test_log_follower_scaling(self):
        corpus, constants = standardize_features(raw_corpus([[10, 100, 1000]]))
        x = np.array([c.features_x[0] for c in corpus.cascades()])
        self.assertAlmostEqual(x.mean(), 0.0, delta=1e-12)
        self.assertAlmostEqual(x.std(), 1.0, delta=1e-12)
        self.assertLess(abs(x[1]), 0.05)
        self.assertAlmostEqual(constants.x_mean[0], np.log1p([10, 100, 1000]).mean())
        self.assertTrue(corpus.standardized)

    def test_constant_followers_are_flagged(self):
        with self.assertLogs("mixture_hawkes.data_io", level="WARNING"):
            corpus, constants = standardize_features(raw_corpus([[7, 7], [7]]))
        self.assertEqual(constants.zero_variance_x, [0])
        np.testing.assert_allclose([c.features_x[0] for c in corpus.cascades()], np.log1p(7.0))

    def test_train_constants_are_reused(self):
        train, constants = standardize_features(raw_corpus([[10, 100], [1000, 20]]))
        test, reused = standardize_features(raw_corpus([[5000, 9000], [20000]]), constants)
        self.assertIs(reused, constants)
        self.assertGreater(np.mean([c.features_x[0] for c in test.cascades()]), 1.0)

    def test_rejects_double_standardization(self):
        corpus, constants = standardize_features(raw_corpus([[10, 100]]))
        with self.assertRaises(DomainError):
            standardize_features(corpus)
        with self.assertRaises(ModelMismatchError):
            standardize_features(Corpus("z", [Item("a", [1.0], [Cascade([0.0], followers=1)])]), constants)


class TestSourceSummary(unittest.TestCase):

    def test_mean_cascade_count(self):
        corpus, _ = standardize_features(raw_corpus([[1, 2], [3, 4, 5], [6, 7, 8, 9]]))
        summary = source_summary(corpus)
        self.assertAlmostEqual(summary.mean_cascade_count, 3.0)
        self.assertEqual(summary.history_y.shape, (3, 2))
        self.assertAlmostEqual(summary.follower_dist.probs.sum(), 1.0)

    def test_identical_followers_give_a_point_mass(self):
        with self.assertLogs("mixture_hawkes.data_io", level="WARNING"):
            corpus, _ = standardize_features(raw_corpus([[40] * 5, [40] * 3]))
        summary = source_summary(corpus)
        self.assertEqual(summary.follower_dist.support.shape, (1, 1))
        np.testing.assert_allclose(summary.follower_dist.probs, [1.0])

    def test_equal_probability_bins(self):
        corpus, _ = standardize_features(raw_corpus([list(range(1, 1001))]))
        summary = source_summary(corpus)
        self.assertEqual(summary.follower_dist.support.shape, (64, 1))
        self.assertTrue(np.all(np.diff(summary.follower_dist.support[:, 0]) > 0))
        self.assertAlmostEqual(summary.follower_dist.probs.sum(), 1.0)
        self.assertEqual(summary.follower_dist.sample_size, 1000)


class TestSplitAndHeadlines(CorpusFileTest):

    def test_split_is_deterministic_and_disjoint(self):
        corpus = raw_corpus([[i + 1] for i in range(20)])
        train, test = split_corpus(corpus, 0.25, seed=4)
        train_ids = {item.item_id for item in train.items}
        test_ids = {item.item_id for item in test.items}
        self.assertEqual(len(test_ids), 5)
        self.assertFalse(train_ids & test_ids)
        self.assertEqual(len(train_ids | test_ids), 20)
        again, _ = split_corpus(corpus, 0.25, seed=4)
        self.assertEqual([i.item_id for i in again.items], [i.item_id for i in train.items])
        with self.assertRaises(DomainError):
            split_corpus(corpus, 1.5)

    def test_headlines(self):
        path = self.write_lines("h.jsonl", [
            {"headline_id": "h1", "style": "news", "y": [0.1, 0.2], "text": "Rates rise"},
            {"headline_id": "h2", "style": "clickbait", "y": [-1.0, 0.4]},
        ])
        headlines = load_headlines(path)
        self.assertEqual(headlines.headline_ids, ["h1", "h2"])
        self.assertEqual(headlines.styles, ["news", "clickbait"])
        self.assertEqual(headlines.y.shape, (2, 2))
        self.assertEqual(headlines.texts, ["Rates rise", None])

    def test_headline_missing_style(self):
        path = self.write_lines("h.jsonl", [
            {"headline_id": "h1", "style": "news", "y": [0.1]},
            {"headline_id": "h2", "y": [0.3]},
        ])
        with self.assertRaises(CorpusFormatError) as context:
            load_headlines(path)
        self.assertEqual(context.exception.line_number, 2)


class TestSynthetic(unittest.TestCase):

    def test_same_seed_same_corpus(self):
        spec = SyntheticSpecBuilder().with_items(15, 6.0).with_seed(11).build()
        first, truth = generate_synthetic_corpus(spec)
        second, _ = generate_synthetic_corpus(spec)
        self.assertEqual(corpus_lines(first), corpus_lines(second))
        self.assertTrue(first.standardized)
        self.assertEqual(first.items[0].item_id, "synthetic-00000")
        self.assertEqual(len(truth["items"]["p_alpha"]), 15)
        self.assertEqual(len(truth["classes"]["popularity"]), first.n_cascades)

    def test_single_class_sizes_follow_borel(self):
        spec = (
            SyntheticSpecBuilder()
            .with_dimensions(0, 0)
            .with_popularity_truth(default_popularity_truth(1, dim_x=0, dim_y=0, spread=1e-6))
            .with_kernel_truth(default_kernel_truth(1, dim_x=0, dim_y=0))
            .with_items(100, 50.0)
            .with_seed(5)
            .build()
        )
        corpus, _ = generate_synthetic_corpus(spec)
        sizes = np.array([c.size for c in corpus.cascades()])
        probs = np.array([borel_pmf(n, 0.3) for n in range(1, 6)])
        observed = np.append([np.sum(sizes == n) for n in range(1, 6)], np.sum(sizes >= 6))
        expected = sizes.size * np.append(probs, 1.0 - probs.sum())
        _, p_value = stats.chisquare(observed, expected)
        self.assertGreater(p_value, 0.01)

    def test_followers_raise_sizes(self):
        spec = SyntheticSpecBuilder().with_items(100, 30.0).with_seed(2).build()
        corpus, _ = generate_synthetic_corpus(spec)
        x = [c.features_x[0] for c in corpus.cascades()]
        sizes = [c.size for c in corpus.cascades()]
        correlation, _ = stats.spearmanr(x, sizes)
        self.assertGreater(correlation, 0.0)

    def test_truncation_warning(self):
        spec = (
            SyntheticSpecBuilder()
            .with_classes(1, 1)
            .with_popularity_truth(default_popularity_truth(1, 1, 2))
            .with_items(20, 20.0)
            .with_max_cascade_size(2)
            .build()
        )
        with self.assertLogs("mixture_hawkes.data_io", level="WARNING"):
            corpus, truth = generate_synthetic_corpus(spec)
        self.assertGreater(truth["truncated_fraction"], 0.01)
        self.assertTrue(corpus.metadata["warnings"])
        self.assertTrue(all(c.size <= 2 for c in corpus.cascades()))

    def test_spec_round_trip(self):
        spec = SyntheticSpecBuilder().with_classes(2, 2).with_seed(3).with_source_id("wire").build()
        self.assertEqual(SyntheticSpec.from_dict(spec.to_dict()).to_dict(), spec.to_dict())

    def test_builder(self):
        builder = SyntheticSpecBuilder().with_items(50, 10.0)
        clone = builder.clone().with_seed(8).with_classes(3, 2)
        self.assertNotIn("seed", builder.get_spec_info())
        self.assertEqual(clone.get_spec_info()["seed"], 8)
        self.assertEqual(clone.get_spec_info()["k_alpha"], 3)
        self.assertEqual(builder.get_spec_info()["k_alpha"], 2)
        with self.assertRaises(ValueError):
            builder.with_dimensions(2, 1)
        with self.assertRaises(ValueError):
            builder.with_source_id("")

    def test_truths_must_agree(self):
        with self.assertRaises(ModelMismatchError):
            SyntheticSpec(default_popularity_truth(2, 1, 2), default_kernel_truth(3, 1, 3))


if __name__ == "__main__":
    unittest.main()
