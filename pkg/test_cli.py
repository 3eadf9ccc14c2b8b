import json
import shutil
import tempfile
import unittest
from pathlib import Path

import pandas as pd

from mixture_hawkes import __version__
from mixture_hawkes.artifacts import read_artifact
from mixture_hawkes.cli import EXIT_INVALID, EXIT_NOT_CONVERGED, EXIT_OK, RunConfigBuilder, main
from mixture_hawkes.data_io import load_corpus
from mixture_hawkes.errors import CorpusFormatError

SPEC = {"n_items": 16, "cascades_per_item": 10, "k_alpha": 2, "k_theta": 2, "seed": 3, "source_id": "wire"}

FIT_CONFIG = """
submodel = "both"
variant = "all"
k_alpha = 2
k_theta = 2
threads = 2

[fit]
max_iterations = 60

[em]
restarts = 0
max_iterations = 60
"""

HEADLINES = [
    {"headline_id": "h1", "style": "news", "y": [0.2, -0.1], "text": "Council approves budget"},
    {"headline_id": "h2", "style": "news", "y": [-0.4, 0.3]},
    {"headline_id": "h3", "style": "clickbait", "y": [1.5, 1.2]},
    {"headline_id": "h4", "style": "clickbait", "y": [0.9, -1.1]},
]


class TestPipeline(unittest.TestCase):
    """simulate, fit, evaluate, predict and whatif on one small synthetic source."""

    @classmethod
    def setUpClass(cls):
        cls.root = Path(tempfile.mkdtemp())
        cls.spec = cls.root / "spec.json"
        cls.spec.write_text(json.dumps(SPEC), encoding="utf-8")
        cls.config = cls.root / "fit.toml"
        cls.config.write_text(FIT_CONFIG, encoding="utf-8")
        cls.headlines = cls.root / "headlines.jsonl"
        cls.headlines.write_text("\n".join(json.dumps(h) for h in HEADLINES) + "\n", encoding="utf-8")

        cls.data = cls.root / "data"
        cls.simulate_code = main(["simulate", "-q", "--spec", str(cls.spec), "--out", str(cls.data),
                                  "--test-fraction", "0.25"])
        cls.train = cls.data / "wire.train.jsonl"
        cls.test = cls.data / "wire.test.jsonl"
        cls.models = cls.root / "models"
        cls.fit_code = main(["fit", "-q", "--config", str(cls.config), "--corpus", str(cls.train),
                             "--out", str(cls.models)])
        cls.model_dir = cls.models / "wire"

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.root, ignore_errors=True)

    def test_simulate_writes_corpus_truth_and_split(self):
        self.assertEqual(self.simulate_code, EXIT_OK)
        corpus = load_corpus(self.data / "wire.jsonl")
        self.assertEqual(len(corpus.items), 16)
        self.assertEqual(len(load_corpus(self.train).items) + len(load_corpus(self.test).items), 16)
        truth = read_artifact(self.data / "wire.truth.json", kind="synthetic_truth")
        self.assertEqual(len(truth["payload"]["spec"]["popularity"]["delta_alpha"]), 2)
        self.assertEqual(truth["run_config"]["command"], "simulate")

    def test_simulate_is_reproducible(self):
        again = self.root / "again"
        self.assertEqual(main(["simulate", "-q", "--spec", str(self.spec), "--out", str(again)]), EXIT_OK)
        self.assertEqual((again / "wire.jsonl").read_bytes(), (self.data / "wire.jsonl").read_bytes())

    def test_rerun_from_an_artifact_config(self):
        rerun = self.root / "rerun"
        code = main(["simulate", "-q", "--config", str(self.data / "wire.truth.json"), "--out", str(rerun)])
        self.assertEqual(code, EXIT_OK)
        self.assertEqual((rerun / "wire.jsonl").read_bytes(), (self.data / "wire.jsonl").read_bytes())

    def test_rerun_keeps_a_seed_given_on_the_command_line(self):
        seeded = self.root / "seeded"
        rerun = self.root / "seeded_rerun"
        code = main(["simulate", "-q", "--spec", str(self.spec), "--seed", "5", "--out", str(seeded)])
        self.assertEqual(code, EXIT_OK)
        truth = read_artifact(seeded / "wire.truth.json", kind="synthetic_truth")
        self.assertEqual(truth["run_config"]["seed"], 5)
        self.assertEqual(truth["payload"]["spec"]["seed"], 5)
        code = main(["simulate", "-q", "--config", str(seeded / "wire.truth.json"), "--out", str(rerun)])
        self.assertEqual(code, EXIT_OK)
        self.assertEqual((rerun / "wire.jsonl").read_bytes(), (seeded / "wire.jsonl").read_bytes())
        self.assertNotEqual((seeded / "wire.jsonl").read_bytes(), (self.data / "wire.jsonl").read_bytes())

    def test_fit_layout(self):
        self.assertIn(self.fit_code, (EXIT_OK, EXIT_NOT_CONVERGED))
        self.assertTrue((self.model_dir / "standardization.json").exists())
        self.assertTrue((self.model_dir / "dmm_prefit.json").exists())
        for variant in ("none", "y_gate", "y_center_gate", "full"):
            for name in ("popularity", "kernel"):
                self.assertTrue((self.model_dir / variant / f"{name}.json").exists(), (variant, name))
                self.assertTrue((self.model_dir / variant / f"{name}_fit_report.json").exists())

    def test_artifacts_carry_run_config(self):
        artifact = read_artifact(self.model_dir / "full" / "popularity.json", kind="bmh_popularity")
        self.assertEqual(artifact["tool_version"], __version__)
        self.assertEqual(artifact["run_config"]["command"], "fit")
        self.assertEqual(artifact["run_config"]["fit"], {"max_iterations": 60})
        report = read_artifact(self.model_dir / "full" / "popularity_fit_report.json", kind="fit_report")
        self.assertNotIn("wall_time", report["payload"])
        self.assertIn("converged", report["payload"])

    def test_evaluate(self):
        out = self.root / "evaluation"
        code = main(["evaluate", "-q", "--model-dir", str(self.model_dir), "--corpus", str(self.test),
                     "--out", str(out)])
        self.assertEqual(code, EXIT_OK)
        report = read_artifact(out / "evaluation.json", kind="evaluation")["payload"]
        self.assertEqual(set(report["variants"]), {"none", "y_gate", "y_center_gate", "full"})
        self.assertEqual(report["absent_variants"], [])
        self.assertIn("dmm", report["benchmarks"])
        self.assertIn("joint_hawkes", report["benchmarks"])
        summary = pd.read_csv(out / "summary.csv")
        self.assertIn("full", set(summary["model"]))
        self.assertTrue((out / "are_full.csv").exists())

    def test_predict(self):
        out = self.root / "predictions"
        code = main(["predict", "-q", "--model-dir", str(self.model_dir), "--variant", "full",
                     "--corpus", str(self.test), "--out", str(out)])
        self.assertEqual(code, EXIT_OK)
        frame = pd.read_csv(out / "predictions.csv")
        self.assertEqual(len(frame), len(load_corpus(self.test).items))
        self.assertTrue((frame["popularity"] > 0).all())
        self.assertTrue((frame["half_life"] > 0).all())

    def test_whatif(self):
        out = self.root / "whatif"
        code = main(["whatif", "-q", "--model-dir", str(self.model_dir), "--headlines", str(self.headlines),
                     "--replicates", "50", "--out", str(out)])
        self.assertEqual(code, EXIT_OK)
        scores = pd.read_csv(out / "scores.csv")
        self.assertEqual(list(scores["headline_id"]), ["h1", "h2", "h3", "h4"])
        self.assertTrue(scores["popularity_better_than_average"].between(0, 1).all())
        styles = read_artifact(out / "style_summary.json", kind="style_summary")["payload"]
        self.assertEqual(set(styles), {"news", "clickbait"})
        self.assertTrue((out / "heatmap.csv").exists())
        self.assertTrue((out / "boxplot.csv").exists())

    def test_whatif_rejects_other_variants(self):
        code = main(["whatif", "-q", "--model-dir", str(self.model_dir / "full"),
                     "--headlines", str(self.headlines), "--out", str(self.root / "nope")])
        self.assertEqual(code, EXIT_INVALID)


class TestInvalidInput(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name)

    def test_malformed_corpus(self):
        corpus = self.root / "bad.jsonl"
        corpus.write_text('{"schema_version": 1, "source_id": "x"}\n{"item_id": "a", "y": [0],'
                          ' "cascades": [{"t": [0, 5, 2], "followers": 3}]}\n', encoding="utf-8")
        with self.assertLogs("mixture_hawkes.cli", level="ERROR") as logs:
            code = main(["fit", "-q", "--corpus", str(corpus), "--out", str(self.root / "out")])
        self.assertEqual(code, EXIT_INVALID)
        self.assertIn(f"{corpus}:2:", "\n".join(logs.output))

    def test_missing_required_flag(self):
        self.assertEqual(main(["fit", "-q"]), EXIT_INVALID)
        self.assertEqual(main(["whatif", "-q", "--model-dir", str(self.root)]), EXIT_INVALID)

    def test_missing_spec_file(self):
        self.assertEqual(main(["simulate", "-q", "--spec", str(self.root / "absent.json")]), EXIT_INVALID)


class TestRunConfigBuilder(unittest.TestCase):

    def test_overrides_and_defaults(self):
        config = RunConfigBuilder("fit").with_overrides(corpus=("a.jsonl",), seed=None, k_alpha=3).build()
        self.assertEqual(config.corpus, ("a.jsonl",))
        self.assertIsNone(config.seed)
        self.assertEqual(config.resolved_seed, 0)
        self.assertEqual(config.k_alpha, 3)
        self.assertEqual(config.em_config().seed, 0)
        self.assertEqual([v.value for v in config.variants()], ["full"])

    def test_validation(self):
        with self.assertRaises(ValueError):
            RunConfigBuilder("train")
        with self.assertRaises(ValueError):
            RunConfigBuilder("fit").with_overrides(colour="red")
        with self.assertRaises(ValueError):
            RunConfigBuilder("fit").build()
        with self.assertRaises(ValueError):
            RunConfigBuilder("fit").with_overrides(corpus=("a",), variant="partial").build()
        with self.assertRaises(ValueError):
            RunConfigBuilder("evaluate").with_overrides(model_dir="m", corpus=("a",), metrics=("auc",)).build()
        with self.assertRaises(ValueError):
            RunConfigBuilder("fit").with_overrides(corpus=("a",), fit={"max_iterations": 0}).build()

    def test_clone_is_independent(self):
        builder = RunConfigBuilder("fit").with_overrides(corpus=("a.jsonl",))
        clone = builder.clone().with_overrides(variant="all")
        self.assertNotIn("variant", builder.get_config_info())
        self.assertEqual(clone.get_config_info()["variant"], "all")
        self.assertEqual(len(clone.build().variants()), 4)

    def test_config_file_for_another_command(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "run.json"
            path.write_text(json.dumps({"command": "simulate", "spec": "s.json"}), encoding="utf-8")
            with self.assertRaises(CorpusFormatError):
                RunConfigBuilder("fit").with_file(str(path))
            path.write_text(json.dumps({"corpus": "a.jsonl", "k_theta": 4}), encoding="utf-8")
            config = RunConfigBuilder("fit").with_file(str(path)).build()
        self.assertEqual(config.corpus, ("a.jsonl",))
        self.assertEqual(config.k_theta, 4)


if __name__ == "__main__":
    unittest.main()
