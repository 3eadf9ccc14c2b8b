"""Command-line entry point: fit, simulate, predict, evaluate and whatif.

Every subcommand reads an optional TOML or JSON config (``--config``) and
lets flags override it. The merged :class:`RunConfig` is embedded in every
artifact written, so a run can be reproduced from any of its outputs.
Diagnostics go to stderr; results go only to files.

Exit codes: 0 success, 2 invalid input, 3 a fit did not converge
(artifacts are still written and carry ``converged: false``).

Output layout of ``fit``::

    <out>/<source_id>/standardization.json
    <out>/<source_id>/dmm_prefit.json
    <out>/<source_id>/<variant>/popularity.json
    <out>/<source_id>/<variant>/popularity_fit_report.json
    <out>/<source_id>/<variant>/kernel.json
    <out>/<source_id>/<variant>/kernel_fit_report.json
"""

import argparse
import copy
import json
import logging
import sys
import time

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from . import __version__
from .artifacts import read_artifact, write_artifact
from .bmh_model import KernelModel, PopularityModel, PriorConfig, Submodel, Variant, load_model, save_model
from .data_io import (
    Corpus,
    Standardization,
    SyntheticSpec,
    SyntheticSpecBuilder,
    generate_synthetic_corpus,
    load_corpus,
    load_headlines,
    save_corpus,
    source_summary,
    split_corpus,
    standardize_features,
)
from .errors import CorpusFormatError, MixtureHawkesError, ModelMismatchError
from .estimation import FitConfig, fit_kernel_model, fit_popularity_model
from .hawkes_core import HawkesParams, PowerLawKernel
from .mixture_dmm import BorelMixture, EmConfig, KernelMixture, fit_bmm, fit_joint_hawkes, fit_kmm
from .predict_eval import (
    SourceSummary,
    benchmark_are,
    benchmark_nll,
    better_than_average_probability,
    evaluate_are,
    evaluate_nll,
    item_popularity,
    predict_items,
    predictions_frame,
    summarize_by_style,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NOT_CONVERGED = 3

COMMANDS = ("fit", "simulate", "predict", "evaluate", "whatif")
SUBMODEL_CHOICES = ("popularity", "kernel", "both")
VARIANT_CHOICES = tuple(v.value for v in Variant) + ("all",)
METRIC_CHOICES = ("are", "nll")
HALF_LIFE_FORMULAS = ("literal", "analytic")


@dataclass(frozen=True)
class RunConfig:
    """Everything a subcommand needs; serialized into every artifact it writes."""

    command: str
    corpus: Tuple[str, ...] = ()
    out: str = "out"
    submodel: str = "both"
    variant: str = Variant.FULL.value
    k_alpha: int = 2
    k_theta: int = 3
    priors: Dict[str, Any] = field(default_factory=dict)
    seed: Optional[int] = None
    threads: int = 1
    metrics: Tuple[str, ...] = METRIC_CHOICES
    headlines: Optional[str] = None
    model_dir: Optional[str] = None
    spec: Optional[str] = None
    test_fraction: Optional[float] = None
    replicates: int = 1000
    half_life_formula: str = "literal"
    literal_popularity: bool = False
    fit: Dict[str, Any] = field(default_factory=dict)
    em: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["corpus"] = list(self.corpus)
        data["metrics"] = list(self.metrics)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        data = dict(data)
        data["corpus"] = tuple(data.get("corpus", ()))
        data["metrics"] = tuple(data.get("metrics", METRIC_CHOICES))
        return cls(**data)

    @property
    def resolved_seed(self) -> int:
        return 0 if self.seed is None else self.seed

    def fit_config(self) -> FitConfig:
        return FitConfig.from_dict({"seed": self.resolved_seed, **self.fit})

    def em_config(self) -> EmConfig:
        return EmConfig.from_dict({"seed": self.resolved_seed, **self.em})

    def prior_config(self) -> PriorConfig:
        base = PriorConfig.default(self.k_alpha, self.k_theta)
        return PriorConfig.from_dict({**base.to_dict(), **self.priors}) if self.priors else base

    def variants(self) -> List[Variant]:
        return list(Variant) if self.variant == "all" else [Variant.parse(self.variant)]

    def submodels(self) -> List[Submodel]:
        if self.submodel == "both":
            return [Submodel.POPULARITY, Submodel.KERNEL]
        return [Submodel(self.submodel)]


def _read_table(path: str, what: str) -> Dict[str, Any]:
    """Load a TOML (by suffix) or JSON mapping."""
    source = Path(path)
    if not source.exists():
        raise CorpusFormatError(f"{what} file not found", path=str(source))
    text = source.read_text(encoding="utf-8")
    try:
        data = tomllib.loads(text) if source.suffix == ".toml" else json.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise CorpusFormatError(f"Invalid TOML: {exc}", path=str(source)) from exc
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"Invalid JSON: {exc.msg}", exc.lineno, str(source)) from exc
    if not isinstance(data, dict):
        raise CorpusFormatError(f"{what} file must hold a mapping", path=str(source))
    return data


class RunConfigBuilder:
    """Merge a config file with command-line overrides into a RunConfig."""

    _FIELDS = {f.name for f in fields(RunConfig)}

    def __init__(self, command: str):
        if command not in COMMANDS:
            raise ValueError(f"Unknown command '{command}'. Choose from: {', '.join(COMMANDS)}")
        self._command = command
        self._values: Dict[str, Any] = {}

    def with_file(self, path: str) -> "RunConfigBuilder":
        data = _read_table(path, "Config")
        if "payload" in data and "run_config" in data:
            data = dict(data["run_config"] or {})
        if data.pop("command", self._command) != self._command:
            raise CorpusFormatError(f"Config was written for another command, not '{self._command}'", path=path)
        unknown = sorted(set(data) - self._FIELDS)
        if unknown:
            raise CorpusFormatError(f"Unknown config keys: {', '.join(unknown)}", path=path)
        if isinstance(data.get("priors"), str):
            data["priors"] = _read_table(data["priors"], "Priors")
        for key in ("corpus", "metrics"):
            if isinstance(data.get(key), str):
                data[key] = [data[key]]
        self._values.update(data)
        return self

    def with_priors_file(self, path: str) -> "RunConfigBuilder":
        self._values["priors"] = _read_table(path, "Priors")
        return self

    def with_overrides(self, **overrides) -> "RunConfigBuilder":
        """Set every override that is not None."""
        unknown = sorted(set(overrides) - self._FIELDS)
        if unknown:
            raise ValueError(f"Unknown settings: {', '.join(unknown)}")
        self._values.update({k: v for k, v in overrides.items() if v is not None})
        return self

    def get_config_info(self) -> Dict[str, Any]:
        return {"command": self._command, **copy.deepcopy(self._values)}

    def clone(self) -> "RunConfigBuilder":
        return copy.deepcopy(self)

    def build(self) -> RunConfig:
        try:
            config = RunConfig.from_dict({"command": self._command, **self._values})
        except TypeError as exc:
            raise ValueError(f"Invalid configuration: {exc}") from None
        self._validate(config)
        return config

    def _validate(self, config: RunConfig) -> None:
        if config.submodel not in SUBMODEL_CHOICES:
            raise ValueError(f"Unknown submodel '{config.submodel}'. Choose from: {', '.join(SUBMODEL_CHOICES)}")
        if config.variant not in VARIANT_CHOICES:
            raise ValueError(f"Unknown variant '{config.variant}'. Choose from: {', '.join(VARIANT_CHOICES)}")
        if config.k_alpha < 1 or config.k_theta < 1:
            raise ValueError(f"Class counts must be positive, got {config.k_alpha} and {config.k_theta}")
        if config.threads < 1 or config.replicates < 1:
            raise ValueError("threads and replicates must be positive")
        if not set(config.metrics) <= set(METRIC_CHOICES) or not config.metrics:
            raise ValueError(f"Metrics must be drawn from {', '.join(METRIC_CHOICES)}, got {list(config.metrics)}")
        if config.half_life_formula not in HALF_LIFE_FORMULAS:
            raise ValueError(f"Half-life formula must be one of {', '.join(HALF_LIFE_FORMULAS)}")
        if config.test_fraction is not None and not 0 < config.test_fraction < 1:
            raise ValueError(f"test_fraction must lie in (0, 1), got {config.test_fraction}")
        required = {
            "fit": ("corpus",),
            "simulate": ("spec",),
            "predict": ("model_dir", "corpus"),
            "evaluate": ("model_dir", "corpus"),
            "whatif": ("model_dir", "headlines"),
        }[config.command]
        missing = [name for name in required if not getattr(config, name)]
        if missing:
            flags = ", ".join("--" + name.replace("_", "-") for name in missing)
            raise ValueError(f"'{config.command}' needs {flags}")
        try:
            config.fit_config()
            config.em_config()
            config.prior_config()
        except TypeError as exc:
            raise ValueError(f"Invalid nested setting: {exc}") from None

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "RunConfigBuilder":
        builder = cls(args.command)
        if args.config:
            builder.with_file(args.config)
        if getattr(args, "priors", None):
            builder.with_priors_file(args.priors)
        overrides = {}
        for name in ("out", "submodel", "variant", "k_alpha", "k_theta", "seed", "threads", "headlines",
                     "model_dir", "spec", "test_fraction", "replicates", "half_life_formula"):
            overrides[name] = getattr(args, name, None)
        if getattr(args, "corpus", None):
            overrides["corpus"] = tuple(args.corpus)
        if getattr(args, "metrics", None):
            overrides["metrics"] = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
        if getattr(args, "literal_popularity", False):
            overrides["literal_popularity"] = True
        return builder.with_overrides(**overrides)


# Shared helpers

def _standardized(corpus: Corpus, constants: Optional[Standardization]) -> Corpus:
    """Apply training constants to a raw corpus; standardized corpora pass through."""
    if corpus.standardized:
        return corpus
    if constants is None:
        raise ModelMismatchError(f"Corpus '{corpus.source_id}' is raw and no standardization constants were found")
    return standardize_features(corpus, constants)[0]


def _load_standardization(model_dir: Path) -> Optional[Standardization]:
    for directory in (model_dir, model_dir.parent):
        path = directory / "standardization.json"
        if path.exists():
            return Standardization.from_dict(read_artifact(path, kind="standardization")["payload"])
    return None


def _variant_dir(model_dir: Path, variant: Variant) -> Path:
    if (model_dir / "popularity.json").exists() or (model_dir / "kernel.json").exists():
        return model_dir
    return model_dir / variant.value


def _load_variant_models(directory: Path) -> Tuple[Optional[PopularityModel], Optional[KernelModel]]:
    loaded = []
    for name, model_cls in (("popularity", PopularityModel), ("kernel", KernelModel)):
        path = directory / f"{name}.json"
        model = load_model(path) if path.exists() else None
        if model is not None and not isinstance(model, model_cls):
            raise ModelMismatchError(f"{path} does not hold a {name} model")
        loaded.append(model)
    return loaded[0], loaded[1]


def _summary_of(*models) -> SourceSummary:
    for model in models:
        if model is not None and model.source_summary:
            return SourceSummary.from_dict(model.source_summary)
    raise ModelMismatchError("Fitted models carry no source summary")


def _load_prefit(model_dir: Path) -> Tuple[Optional[BorelMixture], Optional[KernelMixture], Optional[HawkesParams]]:
    path = model_dir / "dmm_prefit.json"
    if not path.exists():
        return None, None, None
    payload = read_artifact(path, kind="dmm_prefit")["payload"]
    borel = BorelMixture.from_dict(payload["borel"]) if payload.get("borel") else None
    kernel = KernelMixture.from_dict(payload["kernel"]) if payload.get("kernel") else None
    joint = payload.get("joint_hawkes")
    if joint:
        joint = HawkesParams(joint["alpha"], PowerLawKernel.from_dict(joint["kernel"]))
    return borel, kernel, joint or None


# fit

@dataclass
class _Source:
    corpus: Corpus
    summary: SourceSummary
    out_dir: Path
    borel: Optional[BorelMixture] = None
    kernel: Optional[KernelMixture] = None


def _prepare_source(path: str, config: RunConfig, run_config: Dict[str, Any]) -> _Source:
    """Load, standardize, summarise and pre-fit the DMM of one source."""
    corpus = load_corpus(path)
    if corpus.standardized:
        constants = corpus.standardization
    else:
        corpus, constants = standardize_features(corpus)
    out_dir = Path(config.out) / corpus.source_id
    write_artifact(out_dir / "standardization.json", "standardization", constants.to_dict(), run_config)
    source = _Source(corpus, source_summary(corpus), out_dir)

    submodels = config.submodels()
    em_config = config.em_config()
    cascades = corpus.cascades()
    prefit: Dict[str, Any] = {"borel": None, "kernel": None, "joint_hawkes": None}
    if Submodel.POPULARITY in submodels:
        source.borel = fit_bmm([c.size for c in cascades], config.k_alpha, em_config)
        prefit["borel"] = source.borel.to_dict()
    if Submodel.KERNEL in submodels:
        source.kernel = fit_kmm(cascades, config.k_theta, em_config)
        joint = fit_joint_hawkes(cascades)
        prefit["kernel"] = source.kernel.to_dict()
        prefit["joint_hawkes"] = {"alpha": joint.alpha, "kernel": joint.kernel.to_dict()}
    write_artifact(out_dir / "dmm_prefit.json", "dmm_prefit", prefit, run_config)
    return source


def _fit_job(source: _Source, submodel: Submodel, variant: Variant, config: RunConfig,
             run_config: Dict[str, Any]) -> bool:
    start = time.perf_counter()
    if submodel is Submodel.POPULARITY:
        model, report, _ = fit_popularity_model(
            source.corpus, config.k_alpha, variant, config.prior_config(), config.fit_config(),
            config.em_config(), dmm=source.borel,
        )
    else:
        model, report, _ = fit_kernel_model(
            source.corpus, config.k_theta, variant, config.prior_config(), config.fit_config(),
            config.em_config(), dmm=source.kernel,
        )
    model.source_summary = source.summary.to_dict()
    directory = source.out_dir / variant.value
    save_model(model, directory / f"{submodel.value}.json", run_config)
    write_artifact(directory / f"{submodel.value}_fit_report.json", "fit_report", report.to_dict(), run_config)
    logger.info(
        "Fitted %s/%s for '%s' in %.1fs (objective %.6g, converged=%s)",
        submodel.value, variant.value, source.corpus.source_id, time.perf_counter() - start,
        report.final_objective, report.converged,
    )
    if not report.converged:
        logger.warning("%s/%s for '%s' did not converge: %s",
                       submodel.value, variant.value, source.corpus.source_id, report.message)
    return report.converged


def cmd_fit(config: RunConfig) -> int:
    run_config = config.to_dict()
    sources = [_prepare_source(path, config, run_config) for path in config.corpus]
    ids = [s.corpus.source_id for s in sources]
    if len(set(ids)) != len(ids):
        raise ModelMismatchError(f"Corpora share source ids: {ids}")

    jobs = [(s, m, v) for s in sources for m in config.submodels() for v in config.variants()]
    with ThreadPoolExecutor(max_workers=config.threads) as pool:
        converged = list(pool.map(lambda job: _fit_job(*job, config, run_config), jobs))
    if not all(converged):
        logger.warning("%d of %d fits did not converge", converged.count(False), len(jobs))
        return EXIT_NOT_CONVERGED
    return EXIT_OK


# simulate

_SPEC_SETTINGS = {
    "k_alpha", "k_theta", "dim_x", "dim_y", "n_items", "cascades_per_item", "follower_log_mean",
    "follower_log_sd", "max_cascade_size", "seed", "source_id",
}


def _synthetic_spec(data: Dict[str, Any], seed_override: Optional[int], path: str) -> SyntheticSpec:
    """A full SyntheticSpec document, or builder-level settings with default truths."""
    if "popularity" in data and "kernel" in data:
        spec = SyntheticSpec.from_dict(data)
        return replace(spec, seed=seed_override) if seed_override is not None else spec
    unknown = sorted(set(data) - _SPEC_SETTINGS)
    if unknown:
        raise CorpusFormatError(f"Unknown synthetic spec keys: {', '.join(unknown)}", path=path)
    builder = (
        SyntheticSpecBuilder()
        .with_classes(data.get("k_alpha", 2), data.get("k_theta", 3))
        .with_dimensions(data.get("dim_x", 1), data.get("dim_y", 2))
        .with_items(data.get("n_items", 200), data.get("cascades_per_item", 50.0))
    )
    if "follower_log_mean" in data or "follower_log_sd" in data:
        builder.with_followers(data.get("follower_log_mean", 5.0), data.get("follower_log_sd", 2.0))
    if "max_cascade_size" in data:
        builder.with_max_cascade_size(data["max_cascade_size"])
    if "source_id" in data:
        builder.with_source_id(data["source_id"])
    seed = seed_override if seed_override is not None else data.get("seed")
    if seed is not None:
        builder.with_seed(seed)
    return builder.build()


def cmd_simulate(config: RunConfig) -> int:
    # The synthetic spec file owns the seed unless the run config sets one.
    spec = _synthetic_spec(_read_table(config.spec, "Synthetic spec"), config.seed, config.spec)
    run_config = config.to_dict()
    corpus, truth = generate_synthetic_corpus(spec)
    out = Path(config.out)
    path = out if out.suffix == ".jsonl" else out / f"{spec.source_id}.jsonl"
    save_corpus(corpus, path)
    write_artifact(path.with_suffix(".truth.json"), "synthetic_truth", truth, run_config)
    logger.info("Wrote %d items (%d cascades) to %s", len(corpus.items), corpus.n_cascades, path)
    if config.test_fraction is not None:
        train, test = split_corpus(corpus, config.test_fraction, spec.seed)
        save_corpus(train, path.with_suffix(".train.jsonl"))
        save_corpus(test, path.with_suffix(".test.jsonl"))
    return EXIT_OK


# predict

def cmd_predict(config: RunConfig) -> int:
    model_dir = Path(config.model_dir)
    variant = config.variants()[0]
    directory = _variant_dir(model_dir, variant)
    popularity, kernel = _load_variant_models(directory)
    if popularity is None and kernel is None:
        raise ModelMismatchError(f"No fitted models under {directory}")
    corpus = _standardized(load_corpus(config.corpus[0]), _load_standardization(directory))
    predictions = predict_items(
        corpus.items, _summary_of(popularity, kernel), popularity, kernel,
        literal=config.literal_popularity, formula=config.half_life_formula,
    )
    frame = predictions_frame(predictions)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out / "predictions.csv", index=False)
    write_artifact(out / "predictions.json", "predictions", {"rows": frame.to_dict(orient="records")},
                   config.to_dict())
    logger.info("Predicted %d items", len(predictions))
    return EXIT_OK


# evaluate

def cmd_evaluate(config: RunConfig) -> int:
    model_dir = Path(config.model_dir)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    test = _standardized(load_corpus(config.corpus[0]), _load_standardization(model_dir))
    actual = [item_popularity(item) for item in test.items]

    report: Dict[str, Any] = {"variants": {}, "absent_variants": [], "benchmarks": {}}
    rows = []
    summary = None
    for variant in Variant:
        popularity, kernel = _load_variant_models(model_dir / variant.value)
        if popularity is None and kernel is None:
            report["absent_variants"].append(variant.value)
            continue
        summary = summary or _summary_of(popularity, kernel)
        entry: Dict[str, Any] = {}
        row = {"model": variant.value, "popularity_label": variant.popularity_label,
               "kernel_label": variant.kernel_label}
        if "are" in config.metrics and popularity is not None:
            predictions = predict_items(test.items, _summary_of(popularity), popularity,
                                        literal=config.literal_popularity)
            are = evaluate_are(predictions, actual)
            are.to_frame().to_csv(out / f"are_{variant.value}.csv", index=False)
            entry["are"] = are.to_dict()
            row["are"] = str(are.summary)
        if "nll" in config.metrics and kernel is not None:
            nll = evaluate_nll(kernel, test.items)
            nll.to_frame().to_csv(out / f"nll_{variant.value}.csv", index=False)
            entry["nll"] = nll.to_dict()
            row["nll"] = str(nll.summary)
        report["variants"][variant.value] = entry
        rows.append(row)
    if not rows:
        raise ModelMismatchError(f"No fitted variants under {model_dir}")
    if report["absent_variants"]:
        logger.info("Variants not fitted: %s", ", ".join(report["absent_variants"]))

    borel, kernel_mixture, joint = _load_prefit(model_dir)
    benchmarks: Dict[str, Dict[str, Any]] = {}
    if "are" in config.metrics and borel is not None:
        benchmarks.setdefault("dmm", {})["are"] = benchmark_are(test.items, borel, summary)
    if "nll" in config.metrics:
        for name, metric in benchmark_nll(test.items, kernel_mixture, joint).items():
            benchmarks.setdefault(name, {})["nll"] = metric
    for name, metrics in benchmarks.items():
        row = {"model": name}
        for metric_name, metric in metrics.items():
            metric.to_frame().to_csv(out / f"{metric_name}_{name}.csv", index=False)
            row[metric_name] = str(metric.summary)
        report["benchmarks"][name] = {k: m.to_dict() for k, m in metrics.items()}
        rows.append(row)

    pd.DataFrame(rows).to_csv(out / "summary.csv", index=False)
    write_artifact(out / "evaluation.json", "evaluation", report, config.to_dict())
    return EXIT_OK


# whatif

def cmd_whatif(config: RunConfig) -> int:
    required = Variant.Y_CENTER_GATE
    model_dir = Path(config.model_dir)
    directory = _variant_dir(model_dir, required)
    popularity, kernel = _load_variant_models(directory)
    if popularity is None or kernel is None:
        raise ModelMismatchError(f"What-if scoring needs both '{required.value}' models under {model_dir}")
    for model in (popularity, kernel):
        if model.variant is not required:
            found = model.variant.value if model.variant else "custom"
            raise ModelMismatchError(f"What-if scoring needs the '{required.value}' variant, found '{found}'")

    headlines = load_headlines(config.headlines)
    y = headlines.y
    constants = _load_standardization(directory)
    if constants is not None:
        if constants.y_mean.size != y.shape[1]:
            raise ModelMismatchError(f"Headlines have {y.shape[1]} features, the model expects {constants.y_mean.size}")
        y = (y - constants.y_mean) / constants.y_std
    # Cold-start what-if predictions are per cascade.
    summary = _summary_of(popularity).with_mean_cascade_count(1.0)
    scores = better_than_average_probability(
        popularity, kernel, y, summary, replicates=config.replicates, seed=config.resolved_seed,
        headline_ids=headlines.headline_ids, styles=headlines.styles, formula=config.half_life_formula,
    )

    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    frame = scores.to_frame()
    frame.to_csv(out / "scores.csv", index=False)
    write_artifact(out / "style_summary.json", "style_summary", summarize_by_style(scores), config.to_dict())
    heatmap = frame[["headline_id", "style"]].assign(
        log_popularity=np.log(frame["popularity"]), log_half_life=np.log(frame["half_life"])
    )
    heatmap.to_csv(out / "heatmap.csv", index=False)
    boxplot = frame.melt(
        id_vars=["headline_id", "style"],
        value_vars=["popularity_better_than_average", "half_life_better_than_average"],
        var_name="metric",
        value_name="probability",
    )
    boxplot.to_csv(out / "boxplot.csv", index=False)
    logger.info("Scored %d headlines across %d styles", len(frame), frame["style"].nunique())
    return EXIT_OK


# Parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON run config; flags override it")
    common.add_argument("--out", help="Output directory (simulate: directory or .jsonl path)")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    common.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only")

    parser = argparse.ArgumentParser(prog="mixture-hawkes", description="Feature-gated Hawkes mixture models")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    fit = commands.add_parser("fit", parents=[common], help="Fit BMH models per source")
    fit.add_argument("--corpus", action="append", help="Corpus JSONL; repeat for several sources")
    fit.add_argument("--submodel", choices=SUBMODEL_CHOICES)
    fit.add_argument("--variant", choices=VARIANT_CHOICES)
    fit.add_argument("--k-alpha", dest="k_alpha", type=int)
    fit.add_argument("--k-theta", dest="k_theta", type=int)
    fit.add_argument("--priors", help="TOML or JSON file of prior settings")
    fit.add_argument("--threads", type=int, help="Concurrent fits")

    simulate = commands.add_parser("simulate", parents=[common], help="Generate a synthetic corpus")
    simulate.add_argument("--spec", help="Synthetic spec (TOML or JSON)")
    simulate.add_argument("--test-fraction", dest="test_fraction", type=float,
                          help="Also write an item-level train/test split")

    predict = commands.add_parser("predict", parents=[common], help="Cold-start predictions for a corpus")
    predict.add_argument("--model-dir", dest="model_dir")
    predict.add_argument("--corpus", action="append")
    predict.add_argument("--variant", choices=VARIANT_CHOICES[:-1])
    predict.add_argument("--half-life-formula", dest="half_life_formula", choices=HALF_LIFE_FORMULAS)
    predict.add_argument("--literal-popularity", dest="literal_popularity", action="store_true")

    evaluate = commands.add_parser("evaluate", parents=[common], help="ARE and NLL of fitted variants")
    evaluate.add_argument("--model-dir", dest="model_dir")
    evaluate.add_argument("--corpus", action="append")
    evaluate.add_argument("--metrics", help="Comma-separated: are,nll")
    evaluate.add_argument("--literal-popularity", dest="literal_popularity", action="store_true")

    whatif = commands.add_parser("whatif", parents=[common], help="Score headlines against a source average")
    whatif.add_argument("--model-dir", dest="model_dir")
    whatif.add_argument("--headlines")
    whatif.add_argument("--replicates", type=int)
    whatif.add_argument("--half-life-formula", dest="half_life_formula", choices=HALF_LIFE_FORMULAS)
    return parser


def _configure_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(stream=sys.stderr, level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    logging.getLogger("mixture_hawkes").setLevel(level)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose, args.quiet)
    try:
        config = RunConfigBuilder.from_args(args).build()
        if config.command == "fit":
            return cmd_fit(config)
        if config.command == "simulate":
            return cmd_simulate(config)
        if config.command == "predict":
            return cmd_predict(config)
        if config.command == "evaluate":
            return cmd_evaluate(config)
        return cmd_whatif(config)
    except (MixtureHawkesError, ValueError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
