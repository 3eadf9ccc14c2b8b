"""Cold-start prediction, evaluation metrics and headline what-if scoring."""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.special import expit, log_softmax, logsumexp, softmax

from .bmh_model import FeatureConfig, KernelModel, PopularityModel
from .errors import DomainError, ModelMismatchError
from .hawkes_core import LN2, DelayIndex, HawkesParams, PowerLawKernel, kernel_log_likelihood_matrix
from .mixture_dmm import (
    PREDICTION_ALPHA_CLAMP,
    BorelMixture,
    DmmModel,
    KernelMixture,
    dmm_holdout_nll,
    dmm_predict_popularity,
)

logger = logging.getLogger(__name__)

HALF_LIFE_EXPONENT_CAP = 30.0
BOOTSTRAP_REPLICATES = 1000


@dataclass
class FollowerDistribution:
    """Discrete empirical distribution of cascade features over a source."""

    support: np.ndarray
    probs: np.ndarray
    source_id: str = ""
    sample_size: int = 0

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float).ravel()
        self.support = np.asarray(self.support, dtype=float).reshape(self.probs.size, -1)
        if self.probs.size == 0:
            raise DomainError("Follower distribution needs at least one support point")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-9:
            raise DomainError("Follower probabilities must sum to 1")
        if not np.all(np.isfinite(self.support)):
            raise DomainError("Follower support must be finite")
        if self.sample_size <= 0:
            self.sample_size = int(self.probs.size)

    @property
    def dim_x(self) -> int:
        return int(self.support.shape[1])

    @classmethod
    def point_mass(cls, x, source_id: str = "") -> "FollowerDistribution":
        return cls(np.atleast_2d(np.asarray(x, dtype=float)), np.ones(1), source_id, 1)

    def resampled_probs(self, rng: np.random.Generator, replicates: int) -> np.ndarray:
        """Bootstrap replicates of the bin probabilities, shape (replicates, bins)."""
        return rng.multinomial(self.sample_size, self.probs, size=replicates) / self.sample_size

    def to_dict(self) -> Dict[str, Any]:
        return {
            "support": self.support.tolist(),
            "probs": self.probs.tolist(),
            "source_id": self.source_id,
            "sample_size": self.sample_size,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FollowerDistribution":
        return cls(np.asarray(data["support"], dtype=float), np.asarray(data["probs"]), data.get("source_id", ""),
                   data.get("sample_size", 0))


@dataclass
class SourceSummary:
    """Per-source quantities needed for cold-start prediction."""

    mean_cascade_count: float
    follower_dist: FollowerDistribution
    history_y: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    source_id: str = ""

    def __post_init__(self):
        if not self.mean_cascade_count > 0:
            raise DomainError(f"Mean cascade count must be positive, got {self.mean_cascade_count}")
        self.history_y = np.asarray(self.history_y, dtype=float)
        if self.history_y.ndim != 2:
            raise DomainError("Historical item features must be a two-dimensional array")

    def with_mean_cascade_count(self, value: float) -> "SourceSummary":
        return replace(self, mean_cascade_count=float(value))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mean_cascade_count": self.mean_cascade_count,
            "follower_dist": self.follower_dist.to_dict(),
            "history_y": self.history_y.tolist(),
            "history_shape": list(self.history_y.shape),
            "source_id": self.source_id,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SourceSummary":
        shape = tuple(data.get("history_shape", (0, 0)))
        history = np.asarray(data.get("history_y", []), dtype=float).reshape(shape)
        return cls(
            mean_cascade_count=data["mean_cascade_count"],
            follower_dist=FollowerDistribution.from_dict(data["follower_dist"]),
            history_y=history,
            source_id=data.get("source_id", ""),
        )


@dataclass
class Prediction:
    item_id: str
    popularity: Optional[float] = None
    half_life: Optional[float] = None
    popularity_components: Optional[np.ndarray] = None
    popularity_memberships: Optional[np.ndarray] = None
    half_life_components: Optional[np.ndarray] = None
    half_life_memberships: Optional[np.ndarray] = None
    flags: List[str] = field(default_factory=list)

    def to_row(self) -> Dict[str, Any]:
        row: Dict[str, Any] = {"item_id": self.item_id}
        if self.popularity is not None:
            row["popularity"] = self.popularity
            for k, value in enumerate(self.popularity_components):
                row[f"popularity_class_{k + 1}"] = value
        if self.half_life is not None:
            row["half_life"] = self.half_life
            for k, value in enumerate(self.half_life_components):
                row[f"half_life_class_{k + 1}"] = value
        row["flags"] = ";".join(self.flags)
        return row


@dataclass(frozen=True)
class QuantileSummary:
    median: float
    q25: float
    q75: float

    @classmethod
    def from_values(cls, values) -> "QuantileSummary":
        values = np.asarray(values, dtype=float)
        if values.size == 0:
            return cls(float("nan"), float("nan"), float("nan"))
        q25, median, q75 = np.quantile(values, [0.25, 0.5, 0.75], method="linear")
        return cls(float(median), float(q25), float(q75))

    def __str__(self) -> str:
        return f"{self.median:.3f} ({self.q25:.3f}, {self.q75:.3f})"

    def to_dict(self) -> Dict[str, float]:
        return {"median": self.median, "q25": self.q25, "q75": self.q75}


@dataclass
class MetricReport:
    metric: str
    item_ids: List[str]
    values: np.ndarray
    excluded_items: List[str] = field(default_factory=list)

    @property
    def summary(self) -> QuantileSummary:
        return QuantileSummary.from_values(self.values)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"item_id": self.item_ids, self.metric: self.values})

    def to_dict(self) -> Dict[str, Any]:
        return {
            "metric": self.metric,
            "summary": self.summary.to_dict(),
            "formatted": str(self.summary),
            "n_items": len(self.item_ids),
            "excluded_items": list(self.excluded_items),
        }


# Shared closed forms

def _feature_matrix(values, dim: int, what: str) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    matrix = values.reshape(1, -1) if values.ndim <= 1 else values
    if matrix.shape[1] != dim:
        raise ModelMismatchError(f"{what} has dimension {matrix.shape[1]}, the model expects {dim}")
    return matrix


def _memberships(delta_z, beta, gamma_z, features: FeatureConfig, support: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gate probabilities for every (item y, follower support point): shape (H, B, K)."""
    h, b = y.shape[0], support.shape[0]
    logits = np.broadcast_to(np.asarray(delta_z, dtype=float), (h, b, len(delta_z))).copy()
    if features.x_in_gate:
        logits += (support @ np.asarray(beta).T)[None, :, :]
    if features.y_in_gate:
        logits += (y @ np.asarray(gamma_z).T)[:, None, :]
    logits = np.concatenate([np.zeros((h, b, 1)), logits], axis=2)
    return softmax(logits, axis=2)


def _popularity_class_values(model: PopularityModel, y: np.ndarray, literal: bool, clamp: float):
    g = model.global_params
    centers = np.tile(g.delta_alpha, (y.shape[0], 1))
    if model.features.y_in_center:
        centers = centers + y @ g.gamma_alpha.T
    if literal:
        return centers, np.zeros(y.shape[0], dtype=bool)
    alpha = expit(centers)
    clamped = np.any(alpha > clamp, axis=1)
    return 1.0 / (1.0 - np.minimum(alpha, clamp)), clamped


def _half_life_class_values(model: KernelModel, y: np.ndarray, formula: str, cap: float):
    g = model.global_params
    log_theta = np.tile(g.delta_theta, (y.shape[0], 1))
    if model.features.y_in_center:
        log_theta = log_theta + y @ g.gamma_theta.T
    if formula == "literal":
        exponent = np.exp(log_theta)
    elif formula == "analytic":
        exponent = np.exp(-log_theta)
    else:
        raise ValueError(f"Unknown half-life formula '{formula}'. Choose 'literal' or 'analytic'")
    capped = np.any(exponent > cap, axis=1)
    exponent = np.minimum(exponent, cap)
    return np.exp(g.delta_d) * np.expm1(LN2 * exponent), capped


def _require(model, model_cls, what: str) -> None:
    if not isinstance(model, model_cls):
        raise ModelMismatchError(f"{what} prediction needs a fitted {model_cls.__name__}, got {type(model).__name__}")


def _check_support(summary: SourceSummary, features: FeatureConfig) -> np.ndarray:
    support = summary.follower_dist.support
    if support.shape[1] != features.dim_x:
        raise ModelMismatchError(
            f"Follower distribution has dimension {support.shape[1]}, the model expects {features.dim_x}")
    return support


# Prediction

def predict_item_popularity(
    model: PopularityModel,
    y,
    summary: SourceSummary,
    item_id: str = "",
    literal: bool = False,
    clamp: float = PREDICTION_ALPHA_CLAMP,
) -> Prediction:
    """Cold-start popularity C * sum_x sum_k z_k(x, y) E[N | alpha_k(y)] f(x).

    ``literal=True`` multiplies the memberships by the logit-scale class
    centres instead of the expected Borel size.
    """
    _require(model, PopularityModel, "Popularity")
    y = _feature_matrix(y, model.features.dim_y, "Item feature vector")
    support = _check_support(summary, model.features)
    g = model.global_params
    values, clamped = _popularity_class_values(model, y, literal, clamp)
    z = _memberships(g.delta_z_alpha, g.beta_z_alpha, g.gamma_z_alpha, model.features, support, y)[0]
    memberships = summary.follower_dist.probs @ z
    components = summary.mean_cascade_count * memberships * values[0]
    flags = []
    if literal:
        flags.append("literal_popularity_formula")
    if clamped[0]:
        flags.append("alpha_clamped")
        logger.warning("Branching factor clamped at %.3f for item '%s'", clamp, item_id)
    return Prediction(
        item_id=item_id,
        popularity=float(components.sum()),
        popularity_components=components,
        popularity_memberships=memberships,
        flags=flags,
    )


def predict_item_half_life(
    model: KernelModel,
    y,
    summary: SourceSummary,
    item_id: str = "",
    formula: str = "literal",
    cap: float = HALF_LIFE_EXPONENT_CAP,
) -> Prediction:
    """Cold-start half-life sum_x sum_k z_k(x, y) d_k (2**theta_k(y) - 1) f(x).

    ``formula="analytic"`` uses the kernel half-mass point d (2**(1/theta) - 1).
    """
    _require(model, KernelModel, "Half-life")
    y = _feature_matrix(y, model.features.dim_y, "Item feature vector")
    support = _check_support(summary, model.features)
    g = model.global_params
    values, capped = _half_life_class_values(model, y, formula, cap)
    z = _memberships(g.delta_z_theta, g.beta_z_theta, g.gamma_z_theta, model.features, support, y)[0]
    memberships = summary.follower_dist.probs @ z
    components = memberships * values[0]
    flags = [] if formula == "literal" else ["analytic_half_life"]
    if capped[0]:
        flags.append("exponent_capped")
        logger.warning("Half-life exponent capped at %.0f for item '%s'", cap, item_id)
    return Prediction(
        item_id=item_id,
        half_life=float(components.sum()),
        half_life_components=components,
        half_life_memberships=memberships,
        flags=flags,
    )


def predict_items(
    items: Sequence[Any],
    summary: SourceSummary,
    popularity_model: Optional[PopularityModel] = None,
    kernel_model: Optional[KernelModel] = None,
    literal: bool = False,
    formula: str = "literal",
) -> List[Prediction]:
    """Predict every item with whichever submodels are supplied."""
    predictions = []
    for item in items:
        prediction = Prediction(item_id=item.item_id)
        if popularity_model is not None:
            part = predict_item_popularity(popularity_model, item.y, summary, item.item_id, literal=literal)
            prediction.popularity = part.popularity
            prediction.popularity_components = part.popularity_components
            prediction.popularity_memberships = part.popularity_memberships
            prediction.flags.extend(part.flags)
        if kernel_model is not None:
            part = predict_item_half_life(kernel_model, item.y, summary, item.item_id, formula=formula)
            prediction.half_life = part.half_life
            prediction.half_life_components = part.half_life_components
            prediction.half_life_memberships = part.half_life_memberships
            prediction.flags.extend(part.flags)
        predictions.append(prediction)
    return predictions


def predictions_frame(predictions: Sequence[Prediction]) -> pd.DataFrame:
    return pd.DataFrame([p.to_row() for p in predictions])


# Metrics

def evaluate_are(predictions, actual_counts, item_ids: Optional[Sequence[str]] = None) -> MetricReport:
    """Per-item |N_hat - N| / N."""
    predicted = np.array([p.popularity if isinstance(p, Prediction) else p for p in predictions], dtype=float)
    actual = np.asarray(actual_counts, dtype=float)
    if predicted.shape != actual.shape:
        raise ModelMismatchError(f"{predicted.size} predictions but {actual.size} actual counts")
    if np.any(actual < 1):
        raise DomainError("Actual counts must be at least 1")
    if item_ids is None:
        item_ids = [p.item_id if isinstance(p, Prediction) else str(i) for i, p in enumerate(predictions)]
    return MetricReport("are", list(item_ids), np.abs(predicted - actual) / actual)


def item_popularity(item) -> int:
    """Observed popularity of an item: total events over all its cascades."""
    return int(sum(c.size for c in item.cascades))


def _item_kernel_blocks(model: KernelModel, item_id: str, use_item_blocks: bool):
    g = model.global_params
    position = model.item_params.index(item_id) if use_item_blocks else None
    if position is None:
        return g.p_theta_mean, g.p_z_mean
    return model.item_params.p_theta[position], model.item_params.p_z[position]


def item_kernel_nll(model: KernelModel, item, use_item_blocks: bool = True) -> Optional[float]:
    """Per-event mixture NLL of one item's interevent data; None without informative cascades."""
    informative = [c for c in item.cascades if c.size >= 2]
    if not informative:
        return None
    g = model.global_params
    k = model.n_classes
    p_theta, p_z = _item_kernel_blocks(model, item.item_id, use_item_blocks)
    y = _feature_matrix(item.y, model.features.dim_y, "Item feature vector")[0]
    log_theta = p_theta[:, 0] + (g.gamma_theta @ y if model.features.y_in_center else 0.0)
    kernels = [PowerLawKernel(float(np.exp(lt)), float(np.exp(ld))) for lt, ld in zip(log_theta, p_theta[:, 1])]
    index = DelayIndex.from_cascades(informative)
    ll = kernel_log_likelihood_matrix(index, kernels)

    x = np.array([c.features_x for c in informative], dtype=float).reshape(len(informative), -1)
    logits = np.tile(p_z[:k - 1], (len(informative), 1))
    if model.features.x_in_gate:
        logits += x @ p_z[k - 1:].reshape(k - 1, model.features.dim_x).T
    if model.features.y_in_gate:
        logits += g.gamma_z_theta @ y
    log_z = log_softmax(np.concatenate([np.zeros((len(informative), 1)), logits], axis=1), axis=1)
    return float(-logsumexp(ll + log_z, axis=1).sum() / index.n_events)


def evaluate_nll(model: KernelModel, items: Sequence[Any], use_item_blocks: bool = True) -> MetricReport:
    """Per-item, per-event held-out NLL under the kernel model.

    Items seen during fitting use their own blocks unless
    ``use_item_blocks`` is False; unseen items use the source means. Items
    with only size-1 cascades are excluded and listed.
    """
    _require(model, KernelModel, "NLL evaluation")
    ids, values, excluded = [], [], []
    for item in items:
        nll = item_kernel_nll(model, item, use_item_blocks)
        if nll is None:
            excluded.append(item.item_id)
            continue
        ids.append(item.item_id)
        values.append(nll)
    if excluded:
        logger.info("Excluded %d items without multi-event cascades from NLL", len(excluded))
    return MetricReport("nll", ids, np.asarray(values, dtype=float), excluded)


def benchmark_nll(
    items: Sequence[Any],
    dmm: Optional[Union[DmmModel, KernelMixture]] = None,
    joint: Optional[HawkesParams] = None,
) -> Dict[str, MetricReport]:
    """Per-item NLL rows for the DMM and joint-Hawkes generative benchmarks."""
    rows: Dict[str, MetricReport] = {}
    benchmarks: Dict[str, KernelMixture] = {}
    if dmm is not None:
        benchmarks["dmm"] = dmm.kernel if isinstance(dmm, DmmModel) else dmm
    if joint is not None:
        benchmarks["joint_hawkes"] = KernelMixture([joint.kernel], np.ones(1))
    for name, model in benchmarks.items():
        ids, values, excluded = [], [], []
        for item in items:
            if not any(c.size >= 2 for c in item.cascades):
                excluded.append(item.item_id)
                continue
            ids.append(item.item_id)
            values.append(dmm_holdout_nll(model, item.cascades))
        rows[name] = MetricReport("nll", ids, np.asarray(values, dtype=float), excluded)
    return rows


def benchmark_are(
    items: Sequence[Any], dmm: Union[DmmModel, BorelMixture], summary: SourceSummary
) -> MetricReport:
    """DMM cold-start ARE: every item gets the same feature-free prediction."""
    prediction = dmm_predict_popularity(dmm, summary.mean_cascade_count)
    return evaluate_are([prediction] * len(items), [item_popularity(i) for i in items], [i.item_id for i in items])


# What-if scoring

@dataclass
class HeadlineScores:
    """Per-headline predictions and better-than-average probabilities."""

    headline_ids: List[str]
    popularity: np.ndarray
    half_life: np.ndarray
    popularity_probability: np.ndarray
    half_life_probability: np.ndarray
    styles: List[str] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({
            "headline_id": self.headline_ids,
            "popularity": self.popularity,
            "half_life": self.half_life,
            "popularity_better_than_average": self.popularity_probability,
            "half_life_better_than_average": self.half_life_probability,
        })
        if self.styles:
            frame.insert(1, "style", self.styles)
        return frame


def _bootstrap_predictions(values, memberships, replicate_probs, scale: float) -> np.ndarray:
    """Predictions for each (replicate, row): scale * sum_b sum_k p_rb z_hbk v_hk."""
    expected_z = np.einsum("rb,hbk->rhk", replicate_probs, memberships)
    return scale * np.einsum("rhk,hk->rh", expected_z, values)


def better_than_average_probability(
    popularity_model: PopularityModel,
    kernel_model: KernelModel,
    headlines_y,
    summary: SourceSummary,
    replicates: int = BOOTSTRAP_REPLICATES,
    seed: int = 0,
    headline_ids: Optional[Sequence[str]] = None,
    styles: Optional[Sequence[str]] = None,
    formula: str = "literal",
) -> HeadlineScores:
    """Probability that each headline beats the publisher's historical average.

    Each bootstrap replicate resamples the follower distribution and the
    historical item features. The replicate's average is the prediction
    at the mean of the resampled features under the same resampled
    follower distribution; a headline scores when its prediction exceeds
    it. Larger popularity and longer half-life count as better.
    """
    _require(popularity_model, PopularityModel, "Popularity")
    _require(kernel_model, KernelModel, "Half-life")
    history = summary.history_y
    if history.shape[0] == 0:
        raise DomainError("Better-than-average scoring needs a non-empty feature history")
    y = _feature_matrix(headlines_y, popularity_model.features.dim_y, "Headline feature matrix")
    if kernel_model.features.dim_y != y.shape[1] or history.shape[1] != y.shape[1]:
        raise ModelMismatchError("Headline, history and model feature dimensions disagree")
    support = _check_support(summary, popularity_model.features)
    _check_support(summary, kernel_model.features)

    rng = np.random.default_rng(seed)
    replicate_probs = summary.follower_dist.resampled_probs(rng, replicates)
    rows = rng.integers(0, history.shape[0], size=(replicates, history.shape[0]))
    replicate_means = history[rows].mean(axis=1)

    pg, kg = popularity_model.global_params, kernel_model.global_params
    scale = summary.mean_cascade_count

    def popularity_terms(features_y):
        values, _ = _popularity_class_values(popularity_model, features_y, False, PREDICTION_ALPHA_CLAMP)
        z = _memberships(pg.delta_z_alpha, pg.beta_z_alpha, pg.gamma_z_alpha, popularity_model.features,
                         support, features_y)
        return values, z

    def half_life_terms(features_y):
        values, _ = _half_life_class_values(kernel_model, features_y, formula, HALF_LIFE_EXPONENT_CAP)
        z = _memberships(kg.delta_z_theta, kg.beta_z_theta, kg.gamma_z_theta, kernel_model.features,
                         support, features_y)
        return values, z

    results = {}
    for name, terms, factor in (("popularity", popularity_terms, scale), ("half_life", half_life_terms, 1.0)):
        values, z = terms(y)
        headline = _bootstrap_predictions(values, z, replicate_probs, factor)
        avg_values, avg_z = terms(replicate_means)
        average = factor * np.einsum("rb,rbk,rk->r", replicate_probs, avg_z, avg_values)
        point = _bootstrap_predictions(values, z, summary.follower_dist.probs[None, :], factor)[0]
        results[name] = (point, np.mean(headline > average[:, None], axis=0))

    ids = list(headline_ids) if headline_ids is not None else [str(i) for i in range(y.shape[0])]
    return HeadlineScores(
        headline_ids=ids,
        popularity=results["popularity"][0],
        half_life=results["half_life"][0],
        popularity_probability=results["popularity"][1],
        half_life_probability=results["half_life"][1],
        styles=list(styles) if styles is not None else [],
    )


def summarize_by_style(scores: HeadlineScores) -> Dict[str, Dict[str, Any]]:
    """Quartiles of both better-than-average probabilities per style label."""
    if not scores.styles:
        raise DomainError("Headline scores carry no style labels")
    frame = scores.to_frame()
    summary = {}
    for style, group in frame.groupby("style", sort=True):
        summary[str(style)] = {
            "count": int(len(group)),
            "popularity": QuantileSummary.from_values(group["popularity_better_than_average"]).to_dict(),
            "half_life": QuantileSummary.from_values(group["half_life_better_than_average"]).to_dict(),
        }
    return summary
