"""Dual Mixture Model: EM-fitted Borel and kernel mixtures and their product."""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, gammaln, logit, logsumexp

from .artifacts import read_artifact, write_artifact
from .errors import DegenerateComponentError, DomainError, ModelMismatchError
from .hawkes_core import (
    Cascade,
    DelayIndex,
    HawkesParams,
    PowerLawKernel,
    borel_alpha_mle,
    kernel_half_life,
    kernel_log_likelihood_matrix,
    weighted_kernel_log_likelihood,
)

logger = logging.getLogger(__name__)

ALPHA_FLOOR = 1e-10
LOG_THETA_BOUNDS = (np.log(1e-3), np.log(1e3))
LOG_D_BOUNDS = (np.log(1e-6), np.log(1e9))
PREDICTION_ALPHA_CLAMP = 0.995


@dataclass(frozen=True)
class EmConfig:
    max_iterations: int = 500
    tolerance: float = 1e-7
    restarts: int = 5
    jitter: float = 0.3
    min_weight: float = 1e-6
    prune_degenerate: bool = True
    seed: int = 0
    monotonicity_slack: float = 1e-9

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be positive, got {self.max_iterations}")
        if self.tolerance <= 0:
            raise ValueError(f"tolerance must be positive, got {self.tolerance}")
        if self.restarts < 0:
            raise ValueError(f"restarts cannot be negative, got {self.restarts}")
        if not 0 < self.min_weight < 1:
            raise ValueError(f"min_weight must lie in (0, 1), got {self.min_weight}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EmConfig":
        return cls(**data)


@dataclass
class EmReport:
    """What happened during an EM fit (best restart)."""

    log_likelihood_trace: List[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    boundary: bool = False
    pruned_components: List[int] = field(default_factory=list)
    restart_log_likelihoods: List[float] = field(default_factory=list)
    monotone: bool = True

    @property
    def final_log_likelihood(self) -> float:
        return self.log_likelihood_trace[-1] if self.log_likelihood_trace else float("nan")

    def is_monotone(self, slack: float = 1e-9) -> bool:
        trace = np.asarray(self.log_likelihood_trace)
        return bool(np.all(np.diff(trace) >= -slack * np.maximum(1.0, np.abs(trace[:-1]))))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "final_log_likelihood": self.final_log_likelihood,
            "iterations": self.iterations,
            "converged": self.converged,
            "boundary": self.boundary,
            "pruned_components": list(self.pruned_components),
            "restart_log_likelihoods": list(self.restart_log_likelihoods),
            "monotone": self.monotone,
        }


def _normalized_weights(weights) -> np.ndarray:
    weights = np.asarray(weights, dtype=float).ravel()
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise DomainError(f"Mixture weights must be a probability vector, got {weights}")
    return weights / weights.sum()


@dataclass
class BorelMixture:
    """Weighted Borel components, kept in ascending-alpha order."""

    alphas: np.ndarray
    weights: np.ndarray
    report: Optional[EmReport] = None

    def __post_init__(self):
        alphas = np.asarray(self.alphas, dtype=float).ravel()
        weights = _normalized_weights(self.weights)
        if alphas.size != weights.size or alphas.size == 0:
            raise DomainError("BorelMixture needs one weight per component")
        if np.any(alphas <= 0) or np.any(alphas >= 1):
            raise DomainError(f"Component branching factors must lie in (0, 1), got {alphas}")
        order = np.argsort(alphas, kind="stable")
        self.alphas = alphas[order]
        self.weights = weights[order]

    @property
    def n_components(self) -> int:
        return int(self.alphas.size)

    def component_log_pmf(self, sizes) -> np.ndarray:
        return _borel_log_pmf_matrix(np.asarray(sizes, dtype=float), self.alphas)

    def log_likelihood(self, sizes) -> float:
        return float(logsumexp(self.component_log_pmf(sizes) + np.log(self.weights), axis=1).sum())

    def to_dict(self) -> Dict[str, Any]:
        data = {"alphas": self.alphas.tolist(), "weights": self.weights.tolist()}
        if self.report is not None:
            data["report"] = self.report.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BorelMixture":
        return cls(np.array(data["alphas"]), np.array(data["weights"]))


@dataclass
class KernelMixture:
    """Weighted power-law kernels, kept in ascending half-life order."""

    kernels: List[PowerLawKernel]
    weights: np.ndarray
    report: Optional[EmReport] = None

    def __post_init__(self):
        weights = _normalized_weights(self.weights)
        if len(self.kernels) != weights.size or weights.size == 0:
            raise DomainError("KernelMixture needs one weight per component")
        order = np.argsort([kernel_half_life(k) for k in self.kernels], kind="stable")
        self.kernels = [self.kernels[i] for i in order]
        self.weights = weights[order]

    @property
    def n_components(self) -> int:
        return len(self.kernels)

    @property
    def half_lives(self) -> np.ndarray:
        return np.array([kernel_half_life(k) for k in self.kernels])

    def log_likelihood(self, cascades: Union[Sequence[Cascade], DelayIndex]) -> float:
        index = cascades if isinstance(cascades, DelayIndex) else DelayIndex.from_cascades(cascades)
        matrix = kernel_log_likelihood_matrix(index, self.kernels)
        return float(logsumexp(matrix + np.log(self.weights), axis=1).sum())

    def to_dict(self) -> Dict[str, Any]:
        data = {"kernels": [k.to_dict() for k in self.kernels], "weights": self.weights.tolist()}
        if self.report is not None:
            data["report"] = self.report.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "KernelMixture":
        return cls([PowerLawKernel.from_dict(k) for k in data["kernels"]], np.array(data["weights"]))


@dataclass
class DmmModel:
    borel: BorelMixture
    kernel: KernelMixture

    @property
    def product_weights(self) -> np.ndarray:
        return np.outer(self.borel.weights, self.kernel.weights)

    def to_dict(self) -> Dict[str, Any]:
        return {"borel": self.borel.to_dict(), "kernel": self.kernel.to_dict()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DmmModel":
        return cls(BorelMixture.from_dict(data["borel"]), KernelMixture.from_dict(data["kernel"]))


def _borel_log_pmf_matrix(n: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    n = n[:, None]
    return (n - 1.0) * np.log(alphas * n) - alphas * n - gammaln(n + 1.0)


def _relative_change(new: float, old: float) -> float:
    return abs(new - old) / max(abs(old), 1.0)


def _check_monotone(report: EmReport, config: EmConfig, what: str) -> None:
    trace = report.log_likelihood_trace
    if len(trace) >= 2 and trace[-1] < trace[-2] - config.monotonicity_slack * max(1.0, abs(trace[-2])):
        report.monotone = False
        logger.warning("%s log-likelihood decreased at iteration %d: %.10g -> %.10g",
                       what, len(trace) - 1, trace[-2], trace[-1])


def _prune(weights: np.ndarray, config: EmConfig, iteration: int, report: EmReport) -> np.ndarray:
    """Indices of surviving components; raises or warns on collapsed ones."""
    collapsed = np.flatnonzero(weights < config.min_weight)
    if collapsed.size == 0:
        return np.arange(weights.size)
    if not config.prune_degenerate:
        k = int(collapsed[0])
        raise DegenerateComponentError(k, float(weights[k]), iteration)
    if collapsed.size == weights.size:
        collapsed = collapsed[np.argsort(weights[collapsed])][:-1]
    for k in collapsed:
        logger.warning("Pruning mixture component %d (weight %.3g) at iteration %d", k, weights[k], iteration)
    report.pruned_components.extend(int(k) for k in collapsed)
    return np.setdiff1d(np.arange(weights.size), collapsed)


# Borel mixture

def _borel_estep(n, counts, alphas, weights) -> Tuple[float, np.ndarray]:
    log_joint = _borel_log_pmf_matrix(n, alphas) + np.log(weights)
    log_norm = logsumexp(log_joint, axis=1)
    resp = np.exp(log_joint - log_norm[:, None]) * counts[:, None]
    return float(counts @ log_norm), resp


def _em_borel(n, counts, alphas, weights, config: EmConfig) -> Tuple[np.ndarray, np.ndarray, EmReport]:
    report = EmReport()
    ll, resp = _borel_estep(n, counts, alphas, weights)
    report.log_likelihood_trace.append(ll)
    for iteration in range(1, config.max_iterations + 1):
        mass = resp.sum(axis=0)
        weights = mass / counts.sum()
        keep = _prune(weights, config, iteration, report)
        resp, weights = resp[:, keep], weights[keep] / weights[keep].sum()
        alphas = (resp * (n - 1.0)[:, None]).sum(axis=0) / (resp * n[:, None]).sum(axis=0)
        if np.any(alphas < ALPHA_FLOOR):
            report.boundary = True
            alphas = np.maximum(alphas, ALPHA_FLOOR)
        new_ll, resp = _borel_estep(n, counts, alphas, weights)
        report.log_likelihood_trace.append(new_ll)
        report.iterations = iteration
        _check_monotone(report, config, "BMM")
        if _relative_change(new_ll, ll) < config.tolerance:
            report.converged = True
            break
        ll = new_ll
    return alphas, weights, report


def fit_bmm(sizes: Sequence[int], n_components: int, config: Optional[EmConfig] = None) -> BorelMixture:
    """EM fit of a K-component Borel mixture to cascade sizes."""
    config = config or EmConfig()
    sizes = np.asarray(sizes)
    if n_components < 1:
        raise DomainError(f"Number of components must be at least 1, got {n_components}")
    if sizes.size == 0 or np.any(sizes < 1):
        raise DomainError("fit_bmm needs a non-empty list of positive sizes")
    n, counts = np.unique(sizes.astype(int), return_counts=True)
    if n.size < n_components:
        raise DomainError(f"fit_bmm needs at least {n_components} distinct sizes, got {n.size}")
    n = n.astype(float)
    counts = counts.astype(float)

    naive = np.repeat((n - 1.0) / n, counts.astype(int))
    base = np.quantile(naive, (np.arange(n_components) + 0.5) / n_components)
    base = np.clip(base, 1e-3, 1.0 - 1e-3)
    rng = np.random.default_rng(config.seed)

    best = None
    restart_lls = []
    for restart in range(config.restarts + 1):
        init = base if restart == 0 else expit(logit(base) + config.jitter * rng.normal(size=n_components))
        weights = np.full(n_components, 1.0 / n_components)
        alphas, weights, report = _em_borel(n, counts, np.sort(init), weights, config)
        restart_lls.append(report.final_log_likelihood)
        if best is None or report.final_log_likelihood > best[2].final_log_likelihood:
            best = (alphas, weights, report)

    alphas, weights, report = best
    report.restart_log_likelihoods = restart_lls
    if report.boundary:
        logger.warning("BMM fit reached the alpha=0 boundary")
    if not report.converged:
        logger.warning("BMM did not converge within %d iterations", config.max_iterations)
    logger.info("BMM fit: K=%d log-likelihood %.6g after %d iterations",
                alphas.size, report.final_log_likelihood, report.iterations)
    return BorelMixture(alphas, weights, report)


# Kernel mixture

def _kernels_from_log(log_params: np.ndarray) -> List[PowerLawKernel]:
    return [PowerLawKernel(float(np.exp(lt)), float(np.exp(ld))) for lt, ld in log_params]


def _on_bounds(x: np.ndarray) -> bool:
    lo = np.array([LOG_THETA_BOUNDS[0], LOG_D_BOUNDS[0]])
    hi = np.array([LOG_THETA_BOUNDS[1], LOG_D_BOUNDS[1]])
    return bool(np.any(np.isclose(x, lo, atol=1e-6)) or np.any(np.isclose(x, hi, atol=1e-6)))


def maximize_weighted_kernel(
    index: DelayIndex, start: np.ndarray, cascade_weights: np.ndarray
) -> Tuple[np.ndarray, bool]:
    """Bounded L-BFGS-B in (log theta, log d); keeps ``start`` unless the value improves."""
    scale = max(float(index.n_events), 1.0)

    def negative(x):
        value, grad = weighted_kernel_log_likelihood(index, x[0], x[1], cascade_weights)
        return -value / scale, -grad / scale

    start = np.clip(start, [LOG_THETA_BOUNDS[0], LOG_D_BOUNDS[0]], [LOG_THETA_BOUNDS[1], LOG_D_BOUNDS[1]])
    current, _ = negative(start)
    result = minimize(
        negative,
        start,
        jac=True,
        method="L-BFGS-B",
        bounds=[LOG_THETA_BOUNDS, LOG_D_BOUNDS],
        options={"maxiter": 500, "ftol": 1e-15, "gtol": 1e-10},
    )
    if not np.isfinite(result.fun) or result.fun > current:
        return start, _on_bounds(start)
    return result.x, _on_bounds(result.x)


def _kernel_estep(index: DelayIndex, log_params, weights) -> Tuple[float, np.ndarray]:
    log_joint = kernel_log_likelihood_matrix(index, _kernels_from_log(log_params)) + np.log(weights)
    log_norm = logsumexp(log_joint, axis=1)
    return float(log_norm.sum()), np.exp(log_joint - log_norm[:, None])


def _em_kernel(index: DelayIndex, log_params, weights, config: EmConfig):
    report = EmReport()
    ll, resp = _kernel_estep(index, log_params, weights)
    report.log_likelihood_trace.append(ll)
    for iteration in range(1, config.max_iterations + 1):
        weights = resp.mean(axis=0)
        keep = _prune(weights, config, iteration, report)
        resp, weights, log_params = resp[:, keep], weights[keep] / weights[keep].sum(), log_params[keep]
        updated = np.empty_like(log_params)
        for k in range(log_params.shape[0]):
            updated[k], at_bound = maximize_weighted_kernel(index, log_params[k], resp[:, k])
            report.boundary = report.boundary or at_bound
        log_params = updated
        new_ll, resp = _kernel_estep(index, log_params, weights)
        report.log_likelihood_trace.append(new_ll)
        report.iterations = iteration
        _check_monotone(report, config, "KMM")
        if _relative_change(new_ll, ll) < config.tolerance:
            report.converged = True
            break
        ll = new_ll
    return log_params, weights, report


def _informative(cascades: Sequence[Cascade]) -> List[Cascade]:
    return [c for c in cascades if c.size >= 2]


def fit_kmm(cascades: Sequence[Cascade], n_components: int, config: Optional[EmConfig] = None) -> KernelMixture:
    """EM fit of a K-component power-law kernel mixture to interevent data."""
    config = config or EmConfig()
    if n_components < 1:
        raise DomainError(f"Number of components must be at least 1, got {n_components}")
    informative = _informative(cascades)
    if not informative:
        raise DomainError("fit_kmm needs cascades with at least two events")
    if len(informative) < n_components:
        raise DomainError(f"fit_kmm needs at least {n_components} cascades of size >= 2, got {len(informative)}")

    index = DelayIndex.from_cascades(informative)
    medians = np.array([np.median(c.interevent_times()) for c in informative])
    medians = np.maximum(medians, np.exp(LOG_D_BOUNDS[0]) * 10)
    base_d = np.quantile(medians, (np.arange(n_components) + 0.5) / n_components)
    base = np.column_stack([np.zeros(n_components), np.log(base_d)])
    rng = np.random.default_rng(config.seed)

    best = None
    restart_lls = []
    for restart in range(config.restarts + 1):
        init = base if restart == 0 else base + config.jitter * rng.normal(size=base.shape)
        weights = np.full(n_components, 1.0 / n_components)
        log_params, weights, report = _em_kernel(index, init, weights, config)
        restart_lls.append(report.final_log_likelihood)
        if best is None or report.final_log_likelihood > best[2].final_log_likelihood:
            best = (log_params, weights, report)

    log_params, weights, report = best
    report.restart_log_likelihoods = restart_lls
    if report.boundary:
        logger.warning("KMM fit has a component on the parameter bounds")
    if not report.converged:
        logger.warning("KMM did not converge within %d iterations", config.max_iterations)
    logger.info("KMM fit: K=%d log-likelihood %.6g after %d iterations",
                weights.size, report.final_log_likelihood, report.iterations)
    return KernelMixture(_kernels_from_log(log_params), weights, report)


def dmm_product(borel: BorelMixture, kernel: KernelMixture) -> DmmModel:
    return DmmModel(borel, kernel)


def fit_dmm(
    cascades: Sequence[Cascade], k_alpha: int, k_theta: int, config: Optional[EmConfig] = None
) -> DmmModel:
    """Fit both halves on the same cascades and combine them."""
    borel = fit_bmm([c.size for c in cascades], k_alpha, config)
    kernel = fit_kmm(cascades, k_theta, config)
    return dmm_product(borel, kernel)


def fit_joint_hawkes(cascades: Sequence[Cascade]) -> HawkesParams:
    """Single separable Hawkes MLE over all cascades (the joint-HP benchmark)."""
    informative = _informative(cascades)
    if not informative:
        raise DomainError("fit_joint_hawkes needs cascades with at least two events")
    alpha = max(borel_alpha_mle([c.size for c in cascades]), ALPHA_FLOOR)
    index = DelayIndex.from_cascades(informative)
    start = np.array([0.0, np.log(max(np.median(np.concatenate([c.interevent_times() for c in informative])), 1e-5))])
    x, at_bound = maximize_weighted_kernel(index, start, np.ones(len(informative)))
    if at_bound:
        logger.warning("Joint Hawkes kernel fit is on the parameter bounds")
    return HawkesParams(alpha, PowerLawKernel(float(np.exp(x[0])), float(np.exp(x[1]))))


def dmm_holdout_nll(model: Union[DmmModel, KernelMixture], cascades: Sequence[Cascade]) -> float:
    """Per-event negative log-likelihood of held-out interevent data under the kernel mixture."""
    kernel = model.kernel if isinstance(model, DmmModel) else model
    index = DelayIndex.from_cascades(_informative(cascades))
    if index.n_events == 0:
        raise DomainError("Held-out cascades contain no non-seed events")
    return -kernel.log_likelihood(index) / index.n_events


def dmm_predict_popularity(
    model: Union[DmmModel, BorelMixture], mean_cascade_count: float, clamp: float = PREDICTION_ALPHA_CLAMP
) -> float:
    """Cold-start item popularity C * sum_k p_k / (1 - alpha_k)."""
    if mean_cascade_count <= 0:
        raise DomainError(f"Mean cascade count must be positive, got {mean_cascade_count}")
    borel = model.borel if isinstance(model, DmmModel) else model
    alphas = np.minimum(borel.alphas, clamp)
    return float(mean_cascade_count * np.sum(borel.weights / (1.0 - alphas)))


def save_dmm(model: DmmModel, path: Union[str, Path], run_config: Optional[Dict[str, Any]] = None) -> Path:
    return write_artifact(path, "dmm", model.to_dict(), run_config)


def load_dmm(path: Union[str, Path]) -> DmmModel:
    document = read_artifact(path, kind="dmm")
    try:
        return DmmModel.from_dict(document["payload"])
    except KeyError as exc:
        raise ModelMismatchError(f"DMM artifact {path} is missing field {exc}") from exc
