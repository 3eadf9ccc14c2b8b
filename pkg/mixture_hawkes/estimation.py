"""MAP estimation of BMH models.

The optimiser is a limited-memory BFGS with Armijo backtracking. Trial
points whose objective is not finite are treated as failed steps, so the
step shrinks until it lands somewhere finite.
"""

import logging
import time
import warnings
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Deque, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.special import expit, logit

from .bmh_model import (
    BmhKGlobals,
    BmhKItemParams,
    BmhPGlobals,
    BmhPItemParams,
    BmhProblem,
    CascadeArrays,
    KernelModel,
    KernelProblem,
    PopularityModel,
    PopularityProblem,
    PriorConfig,
    ProblemBuilder,
    Submodel,
    Variant,
)
from .errors import ConvergenceWarning, ModelMismatchError, NonFiniteObjectiveError
from .hawkes_core import PowerLawKernel
from .mixture_dmm import BorelMixture, DmmModel, EmConfig, KernelMixture, fit_bmm, fit_kmm

logger = logging.getLogger(__name__)

ValueAndGrad = Callable[[np.ndarray], Tuple[float, np.ndarray]]

INITIAL_SCALE = 0.5
ARMIJO_C1 = 1e-4
MAX_BACKTRACKS = 60
# Spacing, in logit(alpha) or log(d), between a re-seeded class and its source component.
RESEED_STEP = 0.5


@dataclass(frozen=True)
class FitConfig:
    max_iterations: int = 2000
    gradient_tolerance: float = 1e-5
    relative_objective_tolerance: float = 1e-9
    stall_iterations: int = 5
    restarts: int = 0
    seed: int = 0
    history_size: int = 10
    init_jitter: float = 0.1

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be positive, got {self.max_iterations}")
        if self.gradient_tolerance <= 0 or self.relative_objective_tolerance <= 0:
            raise ValueError("Tolerances must be positive")
        if self.restarts < 0:
            raise ValueError(f"restarts cannot be negative, got {self.restarts}")
        if self.history_size < 1 or self.stall_iterations < 1:
            raise ValueError("history_size and stall_iterations must be positive")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FitConfig":
        return cls(**data)


@dataclass
class FitReport:
    final_objective: float
    gradient_norm: float
    iterations: int
    converged: bool
    restart_objectives: List[float] = field(default_factory=list)
    wall_time: float = 0.0
    trace: List[float] = field(default_factory=list)
    message: str = ""

    def to_dict(self, include_wall_time: bool = False) -> Dict[str, Any]:
        """Serializable summary; wall time is left out unless asked for."""
        data = {
            "final_objective": self.final_objective,
            "gradient_norm": self.gradient_norm,
            "iterations": self.iterations,
            "converged": self.converged,
            "restart_objectives": list(self.restart_objectives),
            "message": self.message,
        }
        if include_wall_time:
            data["wall_time"] = self.wall_time
        return data


def _value_and_grad_of(objective: Union[BmhProblem, ValueAndGrad]) -> ValueAndGrad:
    return objective.value_and_grad if hasattr(objective, "value_and_grad") else objective


def _two_loop(grad: np.ndarray, s_hist: Deque[np.ndarray], y_hist: Deque[np.ndarray]) -> np.ndarray:
    q = grad.copy()
    rhos = [1.0 / (y @ s) for s, y in zip(s_hist, y_hist)]
    alphas = []
    for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rhos)):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= (s @ y) / (y @ y)
    for s, y, rho, a in zip(s_hist, y_hist, rhos, reversed(alphas)):
        b = rho * (y @ q)
        q += s * (a - b)
    return q


def _armijo(
    minus: ValueAndGrad, x: np.ndarray, value: float, grad: np.ndarray, direction: np.ndarray, step: float
) -> Optional[Tuple[np.ndarray, float, np.ndarray]]:
    """Backtrack until sufficient decrease; None when no acceptable step exists.

    Raises when every trial point was non-finite.
    """
    slope = grad @ direction
    saw_finite = False
    for _ in range(MAX_BACKTRACKS):
        trial = x + step * direction
        trial_value, trial_grad = minus(trial)
        if np.isfinite(trial_value) and np.all(np.isfinite(trial_grad)):
            saw_finite = True
            if trial_value <= value + ARMIJO_C1 * step * slope:
                return trial, trial_value, trial_grad
        step *= 0.5
    if not saw_finite:
        raise NonFiniteObjectiveError(
            f"Objective stayed non-finite along the search direction after {MAX_BACKTRACKS} step reductions"
        )
    return None


def _lbfgs(value_and_grad: ValueAndGrad, x0: np.ndarray, config: FitConfig) -> Tuple[np.ndarray, FitReport]:
    def minus(x):
        value, grad = value_and_grad(x)
        return -float(value), -np.asarray(grad, dtype=float)

    x = np.asarray(x0, dtype=float).copy()
    value, grad = minus(x)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NonFiniteObjectiveError("Objective or gradient is not finite at the initial point")

    s_hist: Deque[np.ndarray] = deque(maxlen=config.history_size)
    y_hist: Deque[np.ndarray] = deque(maxlen=config.history_size)
    trace = [-value]
    stalled = 0
    converged = False
    message = "maximum iterations reached"
    iteration = 0

    while iteration < config.max_iterations:
        if np.max(np.abs(grad), initial=0.0) <= config.gradient_tolerance:
            converged, message = True, "gradient tolerance met"
            break
        iteration += 1
        direction = -_two_loop(grad, s_hist, y_hist)
        if grad @ direction >= 0:
            s_hist.clear()
            y_hist.clear()
            direction = -grad
        step = 1.0 if s_hist else min(1.0, 1.0 / np.max(np.abs(grad)))
        accepted = _armijo(minus, x, value, grad, direction, step)
        if accepted is None and s_hist:
            s_hist.clear()
            y_hist.clear()
            direction = -grad
            accepted = _armijo(minus, x, value, grad, direction, min(1.0, 1.0 / np.max(np.abs(grad))))
        if accepted is None:
            message = "line search failed"
            break
        new_x, new_value, new_grad = accepted
        s, y = new_x - x, new_grad - grad
        if s @ y > 1e-12 * np.sqrt((s @ s) * (y @ y)):
            s_hist.append(s)
            y_hist.append(y)
        change = abs(new_value - value) / max(abs(value), 1.0)
        stalled = stalled + 1 if change <= config.relative_objective_tolerance else 0
        x, value, grad = new_x, new_value, new_grad
        trace.append(-value)
        logger.debug("iteration %d objective %.10g gradient %.3g", iteration, -value, np.max(np.abs(grad)))
        if stalled >= config.stall_iterations:
            converged, message = True, "objective change below tolerance"
            break

    report = FitReport(
        final_objective=-value,
        gradient_norm=float(np.max(np.abs(grad), initial=0.0)),
        iterations=iteration,
        converged=converged,
        trace=trace,
        message=message,
    )
    return x, report


def fit_map(
    objective: Union[BmhProblem, ValueAndGrad], init: np.ndarray, config: Optional[FitConfig] = None
) -> Tuple[np.ndarray, FitReport]:
    """Maximise ``objective`` from ``init`` (plus jittered restarts); best run wins.

    ``objective`` is a problem with ``value_and_grad`` or a callable
    returning ``(value, gradient)``.
    """
    config = config or FitConfig()
    value_and_grad = _value_and_grad_of(objective)
    rng = np.random.default_rng(config.seed)
    init = np.asarray(init, dtype=float)
    started = time.perf_counter()

    best: Optional[Tuple[np.ndarray, FitReport]] = None
    objectives = []
    for restart in range(config.restarts + 1):
        start = init if restart == 0 else init + config.init_jitter * rng.normal(size=init.shape)
        x, report = _lbfgs(value_and_grad, start, config)
        objectives.append(report.final_objective)
        logger.info("restart %d: objective %.8g after %d iterations (%s)",
                    restart, report.final_objective, report.iterations, report.message)
        if best is None or report.final_objective > best[1].final_objective:
            best = (x, report)

    x, report = best
    report.restart_objectives = objectives
    report.wall_time = time.perf_counter() - started
    if not report.converged:
        warnings.warn(f"MAP fit did not converge: {report.message}", ConvergenceWarning, stacklevel=2)
        logger.warning("MAP fit did not converge: %s (gradient %.3g)", report.message, report.gradient_norm)
    return x, report


def check_gradients(
    objective: Union[BmhProblem, ValueAndGrad],
    point: np.ndarray,
    step: float = 1e-5,
    max_coordinates: int = 1000,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    Above ``max_coordinates`` dimensions a random subset is checked. The
    relative error uses max(|analytic|, |numeric|, floor) as denominator.
    """
    if step <= 0:
        raise ValueError(f"Finite-difference step must be positive, got {step}")
    if floor <= 0:
        raise ValueError(f"Relative-error floor must be positive, got {floor}")
    value_and_grad = _value_and_grad_of(objective)
    point = np.asarray(point, dtype=float)
    _, analytic = value_and_grad(point)
    analytic = np.asarray(analytic, dtype=float)
    coordinates = np.arange(point.size)
    if point.size > max_coordinates:
        coordinates = np.sort(np.random.default_rng(seed).choice(point.size, max_coordinates, replace=False))
    worst = 0.0
    for i in coordinates:
        offset = np.zeros_like(point)
        offset[i] = step
        upper, _ = value_and_grad(point + offset)
        lower, _ = value_and_grad(point - offset)
        numeric = (upper - lower) / (2.0 * step)
        error = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), floor)
        worst = max(worst, float(error))
    return worst


def _gate_intercepts(weights: np.ndarray) -> np.ndarray:
    weights = np.maximum(np.asarray(weights, dtype=float), 1e-12)
    return np.log(weights[1:] / weights[0])


def _reseed_pruned(mixture: Union[BorelMixture, KernelMixture], n_classes: int):
    """Refill classes lost to pruning with shifted copies of the heaviest component.

    The heaviest weight is shared equally between the component and its
    copies; each copy sits a further RESEED_STEP above it, so the
    canonical order stays strict.
    """
    missing = n_classes - mixture.n_components
    heaviest = int(np.argmax(mixture.weights))
    share = mixture.weights[heaviest] / (missing + 1)
    weights = np.append(mixture.weights, np.full(missing, share))
    weights[heaviest] = share
    offsets = RESEED_STEP * np.arange(1, missing + 1)
    logger.warning(
        "DMM pre-fit has %d of %d classes; re-seeding %d from component %d",
        mixture.n_components, n_classes, missing, heaviest,
    )
    if isinstance(mixture, BorelMixture):
        centre = logit(np.clip(mixture.alphas[heaviest], 1e-6, 1.0 - 1e-6))
        return BorelMixture(np.append(mixture.alphas, expit(centre + offsets)), weights)
    source = mixture.kernels[heaviest]
    copies = [PowerLawKernel(source.theta, source.d * np.exp(offset)) for offset in offsets]
    return KernelMixture(list(mixture.kernels) + copies, weights)


def _popularity_start(borel: BorelMixture, problem: PopularityProblem) -> np.ndarray:
    k, nx, ny, p = problem.n_classes, problem.data.dim_x, problem.data.dim_y, problem.n_item_params
    global_params = BmhPGlobals(
        delta_alpha=logit(np.clip(borel.alphas, 1e-6, 1.0 - 1e-6)),
        delta_z_alpha=_gate_intercepts(borel.weights),
        beta_z_alpha=np.zeros((k - 1, nx)),
        gamma_alpha=np.zeros((k, ny)),
        gamma_z_alpha=np.zeros((k - 1, ny)),
        sigma_p_alpha=np.full(p, INITIAL_SCALE),
        omega_alpha=np.eye(p),
    )
    items = BmhPItemParams(problem.data.item_ids, np.tile(global_params.p_alpha_mean, (problem.data.n_items, 1)))
    return problem.unconstrain(global_params, items)


def _kernel_start(kernel: KernelMixture, problem: KernelProblem) -> np.ndarray:
    k, nx, ny, q = problem.n_classes, problem.data.dim_x, problem.data.dim_y, problem.n_gate_params
    global_params = BmhKGlobals(
        delta_theta=np.log([c.theta for c in kernel.kernels]),
        delta_d=np.log([c.d for c in kernel.kernels]),
        sigma_theta_d=np.full((k, 2), INITIAL_SCALE),
        omega_theta_d=np.tile(np.eye(2), (k, 1, 1)),
        gamma_theta=np.zeros((k, ny)),
        delta_z_theta=_gate_intercepts(kernel.weights),
        beta_z_theta=np.zeros((k - 1, nx)),
        gamma_z_theta=np.zeros((k - 1, ny)),
        sigma_z_theta=np.full(q, INITIAL_SCALE),
        omega_z_theta=np.eye(q),
    )
    a = problem.data.n_items
    items = BmhKItemParams(
        problem.data.item_ids,
        np.tile(global_params.p_theta_mean, (a, 1, 1)),
        np.tile(global_params.p_z_mean, (a, 1)),
    )
    return problem.unconstrain(global_params, items)


def initialize_from_dmm(dmm: Union[DmmModel, BorelMixture, KernelMixture], problem: BmhProblem) -> np.ndarray:
    """Starting point from a DMM pre-fit: centres and gate intercepts from the
    mixture components, zero feature effects, every item at the source mean."""
    if problem.submodel is Submodel.POPULARITY:
        mixture = dmm.borel if isinstance(dmm, DmmModel) else dmm
        if not isinstance(mixture, BorelMixture):
            raise ModelMismatchError("The popularity submodel is initialised from a Borel mixture")
    else:
        mixture = dmm.kernel if isinstance(dmm, DmmModel) else dmm
        if not isinstance(mixture, KernelMixture):
            raise ModelMismatchError("The kernel submodel is initialised from a kernel mixture")
    if mixture.n_components > problem.n_classes:
        raise ModelMismatchError(
            f"DMM has {mixture.n_components} {problem.submodel.value} components but the model has "
            f"{problem.n_classes} classes"
        )
    if mixture.n_components < problem.n_classes:
        mixture = _reseed_pruned(mixture, problem.n_classes)
    if problem.submodel is Submodel.POPULARITY:
        return _popularity_start(mixture, problem)
    return _kernel_start(mixture, problem)


def _as_arrays(data) -> CascadeArrays:
    return data if isinstance(data, CascadeArrays) else CascadeArrays.from_corpus(data)


def _fit(
    submodel: Submodel,
    data,
    n_classes: int,
    variant: Union[Variant, str],
    priors: Optional[PriorConfig],
    fit_config: Optional[FitConfig],
    em_config: Optional[EmConfig],
    dmm,
    init: Optional[np.ndarray],
):
    arrays = _as_arrays(data)
    builder = ProblemBuilder(arrays).with_submodel(submodel).with_classes(n_classes).with_variant(variant)
    if priors is not None:
        builder = builder.with_priors(priors)
    problem = builder.build()
    if init is None:
        if dmm is None:
            if submodel is Submodel.POPULARITY:
                dmm = fit_bmm(arrays.sizes.astype(int), n_classes, em_config)
            else:
                dmm = fit_kmm(_cascades_of(data), n_classes, em_config)
        init = initialize_from_dmm(dmm, problem)
    logger.info("Fitting %s model (%s), %d parameters", submodel.value, problem.variant.value, problem.dimension)
    vector, report = fit_map(problem, init, fit_config)
    global_params, item_params = problem.constrain(vector)
    model_cls = PopularityModel if submodel is Submodel.POPULARITY else KernelModel
    model = model_cls(global_params, item_params, problem.features, problem.priors, fit_report=report.to_dict())
    return model, report, vector


def _cascades_of(data) -> list:
    if isinstance(data, CascadeArrays):
        raise ModelMismatchError("Kernel fits without a DMM pre-fit need the corpus, not bare arrays")
    return [c for item in data.items for c in item.cascades]


def fit_popularity_model(
    data,
    k_alpha: int = 2,
    variant: Union[Variant, str] = Variant.FULL,
    priors: Optional[PriorConfig] = None,
    fit_config: Optional[FitConfig] = None,
    em_config: Optional[EmConfig] = None,
    dmm: Optional[Union[DmmModel, BorelMixture]] = None,
    init: Optional[np.ndarray] = None,
) -> Tuple[PopularityModel, FitReport, np.ndarray]:
    """DMM pre-fit (unless given), initialisation and MAP fit of BMH-P."""
    return _fit(Submodel.POPULARITY, data, k_alpha, variant, priors, fit_config, em_config, dmm, init)


def fit_kernel_model(
    data,
    k_theta: int = 3,
    variant: Union[Variant, str] = Variant.FULL,
    priors: Optional[PriorConfig] = None,
    fit_config: Optional[FitConfig] = None,
    em_config: Optional[EmConfig] = None,
    dmm: Optional[Union[DmmModel, KernelMixture]] = None,
    init: Optional[np.ndarray] = None,
) -> Tuple[KernelModel, FitReport, np.ndarray]:
    """DMM pre-fit (unless given), initialisation and MAP fit of BMH-K."""
    return _fit(Submodel.KERNEL, data, k_theta, variant, priors, fit_config, em_config, dmm, init)
