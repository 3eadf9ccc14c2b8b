"""Separable power-law Hawkes processes.

Kernel maths, the Borel size law, both halves of the separable
log-likelihood and a branching-process simulator. Everything here is a
pure function of its inputs; randomness only enters through an explicitly
seeded generator.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import gammaln

from .errors import DomainError

logger = logging.getLogger(__name__)

DEFAULT_MAX_SIZE = 100_000
LN2 = float(np.log(2.0))

Seed = Union[int, np.random.Generator, np.random.SeedSequence, None]


@dataclass(frozen=True)
class PowerLawKernel:
    """g(t | theta, d) = theta * d**theta * (t + d)**-(1 + theta)."""

    theta: float
    d: float

    def __post_init__(self):
        theta = float(self.theta)
        d = float(self.d)
        if not (np.isfinite(theta) and theta > 0):
            raise DomainError(f"Kernel exponent theta must be positive, got {self.theta}")
        if not (np.isfinite(d) and d > 0):
            raise DomainError(f"Kernel offset d must be positive, got {self.d}")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "d", d)

    def __str__(self) -> str:
        return f"PowerLaw(theta={self.theta:.4g}, d={self.d:.4g})"

    def to_dict(self) -> Dict[str, float]:
        return {"theta": self.theta, "d": self.d}

    @classmethod
    def from_dict(cls, data: Dict[str, float]) -> "PowerLawKernel":
        return cls(theta=data["theta"], d=data["d"])


@dataclass
class Cascade:
    """One cascade: seed at t=0 followed by its descendants in time order.

    ``features_x`` holds the cascade-level feature vector (empty until the
    corpus is standardized), ``followers`` the raw seed follower count when
    known. Simulated cascades also carry ``parents`` (index of each event's
    parent, -1 for the seed) and a ``truncated`` flag.
    """

    event_times: np.ndarray
    features_x: np.ndarray = field(default_factory=lambda: np.zeros(0))
    followers: Optional[int] = None
    truncated: bool = False
    parents: Optional[np.ndarray] = None

    def __post_init__(self):
        times = np.asarray(self.event_times, dtype=float).ravel()
        if times.size == 0:
            raise DomainError("A cascade needs at least its seed event")
        if not np.all(np.isfinite(times)):
            raise DomainError("Cascade event times must be finite")
        if times[0] != 0.0:
            raise DomainError(f"Cascade times must start at the seed time 0, got {times[0]}")
        if np.any(np.diff(times) < 0):
            position = int(np.argmax(np.diff(times) < 0)) + 1
            raise DomainError(f"Cascade event times are not sorted (event {position})")
        self.event_times = times
        self.features_x = np.asarray(self.features_x, dtype=float).ravel()
        if self.parents is not None:
            self.parents = np.asarray(self.parents, dtype=int)

    @property
    def size(self) -> int:
        return int(self.event_times.size)

    def interevent_times(self) -> np.ndarray:
        return np.diff(self.event_times)


@dataclass(frozen=True)
class HawkesParams:
    """Branching factor, kernel and (always zero) background rate."""

    alpha: float
    kernel: PowerLawKernel
    mu: float = 0.0

    def __post_init__(self):
        check_alpha(self.alpha)
        if self.mu != 0.0:
            raise DomainError(f"Only mu == 0 is supported, got {self.mu}")
        object.__setattr__(self, "alpha", float(self.alpha))

    def expected_size(self) -> float:
        return 1.0 / (1.0 - self.alpha)


def check_alpha(alpha: float) -> None:
    if not (np.isfinite(alpha) and 0.0 < alpha < 1.0):
        raise DomainError(f"Branching factor must lie in (0, 1), got {alpha}")


def _as_sizes(sizes) -> np.ndarray:
    sizes = np.asarray(sizes)
    if sizes.size == 0:
        raise DomainError("At least one cascade size is required")
    if np.any(sizes < 1) or np.any(sizes != np.floor(sizes)):
        raise DomainError("Cascade sizes must be positive integers")
    return sizes.astype(float)


# Borel law

def borel_log_pmf(n, alpha: float):
    """log B(n | alpha) = (n-1) log(alpha n) - alpha n - log n!  (vectorised)."""
    check_alpha(alpha)
    n = _as_sizes(n) if np.ndim(n) else _as_sizes([n])[0]
    return (n - 1.0) * np.log(alpha * n) - alpha * n - gammaln(n + 1.0)


def borel_pmf(n: int, alpha: float) -> float:
    """Borel probability e^{-alpha n} (alpha n)^{n-1} / n!, evaluated in log space."""
    if n < 1 or int(n) != n:
        raise DomainError(f"Borel support starts at 1, got {n}")
    return float(np.exp(borel_log_pmf(int(n), alpha)))


def borel_log_likelihood(sizes: Sequence[int], alpha: float) -> float:
    """Popularity half of the separable likelihood: sum (N-1) log alpha - N alpha."""
    check_alpha(alpha)
    n = _as_sizes(sizes)
    return float(np.sum((n - 1.0) * np.log(alpha) - n * alpha))


def borel_alpha_mle(sizes: Sequence[int]) -> float:
    """Closed-form maximiser sum(N-1)/sum(N); 0 when every cascade is a singleton."""
    n = _as_sizes(sizes)
    return float(np.sum(n - 1.0) / np.sum(n))


# Power-law kernel

def kernel_value(t, kernel: PowerLawKernel):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise DomainError("Kernel is only defined for t >= 0")
    value = kernel.theta * np.exp(kernel.theta * np.log(kernel.d) - (1.0 + kernel.theta) * np.log(t + kernel.d))
    return float(value) if value.ndim == 0 else value


def kernel_cdf(t, kernel: PowerLawKernel):
    """Integral of g over [0, t]: 1 - (d / (t + d))**theta."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise DomainError("Kernel CDF is only defined for t >= 0")
    value = -np.expm1(kernel.theta * (np.log(kernel.d) - np.log(t + kernel.d)))
    return float(value) if value.ndim == 0 else value


def kernel_half_life(kernel: PowerLawKernel) -> float:
    """Time by which half of the kernel mass has elapsed: d (2**(1/theta) - 1)."""
    return float(kernel.d * np.expm1(LN2 / kernel.theta))


def sample_offspring_delay(kernel: PowerLawKernel, u):
    """Inverse kernel CDF: d ((1 - u)**(-1/theta) - 1) for u in (0, 1)."""
    u = np.asarray(u, dtype=float)
    if np.any(u <= 0) or np.any(u >= 1):
        raise DomainError("Uniform draws must lie in the open interval (0, 1)")
    value = kernel.d * np.expm1(-np.log1p(-u) / kernel.theta)
    return float(value) if value.ndim == 0 else value


# Pairwise interevent structure

@dataclass(frozen=True)
class DelayIndex:
    """All forward differences t_j - t_z (z < j) of a set of cascades.

    Pairs are stored event by event, so the pairs of one receiving event
    form a contiguous block starting at ``event_starts[e]``. Only non-seed
    events appear; cascades of size one own no events.
    """

    delays: np.ndarray
    pair_event: np.ndarray
    event_starts: np.ndarray
    event_cascade: np.ndarray
    n_cascades: int

    @property
    def n_events(self) -> int:
        return int(self.event_cascade.size)

    @property
    def n_pairs(self) -> int:
        return int(self.delays.size)

    def events_per_cascade(self) -> np.ndarray:
        return np.bincount(self.event_cascade, minlength=self.n_cascades)

    @classmethod
    def from_cascades(cls, cascades: Sequence[Cascade]) -> "DelayIndex":
        delays: List[np.ndarray] = []
        event_cascade: List[np.ndarray] = []
        pairs_per_event: List[np.ndarray] = []
        for c, cascade in enumerate(cascades):
            n = cascade.size
            if n < 2:
                continue
            rows, cols = np.tril_indices(n, -1)
            delays.append(cascade.event_times[rows] - cascade.event_times[cols])
            event_cascade.append(np.full(n - 1, c, dtype=int))
            pairs_per_event.append(np.arange(1, n, dtype=int))
        if not delays:
            empty = np.zeros(0, dtype=int)
            return cls(np.zeros(0), empty, empty, empty, len(cascades))
        counts = np.concatenate(pairs_per_event)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(int)
        pair_event = np.repeat(np.arange(counts.size), counts)
        return cls(
            delays=np.concatenate(delays),
            pair_event=pair_event,
            event_starts=starts,
            event_cascade=np.concatenate(event_cascade),
            n_cascades=len(cascades),
        )


def _segment_logsumexp(values: np.ndarray, index: DelayIndex) -> np.ndarray:
    """log sum exp of ``values`` over each event's block of pairs (axis 0)."""
    if index.n_events == 0:
        return np.zeros((0,) + values.shape[1:])
    peak = np.maximum.reduceat(values, index.event_starts, axis=0)
    shifted = np.exp(values - peak[index.pair_event])
    return peak + np.log(np.add.reduceat(shifted, index.event_starts, axis=0))


def _log_kernel_pairs(delays: np.ndarray, theta: np.ndarray, d: np.ndarray) -> np.ndarray:
    return np.log(theta) + theta * np.log(d) - (1.0 + theta) * np.log(delays[:, None] + d)


def kernel_log_likelihood_matrix(index: DelayIndex, kernels: Sequence[PowerLawKernel]) -> np.ndarray:
    """Per-cascade kernel log-likelihood under each kernel, shape (cascades, K)."""
    theta = np.array([k.theta for k in kernels])
    d = np.array([k.d for k in kernels])
    out = np.zeros((index.n_cascades, len(kernels)))
    if index.n_events == 0:
        return out
    per_event = _segment_logsumexp(_log_kernel_pairs(index.delays, theta, d), index)
    np.add.at(out, index.event_cascade, per_event)
    return out


def weighted_kernel_log_likelihood(
    index: DelayIndex, log_theta: float, log_d: float, cascade_weights: np.ndarray
) -> Tuple[float, np.ndarray]:
    """Responsibility-weighted kernel log-likelihood and its gradient in (log theta, log d)."""
    theta = np.exp(log_theta)
    d = np.exp(log_d)
    if index.n_events == 0:
        return 0.0, np.zeros(2)
    log_shift = np.log(index.delays + d)
    log_g = log_theta + theta * log_d - (1.0 + theta) * log_shift
    per_event = _segment_logsumexp(log_g[:, None], index)[:, 0]
    share = np.exp(log_g - per_event[index.pair_event])
    d_log_theta = 1.0 + theta * (log_d - log_shift)
    d_log_d = theta - (1.0 + theta) * d / (index.delays + d)
    grad_theta = np.add.reduceat(share * d_log_theta, index.event_starts)
    grad_d = np.add.reduceat(share * d_log_d, index.event_starts)
    w = np.asarray(cascade_weights, dtype=float)[index.event_cascade]
    value = float(np.dot(w, per_event))
    return value, np.array([np.dot(w, grad_theta), np.dot(w, grad_d)])


def kernel_log_likelihood(cascades: Union[Sequence[Cascade], DelayIndex], kernel: PowerLawKernel) -> float:
    """Kernel half of the separable likelihood: sum_j log sum_{z<j} g(t_j - t_z)."""
    index = cascades if isinstance(cascades, DelayIndex) else DelayIndex.from_cascades(cascades)
    return float(kernel_log_likelihood_matrix(index, [kernel]).sum())


def hawkes_log_likelihood(cascades: Sequence[Cascade], params: HawkesParams) -> float:
    """Complete-data log-likelihood of mu=0 cascades, computed from the intensity.

    sum over non-seed events of log(alpha * sum_{z<j} g) minus the
    compensator alpha * N per cascade (each event's kernel integrates to 1).
    """
    index = DelayIndex.from_cascades(cascades)
    total_events = float(sum(c.size for c in cascades))
    log_g = _log_kernel_pairs(index.delays, np.array([params.kernel.theta]), np.array([params.kernel.d]))
    log_intensity = np.log(params.alpha) + _segment_logsumexp(log_g, index)[:, 0]
    return float(np.sum(log_intensity) - params.alpha * total_events)


# Simulation

def simulate_cascade(params: HawkesParams, rng_seed: Seed = None, max_size: int = DEFAULT_MAX_SIZE) -> Cascade:
    """Grow a cascade generation by generation from a seed at t=0.

    Each event spawns Poisson(alpha) children whose delays follow the
    kernel. Growth stops at ``max_size`` events and the result is flagged
    as truncated.
    """
    if max_size < 1:
        raise DomainError(f"max_size must be at least 1, got {max_size}")
    rng = np.random.default_rng(rng_seed)
    times = [np.zeros(1)]
    parents = [np.full(1, -1)]
    total = 1
    frontier = np.zeros(1, dtype=int)
    frontier_times = np.zeros(1)
    truncated = False
    tiny = np.nextafter(0.0, 1.0)

    while frontier.size and not truncated:
        counts = rng.poisson(params.alpha, size=frontier.size)
        n_children = int(counts.sum())
        if n_children == 0:
            break
        if total + n_children > max_size:
            n_children = max_size - total
            truncated = True
        child_parent = np.repeat(frontier, counts)[:n_children]
        parent_times = np.repeat(frontier_times, counts)[:n_children]
        delays = sample_offspring_delay(params.kernel, rng.uniform(tiny, 1.0, size=n_children))
        child_times = parent_times + np.atleast_1d(delays)
        times.append(child_times)
        parents.append(child_parent)
        frontier = np.arange(total, total + n_children)
        frontier_times = child_times
        total += n_children

    all_times = np.concatenate(times)
    all_parents = np.concatenate(parents)
    order = np.argsort(all_times, kind="stable")
    position = np.empty_like(order)
    position[order] = np.arange(order.size)
    sorted_parents = all_parents[order]
    sorted_parents = np.where(sorted_parents >= 0, position[np.maximum(sorted_parents, 0)], -1)
    if truncated:
        logger.debug("Cascade truncated at %d events (alpha=%.3f)", max_size, params.alpha)
    return Cascade(all_times[order], truncated=truncated, parents=sorted_parents)


def simulate_cascades(
    params: HawkesParams, count: int, rng_seed: Seed = None, max_size: int = DEFAULT_MAX_SIZE
) -> List[Cascade]:
    """``count`` independent cascades from one generator."""
    rng = np.random.default_rng(rng_seed)
    return [simulate_cascade(params, rng, max_size) for _ in range(count)]
