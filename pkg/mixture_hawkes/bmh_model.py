"""Bayesian mixture Hawkes (BMH) models.

Two submodels share one structure: cascade-level class membership is a
softmax gate over features, class centres may shift with item features,
and each item's own parameters are pooled towards the source through a
multivariate normal hierarchy.

- popularity (BMH-P): Borel mixture over cascade sizes, class centres
  on the logit scale of the branching factor.
- kernel (BMH-K): power-law kernel mixture over interevent times, class
  centres on the log scale of (theta, d), ordered by half-life.

The log-posteriors are written in jax; a problem object exposes them in
an unconstrained, non-centred coordinate system for the optimiser.
"""

import copy
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, ClassVar, Dict, List, Optional, Sequence, Tuple, Union

import jax
import jax.numpy as jnp
import numpy as np
import numpyro.distributions as dist
from jax.flatten_util import ravel_pytree
from jax.scipy.special import logsumexp as jax_logsumexp
from numpyro.distributions.transforms import CorrCholeskyTransform, OrderedTransform
from scipy.linalg import solve_triangular
from scipy.special import expit, gammaln, logit, softmax

from .artifacts import read_artifact, write_artifact
from .errors import DomainError, ModelMismatchError, NonFiniteObjectiveError
from .hawkes_core import LN2, Cascade, DelayIndex

logger = logging.getLogger(__name__)


class Variant(Enum):
    """Feature ablations, from no features to the full model."""

    NONE = "none"
    Y_GATE = "y_gate"
    Y_CENTER_GATE = "y_center_gate"
    FULL = "full"

    @property
    def popularity_label(self) -> str:
        return _VARIANT_LABELS[self][0]

    @property
    def kernel_label(self) -> str:
        return _VARIANT_LABELS[self][1]

    @classmethod
    def parse(cls, value: Union["Variant", str]) -> "Variant":
        if isinstance(value, cls):
            return value
        try:
            return cls(value)
        except ValueError:
            choices = ", ".join(v.value for v in cls)
            raise ValueError(f"Unknown variant '{value}'. Choose from: {choices}") from None


_VARIANT_LABELS = {
    Variant.NONE: ("α(∅)+z(∅)", "θ(∅)+z(∅)"),
    Variant.Y_GATE: ("α(∅)+z(y)", "θ(∅)+z(y)"),
    Variant.Y_CENTER_GATE: ("α(y)+z(y)", "θ(y)+z(y)"),
    Variant.FULL: ("α(y)+z(x,y)", "θ(y)+z(x,y)"),
}

# (x in gate, y in centre, y in gate)
_VARIANT_FLAGS = {
    Variant.NONE: (False, False, False),
    Variant.Y_GATE: (False, False, True),
    Variant.Y_CENTER_GATE: (False, True, True),
    Variant.FULL: (True, True, True),
}


class Submodel(Enum):
    POPULARITY = "popularity"
    KERNEL = "kernel"


@dataclass(frozen=True)
class FeatureConfig:
    dim_x: int
    dim_y: int
    x_in_gate: bool = True
    y_in_center: bool = True
    y_in_gate: bool = True

    def __post_init__(self):
        if self.dim_x < 0 or self.dim_y < 0:
            raise DomainError(f"Feature dimensions cannot be negative: dim_x={self.dim_x}, dim_y={self.dim_y}")

    @property
    def variant(self) -> Optional[Variant]:
        flags = (self.x_in_gate, self.y_in_center, self.y_in_gate)
        for variant, expected in _VARIANT_FLAGS.items():
            if flags == expected:
                return variant
        return None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FeatureConfig":
        return cls(**data)


def apply_ablation(features: FeatureConfig, variant: Union[Variant, str]) -> FeatureConfig:
    """Return ``features`` with the x/y terms switched to match ``variant``."""
    x_in_gate, y_in_center, y_in_gate = _VARIANT_FLAGS[Variant.parse(variant)]
    return replace(features, x_in_gate=x_in_gate, y_in_center=y_in_center, y_in_gate=y_in_gate)


def _default_alpha_means(k: int) -> Tuple[float, ...]:
    if k == 1:
        return (float(logit(0.3)),)
    return tuple(float(v) for v in logit(np.linspace(0.1, 0.6, k)))


def _default_theta_means(k: int) -> Tuple[float, ...]:
    if k == 1:
        return (0.0,)
    return tuple(float(v) for v in np.log(np.geomspace(0.3, 3.0, k)))


def _default_d_means(k: int) -> Tuple[float, ...]:
    if k == 1:
        return (float(np.log(3000.0)),)
    return tuple(float(v) for v in np.log(np.geomspace(300.0, 30000.0, k)))


@dataclass(frozen=True)
class PriorConfig:
    """Prior hyperparameters; ``flat=True`` switches every prior term off.

    Class-centre means are given on the transformed scale: logit for the
    branching factor, log for theta and d (d in seconds).
    """

    alpha_center_means: Tuple[float, ...] = _default_alpha_means(2)
    alpha_center_scale: float = 1.0
    theta_center_means: Tuple[float, ...] = _default_theta_means(3)
    theta_center_scale: float = 1.0
    d_center_means: Tuple[float, ...] = _default_d_means(3)
    d_center_scale: float = 1.5
    gate_scale: float = 1.0
    gamma_laplace_scale: float = 0.1
    sigma_scale: float = 1.0
    lkj_eta: float = 2.0
    flat: bool = False

    def __post_init__(self):
        for name in ("alpha_center_means", "theta_center_means", "d_center_means"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        for name in ("alpha_center_scale", "theta_center_scale", "d_center_scale",
                     "gate_scale", "gamma_laplace_scale", "sigma_scale", "lkj_eta"):
            if not getattr(self, name) > 0:
                raise DomainError(f"Prior parameter {name} must be positive, got {getattr(self, name)}")

    @classmethod
    def default(cls, k_alpha: int = 2, k_theta: int = 3, flat: bool = False) -> "PriorConfig":
        return cls(
            alpha_center_means=_default_alpha_means(k_alpha),
            theta_center_means=_default_theta_means(k_theta),
            d_center_means=_default_d_means(k_theta),
            flat=flat,
        )

    @property
    def k_alpha(self) -> int:
        return len(self.alpha_center_means)

    @property
    def k_theta(self) -> int:
        return len(self.theta_center_means)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for name in ("alpha_center_means", "theta_center_means", "d_center_means"):
            data[name] = list(data[name])
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PriorConfig":
        return cls(**data)


def _check_correlation(omega: np.ndarray, name: str) -> None:
    if omega.size == 0:
        return
    if not np.allclose(omega, np.swapaxes(omega, -1, -2), atol=1e-10):
        raise DomainError(f"{name} must be symmetric")
    if not np.allclose(np.diagonal(omega, axis1=-2, axis2=-1), 1.0, atol=1e-10):
        raise DomainError(f"{name} must have a unit diagonal")
    try:
        np.linalg.cholesky(omega)
    except np.linalg.LinAlgError:
        raise DomainError(f"{name} must be positive definite") from None


def _params_to_dict(obj) -> Dict[str, Any]:
    data = {f.name: np.asarray(getattr(obj, f.name)).tolist() for f in fields(obj) if f.name != "item_ids"}
    data["dim_x"] = obj.dim_x
    data["dim_y"] = obj.dim_y
    return data


@dataclass
class BmhPGlobals:
    """Source-level parameters of the popularity submodel.

    The item vector is [delta_alpha (K), delta_z (K-1), beta_z (K-1 x Nx)],
    so the hierarchy mean is the concatenation of the matching fields.
    """

    delta_alpha: np.ndarray
    delta_z_alpha: np.ndarray
    beta_z_alpha: np.ndarray
    gamma_alpha: np.ndarray
    gamma_z_alpha: np.ndarray
    sigma_p_alpha: np.ndarray
    omega_alpha: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.asarray(getattr(self, f.name), dtype=float))
        k = self.delta_alpha.size
        if self.gamma_alpha.ndim != 2 or self.beta_z_alpha.ndim != 2:
            raise ModelMismatchError("gamma_alpha and beta_z_alpha must be two-dimensional")
        p = self.n_item_params
        expected = {
            "delta_alpha": (k,),
            "delta_z_alpha": (k - 1,),
            "beta_z_alpha": (k - 1, self.dim_x),
            "gamma_alpha": (k, self.dim_y),
            "gamma_z_alpha": (k - 1, self.dim_y),
            "sigma_p_alpha": (p,),
            "omega_alpha": (p, p),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ModelMismatchError(f"{name} must have shape {shape}, got {getattr(self, name).shape}")
        if np.any(np.diff(self.delta_alpha) < 0):
            raise DomainError(f"delta_alpha must be increasing, got {self.delta_alpha}")
        if np.any(self.sigma_p_alpha <= 0):
            raise DomainError("sigma_p_alpha entries must be positive")
        _check_correlation(self.omega_alpha, "omega_alpha")

    @property
    def n_classes(self) -> int:
        return int(self.delta_alpha.size)

    @property
    def dim_x(self) -> int:
        return int(self.beta_z_alpha.shape[1])

    @property
    def dim_y(self) -> int:
        return int(self.gamma_alpha.shape[1])

    @property
    def n_item_params(self) -> int:
        k = self.n_classes
        return k + (k - 1) * (1 + self.dim_x)

    @property
    def p_alpha_mean(self) -> np.ndarray:
        return np.concatenate([self.delta_alpha, self.delta_z_alpha, self.beta_z_alpha.ravel()])

    def covariance(self) -> np.ndarray:
        scale = self.sigma_p_alpha[:, None] * self.sigma_p_alpha[None, :]
        return scale * self.omega_alpha

    def to_dict(self) -> Dict[str, Any]:
        return _params_to_dict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BmhPGlobals":
        k = len(data["delta_alpha"])
        nx, ny = data["dim_x"], data["dim_y"]
        p = k + (k - 1) * (1 + nx)
        return cls(
            delta_alpha=np.asarray(data["delta_alpha"], dtype=float),
            delta_z_alpha=np.asarray(data["delta_z_alpha"], dtype=float).reshape(k - 1),
            beta_z_alpha=np.asarray(data["beta_z_alpha"], dtype=float).reshape(k - 1, nx),
            gamma_alpha=np.asarray(data["gamma_alpha"], dtype=float).reshape(k, ny),
            gamma_z_alpha=np.asarray(data["gamma_z_alpha"], dtype=float).reshape(k - 1, ny),
            sigma_p_alpha=np.asarray(data["sigma_p_alpha"], dtype=float).reshape(p),
            omega_alpha=np.asarray(data["omega_alpha"], dtype=float).reshape(p, p),
        )


@dataclass
class BmhPItemParams:
    """Item vectors p_alpha^a for a batch of items, one row per item."""

    item_ids: List[str]
    p_alpha: np.ndarray

    def __post_init__(self):
        self.item_ids = [str(i) for i in self.item_ids]
        self.p_alpha = np.asarray(self.p_alpha, dtype=float)
        if self.p_alpha.ndim != 2 or self.p_alpha.shape[0] != len(self.item_ids):
            raise ModelMismatchError("p_alpha must have one row per item")
        if not np.all(np.isfinite(self.p_alpha)):
            raise DomainError("Item parameters must be finite")

    def row(self, item_id: str) -> Optional[np.ndarray]:
        try:
            return self.p_alpha[self.item_ids.index(str(item_id))]
        except ValueError:
            return None

    def to_dict(self) -> Dict[str, Any]:
        return {"item_ids": list(self.item_ids), "p_alpha": self.p_alpha.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any], n_item_params: int) -> "BmhPItemParams":
        ids = data["item_ids"]
        return cls(ids, np.asarray(data["p_alpha"], dtype=float).reshape(len(ids), n_item_params))


@dataclass
class BmhKGlobals:
    """Source-level parameters of the kernel submodel.

    Per class k: centre (delta_theta, delta_d) with its own 2x2 hierarchy
    (sigma_theta_d[k], omega_theta_d[k]) and gamma_theta[k]. The gate block
    [delta_z (K-1), beta_z (K-1 x Nx)] shares one hierarchy.
    """

    delta_theta: np.ndarray
    delta_d: np.ndarray
    sigma_theta_d: np.ndarray
    omega_theta_d: np.ndarray
    gamma_theta: np.ndarray
    delta_z_theta: np.ndarray
    beta_z_theta: np.ndarray
    gamma_z_theta: np.ndarray
    sigma_z_theta: np.ndarray
    omega_z_theta: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.asarray(getattr(self, f.name), dtype=float))
        k = self.delta_theta.size
        if self.gamma_theta.ndim != 2 or self.beta_z_theta.ndim != 2:
            raise ModelMismatchError("gamma_theta and beta_z_theta must be two-dimensional")
        q = self.n_gate_params
        expected = {
            "delta_d": (k,),
            "sigma_theta_d": (k, 2),
            "omega_theta_d": (k, 2, 2),
            "gamma_theta": (k, self.dim_y),
            "delta_z_theta": (k - 1,),
            "beta_z_theta": (k - 1, self.dim_x),
            "gamma_z_theta": (k - 1, self.dim_y),
            "sigma_z_theta": (q,),
            "omega_z_theta": (q, q),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ModelMismatchError(f"{name} must have shape {shape}, got {getattr(self, name).shape}")
        if np.any(np.diff(self.half_lives) < -1e-12 * self.half_lives[:-1]):
            raise DomainError(f"Kernel classes must be ordered by half-life, got {self.half_lives}")
        if np.any(self.sigma_theta_d <= 0) or np.any(self.sigma_z_theta <= 0):
            raise DomainError("Hierarchy scales must be positive")
        _check_correlation(self.omega_theta_d, "omega_theta_d")
        _check_correlation(self.omega_z_theta, "omega_z_theta")

    @property
    def n_classes(self) -> int:
        return int(self.delta_theta.size)

    @property
    def dim_x(self) -> int:
        return int(self.beta_z_theta.shape[1])

    @property
    def dim_y(self) -> int:
        return int(self.gamma_theta.shape[1])

    @property
    def n_gate_params(self) -> int:
        return (self.n_classes - 1) * (1 + self.dim_x)

    @property
    def half_lives(self) -> np.ndarray:
        return np.exp(self.delta_d) * np.expm1(LN2 * np.exp(-self.delta_theta))

    @property
    def p_theta_mean(self) -> np.ndarray:
        return np.stack([self.delta_theta, self.delta_d], axis=-1)

    @property
    def p_z_mean(self) -> np.ndarray:
        return np.concatenate([self.delta_z_theta, self.beta_z_theta.ravel()])

    def class_covariances(self) -> np.ndarray:
        scale = self.sigma_theta_d[:, :, None] * self.sigma_theta_d[:, None, :]
        return scale * self.omega_theta_d

    def gate_covariance(self) -> np.ndarray:
        return self.sigma_z_theta[:, None] * self.sigma_z_theta[None, :] * self.omega_z_theta

    def to_dict(self) -> Dict[str, Any]:
        return _params_to_dict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BmhKGlobals":
        k = len(data["delta_theta"])
        nx, ny = data["dim_x"], data["dim_y"]
        q = (k - 1) * (1 + nx)

        def shaped(name, *shape):
            return np.asarray(data[name], dtype=float).reshape(shape)

        return cls(
            delta_theta=shaped("delta_theta", k),
            delta_d=shaped("delta_d", k),
            sigma_theta_d=shaped("sigma_theta_d", k, 2),
            omega_theta_d=shaped("omega_theta_d", k, 2, 2),
            gamma_theta=shaped("gamma_theta", k, ny),
            delta_z_theta=shaped("delta_z_theta", k - 1),
            beta_z_theta=shaped("beta_z_theta", k - 1, nx),
            gamma_z_theta=shaped("gamma_z_theta", k - 1, ny),
            sigma_z_theta=shaped("sigma_z_theta", q),
            omega_z_theta=shaped("omega_z_theta", q, q),
        )


@dataclass
class BmhKItemParams:
    """Per-item kernel blocks p_theta (A x K x 2) and gate blocks p_z (A x Q)."""

    item_ids: List[str]
    p_theta: np.ndarray
    p_z: np.ndarray

    def __post_init__(self):
        self.item_ids = [str(i) for i in self.item_ids]
        self.p_theta = np.asarray(self.p_theta, dtype=float)
        self.p_z = np.asarray(self.p_z, dtype=float)
        a = len(self.item_ids)
        if self.p_theta.ndim != 3 or self.p_theta.shape[0] != a or self.p_theta.shape[2] != 2:
            raise ModelMismatchError(f"p_theta must have shape ({a}, K, 2), got {self.p_theta.shape}")
        if self.p_z.ndim != 2 or self.p_z.shape[0] != a:
            raise ModelMismatchError(f"p_z must have one row per item, got {self.p_z.shape}")
        if not (np.all(np.isfinite(self.p_theta)) and np.all(np.isfinite(self.p_z))):
            raise DomainError("Item parameters must be finite")

    def index(self, item_id: str) -> Optional[int]:
        try:
            return self.item_ids.index(str(item_id))
        except ValueError:
            return None

    def to_dict(self) -> Dict[str, Any]:
        return {"item_ids": list(self.item_ids), "p_theta": self.p_theta.tolist(), "p_z": self.p_z.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any], n_classes: int, n_gate_params: int) -> "BmhKItemParams":
        a = len(data["item_ids"])
        return cls(
            data["item_ids"],
            np.asarray(data["p_theta"], dtype=float).reshape(a, n_classes, 2),
            np.asarray(data["p_z"], dtype=float).reshape(a, n_gate_params),
        )


# Closed-form pieces used outside the optimiser

def class_alpha(delta: float, gamma, y) -> float:
    """Per-class branching factor logistic(delta + gamma . y)."""
    gamma = np.asarray(gamma, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if gamma.size != y.size:
        raise ModelMismatchError(f"gamma has {gamma.size} entries but y has {y.size}")
    return float(expit(delta + gamma @ y))


def membership_probs(intercepts, beta_blocks, x, gamma_blocks, y) -> np.ndarray:
    """Softmax over classes of delta_k + beta_k . x + gamma_k . y.

    Class 1 is the reference class: its intercept and rows must be zero.
    """
    intercepts = np.asarray(intercepts, dtype=float).ravel()
    k = intercepts.size
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    beta_blocks = np.asarray(beta_blocks, dtype=float).reshape(k, x.size)
    gamma_blocks = np.asarray(gamma_blocks, dtype=float).reshape(k, y.size)
    if intercepts[0] != 0 or np.any(beta_blocks[0] != 0) or np.any(gamma_blocks[0] != 0):
        raise ModelMismatchError("Reference class gate parameters must be zero")
    return softmax(intercepts + beta_blocks @ x + gamma_blocks @ y)


# Data

@dataclass(frozen=True)
class CascadeArrays:
    """Dense arrays of one source's cascades, built once per fit."""

    item_ids: List[str]
    y: np.ndarray
    sizes: np.ndarray
    x: np.ndarray
    cascade_item: np.ndarray
    delays: DelayIndex

    @classmethod
    def from_items(
        cls, item_ids: Sequence[str], y, cascades_per_item: Sequence[Sequence[Cascade]]
    ) -> "CascadeArrays":
        if len(item_ids) == 0:
            raise ModelMismatchError("At least one item is required")
        y = np.asarray(y, dtype=float)
        if y.ndim != 2:
            y = y.reshape(len(item_ids), -1)
        if y.shape[0] != len(item_ids) or len(cascades_per_item) != len(item_ids):
            raise ModelMismatchError("Item ids, y rows and cascade groups must align")
        cascades = [c for group in cascades_per_item for c in group]
        cascade_item = np.repeat(np.arange(len(item_ids)), [len(group) for group in cascades_per_item])
        dims = {c.features_x.size for c in cascades}
        if len(dims) > 1:
            raise ModelMismatchError(f"Cascade feature vectors have inconsistent lengths {sorted(dims)}")
        dim_x = dims.pop() if dims else 0
        x = np.array([c.features_x for c in cascades], dtype=float).reshape(len(cascades), dim_x)
        return cls(
            item_ids=[str(i) for i in item_ids],
            y=y,
            sizes=np.array([c.size for c in cascades], dtype=float),
            x=x,
            cascade_item=cascade_item.astype(int),
            delays=DelayIndex.from_cascades(cascades),
        )

    @classmethod
    def from_corpus(cls, corpus) -> "CascadeArrays":
        items = corpus.items
        return cls.from_items(
            [item.item_id for item in items],
            np.array([item.y for item in items], dtype=float).reshape(len(items), -1),
            [item.cascades for item in items],
        )

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_cascades(self) -> int:
        return int(self.sizes.size)

    @property
    def dim_x(self) -> int:
        return int(self.x.shape[1])

    @property
    def dim_y(self) -> int:
        return int(self.y.shape[1])

    @property
    def informative(self) -> np.ndarray:
        return self.sizes >= 2

    def device_arrays(self) -> Dict[str, jnp.ndarray]:
        index = self.delays
        return {
            "y": jnp.asarray(self.y),
            "x": jnp.asarray(self.x),
            "sizes": jnp.asarray(self.sizes),
            "log_sizes": jnp.asarray(np.log(self.sizes)),
            "log_factorial": jnp.asarray(gammaln(self.sizes + 1.0)),
            "cascade_item": jnp.asarray(self.cascade_item),
            "informative": jnp.asarray(self.informative),
            "delays": jnp.asarray(index.delays),
            "pair_event": jnp.asarray(index.pair_event),
            "pair_cascade": jnp.asarray(index.event_cascade[index.pair_event]),
            "event_cascade": jnp.asarray(index.event_cascade),
        }


# Transforms

def _corr_cholesky(raw, dim: int):
    if dim == 0:
        return jnp.zeros((0, 0))
    if dim == 1:
        return jnp.ones((1, 1))
    return CorrCholeskyTransform()(raw)


def _corr_cholesky_inverse(chol: np.ndarray) -> np.ndarray:
    dim = chol.shape[-1]
    if dim < 2:
        return np.zeros(0)
    return np.asarray(CorrCholeskyTransform().inv(jnp.asarray(chol)))


def _pair_cholesky(raw):
    """Batch of 2x2 correlation Cholesky factors from unconstrained values."""
    r = jnp.tanh(raw)
    first = jnp.stack([jnp.ones_like(r), jnp.zeros_like(r)], axis=-1)
    second = jnp.stack([r, jnp.sqrt(1.0 - r ** 2)], axis=-1)
    return jnp.stack([first, second], axis=-2)


def _ordered_inverse(values: np.ndarray, min_gap: float = 1e-8) -> np.ndarray:
    values = np.asarray(values, dtype=float).copy()
    for i in range(1, values.size):
        values[i] = max(values[i], values[i - 1] + min_gap)
    return np.asarray(OrderedTransform().inv(jnp.asarray(values)))


def _whiten(p: np.ndarray, mean: np.ndarray, scale_tril: np.ndarray) -> np.ndarray:
    if p.shape[-1] == 0:
        return np.zeros_like(p)
    return solve_triangular(scale_tril, (p - mean).T, lower=True).T


def _segment_logsumexp(values, segment_ids, num_segments: int):
    peak = jax.lax.stop_gradient(
        jax.ops.segment_max(values, segment_ids, num_segments=num_segments, indices_are_sorted=True)
    )
    total = jax.ops.segment_sum(
        jnp.exp(values - peak[segment_ids]), segment_ids, num_segments=num_segments, indices_are_sorted=True
    )
    return peak + jnp.log(total)


def _raise_if_non_finite(cascade_ll: np.ndarray, item_ll: np.ndarray, prior: float, data: CascadeArrays) -> None:
    bad = np.flatnonzero(~np.isfinite(cascade_ll))
    if bad.size:
        c = int(bad[0])
        a = int(data.cascade_item[c])
        raise NonFiniteObjectiveError(
            f"Log-likelihood is not finite for cascade {c} of item '{data.item_ids[a]}'",
            item_index=a,
            cascade_index=c,
        )
    bad = np.flatnonzero(~np.isfinite(item_ll))
    if bad.size:
        a = int(bad[0])
        raise NonFiniteObjectiveError(
            f"Hierarchy log-density is not finite for item '{data.item_ids[a]}'", item_index=a
        )
    if not np.isfinite(prior):
        raise NonFiniteObjectiveError("Log-prior is not finite")


# Problems

class BmhProblem:
    """A BMH log-posterior over one source, ready for optimisation.

    ``objective`` works on a flat vector of unconstrained, non-centred
    coordinates; ``constrain``/``unconstrain`` convert to and from the
    parameter dataclasses, and ``log_posterior`` evaluates the centred
    log-posterior directly on them.
    """

    submodel: ClassVar[Submodel]

    def __init__(self, data: CascadeArrays, n_classes: int, features: FeatureConfig, priors: PriorConfig):
        if n_classes < 1:
            raise DomainError(f"Number of classes must be at least 1, got {n_classes}")
        if features.dim_x != data.dim_x or features.dim_y != data.dim_y:
            raise ModelMismatchError(
                f"Feature config ({features.dim_x}, {features.dim_y}) does not match data "
                f"({data.dim_x}, {data.dim_y})"
            )
        self.data = data
        self.n_classes = n_classes
        self.features = features
        self.priors = priors
        self._check_data()
        self._arrays = data.device_arrays()
        flat, self._unravel = ravel_pytree(self._template())
        self.dimension = int(flat.size)

        def raw_objective(vector, arrays):
            constrained, log_jacobian = self._constrain_tree(self._unravel(vector))
            cascade_ll, item_ll, prior = self._terms(constrained, arrays)
            return jnp.sum(cascade_ll) + jnp.sum(item_ll) + prior + log_jacobian

        self._objective = jax.jit(raw_objective)
        self._value_and_grad = jax.jit(jax.value_and_grad(raw_objective))

    def _check_data(self) -> None:
        pass

    @property
    def variant(self) -> Optional[Variant]:
        return self.features.variant

    @property
    def k(self) -> int:
        return self.n_classes

    def objective(self, vector) -> float:
        return float(self._objective(jnp.asarray(vector, dtype=jnp.float64), self._arrays))

    def value_and_grad(self, vector) -> Tuple[float, np.ndarray]:
        value, grad = self._value_and_grad(jnp.asarray(vector, dtype=jnp.float64), self._arrays)
        return float(value), np.asarray(grad)

    def pack(self, tree: Dict[str, Any]) -> np.ndarray:
        return np.asarray(ravel_pytree({k: jnp.asarray(v) for k, v in tree.items()})[0])

    def unpack(self, vector) -> Dict[str, jnp.ndarray]:
        return self._unravel(jnp.asarray(vector, dtype=jnp.float64))

    def zero_point(self) -> np.ndarray:
        return np.zeros(self.dimension)

    def constrain(self, vector):
        constrained, _ = self._constrain_tree(self.unpack(vector))
        return self._to_params({k: np.asarray(v) for k, v in constrained.items()})

    def log_posterior(self, global_params, item_params) -> float:
        """Centred log-posterior; a non-finite value raises with the offending index."""
        terms = self._terms(self._from_params(global_params, item_params), self._arrays)
        cascade_ll, item_ll, prior = (np.asarray(t) for t in terms)
        _raise_if_non_finite(cascade_ll, item_ll, float(prior), self.data)
        return float(cascade_ll.sum() + item_ll.sum() + prior)

    def cascade_log_likelihoods(self, global_params, item_params) -> np.ndarray:
        cascade_ll, _, _ = self._terms(self._from_params(global_params, item_params), self._arrays)
        return np.asarray(cascade_ll)

    def get_problem_info(self) -> Dict[str, Any]:
        return {
            "submodel": self.submodel.value,
            "n_classes": self.n_classes,
            "variant": self.variant.value if self.variant else None,
            "dimension": self.dimension,
            "n_items": self.data.n_items,
            "n_cascades": self.data.n_cascades,
            "dim_x": self.data.dim_x,
            "dim_y": self.data.dim_y,
            "flat_priors": self.priors.flat,
        }

    def _item_order(self, item_ids: Sequence[str]) -> np.ndarray:
        position = {item_id: i for i, item_id in enumerate(item_ids)}
        missing = [i for i in self.data.item_ids if i not in position]
        if missing:
            raise ModelMismatchError(f"No item parameters for items {missing[:5]}")
        return np.array([position[i] for i in self.data.item_ids], dtype=int)

    def _gate_log_probs(self, delta_z, beta, gamma_z, arrays):
        """Per-cascade log membership (C x K); the reference class logit is 0."""
        item = arrays["cascade_item"]
        logits = delta_z[item]
        if self.features.x_in_gate:
            logits = logits + jnp.einsum("ckx,cx->ck", beta[item], arrays["x"])
        if self.features.y_in_gate:
            logits = logits + (arrays["y"] @ gamma_z.T)[item]
        logits = jnp.concatenate([jnp.zeros((logits.shape[0], 1)), logits], axis=1)
        return jax.nn.log_softmax(logits, axis=1)

    def _masked_or_free(self, tree, name: str, shape: Tuple[int, ...], active: bool):
        return tree[name] if active else jnp.zeros(shape)

    def _template(self) -> Dict[str, jnp.ndarray]:
        raise NotImplementedError

    def _constrain_tree(self, tree):
        raise NotImplementedError

    def _terms(self, constrained, arrays):
        raise NotImplementedError

    def _to_params(self, constrained):
        raise NotImplementedError

    def _from_params(self, global_params, item_params) -> Dict[str, jnp.ndarray]:
        raise NotImplementedError

    def unconstrain(self, global_params, item_params) -> np.ndarray:
        raise NotImplementedError


class PopularityProblem(BmhProblem):
    submodel = Submodel.POPULARITY

    @property
    def n_item_params(self) -> int:
        k = self.n_classes
        return k + (k - 1) * (1 + self.data.dim_x)

    def _check_data(self) -> None:
        if self.priors.k_alpha != self.n_classes:
            raise ModelMismatchError(
                f"Prior has {self.priors.k_alpha} popularity class centres but the model has {self.n_classes}"
            )

    def _template(self):
        k, nx, ny, a, p = self.n_classes, self.data.dim_x, self.data.dim_y, self.data.n_items, self.n_item_params
        tree = {
            "alpha_center": jnp.zeros(k),
            "delta_z": jnp.zeros(k - 1),
            "beta_z": jnp.zeros((k - 1, nx)),
            "log_sigma": jnp.zeros(p),
            "corr": jnp.zeros(p * (p - 1) // 2),
            "item_raw": jnp.zeros((a, p)),
        }
        if self.features.y_in_center:
            tree["gamma"] = jnp.zeros((k, ny))
        if self.features.y_in_gate:
            tree["gamma_z"] = jnp.zeros((k - 1, ny))
        return tree

    def _constrain_tree(self, tree):
        k, ny, a, p = self.n_classes, self.data.dim_y, self.data.n_items, self.n_item_params
        delta_alpha = OrderedTransform()(tree["alpha_center"])
        sigma = jnp.exp(tree["log_sigma"])
        chol = _corr_cholesky(tree["corr"], p)
        mean = jnp.concatenate([delta_alpha, tree["delta_z"], tree["beta_z"].ravel()])
        scale_tril = sigma[:, None] * chol
        constrained = {
            "delta_alpha": delta_alpha,
            "delta_z": tree["delta_z"],
            "beta_z": tree["beta_z"],
            "gamma": self._masked_or_free(tree, "gamma", (k, ny), self.features.y_in_center),
            "gamma_z": self._masked_or_free(tree, "gamma_z", (k - 1, ny), self.features.y_in_gate),
            "sigma": sigma,
            "chol": chol,
            "p_items": mean + tree["item_raw"] @ scale_tril.T,
        }
        log_jacobian = a * (jnp.sum(tree["log_sigma"]) + jnp.sum(jnp.log(jnp.diagonal(chol))))
        return constrained, log_jacobian

    def _terms(self, c, arrays):
        k, nx = self.n_classes, self.data.dim_x
        p_items = c["p_items"]
        a = p_items.shape[0]
        item = arrays["cascade_item"]

        center = p_items[:, :k]
        if self.features.y_in_center:
            center = center + arrays["y"] @ c["gamma"].T
        center = center[item]
        n = arrays["sizes"][:, None]
        log_borel = (
            (n - 1.0) * (jax.nn.log_sigmoid(center) + arrays["log_sizes"][:, None])
            - jax.nn.sigmoid(center) * n
            - arrays["log_factorial"][:, None]
        )
        delta_z = p_items[:, k:2 * k - 1]
        beta = p_items[:, 2 * k - 1:].reshape(a, k - 1, nx)
        log_z = self._gate_log_probs(delta_z, beta, c["gamma_z"], arrays)
        cascade_ll = jax_logsumexp(log_z + log_borel, axis=1)

        mean = jnp.concatenate([c["delta_alpha"], c["delta_z"], c["beta_z"].ravel()])
        item_ll = dist.MultivariateNormal(mean, scale_tril=c["sigma"][:, None] * c["chol"]).log_prob(p_items)
        return cascade_ll, item_ll, self._log_prior(c)

    def _log_prior(self, c):
        priors = self.priors
        if priors.flat:
            return jnp.asarray(0.0)
        total = dist.Normal(jnp.asarray(priors.alpha_center_means), priors.alpha_center_scale).log_prob(
            c["delta_alpha"]).sum()
        total += dist.Normal(0.0, priors.gate_scale).log_prob(c["delta_z"]).sum()
        total += dist.Normal(0.0, priors.gate_scale).log_prob(c["beta_z"]).sum()
        total += dist.Laplace(0.0, priors.gamma_laplace_scale).log_prob(c["gamma"]).sum()
        total += dist.Laplace(0.0, priors.gamma_laplace_scale).log_prob(c["gamma_z"]).sum()
        total += dist.HalfNormal(priors.sigma_scale).log_prob(c["sigma"]).sum()
        if self.n_item_params >= 2:
            total += dist.LKJCholesky(self.n_item_params, priors.lkj_eta).log_prob(c["chol"])
        return total

    def _to_params(self, c):
        chol = c["chol"]
        global_params = BmhPGlobals(
            delta_alpha=c["delta_alpha"],
            delta_z_alpha=c["delta_z"],
            beta_z_alpha=c["beta_z"],
            gamma_alpha=c["gamma"],
            gamma_z_alpha=c["gamma_z"],
            sigma_p_alpha=c["sigma"],
            omega_alpha=chol @ chol.T,
        )
        return global_params, BmhPItemParams(self.data.item_ids, c["p_items"])

    def _from_params(self, g: BmhPGlobals, items: BmhPItemParams):
        if g.n_classes != self.n_classes or g.dim_x != self.data.dim_x or g.dim_y != self.data.dim_y:
            raise ModelMismatchError("Popularity parameters do not match the problem dimensions")
        k, ny = self.n_classes, self.data.dim_y
        return {
            "delta_alpha": jnp.asarray(g.delta_alpha),
            "delta_z": jnp.asarray(g.delta_z_alpha),
            "beta_z": jnp.asarray(g.beta_z_alpha),
            "gamma": jnp.asarray(g.gamma_alpha) if self.features.y_in_center else jnp.zeros((k, ny)),
            "gamma_z": jnp.asarray(g.gamma_z_alpha) if self.features.y_in_gate else jnp.zeros((k - 1, ny)),
            "sigma": jnp.asarray(g.sigma_p_alpha),
            "chol": jnp.asarray(np.linalg.cholesky(g.omega_alpha)),
            "p_items": jnp.asarray(items.p_alpha[self._item_order(items.item_ids)]),
        }

    def unconstrain(self, g: BmhPGlobals, items: BmhPItemParams) -> np.ndarray:
        c = {k: np.asarray(v) for k, v in self._from_params(g, items).items()}
        scale_tril = c["sigma"][:, None] * c["chol"]
        tree = {
            "alpha_center": _ordered_inverse(c["delta_alpha"]),
            "delta_z": c["delta_z"],
            "beta_z": c["beta_z"],
            "log_sigma": np.log(c["sigma"]),
            "corr": _corr_cholesky_inverse(c["chol"]),
            "item_raw": _whiten(c["p_items"], g.p_alpha_mean, scale_tril),
        }
        if self.features.y_in_center:
            tree["gamma"] = c["gamma"]
        if self.features.y_in_gate:
            tree["gamma_z"] = c["gamma_z"]
        return self.pack(tree)


class KernelProblem(BmhProblem):
    submodel = Submodel.KERNEL

    @property
    def n_gate_params(self) -> int:
        return (self.n_classes - 1) * (1 + self.data.dim_x)

    def _check_data(self) -> None:
        if not np.any(self.data.informative):
            raise DomainError("The kernel submodel needs at least one cascade with two or more events")
        if self.priors.k_theta != self.n_classes or len(self.priors.d_center_means) != self.n_classes:
            raise ModelMismatchError(
                f"Prior has {self.priors.k_theta} kernel class centres but the model has {self.n_classes}"
            )

    def _template(self):
        k, nx, ny, a, q = self.n_classes, self.data.dim_x, self.data.dim_y, self.data.n_items, self.n_gate_params
        tree = {
            "log_half_life": jnp.zeros(k),
            "delta_theta": jnp.zeros(k),
            "log_sigma_td": jnp.zeros((k, 2)),
            "corr_td": jnp.zeros(k),
            "item_td_raw": jnp.zeros((a, k, 2)),
            "delta_z": jnp.zeros(k - 1),
            "beta_z": jnp.zeros((k - 1, nx)),
            "log_sigma_z": jnp.zeros(q),
            "corr_z": jnp.zeros(q * (q - 1) // 2),
            "item_z_raw": jnp.zeros((a, q)),
        }
        if self.features.y_in_center:
            tree["gamma_theta"] = jnp.zeros((k, ny))
        if self.features.y_in_gate:
            tree["gamma_z"] = jnp.zeros((k - 1, ny))
        return tree

    def _constrain_tree(self, tree):
        k, ny, a, q = self.n_classes, self.data.dim_y, self.data.n_items, self.n_gate_params
        log_half_life = OrderedTransform()(tree["log_half_life"])
        delta_theta = tree["delta_theta"]
        delta_d = log_half_life - jnp.log(jnp.expm1(LN2 * jnp.exp(-delta_theta)))
        sigma_td = jnp.exp(tree["log_sigma_td"])
        chol_td = _pair_cholesky(tree["corr_td"])
        scale_td = sigma_td[:, :, None] * chol_td
        mean_td = jnp.stack([delta_theta, delta_d], axis=-1)
        sigma_z = jnp.exp(tree["log_sigma_z"])
        chol_z = _corr_cholesky(tree["corr_z"], q)
        mean_z = jnp.concatenate([tree["delta_z"], tree["beta_z"].ravel()])
        constrained = {
            "delta_theta": delta_theta,
            "delta_d": delta_d,
            "sigma_td": sigma_td,
            "chol_td": chol_td,
            "p_td": mean_td + jnp.einsum("kij,akj->aki", scale_td, tree["item_td_raw"]),
            "gamma_theta": self._masked_or_free(tree, "gamma_theta", (k, ny), self.features.y_in_center),
            "delta_z": tree["delta_z"],
            "beta_z": tree["beta_z"],
            "gamma_z": self._masked_or_free(tree, "gamma_z", (k - 1, ny), self.features.y_in_gate),
            "sigma_z": sigma_z,
            "chol_z": chol_z,
            "p_z": mean_z + tree["item_z_raw"] @ (sigma_z[:, None] * chol_z).T,
        }
        log_jacobian = a * (
            jnp.sum(tree["log_sigma_td"])
            + jnp.sum(jnp.log(chol_td[:, 1, 1]))
            + jnp.sum(tree["log_sigma_z"])
            + jnp.sum(jnp.log(jnp.diagonal(chol_z)))
        )
        return constrained, log_jacobian

    def _terms(self, c, arrays):
        k, nx = self.n_classes, self.data.dim_x
        index = self.data.delays
        p_td = c["p_td"]
        a = p_td.shape[0]
        item = arrays["cascade_item"]

        log_theta = p_td[..., 0]
        if self.features.y_in_center:
            log_theta = log_theta + arrays["y"] @ c["gamma_theta"].T
        pair_cascade = arrays["pair_cascade"]
        lt = log_theta[item][pair_cascade]
        ld = p_td[..., 1][item][pair_cascade]
        theta = jnp.exp(lt)
        log_g = lt + theta * ld - (1.0 + theta) * jnp.log(arrays["delays"][:, None] + jnp.exp(ld))
        event_ll = _segment_logsumexp(log_g, arrays["pair_event"], index.n_events)
        kernel_ll = jax.ops.segment_sum(
            event_ll, arrays["event_cascade"], num_segments=self.data.n_cascades, indices_are_sorted=True
        )

        p_z = c["p_z"]
        delta_z = p_z[:, :k - 1]
        beta = p_z[:, k - 1:].reshape(a, k - 1, nx)
        log_z = self._gate_log_probs(delta_z, beta, c["gamma_z"], arrays)
        cascade_ll = jnp.where(arrays["informative"], jax_logsumexp(log_z + kernel_ll, axis=1), 0.0)

        mean_td = jnp.stack([c["delta_theta"], c["delta_d"]], axis=-1)
        scale_td = c["sigma_td"][:, :, None] * c["chol_td"]
        item_ll = dist.MultivariateNormal(mean_td, scale_tril=scale_td).log_prob(p_td).sum(axis=-1)
        if self.n_gate_params:
            mean_z = jnp.concatenate([c["delta_z"], c["beta_z"].ravel()])
            item_ll = item_ll + dist.MultivariateNormal(
                mean_z, scale_tril=c["sigma_z"][:, None] * c["chol_z"]).log_prob(p_z)
        return cascade_ll, item_ll, self._log_prior(c)

    def _log_prior(self, c):
        priors = self.priors
        if priors.flat:
            return jnp.asarray(0.0)
        total = dist.Normal(jnp.asarray(priors.theta_center_means), priors.theta_center_scale).log_prob(
            c["delta_theta"]).sum()
        total += dist.Normal(jnp.asarray(priors.d_center_means), priors.d_center_scale).log_prob(c["delta_d"]).sum()
        total += dist.Normal(0.0, priors.gate_scale).log_prob(c["delta_z"]).sum()
        total += dist.Normal(0.0, priors.gate_scale).log_prob(c["beta_z"]).sum()
        total += dist.Laplace(0.0, priors.gamma_laplace_scale).log_prob(c["gamma_theta"]).sum()
        total += dist.Laplace(0.0, priors.gamma_laplace_scale).log_prob(c["gamma_z"]).sum()
        total += dist.HalfNormal(priors.sigma_scale).log_prob(c["sigma_td"]).sum()
        total += dist.HalfNormal(priors.sigma_scale).log_prob(c["sigma_z"]).sum()
        total += dist.LKJCholesky(2, priors.lkj_eta).log_prob(c["chol_td"]).sum()
        if self.n_gate_params >= 2:
            total += dist.LKJCholesky(self.n_gate_params, priors.lkj_eta).log_prob(c["chol_z"])
        return total

    def _to_params(self, c):
        chol_td = c["chol_td"]
        chol_z = c["chol_z"]
        global_params = BmhKGlobals(
            delta_theta=c["delta_theta"],
            delta_d=c["delta_d"],
            sigma_theta_d=c["sigma_td"],
            omega_theta_d=chol_td @ np.swapaxes(chol_td, -1, -2),
            gamma_theta=c["gamma_theta"],
            delta_z_theta=c["delta_z"],
            beta_z_theta=c["beta_z"],
            gamma_z_theta=c["gamma_z"],
            sigma_z_theta=c["sigma_z"],
            omega_z_theta=chol_z @ chol_z.T,
        )
        return global_params, BmhKItemParams(self.data.item_ids, c["p_td"], c["p_z"])

    def _from_params(self, g: BmhKGlobals, items: BmhKItemParams):
        if g.n_classes != self.n_classes or g.dim_x != self.data.dim_x or g.dim_y != self.data.dim_y:
            raise ModelMismatchError("Kernel parameters do not match the problem dimensions")
        k, ny = self.n_classes, self.data.dim_y
        order = self._item_order(items.item_ids)
        chol_z = np.linalg.cholesky(g.omega_z_theta) if g.n_gate_params else np.zeros((0, 0))
        return {
            "delta_theta": jnp.asarray(g.delta_theta),
            "delta_d": jnp.asarray(g.delta_d),
            "sigma_td": jnp.asarray(g.sigma_theta_d),
            "chol_td": jnp.asarray(np.linalg.cholesky(g.omega_theta_d)),
            "p_td": jnp.asarray(items.p_theta[order]),
            "gamma_theta": jnp.asarray(g.gamma_theta) if self.features.y_in_center else jnp.zeros((k, ny)),
            "delta_z": jnp.asarray(g.delta_z_theta),
            "beta_z": jnp.asarray(g.beta_z_theta),
            "gamma_z": jnp.asarray(g.gamma_z_theta) if self.features.y_in_gate else jnp.zeros((k - 1, ny)),
            "sigma_z": jnp.asarray(g.sigma_z_theta),
            "chol_z": jnp.asarray(chol_z),
            "p_z": jnp.asarray(items.p_z[order]),
        }

    def unconstrain(self, g: BmhKGlobals, items: BmhKItemParams) -> np.ndarray:
        c = {k: np.asarray(v) for k, v in self._from_params(g, items).items()}
        scale_td = c["sigma_td"][:, :, None] * c["chol_td"]
        mean_td = g.p_theta_mean
        item_td_raw = np.stack(
            [_whiten(c["p_td"][:, k, :], mean_td[k], scale_td[k]) for k in range(self.n_classes)], axis=1
        )
        scale_z = c["sigma_z"][:, None] * c["chol_z"]
        tree = {
            "log_half_life": _ordered_inverse(np.log(g.half_lives)),
            "delta_theta": c["delta_theta"],
            "log_sigma_td": np.log(c["sigma_td"]),
            "corr_td": np.arctanh(c["chol_td"][:, 1, 0]),
            "item_td_raw": item_td_raw,
            "delta_z": c["delta_z"],
            "beta_z": c["beta_z"],
            "log_sigma_z": np.log(c["sigma_z"]),
            "corr_z": _corr_cholesky_inverse(c["chol_z"]),
            "item_z_raw": _whiten(c["p_z"], g.p_z_mean, scale_z),
        }
        if self.features.y_in_center:
            tree["gamma_theta"] = c["gamma_theta"]
        if self.features.y_in_gate:
            tree["gamma_z"] = c["gamma_z"]
        return self.pack(tree)


class ProblemBuilder:
    """Fluent assembly of a BMH problem over one source's data."""

    def __init__(self, data: CascadeArrays):
        self._data = data
        self._submodel = Submodel.POPULARITY
        self._n_classes: Optional[int] = None
        self._variant = Variant.FULL
        self._priors: Optional[PriorConfig] = None

    def with_submodel(self, submodel: Union[Submodel, str]) -> "ProblemBuilder":
        """Choose the popularity or kernel submodel."""
        try:
            self._submodel = Submodel(submodel) if not isinstance(submodel, Submodel) else submodel
        except ValueError:
            raise ValueError(f"Unknown submodel '{submodel}'. Choose 'popularity' or 'kernel'") from None
        return self

    def with_classes(self, n_classes: int) -> "ProblemBuilder":
        if int(n_classes) != n_classes or n_classes < 1:
            raise ValueError(f"Number of classes must be a positive integer, got {n_classes}")
        self._n_classes = int(n_classes)
        return self

    def with_variant(self, variant: Union[Variant, str]) -> "ProblemBuilder":
        self._variant = Variant.parse(variant)
        return self

    def with_priors(self, priors: PriorConfig) -> "ProblemBuilder":
        if not isinstance(priors, PriorConfig):
            raise ValueError("Priors must be a PriorConfig")
        self._priors = priors
        return self

    def _resolved_classes(self) -> int:
        if self._n_classes is not None:
            return self._n_classes
        return 2 if self._submodel is Submodel.POPULARITY else 3

    def _resolved_priors(self) -> PriorConfig:
        if self._priors is not None:
            return self._priors
        k = self._resolved_classes()
        if self._submodel is Submodel.POPULARITY:
            return PriorConfig.default(k_alpha=k)
        return PriorConfig.default(k_theta=k)

    def get_problem_info(self) -> Dict[str, Any]:
        return {
            "submodel": self._submodel.value,
            "n_classes": self._resolved_classes(),
            "variant": self._variant.value,
            "n_items": self._data.n_items,
            "n_cascades": self._data.n_cascades,
            "custom_priors": self._priors is not None,
        }

    def clone(self) -> "ProblemBuilder":
        """Copy the builder settings; the data arrays are shared."""
        return copy.copy(self)

    def build(self) -> BmhProblem:
        features = apply_ablation(FeatureConfig(self._data.dim_x, self._data.dim_y), self._variant)
        problem_cls = PopularityProblem if self._submodel is Submodel.POPULARITY else KernelProblem
        return problem_cls(self._data, self._resolved_classes(), features, self._resolved_priors())


def bmh_p_log_posterior(
    global_params: BmhPGlobals,
    item_params: BmhPItemParams,
    data: CascadeArrays,
    priors: PriorConfig,
    features: FeatureConfig,
) -> float:
    return PopularityProblem(data, global_params.n_classes, features, priors).log_posterior(
        global_params, item_params)


def bmh_k_log_posterior(
    global_params: BmhKGlobals,
    item_params: BmhKItemParams,
    data: CascadeArrays,
    priors: PriorConfig,
    features: FeatureConfig,
) -> float:
    return KernelProblem(data, global_params.n_classes, features, priors).log_posterior(global_params, item_params)


# Fitted models

@dataclass
class PopularityModel:
    global_params: BmhPGlobals
    item_params: BmhPItemParams
    features: FeatureConfig
    priors: PriorConfig
    fit_report: Dict[str, Any] = field(default_factory=dict)
    source_summary: Dict[str, Any] = field(default_factory=dict)

    submodel: ClassVar[Submodel] = Submodel.POPULARITY
    kind: ClassVar[str] = "bmh_popularity"

    @property
    def n_classes(self) -> int:
        return self.global_params.n_classes

    @property
    def variant(self) -> Optional[Variant]:
        return self.features.variant

    def to_dict(self) -> Dict[str, Any]:
        return {
            "globals": self.global_params.to_dict(),
            "items": self.item_params.to_dict(),
            "features": self.features.to_dict(),
            "priors": self.priors.to_dict(),
            "fit_report": self.fit_report,
            "source_summary": self.source_summary,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PopularityModel":
        global_params = BmhPGlobals.from_dict(data["globals"])
        return cls(
            global_params=global_params,
            item_params=BmhPItemParams.from_dict(data["items"], global_params.n_item_params),
            features=FeatureConfig.from_dict(data["features"]),
            priors=PriorConfig.from_dict(data["priors"]),
            fit_report=data.get("fit_report", {}),
            source_summary=data.get("source_summary", {}),
        )


@dataclass
class KernelModel:
    global_params: BmhKGlobals
    item_params: BmhKItemParams
    features: FeatureConfig
    priors: PriorConfig
    fit_report: Dict[str, Any] = field(default_factory=dict)
    source_summary: Dict[str, Any] = field(default_factory=dict)

    submodel: ClassVar[Submodel] = Submodel.KERNEL
    kind: ClassVar[str] = "bmh_kernel"

    @property
    def n_classes(self) -> int:
        return self.global_params.n_classes

    @property
    def variant(self) -> Optional[Variant]:
        return self.features.variant

    def to_dict(self) -> Dict[str, Any]:
        return {
            "globals": self.global_params.to_dict(),
            "items": self.item_params.to_dict(),
            "features": self.features.to_dict(),
            "priors": self.priors.to_dict(),
            "fit_report": self.fit_report,
            "source_summary": self.source_summary,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "KernelModel":
        global_params = BmhKGlobals.from_dict(data["globals"])
        return cls(
            global_params=global_params,
            item_params=BmhKItemParams.from_dict(
                data["items"], global_params.n_classes, global_params.n_gate_params),
            features=FeatureConfig.from_dict(data["features"]),
            priors=PriorConfig.from_dict(data["priors"]),
            fit_report=data.get("fit_report", {}),
            source_summary=data.get("source_summary", {}),
        )


FittedModel = Union[PopularityModel, KernelModel]
_MODEL_KINDS = {PopularityModel.kind: PopularityModel, KernelModel.kind: KernelModel}


def save_model(model: FittedModel, path: Union[str, Path], run_config: Optional[Dict[str, Any]] = None) -> Path:
    return write_artifact(path, model.kind, model.to_dict(), run_config)


def load_model(path: Union[str, Path]) -> FittedModel:
    document = read_artifact(path)
    model_cls = _MODEL_KINDS.get(document.get("kind"))
    if model_cls is None:
        raise ModelMismatchError(f"{path} holds a '{document.get('kind')}' artifact, not a BMH model")
    return model_cls.from_dict(document["payload"])
