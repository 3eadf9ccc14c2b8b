"""Corpus files, feature standardization, source summaries and synthetic corpora.

A corpus file is JSON Lines. The first line is a header::

    {"schema_version": 1, "source_id": "...", "standardized": false, "standardization": null}

and every further line is one item::

    {"item_id": "a1", "y": [...], "headline": "...",
     "cascades": [{"t": [0.0, 12.5, ...], "followers": 120}, ...]}

Standardized corpora carry ``"x": [...]`` on each cascade and the train
constants in the header. Times are in seconds and rebased so the seed
event is at 0.
"""

import copy
import hashlib
import json
import logging
import os
import pickle
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, softmax

from . import __version__
from .bmh_model import BmhKGlobals, BmhPGlobals
from .errors import CorpusFormatError, DomainError, ModelMismatchError
from .hawkes_core import DEFAULT_MAX_SIZE, Cascade, HawkesParams, PowerLawKernel, simulate_cascade
from .predict_eval import FollowerDistribution, SourceSummary

logger = logging.getLogger(__name__)

CORPUS_SCHEMA_VERSION = 1
CACHE_ENV = "MIXTURE_HAWKES_CACHE"
SUMMARY_BINS = 64
ZERO_VARIANCE = 1e-12
TRUNCATION_WARNING_FRACTION = 0.01

PathLike = Union[str, Path]


@dataclass
class Item:
    item_id: str
    y: np.ndarray
    cascades: List[Cascade]
    headline: Optional[str] = None

    def __post_init__(self):
        self.item_id = str(self.item_id)
        self.y = np.asarray(self.y, dtype=float).ravel()

    @property
    def popularity(self) -> int:
        return int(sum(c.size for c in self.cascades))


@dataclass
class Standardization:
    """Per-source feature constants; zero-variance dimensions pass through (mean 0, std 1)."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray
    zero_variance_x: List[int] = field(default_factory=list)
    zero_variance_y: List[int] = field(default_factory=list)

    def __post_init__(self):
        for name in ("x_mean", "x_std", "y_mean", "y_std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).ravel())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(),
            "y_mean": self.y_mean.tolist(),
            "y_std": self.y_std.tolist(),
            "zero_variance_x": list(self.zero_variance_x),
            "zero_variance_y": list(self.zero_variance_y),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Standardization":
        return cls(**data)


@dataclass
class Corpus:
    """All items of one source."""

    source_id: str
    items: List[Item]
    standardization: Optional[Standardization] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.items:
            raise DomainError(f"Corpus '{self.source_id}' has no items")
        dims_y = {item.y.size for item in self.items}
        if len(dims_y) > 1:
            raise ModelMismatchError(f"Item feature vectors have inconsistent lengths {sorted(dims_y)}")
        dims_x = {c.features_x.size for c in self.cascades()}
        if len(dims_x) > 1:
            raise ModelMismatchError(f"Cascade feature vectors have inconsistent lengths {sorted(dims_x)}")

    @property
    def standardized(self) -> bool:
        return self.standardization is not None

    @property
    def dim_y(self) -> int:
        return int(self.items[0].y.size)

    @property
    def dim_x(self) -> int:
        cascades = self.cascades()
        return int(cascades[0].features_x.size) if cascades else 0

    @property
    def n_cascades(self) -> int:
        return sum(len(item.cascades) for item in self.items)

    def cascades(self) -> List[Cascade]:
        return [c for item in self.items for c in item.cascades]

    def item(self, item_id: str) -> Item:
        for item in self.items:
            if item.item_id == item_id:
                return item
        raise KeyError(f"Unknown item '{item_id}'")

    def subset(self, item_ids: Sequence[str], source_suffix: str = "") -> "Corpus":
        wanted = set(item_ids)
        return Corpus(
            source_id=self.source_id + source_suffix,
            items=[item for item in self.items if item.item_id in wanted],
            standardization=self.standardization,
            metadata=dict(self.metadata),
        )


# Loading and saving

def _parse_line(line: str, line_number: int, path: str) -> Dict[str, Any]:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"Invalid JSON: {exc.msg}", line_number, path) from exc
    if not isinstance(record, dict):
        raise CorpusFormatError("Each line must be a JSON object", line_number, path)
    return record


def _numeric_list(value, what: str, line_number: int, path: str) -> np.ndarray:
    try:
        array = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise CorpusFormatError(f"{what} must be a list of numbers", line_number, path) from None
    if array.ndim != 1 or not np.all(np.isfinite(array)):
        raise CorpusFormatError(f"{what} must be a flat list of finite numbers", line_number, path)
    return array


def _parse_cascade(record, position: int, item_id: str, standardized: bool, line_number: int, path: str) -> Cascade:
    where = f"cascade {position} of item '{item_id}'"
    if not isinstance(record, dict) or "t" not in record:
        raise CorpusFormatError(f"{where} needs an event time list 't'", line_number, path)
    times = _numeric_list(record["t"], f"Event times of {where}", line_number, path)
    if times.size == 0:
        raise CorpusFormatError(f"{where} has no events", line_number, path)
    if np.any(times < 0):
        raise CorpusFormatError(f"{where} has negative event times", line_number, path)
    if np.any(times[1:] < times[0]):
        raise CorpusFormatError(f"{where} has an event before its seed", line_number, path)
    if np.any(np.diff(times) < 0):
        raise CorpusFormatError(f"{where} has unsorted event times", line_number, path)

    followers = record.get("followers")
    if followers is not None and (int(followers) != followers or followers < 0):
        raise CorpusFormatError(f"{where} has an invalid follower count {followers}", line_number, path)
    if standardized:
        if "x" not in record:
            raise CorpusFormatError(f"{where} lacks standardized features 'x'", line_number, path)
        x = _numeric_list(record["x"], f"Features of {where}", line_number, path)
    else:
        if followers is None:
            raise CorpusFormatError(f"{where} lacks a follower count", line_number, path)
        x = np.zeros(0)
    return Cascade(times - times[0], features_x=x, followers=None if followers is None else int(followers))


def _parse_item(record: Dict[str, Any], standardized: bool, line_number: int, path: str) -> Item:
    for key in ("item_id", "y", "cascades"):
        if key not in record:
            raise CorpusFormatError(f"Item record is missing '{key}'", line_number, path)
    item_id = str(record["item_id"])
    y = _numeric_list(record["y"], f"Feature vector of item '{item_id}'", line_number, path)
    if not isinstance(record["cascades"], list) or not record["cascades"]:
        raise CorpusFormatError(f"Item '{item_id}' has no cascades", line_number, path)
    cascades = [
        _parse_cascade(c, i, item_id, standardized, line_number, path) for i, c in enumerate(record["cascades"])
    ]
    return Item(item_id, y, cascades, record.get("headline"))


def _read_corpus(path: Path) -> Corpus:
    label = str(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise CorpusFormatError("Empty corpus file", path=label)
    header = _parse_line(lines[0], 1, label)
    if header.get("schema_version") != CORPUS_SCHEMA_VERSION:
        raise CorpusFormatError(f"Unsupported corpus schema version {header.get('schema_version')}", 1, label)
    if "source_id" not in header:
        raise CorpusFormatError("Header is missing 'source_id'", 1, label)
    standardized = bool(header.get("standardized", False))
    standardization = None
    if standardized:
        if not header.get("standardization"):
            raise CorpusFormatError("Standardized corpus header lacks its constants", 1, label)
        standardization = Standardization.from_dict(header["standardization"])

    items, seen = [], set()
    for line_number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        item = _parse_item(_parse_line(line, line_number, label), standardized, line_number, label)
        if item.item_id in seen:
            raise CorpusFormatError(f"Duplicate item id '{item.item_id}'", line_number, label)
        seen.add(item.item_id)
        items.append(item)
    if not items:
        raise CorpusFormatError("Corpus has no items", path=label)
    try:
        return Corpus(str(header["source_id"]), items, standardization, header.get("metadata", {}))
    except (DomainError, ModelMismatchError) as exc:
        raise CorpusFormatError(str(exc), path=label) from exc


def _cache_file(path: Path) -> Optional[Path]:
    directory = os.environ.get(CACHE_ENV)
    if not directory:
        return None
    digest = hashlib.sha256(path.read_bytes() + __version__.encode()).hexdigest()
    return Path(directory) / f"corpus-{digest}.pickle"


def load_corpus(path: PathLike) -> Corpus:
    """Parse and validate a corpus file; parsed corpora are memoised when a cache directory is set."""
    path = Path(path)
    if not path.exists():
        raise CorpusFormatError("Corpus file not found", path=str(path))
    cache = _cache_file(path)
    if cache is not None and cache.exists():
        logger.debug("Loading corpus %s from cache %s", path, cache)
        with cache.open("rb") as handle:
            return pickle.load(handle)
    corpus = _read_corpus(path)
    logger.info("Loaded corpus '%s': %d items, %d cascades", corpus.source_id, len(corpus.items), corpus.n_cascades)
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        with cache.open("wb") as handle:
            pickle.dump(corpus, handle)
    return corpus


def _canonical(record: Dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def corpus_lines(corpus: Corpus) -> List[str]:
    header = {
        "schema_version": CORPUS_SCHEMA_VERSION,
        "source_id": corpus.source_id,
        "standardized": corpus.standardized,
        "standardization": corpus.standardization.to_dict() if corpus.standardization else None,
    }
    if corpus.metadata:
        header["metadata"] = corpus.metadata
    lines = [_canonical(header)]
    for item in corpus.items:
        cascades = []
        for cascade in item.cascades:
            record: Dict[str, Any] = {"t": cascade.event_times.tolist()}
            if cascade.followers is not None:
                record["followers"] = int(cascade.followers)
            if corpus.standardized:
                record["x"] = cascade.features_x.tolist()
            cascades.append(record)
        record = {"item_id": item.item_id, "y": item.y.tolist(), "cascades": cascades}
        if item.headline is not None:
            record["headline"] = item.headline
        lines.append(_canonical(record))
    return lines


def save_corpus(corpus: Corpus, path: PathLike) -> Path:
    """Write the canonical JSONL form (sorted keys, no whitespace)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(corpus_lines(corpus)) + "\n", encoding="utf-8")
    return path


# Features

def _moments(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray, List[int]]:
    if values.shape[0] == 0:
        return np.zeros(values.shape[1]), np.ones(values.shape[1]), []
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    flat = [int(i) for i in np.flatnonzero(std < ZERO_VARIANCE)]
    mean[flat] = 0.0
    std[flat] = 1.0
    return mean, std, flat


def standardize_features(
    corpus: Corpus, constants: Optional[Standardization] = None
) -> Tuple[Corpus, Standardization]:
    """x = (log(1 + followers) - mean) / std and y standardized per dimension.

    With ``constants`` (usually from the training split) those are applied
    instead of being recomputed.
    """
    if corpus.standardized:
        raise DomainError(f"Corpus '{corpus.source_id}' is already standardized")
    cascades = corpus.cascades()
    if any(c.followers is None for c in cascades):
        raise DomainError("Standardization needs raw follower counts on every cascade")
    log_followers = np.log1p(np.array([c.followers for c in cascades], dtype=float))[:, None]
    y = np.array([item.y for item in corpus.items], dtype=float).reshape(len(corpus.items), -1)

    if constants is None:
        x_mean, x_std, flat_x = _moments(log_followers)
        y_mean, y_std, flat_y = _moments(y)
        constants = Standardization(x_mean, x_std, y_mean, y_std, flat_x, flat_y)
        for name, flat in (("x", flat_x), ("y", flat_y)):
            if flat:
                logger.warning("Zero-variance %s dimensions %s passed through unscaled", name, flat)
    elif constants.x_mean.size != 1 or constants.y_mean.size != y.shape[1]:
        raise ModelMismatchError("Standardization constants do not match the corpus dimensions")

    x = (log_followers - constants.x_mean) / constants.x_std
    y = (y - constants.y_mean) / constants.y_std
    items = []
    position = 0
    for row, item in zip(y, corpus.items):
        new_cascades = []
        for cascade in item.cascades:
            new_cascade = copy.copy(cascade)
            new_cascade.features_x = x[position].copy()
            new_cascades.append(new_cascade)
            position += 1
        items.append(Item(item.item_id, row, new_cascades, item.headline))
    return Corpus(corpus.source_id, items, constants, dict(corpus.metadata)), constants


def source_summary(corpus: Corpus, n_bins: int = SUMMARY_BINS) -> SourceSummary:
    """Mean cascade count per item and an equal-probability binning of cascade features.

    Each bin is represented by the mean of its members; bins with the same
    representative are merged.
    """
    cascades = corpus.cascades()
    mean_count = len(cascades) / len(corpus.items)
    x = np.array([c.features_x for c in cascades], dtype=float).reshape(len(cascades), -1)
    if x.shape[1] == 0:
        support, probs = np.zeros((1, 0)), np.ones(1)
    else:
        order = np.lexsort(x.T[::-1])
        chunks = [chunk for chunk in np.array_split(x[order], min(n_bins, len(x))) if len(chunk)]
        representatives = np.array([chunk.mean(axis=0) for chunk in chunks])
        weights = np.array([len(chunk) for chunk in chunks], dtype=float) / len(x)
        support, inverse = np.unique(representatives, axis=0, return_inverse=True)
        probs = np.bincount(inverse.ravel(), weights=weights, minlength=len(support))
        probs = probs / probs.sum()
    history = np.array([item.y for item in corpus.items], dtype=float).reshape(len(corpus.items), -1)
    return SourceSummary(
        mean_cascade_count=mean_count,
        follower_dist=FollowerDistribution(support, probs, corpus.source_id, len(cascades)),
        history_y=history,
        source_id=corpus.source_id,
    )


def split_corpus(corpus: Corpus, test_fraction: float = 0.2, seed: int = 0) -> Tuple[Corpus, Corpus]:
    """Random item-level train/test split."""
    if not 0 < test_fraction < 1:
        raise DomainError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    if len(corpus.items) < 2:
        raise DomainError("Splitting needs at least two items")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(corpus.items))
    n_test = min(max(1, int(round(test_fraction * len(order)))), len(order) - 1)
    test_ids = {corpus.items[i].item_id for i in order[:n_test]}
    train_ids = [item.item_id for item in corpus.items if item.item_id not in test_ids]
    return corpus.subset(train_ids), corpus.subset(test_ids)


# Headlines

@dataclass
class HeadlineSet:
    headline_ids: List[str]
    styles: List[str]
    y: np.ndarray
    texts: List[Optional[str]] = field(default_factory=list)


def load_headlines(path: PathLike) -> HeadlineSet:
    """Read ``{"headline_id", "style", "y", "text"?}`` records, one per line."""
    path = Path(path)
    label = str(path)
    if not path.exists():
        raise CorpusFormatError("Headline file not found", path=label)
    ids, styles, rows, texts = [], [], [], []
    for line_number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        record = _parse_line(line, line_number, label)
        for key in ("headline_id", "style", "y"):
            if key not in record:
                raise CorpusFormatError(f"Headline record is missing '{key}'", line_number, label)
        ids.append(str(record["headline_id"]))
        styles.append(str(record["style"]))
        rows.append(_numeric_list(record["y"], "Headline features", line_number, label))
        texts.append(record.get("text"))
    if not rows:
        raise CorpusFormatError("Headline file has no records", path=label)
    if len({r.size for r in rows}) > 1:
        raise CorpusFormatError("Headline feature vectors have inconsistent lengths", path=label)
    return HeadlineSet(ids, styles, np.vstack(rows), texts)


# Synthetic corpora

@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings; the true globals define the hierarchy and class structure."""

    popularity: BmhPGlobals
    kernel: BmhKGlobals
    n_items: int = 200
    cascades_per_item: float = 50.0
    follower_log_mean: float = 5.0
    follower_log_sd: float = 2.0
    max_cascade_size: int = DEFAULT_MAX_SIZE
    seed: int = 0
    source_id: str = "synthetic"

    def __post_init__(self):
        if self.n_items < 1 or self.cascades_per_item <= 0:
            raise DomainError("A synthetic corpus needs items and a positive cascade rate")
        if self.popularity.dim_y != self.kernel.dim_y or self.popularity.dim_x != self.kernel.dim_x:
            raise ModelMismatchError("Popularity and kernel truths must share feature dimensions")
        if self.popularity.dim_x not in (0, 1):
            raise ModelMismatchError("Synthetic cascade features are the log-follower count (dim_x 0 or 1)")
        if self.follower_log_sd <= 0 or self.max_cascade_size < 1:
            raise DomainError("follower_log_sd and max_cascade_size must be positive")

    @property
    def dim_y(self) -> int:
        return self.popularity.dim_y

    def to_dict(self) -> Dict[str, Any]:
        data = {k: v for k, v in asdict(self).items() if k not in ("popularity", "kernel")}
        data["popularity"] = self.popularity.to_dict()
        data["kernel"] = self.kernel.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SyntheticSpec":
        data = dict(data)
        data["popularity"] = BmhPGlobals.from_dict(data["popularity"])
        data["kernel"] = BmhKGlobals.from_dict(data["kernel"])
        return cls(**data)


def _sign_pattern(rows: int, cols: int, magnitude: float, offset: int = 0) -> np.ndarray:
    signs = np.array([[(-1.0) ** (r + c + offset) for c in range(cols)] for r in range(rows)])
    return magnitude * signs.reshape(rows, cols)


def default_popularity_truth(k: int = 2, dim_x: int = 1, dim_y: int = 2, spread: float = 0.1) -> BmhPGlobals:
    """A popularity truth with feature effects of magnitude 0.6 to 1.0."""
    p = k + (k - 1) * (1 + dim_x)
    centres = np.array([0.3]) if k == 1 else np.linspace(0.1, 0.6, k)
    return BmhPGlobals(
        delta_alpha=np.log(centres / (1 - centres)),
        delta_z_alpha=np.zeros(k - 1),
        beta_z_alpha=np.ones((k - 1, dim_x)),
        gamma_alpha=_sign_pattern(k, dim_y, 0.6),
        gamma_z_alpha=_sign_pattern(k - 1, dim_y, 0.8, offset=1),
        sigma_p_alpha=np.full(p, spread),
        omega_alpha=np.eye(p),
    )


def default_kernel_truth(k: int = 3, dim_x: int = 1, dim_y: int = 2, spread: float = 0.1) -> BmhKGlobals:
    """A kernel truth with classes spread over two orders of magnitude in d."""
    q = (k - 1) * (1 + dim_x)
    thetas = np.array([1.0]) if k == 1 else np.geomspace(0.5, 2.0, k)
    ds = np.array([300.0]) if k == 1 else np.geomspace(30.0, 3000.0, k)
    return BmhKGlobals(
        delta_theta=np.log(thetas),
        delta_d=np.log(ds),
        sigma_theta_d=np.full((k, 2), spread),
        omega_theta_d=np.tile(np.eye(2), (k, 1, 1)),
        gamma_theta=_sign_pattern(k, dim_y, 0.5),
        delta_z_theta=np.zeros(k - 1),
        beta_z_theta=np.full((k - 1, dim_x), -0.8),
        gamma_z_theta=_sign_pattern(k - 1, dim_y, 0.7),
        sigma_z_theta=np.full(q, spread),
        omega_z_theta=np.eye(q),
    )


class SyntheticSpecBuilder:
    """Fluent construction of a SyntheticSpec."""

    def __init__(self):
        self._k_alpha = 2
        self._k_theta = 3
        self._dim_x = 1
        self._dim_y = 2
        self._popularity: Optional[BmhPGlobals] = None
        self._kernel: Optional[BmhKGlobals] = None
        self._settings: Dict[str, Any] = {}

    def with_classes(self, k_alpha: int, k_theta: int) -> "SyntheticSpecBuilder":
        if k_alpha < 1 or k_theta < 1:
            raise ValueError(f"Class counts must be positive, got {k_alpha} and {k_theta}")
        self._k_alpha, self._k_theta = k_alpha, k_theta
        return self

    def with_dimensions(self, dim_x: int, dim_y: int) -> "SyntheticSpecBuilder":
        if dim_x not in (0, 1) or dim_y < 0:
            raise ValueError(f"dim_x must be 0 or 1 and dim_y non-negative, got {dim_x} and {dim_y}")
        self._dim_x, self._dim_y = dim_x, dim_y
        return self

    def with_popularity_truth(self, truth: BmhPGlobals) -> "SyntheticSpecBuilder":
        self._popularity = truth
        return self

    def with_kernel_truth(self, truth: BmhKGlobals) -> "SyntheticSpecBuilder":
        self._kernel = truth
        return self

    def with_items(self, n_items: int, cascades_per_item: float = 50.0) -> "SyntheticSpecBuilder":
        if n_items < 1 or cascades_per_item <= 0:
            raise ValueError("Item count and cascades per item must be positive")
        self._settings.update(n_items=n_items, cascades_per_item=float(cascades_per_item))
        return self

    def with_followers(self, log_mean: float, log_sd: float) -> "SyntheticSpecBuilder":
        if log_sd <= 0:
            raise ValueError(f"Follower log standard deviation must be positive, got {log_sd}")
        self._settings.update(follower_log_mean=log_mean, follower_log_sd=log_sd)
        return self

    def with_max_cascade_size(self, max_size: int) -> "SyntheticSpecBuilder":
        self._settings["max_cascade_size"] = int(max_size)
        return self

    def with_seed(self, seed: int) -> "SyntheticSpecBuilder":
        self._settings["seed"] = int(seed)
        return self

    def with_source_id(self, source_id: str) -> "SyntheticSpecBuilder":
        if not source_id:
            raise ValueError("Source id cannot be empty")
        self._settings["source_id"] = source_id
        return self

    def get_spec_info(self) -> Dict[str, Any]:
        return {
            "k_alpha": self._popularity.n_classes if self._popularity else self._k_alpha,
            "k_theta": self._kernel.n_classes if self._kernel else self._k_theta,
            "dim_x": self._dim_x,
            "dim_y": self._dim_y,
            **self._settings,
        }

    def clone(self) -> "SyntheticSpecBuilder":
        return copy.deepcopy(self)

    def build(self) -> SyntheticSpec:
        popularity = self._popularity or default_popularity_truth(self._k_alpha, self._dim_x, self._dim_y)
        kernel = self._kernel or default_kernel_truth(self._k_theta, self._dim_x, self._dim_y)
        return SyntheticSpec(popularity=popularity, kernel=kernel, **self._settings)


def _draw_mvn(rng: np.random.Generator, mean: np.ndarray, covariance: np.ndarray, n: int) -> np.ndarray:
    if mean.size == 0:
        return np.zeros((n, 0))
    chol = np.linalg.cholesky(covariance)
    return mean + rng.standard_normal((n, mean.size)) @ chol.T


def _gate(intercepts, beta, gamma_z, x, y) -> np.ndarray:
    logits = np.asarray(intercepts) + np.asarray(beta) @ x + np.asarray(gamma_z) @ y
    return softmax(np.concatenate([[0.0], logits]))


def generate_synthetic_corpus(spec: SyntheticSpec) -> Tuple[Corpus, Dict[str, Any]]:
    """Simulate a standardized corpus from the BMH generative story.

    Item blocks come from the hierarchy, each cascade draws its features,
    popularity class and kernel class, then grows as a separable Hawkes
    process. Returns the corpus and the ground-truth record.
    """
    rng = np.random.default_rng(spec.seed)
    pop, ker = spec.popularity, spec.kernel
    a, nx, ny = spec.n_items, pop.dim_x, spec.dim_y

    counts = np.maximum(1, rng.poisson(spec.cascades_per_item, size=a))
    raw_y = rng.standard_normal((a, ny))
    followers = np.floor(rng.lognormal(spec.follower_log_mean, spec.follower_log_sd, size=counts.sum())).astype(int)

    x_mean, x_std, flat_x = _moments(np.log1p(followers.astype(float))[:, None])
    y_mean, y_std, flat_y = _moments(raw_y)
    constants = Standardization(x_mean, x_std, y_mean, y_std, flat_x, flat_y)
    x_all = ((np.log1p(followers.astype(float))[:, None] - x_mean) / x_std)[:, :nx]
    y_all = (raw_y - y_mean) / y_std

    p_alpha = _draw_mvn(rng, pop.p_alpha_mean, pop.covariance(), a)
    covariances = ker.class_covariances()
    p_theta = np.stack([_draw_mvn(rng, ker.p_theta_mean[k], covariances[k], a) for k in range(ker.n_classes)], 1)
    p_z = _draw_mvn(rng, ker.p_z_mean, ker.gate_covariance(), a)

    ka, kt = pop.n_classes, ker.n_classes
    items, pop_classes, kernel_classes = [], [], []
    truncated = 0
    position = 0
    for i in range(a):
        y = y_all[i]
        alpha = np.clip(expit(p_alpha[i, :ka] + pop.gamma_alpha @ y), 1e-9, 1.0 - 1e-9)
        pop_beta = p_alpha[i, 2 * ka - 1:].reshape(ka - 1, nx)
        theta = np.exp(p_theta[i, :, 0] + ker.gamma_theta @ y)
        d = np.exp(p_theta[i, :, 1])
        ker_beta = p_z[i, kt - 1:].reshape(kt - 1, nx)
        cascades = []
        for _ in range(counts[i]):
            x = x_all[position]
            k = rng.choice(ka, p=_gate(p_alpha[i, ka:2 * ka - 1], pop_beta, pop.gamma_z_alpha, x, y))
            j = rng.choice(kt, p=_gate(p_z[i, :kt - 1], ker_beta, ker.gamma_z_theta, x, y))
            params = HawkesParams(float(alpha[k]), PowerLawKernel(float(theta[j]), float(d[j])))
            cascade = simulate_cascade(params, rng, spec.max_cascade_size)
            truncated += int(cascade.truncated)
            cascades.append(Cascade(cascade.event_times, features_x=x.copy(), followers=int(followers[position]),
                                    truncated=cascade.truncated))
            pop_classes.append(int(k))
            kernel_classes.append(int(j))
            position += 1
        items.append(Item(f"{spec.source_id}-{i:05d}", y, cascades))

    warnings = []
    fraction = truncated / position
    if fraction > TRUNCATION_WARNING_FRACTION:
        message = f"{fraction:.1%} of cascades were truncated at {spec.max_cascade_size} events"
        warnings.append(message)
        logger.warning(message)
    metadata = {"synthetic": True, "seed": spec.seed, "warnings": warnings}
    corpus = Corpus(spec.source_id, items, constants, metadata)
    truth = {
        "spec": spec.to_dict(),
        "items": {
            "item_ids": [item.item_id for item in items],
            "p_alpha": p_alpha.tolist(),
            "p_theta": p_theta.tolist(),
            "p_z": p_z.tolist(),
        },
        "classes": {"popularity": pop_classes, "kernel": kernel_classes},
        "truncated_fraction": fraction,
        "warnings": warnings,
    }
    return corpus, truth
