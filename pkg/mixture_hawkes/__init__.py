"""Feature-gated mixtures of separable Hawkes processes for cascade data."""

__version__ = "1.0.0"

import jax

jax.config.update("jax_enable_x64", True)

from .errors import (  # noqa: E402
    ConvergenceWarning,
    CorpusFormatError,
    DegenerateComponentError,
    DomainError,
    MixtureHawkesError,
    ModelMismatchError,
    NonFiniteObjectiveError,
)
from .hawkes_core import (  # noqa: E402
    Cascade,
    HawkesParams,
    PowerLawKernel,
    borel_log_likelihood,
    borel_pmf,
    kernel_half_life,
    kernel_log_likelihood,
    kernel_value,
    sample_offspring_delay,
    simulate_cascade,
)
from .mixture_dmm import (  # noqa: E402
    BorelMixture,
    DmmModel,
    EmConfig,
    KernelMixture,
    dmm_holdout_nll,
    dmm_predict_popularity,
    fit_bmm,
    fit_dmm,
    fit_joint_hawkes,
    fit_kmm,
)
from .bmh_model import (  # noqa: E402
    KernelModel,
    PopularityModel,
    PriorConfig,
    ProblemBuilder,
    Variant,
    load_model,
    save_model,
)
from .estimation import FitConfig, fit_kernel_model, fit_map, fit_popularity_model  # noqa: E402
from .data_io import (  # noqa: E402
    Corpus,
    Item,
    SyntheticSpecBuilder,
    generate_synthetic_corpus,
    load_corpus,
    save_corpus,
    source_summary,
    split_corpus,
    standardize_features,
)
from .predict_eval import (  # noqa: E402
    better_than_average_probability,
    evaluate_are,
    evaluate_nll,
    predict_items,
    predictions_frame,
)

__all__ = [
    "__version__",
    "BorelMixture",
    "Cascade",
    "ConvergenceWarning",
    "Corpus",
    "CorpusFormatError",
    "DegenerateComponentError",
    "DmmModel",
    "DomainError",
    "EmConfig",
    "FitConfig",
    "HawkesParams",
    "Item",
    "KernelMixture",
    "KernelModel",
    "MixtureHawkesError",
    "ModelMismatchError",
    "NonFiniteObjectiveError",
    "PopularityModel",
    "PowerLawKernel",
    "PriorConfig",
    "ProblemBuilder",
    "SyntheticSpecBuilder",
    "Variant",
    "better_than_average_probability",
    "borel_log_likelihood",
    "borel_pmf",
    "dmm_holdout_nll",
    "dmm_predict_popularity",
    "evaluate_are",
    "evaluate_nll",
    "fit_bmm",
    "fit_dmm",
    "fit_joint_hawkes",
    "fit_kernel_model",
    "fit_kmm",
    "fit_map",
    "fit_popularity_model",
    "generate_synthetic_corpus",
    "kernel_half_life",
    "kernel_log_likelihood",
    "kernel_value",
    "load_corpus",
    "load_model",
    "predict_items",
    "predictions_frame",
    "sample_offspring_delay",
    "save_corpus",
    "save_model",
    "simulate_cascade",
    "source_summary",
    "split_corpus",
    "standardize_features",
]
