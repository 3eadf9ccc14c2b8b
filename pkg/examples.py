import tempfile
from pathlib import Path

import numpy as np

from mixture_hawkes import (
    Cascade,
    Corpus,
    EmConfig,
    HawkesParams,
    Item,
    PowerLawKernel,
    ProblemBuilder,
    borel_pmf,
    fit_bmm,
    fit_kmm,
    kernel_half_life,
    load_corpus,
    save_corpus,
    simulate_cascade,
    standardize_features,
)
from mixture_hawkes.bmh_model import CascadeArrays
from mixture_hawkes.cli import RunConfigBuilder


def print_example(name: str, build):
    print(f"\n=== {name} ===")
    try:
        result = build()
        print(result)
        return result
    except ValueError as e:
        print(f"Error: {str(e)}")
        return None


def run_examples():
    # Basic Examples
    print("\n=== Basic Examples ===")

    kernel = PowerLawKernel(theta=1.0, d=10.0)
    print("Half-life of theta=1, d=10:", kernel_half_life(kernel))
    print("Borel pmf at n=1..4, alpha=0.5:", [round(borel_pmf(n, 0.5), 4) for n in range(1, 5)])

    cascade = simulate_cascade(HawkesParams(0.7, kernel), rng_seed=3)
    print("Simulated cascade size:", cascade.size, "truncated:", cascade.truncated)

    # Mixture Examples
    print("\n=== Mixture Examples ===")

    rng = np.random.default_rng(0)
    fast = HawkesParams(0.2, PowerLawKernel(1.5, 5.0))
    slow = HawkesParams(0.6, PowerLawKernel(0.8, 500.0))
    cascades = [simulate_cascade(fast if rng.random() < 0.5 else slow, rng) for _ in range(2000)]
    config = EmConfig(restarts=2)

    borel = print_example("Borel Mixture", lambda: fit_bmm([c.size for c in cascades], 2, config).to_dict())
    print_example("Kernel Mixture Half-Lives", lambda: fit_kmm(cascades, 2, config).half_lives)
    print_example("Too Many Components", lambda: fit_bmm([1, 1, 2], 3, config))
    if borel is not None:
        print("Expected cascade size per class:", [round(1 / (1 - a), 3) for a in borel["alphas"]])

    # Corpus Examples
    print("\n=== Corpus Examples ===")

    items = [
        Item(f"item-{i}", [float(i), float(i % 2)], [Cascade([0.0, 1.0 + i], followers=10 ** (i % 4 + 1))])
        for i in range(8)
    ]
    corpus, constants = standardize_features(Corpus("wire", items))
    print_example("Standardization Constants", constants.to_dict)

    with tempfile.TemporaryDirectory() as tmp:
        path = save_corpus(corpus, Path(tmp) / "wire.jsonl")
        print("Reloaded items:", len(load_corpus(path).items))

    # Builder Examples
    print("\n=== Builder Examples ===")

    builder = (ProblemBuilder(CascadeArrays.from_corpus(corpus))
        .with_submodel("popularity")
        .with_classes(2)
        .with_variant("y_gate"))
    print_example("Problem Settings", builder.get_problem_info)
    print_example("Unconstrained Dimension", lambda: builder.build().dimension)
    print_example("Unknown Variant", lambda: builder.clone().with_variant("partial"))

    run = (RunConfigBuilder("fit")
        .with_overrides(corpus=("wire.jsonl",), variant="all", k_alpha=2, k_theta=3))
    print_example("Run Config", lambda: run.build().to_dict())
    print_example("Missing Corpus", lambda: RunConfigBuilder("fit").build())


if __name__ == "__main__":
    run_examples()
