#!/usr/bin/env python3
"""
Mixture Hawkes Demo
This script walks through the main features of the mixture_hawkes library on a
small synthetic source.
"""

import warnings

from mixture_hawkes import (
    EmConfig,
    FitConfig,
    SyntheticSpecBuilder,
    dmm_predict_popularity,
    fit_dmm,
    fit_popularity_model,
    generate_synthetic_corpus,
    predict_items,
    predictions_frame,
    source_summary,
    split_corpus,
)
from mixture_hawkes.errors import ConvergenceWarning


def print_demo(name, value):
    """Print a demo result with its name."""
    print(f"\n=== {name} ===")
    print(value)


def run_demo():
    """Run the mixture_hawkes demonstration."""
    print("Mixture Hawkes Demonstration")
    print("============================")

    spec = (SyntheticSpecBuilder()
        .with_classes(2, 2)
        .with_items(40, 20.0)
        .with_seed(7)
        .with_source_id("demo")
        .build())
    corpus, truth = generate_synthetic_corpus(spec)
    print_demo("Synthetic Corpus", f"{len(corpus.items)} items, {corpus.n_cascades} cascades")

    train, test = split_corpus(corpus, 0.25, seed=7)
    summary = source_summary(train)
    print_demo("Mean Cascades per Item", f"{summary.mean_cascade_count:.2f}")

    # Feature-free baseline
    em_config = EmConfig(restarts=1)
    dmm = fit_dmm(train.cascades(), 2, 2, em_config)
    print_demo("Borel Mixture", dmm.borel.to_dict())
    print_demo("Kernel Half-Lives", dmm.kernel.half_lives)
    print_demo("Baseline Item Popularity", f"{dmm_predict_popularity(dmm, summary.mean_cascade_count):.2f}")

    # Feature-gated popularity model
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        model, report, _ = fit_popularity_model(
            train, 2, "full", fit_config=FitConfig(max_iterations=300), dmm=dmm.borel
        )
    print_demo("MAP Fit", f"objective {report.final_objective:.3f} after {report.iterations} iterations")

    frame = predictions_frame(predict_items(test.items, summary, model))
    frame["observed"] = [sum(c.size for c in item.cascades) for item in test.items]
    print_demo("Cold-Start Predictions", frame[["item_id", "popularity", "observed"]].head(10))


if __name__ == "__main__":
    run_demo()
