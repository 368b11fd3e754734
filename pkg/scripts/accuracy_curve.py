"""Held-out accuracy vs. test-time scale for the multi- and single-scale priors.

    python3 scripts/accuracy_curve.py [--cache .cache] [--out results/]

Trains the priors first if they are not cached (see train_prior.py).
Writes accuracy_curve.csv and accuracy_curve.svg.
"""

import argparse
from pathlib import Path

from deblurprior import experiments, metrics

REPO = Path(__file__).resolve().parents[1]
SCALES = (0.25, 0.35, 0.5, 0.7, 1.0)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cache", type=Path, default=REPO / ".cache")
    ap.add_argument("--out", type=Path, default=REPO / "results")
    args = ap.parse_args()

    recipe = experiments.PriorRecipe()
    train_set, heldout = experiments.prior_datasets(recipe)
    series = {}
    for multiscale, label in ((True, "multi-scale"), (False, "single-scale")):
        model, _ = experiments.cached_prior(args.cache, recipe, multiscale, train_set)
        series[label] = metrics.accuracy_curve(model, heldout, SCALES)
    args.out.mkdir(parents=True, exist_ok=True)
    rows = [(s, a, b) for (s, a), (_, b) in zip(series["multi-scale"], series["single-scale"])]
    (args.out / "accuracy_curve.csv").write_text(metrics.curve_csv(rows, ("scale", "multi_scale", "single_scale")))
    metrics.save_line_plot(args.out / "accuracy_curve.svg", series, "test-time scale", "held-out accuracy")
    for s, a, b in rows:
        print(f"scale {s:.2f}: multi-scale {a:.3f}  single-scale {b:.3f}")


if __name__ == "__main__":
    main()
