"""Train (or load from cache) the multi-scale and single-scale classifiers.

    python3 scripts/train_prior.py [--cache .cache]

Prints held-out accuracy at native scale and at 0.25x for both models.
"""

import argparse
import logging
from pathlib import Path

from deblurprior import classifier, experiments

REPO = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cache", type=Path, default=REPO / ".cache")
    ap.add_argument("--epochs", type=int, default=experiments.PriorRecipe.epochs)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    recipe = experiments.PriorRecipe(epochs=args.epochs)
    train_set, heldout = experiments.prior_datasets(recipe)
    for multiscale in (True, False):
        model, info = experiments.cached_prior(args.cache, recipe, multiscale, train_set)
        name = "multi-scale" if multiscale else "single-scale"
        native = classifier.evaluate_accuracy(model, heldout, 1.0)
        quarter = classifier.evaluate_accuracy(model, heldout, 0.25)
        print(f"{name}: held-out acc {native:.3f}, at 0.25x {quarter:.3f}, trained in {info['seconds'] / 60:.1f} min")


if __name__ == "__main__":
    main()
