"""Desk-scale experiment recipes shared by scripts/ and the acceptance tests.

Everything here is seeded: the same recipe always yields the same datasets,
weights and benchmark suite.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import classifier, metrics, solver, synth

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PriorRecipe:
    """Classifier training at desk scale (reference scale: 500 sources, 200 kernels,
    100k samples, 200 px crops)."""

    n_sources: int = 50
    source_size: int = 192
    crop: int = 96
    n_kernels: int = 40
    n_samples: int = 2000
    heldout_sources: int = 25
    heldout_kernels: int = 20
    heldout_samples: int = 400
    noise_sigma: float = 0.01
    epochs: int = 60
    lr: float = 1e-2
    patch: int = 48
    min_scale: float = 0.25
    seed: int = 0

    def key(self, multiscale):
        blob = json.dumps({**dataclasses.asdict(self), "multiscale": multiscale}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def train_config(self, multiscale=True):
        return classifier.TrainConfig(
            lr=self.lr,
            patch=self.patch,
            rescale_range=(self.min_scale if multiscale else 1.0, 1.0),
            lr_decay_every=max(1, int(0.6 * self.epochs)),
        )


def _dataset(n_sources, n_kernels, n_samples, recipe, rng):
    clear = [synth.procedural_scene(recipe.source_size, rng) for _ in range(n_sources)]
    cfg = synth.SynthConfig(noise_sigma=recipe.noise_sigma, sample_size=recipe.crop)
    return synth.generate_dataset(clear, n_kernels, n_samples, cfg, rng)


def prior_datasets(recipe=PriorRecipe()):
    """(training set, held-out set); the held-out set has its own scenes and kernels."""
    train_rng = np.random.default_rng([recipe.seed, 0])
    test_rng = np.random.default_rng([recipe.seed, 1])
    train = _dataset(recipe.n_sources, recipe.n_kernels, recipe.n_samples, recipe, train_rng)
    heldout = _dataset(recipe.heldout_sources, recipe.heldout_kernels, recipe.heldout_samples, recipe, test_rng)
    return train, heldout


def train_prior(recipe=PriorRecipe(), multiscale=True, train_set=None, val_set=None, callback=None):
    """Train one classifier; returns (model, history, seconds)."""
    if train_set is None:
        train_set, _ = prior_datasets(recipe)
    model = classifier.build_model(recipe.seed)
    t0 = time.perf_counter()
    result = classifier.train(model, train_set, recipe.train_config(multiscale), recipe.epochs,
                              seed=recipe.seed, val_set=val_set, callback=callback)
    return model, result.history, time.perf_counter() - t0


def cached_prior(cache_dir, recipe=PriorRecipe(), multiscale=True, train_set=None, val_set=None):
    """Load the model for ``recipe`` from ``cache_dir`` or train and store it.

    Returns (model, info) where info holds the training history and wall time
    of the run that produced the weights.
    """
    cache_dir = Path(cache_dir)
    stem = cache_dir / f"prior-{'ms' if multiscale else 'ss'}-{recipe.key(multiscale)}"
    weights, meta = stem.with_suffix(".bin"), stem.with_suffix(".json")
    if weights.is_file() and meta.is_file():
        return classifier.Model.load(weights), json.loads(meta.read_text())
    model, history, seconds = train_prior(recipe, multiscale, train_set, val_set)
    cache_dir.mkdir(parents=True, exist_ok=True)
    model.save(weights)
    info = {"seconds": seconds, "history": history, "recipe": dataclasses.asdict(recipe), "multiscale": multiscale}
    meta.write_text(json.dumps(info, indent=1))
    return model, info


# --- deblurring benchmark ---------------------------------------------------------


@dataclass(frozen=True)
class SuiteRecipe:
    n_images: int = 10
    size: int = 128
    kernel_size: int = 13
    noise_sigma: float = 0.01
    seed: int = 0


def deblur_suite(recipe=SuiteRecipe()):
    """[(clear, true kernel, blurred)] for the end-to-end benchmark."""
    rng = np.random.default_rng(recipe.seed)
    out = []
    for _ in range(recipe.n_images):
        clear = synth.procedural_scene(recipe.size, rng)
        k = synth.random_trajectory_kernel(recipe.kernel_size, rng)
        out.append((clear, k, synth.blur_image(clear, k, recipe.noise_sigma, rng)))
    return out


@dataclass
class SuiteResult:
    rows: list
    diagnostics: list
    seconds: float

    @property
    def gains(self):
        return [r["psnr_restored"] - r["psnr_blurred"] for r in self.rows]

    @property
    def similarities(self):
        return [r["kernel_similarity"] for r in self.rows]

    def energy_steps(self):
        """(non-increasing, total) outer-iteration transitions at the finest level."""
        good = total = 0
        for d in self.diagnostics:
            e = d.finest_energies()
            good += sum(b <= a for a, b in zip(e[:-1], e[1:]))
            total += max(0, len(e) - 1)
        return good, total

    def surrogate(self):
        """(inner iterations checked, violations)."""
        return sum(d.surrogate_checks for d in self.diagnostics), sum(len(d.surrogate_violations) for d in self.diagnostics)


def run_suite(suite, model, cfg, track_surrogate=False):
    rows, diags = [], []
    t0 = time.perf_counter()
    for i, (clear, k_true, blurred) in enumerate(suite):
        restored, k, diag = solver.blind_deblur(blurred, model, cfg, track_surrogate=track_surrogate)
        border = k_true.shape[0] // 2
        rows.append({
            "image": i,
            "psnr_blurred": metrics.psnr(clear, blurred, border),
            "psnr_restored": metrics.psnr(clear, restored, border),
            "kernel_similarity": metrics.kernel_similarity(k_true, k),
        })
        diags.append(diag)
        log.info("suite image %d: %s", i, rows[-1])
    return SuiteResult(rows, diags, time.perf_counter() - t0)
