import csv
import io
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deblurprior import classifier, metrics, synth

seeds = st.integers(0, 2**32 - 1)


def delta(size):
    k = np.zeros((size, size))
    k[size // 2, size // 2] = 1
    return k


def loop_similarity(k1, k2):
    """Brute force over every integer shift of k2 against k1."""
    best = 0.0
    h1, w1 = k1.shape
    h2, w2 = k2.shape
    for dy in range(-h2 + 1, h1):
        for dx in range(-w2 + 1, w1):
            acc = 0.0
            for i in range(h2):
                for j in range(w2):
                    y, x = i + dy, j + dx
                    if 0 <= y < h1 and 0 <= x < w1:
                        acc += k1[y, x] * k2[i, j]
            best = max(best, acc)
    return best / (np.linalg.norm(k1) * np.linalg.norm(k2))


def test_psnr_examples():
    a = np.random.default_rng(0).random((8, 8))
    assert metrics.psnr(a, a) == 99.0
    assert metrics.psnr(np.zeros((4, 4)), np.ones((4, 4))) == 0.0
    b = np.zeros((10, 10))
    c = np.full((10, 10), 0.1)  # MSE 0.01
    assert metrics.psnr(b, c) == pytest.approx(20.0)


def test_psnr_border_and_errors():
    a = np.zeros((10, 10))
    b = a.copy()
    b[0, :] = 1  # only the excluded border differs
    assert metrics.psnr(a, b, border=1) == 99.0
    assert metrics.psnr(a, b) < 99.0
    with pytest.raises(ValueError, match="shapes"):
        metrics.psnr(np.zeros((3, 3)), np.zeros((3, 4)))


@given(seeds)
@settings(max_examples=30, deadline=None)
def test_psnr_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 12, 12))
    p = metrics.psnr(a, b)
    assert p == metrics.psnr(b, a)
    assert 0 <= p <= 99


def test_similarity_examples():
    k = synth.random_trajectory_kernel(9, np.random.default_rng(0))
    assert metrics.kernel_similarity(k, k) == pytest.approx(1.0)
    shifted = np.zeros((7, 7))
    shifted[1, 5] = 1
    assert metrics.kernel_similarity(delta(7), shifted) == pytest.approx(1.0)
    box = np.full((5, 5), 1 / 25)
    # 0.04 * 1 / (1 * 0.2)
    assert metrics.kernel_similarity(delta(5), box) == pytest.approx(0.2)


def test_similarity_different_sizes_and_zero():
    assert metrics.kernel_similarity(delta(3), delta(11)) == pytest.approx(1.0)
    assert metrics.kernel_similarity(np.zeros((3, 3)), delta(3)) == 0.0


@given(seeds, st.sampled_from([3, 5, 7]), st.sampled_from([3, 5]))
@settings(max_examples=15, deadline=None)
def test_similarity_matches_loop_oracle(seed, a, b):
    rng = np.random.default_rng(seed)
    k1, k2 = rng.random((a, a)), rng.random((b, b))
    k1[rng.random((a, a)) < 0.5] = 0
    k1[a // 2, a // 2] += 0.1
    k1, k2 = k1 / k1.sum(), k2 / k2.sum()
    assert metrics.kernel_similarity(k1, k2) == pytest.approx(loop_similarity(k1, k2), rel=1e-9)


@given(seeds, st.integers(-3, 3), st.integers(-3, 3))
@settings(max_examples=30, deadline=None)
def test_similarity_symmetric_translation_invariant_bounded(seed, dy, dx):
    rng = np.random.default_rng(seed)
    k1 = synth.random_trajectory_kernel(7, rng)
    k2 = synth.random_trajectory_kernel(7, rng)
    s = metrics.kernel_similarity(k1, k2)
    assert s == pytest.approx(metrics.kernel_similarity(k2, k1), abs=1e-12)
    assert 0 <= s <= 1
    padded = np.zeros((15, 15))
    padded[4 + dy:11 + dy, 4 + dx:11 + dx] = k2
    assert metrics.kernel_similarity(k1, padded) == pytest.approx(s, abs=1e-12)


def test_error_ratio_examples():
    rng = np.random.default_rng(0)
    gt, x = rng.random((2, 16, 16))
    assert metrics.error_ratio(x, x, gt) == 1.0
    assert metrics.error_ratio(x, gt + 0.5 * (x - gt), gt) == pytest.approx(4.0)


@given(seeds)
@settings(max_examples=20, deadline=None)
def test_error_ratio_self_is_exactly_one(seed):
    rng = np.random.default_rng(seed)
    gt, x = rng.random((2, 9, 9))
    assert metrics.error_ratio(x, x, gt) == 1.0


def test_error_ratio_zero_denominator_flagged():
    rng = np.random.default_rng(1)
    gt, x = rng.random((2, 8, 8))
    with pytest.warns(RuntimeWarning):
        assert metrics.error_ratio(x, gt, gt) == metrics.ERROR_RATIO_CAP
    with pytest.warns(RuntimeWarning):
        assert metrics.error_ratio(gt, gt, gt) == 1.0


def test_ssd():
    assert metrics.ssd(np.zeros(4), np.full(4, 0.5)) == 1.0


def _toy(n, size, seed):
    rng = np.random.default_rng(seed)
    box = np.full((5, 5), 1 / 25)
    out = []
    for _ in range(n):
        img = synth.procedural_scene(size, rng)
        out += [synth.Sample(img, 0), synth.Sample(synth.blur_image(img, box), 1)]
    return out


def test_accuracy_curve_sorted_and_consistent():
    m = classifier.build_model(0)
    data = _toy(3, 64, 0)
    curve = metrics.accuracy_curve(m, data, [1.0, 0.25, 0.5])
    assert [s for s, _ in curve] == [0.25, 0.5, 1.0]
    assert curve[-1][1] == classifier.evaluate_accuracy(m, data, 1.0)
    assert metrics.accuracy_curve(m, data, [1.0, 0.25, 0.5]) == curve


def test_curve_csv_round_trip():
    text = metrics.curve_csv([(0.25, 0.5), (1.0, 0.75)])
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["scale", "accuracy"]
    assert [tuple(map(float, r)) for r in rows[1:]] == [(0.25, 0.5), (1.0, 0.75)]


def test_save_line_plot(tmp_path):
    path = tmp_path / "plot.svg"
    metrics.save_line_plot(path, {"a": [(0, 1), (1, 2)], "b": [(0, 2), (1, 1)]}, "x", "y", "t")
    text = path.read_text()
    assert text.lstrip().startswith("<?xml") and "<svg" in text


def test_eval_report_aggregates_are_row_means():
    rep = metrics.EvalReport()
    rep.add(name="a", psnr_blurred=20.0, psnr_restored=24.0, kernel_similarity=0.5, flag="")
    rep.add(name="b", psnr_blurred=22.0, psnr_restored=30.0, kernel_similarity=0.9, error_ratio=float("nan"), flag="no_clear")
    assert len(rep.rows) == 2
    agg = rep.aggregates()
    assert agg["psnr_blurred"] == 21.0 and agg["psnr_restored"] == 27.0
    assert agg["kernel_similarity"] == pytest.approx(0.7)
    assert math.isnan(agg["error_ratio"])
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert rows[0] == list(metrics.EVAL_COLUMNS)
    assert rows[-1][0] == "mean" and float(rows[-1][1]) == 21.0
    assert rows[2][-1] == "no_clear"


def test_blurred_input_error_ratio_above_one():
    from deblurprior import solver

    rng = np.random.default_rng(2)
    I = synth.procedural_scene(96, rng)
    k = synth.random_trajectory_kernel(13, rng)
    B = synth.blur_image(I, k, 0.01, rng)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert metrics.error_ratio(B, solver.final_restore(B, k), I) > 1
