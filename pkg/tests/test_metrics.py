"""Metric tests, mostly against brute force reimplementations"""
import numpy as np
import pytest

from causaldiffusion.metrics import (
    METRICS,
    evaluate_cells,
    quantile_levels,
    quantiles,
    rmse_from_quantile,
    wasserstein1,
)

V_MAX = 1150.3


def brute_quantile(samples, level):
    """Linear interpolation between order statistics placed at (i - 0.5) / n"""
    ordered = sorted(samples)
    n = len(ordered)
    position = level * n - 0.5
    if position <= 0:
        return ordered[0]
    if position >= n - 1:
        return ordered[-1]
    lower = int(np.floor(position))
    fraction = position - lower
    return ordered[lower] + fraction * (ordered[lower + 1] - ordered[lower])


def brute_w1(pred, truth, K_q):
    total = 0.0
    for p, t in zip(pred, truth):
        gaps = [
            abs(brute_quantile(p, (j - 0.5) / K_q) - brute_quantile(t, (j - 0.5) / K_q))
            for j in range(1, K_q + 1)
        ]
        total += sum(gaps) / K_q
    return total / len(pred) * 100 / V_MAX


def brute_rmse(pred, truth, level):
    squares = [
        (brute_quantile(p, level) - brute_quantile(t, level)) ** 2
        for p, t in zip(pred, truth)
    ]
    return np.sqrt(np.mean(squares)) * 100 / V_MAX


def random_cells(rng, cells=8, s_pred=20, s_truth=100):
    loc = rng.uniform(0, 800, size=(cells, 1))
    scale = rng.uniform(1, 50, size=(cells, 1))
    pred = loc + scale * rng.standard_normal((cells, s_pred))
    truth = loc + 5 + scale * rng.standard_normal((cells, s_truth))
    return pred, truth


def test_levels():
    np.testing.assert_allclose(quantile_levels(4), [0.125, 0.375, 0.625, 0.875])


def test_constant_samples():
    np.testing.assert_array_equal(quantiles(np.full(17, 3.25), 100), np.full(100, 3.25))


def test_quantiles_of_one_to_hundred():
    np.testing.assert_allclose(quantiles(np.arange(1, 101), 100), np.arange(1, 101))


def test_quantiles_are_sorted():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        samples = rng.standard_normal(rng.integers(1, 50)) * rng.uniform(0.1, 100)
        assert np.all(np.diff(quantiles(samples, 100)) >= 0)


def test_quantiles_match_brute_force():
    rng = np.random.default_rng(1)
    samples = rng.standard_normal(20)
    expected = [brute_quantile(samples, level) for level in quantile_levels(100)]
    np.testing.assert_allclose(quantiles(samples, 100), expected, rtol=0, atol=1e-12)


def test_quantiles_along_last_axis():
    samples = np.random.default_rng(2).standard_normal((3, 4, 25))
    result = quantiles(samples, 10)
    assert result.shape == (3, 4, 10)
    np.testing.assert_allclose(result[1, 2], quantiles(samples[1, 2], 10))


def test_quantiles_need_samples():
    with pytest.raises(ValueError):
        quantiles([], 10)
    with pytest.raises(ValueError):
        quantiles(np.zeros((3, 0)), 10)


def test_identical_samples_score_zero():
    pred, _ = random_cells(np.random.default_rng(3))
    assert wasserstein1(pred, pred, None, 100, V_MAX) == 0.0
    for level in (0.025, 0.5, 0.975):
        assert rmse_from_quantile(pred, pred, None, level, V_MAX) == 0.0


@pytest.mark.parametrize("shift", [-7.5, 3.0, 42.0])
def test_location_shift(shift):
    _, truth = random_cells(np.random.default_rng(4))
    expected = 100 * abs(shift) / V_MAX
    assert wasserstein1(truth + shift, truth, None, 100, V_MAX) == pytest.approx(
        expected, abs=1e-9
    )
    for level in (0.025, 0.5, 0.975):
        assert rmse_from_quantile(
            truth + shift, truth, None, level, V_MAX
        ) == pytest.approx(expected, abs=1e-9)


def test_metrics_match_brute_force():
    rng = np.random.default_rng(5)
    for _ in range(100):
        pred, truth = random_cells(rng, cells=int(rng.integers(1, 6)))
        mask = rng.random(len(pred)) < 0.7
        mask[0] = True
        assert wasserstein1(pred, truth, mask, 100, V_MAX) == pytest.approx(
            brute_w1(pred[mask], truth[mask], 100), rel=0, abs=1e-10
        )
        for level in (0.025, 0.5, 0.975):
            assert rmse_from_quantile(pred, truth, mask, level, V_MAX) == pytest.approx(
                brute_rmse(pred[mask], truth[mask], level), rel=0, abs=1e-10
            )


def test_w1_of_equal_size_samples_is_sorted_pairing():
    pred = np.array([[1.0, 4.0, 2.0, 8.0, 5.0]])
    truth = np.array([[3.0, 3.0, 9.0, 0.0, 6.0]])
    paired = np.mean(np.abs(np.sort(pred[0]) - np.sort(truth[0])))
    assert wasserstein1(pred, truth, None, 5, V_MAX) == pytest.approx(
        paired * 100 / V_MAX, abs=1e-12
    )


def test_raw_l1_mode():
    _, truth = random_cells(np.random.default_rng(6))
    mean_gap = wasserstein1(truth + 2.0, truth, None, 100, V_MAX)
    raw = wasserstein1(truth + 2.0, truth, None, 100, V_MAX, raw_l1=True)
    assert raw == pytest.approx(100 * mean_gap)


def test_w1_is_a_metric():
    rng = np.random.default_rng(7)
    for _ in range(200):
        a, b, c = (
            rng.uniform(0, 10, size=(1, 1)) + rng.standard_normal((1, int(n)))
            for n in rng.integers(5, 40, size=3)
        )
        ab = wasserstein1(a, b, None, 100, V_MAX)
        assert ab >= 0
        assert ab == pytest.approx(wasserstein1(b, a, None, 100, V_MAX), abs=1e-12)
        assert ab <= (
            wasserstein1(a, c, None, 100, V_MAX)
            + wasserstein1(c, b, None, 100, V_MAX)
            + 1e-9
        )


def test_scale_equivariance():
    pred, truth = random_cells(np.random.default_rng(8))
    for factor in (0.01, 3.0, 1000.0):
        scaled_vmax = V_MAX * factor
        assert wasserstein1(
            pred * factor, truth * factor, None, 100, scaled_vmax
        ) == pytest.approx(wasserstein1(pred, truth, None, 100, V_MAX))
        assert rmse_from_quantile(
            pred * factor, truth * factor, None, 0.5, scaled_vmax
        ) == pytest.approx(rmse_from_quantile(pred, truth, None, 0.5, V_MAX))


def test_zero_iff_quantiles_coincide():
    # Different samples, same quantile vectors
    pred = np.array([[1.0, 2.0, 3.0, 4.0]])
    truth = np.array([[4.0, 3.0, 2.0, 1.0]])
    assert wasserstein1(pred, truth, None, 4, V_MAX) == 0.0
    assert rmse_from_quantile(pred, truth, None, 0.5, V_MAX) == 0.0

    truth = np.array([[1.0, 2.0, 3.0, 5.0]])
    assert wasserstein1(pred, truth, None, 4, V_MAX) > 0
    # The medians still agree
    assert rmse_from_quantile(pred, truth, None, 0.5, V_MAX) == 0.0


def test_self_distance_decays_with_sample_size():
    rng = np.random.default_rng(9)
    distances = {}
    for size in (100, 1000, 10000):
        pred = rng.standard_normal((20, size)) * 50 + 500
        truth = rng.standard_normal((20, size)) * 50 + 500
        distances[size] = wasserstein1(pred, truth, None, 100, V_MAX)
    # 1 / sqrt(S): a tenfold sample size cuts the distance by about sqrt(10)
    for small, large in ((100, 1000), (1000, 10000)):
        ratio = distances[small] / distances[large]
        assert 2.0 < ratio < 5.0


def test_empty_selection():
    pred, truth = random_cells(np.random.default_rng(10), cells=3)
    with pytest.raises(ValueError):
        wasserstein1(pred, truth, np.zeros(3), 100, V_MAX)
    with pytest.raises(ValueError):
        rmse_from_quantile(pred, truth, [False, False, False], 0.5, V_MAX)


def test_misaligned_cells():
    pred, truth = random_cells(np.random.default_rng(11), cells=3)
    with pytest.raises(ValueError):
        wasserstein1(pred, truth[:2], None, 100, V_MAX)
    with pytest.raises(ValueError):
        wasserstein1(pred, truth, [True, False], 100, V_MAX)


def test_evaluate_cells():
    pred, truth = random_cells(np.random.default_rng(12))
    results = evaluate_cells(pred, truth, None, V_MAX, K_q=50)
    assert list(results) == list(METRICS)
    assert all(value >= 0 for value in results.values())
    assert results["w1"] == wasserstein1(pred, truth, None, 50, V_MAX)
    assert results["rmse_q975"] == rmse_from_quantile(pred, truth, None, 0.975, V_MAX)
