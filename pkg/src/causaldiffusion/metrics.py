"""Distribution level comparison of predicted and true counterfactuals.

Cells are rows of sample arrays: ``pred`` is (cells, S_pred) and ``truth``
is (cells, S_truth). Sample counts may differ, all comparisons go through
quantiles. Results are percentages of V_max.
"""

import logging

import numpy as np

logger = logging.getLogger("causaldiffusion")

METRICS = ("rmse_median", "rmse_q025", "rmse_q975", "w1")
LEVELS = {"rmse_median": 0.5, "rmse_q025": 0.025, "rmse_q975": 0.975}


def quantile_levels(K_q):
    return (np.arange(1, K_q + 1) - 0.5) / K_q


def quantiles(samples, K_q=100):
    """K_q quantiles at the midpoint levels (j - 0.5) / K_q.

    Piecewise linear between order statistics placed at those same
    midpoints, so with K_q equal to the sample count the quantiles are the
    sorted samples. Works along the last axis.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.size == 0 or samples.shape[-1] == 0:
        raise ValueError("Can not take quantiles of an empty sample set")
    result = np.quantile(samples, quantile_levels(K_q), axis=-1, method="hazen")
    return np.moveaxis(result, 0, -1)


def _masked(pred, truth, mask):
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    if pred.shape[0] != truth.shape[0]:
        raise ValueError(
            f"Predicted and true cells are not aligned: {pred.shape[0]} != "
            f"{truth.shape[0]}"
        )
    if mask is None:
        mask = np.ones(pred.shape[0], dtype=bool)
    mask = np.asarray(mask).astype(bool).reshape(-1)
    if mask.shape[0] != pred.shape[0]:
        raise ValueError(f"Mask has {mask.shape[0]} entries for {pred.shape[0]} cells")
    if not mask.any():
        raise ValueError("No cells selected for evaluation")
    return pred[mask], truth[mask]


def rmse_from_quantile(pred, truth, mask, level, V_max):
    pred, truth = _masked(pred, truth, mask)
    pred_q = np.quantile(pred, level, axis=-1, method="hazen")
    truth_q = np.quantile(truth, level, axis=-1, method="hazen")
    return float(np.sqrt(np.mean((pred_q - truth_q) ** 2)) * 100 / V_max)


def wasserstein1(pred, truth, mask, K_q, V_max, raw_l1=False):
    """Mean absolute quantile gap per cell, averaged over the cells.

    With ``raw_l1`` the per-cell gap is the L1 norm instead (not divided by
    K_q).
    """
    pred, truth = _masked(pred, truth, mask)
    gaps = np.abs(quantiles(pred, K_q) - quantiles(truth, K_q))
    per_cell = gaps.sum(axis=-1) if raw_l1 else gaps.mean(axis=-1)
    return float(per_cell.mean() * 100 / V_max)


def evaluate_cells(pred, truth, mask, V_max, K_q=100, raw_l1=False):
    results = {
        name: rmse_from_quantile(pred, truth, mask, level, V_max)
        for name, level in LEVELS.items()
    }
    results["w1"] = wasserstein1(pred, truth, mask, K_q, V_max, raw_l1)
    return results
