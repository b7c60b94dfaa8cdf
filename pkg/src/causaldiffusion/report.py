"""Tables and plots built from the raw result CSVs.

Everything here is a function of the CSV contents only, so reports can be
rebuilt at any time with ``cdm report``.
"""

import io
import logging

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from causaldiffusion import dataio  # noqa: E402
from causaldiffusion.metrics import METRICS  # noqa: E402

logger = logging.getLogger("causaldiffusion")

RESULT_COLUMNS = ["variant", "gamma", "seed", "config_hash", "metric", "value"]
METRIC_LABELS = {
    "rmse_median": "RMSE median (%)",
    "rmse_q025": "RMSE 2.5th pct (%)",
    "rmse_q975": "RMSE 97.5th pct (%)",
    "w1": "1-Wasserstein (%)",
}
ABLATION_VARIANTS = {
    "full": "Full CDM (baseline)",
    "steps20": "Diffusion steps = 20",
    "linear": "Linear beta schedule",
    "extra_residual": "Inclusion of a residual layer",
    "embed8": "Embedding dimension = 8",
    "simple_nn": "Simple-NN backbone",
}


def results_frame(rows):
    frame = pd.DataFrame(rows, columns=RESULT_COLUMNS)
    frame["gamma"] = frame["gamma"].astype(float)
    frame["seed"] = frame["seed"].astype(int)
    return frame.sort_values(["variant", "gamma", "seed", "metric"]).reset_index(
        drop=True
    )


def write_csv(frame, path):
    text = frame.to_csv(index=False, float_format="%.10g", lineterminator="\n")
    dataio.atomic_write(path, text.encode("utf-8"))


def read_results(path):
    return results_frame(pd.read_csv(path))


def _gamma_label(gamma):
    return f"{gamma:g}"


def markdown_table(header, rows):
    lines = [
        "| " + " | ".join(header) + " |",
        "|" + "|".join([":---"] + ["---:"] * (len(header) - 1)) + "|",
    ]
    lines.extend("| " + " | ".join(row) + " |" for row in rows)
    return "\n".join(lines) + "\n"


def mean_by(frame, columns):
    return frame.groupby(columns, sort=True)["value"].mean()


def sweep_table(frame, variant="full"):
    """Metrics as rows, confounding levels as columns, seed-averaged"""
    frame = frame[frame["variant"] == variant]
    means = mean_by(frame, ["metric", "gamma"])
    gammas = sorted(frame["gamma"].unique())
    header = ["Metric"] + [f"gamma={_gamma_label(g)}" for g in gammas]
    rows = []
    for metric in METRICS:
        if metric not in means.index.get_level_values(0):
            continue
        rows.append(
            [METRIC_LABELS[metric]]
            + [f"{means.get((metric, g), float('nan')):.2f}" for g in gammas]
        )
    return markdown_table(header, rows)


def ablation_table(frame):
    means = mean_by(frame, ["variant", "metric", "gamma"])
    gammas = sorted(frame["gamma"].unique())
    header = ["Configuration"]
    header += [f"RMSE median gamma={_gamma_label(g)}" for g in gammas]
    header += [f"W1 gamma={_gamma_label(g)}" for g in gammas]
    rows = []
    for variant, label in ABLATION_VARIANTS.items():
        if variant not in frame["variant"].values:
            continue
        row = [label]
        for metric in ("rmse_median", "w1"):
            row += [
                f"{means.get((variant, metric, g), float('nan')):.2f}" for g in gammas
            ]
        rows.append(row)
    return markdown_table(header, rows)


def seedvar_table(frame, variant="full"):
    frame = frame[frame["variant"] == variant]
    stats = frame.groupby(["metric", "gamma"], sort=True)["value"].agg(
        ["mean", "std", "count"]
    )
    header = ["Metric", "gamma", "mean", "std", "seeds"]
    rows = []
    for metric in METRICS:
        for (name, gamma), row in stats.iterrows():
            if name != metric:
                continue
            rows.append(
                [
                    METRIC_LABELS[metric],
                    _gamma_label(gamma),
                    f"{row['mean']:.4f}",
                    f"{row['std']:.4f}",
                    str(int(row["count"])),
                ]
            )
    return markdown_table(header, rows)


def _svg_bytes(figure):
    plt.rcParams["svg.hashsalt"] = "causaldiffusion"
    buffer = io.BytesIO()
    figure.savefig(buffer, format="svg", metadata={"Date": None})
    plt.close(figure)
    return buffer.getvalue()


def plot_metrics(frame, path, metrics=("rmse_median", "w1"), variant="full"):
    """Metric vs gamma line plots, one panel per metric"""
    frame = frame[frame["variant"] == variant]
    means = mean_by(frame, ["metric", "gamma"])
    figure, axes = plt.subplots(1, len(metrics), figsize=(5 * len(metrics), 4))
    if len(metrics) == 1:
        axes = [axes]
    for axis, metric in zip(axes, metrics):
        if metric not in means.index.get_level_values(0):
            continue
        series = means.loc[metric]
        axis.plot(series.index, series.values, marker="o", label="CDM")
        axis.set_xlabel("Confounding level gamma")
        axis.set_ylabel(METRIC_LABELS[metric])
        axis.legend()
    figure.tight_layout()
    dataio.atomic_write(path, _svg_bytes(figure))
    logger.info(f"Wrote plot {path}")


def plot_tails(frame, path, variant="full"):
    plot_metrics(frame, path, metrics=("rmse_q025", "rmse_q975"), variant=variant)


def write_text(path, text):
    dataio.atomic_write(path, text.encode("utf-8"))
