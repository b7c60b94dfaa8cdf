from __future__ import annotations

import argparse
import copy
import dataclasses
import logging
import os
import sys
import time
import traceback
from importlib import metadata
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from joblib import Parallel, delayed

from causaldiffusion import dataio, report
from causaldiffusion.config import (
    ConfigurationError,
    ExperimentConfig,
    config_hash,
    desk_scale,
    from_dict,
    load_config,
    paper_scale,
    save_config,
    to_dict,
)
from causaldiffusion.dataio import FormatError
from causaldiffusion.denoiser import Denoiser
from causaldiffusion.diffusion import (
    TrainState,
    make_schedule,
    sample_reverse,
    train,
)
from causaldiffusion.metrics import evaluate_cells
from causaldiffusion.simulator import CHOICES, cohort_counterfactuals, simulate_cohort

try:
    __version__ = metadata.version("causaldiffusion")
except metadata.PackageNotFoundError:
    __version__ = "unknown"
logger = logging.getLogger("causaldiffusion")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_IO = 3

SPLITS = ("train", "val", "test")
DEFAULT_STUDY_GAMMAS = [0.0, 5.0, 10.0]
ABLATIONS = ("full", "steps20", "linear", "extra_residual", "embed8", "simple_nn")
REPORT_FILES = ("report.md", "metrics.svg", "tails.svg")
CHECKPOINT_NAME = "checkpoint.pt"


def point_name(gamma, seed):
    return f"gamma_{gamma:g}_seed_{seed}"


def worker_count():
    value = os.environ.get("CDM_THREADS")
    if value is None:
        return 1
    try:
        count = int(value)
    except ValueError:
        raise ConfigurationError(f"CDM_THREADS must be an integer, got {value!r}")
    if count < 1:
        raise ConfigurationError(f"CDM_THREADS must be >= 1, got {count}")
    return count


def variant_config(config, variant):
    """The experiment configuration of one ablation row"""
    config = copy.deepcopy(config)
    if variant == "full":
        pass
    elif variant == "steps20":
        config.diffusion.steps = 20
    elif variant == "linear":
        config.diffusion.kind = "linear"
    elif variant == "extra_residual":
        config.model.residual_layers += 1
    elif variant == "embed8":
        config.model.embed_dim = 8
    elif variant == "simple_nn":
        config.model.backbone = "mlp"
    else:
        raise ConfigurationError(f"Unknown ablation variant {variant!r}")
    config.validate()
    return config


def build_model(config):
    model_config = dataclasses.replace(
        config.model,
        diffusion_steps=config.diffusion.steps,
        max_len=max(config.model.max_len, config.sim.T),
    )
    return Denoiser(model_config)


def cmd_simulate(config, data_dir, gamma, seed):
    """Train/val/test cohorts and the test counterfactual cells"""
    sim = config.sim.with_gamma(gamma)
    sim.validate()
    data_dir = Path(data_dir)
    sizes = dataclasses.asdict(config.cohort)

    cohorts = {}
    for index, split in enumerate(SPLITS):
        patients, trajectories = simulate_cohort(sizes[split], sim, seed=[seed, index])
        dataio.write_cohort(data_dir, split, patients, trajectories, sim.T)
        cohorts[split] = (patients, trajectories)

    patients, trajectories = cohorts["test"]
    cells = cohort_counterfactuals(
        patients,
        trajectories,
        sim,
        config.eval.truth_samples,
        seed=[seed, len(SPLITS)],
    )
    dataio.write_tensor(data_dir / "test_counterfactuals.cdt", cells)
    n_cells = int(np.isfinite(cells[..., 0]).sum())
    logger.info(f"Wrote {n_cells} counterfactual cells for {len(patients)} patients.")

    manifest = dataio.DatasetManifest(
        sizes=sizes,
        T=sim.T,
        V_max=sim.V_max,
        gamma=gamma,
        sim_config_hash=config_hash(sim),
        seed=seed,
        sim=to_dict(sim),
        truth_samples=config.eval.truth_samples,
    )
    dataio.write_manifest(data_dir / "manifest.json", manifest)
    return data_dir


def dataset_mismatch(config, manifest, gamma, seed):
    """Name the first manifest field that disagrees with the config, or None"""
    expected = {
        "sim_config_hash": config_hash(config.sim.with_gamma(gamma)),
        "sizes": dataclasses.asdict(config.cohort),
        "truth_samples": config.eval.truth_samples,
        "seed": seed,
    }
    for name, value in expected.items():
        if getattr(manifest, name) != value:
            return name
    return None


def ensure_data(config, data_dir, gamma, seed):
    """Simulate into data_dir unless it already holds this exact dataset"""
    data_dir = Path(data_dir)
    path = data_dir / "manifest.json"
    if path.exists():
        try:
            manifest = dataio.read_manifest(path)
        except FormatError as e:
            logger.warning(f"Regenerating {data_dir}: {e}")
        else:
            mismatch = dataset_mismatch(config, manifest, gamma, seed)
            if mismatch is None:
                return data_dir
            logger.info(f"Regenerating {data_dir}, {mismatch} does not match.")
    return cmd_simulate(config, data_dir, gamma, seed)


def load_split(data_dir, split, manifest):
    patients, trajectories = dataio.read_cohort(data_dir, split)
    return dataio.assemble_training_tensor(
        patients, trajectories, manifest.V_max, manifest.T
    )


def cmd_train(config, data_dir, model_dir, seed, resume=False):
    """Train a denoiser on a simulated dataset, one checkpoint per epoch"""
    data_dir = Path(data_dir)
    model_dir = Path(model_dir)
    manifest = dataio.read_manifest(data_dir / "manifest.json")
    train_set = load_split(data_dir, "train", manifest)
    val_set = load_split(data_dir, "val", manifest)

    torch.manual_seed(seed)
    model = build_model(config)
    sched = make_schedule(config.diffusion.kind, config.diffusion.steps)
    generator = torch.Generator().manual_seed(seed)
    checkpoint = model_dir / CHECKPOINT_NAME
    config_data = to_dict(config)

    state = None
    if resume and checkpoint.exists():
        payload = dataio.load_checkpoint(checkpoint)
        state = TrainState(
            epoch=payload["epoch"],
            history=payload["history"],
            model_state=payload["model_state"],
            optimizer_state=payload["optimizer_state"],
            scheduler_state=payload["scheduler_state"],
            generator_state=payload["generator_state"],
            torch_rng_state=payload["torch_rng_state"],
        )

    def on_epoch(train_state):
        dataio.save_checkpoint(checkpoint, config_data, train_state)

    _, history = train(
        model,
        train_set,
        val_set,
        sched,
        config.train,
        generator,
        resume=state,
        on_epoch=on_epoch,
    )
    losses = pd.DataFrame(history, columns=["epoch", "train_loss", "val_loss", "lr"])
    report.write_csv(losses, model_dir / "losses.csv")
    logger.info(f"Saved checkpoint to {checkpoint}")
    return checkpoint, history


def load_model(checkpoint):
    payload = dataio.load_checkpoint(checkpoint)
    trained = from_dict(ExperimentConfig, payload["config"])
    model = build_model(trained)
    model.load_state_dict(payload["model_state"])
    model.eval()
    sched = make_schedule(trained.diffusion.kind, trained.diffusion.steps)
    return model, sched, trained


def missing_cells(trajectories, truth):
    gaps = []
    for i, traj in enumerate(trajectories):
        for t in range(traj.active_len - 1):
            for c, choice in enumerate(CHOICES):
                if not np.all(np.isfinite(truth[i, t, c])):
                    gaps.append(f"patient {i} step {t} {choice}")
    return gaps


def predict_cells(model, sched, patients, trajectories, V_max, eval_config, seed):
    """Model samples of every counterfactual cell, aligned with the truth
    array. Returns (cell index tuples, samples in volume units)."""
    generator = torch.Generator().manual_seed(seed)
    index = []
    samples = []
    T = max(traj.active_len for traj in trajectories)
    for t in range(T - 1):
        cells = [
            (i, t, c)
            for i, traj in enumerate(trajectories)
            if t < traj.active_len - 1
            for c in range(len(CHOICES))
        ]
        for start in range(0, len(cells), eval_config.batch_cells):
            chunk = cells[start : start + eval_config.batch_cells]
            batch = dataio.stack_batches(
                [
                    dataio.assemble_eval_tensor(
                        trajectories[i], patients[i], t, CHOICES[c], V_max
                    )
                    for i, t, c in chunk
                ]
            )
            draws = sample_reverse(
                model, batch, sched, eval_config.model_samples, generator
            )
            volume = draws[:, :, t + 1, dataio.VOLUME].T.numpy()
            samples.append(np.clip(dataio.denormalize_volume(volume, V_max), 0, V_max))
            index.extend(chunk)
        logger.debug(f"Sampled step {t}, {len(cells)} cells")
    return index, np.concatenate(samples)


def cmd_evaluate(config, checkpoint, data_dir, seed, variant="full", out=None):
    """Sample every counterfactual cell and score it against the truth"""
    data_dir = Path(data_dir)
    manifest = dataio.read_manifest(data_dir / "manifest.json")
    patients, trajectories = dataio.read_cohort(data_dir, "test")
    truth = dataio.read_tensor(data_dir / "test_counterfactuals.cdt").astype(float)

    gaps = missing_cells(trajectories, truth)
    if gaps:
        raise dataio.CorruptionError(
            f"{len(gaps)} counterfactual cells are missing: " + ", ".join(gaps[:20])
        )

    model, sched, _ = load_model(checkpoint)
    index, pred = predict_cells(
        model, sched, patients, trajectories, manifest.V_max, config.eval, seed
    )
    truth_cells = np.stack([truth[i, t, c] for i, t, c in index])
    values = evaluate_cells(
        pred,
        truth_cells,
        None,
        manifest.V_max,
        K_q=config.eval.quantiles,
        raw_l1=config.eval.raw_l1,
    )
    rows = [
        (variant, manifest.gamma, seed, manifest.sim_config_hash, metric, value)
        for metric, value in values.items()
    ]
    for metric, value in values.items():
        logger.info(f"gamma={manifest.gamma:g} seed={seed} {metric}={value:.4f}%")
    if out is not None:
        report.write_csv(report.results_frame(rows), out)
    return rows


def run_point(config, out, gamma, seed, variant, threads):
    """simulate -> train -> evaluate for one (variant, gamma, seed)"""
    if threads > 1:
        torch.set_num_threads(1)
    out = Path(out)
    data_dir = out / "data" / point_name(gamma, seed)
    point_dir = out / variant / point_name(gamma, seed)
    timings = []

    started = time.perf_counter()
    ensure_data(config, data_dir, gamma, seed)
    timings.append(("simulate", time.perf_counter() - started))

    started = time.perf_counter()
    checkpoint, _ = cmd_train(config, data_dir, point_dir, seed)
    timings.append(("train", time.perf_counter() - started))

    started = time.perf_counter()
    rows = cmd_evaluate(
        config, checkpoint, data_dir, seed, variant, point_dir / "results.csv"
    )
    timings.append(("evaluate", time.perf_counter() - started))
    return rows, [(variant, gamma, seed, stage, t) for stage, t in timings]


def guarded_point(config, out, gamma, seed, variant, threads):
    """run_point that hands back the traceback instead of raising"""
    try:
        rows, timings = run_point(
            variant_config(config, variant), out, gamma, seed, variant, threads
        )
    except Exception:
        return None, None, traceback.format_exc()
    return rows, timings, None


def run_points(config, out, points):
    """Run (variant, gamma, seed) points in worker processes.

    A failing point is logged and listed, the others continue. Only this
    process writes the combined outputs.
    """
    threads = min(worker_count(), len(points))
    par = Parallel(n_jobs=threads, backend="loky")
    results = par(
        delayed(guarded_point)(config, out, gamma, seed, variant, threads)
        for variant, gamma, seed in points
    )

    rows = []
    timings = []
    failures = []
    for (variant, gamma, seed), (point_rows, point_timings, error) in zip(
        points, results
    ):
        if error is not None:
            logger.error(f"Point {variant} {point_name(gamma, seed)} failed:\n{error}")
            failures.append((variant, gamma, seed, error))
            continue
        rows.extend(point_rows)
        timings.extend(point_timings)

    out = Path(out)
    report.write_csv(report.results_frame(rows), out / "results.csv")
    timing_frame = pd.DataFrame(
        timings, columns=["variant", "gamma", "seed", "stage", "seconds"]
    )
    report.write_csv(timing_frame, out / "timings.csv")
    if failures:
        text = "".join(
            f"{variant} {point_name(gamma, seed)}\n{error}\n"
            for variant, gamma, seed, error in failures
        )
        report.write_text(out / "failures.txt", text)
        logger.error(f"{len(failures)} of {len(points)} points failed.")
    elif (out / "failures.txt").exists():
        (out / "failures.txt").unlink()
    return rows, failures


def prepare_data(config, out, gammas, seeds):
    """Simulate shared datasets up front so variants can reuse them"""
    for gamma in gammas:
        for seed in seeds:
            data_dir = Path(out) / "data" / point_name(gamma, seed)
            ensure_data(config, data_dir, gamma, seed)


def finish_points(out, rows):
    """Report on the results, or clear an earlier report if there are none"""
    out = Path(out)
    if rows:
        return cmd_report(out)
    for name in REPORT_FILES:
        if (out / name).exists():
            (out / name).unlink()
    logger.error("No point produced results, no report written.")
    return None


def cmd_sweep(config):
    config.validate()
    points = [("full", gamma, seed) for gamma in config.gammas for seed in config.seeds]
    prepare_data(config, config.out, config.gammas, config.seeds)
    rows, failures = run_points(config, config.out, points)
    finish_points(config.out, rows)
    return failures


def cmd_ablate(config):
    config.validate()
    for variant in ABLATIONS:
        variant_config(config, variant)
    points = [
        (variant, gamma, seed)
        for variant in ABLATIONS
        for gamma in config.gammas
        for seed in config.seeds
    ]
    prepare_data(config, config.out, config.gammas, config.seeds)
    rows, failures = run_points(config, config.out, points)
    finish_points(config.out, rows)
    return failures


def cmd_seedvar(config):
    config.validate()
    if len(config.seeds) < 2:
        raise ConfigurationError("Seed variability needs at least two seeds")
    return cmd_sweep(config)


def cmd_tune(config):
    """Grid over learning rate and embedding size, lowest final val loss wins"""
    config.validate()
    if not config.tune.lr0 or not config.tune.embed_dim:
        raise ConfigurationError("The tuning grid can not be empty")
    gamma = config.gammas[0]
    seed = config.seeds[0]
    out = Path(config.out)
    data_dir = out / "data" / point_name(gamma, seed)
    prepare_data(config, out, [gamma], [seed])

    rows = []
    for lr0 in config.tune.lr0:
        for embed_dim in config.tune.embed_dim:
            candidate = copy.deepcopy(config)
            candidate.train.lr0 = lr0
            candidate.model.embed_dim = embed_dim
            candidate.validate()
            model_dir = out / "tune" / f"lr_{lr0:g}_embed_{embed_dim}"
            _, history = cmd_train(candidate, data_dir, model_dir, seed)
            rows.append((lr0, embed_dim, history[-1]["val_loss"]))

    frame = pd.DataFrame(rows, columns=["lr0", "embed_dim", "val_loss"])
    report.write_csv(frame, out / "tuning.csv")
    best = frame.loc[frame["val_loss"].idxmin()]
    selected = copy.deepcopy(config)
    selected.train.lr0 = float(best["lr0"])
    selected.model.embed_dim = int(best["embed_dim"])
    save_config(selected, out / "tuned_config.json")
    logger.info(
        f"Selected lr0={best['lr0']:g} embed_dim={int(best['embed_dim'])} "
        f"(val loss {best['val_loss']:.6f})"
    )
    return selected


def cmd_report(out):
    """Rebuild tables and plots from the combined results CSV"""
    out = Path(out)
    frame = report.read_results(out / "results.csv")
    if frame.empty:
        raise ValueError(f"{out / 'results.csv'} holds no results")
    sections = ["# Counterfactual distribution accuracy\n", report.sweep_table(frame)]
    if frame["variant"].nunique() > 1:
        sections += ["\n# Ablation\n", report.ablation_table(frame)]
    if frame["seed"].nunique() > 1:
        sections += ["\n# Seed variability\n", report.seedvar_table(frame)]
    report.write_text(out / "report.md", "\n".join(sections))
    report.plot_metrics(frame, out / "metrics.svg")
    report.plot_tails(frame, out / "tails.svg")
    return out / "report.md"


def parse_list(text, kind):
    try:
        return [kind(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"Not a comma separated list: {text!r}")


def make_parser():
    parser = argparse.ArgumentParser("cdm")
    parser.add_argument(
        "-v",
        "--version",
        action="version",
        help="Display version and exit.",
        version=f"{parser.prog} {__version__}",
    )
    parser.add_argument(
        "--verbose",
        action="store_true",
        dest="verbose",
        help="Increase informational output to stderr.",
    )
    parser.add_argument(
        "--quiet",
        action="store_true",
        dest="quiet",
        help="Decrease informational output to stderr.",
    )
    parser.add_argument(
        "command",
        choices=[
            "simulate",
            "train",
            "evaluate",
            "sweep",
            "ablate",
            "seedvar",
            "tune",
            "report",
        ],
        help="The pipeline step to run",
    )
    parser.add_argument("--config", default=None, help="A JSON experiment configuration")
    parser.add_argument("--out", default=None, help="The output directory")
    parser.add_argument(
        "--seed",
        default=None,
        type=lambda text: parse_list(text, int),
        help="Random seed, or a comma separated list of seeds",
    )
    parser.add_argument(
        "--gamma",
        default=None,
        type=lambda text: parse_list(text, float),
        help="Comma separated list of confounding levels",
    )
    scale = parser.add_mutually_exclusive_group()
    scale.add_argument(
        "--desk-scale",
        action="store_true",
        help="1,000/200/200 patients with 30 time steps",
    )
    scale.add_argument(
        "--paper-scale",
        action="store_true",
        help="10,000/1,000/1,000 patients with 60 time steps",
    )
    parser.add_argument(
        "--data", default=None, help="A simulated dataset directory (train, evaluate)"
    )
    parser.add_argument(
        "--checkpoint", default=None, help="A model checkpoint (evaluate)"
    )
    parser.add_argument(
        "--resume",
        action="store_true",
        help="Continue training from the checkpoint in the output directory",
    )
    return parser


def build_config(args):
    config = load_config(args.config) if args.config else ExperimentConfig()
    if args.desk_scale:
        config = desk_scale(config)
    elif args.paper_scale:
        config = paper_scale(config)
    if args.gamma is not None:
        config.gammas = args.gamma
    elif args.command in ("ablate", "seedvar") and not args.config:
        config.gammas = list(DEFAULT_STUDY_GAMMAS)
    if args.seed is not None:
        config.seeds = args.seed
    if args.out is not None:
        config.out = args.out
    config.validate()
    return config


def run(args):
    config = build_config(args)
    out = Path(config.out)
    seed = config.seeds[0]

    if args.command == "simulate":
        for gamma in config.gammas:
            for s in config.seeds:
                cmd_simulate(config, out / "data" / point_name(gamma, s), gamma, s)
    elif args.command == "train":
        if args.data is None:
            raise ConfigurationError("train needs --data")
        cmd_train(config, args.data, out, seed, resume=args.resume)
    elif args.command == "evaluate":
        if args.data is None or args.checkpoint is None:
            raise ConfigurationError("evaluate needs --data and --checkpoint")
        cmd_evaluate(config, args.checkpoint, args.data, seed, out=out / "results.csv")
    elif args.command == "report":
        cmd_report(out)
    elif args.command == "tune":
        cmd_tune(config)
    else:
        runner = {"sweep": cmd_sweep, "ablate": cmd_ablate, "seedvar": cmd_seedvar}
        if runner[args.command](config):
            return EXIT_RUNTIME
    return EXIT_OK


def main(argv=None):
    logging.basicConfig()

    parser = make_parser()
    args = parser.parse_args(argv)

    if args.verbose:
        logger.setLevel(logging.DEBUG)
    elif args.quiet:
        logger.setLevel(logging.CRITICAL)
    else:
        logger.setLevel(logging.INFO)
    if args.verbose and args.quiet:
        logger.debug("Make up your mind, yo!")

    try:
        return run(args)
    except ConfigurationError as e:
        logger.critical(f"Configuration error: {e}")
        return EXIT_CONFIG
    except (OSError, FormatError) as e:
        logger.critical(f"IO error: {e}")
        return EXIT_IO
    except (RuntimeError, ArithmeticError, ValueError, IndexError) as e:
        logger.critical(f"{type(e).__name__}: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
