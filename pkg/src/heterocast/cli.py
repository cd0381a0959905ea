"""Command-line surface tying the pipeline together.

Subcommands: synth, prepare, train, eval, ablate, robustness,
export-adjacency, export-attention, plot.  Each command writes its CSV
artifacts plus matplotlib SVG figures into ``--out`` together with a resolved
config echo, so every run is reproducible from the echo and its input files.
"""

from __future__ import annotations

import argparse
import logging
import sys
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from . import data as dp
from . import plots
from .exceptions import ConfigError, DataError, HeterocastError
from .graphgen import build_seed_adjacency, load_distances
from .model import HeteroGraphNet, load_checkpoint, save_checkpoint
from .runconfig import RunConfig, load_config, set_seed, write_echo
from .synth import write_synth_dataset
from .training import (
    TrainSettings,
    evaluate,
    run_ablation_suite,
    run_robustness,
    train_fresh,
)

logger = logging.getLogger("heterocast")


def _setup_logging(out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    root = logging.getLogger()
    root.setLevel(logging.INFO)
    for handler in list(root.handlers):
        root.removeHandler(handler)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    file_handler = logging.FileHandler(out_dir / "run.log", mode="a")
    file_handler.setFormatter(fmt)
    root.addHandler(file_handler)
    stream = logging.StreamHandler()
    stream.setFormatter(logging.Formatter("%(message)s"))
    root.addHandler(stream)


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        set_seed(cfg, args.seed)
    return cfg


def _seeds(cfg: RunConfig, repeats: int) -> tuple[int, ...]:
    return tuple(cfg.seed + r for r in range(max(1, repeats)))


def _seed_adjacency(cfg: RunConfig, node_ids: list[str]):
    if not cfg.distance_csv:
        raise ConfigError("config key distance_csv is required for this command")
    edges = load_distances(cfg.distance_csv)
    return build_seed_adjacency(edges, node_ids, delta=cfg.delta)


def _prepared(args) -> tuple:
    if not args.data:
        raise ConfigError("--data DIR (a prepared dataset directory) is required")
    return dp.load_prepared(args.data)


def _write_metrics_csv(path: Path, rows: list[dict]) -> None:
    pd.DataFrame(rows).to_csv(path, index=False)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _load_run_config(args)
    out = Path(args.out)
    spec = replace(cfg.synth, n_slots=cfg.model.n_slots, seed=cfg.seed)
    write_synth_dataset(out, spec)
    write_echo(out / "config_echo.txt", cfg)
    logger.info("wrote synthetic dataset with %d nodes, %d steps to %s",
                spec.n_nodes, spec.total_steps, out)
    return 0


def cmd_prepare(args) -> int:
    cfg = _load_run_config(args)
    out = Path(args.out)
    paths = cfg.series_paths()
    if not paths:
        raise ConfigError("config key series_csv is required for prepare")
    if cfg.distance_csv and not Path(cfg.distance_csv).exists():
        raise DataError(
            f"distance file {cfg.distance_csv!r} not found; fix the distance_csv key"
        )
    series = dp.load_series(paths)
    series = dp.interpolate_missing(series)
    normalizer = dp.fit_normalizer(series, train_fraction=0.6)
    dataset = dp.make_windows(
        series, cfg.model.input_len, cfg.model.horizon, cfg.model.n_slots
    )
    dataset = dp.chronological_split(dataset)
    dp.save_prepared(out, dataset, normalizer, node_ids=series.node_ids)
    write_echo(out / "config_echo.txt", cfg)
    logger.info(
        "prepared %d windows (%d train / %d val / %d test) in %s",
        dataset.n_samples, len(dataset.indices("train")),
        len(dataset.indices("val")), len(dataset.indices("test")), out,
    )
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    out = Path(args.out)
    dataset, normalizer, manifest = _prepared(args)
    cfg.apply_manifest(manifest)
    cfg.model.validate()
    seed_adj = _seed_adjacency(cfg, manifest["node_ids"])

    if cfg.noise_variance > 0:
        dataset = dp.add_gaussian_noise(
            dataset, cfg.noise_variance, seed=cfg.seed, noise_targets=cfg.noise_targets
        )

    rows = []
    primary_history = None
    for i, seed in enumerate(_seeds(cfg, args.repeats)):
        settings = replace(cfg.train, seed=seed)
        model_cfg = replace(cfg.model, seed=seed)
        model, history, report = train_fresh(
            model_cfg, seed_adj, dataset, normalizer, settings
        )
        rows.append({"seed": seed, **report.row()})
        logger.info("seed %d: best val MAE %.5f at epoch %d; test %s",
                    seed, history.best_val_mae, history.best_epoch, report.row())
        if i == 0:
            primary_history = history
            save_checkpoint(out / "checkpoint.npz", model, normalizer)

    if len(rows) > 1:
        keys = [k for k in rows[0] if k != "seed"]
        seed_rows = list(rows)
        rows.append({"seed": "mean",
                     **{k: float(np.mean([r[k] for r in seed_rows])) for k in keys}})
        rows.append({"seed": "std",
                     **{k: float(np.std([r[k] for r in seed_rows])) for k in keys}})

    _write_metrics_csv(out / "metrics.csv", rows)
    hist_df = pd.DataFrame({
        "epoch": np.arange(1, primary_history.n_epochs + 1),
        "train_loss": primary_history.train_loss,
        "val_mae": primary_history.val_mae,
    })
    hist_df.to_csv(out / "history.csv", index=False)
    plots.save_loss_curve(out / "loss_curve.svg", primary_history.train_loss,
                          primary_history.val_mae)
    write_echo(out / "config_echo.txt", cfg)
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out)
    model, normalizer = load_checkpoint(args.checkpoint)
    dataset, _, _ = _prepared(args)
    report = evaluate(model, dataset, "test", normalizer)
    _write_metrics_csv(out / "metrics.csv", [report.row()])
    horizons = sorted(report.horizons)
    plots.save_bar_chart(
        out / "mae_by_horizon.svg",
        [f"h{h}" for h in horizons],
        np.array([report.horizons[h]["mae"] for h in horizons]),
        title="test MAE by horizon",
        ylabel="MAE (raw units)",
    )
    logger.info("test metrics: %s", report.row())
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    out = Path(args.out)
    dataset, normalizer, manifest = _prepared(args)
    cfg.apply_manifest(manifest)
    seed_adj = _seed_adjacency(cfg, manifest["node_ids"])
    rows = run_ablation_suite(
        cfg.model, seed_adj, dataset, normalizer, cfg.train,
        seeds=_seeds(cfg, args.repeats),
    )
    _write_metrics_csv(out / "ablation.csv", rows)
    plots.save_bar_chart(
        out / "ablation_mae.svg",
        [r["variant"] for r in rows],
        np.array([r["agg_mae"] for r in rows]),
        title="ablation: aggregate test MAE",
        ylabel="MAE (raw units)",
    )
    write_echo(out / "config_echo.txt", cfg)
    return 0


def cmd_robustness(args) -> int:
    cfg = _load_run_config(args)
    out = Path(args.out)
    dataset, normalizer, manifest = _prepared(args)
    cfg.apply_manifest(manifest)
    seed_adj = _seed_adjacency(cfg, manifest["node_ids"])
    rows = run_robustness(
        cfg.model, seed_adj, dataset, normalizer, cfg.train,
        variances=(0.0, 2.0, 4.0), seeds=_seeds(cfg, args.repeats),
    )
    _write_metrics_csv(out / "robustness.csv", rows)
    plots.save_bar_chart(
        out / "robustness_mae.svg",
        [f"var={r['noise_variance']:g}" for r in rows],
        np.array([r["agg_mae"] for r in rows]),
        title="clean-test MAE vs training noise",
        ylabel="MAE (raw units)",
    )
    write_echo(out / "config_echo.txt", cfg)
    return 0


def _write_adjacency_channel(out: Path, name: str, weights: np.ndarray) -> None:
    np.savetxt(out / f"{name}.csv", weights, delimiter=",", fmt="%.10g")
    plots.save_heatmap(out / f"{name}.svg", weights, title=name,
                       xlabel="source node", ylabel="target node")


def cmd_export_adjacency(args) -> int:
    out = Path(args.out)
    model, _ = load_checkpoint(args.checkpoint)
    model.eval()
    with torch.no_grad():
        if model.static_factors is not None:
            adj = model.static_adjacency().cpu().numpy()
            for f in range(adj.shape[0]):
                _write_adjacency_channel(out, f"adj_static_f{f}", adj[f])
        if model.dynamic_factors is not None:
            for slot in args.slots:
                adj = model.dynamic_adjacency(torch.tensor([slot]))[0].cpu().numpy()
                for f in range(adj.shape[0]):
                    _write_adjacency_channel(out, f"adj_dyn_s{slot}_f{f}", adj[f])
    logger.info("exported adjacency slices to %s", out)
    return 0


def cmd_export_attention(args) -> int:
    out = Path(args.out)
    model, _ = load_checkpoint(args.checkpoint)
    modules = []
    if model.static_factors is not None:
        modules.append("static")
    if model.dynamic_factors is not None:
        modules.append("dynamic")
    for module in modules:
        att = model.collect_attention(module, slot=args.slot)  # (blocks, K+1, F)
        for k in range(att.shape[1]):
            name = f"attention_{module}_k{k}"
            np.savetxt(out / f"{name}.csv", att[:, k, :], delimiter=",", fmt="%.10g")
            plots.save_heatmap(
                out / f"{name}.svg", att[:, k, :],
                title=f"{module} channel attention (diffusion step {k})",
                xlabel="channel", ylabel="block",
            )
    logger.info("exported attention heat data to %s", out)
    return 0


def cmd_plot(args) -> int:
    out = Path(args.out)
    model, normalizer = load_checkpoint(args.checkpoint)
    dataset, _, _ = _prepared(args)
    from .training import predict

    inputs, targets, slots = dataset.split("test")
    pred = predict(model, inputs, slots, normalizer)
    horizon = args.horizon if args.horizon else model.config.horizon
    if not 1 <= horizon <= model.config.horizon:
        raise ConfigError(f"--horizon must lie in [1, {model.config.horizon}]")
    h = horizon - 1
    x = np.arange(pred.shape[0])
    for node in args.nodes:
        if not 0 <= node < pred.shape[2]:
            raise ConfigError(f"node index {node} out of range")
        frame = pd.DataFrame({
            "sample": x,
            "actual": targets[:, h, node, 0],
            "predicted": pred[:, h, node, 0],
        })
        frame.to_csv(out / f"forecast_node{node}_h{horizon}.csv", index=False)
        plots.save_line_plot(
            out / f"forecast_node{node}_h{horizon}.svg",
            x,
            {"actual": frame["actual"].to_numpy(),
             "predicted": frame["predicted"].to_numpy()},
            title=f"node {node} forecast at horizon {horizon}",
            xlabel="test sample",
            ylabel="signal (raw units)",
        )
    logger.info("wrote forecast plots to %s", out)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="heterocast",
        description="heterogeneity-aware spatiotemporal traffic forecasting",
    )
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", type=str, default=None, help="key=value config file")
    shared.add_argument("--out", type=str, required=True, help="output directory")
    shared.add_argument("--seed", type=int, default=None, help="override the run seed")
    shared.add_argument("--repeats", type=int, default=1,
                        help="number of seeded repeat runs")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[shared]).set_defaults(func=cmd_synth)
    sub.add_parser("prepare", parents=[shared]).set_defaults(func=cmd_prepare)

    p_train = sub.add_parser("train", parents=[shared])
    p_train.add_argument("--data", type=str, required=True)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", parents=[shared])
    p_eval.add_argument("--data", type=str, required=True)
    p_eval.add_argument("--checkpoint", type=str, required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_abl = sub.add_parser("ablate", parents=[shared])
    p_abl.add_argument("--data", type=str, required=True)
    p_abl.set_defaults(func=cmd_ablate)

    p_rob = sub.add_parser("robustness", parents=[shared])
    p_rob.add_argument("--data", type=str, required=True)
    p_rob.set_defaults(func=cmd_robustness)

    p_adj = sub.add_parser("export-adjacency", parents=[shared])
    p_adj.add_argument("--checkpoint", type=str, required=True)
    p_adj.add_argument("--slots", type=int, nargs="*", default=[0])
    p_adj.set_defaults(func=cmd_export_adjacency)

    p_att = sub.add_parser("export-attention", parents=[shared])
    p_att.add_argument("--checkpoint", type=str, required=True)
    p_att.add_argument("--slot", type=int, default=0)
    p_att.set_defaults(func=cmd_export_attention)

    p_plot = sub.add_parser("plot", parents=[shared])
    p_plot.add_argument("--data", type=str, required=True)
    p_plot.add_argument("--checkpoint", type=str, required=True)
    p_plot.add_argument("--nodes", type=int, nargs="*", default=[0])
    p_plot.add_argument("--horizon", type=int, default=None)
    p_plot.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = Path(args.out)
    try:
        _setup_logging(out_dir)
        return args.func(args)
    except HeterocastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        _write_error_log(out_dir, exc)
        return 1
    except Exception as exc:  # noqa: BLE001 - surfaced with full context in the log
        print(f"internal error: {exc}", file=sys.stderr)
        _write_error_log(out_dir, exc)
        return 1


def _write_error_log(out_dir: Path, exc: BaseException) -> None:
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "error.log", "a", encoding="utf-8") as fh:
            fh.write("".join(traceback.format_exception(exc)))
    except OSError:
        pass


if __name__ == "__main__":
    raise SystemExit(main())
