"""Optimization loop, metrics, and the ablation / robustness harnesses."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .data import Normalizer, WindowedDataset, add_gaussian_noise
from .exceptions import DataError
from .model import HeteroGraphNet, ModelConfig, build_model, l1_loss
from .graphgen import SeedAdjacency

logger = logging.getLogger(__name__)

REPORT_HORIZONS = (3, 6, 9, 12)
MAPE_FLOOR = 1e-3

ABLATION_VARIANTS = (
    ("full", {}),
    ("wo_dynamic", {"disable_dynamic": True}),
    ("wo_static", {"disable_static": True}),
    ("wo_heterogeneous", {"homogeneous_graph": True}),
    ("wo_channel_attention", {"disable_channel_attention": True}),
    ("wo_decentralization_pooling", {"gap_pooling": True}),
)


@dataclass
class TrainSettings:
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 15
    grad_clip_norm: float = 5.0
    seed: int = 0

    def validate(self) -> None:
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class MetricsReport:
    """Per-horizon and aggregate MAE / MAPE / RMSE in raw signal units."""

    horizons: dict[int, dict[str, float]]
    aggregate: dict[str, float]

    def row(self) -> dict[str, float]:
        flat = {}
        for h in sorted(self.horizons):
            for m in ("mae", "mape", "rmse"):
                flat[f"h{h}_{m}"] = self.horizons[h][m]
        for m in ("mae", "mape", "rmse"):
            flat[f"agg_{m}"] = self.aggregate[m]
        return flat


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_mae: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val_mae: float = float("inf")

    @property
    def n_epochs(self) -> int:
        return len(self.train_loss)


def _metric_block(err: np.ndarray, target: np.ndarray) -> dict[str, float]:
    abs_err = np.abs(err)
    mae = float(abs_err.mean())
    rmse = float(np.sqrt((err**2).mean()))
    mask = np.abs(target) > MAPE_FLOOR
    mape = float((abs_err[mask] / np.abs(target[mask])).mean()) if mask.any() else float("nan")
    return {"mae": mae, "mape": mape, "rmse": rmse}


def compute_metrics(pred_raw: np.ndarray, target_raw: np.ndarray) -> MetricsReport:
    """Metrics over (S, Q, N, d) raw-unit arrays; horizon h uses prediction
    step h (1-based)."""
    if pred_raw.shape != target_raw.shape:
        raise ValueError(f"shape mismatch: {pred_raw.shape} vs {target_raw.shape}")
    Q = pred_raw.shape[1]
    err = pred_raw - target_raw
    horizons = {
        h: _metric_block(err[:, h - 1], target_raw[:, h - 1])
        for h in REPORT_HORIZONS
        if h <= Q
    }
    return MetricsReport(horizons=horizons, aggregate=_metric_block(err, target_raw))


def predict(
    model: HeteroGraphNet,
    inputs: np.ndarray,
    slots: np.ndarray,
    normalizer: Normalizer,
    batch_size: int = 256,
) -> np.ndarray:
    """Raw-unit predictions for raw-unit inputs."""
    model.eval()
    dtype = next(model.parameters()).dtype
    outputs = []
    with torch.no_grad():
        for lo in range(0, len(inputs), batch_size):
            xb = torch.as_tensor(normalizer.apply(inputs[lo : lo + batch_size]), dtype=dtype)
            sb = torch.as_tensor(slots[lo : lo + batch_size], dtype=torch.long)
            pred = model(xb, sb)
            outputs.append(normalizer.invert(pred.cpu().numpy().astype(np.float64)))
    return np.concatenate(outputs, axis=0)


def evaluate(
    model: HeteroGraphNet,
    dataset: WindowedDataset,
    split: str,
    normalizer: Normalizer,
) -> MetricsReport:
    inputs, targets, slots = dataset.split(split)
    if len(inputs) == 0:
        raise DataError(f"split {split!r} is empty")
    pred = predict(model, inputs, slots, normalizer)
    return compute_metrics(pred, targets)


def train(
    model: HeteroGraphNet,
    dataset: WindowedDataset,
    normalizer: Normalizer,
    settings: TrainSettings,
) -> TrainHistory:
    """Adam on raw-unit L1 loss with gradient clipping and early stopping on
    validation MAE; restores the best-validation parameters before returning.
    Deterministic given ``settings.seed`` (fixed batch order per epoch)."""
    settings.validate()
    inputs, targets, slots = dataset.split("train")
    dtype = next(model.parameters()).dtype
    optimizer = torch.optim.Adam(model.parameters(), lr=settings.lr)
    order_rng = np.random.default_rng([settings.seed, 0x6F72646])

    history = TrainHistory()
    best_state = None
    since_best = 0
    for epoch in range(settings.max_epochs):
        model.train()
        perm = order_rng.permutation(len(inputs))
        losses = []
        for lo in range(0, len(perm), settings.batch_size):
            idx = perm[lo : lo + settings.batch_size]
            xb = torch.as_tensor(normalizer.apply(inputs[idx]), dtype=dtype)
            yb = torch.as_tensor(targets[idx], dtype=dtype)
            sb = torch.as_tensor(slots[idx], dtype=torch.long)
            optimizer.zero_grad()
            loss = l1_loss(model(xb, sb), yb, normalizer)
            if not torch.isfinite(loss):
                pnorm = float(
                    torch.sqrt(sum(p.detach().pow(2).sum() for p in model.parameters()))
                )
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, batch {lo // settings.batch_size} "
                    f"(parameter norm {pnorm:.3e})"
                )
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), settings.grad_clip_norm)
            optimizer.step()
            losses.append(float(loss))

        val = evaluate(model, dataset, "val", normalizer)
        history.train_loss.append(float(np.mean(losses)))
        history.val_mae.append(val.aggregate["mae"])
        logger.info(
            "epoch %d: train_loss=%.5f val_mae=%.5f",
            epoch, history.train_loss[-1], history.val_mae[-1],
        )
        if val.aggregate["mae"] < history.best_val_mae:
            history.best_val_mae = val.aggregate["mae"]
            history.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            since_best = 0
        else:
            since_best += 1
            if since_best >= settings.patience:
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    return history


def train_fresh(
    config: ModelConfig,
    seed_adjacency: SeedAdjacency,
    dataset: WindowedDataset,
    normalizer: Normalizer,
    settings: TrainSettings,
) -> tuple[HeteroGraphNet, TrainHistory, MetricsReport]:
    """Build, train and test-evaluate one model; the settings seed drives both
    the build and the batch order."""
    model = build_model(config, seed_adjacency, rng_seed=settings.seed)
    history = train(model, dataset, normalizer, settings)
    report = evaluate(model, dataset, "test", normalizer)
    return model, history, report


def run_ablation_suite(
    config: ModelConfig,
    seed_adjacency: SeedAdjacency,
    dataset: WindowedDataset,
    normalizer: Normalizer,
    settings: TrainSettings,
    seeds: tuple[int, ...] | None = None,
) -> list[dict]:
    """Train the full model plus the five ablation variants with shared seeds
    and return one metrics row per variant (averaged over seeds)."""
    seeds = (settings.seed,) if seeds is None else tuple(seeds)
    rows = []
    for name, overrides in ABLATION_VARIANTS:
        variant_cfg = replace(config, **overrides)
        per_seed = []
        for s in seeds:
            run_settings = replace(settings, seed=s)
            _, _, report = train_fresh(
                variant_cfg, seed_adjacency, dataset, normalizer, run_settings
            )
            per_seed.append(report.row())
            logger.info("ablation %s seed %d: %s", name, s, per_seed[-1])
        mean_row = {k: float(np.mean([r[k] for r in per_seed])) for k in per_seed[0]}
        rows.append({"variant": name, **mean_row})
    return rows


def run_robustness(
    config: ModelConfig,
    seed_adjacency: SeedAdjacency,
    dataset: WindowedDataset,
    normalizer: Normalizer,
    settings: TrainSettings,
    variances: tuple[float, ...] = (0.0, 2.0, 4.0),
    seeds: tuple[int, ...] | None = None,
) -> list[dict]:
    """Train with Gaussian noise on the training samples at each variance and
    evaluate on the clean test split."""
    seeds = (settings.seed,) if seeds is None else tuple(seeds)
    rows = []
    for variance in variances:
        per_seed = []
        for s in seeds:
            noisy = add_gaussian_noise(dataset, variance, seed=s)
            run_settings = replace(settings, seed=s)
            _, _, report = train_fresh(
                config, seed_adjacency, noisy, normalizer, run_settings
            )
            per_seed.append(report.row())
            logger.info("robustness var=%s seed %d: %s", variance, s, per_seed[-1])
        mean_row = {k: float(np.mean([r[k] for r in per_seed])) for k in per_seed[0]}
        rows.append({"noise_variance": float(variance), **mean_row})
    return rows
