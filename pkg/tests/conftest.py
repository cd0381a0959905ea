import numpy as np
import pytest
import torch

from heterocast.data import TrafficSeries, chronological_split, make_windows
from heterocast.graphgen import SeedAdjacency
from heterocast.model import ModelConfig

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_seed_adjacency(n_nodes: int, rng: np.random.Generator,
                          density: float = 0.5) -> SeedAdjacency:
    weights = rng.random((n_nodes, n_nodes)) * (rng.random((n_nodes, n_nodes)) < density)
    return SeedAdjacency(weights=weights, neighbor_mask=weights > 0, delta=1.0)


def dense_seed_adjacency(n_nodes: int, rng: np.random.Generator) -> SeedAdjacency:
    """Seed with entries bounded away from zero, for finite-difference tests
    (keeps every materialized pre-activation clear of the ReLU kink)."""
    weights = rng.uniform(0.3, 1.0, size=(n_nodes, n_nodes))
    return SeedAdjacency(weights=weights, neighbor_mask=np.ones_like(weights, bool), delta=1.0)


@pytest.fixture
def small_seed(rng):
    return random_seed_adjacency(6, rng)


@pytest.fixture
def tiny_config():
    return ModelConfig(
        n_nodes=6,
        input_len=12,
        horizon=12,
        hidden_channels=8,
        skip_channels=8,
        tucker_m=3,
        attention_reduction=4,
        n_slots=4,
    )


def series_from_values(values: np.ndarray, interval_seconds: int = 300,
                       t0: int = 0) -> TrafficSeries:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 2:
        values = values[:, :, None]
    T, N, _ = values.shape
    return TrafficSeries(
        values=values,
        timestamps=np.arange(t0, t0 + T, dtype=np.int64),
        interval_seconds=interval_seconds,
        node_ids=[f"s{i}" for i in range(N)],
    )


def toy_dataset(T: int = 120, N: int = 6, P: int = 12, Q: int = 12,
                n_slots: int = 4, seed: int = 0):
    rng = np.random.default_rng(seed)
    values = rng.normal(10.0, 2.0, size=(T, N))
    series = series_from_values(values)
    return chronological_split(make_windows(series, P, Q, n_slots))


def finite_difference_max_rel_error(
    module: torch.nn.Module,
    compute_loss,
    step: float = 1e-5,
    entries_per_param: int = 48,
    seed: int = 0,
) -> tuple[float, dict[str, float]]:
    """Central finite differences vs autograd for every parameter group.

    ``compute_loss`` must rebuild the forward pass from the module's current
    parameters each call.  Entry pairs where both gradients are effectively
    zero are skipped.  Returns (worst relative error, per-group worst).
    """
    named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    loss = compute_loss()
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    rng = np.random.default_rng(seed)
    per_group: dict[str, float] = {}
    for (name, param), grad in zip(named, grads):
        grad_flat = (
            torch.zeros_like(param) if grad is None else grad
        ).reshape(-1)
        flat = param.detach().reshape(-1)
        n = flat.numel()
        if n <= entries_per_param:
            indices = np.arange(n)
        else:
            indices = rng.choice(n, size=entries_per_param, replace=False)
        worst = 0.0
        for i in indices:
            original = flat[i].item()
            flat[i] = original + step
            up = compute_loss().item()
            flat[i] = original - step
            down = compute_loss().item()
            flat[i] = original
            fd = (up - down) / (2.0 * step)
            an = grad_flat[i].item()
            scale = max(abs(fd), abs(an))
            if scale < 1e-6:
                continue
            worst = max(worst, abs(fd - an) / scale)
        per_group[name] = worst
    return max(per_group.values(), default=0.0), per_group
