"""Heterogeneous adjacency generation via Tucker-factorized tensors.

Two generators parameterize the per-channel graphs: a static one whose
(channel, target, source) tensor is time-invariant, and a dynamic one that
adds a period-slot mode so sensors observed at the same time of day share a
correlation pattern.  Both are initialized from a distance-kernel seed graph
so that training starts from physically plausible edge weights.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .exceptions import DataError, ParseError

# Above this many elements the broadcast seed tensor is never materialized;
# the factorization falls back to the closed form that exploits the rank-one
# channel/time modes of a broadcast tensor.
_MATERIALIZE_BUDGET = 20_000_000

_PAD_NOISE_SCALE = 1e-2


@dataclass
class SeedAdjacency:
    """Distance-kernel graph used to initialize both generators."""

    weights: np.ndarray  # (N, N), in [0, 1]
    neighbor_mask: np.ndarray  # (N, N) bool
    delta: float  # kernel bandwidth, squared meters

    @property
    def n_nodes(self) -> int:
        return self.weights.shape[0]


def load_distances(path: str | Path) -> list[tuple[str, str, float]]:
    """Read an edge list CSV with header ``from,to,distance``."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"distance file not found: {path}")
    edges: list[tuple[str, str, float]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:3]] != ["from", "to", "distance"]:
            raise ParseError(f"{path}: expected header 'from,to,distance'")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise ParseError(f"{path}: row {lineno} has {len(row)} fields, expected 3")
            try:
                dist = float(row[2])
            except ValueError:
                raise ParseError(f"{path}: row {lineno}: bad distance {row[2]!r}") from None
            edges.append((row[0].strip(), row[1].strip(), dist))
    return edges


def build_seed_adjacency(
    distances: Sequence[tuple[str, str, float]],
    node_ids: Sequence[str],
    delta: float | str = "auto",
) -> SeedAdjacency:
    """Gaussian-kernel seed: weight = exp(-d^2/delta) on listed edges, 0 elsewhere.

    An edge row (from=j, to=i, d) sets ``weights[i, j]``, matching the
    source-to-target propagation convention of the generators.
    ``delta='auto'`` uses the squared population std of the listed distances.
    """
    index = {nid: k for k, nid in enumerate(node_ids)}
    N = len(node_ids)
    for src, dst, _ in distances:
        if src not in index or dst not in index:
            missing = src if src not in index else dst
            raise DataError(f"distance file references unknown node id {missing!r}")
    dists = np.array([d for _, _, d in distances], dtype=np.float64)
    if len(dists) and dists.min() < 0:
        raise DataError("distances must be non-negative")
    if delta == "auto":
        if len(dists) == 0:
            raise ValueError("cannot infer delta from an empty edge list")
        delta = float(dists.std() ** 2)
    delta = float(delta)
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    weights = np.zeros((N, N), dtype=np.float64)
    mask = np.zeros((N, N), dtype=bool)
    for src, dst, d in distances:
        i, j = index[dst], index[src]
        weights[i, j] = np.exp(-(d * d) / delta)
        mask[i, j] = True
    return SeedAdjacency(weights=weights, neighbor_mask=mask, delta=delta)


def period_slot(t: int | np.ndarray, n_slots: int) -> int | np.ndarray:
    """Map an interval index to its time-of-day slot."""
    return t % n_slots


class StaticAdjacencyFactors(nn.Module):
    """Tucker factors of the time-invariant (channel, target, source) tensor."""

    def __init__(self, n_channels: int, n_nodes: int, m: int):
        super().__init__()
        self.n_channels = n_channels
        self.n_nodes = n_nodes
        self.m = m
        self.core = nn.Parameter(torch.zeros(m, m, m))
        self.channel = nn.Parameter(torch.zeros(n_channels, m))
        self.target = nn.Parameter(torch.zeros(n_nodes, m))
        self.source = nn.Parameter(torch.zeros(n_nodes, m))

    def reconstruct(self) -> torch.Tensor:
        """Pre-activation tensor, shape (F, N, N)."""
        return torch.einsum(
            "abc,fa,ib,jc->fij", self.core, self.channel, self.target, self.source
        )

    def materialize(self) -> torch.Tensor:
        """Non-negative adjacency, shape (F, N, N)."""
        return torch.relu(self.reconstruct())

    def parameter_budget(self) -> int:
        m, F, N = self.m, self.n_channels, self.n_nodes
        return m**3 + (F + 2 * N) * m


class DynamicAdjacencyFactors(nn.Module):
    """Tucker factors of the slot-dependent (channel, slot, target, source) tensor."""

    def __init__(self, n_channels: int, n_nodes: int, m: int, n_slots: int):
        super().__init__()
        self.n_channels = n_channels
        self.n_nodes = n_nodes
        self.m = m
        self.n_slots = n_slots
        self.core = nn.Parameter(torch.zeros(m, m, m, m))
        self.channel = nn.Parameter(torch.zeros(n_channels, m))
        self.time = nn.Parameter(torch.zeros(n_slots, m))
        self.target = nn.Parameter(torch.zeros(n_nodes, m))
        self.source = nn.Parameter(torch.zeros(n_nodes, m))

    def _check_slots(self, slots: torch.Tensor) -> None:
        if slots.numel() and (slots.min() < 0 or slots.max() >= self.n_slots):
            raise ValueError(
                f"slot out of range [0, {self.n_slots}): "
                f"[{int(slots.min())}, {int(slots.max())}]"
            )

    def reconstruct(self, slots: torch.Tensor) -> torch.Tensor:
        """Pre-activation slices at the given slots, shape (len(slots), F, N, N)."""
        slots = torch.as_tensor(slots, dtype=torch.long, device=self.core.device)
        self._check_slots(slots)
        return torch.einsum(
            "abcd,fa,sb,ic,jd->sfij",
            self.core,
            self.channel,
            self.time[slots],
            self.target,
            self.source,
        )

    def materialize(self, slots: torch.Tensor) -> torch.Tensor:
        """Non-negative adjacency slices, shape (len(slots), F, N, N)."""
        return torch.relu(self.reconstruct(slots))

    def materialize_slot(self, slot: int) -> torch.Tensor:
        """Single-slot adjacency, shape (F, N, N)."""
        return self.materialize(torch.tensor([int(slot)]))[0]

    def parameter_budget(self) -> int:
        m, F, N, T = self.m, self.n_channels, self.n_nodes, self.n_slots
        return m**4 + (F + T + 2 * N) * m


def materialize_static(factors: StaticAdjacencyFactors) -> torch.Tensor:
    return factors.materialize()


def materialize_dynamic_slot(factors: DynamicAdjacencyFactors, slot: int) -> torch.Tensor:
    return factors.materialize_slot(slot)


# ---------------------------------------------------------------------------
# Tucker fitting (HOSVD + alternating least-squares refinement)
# ---------------------------------------------------------------------------


def _unfold(tensor: np.ndarray, mode: int) -> np.ndarray:
    return np.moveaxis(tensor, mode, 0).reshape(tensor.shape[mode], -1)


def _mode_multiply(tensor: np.ndarray, matrix: np.ndarray, mode: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(matrix, tensor, axes=(1, mode)), 0, mode)


def _leading_left_vectors(matrix: np.ndarray, rank: int) -> np.ndarray:
    u, _, _ = np.linalg.svd(matrix, full_matrices=False)
    return u[:, :rank]


def _tucker_fit(
    tensor: np.ndarray, ranks: Sequence[int], max_sweeps: int = 200, tol: float = 1e-12
) -> tuple[np.ndarray, list[np.ndarray]]:
    """HOSVD initialization followed by alternating refinement sweeps.

    Returns (core, factors) with orthonormal factor columns; stops early when
    the relative reconstruction error no longer improves.
    """
    ndim = tensor.ndim
    factors = [_leading_left_vectors(_unfold(tensor, n), ranks[n]) for n in range(ndim)]
    norm = np.linalg.norm(tensor)
    if norm == 0.0:
        core = np.zeros(tuple(ranks))
        return core, factors
    prev_rel = None
    for _ in range(max_sweeps):
        for n in range(ndim):
            partial = tensor
            for k in range(ndim):
                if k != n:
                    partial = _mode_multiply(partial, factors[k].T, k)
            factors[n] = _leading_left_vectors(_unfold(partial, n), ranks[n])
        core = tensor
        for k in range(ndim):
            core = _mode_multiply(core, factors[k].T, k)
        # with orthonormal factors: ||T - T_hat||^2 = ||T||^2 - ||core||^2
        rel = np.sqrt(max(norm**2 - np.linalg.norm(core) ** 2, 0.0)) / norm
        if prev_rel is not None and abs(prev_rel - rel) < tol:
            break
        prev_rel = rel
    core = tensor
    for k in range(ndim):
        core = _mode_multiply(core, factors[k].T, k)
    return core, factors


def _broadcast_tucker(
    seed: np.ndarray, lead_dims: Sequence[int], m: int
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Closed-form Tucker fit of the seed broadcast over leading modes.

    A tensor that repeats ``seed`` identically along each leading mode is
    rank one in those modes, so the fit reduces to an SVD of the seed.
    Produces the same optimum the sweep-based fit converges to.
    """
    n = seed.shape[0]
    r = min(m, n)
    u, s, vt = np.linalg.svd(seed)
    factors = [np.full((dim, 1), 1.0 / np.sqrt(dim)) for dim in lead_dims]
    factors += [u[:, :r], vt.T[:, :r]]
    scale = float(np.prod([np.sqrt(dim) for dim in lead_dims]))
    core = np.zeros((1,) * len(lead_dims) + (r, r))
    core[(0,) * len(lead_dims) + (np.arange(r), np.arange(r))] = s[:r] * scale
    return core, factors


def _fill_factor(
    param: nn.Parameter, fitted: np.ndarray, core_rank: int, rng: np.random.Generator
) -> None:
    """Copy fitted columns into a parameter, padding spare columns with small
    noise so they can start training (their core slices stay zero, keeping the
    initial reconstruction unchanged)."""
    dim, m = param.shape
    full = np.zeros((dim, m))
    full[:, :core_rank] = fitted[:, :core_rank]
    if core_rank < m:
        full[:, core_rank:] = rng.normal(
            0.0, _PAD_NOISE_SCALE / np.sqrt(m), size=(dim, m - core_rank)
        )
    with torch.no_grad():
        param.copy_(torch.as_tensor(full, dtype=param.dtype))


def init_factors_from_seed(
    seed: SeedAdjacency,
    n_channels: int,
    m: int,
    n_slots: int,
    kind: str,
    rng_seed: int = 0,
) -> StaticAdjacencyFactors | DynamicAdjacencyFactors:
    """Fit Tucker factors so the initial adjacency approximates the seed
    broadcast over every channel (and slot, for the dynamic generator)."""
    N = seed.n_nodes
    if m > N:
        raise ValueError(f"embedding dimension m={m} exceeds node count N={N}")
    if kind not in ("static", "dynamic"):
        raise ValueError(f"kind must be 'static' or 'dynamic', got {kind!r}")
    weights = np.asarray(seed.weights, dtype=np.float64)

    lead_dims = [n_channels] if kind == "static" else [n_channels, n_slots]
    elements = int(np.prod(lead_dims)) * N * N
    if elements <= _MATERIALIZE_BUDGET:
        broadcast = np.broadcast_to(weights, tuple(lead_dims) + (N, N)).copy()
        ranks = [min(m, d) for d in broadcast.shape]
        core, factors = _tucker_fit(broadcast, ranks)
    else:
        core, factors = _broadcast_tucker(weights, lead_dims, m)

    if kind == "static":
        module = StaticAdjacencyFactors(n_channels, N, m)
        params = [module.channel, module.target, module.source]
    else:
        module = DynamicAdjacencyFactors(n_channels, N, m, n_slots)
        params = [module.channel, module.time, module.target, module.source]

    rng = np.random.default_rng([rng_seed, 0x7463])
    core_ranks = core.shape
    for param, fitted, rank in zip(params, factors, core_ranks):
        _fill_factor(param, fitted, rank, rng)
    full_core = np.zeros((m,) * core.ndim)
    full_core[tuple(slice(0, r) for r in core_ranks)] = core
    with torch.no_grad():
        module.core.copy_(torch.as_tensor(full_core, dtype=module.core.dtype))
    return module
