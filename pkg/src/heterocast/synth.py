"""Synthetic traffic with planted heterogeneous spatial structure.

Two (or more) latent processes evolve on distinct row-stochastic graphs and
sum into the observed signal, plus a daily sinusoid.  Because each latent
process propagates on its own graph, a forecaster that can learn one spatial
structure per hidden channel has an edge over one that shares a single graph
across channels -- which is exactly what the desk-scale acceptance run
checks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import TrafficSeries, write_series_csv


@dataclass
class SynthSpec:
    n_nodes: int = 8
    latent_processes: int = 2
    total_steps: int = 4032
    n_slots: int = 288
    decay: float = 0.85
    noise_std: float = 0.1
    base_level: float = 10.0
    diurnal_amplitude: float = 2.0
    seed: int = 0
    planted: list[np.ndarray] | None = field(default=None, repr=False)
    initial_states: np.ndarray | None = field(default=None, repr=False)  # (C, N)

    def validate(self) -> None:
        if self.n_nodes < 2:
            raise ValueError("need at least 2 nodes")
        if self.latent_processes < 1:
            raise ValueError("need at least 1 latent process")
        if not (0.0 < self.decay < 1.0):
            raise ValueError(f"decay must lie strictly inside (0, 1), got {self.decay}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.base_level <= 0:
            raise ValueError("base_level must be positive")
        if self.diurnal_amplitude < 0:
            raise ValueError("diurnal amplitude must be >= 0")
        if self.planted is not None:
            if len(self.planted) != self.latent_processes:
                raise ValueError("one planted adjacency per latent process required")
            for c, mat in enumerate(self.planted):
                if mat.shape != (self.n_nodes, self.n_nodes):
                    raise ValueError(f"planted adjacency {c} has shape {mat.shape}")
                if not np.allclose(mat.sum(axis=1), 1.0, atol=1e-9):
                    raise ValueError(f"planted adjacency {c} rows must sum to 1")
                if mat.min() < 0:
                    raise ValueError(f"planted adjacency {c} has negative entries")


def default_planted_graphs(n_nodes: int, n_processes: int,
                           rng: np.random.Generator) -> list[np.ndarray]:
    """Sparse row-stochastic graphs with disjoint dominant edges.

    Process c routes node i mainly to node (i + c + 1) mod N, so no two
    processes share a dominant edge and their optimal adjacencies differ.
    """
    graphs = []
    for c in range(n_processes):
        mat = np.zeros((n_nodes, n_nodes))
        for i in range(n_nodes):
            dominant = (i + c + 1) % n_nodes
            mat[i, dominant] = 0.7
            mat[i, i] = 0.2
            other = (i + c + 1 + n_processes) % n_nodes
            if other in (i, dominant):
                other = (other + 1) % n_nodes
            mat[i, other] = 0.1
        # small jitter keeps rows distinct across seeds without breaking
        # row-stochasticity
        jitter = rng.uniform(0, 0.02, size=mat.shape) * (mat > 0)
        mat = mat + jitter
        mat /= mat.sum(axis=1, keepdims=True)
        graphs.append(mat)
    return graphs


def generate(spec: SynthSpec) -> tuple[TrafficSeries, dict]:
    """Simulate the latent processes and return the observed series plus a
    ground-truth bundle (planted adjacencies, final latent states)."""
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0x73796E])
    N, C, T = spec.n_nodes, spec.latent_processes, spec.total_steps
    planted = spec.planted
    if planted is None:
        planted = default_planted_graphs(N, C, rng)

    share = spec.base_level / C
    if spec.initial_states is not None:
        if spec.initial_states.shape != (C, N):
            raise ValueError(f"initial_states must have shape ({C}, {N})")
        states = spec.initial_states.astype(np.float64).copy()
    else:
        states = np.full((C, N), share)
    rho = spec.decay
    values = np.empty((T, N))
    slots = np.arange(T) % spec.n_slots
    seasonal = spec.diurnal_amplitude * np.sin(2 * np.pi * slots / spec.n_slots)
    for t in range(T):
        values[t] = states.sum(axis=0) + seasonal[t]
        noise = (
            rng.normal(0.0, spec.noise_std, size=(C, N)) if spec.noise_std > 0 else 0.0
        )
        states = rho * np.einsum("cij,cj->ci", np.stack(planted), states) \
            + (1 - rho) * share + noise

    series = TrafficSeries(
        values=values[:, :, None],
        timestamps=np.arange(T, dtype=np.int64),
        interval_seconds=300,
        node_ids=[f"s{i}" for i in range(N)],
    )
    truth = {"planted": planted, "final_states": states}
    return series, truth


def write_synth_dataset(
    out_dir: str | Path,
    spec: SynthSpec,
    distance_scale: float = 100.0,
    edge_threshold: float = 0.05,
) -> Path:
    """Write series.csv, distances.csv and the planted ground-truth files.

    The distance file lists an edge wherever any planted graph carries weight
    above the threshold, with distance shrinking as planted weight grows.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    series, truth = generate(spec)
    write_series_csv(out_dir / "series.csv", series)

    planted = truth["planted"]
    for c, mat in enumerate(planted):
        np.savetxt(out_dir / f"planted_adj_c{c}.csv", mat, delimiter=",", fmt="%.10g")

    combined = np.max(np.stack(planted), axis=0)
    with open(out_dir / "distances.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["from", "to", "distance"])
        for i in range(spec.n_nodes):
            for j in range(spec.n_nodes):
                if combined[i, j] > edge_threshold:
                    # propagation j -> i: the file lists source, target
                    dist = distance_scale * (1.5 - combined[i, j])
                    writer.writerow(
                        [series.node_ids[j], series.node_ids[i], f"{dist:.6f}"]
                    )
    return out_dir
