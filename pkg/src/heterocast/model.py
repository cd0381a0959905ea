"""Full forecaster: input projection, stacked spatiotemporal blocks with
static/dynamic graph branches, per-layer skip taps and a two-layer head.

Each block runs a gated temporal convolution whose output feeds the static
and dynamic graph convolutions in parallel; their sum plus a cropped residual
becomes the next block's input.  The last block of every layer contributes a
skip tap at the final temporal position; the concatenated taps drive the
output head.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .attention import ChannelAttention, decentralization_pool, global_average_pool
from .data import Normalizer
from .exceptions import ConfigError, DataError
from .graphgen import (
    DynamicAdjacencyFactors,
    SeedAdjacency,
    StaticAdjacencyFactors,
    init_factors_from_seed,
)
from .layers import GatedTemporalConv, HeteroGraphConv

CHECKPOINT_VERSION = 1
_ROW_NORM_EPS = 1e-8


@dataclass
class ModelConfig:
    """Hyperparameters and ablation switches; the single source of truth for
    every tensor shape in the model."""

    n_nodes: int = 8
    in_features: int = 1
    input_len: int = 12
    horizon: int = 12
    layers: int = 4
    blocks_per_layer: int = 2
    dilation_pattern: tuple[int, ...] = (1, 2)
    hidden_channels: int = 32
    skip_channels: int = 64
    tucker_m: int = 8
    diffusion_steps: int = 2
    attention_reduction: int = 4
    n_slots: int = 288
    kernel_size: int = 2
    disable_static: bool = False
    disable_dynamic: bool = False
    homogeneous_graph: bool = False
    disable_channel_attention: bool = False
    gap_pooling: bool = False
    normalize_adjacency: bool = False
    split_tcn: bool = False
    seed: int = 0

    def __post_init__(self):
        self.dilation_pattern = tuple(int(d) for d in self.dilation_pattern)

    def validate(self) -> None:
        if self.disable_static and self.disable_dynamic:
            raise ConfigError("disable_static and disable_dynamic cannot both be true")
        if self.hidden_channels % self.attention_reduction != 0:
            raise ConfigError(
                f"attention_reduction={self.attention_reduction} must divide "
                f"hidden_channels={self.hidden_channels}"
            )
        if len(self.dilation_pattern) != self.blocks_per_layer:
            raise ConfigError(
                f"dilation_pattern length {len(self.dilation_pattern)} must equal "
                f"blocks_per_layer={self.blocks_per_layer}"
            )
        if self.tucker_m > self.n_nodes:
            raise ConfigError(
                f"tucker_m={self.tucker_m} exceeds n_nodes={self.n_nodes}"
            )
        for name in ("n_nodes", "in_features", "input_len", "horizon", "layers",
                     "blocks_per_layer", "hidden_channels", "skip_channels",
                     "tucker_m", "attention_reduction", "n_slots", "kernel_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.diffusion_steps < 0:
            raise ConfigError("diffusion_steps must be >= 0")

    @property
    def receptive_field(self) -> int:
        per_block = [(self.kernel_size - 1) * d for d in self.dilation_pattern]
        return 1 + self.layers * sum(per_block)

    @property
    def generator_channels(self) -> int:
        return 1 if self.homogeneous_graph else self.hidden_channels


class STBlock(nn.Module):
    """Gated temporal convolution feeding static and dynamic graph branches."""

    def __init__(self, config: ModelConfig, dilation: int):
        super().__init__()
        Fh = config.hidden_channels
        self.tcns = nn.ModuleList(
            GatedTemporalConv(Fh, Fh, config.kernel_size, dilation)
            for _ in range(2 if config.split_tcn else 1)
        )
        use_att = not config.disable_channel_attention
        self.static_gcn = (
            None
            if config.disable_static
            else HeteroGraphConv(Fh, Fh, config.diffusion_steps,
                                 config.attention_reduction, use_att)
        )
        self.dynamic_gcn = (
            None
            if config.disable_dynamic
            else HeteroGraphConv(Fh, Fh, config.diffusion_steps,
                                 config.attention_reduction, use_att)
        )

    def forward(self, h, static_adj, static_pooled, dynamic_adj, dynamic_pooled):
        # h: (B, F, N, L); returns (branch_sum, block_output)
        t_static = self.tcns[0](h)
        t_dynamic = self.tcns[-1](h)
        branch_sum = torch.zeros_like(t_static)
        if self.static_gcn is not None:
            branch_sum = branch_sum + self.static_gcn(t_static, static_adj, static_pooled)
        if self.dynamic_gcn is not None:
            branch_sum = branch_sum + self.dynamic_gcn(t_dynamic, dynamic_adj, dynamic_pooled)
        out = branch_sum + h[..., -branch_sum.shape[-1]:]
        return branch_sum, out


class HeteroGraphNet(nn.Module):
    """The assembled forecaster.  Construct the skeleton from a config, then
    either :meth:`initialize` it from a seed adjacency or load a checkpoint."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        Fh = config.hidden_channels
        self.input_proj = nn.Conv2d(config.in_features, Fh, (1, 1), bias=True)
        self.blocks = nn.ModuleList(
            STBlock(config, config.dilation_pattern[b])
            for _ in range(config.layers)
            for b in range(config.blocks_per_layer)
        )
        self.skip_projs = nn.ModuleList(
            nn.Conv2d(Fh, config.skip_channels, (1, 1), bias=True)
            for _ in range(config.layers)
        )
        skip_total = config.layers * config.skip_channels
        self.head1 = nn.Conv2d(skip_total, skip_total, (1, 1), bias=True)
        self.head2 = nn.Conv2d(
            skip_total, config.horizon * config.in_features, (1, 1), bias=True
        )
        Fg = config.generator_channels
        self.static_factors = (
            None
            if config.disable_static
            else StaticAdjacencyFactors(Fg, config.n_nodes, config.tucker_m)
        )
        self.dynamic_factors = (
            None
            if config.disable_dynamic
            else DynamicAdjacencyFactors(Fg, config.n_nodes, config.tucker_m, config.n_slots)
        )

    # -- initialization ----------------------------------------------------

    def initialize(self, seed_adjacency: SeedAdjacency, rng_seed: int) -> None:
        """Deterministic init: Tucker factors from the seed graph, everything
        else uniform in +-1/sqrt(fan_in)."""
        cfg = self.config
        gen = torch.Generator().manual_seed(rng_seed)

        def uniform_(tensor: torch.Tensor, fan_in: int) -> None:
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                tensor.uniform_(-bound, bound, generator=gen)

        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                uniform_(module.weight, fan_in)
                if module.bias is not None:
                    uniform_(module.bias, fan_in)
            elif isinstance(module, ChannelAttention):
                uniform_(module.w1, module.w1.shape[1])
                uniform_(module.w2, module.w2.shape[1])
            elif isinstance(module, HeteroGraphConv):
                uniform_(module.theta, module.theta.shape[2])

        if self.static_factors is not None:
            fitted = init_factors_from_seed(
                seed_adjacency, cfg.generator_channels, cfg.tucker_m, cfg.n_slots,
                "static", rng_seed,
            )
            self.static_factors.load_state_dict(fitted.state_dict())
        if self.dynamic_factors is not None:
            fitted = init_factors_from_seed(
                seed_adjacency, cfg.generator_channels, cfg.tucker_m, cfg.n_slots,
                "dynamic", rng_seed,
            )
            self.dynamic_factors.load_state_dict(fitted.state_dict())

    # -- adjacency plumbing -------------------------------------------------

    def _pool(self, adj: torch.Tensor) -> torch.Tensor:
        if self.config.gap_pooling:
            return global_average_pool(adj)
        return decentralization_pool(adj)

    def _finalize_adjacency(self, adj: torch.Tensor) -> torch.Tensor:
        if not self.config.normalize_adjacency:
            return adj
        rowsum = adj.sum(dim=-1, keepdim=True)
        return adj / rowsum.clamp(min=_ROW_NORM_EPS)  # zero rows stay zero

    def _expand_channels(self, adj: torch.Tensor) -> torch.Tensor:
        if not self.config.homogeneous_graph:
            return adj
        Fh = self.config.hidden_channels
        return adj.expand(adj.shape[:-3] + (Fh,) + adj.shape[-2:])

    def static_adjacency(self) -> torch.Tensor:
        """Materialized static adjacency at model width, shape (F, N, N)."""
        if self.static_factors is None:
            raise ConfigError("static branch is disabled")
        return self._expand_channels(self._finalize_adjacency(self.static_factors.materialize()))

    def dynamic_adjacency(self, slots: torch.Tensor) -> torch.Tensor:
        """Materialized dynamic adjacency slices, shape (len(slots), F, N, N)."""
        if self.dynamic_factors is None:
            raise ConfigError("dynamic branch is disabled")
        return self._expand_channels(
            self._finalize_adjacency(self.dynamic_factors.materialize(slots))
        )

    # -- forward -------------------------------------------------------------

    def forward(self, x: torch.Tensor, slots: torch.Tensor | None = None) -> torch.Tensor:
        """Predict (B, Q, N, d) from normalized inputs (B, P, N, d).

        ``slots`` gives each sample's period slot (of its last observed step)
        and is required whenever the dynamic branch is active.
        """
        cfg = self.config
        B, P, N, d = x.shape
        if P != cfg.input_len or N != cfg.n_nodes or d != cfg.in_features:
            raise ValueError(
                f"input shape {tuple(x.shape)} does not match config "
                f"(P={cfg.input_len}, N={cfg.n_nodes}, d={cfg.in_features})"
            )

        static_adj = static_pooled = None
        if self.static_factors is not None:
            static_adj = self.static_adjacency()
            static_pooled = self._pool(static_adj)

        dynamic_adj = dynamic_pooled = None
        if self.dynamic_factors is not None:
            if slots is None:
                raise ValueError("slots are required while the dynamic branch is active")
            slots = torch.as_tensor(slots, dtype=torch.long)
            if slots.shape != (B,):
                raise ValueError(f"slots shape {tuple(slots.shape)} must be ({B},)")
            unique_slots, inverse = torch.unique(slots, return_inverse=True)
            adj_u = self.dynamic_adjacency(unique_slots)  # (U, F, N, N)
            pooled_u = self._pool(adj_u)  # (U, F)
            dynamic_adj = adj_u[inverse]
            dynamic_pooled = pooled_u[inverse]

        h = x.permute(0, 3, 2, 1)  # (B, d, N, P)
        if P < cfg.receptive_field:
            h = F.pad(h, (cfg.receptive_field - P, 0, 0, 0))
        h = self.input_proj(h)  # (B, F, N, L)

        skips = []
        per_layer = cfg.blocks_per_layer
        for l in range(cfg.layers):
            branch_sum = None
            for b in range(per_layer):
                block = self.blocks[l * per_layer + b]
                branch_sum, h = block(
                    h, static_adj, static_pooled, dynamic_adj, dynamic_pooled
                )
            skips.append(self.skip_projs[l](branch_sum[..., -1:]))

        skip = torch.cat(skips, dim=1)  # (B, layers*skip_channels, N, 1)
        out = self.head1(torch.relu(skip))
        out = self.head2(torch.relu(out))  # (B, Q*d, N, 1)
        out = out.squeeze(-1).reshape(B, cfg.horizon, cfg.in_features, N)
        return out.permute(0, 1, 3, 2)  # (B, Q, N, d)

    # -- diagnostics ---------------------------------------------------------

    def collect_attention(self, module: str = "static", slot: int = 0) -> np.ndarray:
        """Attention vectors of every block, shape (n_blocks, K+1, F)."""
        if module == "static":
            adj = self.static_adjacency()
            pooled = self._pool(adj)
            gcns = [blk.static_gcn for blk in self.blocks]
        elif module == "dynamic":
            adj = self.dynamic_adjacency(torch.tensor([int(slot)]))[0]
            pooled = self._pool(adj)
            gcns = [blk.dynamic_gcn for blk in self.blocks]
        else:
            raise ValueError(f"module must be 'static' or 'dynamic', got {module!r}")
        if any(g is None for g in gcns):
            raise ConfigError(f"{module} branch is disabled")
        with torch.no_grad():
            rows = [torch.stack(g.attention_weights(pooled)) for g in gcns]
        return torch.stack(rows).cpu().numpy()  # (blocks, K+1, F)


def build_model(
    config: ModelConfig, seed_adjacency: SeedAdjacency, rng_seed: int | None = None
) -> HeteroGraphNet:
    """Construct and deterministically initialize the forecaster."""
    if rng_seed is None:
        rng_seed = config.seed
    if seed_adjacency.n_nodes != config.n_nodes:
        raise ConfigError(
            f"seed adjacency has {seed_adjacency.n_nodes} nodes, config expects "
            f"{config.n_nodes}"
        )
    model = HeteroGraphNet(config)
    model.initialize(seed_adjacency, rng_seed)
    return model


def parameter_count(config: ModelConfig) -> int:
    """Closed-form trainable parameter count for a config; asserted against
    built models in the test suite."""
    cfg = config
    Fh, ks = cfg.hidden_channels, cfg.kernel_size
    K1 = cfg.diffusion_steps + 1
    n_blocks = cfg.layers * cfg.blocks_per_layer
    total = Fh * cfg.in_features + Fh  # input projection

    tcns_per_block = 2 if cfg.split_tcn else 1
    total += n_blocks * tcns_per_block * 2 * (Fh * Fh * ks)  # filter+gate convs

    branches = (0 if cfg.disable_static else 1) + (0 if cfg.disable_dynamic else 1)
    gcn = K1 * Fh * Fh
    if not cfg.disable_channel_attention:
        gcn += K1 * 2 * Fh * (Fh // cfg.attention_reduction)
    total += n_blocks * branches * gcn

    m, N, Fg = cfg.tucker_m, cfg.n_nodes, cfg.generator_channels
    if not cfg.disable_static:
        total += m**3 + (Fg + 2 * N) * m
    if not cfg.disable_dynamic:
        total += m**4 + (Fg + cfg.n_slots + 2 * N) * m

    total += cfg.layers * (Fh * cfg.skip_channels + cfg.skip_channels)
    skip_total = cfg.layers * cfg.skip_channels
    total += skip_total * skip_total + skip_total
    out_dim = cfg.horizon * cfg.in_features
    total += skip_total * out_dim + out_dim
    return total


def l1_loss(pred_normalized: torch.Tensor, target_raw: torch.Tensor,
            normalizer: Normalizer) -> torch.Tensor:
    """Mean absolute error in raw signal units.

    Predictions come out of the network in normalized units and are inverted
    before comparison so the loss matches the reported metric scale.
    """
    std = torch.as_tensor(normalizer.std, dtype=pred_normalized.dtype)
    mean = torch.as_tensor(normalizer.mean, dtype=pred_normalized.dtype)
    pred_raw = pred_normalized * std + mean
    return (pred_raw - target_raw).abs().mean()


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, model: HeteroGraphNet,
                    normalizer: Normalizer) -> Path:
    """Versioned checkpoint: config echo + named float32 tensors + normalizer."""
    path = Path(path)
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "normalizer": normalizer.to_dict(),
    }
    arrays = {
        f"param::{name}": tensor.detach().cpu().numpy().astype("<f4")
        for name, tensor in model.state_dict().items()
    }
    buf = io.BytesIO()
    np.savez(buf, meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8),
             **arrays)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path: str | Path) -> tuple[HeteroGraphNet, Normalizer]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with np.load(path) as arrays:
        meta = json.loads(bytes(arrays["meta"]).decode("utf-8"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise DataError(
                f"unsupported checkpoint version {meta.get('version')!r}"
            )
        state = {
            name[len("param::"):]: torch.from_numpy(arrays[name].copy())
            for name in arrays.files
            if name.startswith("param::")
        }
    config = ModelConfig(**meta["config"])
    model = HeteroGraphNet(config)
    model.load_state_dict(state)
    normalizer = Normalizer.from_dict(meta["normalizer"])
    return model, normalizer
