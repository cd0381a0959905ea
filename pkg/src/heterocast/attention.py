"""Network-decentralization pooling and the channel attention bottleneck.

A channel whose graph spreads weight over many nodes carries information from
diverse neighbors; pooling measures that as one minus the normalized degree
centralization of the channel's adjacency.  The pooled vector feeds a
two-layer bottleneck whose softmax output reweights the channels during graph
convolution.
"""

from __future__ import annotations

import torch
from torch import nn


def decentralization_pool(adj: torch.Tensor) -> torch.Tensor:
    """Per-channel decentralization of an adjacency tensor.

    ``adj`` has shape (..., F, N, N); returns (..., F).  For each channel,
    1 - [N·max_i(rowsum_i) - total] / [(N-1)(N-2)·max_entry].  Degenerate
    channels (all-zero, or N <= 2 where the scale vanishes) pool to 1,
    i.e. fully decentralized.
    """
    N = adj.shape[-1]
    rowsum = adj.sum(dim=-1)  # (..., F, N)
    max_row = rowsum.max(dim=-1).values  # (..., F)
    total = rowsum.sum(dim=-1)
    max_entry = adj.amax(dim=(-2, -1))
    if N <= 2:
        return torch.ones_like(max_entry)
    degenerate = max_entry <= 0
    denom = (N - 1) * (N - 2) * torch.where(degenerate, torch.ones_like(max_entry), max_entry)
    y = 1.0 - (N * max_row - total) / denom
    return torch.where(degenerate, torch.ones_like(y), y)


def global_average_pool(adj: torch.Tensor) -> torch.Tensor:
    """Plain mean over all N^2 entries per channel (ablation pooling)."""
    return adj.mean(dim=(-2, -1))


class ChannelAttention(nn.Module):
    """softmax(W2 relu(W1 y)) over channels; no bias terms.

    W1 compresses F to F/r and W2 expands back, keeping the module cheap
    while letting channels interact.
    """

    def __init__(self, n_channels: int, reduction: int):
        super().__init__()
        if n_channels % reduction != 0:
            raise ValueError(
                f"reduction {reduction} must divide channel count {n_channels}"
            )
        bottleneck = n_channels // reduction
        self.w1 = nn.Parameter(torch.zeros(bottleneck, n_channels))
        self.w2 = nn.Parameter(torch.zeros(n_channels, bottleneck))

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        # pooled: (F,) or (B, F) -> attention weights of the same shape
        hidden = torch.relu(pooled @ self.w1.T)
        return torch.softmax(hidden @ self.w2.T, dim=-1)
