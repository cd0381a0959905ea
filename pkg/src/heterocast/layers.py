"""Learnable layer primitives: gated dilated causal temporal convolution and
channel-attention diffusion graph convolution over heterogeneous adjacencies.

Hidden states are laid out (batch, channel, node, time) throughout.
"""

from __future__ import annotations

import torch
from torch import nn

from .attention import ChannelAttention


class GatedTemporalConv(nn.Module):
    """tanh/sigmoid-gated dilated causal convolution along the time axis.

    No padding: the output is shorter by (kernel_size - 1) * dilation, so
    every output step depends only on its receptive window of past inputs.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 2,
                 dilation: int = 1):
        super().__init__()
        self.kernel_size = kernel_size
        self.dilation = dilation
        self.filter_conv = nn.Conv2d(
            in_channels, out_channels, (1, kernel_size), dilation=(1, dilation), bias=False
        )
        self.gate_conv = nn.Conv2d(
            in_channels, out_channels, (1, kernel_size), dilation=(1, dilation), bias=False
        )

    @property
    def shrink(self) -> int:
        return (self.kernel_size - 1) * self.dilation

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, F, N, L) -> (B, F_out, N, L - shrink)
        if x.shape[-1] < self.shrink + 1:
            raise ValueError(
                f"temporal length {x.shape[-1]} too short for kernel "
                f"{self.kernel_size} at dilation {self.dilation}"
            )
        return torch.tanh(self.filter_conv(x)) * torch.sigmoid(self.gate_conv(x))


def propagate(adj: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    """One diffusion step: per-channel matrix-vector product over nodes.

    ``adj`` is (F, N, N) shared across the batch or (B, F, N, N) per sample;
    ``h`` is (B, F, N, L).
    """
    if adj.dim() == 3:
        return torch.einsum("fnj,bfjl->bfnl", adj, h)
    return torch.einsum("bfnj,bfjl->bfnl", adj, h)


class HeteroGraphConv(nn.Module):
    """Diffusion graph convolution with per-step channel attention.

    out = sum_{k=0}^{K} mix(alpha_k * A^k h, theta_k), where alpha_k is the
    attention of diffusion step k applied to the pooled adjacency statistics
    and theta_k mixes channels pointwise over (node, time).  A^0 is the
    identity.  With attention disabled, alpha_k is all ones.
    """

    def __init__(self, in_channels: int, out_channels: int, max_diffusion_step: int,
                 attention_reduction: int, use_attention: bool = True):
        super().__init__()
        if max_diffusion_step < 0:
            raise ValueError(f"max diffusion step must be >= 0, got {max_diffusion_step}")
        self.max_diffusion_step = max_diffusion_step
        self.theta = nn.Parameter(
            torch.zeros(max_diffusion_step + 1, out_channels, in_channels)
        )
        if use_attention:
            self.attentions = nn.ModuleList(
                ChannelAttention(in_channels, attention_reduction)
                for _ in range(max_diffusion_step + 1)
            )
        else:
            self.attentions = None

    def attention_weights(self, pooled: torch.Tensor) -> list[torch.Tensor]:
        """One attention vector per diffusion step for the given pooled stats."""
        if self.attentions is None:
            return [torch.ones_like(pooled) for _ in range(self.max_diffusion_step + 1)]
        return [att(pooled) for att in self.attentions]

    def forward(self, h: torch.Tensor, adj: torch.Tensor,
                pooled: torch.Tensor) -> torch.Tensor:
        # h: (B, F, N, L); adj: (F, N, N) or (B, F, N, N); pooled: (F,) or (B, F)
        if adj.shape[-3] != h.shape[1]:
            raise ValueError(
                f"adjacency channels {adj.shape[-3]} do not match hidden channels {h.shape[1]}"
            )
        alphas = self.attention_weights(pooled)
        power = h
        out = None
        for k in range(self.max_diffusion_step + 1):
            if k > 0:
                power = propagate(adj, power)
            scale = alphas[k].reshape(alphas[k].shape + (1, 1))  # (F,1,1) or (B,F,1,1)
            term = torch.einsum("of,bfnl->bonl", self.theta[k], scale * power)
            out = term if out is None else out + term
        return out
