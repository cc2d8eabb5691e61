"""History-window feature extractors producing the condition vector F_t.

All extractors map a ``(B, omega, D)`` window batch to a ``(B, hidden_size)``
tensor, the final hidden state of a single-layer GRU.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch
from torch import nn

from .gat import GatLayer

ExtractorKind = Literal["gru", "double_gat", "tcn_gat"]
SMOOTHING_KERNEL = 5
TCN_KERNELS = (3, 5, 7)


@dataclass
class FeatureState:
    vector: np.ndarray
    time_index: int


class Smoother(nn.Module):
    """Per-channel kernel-5 convolution along time, length preserving."""

    def __init__(self, n_channels: int, kernel_size: int = SMOOTHING_KERNEL):
        super().__init__()
        self.conv = nn.Conv1d(n_channels, n_channels, kernel_size, padding=kernel_size // 2, groups=n_channels)
        with torch.no_grad():
            taps = torch.tensor([0.1, 0.2, 0.4, 0.2, 0.1]) if kernel_size == 5 else torch.full((kernel_size,), 1.0 / kernel_size)
            self.conv.weight.copy_(taps.expand_as(self.conv.weight))
            self.conv.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x.transpose(1, 2)).transpose(1, 2)


class TCNBlock(nn.Module):
    """Average of three parallel convolutions with kernels 3, 5 and 7."""

    def __init__(self, n_channels: int, kernel_sizes=TCN_KERNELS):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Conv1d(n_channels, n_channels, k, padding=k // 2) for k in kernel_sizes
        )

    def branch_outputs(self, x: torch.Tensor) -> list[torch.Tensor]:
        xt = x.transpose(1, 2)
        return [b(xt).transpose(1, 2) for b in self.branches]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        outs = self.branch_outputs(x)
        return sum(outs) / len(outs)


class FeatureGat(nn.Module):
    """GAT whose nodes are channels, each described by its time profile."""

    def __init__(self, n_channels: int, window: int, adjacency=None, leaky_slope: float = 0.2):
        super().__init__()
        self.gat = GatLayer(window, window, leaky_slope, adjacency)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.gat(x.transpose(1, 2)).transpose(1, 2)


class TimeGat(nn.Module):
    """GAT whose nodes are timesteps, each described by its channel vector."""

    def __init__(self, n_channels: int, window: int, adjacency=None, leaky_slope: float = 0.2):
        super().__init__()
        self.gat = GatLayer(n_channels, n_channels, leaky_slope, adjacency)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.gat(x)


class Extractor(nn.Module):
    kind: str

    def __init__(self, n_channels: int, window: int, hidden_size: int):
        super().__init__()
        self.n_channels = n_channels
        self.window = window
        self.hidden_size = hidden_size

    def sequence(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 3 or x.shape[-1] != self.n_channels:
            raise ValueError(f"expected (B, omega, {self.n_channels}) windows, got {tuple(x.shape)}")
        _, h = self.gru(self.sequence(x))
        return h[-1]

    @torch.no_grad()
    def extract(self, window, time_index: int = 0) -> FeatureState:
        """Condition vector for a single ``(omega, D)`` window."""
        p = next(self.parameters())
        x = torch.as_tensor(np.asarray(window), dtype=p.dtype).unsqueeze(0)
        return FeatureState(self(x)[0].cpu().numpy(), int(time_index))


class GRUExtractor(Extractor):
    kind = "gru"

    def __init__(self, n_channels: int, window: int, hidden_size: int = 64):
        super().__init__(n_channels, window, hidden_size)
        self.gru = nn.GRU(n_channels, hidden_size, batch_first=True)

    def sequence(self, x):
        return x


class DoubleGatExtractor(Extractor):
    """Smooth, then time- and feature-oriented GATs in parallel, then a GRU over
    the per-timestep concatenation ``[time_gat, feature_gat, smoothed]``."""

    kind = "double_gat"

    def __init__(self, n_channels: int, window: int, hidden_size: int = 64,
                 time_adjacency=None, feature_adjacency=None):
        super().__init__(n_channels, window, hidden_size)
        if window < 2:
            raise ValueError("double_gat needs a window of at least 2")
        self.smooth = Smoother(n_channels)
        self.time_gat = TimeGat(n_channels, window, time_adjacency)
        self.feature_gat = FeatureGat(n_channels, window, feature_adjacency)
        self.gru = nn.GRU(3 * n_channels, hidden_size, batch_first=True)

    def sequence(self, x):
        s = self.smooth(x)
        return torch.cat([self.time_gat(s), self.feature_gat(s), s], dim=-1)


class TCNGatExtractor(Extractor):
    """Two (TCN -> feature GAT) blocks; the second block is fed the mean of the
    first block's output and the smoothed window."""

    kind = "tcn_gat"

    def __init__(self, n_channels: int, window: int, hidden_size: int = 64, feature_adjacency=None):
        super().__init__(n_channels, window, hidden_size)
        if window < 2:
            raise ValueError("tcn_gat needs a window of at least 2")
        self.smooth = Smoother(n_channels)
        self.tcn1 = TCNBlock(n_channels)
        self.gat1 = FeatureGat(n_channels, window, feature_adjacency)
        self.tcn2 = TCNBlock(n_channels)
        self.gat2 = FeatureGat(n_channels, window, feature_adjacency)
        self.gru = nn.GRU(3 * n_channels, hidden_size, batch_first=True)

    def blocks(self, x):
        """``(smoothed, block1, block2_input, block2)``."""
        s = self.smooth(x)
        b1 = self.gat1(self.tcn1(s))
        b2_in = (b1 + s) / 2
        b2 = self.gat2(self.tcn2(b2_in))
        return s, b1, b2_in, b2

    def sequence(self, x):
        s, b1, _, b2 = self.blocks(x)
        return torch.cat([b1, b2, s], dim=-1)


_KINDS = {"gru": GRUExtractor, "double_gat": DoubleGatExtractor, "tcn_gat": TCNGatExtractor}


def build_extractor(kind: str, n_channels: int, window: int, hidden_size: int = 64, **kwargs) -> Extractor:
    try:
        cls = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown extractor {kind!r}; choose from {sorted(_KINDS)}") from None
    return cls(n_channels, window, hidden_size, **kwargs)
