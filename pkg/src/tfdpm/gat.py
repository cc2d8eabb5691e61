"""Single-head graph attention over the nodes of a batched feature matrix."""
from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F


class GatLayer(nn.Module):
    """Masked graph attention layer.

    Input ``(B, N, F)``; each of the ``N`` nodes carries an ``F``-vector.
    The logit for edge ``i -> j`` is ``LeakyReLU(w . [h_i ; h_j])``; logits are
    softmax-normalised over the neighbourhood of ``i`` and used to mix value
    projections of the neighbours, followed by a sigmoid.

    ``adjacency`` is an optional boolean ``(N, N)`` mask; self-loops are always
    added. Without it every node attends to every node.
    """

    def __init__(
        self,
        in_features: int,
        out_features: int | None = None,
        leaky_slope: float = 0.2,
        adjacency: torch.Tensor | None = None,
    ):
        super().__init__()
        if not 0.0 < leaky_slope < 1.0:
            raise ValueError("leaky_slope must lie in (0, 1)")
        out_features = out_features or in_features
        self.in_features = in_features
        self.leaky_slope = leaky_slope
        # logit weights, split into the halves acting on h_i and h_j
        self.w_src = nn.Parameter(torch.empty(in_features))
        self.w_dst = nn.Parameter(torch.empty(in_features))
        self.w_bias = nn.Parameter(torch.zeros(()))
        self.value = nn.Linear(in_features, out_features)
        if adjacency is not None:
            adjacency = torch.as_tensor(adjacency, dtype=torch.bool).clone()
            if adjacency.ndim != 2 or adjacency.shape[0] != adjacency.shape[1]:
                raise ValueError("adjacency must be a square matrix")
            adjacency.fill_diagonal_(True)
        self.register_buffer("adjacency", adjacency, persistent=False)
        self.reset_parameters()

    def reset_parameters(self):
        bound = (6.0 / (2 * self.in_features + 1)) ** 0.5
        nn.init.uniform_(self.w_src, -bound, bound)
        nn.init.uniform_(self.w_dst, -bound, bound)
        nn.init.zeros_(self.w_bias)
        self.value.reset_parameters()

    def logits(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != self.in_features:
            raise ValueError(f"expected node features of size {self.in_features}, got {h.shape[-1]}")
        pre = (h @ self.w_src).unsqueeze(-1) + (h @ self.w_dst).unsqueeze(-2) + self.w_bias
        return F.leaky_relu(pre, self.leaky_slope)

    def attention_weights(self, h: torch.Tensor) -> torch.Tensor:
        """Row-stochastic ``(..., N, N)`` attention; non-neighbours are exactly 0."""
        e = self.logits(h)
        if self.adjacency is not None:
            if self.adjacency.shape[0] != e.shape[-1]:
                raise ValueError(f"adjacency is for {self.adjacency.shape[0]} nodes, input has {e.shape[-1]}")
            e = e.masked_fill(~self.adjacency, float("-inf"))
        return torch.softmax(e, dim=-1)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        alpha = self.attention_weights(h)
        return torch.sigmoid(alpha @ self.value(h))
