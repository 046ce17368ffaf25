# src/nncore/layers.py
"""
Layer building blocks shared by the encoders, the fusion layers and the heads.
"""

from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.utils.errors import ShapeError

ATTENTION_INIT = 0.1
LEAKY_SLOPE = 0.2


def glorot_linear(in_dim: int, out_dim: int, bias: bool = True) -> nn.Linear:
    layer = nn.Linear(in_dim, out_dim, bias=bias)
    nn.init.xavier_uniform_(layer.weight)   # +-sqrt(6 / (fan_in + fan_out))
    if bias:
        nn.init.zeros_(layer.bias)
    return layer


class MLP(nn.Module):
    """
    Row-wise affine stack. ReLU follows every layer except the last one when
    activate_last is False (prediction heads).
    """

    def __init__(self, widths: Sequence[int], activate_last: bool = True):
        super().__init__()
        if len(widths) < 2:
            raise ShapeError(f"MLP needs at least input and output widths, got {list(widths)}")
        self.widths = list(widths)
        self.activate_last = activate_last
        self.layers = nn.ModuleList(
            glorot_linear(a, b) for a, b in zip(self.widths[:-1], self.widths[1:])
        )

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"MLP expects width {self.in_dim}, got {tuple(x.shape)}")
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < last or self.activate_last:
                x = F.relu(x)
        return x


# ================= SET POOLING =================

def max_pool_set(features: torch.Tensor) -> torch.Tensor:
    """
    Feature-wise max over a B x D set. The gradient of each column goes to
    its first maximal row.
    """
    if features.dim() != 2 or features.shape[0] == 0:
        raise ShapeError(f"max_pool_set needs a non-empty B x D set, got {tuple(features.shape)}")
    idx = torch.argmax(features, dim=0, keepdim=True)
    return features.gather(0, idx).squeeze(0)


def grouped_max_pool(features: torch.Tensor) -> torch.Tensor:
    """S x K x D -> S x D, same tie rule as max_pool_set within each group."""
    if features.dim() != 3 or features.shape[1] == 0:
        raise ShapeError(f"grouped_max_pool needs S x K x D, got {tuple(features.shape)}")
    idx = torch.argmax(features, dim=1, keepdim=True)
    return features.gather(1, idx).squeeze(1)


def idw_gather(features: torch.Tensor, neighbor_ids: torch.Tensor,
               weights: torch.Tensor) -> torch.Tensor:
    """Q x D output: sum_j weights[q, j] * features[neighbor_ids[q, j]]."""
    if neighbor_ids.shape != weights.shape:
        raise ShapeError(
            f"neighbor ids {tuple(neighbor_ids.shape)} and weights {tuple(weights.shape)} differ"
        )
    gathered = features[neighbor_ids]                       # Q x k x D
    return (gathered * weights.to(features.dtype).unsqueeze(-1)).sum(dim=1)


# ================= GRAPH ATTENTION =================

class GATLayer(nn.Module):
    """
    Multi-head graph attention over a dense boolean adjacency (self-loops
    included by the caller). Heads are concatenated.
    """

    def __init__(self, in_dim: int, out_dim: int, heads: int = 4,
                 negative_slope: float = LEAKY_SLOPE):
        super().__init__()
        if out_dim % heads:
            raise ShapeError(f"out_dim {out_dim} not divisible by heads {heads}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.heads = heads
        self.head_dim = out_dim // heads
        self.negative_slope = negative_slope

        self.lin = glorot_linear(in_dim, out_dim, bias=False)
        self.att_src = nn.Parameter(torch.empty(heads, self.head_dim))
        self.att_dst = nn.Parameter(torch.empty(heads, self.head_dim))
        self.bias = nn.Parameter(torch.zeros(out_dim))
        nn.init.uniform_(self.att_src, -ATTENTION_INIT, ATTENTION_INIT)
        nn.init.uniform_(self.att_dst, -ATTENTION_INIT, ATTENTION_INIT)

    def attention(self, h: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        """h: N x H x C transformed features -> N x N x H coefficients (rows over j)."""
        a_src = (h * self.att_src).sum(-1)                  # N x H
        a_dst = (h * self.att_dst).sum(-1)                  # N x H
        scores = F.leaky_relu(a_dst.unsqueeze(1) + a_src.unsqueeze(0), self.negative_slope)
        scores = scores.masked_fill(~adj.unsqueeze(-1), float("-inf"))
        return torch.softmax(scores, dim=1)

    def forward(self, x: torch.Tensor, adj: torch.Tensor,
                return_attention: bool = False):
        n = x.shape[0]
        if x.dim() != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"GAT expects N x {self.in_dim}, got {tuple(x.shape)}")
        if adj.shape != (n, n):
            raise ShapeError(f"adjacency {tuple(adj.shape)} does not match {n} nodes")
        adj = adj.to(torch.bool)
        if n and not adj.any(dim=1).all():
            raise ShapeError("isolated node without self-loop in adjacency")

        h = self.lin(x).view(n, self.heads, self.head_dim)
        alpha = self.attention(h, adj)                      # N x N x H
        out = torch.einsum("ijh,jhc->ihc", alpha, h).reshape(n, self.out_dim) + self.bias
        if return_attention:
            return out, alpha
        return out


# ================= LOSS =================

def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-softmax of the true class; labels index logits columns."""
    if logits.dim() != 2 or labels.dim() != 1 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} mismatch")
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError(
            f"labels must lie in [0, {logits.shape[1]}), got [{int(labels.min())}, {int(labels.max())}]"
        )
    return F.cross_entropy(logits, labels.long())
