"""Slice-aggregation heads and the MLP classifier.

All aggregators take per-slice features ``g`` of shape ``(B, m, D, s, s)``
and return one ``(B, D)`` vector per patient.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

AGGREGATOR_KINDS = ("mean", "conv2d", "idxemb", "attn", "mhattn")


@dataclass
class AggregatorConfig:
    kind: str = "mean"
    pool_to_1: bool = True
    embed_dim: int = 512
    num_heads: int = 4
    max_slices: int = 32
    use_covariates: bool = False
    scaled_attention: bool = False

    def __post_init__(self):
        if self.kind not in AGGREGATOR_KINDS:
            raise ValueError(f"unknown aggregator {self.kind!r}; expected one of {AGGREGATOR_KINDS}")
        if self.kind == "mhattn" and not self.pool_to_1:
            raise ValueError("multihead attention works on pooled 512-vectors (pool_to_1=True)")


def _pool(g: torch.Tensor) -> torch.Tensor:
    """Global average over the trailing spatial dims, keeping them as 1x1."""
    return g.mean(dim=(-2, -1), keepdim=True)


def mean_aggregate(g: torch.Tensor) -> torch.Tensor:
    """(m, D) or (B, m, D, ...) -> mean over the slice axis."""
    return g.mean(dim=-2 if g.dim() == 2 else 1)


def index_embed(x: int, weight: torch.Tensor) -> torch.Tensor:
    """Column ``x`` of ``weight`` (k, m), i.e. ``weight @ one_hot(x)``."""
    if not 0 <= x < weight.shape[1]:
        raise IndexError(f"slice index {x} outside [0, {weight.shape[1] - 1}]")
    return weight[:, x]


def slice_attention(
    g: torch.Tensor, score_weight: torch.Tensor, score_bias: torch.Tensor | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax-weighted sum of slice features.

    ``g`` is (B, m, D, s, s); ``score_weight`` is (1, D, s, s), a valid conv
    that collapses each slice to one score ``h_i = relu(conv(g_i))``.
    Returns ``u`` (B, D, s, s) and the weights (B, m).
    """
    b, m = g.shape[:2]
    h = F.relu(F.conv2d(g.flatten(0, 1), score_weight, score_bias)).view(b, m)
    w = torch.softmax(h, dim=1)
    u = torch.einsum("bm,bm...->b...", w, g)
    return u, w


def multihead_attention(
    f: torch.Tensor,
    wq: torch.Tensor,
    wk: torch.Tensor,
    wv: torch.Tensor,
    wo: torch.Tensor,
    scaled: bool = False,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Full-width multihead self-attention over slices, summed over rows.

    ``f`` is (B, m, D); ``wq``, ``wk``, ``wv`` are (heads, D, D) right-multiplied
    (``Q = F @ wq[h]``); ``wo`` is (heads*D, D).  Returns the (B, D) row sum
    and the attention matrices (B, heads, m, m).
    """
    q = torch.einsum("bmd,hde->bhme", f, wq)
    k = torch.einsum("bmd,hde->bhme", f, wk)
    v = torch.einsum("bmd,hde->bhme", f, wv)
    scores = q @ k.transpose(-1, -2)
    if scaled:
        scores = scores / q.shape[-1] ** 0.5
    attn = torch.softmax(scores, dim=-1)
    z = attn @ v  # (B, heads, m, D)
    concat = z.permute(0, 2, 1, 3).flatten(2)  # (B, m, heads*D)
    return (concat @ wo).sum(dim=1), attn


class MeanAggregator(nn.Module):
    def forward(self, g):
        return _pool(g).flatten(2).mean(dim=1)


class Conv2dAggregator(nn.Module):
    """Valid conv over the whole 4x4 map (D -> D, ReLU), then slice mean."""

    def __init__(self, dim: int, spatial: int = 4):
        super().__init__()
        self.conv = nn.Conv2d(dim, dim, spatial)

    def forward(self, g):
        b, m = g.shape[:2]
        y = F.relu(self.conv(g.flatten(0, 1)))
        return y.view(b, m, -1).mean(dim=1)


class IdxEmbAggregator(nn.Module):
    """Add a learned per-index embedding to each slice, 3x3 conv, GAP, mean."""

    def __init__(self, dim: int, max_slices: int = 32, pool_to_1: bool = True):
        super().__init__()
        self.pool_to_1 = pool_to_1
        self.embedding = nn.Linear(max_slices, dim, bias=False)  # weight is (k, m)
        self.conv = nn.Conv2d(dim, dim, 3, padding=1)

    def forward(self, g):
        if self.pool_to_1:
            g = _pool(g)
        b, m = g.shape[:2]
        if m > self.embedding.weight.shape[1]:
            raise ValueError(f"{m} slices exceed the embedding's {self.embedding.weight.shape[1]}")
        emb = self.embedding.weight[:, :m].t()  # (m, D)
        x = g + emb[None, :, :, None, None]
        y = F.relu(self.conv(x.flatten(0, 1)))
        return y.mean(dim=(-2, -1)).view(b, m, -1).mean(dim=1)


class AttnAggregator(nn.Module):
    def __init__(self, dim: int, pool_to_1: bool = True, spatial: int = 4):
        super().__init__()
        self.pool_to_1 = pool_to_1
        self.score = nn.Conv2d(dim, 1, 1 if pool_to_1 else spatial)
        self.last_weights: torch.Tensor | None = None

    def forward(self, g):
        if self.pool_to_1:
            g = _pool(g)
        u, w = slice_attention(g, self.score.weight, self.score.bias)
        self.last_weights = w.detach()
        return u.mean(dim=(-2, -1))


class MHAttnAggregator(nn.Module):
    def __init__(self, dim: int, num_heads: int = 4, scaled: bool = False):
        super().__init__()
        self.scaled = scaled
        bound = dim**-0.5
        self.wq = nn.Parameter(torch.empty(num_heads, dim, dim).uniform_(-bound, bound))
        self.wk = nn.Parameter(torch.empty(num_heads, dim, dim).uniform_(-bound, bound))
        self.wv = nn.Parameter(torch.empty(num_heads, dim, dim).uniform_(-bound, bound))
        bound_o = (num_heads * dim) ** -0.5
        self.wo = nn.Parameter(torch.empty(num_heads * dim, dim).uniform_(-bound_o, bound_o))
        self.last_weights: torch.Tensor | None = None

    def forward(self, g):
        f = _pool(g).flatten(2)
        out, attn = multihead_attention(f, self.wq, self.wk, self.wv, self.wo, self.scaled)
        self.last_weights = attn.detach()
        return out


def build_aggregator(cfg: AggregatorConfig, dim: int) -> nn.Module:
    if cfg.kind == "mean":
        return MeanAggregator()
    if cfg.kind == "conv2d":
        return Conv2dAggregator(dim)
    if cfg.kind == "idxemb":
        return IdxEmbAggregator(dim, cfg.max_slices, cfg.pool_to_1)
    if cfg.kind == "attn":
        return AttnAggregator(dim, cfg.pool_to_1)
    return MHAttnAggregator(dim, cfg.num_heads, cfg.scaled_attention)


class ClassifierHead(nn.Module):
    """Linear(D -> 16) + ReLU, optional (age, sex) concat, Linear(-> C) logits."""

    hidden = 16

    def __init__(self, in_dim: int, num_classes: int, use_covariates: bool = False):
        super().__init__()
        self.use_covariates = use_covariates
        self.reduce = nn.Linear(in_dim, self.hidden)
        self.out = nn.Linear(self.hidden + (2 if use_covariates else 0), num_classes)

    def forward(self, u: torch.Tensor, cov: torch.Tensor | None = None) -> torch.Tensor:
        h = F.relu(self.reduce(u))
        if self.use_covariates:
            if cov is None:
                raise ValueError("classifier expects (age_norm, sex_dummy) covariates")
            h = torch.cat([h, cov.to(h.dtype)], dim=1)
        return self.out(h)
