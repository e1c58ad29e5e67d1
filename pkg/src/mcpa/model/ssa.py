"""Shunted attention blocks: queries attend at full length while each head
group sees keys/values aggregated at its own spatial rate, keeping long
sequences cheap without giving up small-object tokens."""

from __future__ import annotations

import numpy as np

from .. import nn
from ..tensor import ConfigError, Tensor
from ..tensor import functional as F


class TokenAggregation(nn.Module):
    """Strided conv (kernel = stride = rate) over the token grid, then norm+act.

    Shortens a (N, H*W, C) sequence to (N, H*W/rate^2, C).
    """

    def __init__(self, dim: int, rate: int, rng: np.random.Generator):
        self.rate = rate
        self.conv = nn.Conv2d(dim, dim, rate, rng, stride=rate)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x, h: int, w: int):
        r = self.rate
        if h % r or w % r:
            raise ConfigError(f"token grid {h}x{w} not divisible by aggregation rate {r}")
        g = F.tokens_to_grid(x, h, w)
        g = self.conv(g)
        out = F.grid_to_tokens(g)
        return F.gelu(self.norm(out)), h // r, w // r


class _HeadGroup(nn.Module):
    """One rate group: optional aggregation, fused K/V projection, V detail conv."""

    def __init__(self, dim: int, group_width: int, rate: int, rng: np.random.Generator):
        self.rate = rate
        self.mta = TokenAggregation(dim, rate, rng) if rate > 1 else None
        self.kv = nn.Linear(dim, 2 * group_width, rng)
        self.local = nn.Conv2d(group_width, group_width, 3, rng, padding=1, groups=group_width)


class ShuntedAttention(nn.Module):
    """Multi-head attention with per-group K/V aggregation rates.

    With both rates 1 and a zeroed V detail conv this reduces exactly to
    standard multi-head self-attention over the same projections.
    """

    def __init__(self, dim: int, heads: int, rates: tuple[int, int], rng: np.random.Generator):
        if dim % heads:
            raise ConfigError(f"dim {dim} not divisible by {heads} heads")
        if heads == 1 or rates[0] == rates[1]:
            group_heads = [heads]
            group_rates = [rates[0]]
        else:
            if heads % 2:
                raise ConfigError(f"two aggregation rates need an even head count, got {heads}")
            group_heads = [heads // 2, heads // 2]
            group_rates = list(rates)
        self.heads = heads
        self.dim = dim
        self.group_heads = group_heads
        self.q = nn.Linear(dim, dim, rng)
        self.groups = nn.ModuleList(
            [
                _HeadGroup(dim, gh * (dim // heads), r, rng)
                for gh, r in zip(group_heads, group_rates)
            ]
        )
        self.proj = nn.Linear(dim, dim, rng)

    def forward(self, x, h: int, w: int):
        n, l, c = x.data.shape
        d = c // self.heads
        scale = 1.0 / np.sqrt(d)
        qh = F.transpose(F.reshape(self.q(x), (n, l, self.heads, d)), (0, 2, 1, 3))

        outs = []
        h0 = 0
        for gh, grp in zip(self.group_heads, self.groups):
            if grp.mta is not None:
                xs, hk, wk = grp.mta(x, h, w)
            else:
                xs, hk, wk = x, h, w
            lk = xs.data.shape[1]
            gw = gh * d
            kv = F.transpose(F.reshape(grp.kv(xs), (n, lk, 2, gh, d)), (2, 0, 3, 1, 4))
            k, v = kv[0], kv[1]
            # V keeps a local detail path: v <- v + depthwise(v) on its grid
            v_tok = F.reshape(F.transpose(v, (0, 2, 1, 3)), (n, lk, gw))
            v_loc = F.grid_to_tokens(grp.local(F.tokens_to_grid(v_tok, hk, wk)))
            v_tok = v_tok + v_loc
            v = F.transpose(F.reshape(v_tok, (n, lk, gh, d)), (0, 2, 1, 3))

            qg = qh[:, h0 : h0 + gh]
            attn = F.softmax_lastdim(F.matmul(qg, F.transpose(k, (0, 1, 3, 2))) * scale)
            outs.append(F.matmul(attn, v))
            h0 += gh

        ctx = outs[0] if len(outs) == 1 else F.concat(outs, axis=1)
        ctx = F.reshape(F.transpose(ctx, (0, 2, 1, 3)), (n, l, c))
        return self.proj(ctx)


class SsaFfn(nn.Module):
    """Feed-forward with a depthwise detail path on the token grid.

    out = x + W2 . gelu(W1 . norm(x) + depthwise(W1 . norm(x))); with all-zero
    weights this is the identity, so the residual is part of the contract.
    """

    def __init__(self, dim: int, rng: np.random.Generator, ratio: int = 4):
        hidden = dim * ratio
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden, rng)
        self.dw = nn.depthwise_conv2d(hidden, 3, rng)
        self.fc2 = nn.Linear(hidden, dim, rng)

    def forward(self, x, h: int, w: int):
        y = self.fc1(self.norm(x))
        y = y + F.grid_to_tokens(self.dw(F.tokens_to_grid(y, h, w)))
        return x + self.fc2(F.gelu(y))


class SsaBlock(nn.Module):
    def __init__(self, dim: int, heads: int, rates: tuple[int, int], rng: np.random.Generator, ratio: int = 4):
        self.norm1 = nn.LayerNorm(dim)
        self.attn = ShuntedAttention(dim, heads, rates, rng)
        self.ffn = SsaFfn(dim, rng, ratio)

    def forward(self, x, h: int, w: int):
        x = x + self.attn(self.norm1(x), h, w)
        return self.ffn(x, h, w)
