"""Cross-scale fusion bridge replacing plain skip connections.

Four per-scale perceptrons capture local cross-scale correlations, the fused
pair of folded sequences goes through a modified cross attention, and one
global attention+FFN pass over the full folded sequence models long-range
structure before everything is split back to its native scale.

Every scale is reshaped ("folded") to a common narrow channel width before
token-axis concatenation; a ledger of (scale, length, grid) segments makes
the fold exactly invertible and gives the aggregation convs a deterministic
spatial reading of each segment (fold factor split across the two grid axes
as evenly as possible).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import nn
from ..tensor import ConfigError, ShapeError, Tensor
from ..tensor import functional as F
from .backbone import MultiScaleFeatures
from .config import BridgeConfig, ModelConfig, StageSpec


def _balanced_split(f: int) -> tuple[int, int]:
    """Factor f = a*b with a >= b and a as small as possible."""
    a = f
    for cand in range(int(np.ceil(np.sqrt(f))), f + 1):
        if f % cand == 0:
            a = cand
            break
    return a, f // a


@dataclass(frozen=True)
class Segment:
    scale: int  # 1-based stage index
    length: int  # folded token count: L * C / fold_width
    h: int
    w: int
    a: int  # grid extension factors; folded grid is (h*a, w*b)
    b: int

    @property
    def grid(self) -> tuple[int, int]:
        return self.h * self.a, self.w * self.b


@dataclass
class FoldedSeq:
    tokens: Tensor  # (N, sum(lengths), fold_width)
    segments: tuple[Segment, ...]

    @property
    def length(self) -> int:
        return self.tokens.data.shape[1]


def fold_scales(feats, fold_width: int) -> FoldedSeq:
    """Reshape each (tokens, scale, h, w) entry to the common fold width and
    concatenate along the token axis, recording the segment ledger."""
    parts, segments = [], []
    for tokens, scale, h, w in feats:
        n, l, c = tokens.data.shape
        if c % fold_width:
            raise ConfigError(f"scale {scale}: channel width {c} not divisible by fold width {fold_width}")
        f = c // fold_width
        a, b = _balanced_split(f)
        parts.append(F.reshape(tokens, (n, l * f, fold_width)))
        segments.append(Segment(scale=scale, length=l * f, h=h, w=w, a=a, b=b))
    tokens = parts[0] if len(parts) == 1 else F.concat(parts, axis=1)
    return FoldedSeq(tokens, tuple(segments))


def split_segments(folded: FoldedSeq):
    """Slice the folded tokens back into per-segment tensors (ledger order)."""
    out, start = [], 0
    for seg in folded.segments:
        out.append(folded.tokens[:, start : start + seg.length])
        start += seg.length
    if start != folded.tokens.data.shape[1]:
        raise ShapeError(
            f"segment ledger sums to {start} but the folded sequence has "
            f"{folded.tokens.data.shape[1]} tokens"
        )
    return out


def unfold_scales(folded: FoldedSeq):
    """Exact inverse of fold_scales: list of (tokens, scale, h, w)."""
    out = []
    for seg, part in zip(folded.segments, split_segments(folded)):
        n, lf, cf = part.data.shape
        f = seg.a * seg.b
        out.append((F.reshape(part, (n, lf // f, f * cf)), seg.scale, seg.h, seg.w))
    return out


def seg_to_grid(tokens, seg: Segment):
    """View one folded segment as an NCHW grid of shape (h*a, w*b)."""
    n, lf, cf = tokens.data.shape
    x = F.reshape(tokens, (n, seg.h, seg.w, seg.a, seg.b, cf))
    x = F.transpose(x, (0, 5, 1, 3, 2, 4))
    return F.reshape(x, (n, cf, seg.h * seg.a, seg.w * seg.b))


def grid_to_seg(grid):
    """Inverse of seg_to_grid for an (N, C, H, W) grid (any segment shape)."""
    n, c, gh, gw = grid.data.shape
    return F.grid_to_tokens(grid)


def _grid_tokens_to_seg(tokens, n, cf, h, a, w, b):
    x = F.reshape(tokens, (n, h, a, w, b, cf))
    x = F.transpose(x, (0, 1, 3, 2, 4, 5))
    return F.reshape(x, (n, h * w * a * b, cf))


def seg_from_grid(grid, seg: Segment):
    """Tokens in folded order from an (N, cf, h*a, w*b) grid."""
    n, cf, gh, gw = grid.data.shape
    x = F.reshape(grid, (n, cf, seg.h, seg.a, seg.w, seg.b))
    x = F.transpose(x, (0, 2, 4, 3, 5, 1))
    return F.reshape(x, (n, seg.length, cf))


class SegmentedAggregation(nn.Module):
    """Strided conv aggregation applied per ledger segment on its grid."""

    def __init__(self, cf: int, rate: int, rng: np.random.Generator):
        self.rate = rate
        self.conv = nn.Conv2d(cf, cf, rate, rng, stride=rate)
        self.norm = nn.LayerNorm(cf)

    def forward(self, folded: FoldedSeq) -> FoldedSeq:
        r = self.rate
        outs, segs = [], []
        for seg, part in zip(folded.segments, split_segments(folded)):
            gh, gw = seg.grid
            if gh % r or gw % r:
                raise ConfigError(
                    f"scale-{seg.scale} folded grid {gh}x{gw} not divisible by aggregation rate {r}"
                )
            g = self.conv(seg_to_grid(part, seg))
            outs.append(F.grid_to_tokens(g))
            segs.append(Segment(seg.scale, (gh // r) * (gw // r), gh // r, gw // r, 1, 1))
        tokens = outs[0] if len(outs) == 1 else F.concat(outs, axis=1)
        tokens = F.gelu(self.norm(tokens))
        return FoldedSeq(tokens, tuple(segs))


class SegmentedDepthwise(nn.Module):
    """Depthwise 3x3 applied per ledger segment on its grid."""

    def __init__(self, ch: int, rng: np.random.Generator):
        self.conv = nn.depthwise_conv2d(ch, 3, rng)

    def forward(self, folded_tokens, segments) -> Tensor:
        outs, start = [], 0
        for seg in segments:
            part = folded_tokens[:, start : start + seg.length]
            start += seg.length
            outs.append(seg_from_grid(self.conv(seg_to_grid(part, seg)), seg))
        return outs[0] if len(outs) == 1 else F.concat(outs, axis=1)


class PerceptronFfn(nn.Module):
    """Residual two-layer feed-forward: x + W2 . gelu(W1 . x)."""

    def __init__(self, dim: int, rng: np.random.Generator, ratio: int = 4):
        self.fc1 = nn.Linear(dim, dim * ratio, rng)
        self.fc2 = nn.Linear(dim * ratio, dim, rng)

    def forward(self, x):
        return x + self.fc2(F.gelu(self.fc1(x)))


def _pool_tokens(x, h: int, w: int, factor: int, what: str):
    if factor == 1:
        return x, h, w
    if h % factor or w % factor:
        raise ConfigError(f"{what}: grid {h}x{w} not divisible by pooling factor {factor}")
    g = F.avg_pool2d(F.tokens_to_grid(x, h, w), factor)
    return F.grid_to_tokens(g), h // factor, w // factor


def _upsample_tokens(x, h: int, w: int, factor: int):
    if factor == 1:
        return x, h, w
    g = F.upsample_nearest2d(F.tokens_to_grid(x, h, w), factor)
    return F.grid_to_tokens(g), h * factor, w * factor


class CrossPerceptron(nn.Module):
    """One per-scale perceptron: cross attention from this scale's queries to
    a set of resampled source sequences, channel reduction, then FFN.

    Queries and every key/value source are average-pooled one level coarser
    than their native stride and projected to twice the stage width; the
    result is returned at the stage's native shape.
    """

    def __init__(self, spec: StageSpec, kv_channels, rng: np.random.Generator, ratio: int = 4):
        width = 2 * spec.channels
        self.width = width
        self.heads = max(1, width // 64)
        self.index = spec.index
        self.wq = nn.Linear(spec.channels, width, rng)
        self.wk = nn.ModuleList([nn.Linear(c, width, rng) for c in kv_channels])
        self.wv = nn.ModuleList([nn.Linear(c, width, rng) for c in kv_channels])
        self.reduce = nn.Linear(len(kv_channels) * width, spec.channels, rng)
        self.ffn = PerceptronFfn(spec.channels, rng, ratio)

    def forward(self, q_feat, q_hw, kv_feats, trace=None):
        qt, qh, qw = _pool_tokens(q_feat, q_hw[0], q_hw[1], 2, f"perceptron {self.index} queries")
        q = self.wq(qt)
        outs, kv_lens = [], []
        for j, (src, (sh, sw)) in enumerate(kv_feats):
            st, _, _ = _pool_tokens(src, sh, sw, 2, f"perceptron {self.index} source {j + 1}")
            kv_lens.append(st.data.shape[1])
            outs.append(F.scaled_dot_attention(q, self.wk[j](st), self.wv[j](st), self.heads))
        cat = outs[0] if len(outs) == 1 else F.concat(outs, axis=2)
        if trace is not None:
            trace[f"p{self.index}"] = {
                "q_len": q.data.shape[1],
                "kv_lens": kv_lens,
                "concat_width": cat.data.shape[2],
            }
        y = self.ffn(self.reduce(cat))
        y, _, _ = _upsample_tokens(y, qh, qw, 2)
        return y


class McpaPerceptron(nn.Module):
    """Cross attention whose key/value side is the shallow folded pair,
    aggregated at two rates across the head groups; queries come from the
    deep folded pair. Output keeps the query ledger."""

    def __init__(self, cf: int, heads: int, rates: tuple[int, int], rng: np.random.Generator, ratio: int = 4):
        if cf % heads:
            raise ConfigError(f"fold width {cf} not divisible by {heads} heads")
        if heads == 1 or rates[0] == rates[1]:
            self.group_heads = [heads]
            group_rates = [rates[0]]
        else:
            if heads % 2:
                raise ConfigError("two aggregation rates need an even head count")
            self.group_heads = [heads // 2, heads // 2]
            group_rates = list(rates)
        self.heads = heads
        self.norm_q = nn.LayerNorm(cf)
        self.norm_kv = nn.LayerNorm(cf)
        self.wq = nn.Linear(cf, cf, rng)
        self.aggs = nn.ModuleList(
            [SegmentedAggregation(cf, r, rng) if r > 1 else _Identity() for r in group_rates]
        )
        self.kvs = nn.ModuleList(
            [nn.Linear(cf, 2 * gh * (cf // heads), rng) for gh in self.group_heads]
        )
        self.proj = nn.Linear(cf, cf, rng)
        self.ffn = PerceptronFfn(cf, rng, ratio)

    def forward(self, f34: FoldedSeq, f12: FoldedSeq, trace=None) -> FoldedSeq:
        n, lq, cf = f34.tokens.data.shape
        d = cf // self.heads
        scale = 1.0 / np.sqrt(d)
        qn = self.norm_q(f34.tokens)
        kvn = FoldedSeq(self.norm_kv(f12.tokens), f12.segments)
        qh = F.transpose(F.reshape(self.wq(qn), (n, lq, self.heads, d)), (0, 2, 1, 3))

        outs, h0, kv_lens = [], 0, []
        for gh, agg, kv_proj in zip(self.group_heads, self.aggs, self.kvs):
            ks = agg(kvn) if isinstance(agg, SegmentedAggregation) else kvn
            lk = ks.tokens.data.shape[1]
            kv_lens.append(lk)
            kv = F.transpose(F.reshape(kv_proj(ks.tokens), (n, lk, 2, gh, d)), (2, 0, 3, 1, 4))
            k, v = kv[0], kv[1]
            qg = qh[:, h0 : h0 + gh]
            attn = F.softmax_lastdim(F.matmul(qg, F.transpose(k, (0, 1, 3, 2))) * scale)
            outs.append(F.matmul(attn, v))
            h0 += gh
        ctx = outs[0] if len(outs) == 1 else F.concat(outs, axis=1)
        ctx = F.reshape(F.transpose(ctx, (0, 2, 1, 3)), (n, lq, cf))
        tokens = f34.tokens + self.proj(ctx)
        tokens = self.ffn(tokens)
        if trace is not None:
            trace["p4"] = {"q_len": lq, "kv_lens": kv_lens}
        return FoldedSeq(tokens, f34.segments)


class _Identity(nn.Module):
    def forward(self, x):
        return x


class GlobalPerceptron(nn.Module):
    """One shunted attention + FFN pass over the full folded sequence, then a
    split back into the four scales with a per-scale output projection."""

    def __init__(
        self,
        cf: int,
        heads: int,
        rates: tuple[int, int],
        stage_channels,
        rng: np.random.Generator,
        ratio: int = 4,
    ):
        if cf % heads:
            raise ConfigError(f"fold width {cf} not divisible by {heads} heads")
        if heads == 1 or rates[0] == rates[1]:
            self.group_heads = [heads]
            group_rates = [rates[0]]
        else:
            if heads % 2:
                raise ConfigError("two aggregation rates need an even head count")
            self.group_heads = [heads // 2, heads // 2]
            group_rates = list(rates)
        self.heads = heads
        d = cf // heads
        self.norm1 = nn.LayerNorm(cf)
        self.wq = nn.Linear(cf, cf, rng)
        self.aggs = nn.ModuleList(
            [SegmentedAggregation(cf, r, rng) if r > 1 else _Identity() for r in group_rates]
        )
        self.kvs = nn.ModuleList([nn.Linear(cf, 2 * gh * d, rng) for gh in self.group_heads])
        self.locals = nn.ModuleList([SegmentedDepthwise(gh * d, rng) for gh in self.group_heads])
        self.proj = nn.Linear(cf, cf, rng)
        hidden = cf * ratio
        self.norm2 = nn.LayerNorm(cf)
        self.fc1 = nn.Linear(cf, hidden, rng)
        self.dw = SegmentedDepthwise(hidden, rng)
        self.fc2 = nn.Linear(hidden, cf, rng)
        self.out_projs = nn.ModuleList([nn.Linear(c, c, rng) for c in stage_channels])

    def _attention(self, folded: FoldedSeq, trace=None) -> Tensor:
        n, lq, cf = folded.tokens.data.shape
        d = cf // self.heads
        scale = 1.0 / np.sqrt(d)
        xn = FoldedSeq(self.norm1(folded.tokens), folded.segments)
        qh = F.transpose(F.reshape(self.wq(xn.tokens), (n, lq, self.heads, d)), (0, 2, 1, 3))
        outs, h0, kv_lens = [], 0, []
        for gh, agg, kv_proj, local in zip(self.group_heads, self.aggs, self.kvs, self.locals):
            ks = agg(xn) if isinstance(agg, SegmentedAggregation) else xn
            lk = ks.tokens.data.shape[1]
            kv_lens.append(lk)
            gw = gh * d
            kv = F.transpose(F.reshape(kv_proj(ks.tokens), (n, lk, 2, gh, d)), (2, 0, 3, 1, 4))
            k, v = kv[0], kv[1]
            v_tok = F.reshape(F.transpose(v, (0, 2, 1, 3)), (n, lk, gw))
            v_tok = v_tok + local(v_tok, ks.segments)
            v = F.transpose(F.reshape(v_tok, (n, lk, gh, d)), (0, 2, 1, 3))
            qg = qh[:, h0 : h0 + gh]
            attn = F.softmax_lastdim(F.matmul(qg, F.transpose(k, (0, 1, 3, 2))) * scale)
            outs.append(F.matmul(attn, v))
            h0 += gh
        ctx = outs[0] if len(outs) == 1 else F.concat(outs, axis=1)
        ctx = F.reshape(F.transpose(ctx, (0, 2, 1, 3)), (n, lq, cf))
        if trace is not None:
            trace["global"] = {"q_len": lq, "kv_lens": kv_lens}
        return self.proj(ctx)

    def forward(self, folded: FoldedSeq, trace=None):
        tokens = folded.tokens + self._attention(folded, trace)
        y = self.fc1(self.norm2(tokens))
        y = y + self.dw(y, folded.segments)
        tokens = tokens + self.fc2(F.gelu(y))
        outs = []
        for tok, scale_idx, h, w in unfold_scales(FoldedSeq(tokens, folded.segments)):
            outs.append((self.out_projs[scale_idx - 1](tok), scale_idx, h, w))
        return outs


class Bridge(nn.Module):
    """Wires the perceptrons together; any of them can be toggled off
    (pass-through), reproducing the ablation grid down to a pure-skip U-Net."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        specs = cfg.stage_specs()
        b = cfg.bridge
        self.cfg = cfg
        self.toggles = (
            b.perceptron1,
            b.perceptron2,
            b.perceptron3,
            b.perceptron4,
            b.global_perceptron,
        )
        self.fold_shallow_source = b.fold_shallow_source
        cf = cfg.fold_width
        c = [s.channels for s in specs]
        ratio = b.ffn_ratio
        if b.perceptron1:
            self.p1 = CrossPerceptron(specs[0], [c[0]], rng, ratio)
        if b.perceptron2:
            self.p2 = CrossPerceptron(specs[1], [c[0], c[0]], rng, ratio)
        if b.perceptron3:
            self.p3 = CrossPerceptron(specs[2], [c[0], c[1], c[1]], rng, ratio)
        if b.perceptron4:
            self.ffn4 = PerceptronFfn(c[3], rng, ratio)
            self.mcpa = McpaPerceptron(cf, b.mcpa_heads, b.mcpa_rates, rng, ratio)
        if b.global_perceptron:
            self.gper = GlobalPerceptron(cf, b.g_heads, b.g_rates, c, rng, ratio)
        self.last_trace: dict = {}

    def forward(self, ms: MultiScaleFeatures) -> MultiScaleFeatures:
        t1, t2, t3, t4, tg = self.toggles
        f1, f2, f3, f4 = ms.feats
        d1, d2, d3, d4 = ms.dims
        cf = self.cfg.fold_width
        trace: dict = {}

        p1o = self.p1(f1, d1, [(f1, d1)], trace) if t1 else f1
        p2o = self.p2(f2, d2, [(f1, d1), (p1o, d1)], trace) if t2 else f2
        p3o = self.p3(f3, d3, [(p1o, d1), (f2, d2), (p2o, d2)], trace) if t3 else f3
        f4p = self.ffn4(f4) if t4 else f4

        if not t4 and not tg:
            self.last_trace = trace
            return MultiScaleFeatures([p1o, p2o, p3o, f4p], ms.dims, ms.strides)

        shallow = p1o if self.fold_shallow_source == "p1" else f1
        f12 = fold_scales([(shallow, 1, *d1), (p2o, 2, *d2)], cf)
        f34 = fold_scales([(p3o, 3, *d3), (f4p, 4, *d4)], cf)
        trace["f12_segments"] = [s.length for s in f12.segments]
        trace["f34_segments"] = [s.length for s in f34.segments]

        f34p = self.mcpa(f34, f12, trace) if t4 else f34

        if tg:
            merged = FoldedSeq(
                F.concat([f12.tokens, f34p.tokens], axis=1), f12.segments + f34p.segments
            )
            outs = self.gper(merged, trace)
            by_scale = {scale: tok for tok, scale, _, _ in outs}
            feats = [by_scale[1], by_scale[2], by_scale[3], by_scale[4]]
        else:
            s3, s4 = unfold_scales(f34p)
            feats = [p1o, p2o, s3[0], s4[0]]
        self.last_trace = trace
        return MultiScaleFeatures(feats, ms.dims, ms.strides)

    def expected_trace(self, img_h: int, img_w: int) -> dict:
        """The adapter ledger: every sequence length the bridge should produce
        for a given input size, derived from configuration alone."""
        cfg = self.cfg
        specs = cfg.stage_specs()
        cf = cfg.fold_width
        t1, t2, t3, t4, tg = self.toggles
        dims = [(img_h // s.stride, img_w // s.stride) for s in specs]
        lens = [h * w for h, w in dims]
        folded = [lens[i] * specs[i].channels // cf for i in range(4)]
        grids = []
        for i in range(4):
            a, b = _balanced_split(specs[i].channels // cf)
            grids.append((dims[i][0] * a, dims[i][1] * b))
        trace: dict = {}
        if t1:
            trace["p1"] = {
                "q_len": lens[0] // 4,
                "kv_lens": [lens[0] // 4],
                "concat_width": 2 * specs[0].channels,
            }
        if t2:
            trace["p2"] = {
                "q_len": lens[1] // 4,
                "kv_lens": [lens[0] // 4, lens[0] // 4],
                "concat_width": 2 * 2 * specs[1].channels,
            }
        if t3:
            trace["p3"] = {
                "q_len": lens[2] // 4,
                "kv_lens": [lens[0] // 4, lens[1] // 4, lens[1] // 4],
                "concat_width": 3 * 2 * specs[2].channels,
            }
        if t4 or tg:
            trace["f12_segments"] = [folded[0], folded[1]]
            trace["f34_segments"] = [folded[2], folded[3]]
        if t4:
            f12_total = folded[0] + folded[1]
            kv_lens = []
            for r in _unique_rates(self.cfg.bridge.mcpa_rates, self.cfg.bridge.mcpa_heads):
                kv_lens.append(sum(folded[i] // (r * r) for i in (0, 1)))
            trace["p4"] = {"q_len": folded[2] + folded[3], "kv_lens": kv_lens}
        if tg:
            total = sum(folded)
            kv_lens = []
            for r in _unique_rates(self.cfg.bridge.g_rates, self.cfg.bridge.g_heads):
                kv_lens.append(sum(folded[i] // (r * r) for i in range(4)))
            trace["global"] = {"q_len": total, "kv_lens": kv_lens}
        return trace


def _unique_rates(rates: tuple[int, int], heads: int):
    if heads == 1 or rates[0] == rates[1]:
        return [rates[0]]
    return list(rates)
