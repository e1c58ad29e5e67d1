"""U-shaped encoder/decoder: patch embedding, attention (or conv) stages,
patch expanding with skip concatenation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import nn
from ..tensor import ConfigError, ShapeError, Tensor
from ..tensor import functional as F
from .config import ModelConfig, StageSpec
from .ssa import SsaBlock


@dataclass
class MultiScaleFeatures:
    """The four per-stage token sequences with their spatial factorisation."""

    feats: list  # Tensor (N, L_i, C_i)
    dims: list  # (H_i, W_i) per scale
    strides: list  # cumulative stride per scale

    def __iter__(self):
        return iter(self.feats)

    def shapes(self):
        return [tuple(f.data.shape) for f in self.feats]


class PatchEmbedStem(nn.Module):
    """Three stacked convs (kernels 7/3/2, strides 2/1/2): exactly a 4x
    spatial reduction, then flatten to tokens."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        mid = max(out_ch // 2, 1)
        self.conv1 = nn.Conv2d(in_ch, mid, 7, rng, stride=2, padding=3)
        self.conv2 = nn.Conv2d(mid, mid, 3, rng, stride=1, padding=1)
        self.conv3 = nn.Conv2d(mid, out_ch, 2, rng, stride=2, padding=0)
        self.norm = nn.LayerNorm(out_ch)

    def forward(self, img):
        x = F.gelu(self.conv1(img))
        x = F.gelu(self.conv2(x))
        x = self.conv3(x)
        n, c, h, w = x.data.shape
        return self.norm(F.grid_to_tokens(x)), h, w


class PatchMerge(nn.Module):
    """Single kernel-3 stride-2 conv between stages (2x downsample)."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator):
        self.conv = nn.Conv2d(in_ch, out_ch, 3, rng, stride=2, padding=1)
        self.norm = nn.LayerNorm(out_ch)

    def forward(self, x, h: int, w: int):
        g = self.conv(F.tokens_to_grid(x, h, w))
        n, c, h2, w2 = g.data.shape
        return self.norm(F.grid_to_tokens(g)), h2, w2


class PatchExpand(nn.Module):
    """2x spatial upsampling via transposed conv, halving the channel width."""

    def __init__(self, dim: int, rng: np.random.Generator):
        if dim % 2:
            raise ConfigError(f"patch expand needs an even channel width, got {dim}")
        self.deconv = nn.ConvTranspose2d(dim, dim // 2, 2, rng, stride=2)

    def forward(self, x, h: int, w: int):
        g = self.deconv(F.tokens_to_grid(x, h, w))
        return F.grid_to_tokens(g), 2 * h, 2 * w


def _check_input_size(img_shape, divisor: int, in_channels: int) -> None:
    if len(img_shape) != 4 or img_shape[1] != in_channels:
        raise ShapeError(f"expected (N, {in_channels}, H, W) input, got {tuple(img_shape)}")
    _, _, h, w = img_shape
    if h % divisor or w % divisor:
        raise ConfigError(f"input size {h}x{w} must be divisible by {divisor}")


class TransformerEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        specs = cfg.stage_specs()
        self.divisor = cfg.divisor
        self.in_channels = cfg.in_channels
        self.stem = PatchEmbedStem(cfg.in_channels, specs[0].channels, rng)
        self.merges = nn.ModuleList(
            [PatchMerge(specs[i].channels, specs[i + 1].channels, rng) for i in range(3)]
        )
        self.stages = nn.ModuleList(
            [
                nn.ModuleList(
                    [SsaBlock(s.channels, s.heads, s.rates, rng, cfg.mlp_ratio) for _ in range(s.depth)]
                )
                for s in specs
            ]
        )
        self.norms = nn.ModuleList([nn.LayerNorm(s.channels) for s in specs])
        self._strides = [s.stride for s in specs]

    def forward(self, img) -> MultiScaleFeatures:
        _check_input_size(img.data.shape, self.divisor, self.in_channels)
        x, h, w = self.stem(img)
        feats, dims = [], []
        for i in range(4):
            if i > 0:
                x, h, w = self.merges[i - 1](x, h, w)
            for block in self.stages[i]:
                x = block(x, h, w)
            x = self.norms[i](x)
            feats.append(x)
            dims.append((h, w))
        return MultiScaleFeatures(feats, dims, list(self._strides))


class TransformerDecoder(nn.Module):
    """Walks back up the scales: expand, concatenate the bridge output,
    halve the channels, run the stage blocks (a linear projection at the
    shallowest stage), then a final 4x expansion into class logits."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        specs = cfg.stage_specs()
        self.expands = nn.ModuleList(
            [PatchExpand(specs[i + 1].channels, rng) for i in (2, 1, 0)]
        )
        self.halves = nn.ModuleList(
            [nn.Linear(2 * specs[i].channels, specs[i].channels, rng) for i in (2, 1)]
        )
        self.stages = nn.ModuleList(
            [
                nn.ModuleList(
                    [
                        SsaBlock(specs[i].channels, specs[i].heads, specs[i].rates, rng, cfg.mlp_ratio)
                        for _ in range(specs[i].depth)
                    ]
                )
                for i in (2, 1)
            ]
        )
        # shallowest skip stage: block slot is a plain linear projection
        self.final_halve = nn.Linear(2 * specs[0].channels, specs[0].channels, rng)
        self.final_proj = nn.Linear(specs[0].channels, specs[0].channels, rng)
        c1 = specs[0].channels
        self.up1 = PatchExpand(c1, rng)
        self.up2 = PatchExpand(c1 // 2, rng)
        self.head = nn.Conv2d(c1 // 4, cfg.num_classes, 1, rng)

    def forward(self, bridge_out: MultiScaleFeatures):
        feats, dims = bridge_out.feats, bridge_out.dims
        x = feats[3]
        h, w = dims[3]
        for step, stage_idx in enumerate((2, 1)):
            x, h, w = self.expands[step](x, h, w)
            skip = feats[stage_idx]
            if skip.data.shape[1] != x.data.shape[1]:
                raise ShapeError(
                    f"decoder stage {stage_idx + 1}: skip length {skip.data.shape[1]} does not "
                    f"match expanded length {x.data.shape[1]}"
                )
            x = self.halves[step](F.concat([x, skip], axis=2))
            for block in self.stages[step]:
                x = block(x, h, w)
        x, h, w = self.expands[2](x, h, w)
        skip = feats[0]
        if skip.data.shape[1] != x.data.shape[1]:
            raise ShapeError(
                f"decoder stage 1: skip length {skip.data.shape[1]} does not match "
                f"expanded length {x.data.shape[1]}"
            )
        x = self.final_proj(self.final_halve(F.concat([x, skip], axis=2)))
        x, h, w = self.up1(x, h, w)
        x, h, w = self.up2(x, h, w)
        return self.head(F.tokens_to_grid(x, h, w))


class ConvBlock(nn.Module):
    """Double 3x3 conv with channelwise norm and ReLU."""

    def __init__(self, ch: int, rng: np.random.Generator):
        self.conv1 = nn.Conv2d(ch, ch, 3, rng, padding=1)
        self.norm1 = nn.LayerNorm(ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, rng, padding=1)
        self.norm2 = nn.LayerNorm(ch)

    def _norm(self, norm, g):
        n, c, h, w = g.data.shape
        return F.tokens_to_grid(norm(F.grid_to_tokens(g)), h, w)

    def forward(self, x):
        x = F.relu(self._norm(self.norm1, self.conv1(x)))
        return F.relu(self._norm(self.norm2, self.conv2(x)))


class CnnEncoder(nn.Module):
    """Convolutional variant: stage strides (1, 2, 2, 2), total /8, so small
    training patches keep a usable deepest grid."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        specs = cfg.stage_specs()
        self.divisor = cfg.divisor
        self.in_channels = cfg.in_channels
        self.embeds = nn.ModuleList(
            [
                nn.Conv2d(
                    cfg.in_channels if i == 0 else specs[i - 1].channels,
                    specs[i].channels,
                    3,
                    rng,
                    stride=1 if i == 0 else 2,
                    padding=1,
                )
                for i in range(4)
            ]
        )
        self.stages = nn.ModuleList(
            [
                nn.ModuleList([ConvBlock(s.channels, rng) for _ in range(s.depth)])
                for s in specs
            ]
        )
        self._strides = [s.stride for s in specs]

    def forward(self, img) -> MultiScaleFeatures:
        _check_input_size(img.data.shape, self.divisor, self.in_channels)
        x = img
        feats, dims = [], []
        for i in range(4):
            x = self.embeds[i](x)
            for block in self.stages[i]:
                x = block(x)
            n, c, h, w = x.data.shape
            feats.append(F.grid_to_tokens(x))
            dims.append((h, w))
        return MultiScaleFeatures(feats, dims, list(self._strides))


class CnnDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        specs = cfg.stage_specs()
        self.expands = nn.ModuleList(
            [PatchExpand(specs[i + 1].channels, rng) for i in (2, 1, 0)]
        )
        self.halves = nn.ModuleList(
            [nn.Conv2d(2 * specs[i].channels, specs[i].channels, 1, rng) for i in (2, 1, 0)]
        )
        self.stages = nn.ModuleList(
            [
                nn.ModuleList([ConvBlock(specs[i].channels, rng) for _ in range(specs[i].depth)])
                for i in (2, 1, 0)
            ]
        )
        self.head = nn.Conv2d(specs[0].channels, cfg.num_classes, 1, rng)

    def forward(self, bridge_out: MultiScaleFeatures):
        feats, dims = bridge_out.feats, bridge_out.dims
        x = feats[3]
        h, w = dims[3]
        for step, stage_idx in enumerate((2, 1, 0)):
            x, h, w = self.expands[step](x, h, w)
            skip = feats[stage_idx]
            if skip.data.shape[1] != x.data.shape[1]:
                raise ShapeError(
                    f"decoder stage {stage_idx + 1}: skip length {skip.data.shape[1]} does not "
                    f"match expanded length {x.data.shape[1]}"
                )
            g = self.halves[step](F.tokens_to_grid(F.concat([x, skip], axis=2), h, w))
            for block in self.stages[step]:
                g = block(g)
            x = F.grid_to_tokens(g)
        return self.head(F.tokens_to_grid(x, h, w))
