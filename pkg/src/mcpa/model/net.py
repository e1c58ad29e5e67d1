"""Top-level segmentation network: encoder -> bridge -> decoder."""

from __future__ import annotations

import numpy as np

from .. import nn
from ..tensor import Tensor
from .backbone import (
    CnnDecoder,
    CnnEncoder,
    MultiScaleFeatures,
    TransformerDecoder,
    TransformerEncoder,
)
from .bridge import Bridge
from .config import ModelConfig


class McpaNet(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        if cfg.variant == "transformer":
            self.encoder = TransformerEncoder(cfg, rng)
            self.decoder = TransformerDecoder(cfg, rng)
        else:
            self.encoder = CnnEncoder(cfg, rng)
            self.decoder = CnnDecoder(cfg, rng)
        self.bridge = Bridge(cfg, rng)

    def encode(self, img: Tensor) -> MultiScaleFeatures:
        return self.encoder(img)

    def forward(self, img: Tensor) -> Tensor:
        return self.decoder(self.bridge(self.encoder(img)))


def build_model(cfg: ModelConfig, seed: int) -> McpaNet:
    return McpaNet(cfg, np.random.default_rng(seed))
