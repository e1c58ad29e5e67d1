"""Architecture configuration: stage layout, attention geometry, bridge knobs."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from ..tensor import ConfigError


@dataclass(frozen=True)
class StageSpec:
    """One encoder/decoder stage of the U-shaped backbone."""

    index: int  # 1-based
    stride: int  # cumulative stride vs. the input image
    channels: int
    depth: int
    heads: int
    rates: tuple[int, int]  # token-aggregation rates for the two head groups

    def validate(self) -> None:
        if self.channels % self.heads:
            raise ConfigError(
                f"stage {self.index}: channels {self.channels} not divisible by {self.heads} heads"
            )
        if self.heads > 1 and self.rates[0] != self.rates[1] and self.heads % 2:
            raise ConfigError(
                f"stage {self.index}: two aggregation rates need an even head count, got {self.heads}"
            )
        if min(self.rates) < 1:
            raise ConfigError(f"stage {self.index}: aggregation rates must be >= 1, got {self.rates}")


@dataclass(frozen=True)
class BridgeConfig:
    """Cross-scale fusion bridge configuration.

    fold_width is the common channel width all scales are reshaped to before
    token-axis concatenation; None picks min(32, stage-1 channels).
    """

    fold_width: int | None = None
    mcpa_rates: tuple[int, int] = (4, 8)
    mcpa_heads: int = 2
    g_rates: tuple[int, int] = (4, 2)
    g_heads: int = 2
    ffn_ratio: int = 4
    perceptron1: bool = True
    perceptron2: bool = True
    perceptron3: bool = True
    perceptron4: bool = True
    global_perceptron: bool = True
    # token source for the shallow half of the fused pair: the raw stage-1
    # feature (default) or perceptron 1's output
    fold_shallow_source: str = "raw"

    def validate(self) -> None:
        if self.fold_shallow_source not in ("raw", "p1"):
            raise ConfigError(f"fold_shallow_source must be 'raw' or 'p1', got {self.fold_shallow_source!r}")
        for name, heads, rates in (
            ("mcpa", self.mcpa_heads, self.mcpa_rates),
            ("global", self.g_heads, self.g_rates),
        ):
            if heads < 1:
                raise ConfigError(f"{name} head count must be >= 1")
            if heads > 1 and rates[0] != rates[1] and heads % 2:
                raise ConfigError(f"{name}: two aggregation rates need an even head count")


TRANSFORMER_STAGE_STRIDES = (4, 8, 16, 32)
CNN_STAGE_STRIDES = (1, 2, 4, 8)


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "transformer"  # transformer | cnn
    in_channels: int = 3
    num_classes: int = 9
    channels: tuple[int, int, int, int] = (64, 128, 256, 512)
    depths: tuple[int, int, int, int] = (2, 4, 4, 1)
    heads: tuple[int, int, int, int] = (2, 4, 8, 16)
    rates: tuple[tuple[int, int], ...] = ((8, 4), (4, 2), (2, 1), (1, 1))
    mlp_ratio: int = 4
    bridge: BridgeConfig = field(default_factory=BridgeConfig)

    @property
    def stage_strides(self) -> tuple[int, int, int, int]:
        if self.variant == "transformer":
            return TRANSFORMER_STAGE_STRIDES
        if self.variant == "cnn":
            return CNN_STAGE_STRIDES
        raise ConfigError(f"unknown model variant {self.variant!r}")

    @property
    def divisor(self) -> int:
        """Required divisibility of input height/width (the deepest stride)."""
        return self.stage_strides[-1]

    @property
    def fold_width(self) -> int:
        if self.bridge.fold_width is not None:
            return self.bridge.fold_width
        return min(32, self.channels[0])

    def stage_specs(self) -> list[StageSpec]:
        return [
            StageSpec(
                index=i + 1,
                stride=self.stage_strides[i],
                channels=self.channels[i],
                depth=self.depths[i],
                heads=self.heads[i],
                rates=tuple(self.rates[i]),
            )
            for i in range(4)
        ]

    def validate(self) -> None:
        if self.variant not in ("transformer", "cnn"):
            raise ConfigError(f"unknown model variant {self.variant!r}")
        if len(self.channels) != 4 or len(self.depths) != 4:
            raise ConfigError("channels and depths must list exactly four stages")
        for i in range(3):
            if self.channels[i + 1] != 2 * self.channels[i]:
                raise ConfigError(
                    f"stage channels must double: stage {i + 2} has {self.channels[i + 1]}, "
                    f"expected {2 * self.channels[i]}"
                )
        if self.variant == "transformer":
            if self.channels[0] % 4:
                raise ConfigError(
                    f"stage-1 channels must be divisible by 4 for the final expansion, got {self.channels[0]}"
                )
            for s in self.stage_specs():
                s.validate()
        cf = self.fold_width
        for i, c in enumerate(self.channels):
            if c % cf:
                raise ConfigError(
                    f"stage {i + 1} channels {c} not divisible by fold width {cf}"
                )
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        self.bridge.validate()

    def with_classes(self, num_classes: int) -> "ModelConfig":
        return replace(self, num_classes=num_classes)


def tiny_transformer(num_classes: int = 4) -> ModelConfig:
    """Smallest config that exercises every component; used by gradient checks."""
    return ModelConfig(
        variant="transformer",
        num_classes=num_classes,
        channels=(4, 8, 16, 32),
        depths=(1, 1, 1, 1),
        heads=(2, 2, 4, 8),
        rates=((8, 4), (4, 2), (2, 1), (1, 1)),
        mlp_ratio=2,
        bridge=BridgeConfig(mcpa_rates=(2, 4), g_rates=(2, 1), ffn_ratio=2),
    )


def small_transformer(num_classes: int = 4) -> ModelConfig:
    """Desk-scale config for overfitting experiments."""
    return ModelConfig(
        variant="transformer",
        num_classes=num_classes,
        channels=(8, 16, 32, 64),
        depths=(1, 1, 1, 1),
        heads=(2, 4, 8, 16),
        rates=((8, 4), (4, 2), (2, 1), (1, 1)),
        mlp_ratio=2,
        bridge=BridgeConfig(mcpa_rates=(2, 4), g_rates=(2, 1), ffn_ratio=2),
    )


def small_cnn(num_classes: int = 2) -> ModelConfig:
    """Desk-scale CNN variant for patch-based training."""
    return ModelConfig(
        variant="cnn",
        num_classes=num_classes,
        channels=(16, 32, 64, 128),
        depths=(1, 1, 1, 1),
        heads=(1, 1, 1, 1),
        rates=((1, 1), (1, 1), (1, 1), (1, 1)),
        mlp_ratio=2,
        bridge=BridgeConfig(mcpa_rates=(2, 4), g_rates=(2, 1), ffn_ratio=2),
    )
