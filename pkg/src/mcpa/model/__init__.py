from .config import (
    BridgeConfig,
    ModelConfig,
    StageSpec,
    small_cnn,
    small_transformer,
    tiny_transformer,
)
from .backbone import (
    CnnDecoder,
    CnnEncoder,
    MultiScaleFeatures,
    PatchEmbedStem,
    PatchExpand,
    PatchMerge,
    TransformerDecoder,
    TransformerEncoder,
)
from .bridge import (
    Bridge,
    CrossPerceptron,
    FoldedSeq,
    GlobalPerceptron,
    McpaPerceptron,
    PerceptronFfn,
    Segment,
    fold_scales,
    split_segments,
    unfold_scales,
)
from .net import McpaNet, build_model
from .ssa import ShuntedAttention, SsaBlock, SsaFfn, TokenAggregation

__all__ = [
    "Bridge",
    "BridgeConfig",
    "CnnDecoder",
    "CnnEncoder",
    "CrossPerceptron",
    "FoldedSeq",
    "GlobalPerceptron",
    "McpaNet",
    "McpaPerceptron",
    "ModelConfig",
    "MultiScaleFeatures",
    "PatchEmbedStem",
    "PatchExpand",
    "PatchMerge",
    "PerceptronFfn",
    "Segment",
    "ShuntedAttention",
    "SsaBlock",
    "SsaFfn",
    "StageSpec",
    "TokenAggregation",
    "TransformerDecoder",
    "TransformerEncoder",
    "build_model",
    "fold_scales",
    "small_cnn",
    "small_transformer",
    "split_segments",
    "tiny_transformer",
    "unfold_scales",
]
