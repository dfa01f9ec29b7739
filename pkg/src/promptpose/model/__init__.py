from .backbone import ConvPyramid, MultiScaleFeatures, PromptEncoder, PromptEmbedding
from .config import ModelConfig
from .decoder import Decoder, GraphAttention, QueryGroups, QueryInit
from .encoder import DeformableAttention, DeformableEncoder, ModalityFusion
from .heads import PredictionHeads, PredictionSet, segment_conditional, upsample_logits
from .network import InferenceResult, PromptPoseNet

__all__ = [
    "ConvPyramid", "MultiScaleFeatures", "PromptEncoder", "PromptEmbedding",
    "ModelConfig", "Decoder", "GraphAttention", "QueryGroups", "QueryInit",
    "DeformableAttention", "DeformableEncoder", "ModalityFusion",
    "PredictionHeads", "PredictionSet", "segment_conditional", "upsample_logits",
    "InferenceResult", "PromptPoseNet",
]
