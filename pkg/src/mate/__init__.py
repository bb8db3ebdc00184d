from .numerics import GradTape, Tensor, backward, precision
from .conditioning import LoraAdapter, LoraParams, SequenceLayout, TokenSequence, assemble_sequence, cross_bias
from .dit import Conditions, ModelConfig, ModelParams, VelocityModel, init_lora, init_params
from .flow import FlowConfig, FlowState, sample
from .imaging import ImagePlane, Mask, load_image, save_image
from .pipeline import SamplerConfig, transfer, transfer_multi

__all__ = [
    "Tensor",
    "GradTape",
    "backward",
    "precision",
    "LoraAdapter",
    "LoraParams",
    "SequenceLayout",
    "TokenSequence",
    "assemble_sequence",
    "cross_bias",
    "Conditions",
    "ModelConfig",
    "ModelParams",
    "VelocityModel",
    "init_lora",
    "init_params",
    "FlowConfig",
    "FlowState",
    "sample",
    "ImagePlane",
    "Mask",
    "load_image",
    "save_image",
    "SamplerConfig",
    "transfer",
    "transfer_multi",
]
