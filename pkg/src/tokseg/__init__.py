"""Decoder-free referring segmentation on a from-scratch numpy transformer."""

from .autograd import Tensor, backward, grad_check, no_grad, sgd_step, tensor
from .head import MlpSharing, PipelineMode, predict_mask
from .masks import MaskVariant, TokenLayout, build_attention_mask
from .model import ModelConfig, SegModel
from .shuffle import GridFeatures, ShuffleSpec
from .train import RunConfig, parse_config, serialize_config

__version__ = "0.1.0"
