from .autoencoder import AutoBCNet, ConvAutoencoderNet, Decoder, Encoder
from .bundle import (
    ARCHS,
    DEFAULT_CONFIGS,
    ModelBundle,
    ae_decode,
    ae_encode,
    autobc_forward,
    build_module,
    predict_steering,
    resolve_config,
    spattn_forward,
    to_model_input,
    vit_forward,
)
from .common import ShapeError
from .losses import ae_loss, sit_recon_loss, spatial_loss, steering_loss
from .spatial import SpatialAttentionNet, spatial_fuse
from .vit import ViTNet, group_mask, group_mask_indicator, patchify, unpatchify

__all__ = [
    "ARCHS",
    "DEFAULT_CONFIGS",
    "AutoBCNet",
    "ConvAutoencoderNet",
    "Decoder",
    "Encoder",
    "ModelBundle",
    "ShapeError",
    "SpatialAttentionNet",
    "ViTNet",
    "ae_decode",
    "ae_encode",
    "ae_loss",
    "autobc_forward",
    "build_module",
    "group_mask",
    "group_mask_indicator",
    "patchify",
    "predict_steering",
    "resolve_config",
    "sit_recon_loss",
    "spatial_fuse",
    "spatial_loss",
    "spattn_forward",
    "steering_loss",
    "to_model_input",
    "unpatchify",
    "vit_forward",
]
