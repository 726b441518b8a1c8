from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .resnet import CnnConfig, CnnOutput, FrozenTeacher, MapFeature, cnn_forward, freeze, init_cnn, resnet_config
from .vit import AttentionRecord, TokenFeature, VitConfig, VitOutput, init_vit, patchify, vit_forward

__all__ = [
    "AttentionRecord",
    "Checkpoint",
    "CheckpointError",
    "CnnConfig",
    "CnnOutput",
    "FrozenTeacher",
    "MapFeature",
    "TokenFeature",
    "VitConfig",
    "VitOutput",
    "cnn_forward",
    "freeze",
    "init_cnn",
    "init_vit",
    "load_checkpoint",
    "patchify",
    "resnet_config",
    "save_checkpoint",
    "vit_forward",
]
