from .layers import Param
from .optim import AdamW, OptimizerConfig, lr_at
from .unet import DenoiserUNet, RegressorUNet

__all__ = ["Param", "AdamW", "OptimizerConfig", "lr_at", "DenoiserUNet", "RegressorUNet"]
