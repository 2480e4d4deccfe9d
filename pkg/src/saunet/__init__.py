"""Shape attentive U-Net: an interpretable segmentation engine on a numpy autodiff core."""
from ._kernels import BACKEND
from .model import ModelConfig, SAUNet, build, load_model, preset

__version__ = "0.1.0"

__all__ = ["BACKEND", "ModelConfig", "SAUNet", "build", "load_model", "preset", "__version__"]
