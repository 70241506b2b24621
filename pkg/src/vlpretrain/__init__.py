"""Joint text and visual-token Transformer pre-training on a NumPy autograd core."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source checkout
    __version__ = "0.1.0"

from .model import Model, ModelConfig
from .tokenizer import Vocab

__all__ = ["Model", "ModelConfig", "Vocab", "__version__"]
