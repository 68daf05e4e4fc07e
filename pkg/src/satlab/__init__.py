"""satlab: a desk-scale lab for style alignment through shared self-attention."""

__version__ = "0.1.0"

from .attention import ShareConfig, ShareMode, adain, layer_mask_from_spec  # noqa: E402
from .denoiser import DenoiserWeights, GmmDenoiser, ModelConfig  # noqa: E402
from .diffusion import NoiseSchedule, ddim_invert, restyle_from_image, sample_set  # noqa: E402
from .kernels import BACKEND  # noqa: E402
from .tensor import NumericError, Rng  # noqa: E402

__all__ = [
    "BACKEND", "DenoiserWeights", "GmmDenoiser", "ModelConfig", "NoiseSchedule", "NumericError",
    "Rng", "ShareConfig", "ShareMode", "adain", "ddim_invert", "layer_mask_from_spec",
    "restyle_from_image", "sample_set",
]
