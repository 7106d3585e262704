"""De-quantization by MAP estimation over the latent space of a generator."""
from .generator import GeneratorModel, load_model, make_toy_generator, save_model
from .image import ImageTensor, load_image, mse, psnr, rgb_to_intensity, save_image
from .quantizers import (
    PaletteQuantizer,
    ThresholdQuantizer,
    UniformQuantizer,
    otsu_threshold,
    quantize_palette,
    quantize_threshold,
    quantize_uniform,
)
from .restoration import (
    DESK_CONFIG,
    REFERENCE_CONFIG,
    ObjectiveSpec,
    OptimizerConfig,
    RestoreResult,
    loss_and_grads,
    restore,
    restore_with_unknown_threshold,
)
from .surrogates import Identity, SoftPalette, SoftThreshold, SoftUniform, SurrogateParams

__version__ = "0.1.0"

__all__ = [
    "DESK_CONFIG", "REFERENCE_CONFIG", "GeneratorModel", "Identity", "ImageTensor", "ObjectiveSpec",
    "OptimizerConfig", "PaletteQuantizer", "RestoreResult", "SoftPalette", "SoftThreshold", "SoftUniform",
    "SurrogateParams", "ThresholdQuantizer", "UniformQuantizer", "load_image", "load_model", "loss_and_grads",
    "make_toy_generator", "mse", "otsu_threshold", "psnr", "quantize_palette", "quantize_threshold",
    "quantize_uniform", "restore", "restore_with_unknown_threshold", "rgb_to_intensity", "save_image",
    "save_model",
]
