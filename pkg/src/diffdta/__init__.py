"""diffdta: two-stage latent-diffusion regression for drug-target affinity.

A compact numpy stack: dataset ingestion and cold-start splitting, a
reverse-mode tensor kernel, gated-convolution variational encoders, a
latent denoising-diffusion module used as a perturb-and-denoise
regularizer, affinity heads, the two-stage trainer, standard regression
metrics, and a CLI tying it together.
"""

__version__ = "0.1.0"

from . import data, diffusion, encoder, kernels, metrics, numerics, regressor, training

__all__ = [
    "data",
    "diffusion",
    "encoder",
    "kernels",
    "metrics",
    "numerics",
    "regressor",
    "training",
    "__version__",
]
