"""Policy-gradient fine-tuning of masked diffusion language models from denoising trajectories."""

__version__ = "0.1.0"
