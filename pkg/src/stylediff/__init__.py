"""Few-step diffusion-GAN text-to-speech conditioned on natural-language style prompts."""

__version__ = "0.1.0"
