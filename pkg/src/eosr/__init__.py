"""Configuration-driven GAN super-resolution for multiband remote-sensing imagery."""

__version__ = "0.1.0"
