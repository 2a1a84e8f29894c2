from .discriminators import (
    ESRGANDiscriminator,
    PatchGANDiscriminator,
    StandardDiscriminator,
    build_critic,
    critic_forward,
    patch_grid_size,
    patch_receptive_field,
)
from .generators import Generator, build_generator, generator_forward, sample_noise

__all__ = [
    "ESRGANDiscriminator",
    "Generator",
    "PatchGANDiscriminator",
    "StandardDiscriminator",
    "build_critic",
    "build_generator",
    "critic_forward",
    "generator_forward",
    "patch_grid_size",
    "patch_receptive_field",
    "sample_noise",
]
