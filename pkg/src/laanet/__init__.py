"""Red-channel light-attenuation depth estimation (LAA-Net style) for nighttime monocular video."""

__version__ = "0.1.0"
