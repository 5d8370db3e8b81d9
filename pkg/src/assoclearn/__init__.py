"""Continual image-to-image translation with inverse-mapping association and Fisher anchoring."""

__version__ = "0.1.0"
