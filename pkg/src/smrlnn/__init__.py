"""Representation learning for individual treatment effects with an adversarial
balancing discriminator and a canonical-correlation structure keeper."""
__version__ = "0.1.0"

from ._backend import BACKEND, COMPILED  # noqa: E402
