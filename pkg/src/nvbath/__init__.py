"""Decoherence of a shallow spin sensor by a 2D bath of surface spins.

Submodules: ``physics`` (constants, couplings), ``bath`` (random
configurations), ``montecarlo`` (signal simulation), ``analytic`` (closed
forms, exact configurational average, filter functions), ``inference``
(fits, posteriors, model comparison), ``dataio`` (count normalisation and
files) and ``cli`` (config-driven sweeps).
"""
from . import analytic, bath, dataio, inference, montecarlo, physics

__version__ = "0.1.0"
__all__ = ["analytic", "bath", "dataio", "inference", "montecarlo", "physics", "__version__"]
