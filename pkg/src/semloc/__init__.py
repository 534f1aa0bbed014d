"""semloc: street-canyon channel synthesis, CSI fingerprints, a numpy
autodiff engine, and domain-adaptive localization training."""

from . import dataio, engine, features, losses, models, scenario, training

__all__ = ["dataio", "engine", "features", "losses", "models", "scenario",
           "training"]
__version__ = "0.1.0"
