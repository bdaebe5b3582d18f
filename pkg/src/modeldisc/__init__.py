"""Model discovery toolkit: neural corrections for dynamical systems, shrunk
to symbolic expressions under an engineer-in-the-loop workflow."""

from . import models, nn, pipeline, reduction, session, symreg, training, ude

__version__ = "0.1.0"

__all__ = ["models", "nn", "pipeline", "reduction", "session", "symreg",
           "training", "ude", "__version__"]
