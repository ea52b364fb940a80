"""Saliency detection engine: an encoder-decoder baseline network plus a
recurrent attentional refinement stage, with training, metrics, and a CLI.

Submodules are imported explicitly (``racdnn.tensor``, ``racdnn.nn``, ...)
so the command-line entry point can pin threading-related environment
variables before numpy loads.
"""

__version__ = "0.1.0"
