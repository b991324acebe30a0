"""Sparse signal recovery with a two-level Gaussian-process spike-and-slab prior.

Inference is expectation propagation, offline over a whole record or online
as Bayesian filtering over a stream.
"""
from .ep import Posterior, run_ep, run_offline
from .expfam import GaussianNat
from .metrics import f_measure, nmse, score, support
from .model import Dataset, Hyperparams, synthetic_dataset
from .stream import init_stream, predict, run_stream, step, update

__version__ = "0.1.0"

__all__ = [
    "Dataset", "GaussianNat", "Hyperparams", "Posterior", "f_measure", "init_stream", "nmse",
    "predict", "run_ep", "run_offline", "run_stream", "score", "step", "support",
    "synthetic_dataset", "update",
]
