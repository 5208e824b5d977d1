"""Pseudo-spectral PDE solvers, initial-condition samplers and dataset generation."""

from .datasets import Dataset, DatasetGenerationError, derive_seed, generate_dataset, load_dataset
from .equations import Equation, SolverParams, solve_brusselator, solve_ks, solve_ns
from .etdrk4 import SolverDivergenceError, SpectralGrid, etdrk4_integrate
from .initial_conditions import NsIcSpec, SineIcSpec, sample_ns_ic, sample_sine_ic

__all__ = [
    "Dataset",
    "DatasetGenerationError",
    "Equation",
    "NsIcSpec",
    "SineIcSpec",
    "SolverDivergenceError",
    "SolverParams",
    "SpectralGrid",
    "derive_seed",
    "etdrk4_integrate",
    "generate_dataset",
    "load_dataset",
    "sample_ns_ic",
    "sample_sine_ic",
    "solve_brusselator",
    "solve_ks",
    "solve_ns",
]
