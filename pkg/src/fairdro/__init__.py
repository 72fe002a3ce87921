"""Wasserstein-robust linear classifiers with equal-opportunity fairness constraints."""

from .data import CELLS, Dataset, GroupIndex, ScalerParams, gen_synthetic, group_index, load_csv, split, standardize
from .metrics import Hyperplane, NormKind
from .model import BoxBounds, ConicProgram
from .reformulate import ModelSpec, Variant, build
from .solve import SolveOptions, SolveResult, Status, extract_hyperplane, solve, solve_continuous, solve_mip

__version__ = "0.1.0"
