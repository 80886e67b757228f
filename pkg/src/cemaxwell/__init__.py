"""Multiscale edge-element solver for time-harmonic Maxwell problems in
high-contrast media, with a fine-scale reference solver and experiment harness."""

from .assembly import OperatorSet, assemble_load, assemble_operators, norm_a, norm_l2, norm_s
from .cem import (AuxiliarySpace, MultiscaleBasis, assemble_coarse, build_multiscale_basis,
                  compute_auxiliary, resolution_check)
from .coeff import CoefficientField, ModelKind, ModelSpec, generate
from .fine import exact_benchmark, interpolate_edge, solve_fine
from .mesh import NestedMesh, Patch, build_nested_mesh, extract_patch

__version__ = "0.1.0"
