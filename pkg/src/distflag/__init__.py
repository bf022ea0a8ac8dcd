"""Rank-4 distributions on 7-dimensional charts: flags, cones, prolongations, singular curves."""

from .class47 import cone_membership, is_47, metric_signature, verify_adapted
from .flags import check_c3_symbol, frobenius_integrable, growth_vector_at, symbol_algebra_at, weak_derived_flag
from .geometry import Chart, Frame, VectorField, lie_bracket
from .hamilton import (
    endpoint_jacobian_rank,
    integrate_constrained,
    lift_to_Z,
    synthesize_singular,
    verify_singular_adjoint,
)
from .models import builtin_model, elliptic_nilpotent_model, epsilon_family, grassmannian_model, load_model, save_model
from .poly import Poly
from .prolong import build_prolongation, c3_locus_scan, direction_type, extract_c_d

__version__ = "0.1.0"

__all__ = [
    "Chart",
    "Frame",
    "Poly",
    "VectorField",
    "build_prolongation",
    "builtin_model",
    "c3_locus_scan",
    "check_c3_symbol",
    "cone_membership",
    "direction_type",
    "elliptic_nilpotent_model",
    "endpoint_jacobian_rank",
    "epsilon_family",
    "extract_c_d",
    "frobenius_integrable",
    "grassmannian_model",
    "growth_vector_at",
    "integrate_constrained",
    "is_47",
    "lie_bracket",
    "lift_to_Z",
    "load_model",
    "metric_signature",
    "save_model",
    "symbol_algebra_at",
    "synthesize_singular",
    "verify_adapted",
    "verify_singular_adjoint",
    "weak_derived_flag",
]
