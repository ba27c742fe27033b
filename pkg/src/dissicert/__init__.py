"""Dissipativity and l2-gain certification of polynomial systems from noisy data."""

from .polyalg import Monomial, Polynomial, VarContext, monomial_basis, parse_polynomial
from .sysdata import (
    ConstraintSet,
    CumulativelyBounded,
    DataConsistencyError,
    DataSet,
    DivergenceError,
    ModelTemplate,
    NotRepresentable,
    QuadraticallyBounded,
    SeparatelyBounded,
    SystemModel,
    sb_noise,
    simulate,
)
from .verify import (
    DISSIPATIVE,
    FRAMEWORKS,
    INDETERMINATE,
    DegreeBudgetError,
    GainResult,
    NoBoundInRange,
    SupplyRate,
    VerdictCertificate,
    VerifyOptions,
    data_driven_gain,
    dissipation_margin,
    gain_bisect,
    model_based_gain,
    sample_feasible_points,
    verify_cb,
    verify_model,
    verify_sb_general,
    verify_sb_quadratic,
)

__version__ = "0.1.0"

__all__ = [
    "Monomial",
    "Polynomial",
    "VarContext",
    "monomial_basis",
    "parse_polynomial",
    "ConstraintSet",
    "CumulativelyBounded",
    "DataConsistencyError",
    "DataSet",
    "DivergenceError",
    "ModelTemplate",
    "NotRepresentable",
    "QuadraticallyBounded",
    "SeparatelyBounded",
    "SystemModel",
    "sb_noise",
    "simulate",
    "DISSIPATIVE",
    "INDETERMINATE",
    "FRAMEWORKS",
    "DegreeBudgetError",
    "GainResult",
    "NoBoundInRange",
    "SupplyRate",
    "VerdictCertificate",
    "VerifyOptions",
    "data_driven_gain",
    "dissipation_margin",
    "gain_bisect",
    "model_based_gain",
    "sample_feasible_points",
    "verify_cb",
    "verify_model",
    "verify_sb_general",
    "verify_sb_quadratic",
]
