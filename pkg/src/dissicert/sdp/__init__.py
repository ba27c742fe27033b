"""Semidefinite programming backend: problem containers, presolve, and solver."""

from .ipm import solve
from .kernels import NUMBA_AVAILABLE
from .presolve import build_conic
from .problem import (
    FEASIBLE,
    INFEASIBLE,
    NUMERICAL_FAILURE,
    OPTIMAL,
    AffineBlock,
    GramBlock,
    SdpProblem,
    SdpSolution,
    check_psd,
    dump_sdpa,
    tri_index,
    tri_size,
)

__all__ = [
    "AffineBlock",
    "FEASIBLE",
    "GramBlock",
    "INFEASIBLE",
    "NUMBA_AVAILABLE",
    "NUMERICAL_FAILURE",
    "OPTIMAL",
    "SdpProblem",
    "SdpSolution",
    "build_conic",
    "check_psd",
    "dump_sdpa",
    "solve",
    "tri_index",
    "tri_size",
]
