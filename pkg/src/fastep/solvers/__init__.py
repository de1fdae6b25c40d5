"""EP solvers sharing one energy and one Gaussian backend."""

from .common import (
    SolverConfig,
    SolverResult,
    SolverTrace,
    ep_fixed_point_residual,
    scaled_fixed_point_residual,
)
from .fast import fast_ep
from .ow import ow_inner_max_step
from .parallel import parallel_ep
from .sequential import sequential_ep

__all__ = [
    "SolverConfig",
    "SolverResult",
    "SolverTrace",
    "ep_fixed_point_residual",
    "fast_ep",
    "ow_inner_max_step",
    "parallel_ep",
    "scaled_fixed_point_residual",
    "sequential_ep",
]
