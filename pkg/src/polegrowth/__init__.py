"""Two-type size-structured branching model of bacterial growth.

Simulation of the genealogical tree and of its piecewise deterministic
population process, Monte Carlo checks of the many-to-one identity, a
finite-volume growth-fragmentation solver, and a nonparametric estimator of
the size-dependent division rate.
"""

from polegrowth.model import (
    DivisionRate,
    ModelParams,
    RateKernel,
    cumulative_hazard,
    make_division_rate,
    sample_rate_kernel,
)
from polegrowth.simulator import (
    CellRecord,
    Genealogy,
    PopulationSnapshot,
    TruncationError,
    sample_lifetime,
    simulate_tree,
    snapshot,
)

__version__ = "0.1.0"

__all__ = [
    "CellRecord",
    "DivisionRate",
    "Genealogy",
    "ModelParams",
    "PopulationSnapshot",
    "RateKernel",
    "TruncationError",
    "cumulative_hazard",
    "make_division_rate",
    "sample_lifetime",
    "sample_rate_kernel",
    "simulate_tree",
    "snapshot",
]
