"""Perturbed utility traffic assignment solved in the dual.

Link flows follow a perturbed utility route choice model: each traveler type
minimises linear cost plus a convex link-separable perturbation over its flow
conservation polytope, and congestion enters through BPR travel times. The
solver works on node potentials with accelerated, Hessian-scaled gradient
ascent.
"""

__version__ = "0.1.0"

from .demand import (ODMatrix, TravelerType, gravity_demand, parse_tntp_trips,  # noqa: E402
                     scale_demand, to_traveler_types, write_tntp_trips)
from .network import (Network, NetworkValidationError, TNTPFormatError,  # noqa: E402
                      generate_grid, parse_tntp_network, shortest_potentials,
                      validate_network, write_tntp_network)
from .purc import (ENTROPY, CostModel, EntropyPerturbation, PerturbationFunction,  # noqa: E402
                   ScaledPerturbation, bpr_time, dual_objective, length_scaled_entropy,
                   load_flows, primal_objective)
from .solver import AssignmentResult, SolverConfig, solve  # noqa: E402

__all__ = [
    "AssignmentResult", "CostModel", "ENTROPY", "EntropyPerturbation", "Network",
    "NetworkValidationError", "ODMatrix", "PerturbationFunction", "ScaledPerturbation",
    "SolverConfig", "TNTPFormatError", "TravelerType", "bpr_time", "dual_objective",
    "generate_grid", "gravity_demand", "length_scaled_entropy", "load_flows",
    "parse_tntp_network", "parse_tntp_trips", "primal_objective", "scale_demand",
    "shortest_potentials", "solve", "to_traveler_types", "validate_network",
    "write_tntp_network", "write_tntp_trips",
]
