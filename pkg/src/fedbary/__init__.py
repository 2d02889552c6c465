"""Federated Wasserstein barycenters by Lagrangian dual decomposition."""

from .baseline import BaselineResult, SinkhornConfig, free_support_barycenter, sinkhorn
from .dual import HyperParams, SolveResult, recover_primal, run
from .federation import privacy_audit, run_federated
from .measures import (
    CandidateSet,
    Client,
    InstanceError,
    ParticleCloud,
    ProblemInstance,
    load_instance,
    save_instance,
    validate_instance,
)
from .oracle import barycenter_objective, brute_force_barycenter, exact_transport, wasserstein_pp

__all__ = [
    "BaselineResult",
    "CandidateSet",
    "Client",
    "HyperParams",
    "InstanceError",
    "ParticleCloud",
    "ProblemInstance",
    "SinkhornConfig",
    "SolveResult",
    "barycenter_objective",
    "brute_force_barycenter",
    "exact_transport",
    "free_support_barycenter",
    "load_instance",
    "privacy_audit",
    "recover_primal",
    "run",
    "run_federated",
    "save_instance",
    "sinkhorn",
    "validate_instance",
    "wasserstein_pp",
]
