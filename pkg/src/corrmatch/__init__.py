"""Simulation of statistical-matching attacks on anonymized, correlated user traces."""

from .adversary import AdversaryKnowledge, AttackConfig, AttackOutcome, run_attack, score_attack
from .errors import (
    AttackFailed,
    BudgetExceeded,
    ConfigurationError,
    CorrmatchError,
    CouplingInfeasibleError,
    DomainError,
    MechanismError,
    NoThreshold,
    UnsupportedTopologyError,
)
from .experiments import ExperimentSpec, SweepResult, detect_threshold, run_point, sweep
from .mechanisms import MechanismRecord, PairChannel, anonymize, build_pair_channel, obfuscate_independent
from .oracle import TinyInstance, exact_mi_anonymized, exact_pair_mi, verify_pair_channel
from .population import AssociationGraph, DensitySpec, Population, make_population, sample_profiles
from .tracegen import Stage, TraceMatrix, generate_traces

__version__ = "0.1.0"
