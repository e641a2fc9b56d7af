"""Joint user localization and channel reconstruction for a RIS-aided OFDM
uplink: scene synthesis, mean-field variational inference, Fisher-information
position bounds, swarm/ML baselines, and a seeded Monte Carlo harness."""

from .geometry import (FieldMode, ScenarioConfig, RisProfile, ChannelTruth,
                       SnapshotSet, SignalParams, channel_truth, log_likelihood,
                       noiseless_signal, random_profile, snr_db, synthesize)
from .grid import AngularDictionary, AngularGrid, SparseChannel, build_dictionary, build_grid
from .vbi import (ConvergenceReport, DivergenceError, Priors, VariationalState,
                  default_priors, run_jcle)
from .locate import DelayGrid, EstimationResult, extract_delay, user_position
from .bcrb import FisherMatrix, UnboundedBoundError, bcrb_position, fim, gain_fim, position_bound
from .baselines import PsoConfig, ml_localize, pso_localize
from .harness import ExperimentSpec, TrialRecord, UsageError, run_sweep, run_trial

__version__ = "0.1.0"

__all__ = [
    "FieldMode", "ScenarioConfig", "RisProfile", "ChannelTruth", "SnapshotSet",
    "SignalParams", "channel_truth", "log_likelihood", "noiseless_signal",
    "random_profile", "snr_db", "synthesize",
    "AngularDictionary", "AngularGrid", "SparseChannel", "build_dictionary", "build_grid",
    "ConvergenceReport", "DivergenceError", "Priors", "VariationalState",
    "default_priors", "run_jcle",
    "DelayGrid", "EstimationResult", "extract_delay", "user_position",
    "FisherMatrix", "UnboundedBoundError", "bcrb_position", "fim", "gain_fim",
    "position_bound",
    "PsoConfig", "ml_localize", "pso_localize",
    "ExperimentSpec", "TrialRecord", "UsageError", "run_sweep", "run_trial",
    "__version__",
]
