"""Root-cause diagnosis for cyber-physical systems.

Subsystem-level anomaly detection on multivariate telemetry, followed by a
multi-criteria search over a causal subsystem graph for the subsystems that
best explain the observed symptoms.
"""

from .diagnosis import (
    EQUAL_WEIGHTS,
    SWAT_WEIGHTS,
    CandidateScore,
    CriterionWeights,
    DiagnosisError,
    DiagnosisResult,
    IterationTrace,
    candidate_set,
    diagnose,
    score_candidate,
)
from .frames import FrameError, SubsystemSignalsMap, TimeSeriesFrame
from .graph import (
    CausalGraph,
    GraphError,
    HealthStateVector,
    UnknownNodeError,
    longest_symptomatic_chain,
    reachable_set,
    shortest_distance,
)
from .simulator import (
    ControlPolicy,
    FaultSpec,
    LtiSystem,
    SimulationError,
    TrialConfig,
    TrialDataset,
    build_system,
    make_trial,
    sample_graph,
    simulate,
)
from .symptoms import (
    AutoencoderModel,
    BinarizationConfig,
    LinearSubspaceModel,
    ResidualModel,
    ResidualVector,
    SymptomError,
    binarize,
    calibrate_thresholds,
    fit_autoencoder_model,
    fit_linear_subspace_model,
    health_series,
    health_states,
)

__version__ = "0.1.0"
