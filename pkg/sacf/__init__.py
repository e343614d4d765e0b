"""
SACF Package
Social-context-aware gaze following: synthetic scenes, two heatmap experts, a routing gate and metrics
"""

# Import monitoring functionality
from .monitoring import set_stage_callback

from .errors import (
    SacfError,
    InputError,
    NumericalError,
    InvariantViolation,
    MissingArtifactError,
)

# Import data model
from .scene_model import (
    BBox,
    Category,
    Annotation,
    SceneFeatures,
    Dataset,
    DatasetMetadata,
    load_dataset,
    save_dataset,
)

# Import generator
from .synth_gen import GenConfig, make_dataset

# Import experts and gate
from .experts import (
    AugConfig,
    ExpertHyper,
    ExpertKind,
    ExpertParams,
    LogisticExpert,
    train_expert,
    load_expert,
    save_expert,
)
from .gate_sca import (
    GateHyper,
    GateParams,
    LearnedGate,
    OracleGate,
    train_gate,
    load_gate,
    save_gate,
)

# Import pipeline and metrics
from .pipeline import EvalMode, Prediction, SacfModel, evaluate, predict, scenario_analysis
from .metrics import EvalReport, cohen_kappa, agreement_curve, compare_reports
from .settings import RunConfig, load_run_config

__all__ = [
    # Monitoring
    'set_stage_callback',

    # Errors
    'SacfError',
    'InputError',
    'NumericalError',
    'InvariantViolation',
    'MissingArtifactError',

    # Data model
    'BBox',
    'Category',
    'Annotation',
    'SceneFeatures',
    'Dataset',
    'DatasetMetadata',
    'load_dataset',
    'save_dataset',

    # Generator
    'GenConfig',
    'make_dataset',

    # Experts
    'AugConfig',
    'ExpertHyper',
    'ExpertKind',
    'ExpertParams',
    'LogisticExpert',
    'train_expert',
    'load_expert',
    'save_expert',

    # Gate
    'GateHyper',
    'GateParams',
    'LearnedGate',
    'OracleGate',
    'train_gate',
    'load_gate',
    'save_gate',

    # Pipeline
    'EvalMode',
    'Prediction',
    'SacfModel',
    'evaluate',
    'predict',
    'scenario_analysis',

    # Metrics
    'EvalReport',
    'cohen_kappa',
    'agreement_curve',
    'compare_reports',

    # Config
    'RunConfig',
    'load_run_config',
]
