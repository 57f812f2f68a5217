"""Differentially private synthetic tabular data: GAN training, RDP
accounting, mode-specific encoding, and fidelity/utility evaluation."""

from .errors import (
    BalanceError,
    ConfigError,
    ContractError,
    DimensionError,
    DpSynthError,
    MetricUndefinedError,
    NumericGuardError,
    ParseError,
    RunError,
    SchemaError,
    TrainingDivergedError,
)
from .schema import FeatureSpec, GmmModel, RowFilter, Schema
from .encoding import Table, decode_matrix, encode_table, fit_schema, load_matrix, save_matrix
from .gmm import fit_gmm
from .privacy import Accountant, Adam, DpAdam, DpConfig, PrivacyLog, RMSProp, calibrate_sigma
from .gan import GanConfig, GanState, DpTraining, generate, init_state, load_checkpoint, save_checkpoint, train_epoch
from .classifier import train_classifier
from .evaluation import (
    FidelityReport,
    UtilityReport,
    auprc,
    auroc,
    bernoulli_divergence,
    categorical_divergence,
    evaluate_fidelity,
    evaluate_utility,
    pca_project,
)
from .reference import ReferenceDataSpec, default_spec, make_reference_data
from .commands import (
    RunConfig,
    cmd_evaluate,
    cmd_generate,
    cmd_make_reference_data,
    cmd_preprocess,
    cmd_sweep_epsilon,
    cmd_train,
)

__version__ = "0.1.0"
