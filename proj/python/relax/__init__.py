"""Counterfactual explanations for tabular models with a hybrid-action RL agent."""

from ._relax import (
    CfEnv,
    ConfigError,
    CfResult,
    Dataset,
    DenseNet,
    Done,
    EnvState,
    EnvConfig,
    FeatureSchema,
    GoalSpec,
    MetricsReport,
    MlpPredictor,
    NoCounterfactual,
    NumericError,
    ParseError,
    NormalizationStats,
    PolicySnapshot,
    Predictor,
    RunConfig,
    Task,
    TrainConfig,
    TrainResult,
    TransportError,
    connect_external,
    evaluate,
    evaluate_method,
    fit_normalizer,
    generate_cf,
    load_csv,
    nearest_ct,
    prepare_run,
    read_report,
    spearman,
    split,
    train_global,
    train_mlp_classifier,
    train_mlp_regressor,
    fine_tune_local,
    write_report,
)

__all__ = [n for n in dir() if not n.startswith("_")]
