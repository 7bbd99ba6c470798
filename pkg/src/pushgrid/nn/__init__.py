"""Networks: layers and action head, grid extractors, recurrent policy."""

from pushgrid.nn.core import (
    DTYPE,
    MLP,
    CategoricalPair,
    entropy,
    joint_log_probs,
    log_prob,
    lstm_step,
    make_lstm,
    mlp_forward,
    mode,
    sample_action,
    sample_bins,
)
from pushgrid.nn.extractors import (
    KINDS,
    AttentionExtractor,
    CNNExtractor,
    MLPAblationExtractor,
    attention_extract,
    cnn_extract,
    make_extractor,
    mlp_ablation_extract,
    parameter_count,
)
from pushgrid.nn.policy import ActorCritic, ObsBatch, PushNet, RecurrentState, encode_state

__all__ = [
    "DTYPE", "MLP", "CategoricalPair", "entropy", "joint_log_probs", "log_prob", "lstm_step", "make_lstm",
    "mlp_forward", "mode", "sample_action", "sample_bins", "KINDS", "AttentionExtractor", "CNNExtractor",
    "MLPAblationExtractor", "attention_extract", "cnn_extract", "make_extractor", "mlp_ablation_extract",
    "parameter_count", "ActorCritic", "ObsBatch", "PushNet", "RecurrentState", "encode_state",
]
