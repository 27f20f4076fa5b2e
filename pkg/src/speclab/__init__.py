"""Desk-scale lossless speculative decoding over exact tabular language models.

The package wires four layers together: tabular models (targets and
drafters), parallel masked-token drafting with optional target-feature
injection, lossless stochastic/greedy verification with full acceptance
traces, and confidence-adaptive drafter training with a closed-form tabular
optimizer. A CLI (``speclab``) runs the gen / train / bench / analyze
pipeline end to end.
"""

from .models import (
    GREEDY,
    SAMPLE,
    TabularModel,
    Vocabulary,
    as_distribution,
    build_ngram_model,
    generate_autoregressive,
    greedy_token,
    load_model,
    make_synthetic_target,
    next_distribution,
    padded_suffix,
    sample_token,
    save_model,
)
from .drafting import (
    DraftProposal,
    Feature,
    GateConfig,
    apply_gate,
    compute_feature,
    feature_of,
    no_feature,
    propose,
)
from .verification import (
    DEPENDENT,
    INDEPENDENT,
    STOCHASTIC,
    DecodeTrace,
    PositionRecord,
    VerificationOutcome,
    accept_prob,
    decode_loop,
    expected_accept_length,
    prefix_reach_probs,
    residual_distribution,
    verify_greedy,
    verify_stochastic,
)
from .training import (
    CAT,
    DECAY,
    UNIFORM,
    CatWeights,
    TrainConfig,
    TrainingWindow,
    build_training_windows,
    cat_weights,
    decay_weights,
    sample_corpus,
    target_confidences,
    train_tabular_drafter,
    window_loss,
)
from .bench import BenchReport, CostModel, run_bench

__version__ = "0.1.0"

__all__ = [
    "GREEDY",
    "SAMPLE",
    "TabularModel",
    "Vocabulary",
    "as_distribution",
    "build_ngram_model",
    "generate_autoregressive",
    "greedy_token",
    "load_model",
    "make_synthetic_target",
    "next_distribution",
    "padded_suffix",
    "sample_token",
    "save_model",
    "DraftProposal",
    "Feature",
    "GateConfig",
    "apply_gate",
    "compute_feature",
    "feature_of",
    "no_feature",
    "propose",
    "DEPENDENT",
    "INDEPENDENT",
    "STOCHASTIC",
    "DecodeTrace",
    "PositionRecord",
    "VerificationOutcome",
    "accept_prob",
    "decode_loop",
    "expected_accept_length",
    "prefix_reach_probs",
    "residual_distribution",
    "verify_greedy",
    "verify_stochastic",
    "CAT",
    "DECAY",
    "UNIFORM",
    "CatWeights",
    "TrainConfig",
    "TrainingWindow",
    "build_training_windows",
    "cat_weights",
    "decay_weights",
    "sample_corpus",
    "target_confidences",
    "train_tabular_drafter",
    "window_loss",
    "BenchReport",
    "CostModel",
    "run_bench",
]
