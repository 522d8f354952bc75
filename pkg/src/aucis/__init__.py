"""Subject-deconfounded multi-label action-unit recognition toolkit."""

from .datamodel import AUSample, Dataset, ModelConfig, load_dataset, save_dataset
from .scm import (
    AppearanceCode,
    ExactOracle,
    SCMSpec,
    SubjectRule,
    confounding_gap,
    demo_spec,
    exact_conditional,
    exact_interventional,
    sample_dataset,
    spec_hash,
    unconfounded_spec,
)
from .cis import (
    CISOutput,
    CISParameters,
    ConfounderDictionary,
    MemoryBanks,
    SubjectMemoryBank,
    aggregate_r,
    attention_weights,
    bank_update,
    cis_forward,
    rebuild_dictionary,
)
from .model import AUModel, binarize, build_model, forward_logits, predict_probabilities
from .train import (
    ClassFrequencies,
    TrainConfig,
    TrainResult,
    adaptive_loss,
    compute_class_frequencies,
    fit,
    load_checkpoint,
    parameter_hash,
    save_checkpoint,
)
from .evaluation import (
    EvalReport,
    FoldPlan,
    evaluate_model,
    export_features,
    f1_scores,
    fold_split,
    load_features,
    oracle_alignment,
    pcc_cosine,
    pcc_matrix,
    split_subject_exclusive,
    wrap_oracle_predictor,
    write_f1_csv,
)

__version__ = "0.1.0"
