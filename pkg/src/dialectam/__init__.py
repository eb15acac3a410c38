"""Multi-dialect LSTM acoustic modeling with feature-wise conditioning.

A self-contained float64 implementation of a batch-normalized LSTM frame
classifier whose layers can be modulated by per-dialect and per-utterance
scale/shift vectors, plus synthetic multi-dialect data, a deterministic
training engine, and an ablation harness comparing the whole model family.
"""

from .conditioning import UNKNOWN_DIALECT, ConditioningWeights, DialectVocabulary
from .data import (
    Batch,
    Dataset,
    DatasetManifest,
    DialectProfile,
    DialectSpec,
    Utterance,
    batch_iterator,
    build_manifest,
    default_spec,
    generate_bundle,
    load_dataset,
    save_dataset,
    synth_generate,
)
from .evaluation import (
    EvalReport,
    FilmDump,
    SuiteConfig,
    cluster_score,
    compare_suite,
    dump_film,
    frame_error_rate,
)
from .layers import BatchNormState, FilmParams, LookaheadParams, LstmLayerParams, apply_film
from .model import (
    Model,
    ModelConfig,
    VARIANTS,
    build_model,
    count_params,
    forward,
    load_model,
    loss_and_grads,
    save_model,
    variant_config,
)
from .numerics import ParamStore, Rng, grad_check, masked_mean_over_time, matmul, pointwise
from .training import Adam, TrainConfig, TrainingDiverged, fine_tune, relabel_unknown, train

__version__ = "0.1.0"
