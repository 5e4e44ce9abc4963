"""Token-synchronous confidence estimation for a toy integrate-and-fire
recognizer: autodiff kernel, firing transducer, model, labels, metrics,
and the training/evaluation harness behind the ``cifconf`` CLI."""

from .cif import FiringResult, integrate_and_fire, predict_weights, quantity_loss, scale_weights
from .data import Corpus, CorpusSpec, Utterance, generate_corpus, load_corpus, save_corpus
from .kernel import AdamState, Rng, Tensor, adam_step, backward
from .labeling import (
    AlignmentPath,
    LabelSeq,
    cer,
    corrupt,
    edit_distance,
    labels_for_decode,
    labels_for_hypothesis,
)
from .metrics import (
    MetricsReport,
    ScoredToken,
    UttRecord,
    auc,
    ece,
    ece_u,
    filter_curve,
    rmse_u,
    roc_points,
    split_by_deletion,
)
from .model import (
    ConfidenceResult,
    Model,
    ModelConfig,
    ParamStore,
    bce_loss,
    load_checkpoint,
    save_checkpoint,
)
from .train import RunConfig, default_cem_run, noam_lr, train_base, train_confidence

__version__ = "0.1.0"
