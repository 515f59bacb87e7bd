"""Neural classifiers for implicit-sentiment polarity, built on a small
numpy autodiff engine."""

__version__ = "0.1.0"

from .autodiff import Tape, Variable, backward, grad_check, no_grad
from .data import DatasetSplit, EmbeddingTable, Example, Vocabulary, load_corpus, load_embeddings, split_train_valid, vectorize
from .metrics import ConfusionMatrix, EvalReport
from .models import ClassifierModel, ModelSpec, build_model
from .training import TrainConfig, fit, run_replicates

__all__ = [
    "Tape",
    "Variable",
    "backward",
    "grad_check",
    "no_grad",
    "DatasetSplit",
    "EmbeddingTable",
    "Example",
    "Vocabulary",
    "load_corpus",
    "load_embeddings",
    "split_train_valid",
    "vectorize",
    "ConfusionMatrix",
    "EvalReport",
    "ClassifierModel",
    "ModelSpec",
    "build_model",
    "TrainConfig",
    "fit",
    "run_replicates",
]
