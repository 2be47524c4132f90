"""Caption decoder with reflective attention over its own history, on a small numpy autodiff core."""

from .data import DataConfig, Vocabulary, build_vocab, generate_splits
from .inference import beam_search, greedy_decode
from .metrics import score_corpus
from .model import ModelDims, RDNParams, forward_teacher
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "DataConfig",
    "ModelDims",
    "RDNParams",
    "TrainConfig",
    "Vocabulary",
    "beam_search",
    "build_vocab",
    "forward_teacher",
    "generate_splits",
    "greedy_decode",
    "score_corpus",
    "train",
]
