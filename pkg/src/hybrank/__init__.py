"""Learning to rank from clicks, annotations, and mixtures of the two.

The package builds synthetic retrieval corpora with hidden graded truth,
simulates position-biased click logs, scripts annotators of configurable
quality, and trains neural rankers under click objectives (naive through
debiased and disentangled variants), annotation objectives, and two hybrid
regimes: an alternating schedule and a frequency-gated multi-objective
loss. Everything is seeded and bit-reproducible, including checkpoints.
"""

__version__ = "0.1.0"

from .data import Corpus, SyntheticConfig, generate_synthetic, load_corpus
from .evaluation import EvalReport, evaluate_ranker, ndcg_at_k
from .train import TrainConfig, Trainer, train

__all__ = [
    "Corpus",
    "SyntheticConfig",
    "generate_synthetic",
    "load_corpus",
    "EvalReport",
    "evaluate_ranker",
    "ndcg_at_k",
    "TrainConfig",
    "Trainer",
    "train",
    "__version__",
]
