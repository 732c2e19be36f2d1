"""Causal-invariant retrieval-augmented recommender package."""

__version__ = "0.1.0"

from .config import HyperParams, SynthConfig, SplitConfig, GlobalConfig, RunConfig
from .models import (
    Interaction,
    InteractionDataset,
    EvidenceItem,
    EvidencePool,
    EvidenceSource,
    ModelParams,
    RetrievalResult,
    Explanation,
    EvalReport,
    Checkpoint
)
from .recommender import Recommender
from .exceptions import (
    RecommenderBaseException,
    ValidationError,
    UsageError,
    DatasetError,
    EncoderError,
    NumericalError,
    RetrievalError,
    RankerError,
    MetricError,
    CheckpointError
)
