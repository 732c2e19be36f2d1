"""Invariant retrieval-augmented recommender application."""

from .recommender import (
    Recommender,
    HyperParams,
    SynthConfig,
    RunConfig,
    RecommenderBaseException,
    ValidationError
)
