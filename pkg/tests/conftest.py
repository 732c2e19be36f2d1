import numpy as np
import pytest

from src.recommender.config import HyperParams, SynthConfig
from src.recommender.datagen import generate_synthetic, split_dataset
from src.recommender.models import (
    AttributePayload,
    EvidenceItem,
    EvidencePool,
    EvidenceSource,
    HistoryPayload,
    KgPayload,
    ModelParams,
)
from src.recommender.retriever import embed_evidence, precompute_stability


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth() -> SynthConfig:
    return SynthConfig(
        num_users=30,
        num_items=40,
        num_envs=3,
        num_train_envs=2,
        interactions_per_user=12,
        stable_dim=3,
        spurious_dim=2,
        spurious_strength=[0.9, 0.6, 0.9],
        shift_intensity=0.5,
        env_shares=[0.4, 0.4, 0.2],
        n_attributes=2,
        attr_levels=2,
        kg_links_per_item=1,
        history_evidence_per_user=5,
        seed=3,
    )


@pytest.fixture
def small_hp() -> HyperParams:
    return HyperParams(
        dim=8,
        max_len=5,
        n_neg=4,
        n_neg_stage2=2,
        batch_size=16,
        t1=2,
        t2=2,
        k=4,
        lr=0.01,
        stability_users=10,
        eval_negatives=10,
        seed=0,
    )


@pytest.fixture(scope="session")
def synthetic(small_synth):
    """(dataset, pool, truth) of the small benchmark; treat as read-only."""
    return generate_synthetic(small_synth)


@pytest.fixture
def split(synthetic, small_hp):
    dataset, _, _ = synthetic
    return split_dataset(dataset, [0, 1], small_hp.max_len)


@pytest.fixture
def params(synthetic, small_hp) -> ModelParams:
    dataset, _, _ = synthetic
    return ModelParams.initialize(dataset.num_items, small_hp.dim, small_hp.max_len, seed=0, scale=0.3)


@pytest.fixture
def stable_pool(synthetic, params, small_hp) -> EvidencePool:
    """Embedded pool with stability statistics from the training environments."""
    dataset, pool, _ = synthetic
    return precompute_stability(embed_evidence(pool, params), dataset, params, small_hp, envs=[0, 1])


@pytest.fixture
def toy_pool() -> EvidencePool:
    """One record of each source over a 6-item catalog."""
    items = [
        EvidenceItem(0, EvidenceSource.HISTORY, HistoryPayload(1, 4.0, 100), user_id=0),
        EvidenceItem(1, EvidenceSource.HISTORY, HistoryPayload(2, 5.0, 200), user_id=0),
        EvidenceItem(2, EvidenceSource.ATTRIBUTE, AttributePayload("color", "red", 3)),
        EvidenceItem(3, EvidenceSource.ATTRIBUTE, AttributePayload("color", "red", 4)),
        EvidenceItem(4, EvidenceSource.KG_TRIPLET, KgPayload(3, "compatible_with", 5)),
        EvidenceItem(5, EvidenceSource.HISTORY, HistoryPayload(0, 3.0, 50), user_id=1),
    ]
    return EvidencePool.from_items(items)
