"""Synthetic multi-environment interaction data with planted spurious correlations, and the train/test split."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .config import SynthConfig
from .exceptions import DatasetError
from .models import (
    AttributePayload,
    DataSplit,
    EvidenceItem,
    EvidencePool,
    EvidenceSource,
    HeldOutCase,
    HistoryPayload,
    Interaction,
    InteractionDataset,
    KgPayload,
    TrainingExample,
)

logger = logging.getLogger(__name__)

BASE_TIMESTAMP = 1_600_000_000
STEP_SECONDS = 3600


@dataclass
class SyntheticTruth:
    """Latent factors and per-environment parameters behind a generated dataset."""
    user_stable: np.ndarray
    item_stable: np.ndarray
    item_spurious: np.ndarray
    projection: np.ndarray
    effective_strength: List[float]
    train_envs: List[int]
    attribute_kinds: Dict[str, str] = field(default_factory=dict)

    def meta(self, cfg: SynthConfig, dataset: InteractionDataset, pool: EvidencePool) -> Dict[str, object]:
        """Reproducibility record written next to the generated files."""
        return {
            "seed": cfg.seed,
            "num_users": dataset.num_users,
            "num_items": dataset.num_items,
            "num_envs": dataset.num_envs,
            "num_interactions": len(dataset.interactions),
            "num_evidence": len(pool),
            "train_envs": self.train_envs,
            "spurious_strength": list(cfg.spurious_strength),
            "effective_strength": [round(s, 12) for s in self.effective_strength],
            "shift_intensity": cfg.shift_intensity,
            "attribute_kinds": self.attribute_kinds,
        }


def effective_strengths(cfg: SynthConfig) -> List[float]:
    """Training environments keep their strength; test environments are flipped
    towards the opposite sign by shift_intensity, the last one the most."""
    n_test = cfg.num_envs - cfg.num_train_envs
    strengths = []
    for env, strength in enumerate(cfg.spurious_strength):
        if env < cfg.num_train_envs:
            strengths.append(float(strength))
        else:
            grade = (env - cfg.num_train_envs + 1) / n_test
            strengths.append(float(strength * (1.0 - 2.0 * cfg.shift_intensity * grade)))
    return strengths


def _env_counts(cfg: SynthConfig) -> List[int]:
    shares = np.asarray(cfg.env_shares, dtype=np.float64)
    counts = np.maximum(2, np.floor(shares / shares.sum() * cfg.interactions_per_user)).astype(int)
    counts[int(np.argmax(counts))] += cfg.interactions_per_user - int(counts.sum())
    return [int(c) for c in counts]


def _softmax(x: np.ndarray) -> np.ndarray:
    ex = np.exp(x - x.max())
    return ex / ex.sum()


def _attributes(cfg: SynthConfig, item_stable: np.ndarray, item_spurious: np.ndarray):
    """Discretise latent columns into attribute levels; even attributes read stable columns."""
    names, kinds, levels = [], {}, []
    quantiles = np.linspace(0, 1, cfg.attr_levels + 1)[1:-1]
    for a in range(cfg.n_attributes):
        use_spurious = a % 2 == 1 and cfg.spurious_dim > 0
        column = item_spurious[:, (a // 2) % cfg.spurious_dim] if use_spurious else item_stable[:, (a // 2) % cfg.stable_dim]
        name = f"facet_{a}"
        names.append(name)
        kinds[name] = "spurious" if use_spurious else "stable"
        levels.append(np.searchsorted(np.quantile(column, quantiles), column, side="right"))
    return names, kinds, np.stack(levels, axis=1)


def generate_synthetic(cfg: SynthConfig) -> Tuple[InteractionDataset, EvidencePool, SyntheticTruth]:
    """Generate interactions, the evidence pool built from them, and the latent ground truth."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    user_stable = rng.normal(size=(cfg.num_users, cfg.stable_dim))
    item_stable = rng.normal(size=(cfg.num_items, cfg.stable_dim))
    item_spurious = rng.normal(size=(cfg.num_items, cfg.spurious_dim))
    projection = rng.normal(scale=1.0 / np.sqrt(cfg.stable_dim), size=(cfg.stable_dim, cfg.spurious_dim))
    strengths = effective_strengths(cfg)
    counts = _env_counts(cfg)
    stable_aff = user_stable @ item_stable.T / np.sqrt(cfg.stable_dim)
    if cfg.spurious_dim:
        spurious_aff = (user_stable @ projection) @ item_spurious.T / np.sqrt(cfg.spurious_dim)
    else:
        spurious_aff = np.zeros_like(stable_aff)

    interactions: List[Interaction] = []
    for user in range(cfg.num_users):
        step = 0
        for env, n_env in enumerate(counts):
            prob = _softmax(cfg.affinity_scale * (stable_aff[user] + strengths[env] * spurious_aff[user]))
            for item in rng.choice(cfg.num_items, size=n_env, p=prob):
                rating = float(np.clip(np.round(3.0 + stable_aff[user, item], 1), 1.0, 5.0))
                interactions.append(Interaction(user, int(item), rating, BASE_TIMESTAMP + step * STEP_SECONDS, env))
                step += 1
    dataset = InteractionDataset(tuple(interactions), cfg.num_users, cfg.num_items, cfg.num_envs)
    dataset.validate()

    names, kinds, levels = _attributes(cfg, item_stable, item_spurious)
    train_envs = list(range(cfg.num_train_envs))
    truth = SyntheticTruth(user_stable, item_stable, item_spurious, projection, strengths, train_envs, kinds)
    pool = _build_pool(cfg, dataset, names, kinds, levels, rng)
    logger.info(
        f"Generated {len(interactions)} interactions for {cfg.num_users} users, "
        f"{len(pool)} evidence records, effective strengths {[round(s, 3) for s in strengths]}"
    )
    return dataset, pool, truth


def _build_pool(cfg, dataset, names, kinds, levels, rng) -> EvidencePool:
    items: List[EvidenceItem] = []

    def add(source: EvidenceSource, payload, user_id=None) -> None:
        items.append(EvidenceItem(id=len(items), source=source, payload=payload, user_id=user_id))

    for item in range(cfg.num_items):
        for a, name in enumerate(names):
            add(EvidenceSource.ATTRIBUTE, AttributePayload(name, f"v{int(levels[item, a])}", item))

    by_value: Dict[Tuple[int, int], np.ndarray] = {}
    for a in range(len(names)):
        for level in range(cfg.attr_levels):
            by_value[(a, level)] = np.flatnonzero(levels[:, a] == level)
    for item in range(cfg.num_items):
        for _ in range(cfg.kg_links_per_item):
            a = int(rng.integers(len(names)))
            peers = by_value[(a, int(levels[item, a]))]
            peers = peers[peers != item]
            if len(peers) == 0:
                continue
            tail = int(rng.choice(peers))
            relation = "compatible_with" if kinds[names[a]] == "stable" else "co_trending_with"
            add(EvidenceSource.KG_TRIPLET, KgPayload(item, relation, tail))

    train_envs = set(range(cfg.num_train_envs))
    for user, history in sorted(dataset.by_user.items()):
        last_in_env = {x.env_id: i for i, x in enumerate(history)}
        usable = [x for i, x in enumerate(history) if x.env_id in train_envs and last_in_env[x.env_id] != i]
        for x in usable[-cfg.history_evidence_per_user:]:
            add(EvidenceSource.HISTORY, HistoryPayload(x.item_id, x.rating, x.timestamp), user_id=user)
    return EvidencePool.from_items(items)


def split_dataset(dataset: InteractionDataset, train_envs: Sequence[int], max_len: int) -> DataSplit:
    """Hold out each user's last interaction per environment; train on the rest of the training environments."""
    train_set = set(train_envs)
    if not train_set & set(dataset.env_ids):
        raise DatasetError("empty-split", "none of the training environments occurs in the dataset")
    if len(train_set & set(dataset.env_ids)) < 2:
        raise DatasetError("insufficient-environments", "at least 2 training environments must occur in the dataset")
    train: Dict[int, List[TrainingExample]] = {e: [] for e in sorted(train_set)}
    test: Dict[int, List[HeldOutCase]] = {e: [] for e in dataset.env_ids}
    for user, history in sorted(dataset.by_user.items()):
        held_out = {i for i in {x.env_id: i for i, x in enumerate(history)}.values()}
        for i, x in enumerate(history):
            if i == 0:
                continue
            context = tuple(h.item_id for h in history[max(0, i - max_len):i])
            if i in held_out:
                test[x.env_id].append(HeldOutCase(user, context, x.item_id, x.env_id))
            elif x.env_id in train_set:
                train[x.env_id].append(TrainingExample(user, context, x.item_id, x.env_id))
    test_cases = {e: tuple(cases) for e, cases in test.items() if cases}
    if not test_cases:
        raise DatasetError("empty-split", "no held-out cases could be formed")
    split = DataSplit(
        train_envs=tuple(sorted(train_set)),
        test_envs=tuple(e for e in sorted(test_cases) if e not in train_set),
        train_examples={e: tuple(xs) for e, xs in train.items()},
        test_cases=test_cases,
    )
    logger.info(
        f"Split: {sum(len(v) for v in split.train_examples.values())} training examples, "
        f"{sum(len(v) for v in test_cases.values())} held-out cases over {len(test_cases)} environments"
    )
    return split
