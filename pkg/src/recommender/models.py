"""Domain types shared by every module of the recommender."""
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .exceptions import DatasetError, RetrievalError

CHECKPOINT_VERSION = "cirr-checkpoint/1"


@dataclass(frozen=True)
class Interaction:
    """One rated interaction, tagged with the environment it happened in."""
    user_id: int
    item_id: int
    rating: float
    timestamp: int
    env_id: int


@dataclass(frozen=True)
class IdMap:
    """Dense index -> raw id of a remapped id space."""
    raw_ids: Tuple[int, ...]

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.raw_ids, self.raw_ids[1:])):
            raise DatasetError("bad-id-map", "raw ids must be strictly increasing")

    def __len__(self) -> int:
        return len(self.raw_ids)

    @cached_property
    def dense_index(self) -> Dict[int, int]:
        return {raw: dense for dense, raw in enumerate(self.raw_ids)}

    def to_dense(self, raw: int) -> int:
        try:
            return self.dense_index[raw]
        except KeyError:
            raise DatasetError("unknown-id", f"id {raw} does not occur in the dataset")

    def to_raw(self, dense: int) -> int:
        return self.raw_ids[dense]


@dataclass(frozen=True)
class InteractionDataset:
    """Interactions sorted by (user_id, timestamp) plus catalog sizes.

    ``user_map``/``item_map`` are set when the loaded ids were sparse and had to be
    remapped; None means the stored ids are the raw ones.
    """
    interactions: Tuple[Interaction, ...]
    num_users: int
    num_items: int
    num_envs: int
    user_map: Optional[IdMap] = field(default=None, compare=False)
    item_map: Optional[IdMap] = field(default=None, compare=False)

    def dense_user(self, raw: int) -> int:
        return self.user_map.to_dense(raw) if self.user_map is not None else raw

    def dense_item(self, raw: int) -> int:
        return self.item_map.to_dense(raw) if self.item_map is not None else raw

    def raw_user(self, dense: int) -> int:
        return self.user_map.to_raw(dense) if self.user_map is not None else dense

    def raw_item(self, dense: int) -> int:
        return self.item_map.to_raw(dense) if self.item_map is not None else dense

    def validate(self) -> None:
        """Check file-level invariants; raises DatasetError."""
        if not self.interactions:
            raise DatasetError("empty-dataset", "dataset has no interactions")
        counts: Dict[int, int] = {}
        envs = set()
        previous = None
        for x in self.interactions:
            if not 0 <= x.item_id < self.num_items:
                raise DatasetError("item-out-of-range", f"item {x.item_id} outside catalog of {self.num_items}")
            if not 0 <= x.env_id < self.num_envs:
                raise DatasetError("env-out-of-range", f"environment {x.env_id} outside {self.num_envs}")
            if not 0 <= x.user_id < self.num_users:
                raise DatasetError("user-out-of-range", f"user {x.user_id} outside {self.num_users}")
            if not 1.0 <= x.rating <= 5.0:
                raise DatasetError("bad-rating", f"rating {x.rating} outside [1, 5]")
            key = (x.user_id, x.timestamp)
            if previous is not None and key < previous:
                raise DatasetError("unsorted-dataset", "interactions must be sorted by (user_id, timestamp)")
            previous = key
            counts[x.user_id] = counts.get(x.user_id, 0) + 1
            envs.add(x.env_id)
        sparse = [u for u, n in counts.items() if n < 2]
        if sparse:
            raise DatasetError("short-history", f"user {sparse[0]} has fewer than 2 interactions")
        if len(envs) < 2:
            raise DatasetError("insufficient-environments", "at least 2 environments must be present")

    @cached_property
    def by_user(self) -> Dict[int, Tuple[Interaction, ...]]:
        grouped: Dict[int, List[Interaction]] = {}
        for x in self.interactions:
            grouped.setdefault(x.user_id, []).append(x)
        return {u: tuple(xs) for u, xs in grouped.items()}

    @cached_property
    def env_ids(self) -> Tuple[int, ...]:
        return tuple(sorted({x.env_id for x in self.interactions}))


@dataclass(frozen=True)
class TrainingExample:
    """A (context, target) pair; negatives are drawn at batch time when empty."""
    user_id: int
    context: Tuple[int, ...]
    target: int
    env_id: int
    negatives: Tuple[int, ...] = ()


@dataclass(frozen=True)
class HeldOutCase:
    """A held-out next item to rank, with the context that preceded it."""
    user_id: int
    context: Tuple[int, ...]
    target: int
    env_id: int


@dataclass(frozen=True)
class DataSplit:
    """Training examples per environment and held-out test cases per environment."""
    train_envs: Tuple[int, ...]
    test_envs: Tuple[int, ...]
    train_examples: Dict[int, Tuple[TrainingExample, ...]]
    test_cases: Dict[int, Tuple[HeldOutCase, ...]]

    @property
    def all_train_examples(self) -> Tuple[TrainingExample, ...]:
        return tuple(ex for e in self.train_envs for ex in self.train_examples.get(e, ()))

    @property
    def shifted_env(self) -> int:
        """The environment with the largest shift (highest id among the evaluated ones)."""
        return max(self.test_cases)


class EvidenceSource(str, Enum):
    HISTORY = "history"
    ATTRIBUTE = "attribute"
    KG_TRIPLET = "kg_triplet"

    @property
    def tag(self) -> str:
        """Tag printed inside explanation citations."""
        return {
            EvidenceSource.HISTORY: "user_history",
            EvidenceSource.ATTRIBUTE: "attribute_pattern",
            EvidenceSource.KG_TRIPLET: "knowledge_graph",
        }[self]


@dataclass(frozen=True)
class HistoryPayload:
    item_id: int
    rating: float
    timestamp: int


@dataclass(frozen=True)
class AttributePayload:
    attr_name: str
    attr_value: str
    item_id: int  # -1 for a value-level record not tied to one item


@dataclass(frozen=True)
class KgPayload:
    head: int
    relation: str
    tail: int


Payload = Union[HistoryPayload, AttributePayload, KgPayload]

_PAYLOAD_TYPES = {
    EvidenceSource.HISTORY: HistoryPayload,
    EvidenceSource.ATTRIBUTE: AttributePayload,
    EvidenceSource.KG_TRIPLET: KgPayload,
}


@dataclass(frozen=True)
class EvidenceItem:
    """One piece of evidence; history records belong to ``user_id``."""
    id: int
    source: EvidenceSource
    payload: Payload
    user_id: Optional[int] = None
    embedding: Optional[np.ndarray] = field(default=None, compare=False)
    stability_var: float = 0.0

    def __post_init__(self):
        if not isinstance(self.payload, _PAYLOAD_TYPES[self.source]):
            raise DatasetError("payload-mismatch", f"evidence {self.id}: payload does not match source {self.source.value}")
        if self.stability_var < 0 or not np.isfinite(self.stability_var):
            raise DatasetError("bad-stability", f"evidence {self.id}: stability_var must be finite and >= 0")

    @property
    def items(self) -> Tuple[int, ...]:
        """Catalog items this evidence talks about."""
        p = self.payload
        if isinstance(p, HistoryPayload):
            return (p.item_id,)
        if isinstance(p, AttributePayload):
            return (p.item_id,) if p.item_id >= 0 else ()
        return (p.head, p.tail)


@dataclass(frozen=True)
class EvidencePool:
    """Evidence indexed by dense id, with a per-user index of history evidence."""
    items: Tuple[EvidenceItem, ...]
    user_index: Dict[int, Tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        for position, ev in enumerate(self.items):
            if ev.id != position:
                raise DatasetError("non-dense-evidence-ids", f"evidence at position {position} has id {ev.id}")
        for user, ids in self.user_index.items():
            if len(set(ids)) != len(ids):
                raise DatasetError("duplicate-candidates", f"user {user} index lists an evidence id twice")

    def __len__(self) -> int:
        return len(self.items)

    @classmethod
    def from_items(cls, items: List[EvidenceItem]) -> "EvidencePool":
        """Build a pool and derive the per-user index from history records."""
        index: Dict[int, List[int]] = {}
        for ev in items:
            if ev.source is EvidenceSource.HISTORY and ev.user_id is not None:
                index.setdefault(ev.user_id, []).append(ev.id)
        return cls(items=tuple(items), user_index={u: tuple(ids) for u, ids in sorted(index.items())})

    @cached_property
    def item_index(self) -> Dict[int, Tuple[int, ...]]:
        """item id -> attribute and kg evidence ids that mention the item."""
        index: Dict[int, List[int]] = {}
        for ev in self.items:
            if ev.source is EvidenceSource.HISTORY:
                continue
            for item in dict.fromkeys(ev.items):
                index.setdefault(item, []).append(ev.id)
        return {i: tuple(ids) for i, ids in index.items()}

    @property
    def has_embeddings(self) -> bool:
        return bool(self.items) and all(ev.embedding is not None for ev in self.items)

    @cached_property
    def embedding_matrix(self) -> np.ndarray:
        if not self.has_embeddings:
            raise RetrievalError("missing-embeddings", "evidence pool has not been embedded")
        return np.stack([ev.embedding for ev in self.items])

    @cached_property
    def stability_vector(self) -> np.ndarray:
        return np.array([ev.stability_var for ev in self.items], dtype=np.float64)

    def with_items(self, items: List[EvidenceItem]) -> "EvidencePool":
        return EvidencePool(items=tuple(items), user_index=self.user_index)


PARAM_NAMES = (
    "item_embeddings",
    "recency_weights",
    "query_proj",
    "key_proj",
    "value_proj",
    "mlp_w1",
    "mlp_b1",
    "mlp_w2",
    "mlp_b2",
)
ENCODER_PARAMS = ("item_embeddings", "recency_weights")

Grads = Dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelParams:
    """All learnable weights plus the fixed IRM dummy multiplier."""
    item_embeddings: np.ndarray   # (num_items, d)
    recency_weights: np.ndarray   # (L,)
    query_proj: np.ndarray        # (2d, d)
    key_proj: np.ndarray          # (d, d)
    value_proj: np.ndarray        # (d, d)
    mlp_w1: np.ndarray            # (3d, d)
    mlp_b1: np.ndarray            # (d,)
    mlp_w2: np.ndarray            # (d,)
    mlp_b2: np.ndarray            # () scalar array
    irm_dummy_w: float = 1.0

    @property
    def dim(self) -> int:
        return self.item_embeddings.shape[1]

    @property
    def num_items(self) -> int:
        return self.item_embeddings.shape[0]

    @property
    def max_len(self) -> int:
        return self.recency_weights.shape[0]

    @classmethod
    def initialize(cls, num_items: int, dim: int, max_len: int, seed: int, scale: float = 0.1) -> "ModelParams":
        """Seeded Gaussian initialisation; recency weights start flat."""
        rng = np.random.default_rng([seed, 1])
        return cls(
            item_embeddings=rng.normal(0.0, scale, (num_items, dim)),
            recency_weights=np.zeros(max_len),
            query_proj=rng.normal(0.0, 1.0 / np.sqrt(2 * dim), (2 * dim, dim)),
            key_proj=rng.normal(0.0, 1.0 / np.sqrt(dim), (dim, dim)),
            value_proj=rng.normal(0.0, 1.0 / np.sqrt(dim), (dim, dim)),
            mlp_w1=rng.normal(0.0, 1.0 / np.sqrt(3 * dim), (3 * dim, dim)),
            mlp_b1=np.zeros(dim),
            mlp_w2=rng.normal(0.0, 1.0 / np.sqrt(dim), dim),
            mlp_b2=np.array(0.0),
        )

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @classmethod
    def from_dict(cls, arrays: Dict[str, np.ndarray], irm_dummy_w: float = 1.0) -> "ModelParams":
        return cls(**{name: np.asarray(arrays[name], dtype=np.float64) for name in PARAM_NAMES}, irm_dummy_w=irm_dummy_w)

    def zero_grads(self) -> Grads:
        return {name: np.zeros_like(value) for name, value in self.as_dict().items()}

    def updated(self, **arrays: np.ndarray) -> "ModelParams":
        return replace(self, **arrays)

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.as_dict().values()) and np.isfinite(self.irm_dummy_w)


@dataclass(frozen=True)
class LossGrad:
    """A scalar loss and its gradients keyed by parameter name (``irm_dummy_w`` included when relevant)."""
    value: float
    grads: Grads


@dataclass(frozen=True)
class RetrievalResult:
    """Top-K evidence in rank order."""
    evidence_ids: Tuple[int, ...] = ()
    scores: Tuple[float, ...] = ()

    def __len__(self) -> int:
        return len(self.evidence_ids)

    def without_rank(self, rank: int) -> "RetrievalResult":
        """The same result with the evidence at 1-based ``rank`` removed."""
        keep = [i for i in range(len(self.evidence_ids)) if i != rank - 1]
        return RetrievalResult(
            evidence_ids=tuple(self.evidence_ids[i] for i in keep),
            scores=tuple(self.scores[i] for i in keep),
        )

    def to_lines(self, pool: EvidencePool) -> List[str]:
        """rank, pool id, score and source tag, one record per line."""
        return [
            f"{rank}\t{ev_id}\t{score:.9f}\t{pool.items[ev_id].source.tag}"
            for rank, (ev_id, score) in enumerate(zip(self.evidence_ids, self.scores), start=1)
        ]


@dataclass(frozen=True)
class RankOutput:
    score: float
    attention: np.ndarray
    aggregated_evidence: np.ndarray


@dataclass(frozen=True)
class Explanation:
    """Template explanation text with its ordered citations (1-based ranks)."""
    text: str
    citations: Tuple[int, ...]
    per_citation_weight: Tuple[float, ...]
    cited_evidence_ids: Tuple[int, ...] = ()
    retrieved_count: int = 0

    def sidecar_lines(self) -> List[str]:
        """rank, pool id and attention weight per citation."""
        return [
            f"{rank}\t{ev_id}\t{weight:.6f}"
            for rank, ev_id, weight in zip(self.citations, self.cited_evidence_ids, self.per_citation_weight)
        ]


@dataclass(frozen=True)
class TrainLogRecord:
    stage: int
    epoch: int
    l_rec: float
    l_inv: float
    l_cons: float
    total: float
    wall_time: float


TRAIN_LOG_COLUMNS = ("stage", "epoch", "l_rec", "l_inv", "l_cons", "total", "wall_time")


@dataclass
class TrainLog:
    """Per-epoch records; ``steps`` keeps the per-step components for audits."""
    records: List[TrainLogRecord] = field(default_factory=list)
    steps: List[TrainLogRecord] = field(default_factory=list)

    def extend(self, other: "TrainLog") -> None:
        self.records.extend(other.records)
        self.steps.extend(other.steps)


@dataclass(frozen=True)
class EnvMetrics:
    ndcg: float
    hr: float
    n_cases: int


@dataclass(frozen=True)
class EvalReport:
    """Per-environment ranking quality plus robustness and faithfulness summaries."""
    per_env: Dict[int, EnvMetrics]
    train_env: int
    shifted_env: int
    ood_delta: float
    per_env_delta: Dict[int, float]
    evidence_coverage: float
    delta_f1: float
    mean_score_drop: float
    cf_satisfied_fraction: float
    source_distribution: Dict[str, float]
    config: Dict[str, object]
    seed: int


@dataclass(frozen=True)
class AdamState:
    """First and second moments per parameter plus the step counter."""
    m: Grads
    v: Grads
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(m=params.zero_grads(), v=params.zero_grads(), step=0)


@dataclass(frozen=True)
class Checkpoint:
    """Everything needed to resume training bit-for-bit."""
    params: ModelParams
    adam: AdamState
    hyperparams: Dict[str, object]
    rng_state: Dict[str, int]
    version: str = CHECKPOINT_VERSION
