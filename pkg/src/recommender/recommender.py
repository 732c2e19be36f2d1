"""Trained model facade: encode, retrieve, rank and explain for one user at a time."""
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .config import HyperParams
from .encoder import PreferenceVector, encode
from .explainer import generate_explanation
from .models import EvidencePool, Explanation, ModelParams, RankOutput, RetrievalResult
from .ranker import rank_score, select_key_evidence, select_key_evidence_loo
from .retriever import candidate_evidence, retrieve_topk

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScoredItem:
    item: int
    retrieved: RetrievalResult
    output: RankOutput


@dataclass(frozen=True)
class Recommender:
    """ModelParams, an embedded evidence pool and the hyper-parameters used at inference."""
    params: ModelParams
    pool: EvidencePool
    hp: HyperParams
    item_label: Optional[Callable[[int], int]] = field(default=None, compare=False)

    def with_hyperparams(self, **changes) -> "Recommender":
        return replace(self, hp=replace(self.hp, **changes))

    def encode(self, context: Sequence[int]) -> PreferenceVector:
        return encode(self.params, context)

    def retrieve(self, z: PreferenceVector, user_id: int, context: Sequence[int], item: int) -> RetrievalResult:
        """Top-K evidence for scoring ``item``; empty when retrieval is off or nothing is indexed."""
        if self.hp.k == 0 or len(self.pool) == 0:
            return RetrievalResult()
        candidates = candidate_evidence(self.pool, user_id, context, item)
        if not candidates:
            logger.debug(f"no candidate evidence for user {user_id}, item {item}")
            return RetrievalResult()
        return retrieve_topk(z, self.pool, candidates, self.hp)

    def key_evidence(self, z: PreferenceVector, item: int, retrieved: RetrievalResult, out: RankOutput) -> int:
        """1-based rank of d* under the configured selection rule."""
        if self.hp.key_selection == "leave_one_out":
            return select_key_evidence_loo(self.params, z, item, retrieved, self.pool)
        return select_key_evidence(out)

    def score_details(self, user_id: int, context: Sequence[int], items: Sequence[int]) -> Tuple[PreferenceVector, List[ScoredItem]]:
        z = self.encode(context)
        scored = []
        for item in items:
            retrieved = self.retrieve(z, user_id, context, int(item))
            scored.append(ScoredItem(int(item), retrieved, rank_score(self.params, z, int(item), retrieved, self.pool)))
        return z, scored

    def score_items(
        self, user_id: int, context: Sequence[int], items: Sequence[int], drop_key_evidence: bool = False
    ) -> np.ndarray:
        """Ranker scores of ``items``; with ``drop_key_evidence`` each item is rescored without its d*."""
        z, scored = self.score_details(user_id, context, items)
        if not drop_key_evidence:
            return np.array([s.output.score for s in scored])
        dropped = []
        for s in scored:
            if len(s.retrieved) == 0:
                dropped.append(s.output.score)
                continue
            reduced = s.retrieved.without_rank(self.key_evidence(z, s.item, s.retrieved, s.output))
            dropped.append(rank_score(self.params, z, s.item, reduced, self.pool).score)
        return np.array(dropped)

    def score_drop(self, user_id: int, context: Sequence[int], item: int) -> Optional[float]:
        """r(full) - r(without d*) for one item; None when nothing was retrieved."""
        z, (s,) = self.score_details(user_id, context, [item])
        if len(s.retrieved) == 0:
            return None
        reduced = s.retrieved.without_rank(self.key_evidence(z, item, s.retrieved, s.output))
        return s.output.score - rank_score(self.params, z, item, reduced, self.pool).score

    def explain(self, user_id: int, context: Sequence[int], item: int) -> Tuple[RetrievalResult, RankOutput, Explanation]:
        """Retrieved evidence, ranker output and template explanation for one recommendation."""
        _, (s,) = self.score_details(user_id, context, [item])
        explanation = generate_explanation(
            s.retrieved, s.output, self.pool, self.hp.tau_cite, item=item, item_label=self.item_label
        )
        return s.retrieved, s.output, explanation

    def recommend(self, user_id: int, context: Sequence[int], top_n: int = 10, exclude_seen: bool = True) -> List[Tuple[int, float]]:
        """Best ``top_n`` catalog items as (item, score), ties by ascending item id."""
        items = np.arange(self.params.num_items)
        if exclude_seen:
            items = np.setdiff1d(items, np.asarray(context, dtype=np.int64))
        scores = self.score_items(user_id, context, items)
        order = np.lexsort((items, -scores))[:top_n]
        return [(int(items[i]), float(scores[i])) for i in order]
