"""Evidence embedding, cross-environment stability statistics and blended top-K retrieval."""
import logging
from dataclasses import replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .config import HyperParams
from .encoder import PreferenceVector, encode_env
from .exceptions import RetrievalError
from .models import (
    AttributePayload,
    EvidencePool,
    HistoryPayload,
    InteractionDataset,
    ModelParams,
    RetrievalResult,
)

logger = logging.getLogger(__name__)

_EPS = 1e-12


def _attribute_groups(pool: EvidencePool) -> Dict[Tuple[str, str], List[int]]:
    groups: Dict[Tuple[str, str], set] = {}
    for ev in pool.items:
        if isinstance(ev.payload, AttributePayload):
            members = groups.setdefault((ev.payload.attr_name, ev.payload.attr_value), set())
            if ev.payload.item_id >= 0:
                members.add(ev.payload.item_id)
    return {key: sorted(items) for key, items in groups.items()}


def embed_evidence(pool: EvidencePool, params: ModelParams) -> EvidencePool:
    """Derive a unit-norm embedding for every evidence item from the item embeddings."""
    emb = params.item_embeddings
    groups = _attribute_groups(pool)
    for ev in pool.items:
        if any(not 0 <= i < params.num_items for i in ev.items):
            raise RetrievalError("item-out-of-range", f"evidence {ev.id} references an item outside the catalog")
    group_means = {key: emb[items].mean(axis=0) for key, items in groups.items() if items}
    embedded = []
    for ev in pool.items:
        p = ev.payload
        if isinstance(p, HistoryPayload):
            vec = emb[p.item_id]
        elif isinstance(p, AttributePayload):
            key = (p.attr_name, p.attr_value)
            if key not in group_means:
                raise RetrievalError("dangling-attribute", f"evidence {ev.id}: no item carries {p.attr_name}={p.attr_value}")
            vec = group_means[key]
        else:
            vec = 0.5 * (emb[p.head] + emb[p.tail])
        norm = np.linalg.norm(vec)
        if norm < _EPS:
            raise RetrievalError("degenerate-embedding", f"evidence {ev.id} has a zero-norm embedding")
        embedded.append(replace(ev, embedding=vec / norm))
    return pool.with_items(embedded)


def _cosine(e_d: np.ndarray, z: PreferenceVector) -> float:
    z_norm = np.linalg.norm(z)
    if z_norm < _EPS:
        raise RetrievalError("zero-preference-vector", "cannot score against a zero preference vector")
    value = float(np.dot(e_d, z) / (np.linalg.norm(e_d) * z_norm))
    return min(1.0, max(-1.0, value))


def semantic_score(e_d: np.ndarray, z: PreferenceVector) -> float:
    """Cosine similarity between an evidence embedding and a preference vector."""
    return _cosine(e_d, z)


def invariance_score(e_d: np.ndarray, env_encodings: Sequence[PreferenceVector]) -> float:
    """Negative population variance of the similarity across environment encodings."""
    if len(env_encodings) < 2:
        raise RetrievalError("insufficient-environments", "need encodings from at least 2 environments")
    sims = np.array([_cosine(e_d, z) for z in env_encodings])
    return -float(np.var(sims))


def multi_env_users(dataset: InteractionDataset, envs: Iterable[int]) -> List[int]:
    """Users with non-empty histories in at least two of ``envs``."""
    envs = set(envs)
    eligible = []
    for user, history in sorted(dataset.by_user.items()):
        if len({x.env_id for x in history} & envs) >= 2:
            eligible.append(user)
    return eligible


def precompute_stability(
    pool: EvidencePool,
    dataset: InteractionDataset,
    params: ModelParams,
    hp: HyperParams,
    envs: Optional[Sequence[int]] = None,
) -> EvidencePool:
    """Store, per evidence item, the mean over sampled users of Var_e[cos(e_d, phi_e(s_u))].

    Only ``envs`` (the training environments by default: all present) are used, so no test
    environment label is needed at inference time.
    """
    envs = sorted(envs if envs is not None else dataset.env_ids)
    if len(envs) < 2:
        raise RetrievalError("insufficient-environments", "stability needs at least 2 environments")
    eligible = multi_env_users(dataset, envs)
    if not eligible:
        raise RetrievalError("no-multi-env-users", "no user has history in 2 or more environments")
    rng = np.random.default_rng([hp.seed, 2])
    sample_size = min(hp.stability_users, len(eligible))
    sampled = sorted(int(u) for u in rng.choice(eligible, size=sample_size, replace=False))
    logger.info(f"Estimating evidence stability from {sample_size} of {len(eligible)} multi-environment users")

    evidence = pool.embedding_matrix
    total = np.zeros(len(pool))
    for user in sampled:
        history = dataset.by_user[user]
        encodings = [z for z in (encode_env(params, history, e) for e in envs) if z is not None]
        z_mat = np.stack(encodings)
        norms = np.linalg.norm(z_mat, axis=1, keepdims=True)
        if np.any(norms < _EPS):
            raise RetrievalError("zero-preference-vector", f"user {user} has a zero environment encoding")
        sims = evidence @ (z_mat / norms).T
        total += np.var(np.clip(sims, -1.0, 1.0), axis=1)
    stability = total / sample_size
    return pool.with_items([replace(ev, stability_var=float(v)) for ev, v in zip(pool.items, stability)])


def combined_score(s_sem, stability_var, alpha: float):
    """alpha * s_sem + (1 - alpha) * (-stability_var); works on scalars and arrays."""
    return alpha * s_sem + (1.0 - alpha) * (-stability_var)


def candidate_evidence(pool: EvidencePool, user_id: int, context: Sequence[int], item: Optional[int] = None) -> List[int]:
    """The user's history evidence about context items plus attribute/kg evidence of context and scored item."""
    in_context = set(context)
    found = {
        ev_id for ev_id in pool.user_index.get(user_id, ())
        if pool.items[ev_id].payload.item_id in in_context
    }
    mentioned = list(in_context) + ([item] if item is not None else [])
    for i in mentioned:
        found.update(pool.item_index.get(i, ()))
    return sorted(found)


def retrieve_topk(z: PreferenceVector, pool: EvidencePool, candidates: Sequence[int], hp: HyperParams) -> RetrievalResult:
    """Top-K candidates by (combined score desc, pool id asc); K = 0 disables retrieval."""
    if hp.k == 0:
        return RetrievalResult()
    if len(candidates) == 0:
        raise RetrievalError("no-candidates", "candidate evidence list is empty")
    z_norm = np.linalg.norm(z)
    if z_norm < _EPS:
        raise RetrievalError("zero-preference-vector", "cannot retrieve for a zero preference vector")
    ids = np.asarray(candidates, dtype=np.int64)
    vectors = pool.embedding_matrix[ids]
    sem = np.clip(vectors @ z / (np.linalg.norm(vectors, axis=1) * z_norm), -1.0, 1.0)
    scores = combined_score(sem, pool.stability_vector[ids], hp.alpha)
    order = np.lexsort((ids, -scores))[:hp.k]
    return RetrievalResult(
        evidence_ids=tuple(int(i) for i in ids[order]),
        scores=tuple(float(s) for s in scores[order]),
    )
