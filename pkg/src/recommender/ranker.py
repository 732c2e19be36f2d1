"""Evidence-conditioned ranker and the consistency losses built on its attention.

score = mlp([z_u ; e_item ; sum_j a_j v_j]) with a = softmax(q . k_j / sqrt(d)),
q = [z_u ; e_item] @ query_proj, k_j = e_j @ key_proj, v_j = e_j @ value_proj and a
tanh hidden layer. Evidence embeddings come from the pool snapshot and are treated
as constants; gradients reach the encoder through z_u (returned under ``"z_u"``).
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .encoder import PreferenceVector, softmax
from .exceptions import RankerError
from .models import Grads, EvidencePool, LossGrad, ModelParams, RankOutput, RetrievalResult

logger = logging.getLogger(__name__)

RANKER_PARAMS = ("query_proj", "key_proj", "value_proj", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2")


@dataclass
class RankCache:
    item: int
    x: np.ndarray
    query: np.ndarray
    evidence: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    attention: np.ndarray
    concat: np.ndarray
    hidden: np.ndarray


def evidence_matrix(retrieved: RetrievalResult, pool: EvidencePool, dim: int) -> np.ndarray:
    if len(retrieved) == 0:
        return np.zeros((0, dim))
    evidence = pool.embedding_matrix[list(retrieved.evidence_ids)]
    if evidence.shape[1] != dim:
        raise RankerError("shape-mismatch", f"evidence dimension {evidence.shape[1]} != model dimension {dim}")
    return evidence


def rank_forward(params: ModelParams, z_u: PreferenceVector, item: int, evidence: np.ndarray) -> Tuple[RankOutput, RankCache]:
    dim = params.dim
    if z_u.shape != (dim,):
        raise RankerError("shape-mismatch", f"preference vector shape {z_u.shape} != ({dim},)")
    if evidence.ndim != 2 or evidence.shape[1] != dim:
        raise RankerError("shape-mismatch", f"evidence matrix shape {evidence.shape} incompatible with d={dim}")
    if not 0 <= item < params.num_items:
        raise RankerError("item-out-of-range", f"item {item} outside the catalog")
    x = np.concatenate([z_u, params.item_embeddings[item]])
    query = x @ params.query_proj
    if len(evidence):
        keys = evidence @ params.key_proj
        values = evidence @ params.value_proj
        attention = softmax(keys @ query / np.sqrt(dim))
        aggregated = attention @ values
    else:
        keys = values = np.zeros((0, dim))
        attention = np.zeros(0)
        aggregated = np.zeros(dim)
    concat = np.concatenate([x, aggregated])
    hidden = np.tanh(concat @ params.mlp_w1 + params.mlp_b1)
    score = float(hidden @ params.mlp_w2 + params.mlp_b2)
    out = RankOutput(score=score, attention=attention, aggregated_evidence=aggregated)
    return out, RankCache(item, x, query, evidence, keys, values, attention, concat, hidden)


def rank_backward(
    params: ModelParams,
    cache: RankCache,
    d_score: float,
    grads: Grads,
    d_attention: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Accumulate parameter gradients into ``grads``; returns dL/dz_u."""
    dim = params.dim
    grads["mlp_w2"] += d_score * cache.hidden
    grads["mlp_b2"] += d_score
    d_pre = d_score * params.mlp_w2 * (1.0 - cache.hidden ** 2)
    grads["mlp_w1"] += np.outer(cache.concat, d_pre)
    grads["mlp_b1"] += d_pre
    d_concat = params.mlp_w1 @ d_pre
    d_x = d_concat[:2 * dim].copy()
    d_agg = d_concat[2 * dim:]
    if len(cache.attention):
        d_att = cache.values @ d_agg
        if d_attention is not None:
            d_att = d_att + d_attention
        d_logits = cache.attention * (d_att - cache.attention @ d_att)
        scale = 1.0 / np.sqrt(dim)
        grads["value_proj"] += cache.evidence.T @ np.outer(cache.attention, d_agg)
        grads["key_proj"] += cache.evidence.T @ np.outer(d_logits, cache.query) * scale
        d_query = cache.keys.T @ d_logits * scale
        grads["query_proj"] += np.outer(cache.x, d_query)
        d_x += params.query_proj @ d_query
    grads["item_embeddings"][cache.item] += d_x[dim:]
    return d_x[:dim]


def ranker_grads(params: ModelParams) -> Grads:
    grads = {name: np.zeros_like(getattr(params, name)) for name in RANKER_PARAMS}
    grads["item_embeddings"] = np.zeros_like(params.item_embeddings)
    grads["z_u"] = np.zeros(params.dim)
    return grads


def rank_score(params: ModelParams, z_u: PreferenceVector, item: int, retrieved: RetrievalResult, pool: EvidencePool) -> RankOutput:
    """Score one (user, item) pair conditioned on the retrieved evidence."""
    out, _ = rank_forward(params, z_u, item, evidence_matrix(retrieved, pool, params.dim))
    return out


def rank_score_and_grad(
    params: ModelParams, z_u: PreferenceVector, item: int, retrieved: RetrievalResult, pool: EvidencePool
) -> Tuple[RankOutput, LossGrad]:
    """The ranker score with its gradient w.r.t. ranker weights, item embeddings and z_u."""
    out, cache = rank_forward(params, z_u, item, evidence_matrix(retrieved, pool, params.dim))
    grads = ranker_grads(params)
    grads["z_u"] += rank_backward(params, cache, 1.0, grads)
    return out, LossGrad(value=out.score, grads=grads)


def select_key_evidence(out: RankOutput) -> int:
    """1-based rank of the highest-attention evidence; ties go to the smallest rank."""
    if len(out.attention) == 0:
        raise RankerError("no-evidence", "no attention weights to select from")
    return int(np.argmax(out.attention)) + 1


def select_key_evidence_loo(
    params: ModelParams, z_u: PreferenceVector, item: int, retrieved: RetrievalResult, pool: EvidencePool
) -> int:
    """1-based rank whose removal lowers the score the most; ties go to the smallest rank."""
    if len(retrieved) == 0:
        raise RankerError("no-evidence", "no evidence to remove")
    full = rank_score(params, z_u, item, retrieved, pool).score
    drops = [full - rank_score(params, z_u, item, retrieved.without_rank(r), pool).score
             for r in range(1, len(retrieved) + 1)]
    return int(np.argmax(drops)) + 1


def counterfactual_hinge(gamma: float, drop: float) -> float:
    return max(0.0, gamma - drop)


def counterfactual_loss(
    params: ModelParams,
    z_u: PreferenceVector,
    item: int,
    retrieved: RetrievalResult,
    pool: EvidencePool,
    gamma: float,
) -> LossGrad:
    """max(0, gamma - (r(full) - r(without d*))), d* chosen by attention and held constant."""
    if len(retrieved) == 0:
        raise RankerError("no-evidence", "counterfactual loss needs retrieved evidence")
    dim = params.dim
    full_out, full_cache = rank_forward(params, z_u, item, evidence_matrix(retrieved, pool, dim))
    key_rank = select_key_evidence(full_out)
    reduced = retrieved.without_rank(key_rank)
    reduced_out, reduced_cache = rank_forward(params, z_u, item, evidence_matrix(reduced, pool, dim))
    value = counterfactual_hinge(gamma, full_out.score - reduced_out.score)
    grads = ranker_grads(params)
    if value > 0.0:
        grads["z_u"] += rank_backward(params, full_cache, -1.0, grads)
        grads["z_u"] += rank_backward(params, reduced_cache, 1.0, grads)
    return LossGrad(value=value, grads=grads)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def coverage_surrogate(out: RankOutput, tau_cite: float, temp_cite: float) -> LossGrad:
    """1 - mean_j sigmoid((a_j - tau) / temp); gradient is w.r.t. the attention vector."""
    attention = out.attention
    if len(attention) == 0:
        raise RankerError("no-evidence", "coverage surrogate needs attention weights")
    soft_cited = _sigmoid((attention - tau_cite) / temp_cite)
    value = float(1.0 - soft_cited.mean())
    d_attention = -soft_cited * (1.0 - soft_cited) / (temp_cite * len(attention))
    return LossGrad(value=value, grads={"attention": d_attention})


def coverage_surrogate_and_grad(
    params: ModelParams,
    z_u: PreferenceVector,
    item: int,
    retrieved: RetrievalResult,
    pool: EvidencePool,
    tau_cite: float,
    temp_cite: float,
) -> LossGrad:
    """coverage_surrogate with its gradient pushed back into the ranker weights and z_u."""
    out, cache = rank_forward(params, z_u, item, evidence_matrix(retrieved, pool, params.dim))
    surrogate = coverage_surrogate(out, tau_cite, temp_cite)
    grads = ranker_grads(params)
    grads["z_u"] += rank_backward(params, cache, 0.0, grads, d_attention=surrogate.grads["attention"])
    return LossGrad(value=surrogate.value, grads=grads)


def consistency_loss(l_cov: float, l_cf: float, beta: float) -> float:
    """l_cov + beta * l_cf."""
    if l_cov < 0 or l_cf < 0:
        raise RankerError("negative-loss", "consistency terms must be non-negative")
    return l_cov + beta * l_cf
