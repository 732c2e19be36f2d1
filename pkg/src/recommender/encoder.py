"""Recency-pooled sequence encoder, sampled-softmax loss and the invariance penalty.

The encoder is a softmax over learned recency slots applied to the item embeddings
of a context, most recent item last:

    z = sum_j softmax(recency_weights[L - m:])_j * item_embeddings[context_j]

Gradients are written out by hand over this small graph and checked against
central finite differences in the test-suite.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .exceptions import EncoderError, NumericalError
from .models import Grads, Interaction, LossGrad, ModelParams, TrainingExample

logger = logging.getLogger(__name__)

PreferenceVector = np.ndarray


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=axis, keepdims=True)


def _check_context(params: ModelParams, context: Sequence[int]) -> np.ndarray:
    if len(context) == 0:
        raise EncoderError("empty-sequence", "cannot encode an empty context")
    if len(context) > params.max_len:
        raise EncoderError("sequence-too-long", f"context of {len(context)} exceeds L={params.max_len}")
    arr = np.asarray(context, dtype=np.int64)
    if arr.min() < 0 or arr.max() >= params.num_items:
        raise EncoderError("item-out-of-range", f"context references an item outside [0, {params.num_items})")
    return arr


def recency_softmax(params: ModelParams, length: int) -> np.ndarray:
    """Pooling weights of the last ``length`` slots."""
    return softmax(params.recency_weights[params.max_len - length:])


def encode(params: ModelParams, context: Sequence[int]) -> PreferenceVector:
    """Encode an item-id sequence (most recent last) into a preference vector."""
    items = _check_context(params, context)
    return recency_softmax(params, len(items)) @ params.item_embeddings[items]


def env_subsequence(user_interactions: Sequence[Interaction], env: int, max_len: int) -> List[int]:
    """Item ids of the interactions in ``env``, truncated to the most recent ``max_len``."""
    items = [x.item_id for x in user_interactions if x.env_id == env]
    return items[-max_len:]


def encode_env(params: ModelParams, user_interactions: Sequence[Interaction], env: int) -> Optional[PreferenceVector]:
    """Encode the environment-filtered history of one user; None when it is empty."""
    items = env_subsequence(user_interactions, env, params.max_len)
    if not items:
        return None
    return encode(params, items)


@dataclass
class _BatchCache:
    items: np.ndarray       # (B, L) right-aligned context item ids
    pool: np.ndarray        # (B, L) pooling weights, 0 on padding
    z: np.ndarray           # (B, d)
    candidates: np.ndarray  # (B, C) target first, then negatives
    cand_mask: np.ndarray   # (B, C)
    scores: np.ndarray      # (B, C) z . e_c, 0 on padding


def _encode_batch(params: ModelParams, contexts: Sequence[Sequence[int]]):
    size, length = len(contexts), params.max_len
    items = np.zeros((size, length), dtype=np.int64)
    mask = np.zeros((size, length), dtype=bool)
    for row, context in enumerate(contexts):
        arr = _check_context(params, context)
        items[row, length - len(arr):] = arr
        mask[row, length - len(arr):] = True
    logits = np.where(mask, params.recency_weights[None, :], -np.inf)
    pool = softmax(logits, axis=1)
    z = np.einsum("bl,bld->bd", pool, params.item_embeddings[items])
    return items, pool, z


def _forward(params: ModelParams, batch: Sequence[TrainingExample]) -> _BatchCache:
    if not batch:
        raise EncoderError("empty-batch", "batch must contain at least one example")
    width = 1 + max(len(ex.negatives) for ex in batch)
    candidates = np.zeros((len(batch), width), dtype=np.int64)
    cand_mask = np.zeros((len(batch), width), dtype=bool)
    for row, ex in enumerate(batch):
        if not ex.negatives:
            raise EncoderError("no-negatives", f"example for user {ex.user_id} has no negatives")
        if ex.target in ex.negatives:
            raise EncoderError("target-in-negatives", f"example for user {ex.user_id} samples its target as a negative")
        cand = (ex.target,) + tuple(ex.negatives)
        if max(cand) >= params.num_items or min(cand) < 0:
            raise EncoderError("item-out-of-range", "candidate item outside the catalog")
        candidates[row, :len(cand)] = cand
        cand_mask[row, :len(cand)] = True
    items, pool, z = _encode_batch(params, [ex.context for ex in batch])
    scores = np.einsum("bd,bcd->bc", z, params.item_embeddings[candidates])
    scores = np.where(cand_mask, scores, 0.0)
    return _BatchCache(items, pool, z, candidates, cand_mask, scores)


def _masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return softmax(np.where(mask, logits, -np.inf), axis=1)


def _backward_scores(params: ModelParams, cache: _BatchCache, d_scores: np.ndarray, grads: Grads) -> None:
    """Accumulate gradients of sum(d_scores * scores) into ``grads``."""
    emb = params.item_embeddings
    cand_emb = emb[cache.candidates]
    d_z = np.einsum("bc,bcd->bd", d_scores, cand_emb)
    np.add.at(grads["item_embeddings"], cache.candidates, d_scores[:, :, None] * cache.z[:, None, :])
    backward_pool(params, cache.items, cache.pool, d_z, grads)


def backward_pool(params: ModelParams, items: np.ndarray, pool: np.ndarray, d_z: np.ndarray, grads: Grads) -> None:
    """Push an upstream gradient on the pooled vectors into embeddings and recency weights."""
    np.add.at(grads["item_embeddings"], items, pool[:, :, None] * d_z[:, None, :])
    d_pool = np.einsum("bld,bd->bl", params.item_embeddings[items], d_z)
    d_slots = pool * (d_pool - np.sum(pool * d_pool, axis=1, keepdims=True))
    grads["recency_weights"] += d_slots.sum(axis=0)


def encode_with_grad(params: ModelParams, context: Sequence[int]):
    """Encode one context and return a closure mapping dL/dz to encoder gradients."""
    items, pool, z = _encode_batch(params, [context])

    def backward(d_z: np.ndarray, grads: Grads) -> None:
        backward_pool(params, items, pool, d_z[None, :], grads)

    return z[0], backward


def _encoder_grads(params: ModelParams) -> Grads:
    return {
        "item_embeddings": np.zeros_like(params.item_embeddings),
        "recency_weights": np.zeros_like(params.recency_weights),
    }


def _check_finite(value: float, grads: Grads) -> None:
    if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise NumericalError("numerical-overflow", "non-finite loss or gradient")


def rec_loss_and_grad(params: ModelParams, batch: Sequence[TrainingExample], w: float = 1.0) -> LossGrad:
    """Mean sampled-softmax cross-entropy with logits ``w * (z . e_c)``, target as class 0.

    Gradients cover item_embeddings, recency_weights and ``irm_dummy_w``.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        cache = _forward(params, batch)
        size = len(batch)
        logits = w * cache.scores
        masked = np.where(cache.cand_mask, logits, -np.inf)
        top = np.max(masked, axis=1, keepdims=True)
        log_norm = top[:, 0] + np.log(np.sum(np.exp(masked - top), axis=1))
        value = float(np.mean(log_norm - logits[:, 0]))
        prob = _masked_softmax(logits, cache.cand_mask)
        residual = prob.copy()
        residual[:, 0] -= 1.0
        d_logits = residual / size
        grads = _encoder_grads(params)
        grads["irm_dummy_w"] = np.array(np.sum(d_logits * cache.scores))
        _backward_scores(params, cache, w * d_logits, grads)
    _check_finite(value, grads)
    return LossGrad(value=value, grads=grads)


def w_derivative(params: ModelParams, batch: Sequence[TrainingExample]) -> float:
    """d rec_loss / d w at w = 1: mean over examples of sum_c (p_c - 1[c=target]) s_c."""
    cache = _forward(params, batch)
    prob = _masked_softmax(cache.scores, cache.cand_mask)
    residual = prob.copy()
    residual[:, 0] -= 1.0
    return float(np.mean(np.sum(residual * cache.scores, axis=1)))


def irm_penalty(params: ModelParams, env_batches: Dict[int, Sequence[TrainingExample]]) -> LossGrad:
    """Sum over environments of the squared w-derivative of the environment loss at w = 1.

    The derivative is closed-form in the scores, so its parameter gradient is taken
    directly: d/ds_k [sum_c (p_c - y_c) s_c] = (p_k - y_k) + p_k (s_k - sum_c p_c s_c).
    """
    if not env_batches:
        raise EncoderError("no-environments", "invariance penalty needs at least one environment")
    grads = _encoder_grads(params)
    value = 0.0
    with np.errstate(over="ignore", invalid="ignore"):
        for env in sorted(env_batches):
            batch = env_batches[env]
            cache = _forward(params, batch)
            prob = _masked_softmax(cache.scores, cache.cand_mask)
            residual = prob.copy()
            residual[:, 0] -= 1.0
            derivative = float(np.mean(np.sum(residual * cache.scores, axis=1)))
            value += derivative ** 2
            mean_score = np.sum(prob * cache.scores, axis=1, keepdims=True)
            d_deriv = residual + prob * (cache.scores - mean_score)
            _backward_scores(params, cache, (2.0 * derivative / len(batch)) * d_deriv, grads)
            logger.debug(f"env {env}: dL/dw = {derivative:.6f}")
    _check_finite(value, grads)
    return LossGrad(value=value, grads=grads)
