"""Central finite-difference audit of the hand-written gradients."""
import logging
from typing import Callable, Dict, List, Tuple

import numpy as np

from .encoder import irm_penalty, rec_loss_and_grad, w_derivative
from .models import (
    EvidenceItem,
    EvidencePool,
    EvidenceSource,
    HistoryPayload,
    ModelParams,
    RetrievalResult,
    TrainingExample,
)
from .ranker import RANKER_PARAMS, counterfactual_loss, coverage_surrogate_and_grad, rank_score_and_grad
from .retriever import embed_evidence

logger = logging.getLogger(__name__)

STEP = 1e-4
TOLERANCE = 1e-4


def numeric_gradient(fn: Callable[[], float], array: np.ndarray, step: float = STEP) -> np.ndarray:
    """d fn / d array by central differences; ``array`` is perturbed in place and restored."""
    grad = np.zeros_like(array)
    flat, out = array.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = fn()
        flat[i] = original - step
        minus = fn()
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """||a - n|| / max(||a||, ||n||, floor)."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)


def _copy(params: ModelParams) -> ModelParams:
    return ModelParams.from_dict({k: v.copy() for k, v in params.as_dict().items()}, params.irm_dummy_w)


def random_instance(rng: np.random.Generator, num_items: int = 12, dim: int = 4, max_len: int = 5) -> Tuple[ModelParams, EvidencePool]:
    """Small random model with non-trivial recency weights and a history-only pool for user 0."""
    params = ModelParams.initialize(num_items, dim, max_len, int(rng.integers(1 << 30)), scale=0.5)
    params = params.updated(recency_weights=rng.normal(size=max_len), mlp_b2=np.array(rng.normal()))
    items = [
        EvidenceItem(id=i, source=EvidenceSource.HISTORY, payload=HistoryPayload(i, 4.0, i), user_id=0)
        for i in range(num_items)
    ]
    return params, embed_evidence(EvidencePool.from_items(items), params)


def _random_batch(rng: np.random.Generator, params: ModelParams, size: int, env: int = 0) -> List[TrainingExample]:
    batch = []
    for _ in range(size):
        length = int(rng.integers(1, params.max_len + 1))
        context = tuple(int(i) for i in rng.integers(0, params.num_items, length))
        target = int(rng.integers(params.num_items))
        others = [i for i in range(params.num_items) if i != target]
        negatives = tuple(int(i) for i in rng.choice(others, size=3, replace=False))
        batch.append(TrainingExample(0, context, target, env, negatives))
    return batch


def _compare(analytic: Dict[str, np.ndarray], params: ModelParams, names, loss: Callable[[ModelParams], float]) -> Dict[str, float]:
    errors = {}
    for name in names:
        errors[name] = relative_error(analytic[name], numeric_gradient(lambda: loss(params), getattr(params, name)))
    return errors


def check_rec_loss(params: ModelParams, rng: np.random.Generator) -> Dict[str, float]:
    params = _copy(params)
    batch = _random_batch(rng, params, 4)
    w = float(rng.uniform(0.5, 1.5))
    analytic = rec_loss_and_grad(params, batch, w).grads
    errors = _compare(analytic, params, ("item_embeddings", "recency_weights"), lambda p: rec_loss_and_grad(p, batch, w).value)
    numeric_w = (rec_loss_and_grad(params, batch, w + STEP).value - rec_loss_and_grad(params, batch, w - STEP).value) / (2 * STEP)
    errors["irm_dummy_w"] = relative_error(analytic["irm_dummy_w"], np.array(numeric_w))
    at_one = rec_loss_and_grad(params, batch, 1.0).grads["irm_dummy_w"]
    errors["w_derivative"] = relative_error(at_one, np.array(w_derivative(params, batch)))
    return errors


def check_irm_penalty(params: ModelParams, rng: np.random.Generator) -> Dict[str, float]:
    params = _copy(params)
    env_batches = {0: _random_batch(rng, params, 3, 0), 1: _random_batch(rng, params, 3, 1)}
    analytic = irm_penalty(params, env_batches).grads
    return _compare(analytic, params, ("item_embeddings", "recency_weights"), lambda p: irm_penalty(p, env_batches).value)


def _ranker_case(params: ModelParams, pool: EvidencePool, rng: np.random.Generator):
    z = rng.normal(size=params.dim)
    ids = rng.choice(len(pool), size=int(rng.integers(2, 6)), replace=False)
    retrieved = RetrievalResult(tuple(int(i) for i in ids), tuple(0.0 for _ in ids))
    return z, int(rng.integers(params.num_items)), retrieved


def _check_ranker_loss(params: ModelParams, z: np.ndarray, loss) -> Dict[str, float]:
    analytic = loss(params, z).grads
    errors = _compare(analytic, params, RANKER_PARAMS + ("item_embeddings",), lambda p: loss(p, z).value)
    errors["z_u"] = relative_error(analytic["z_u"], numeric_gradient(lambda: loss(params, z).value, z))
    return errors


def check_rank_score(params: ModelParams, pool: EvidencePool, rng: np.random.Generator) -> Dict[str, float]:
    params = _copy(params)
    z, item, retrieved = _ranker_case(params, pool, rng)
    return _check_ranker_loss(params, z, lambda p, zz: rank_score_and_grad(p, zz, item, retrieved, pool)[1])


def check_coverage_surrogate(params: ModelParams, pool: EvidencePool, rng: np.random.Generator) -> Dict[str, float]:
    params = _copy(params)
    z, item, retrieved = _ranker_case(params, pool, rng)
    tau = 1.0 / len(retrieved)
    return _check_ranker_loss(
        params, z, lambda p, zz: coverage_surrogate_and_grad(p, zz, item, retrieved, pool, tau, 0.1)
    )


def check_counterfactual(params: ModelParams, pool: EvidencePool, rng: np.random.Generator) -> Dict[str, float]:
    """A large margin keeps the hinge active so the loss is smooth around the instance."""
    params = _copy(params)
    z, item, retrieved = _ranker_case(params, pool, rng)
    return _check_ranker_loss(params, z, lambda p, zz: counterfactual_loss(p, zz, item, retrieved, pool, 10.0))


def run_gradcheck(instances: int, seed: int = 0) -> Dict[str, float]:
    """Maximum relative error per ``<loss>.<parameter>`` over random small instances."""
    rng = np.random.default_rng([seed, 5])
    worst: Dict[str, float] = {}
    for n in range(instances):
        params, pool = random_instance(rng)
        results = {
            "rec_loss": check_rec_loss(params, rng),
            "irm_penalty": check_irm_penalty(params, rng),
            "rank_score": check_rank_score(params, pool, rng),
            "coverage_surrogate": check_coverage_surrogate(params, pool, rng),
            "counterfactual": check_counterfactual(params, pool, rng),
        }
        for loss, errors in results.items():
            for name, err in errors.items():
                key = f"{loss}.{name}"
                worst[key] = max(worst.get(key, 0.0), err)
        logger.debug(f"gradcheck instance {n}: worst so far {max(worst.values()):.3e}")
    return worst
