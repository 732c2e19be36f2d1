"""Two-stage optimisation: invariant encoder pre-training, then joint retrieval-ranking training."""
import logging
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import HyperParams
from .encoder import encode_with_grad, irm_penalty, rec_loss_and_grad, softmax
from .exceptions import DatasetError, NumericalError
from .models import (
    ENCODER_PARAMS,
    PARAM_NAMES,
    AdamState,
    DataSplit,
    EvidencePool,
    Grads,
    InteractionDataset,
    ModelParams,
    RetrievalResult,
    TrainingExample,
    TrainLog,
    TrainLogRecord,
)
from .ranker import (
    consistency_loss,
    counterfactual_loss,
    coverage_surrogate,
    evidence_matrix,
    rank_backward,
    rank_forward,
)
from .retriever import candidate_evidence, embed_evidence, precompute_stability, retrieve_topk

logger = logging.getLogger(__name__)

EpochCallback = Callable[[int, int, ModelParams, AdamState], None]


def total_loss(l_rec: float, l_inv: float, l_cons: float, hp: HyperParams) -> float:
    """l_rec + lambda1 * l_inv + lambda2 * l_cons."""
    return l_rec + hp.lambda1 * l_inv + hp.lambda2 * l_cons


def adam_step(
    params: ModelParams, grads: Grads, state: AdamState, hp: HyperParams, names: Sequence[str] = PARAM_NAMES
) -> Tuple[ModelParams, AdamState]:
    """One Adam update of the parameters in ``names``; the others and their moments are untouched."""
    step = state.step + 1
    m, v = dict(state.m), dict(state.v)
    updated: Dict[str, np.ndarray] = {}
    for name in names:
        g = grads[name]
        m[name] = hp.adam_beta1 * m[name] + (1.0 - hp.adam_beta1) * g
        v[name] = hp.adam_beta2 * v[name] + (1.0 - hp.adam_beta2) * g * g
        m_hat = m[name] / (1.0 - hp.adam_beta1 ** step)
        v_hat = v[name] / (1.0 - hp.adam_beta2 ** step)
        updated[name] = getattr(params, name) - hp.lr * m_hat / (np.sqrt(v_hat) + hp.adam_eps)
        if not np.all(np.isfinite(updated[name])):
            raise NumericalError("non-finite-parameters", f"update produced non-finite values in {name}")
    return params.updated(**updated), AdamState(m=m, v=v, step=step)


def sample_negatives(
    batch: Sequence[TrainingExample], num_items: int, n_neg: int, rng: np.random.Generator
) -> List[TrainingExample]:
    """Attach n_neg negatives drawn uniformly from the catalog minus the target."""
    draws = rng.integers(0, num_items - 1, size=(len(batch), n_neg))
    out = []
    for ex, row in zip(batch, draws):
        negatives = tuple(int(i + 1) if i >= ex.target else int(i) for i in row)
        out.append(TrainingExample(ex.user_id, ex.context, ex.target, ex.env_id, negatives))
    return out


def _accumulate(total: Grads, part: Grads, scale: float) -> None:
    for name, g in part.items():
        if name in total:
            total[name] += scale * g


def _epoch_order(examples: Sequence[TrainingExample], cap: int, rng: np.random.Generator) -> List[TrainingExample]:
    order = rng.permutation(len(examples))
    if cap:
        order = order[:cap]
    return [examples[i] for i in order]


def _summarise(stage: int, epoch: int, steps: List[TrainLogRecord], hp: HyperParams, started: float) -> TrainLogRecord:
    l_rec = float(np.mean([s.l_rec for s in steps]))
    l_inv = float(np.mean([s.l_inv for s in steps]))
    l_cons = float(np.mean([s.l_cons for s in steps]))
    return TrainLogRecord(stage, epoch, l_rec, l_inv, l_cons, total_loss(l_rec, l_inv, l_cons, hp),
                          time.perf_counter() - started)


def train_stage1(
    split: DataSplit,
    params: ModelParams,
    hp: HyperParams,
    adam: Optional[AdamState] = None,
    start_epoch: int = 0,
    on_epoch_end: Optional[EpochCallback] = None,
) -> Tuple[ModelParams, TrainLog, AdamState]:
    """Round-robin over training environments minimising sum_e L_rec^e + lambda1 * L_inv.

    Only item embeddings and recency weights are updated.
    """
    envs = [e for e in split.train_envs if split.train_examples.get(e)]
    if len(envs) < 2:
        raise DatasetError("insufficient-environments", "stage 1 needs training examples in at least 2 environments")
    adam = adam or AdamState.zeros(params)
    log = TrainLog()
    cap = hp.max_examples_per_epoch // len(envs) if hp.max_examples_per_epoch else 0
    for epoch in range(start_epoch, hp.t1):
        started = time.perf_counter()
        order_rng = np.random.default_rng([hp.seed, 1, epoch])
        per_env = {e: _epoch_order(split.train_examples[e], cap, order_rng) for e in envs}
        batches = {e: [xs[i:i + hp.batch_size] for i in range(0, len(xs), hp.batch_size)] for e, xs in per_env.items()}
        rounds = max(len(b) for b in batches.values())
        steps: List[TrainLogRecord] = []
        for r in range(rounds):
            rng = np.random.default_rng([hp.seed, 1, epoch, r])
            env_batches = {
                e: sample_negatives(batches[e][r % len(batches[e])], params.num_items, hp.n_neg, rng) for e in envs
            }
            grads = params.zero_grads()
            l_rec = 0.0
            for e in envs:
                rec = rec_loss_and_grad(params, env_batches[e], 1.0)
                l_rec += rec.value
                _accumulate(grads, rec.grads, 1.0)
            inv = irm_penalty(params, env_batches)
            _accumulate(grads, inv.grads, hp.lambda1)
            total = total_loss(l_rec, inv.value, 0.0, hp)
            params, adam = adam_step(params, grads, adam, hp, ENCODER_PARAMS)
            steps.append(TrainLogRecord(1, epoch, l_rec, inv.value, 0.0, total, 0.0))
            logger.debug(f"stage 1 epoch {epoch} round {r}: rec={l_rec:.6f} inv={inv.value:.6f}")
        record = _summarise(1, epoch, steps, hp, started)
        log.records.append(record)
        log.steps.extend(steps)
        logger.info(f"Stage 1 epoch {epoch + 1}/{hp.t1}: L_rec={record.l_rec:.5f} L_inv={record.l_inv:.6f} total={record.total:.5f}")
        if on_epoch_end:
            on_epoch_end(1, epoch, params, adam)
    return params, log, adam


@dataclass
class _ExampleLoss:
    l_rec: float
    l_cons: float


def _joint_example(
    params: ModelParams,
    pool: EvidencePool,
    ex: TrainingExample,
    hp: HyperParams,
    batch_size: int,
    grads: Grads,
) -> _ExampleLoss:
    """Encode, retrieve, rank target and negatives; accumulate the scaled gradients of one example."""
    z, z_backward = encode_with_grad(params, ex.context)
    candidates = (ex.target,) + ex.negatives
    outs, caches, retrieved = [], [], []
    for item in candidates:
        found = candidate_evidence(pool, ex.user_id, ex.context, item)
        ret = retrieve_topk(z, pool, found, hp) if found else RetrievalResult()
        out, cache = rank_forward(params, z, item, evidence_matrix(ret, pool, params.dim))
        outs.append(out)
        caches.append(cache)
        retrieved.append(ret)
    scores = np.array([o.score for o in outs])
    top = scores.max()
    l_rec = float(top + np.log(np.sum(np.exp(scores - top))) - scores[0])
    residual = softmax(scores)
    residual[0] -= 1.0
    d_z = np.zeros(params.dim)
    for cache, d_score in zip(caches, residual / batch_size):
        d_z += rank_backward(params, cache, float(d_score), grads)

    # consistency terms act on the positive pair only
    l_cons = 0.0
    if len(retrieved[0]):
        cov = coverage_surrogate(outs[0], hp.tau_cite, hp.temp_cite)
        cf = counterfactual_loss(params, z, ex.target, retrieved[0], pool, hp.gamma)
        l_cons = consistency_loss(cov.value, cf.value, hp.beta)
        if hp.lambda2 > 0.0:
            d_z += rank_backward(params, caches[0], 0.0, grads,
                                 d_attention=cov.grads["attention"] * hp.lambda2 / batch_size)
            scale = hp.lambda2 * hp.beta / batch_size
            _accumulate(grads, cf.grads, scale)
            d_z += scale * cf.grads["z_u"]
    z_backward(d_z, grads)
    return _ExampleLoss(l_rec, l_cons)


def train_stage2(
    split: DataSplit,
    pool: EvidencePool,
    params: ModelParams,
    hp: HyperParams,
    adam: Optional[AdamState] = None,
    start_epoch: int = 0,
    on_epoch_end: Optional[EpochCallback] = None,
) -> Tuple[ModelParams, TrainLog, AdamState]:
    """Cross-environment mini-batches minimising L_rec + lambda1 * L_inv + lambda2 * L_cons over all parameters.

    ``pool`` must already carry stability statistics; its embeddings are refreshed from the
    current item embeddings at the start of every epoch.
    """
    examples = split.all_train_examples
    if not examples:
        raise DatasetError("empty-split", "no training examples")
    adam = adam or AdamState.zeros(params)
    log = TrainLog()
    for epoch in range(start_epoch, hp.t2):
        started = time.perf_counter()
        epoch_pool = embed_evidence(pool, params)
        ordered = _epoch_order(examples, hp.max_examples_per_epoch, np.random.default_rng([hp.seed, 2, epoch]))
        steps: List[TrainLogRecord] = []
        for b, start in enumerate(range(0, len(ordered), hp.batch_size)):
            rng = np.random.default_rng([hp.seed, 2, epoch, b])
            raw = ordered[start:start + hp.batch_size]
            batch = sample_negatives(raw, params.num_items, hp.n_neg_stage2, rng)
            grads = params.zero_grads()
            parts = [_joint_example(params, epoch_pool, ex, hp, len(batch), grads) for ex in batch]
            l_rec = float(np.mean([p.l_rec for p in parts]))
            l_cons = float(np.mean([p.l_cons for p in parts]))
            l_inv = 0.0
            if not hp.freeze_irm_in_stage2:
                env_batches: Dict[int, List[TrainingExample]] = {}
                for ex in sample_negatives(raw, params.num_items, hp.n_neg, rng):
                    env_batches.setdefault(ex.env_id, []).append(ex)
                inv = irm_penalty(params, env_batches)
                l_inv = inv.value
                _accumulate(grads, inv.grads, hp.lambda1)
            total = total_loss(l_rec, l_inv, l_cons, hp)
            params, adam = adam_step(params, grads, adam, hp)
            steps.append(TrainLogRecord(2, epoch, l_rec, l_inv, l_cons, total, 0.0))
            logger.debug(f"stage 2 epoch {epoch} batch {b}: rec={l_rec:.6f} inv={l_inv:.6f} cons={l_cons:.6f}")
        record = _summarise(2, epoch, steps, hp, started)
        log.records.append(record)
        log.steps.extend(steps)
        logger.info(
            f"Stage 2 epoch {epoch + 1}/{hp.t2}: L_rec={record.l_rec:.5f} L_inv={record.l_inv:.6f} "
            f"L_cons={record.l_cons:.5f} total={record.total:.5f}"
        )
        if on_epoch_end:
            on_epoch_end(2, epoch, params, adam)
    return params, log, adam


@dataclass
class FitResult:
    params: ModelParams
    pool: EvidencePool
    log: TrainLog
    adam: AdamState


def fit(
    dataset: InteractionDataset,
    split: DataSplit,
    pool: EvidencePool,
    hp: HyperParams,
    stages: Sequence[int] = (1, 2),
    params: Optional[ModelParams] = None,
    adam: Optional[AdamState] = None,
    start: Tuple[int, int] = (1, 0),
    pool_has_stability: bool = False,
    on_epoch_end: Optional[EpochCallback] = None,
    on_pool_ready: Optional[Callable[[EvidencePool], None]] = None,
) -> FitResult:
    """Run the requested stages from ``start`` = (stage, epoch).

    Stability statistics are estimated on the training environments once stage 1 is
    done, unless ``pool`` already carries them (resuming inside stage 2).
    """
    params = params or ModelParams.initialize(dataset.num_items, hp.dim, hp.max_len, hp.seed, hp.init_scale)
    adam = adam or AdamState.zeros(params)
    start_stage, start_epoch = start
    log = TrainLog()
    if 1 in stages and start_stage == 1 and hp.t1 > 0:
        params, stage_log, adam = train_stage1(split, params, hp, adam, start_epoch, on_epoch_end)
        log.extend(stage_log)
    embedded = embed_evidence(pool, params)
    if hp.k > 0 and not pool_has_stability:
        embedded = precompute_stability(embedded, dataset, params, hp, envs=split.train_envs)
    if on_pool_ready:
        on_pool_ready(embedded)
    if 2 in stages and hp.t2 > 0:
        params, stage_log, adam = train_stage2(
            split, embedded, params, hp, adam, start_epoch if start_stage == 2 else 0, on_epoch_end
        )
        log.extend(stage_log)
        embedded = embed_evidence(embedded, params)
    return FitResult(params=params, pool=embedded, log=log, adam=adam)
