"""Behavioural checks on the synthetic benchmark; several minutes each, run with ``pytest -m slow``."""
from dataclasses import replace

import numpy as np
import pytest

from src.recommender.config import HyperParams, SynthConfig
from src.recommender.datagen import generate_synthetic, split_dataset
from src.recommender.metrics import run_variant, sweep_shift
from src.recommender.models import ModelParams
from src.recommender.retriever import embed_evidence
from src.recommender.trainer import fit, train_stage1, train_stage2

pytestmark = pytest.mark.slow

SEEDS = range(5)

BENCH = SynthConfig(num_users=400, num_items=200, interactions_per_user=24)
HP = HyperParams(
    dim=32, max_len=10, lr=0.005, batch_size=64, t1=3, t2=3, k=10,
    max_examples_per_epoch=1024, max_eval_cases=200, stability_users=100,
)


def test_invariance_penalty_ends_lower_with_its_weight():
    with_penalty, without = [], []
    for seed in SEEDS:
        dataset, _, _ = generate_synthetic(replace(BENCH, seed=BENCH.seed + seed))
        split = split_dataset(dataset, [0, 1], HP.max_len)
        for lambda1, sink in ((0.1, with_penalty), (0.0, without)):
            hp = replace(HP, lambda1=lambda1, seed=seed)
            params = ModelParams.initialize(dataset.num_items, hp.dim, hp.max_len, seed, hp.init_scale)
            _, log, _ = train_stage1(split, params, hp)
            sink.append(log.records[-1].l_inv)
    assert np.mean(with_penalty) < np.mean(without)


def test_unweighted_stage2_lowers_the_recommendation_loss():
    dataset, pool, _ = generate_synthetic(BENCH)
    split = split_dataset(dataset, [0, 1], HP.max_len)
    hp = replace(HP, lambda1=0.0, lambda2=0.0, t1=0, t2=3)
    result = fit(dataset, split, pool, hp)
    l_rec = [r.l_rec for r in result.log.records]
    assert l_rec[0] > l_rec[1] > l_rec[2]


def test_invariant_training_degrades_less_out_of_distribution():
    table = sweep_shift(BENCH, [0.5], HP, SEEDS, [0, 1], variants=("full", "no_causal", "baseline"))
    deltas = table.pivot(index="seed", columns="variant", values="ood_delta")
    assert deltas["full"].mean() <= 0.6 * deltas["baseline"].mean()
    assert (deltas["full"] < deltas["no_causal"]).sum() >= 4


def test_faithfulness_training_raises_coverage_and_counterfactual_drops():
    full, plain = [], []
    for seed in SEEDS:
        synth = replace(BENCH, seed=BENCH.seed + seed)
        hp = replace(HP, seed=seed)
        full.append(run_variant(synth, [0, 1], hp, "full"))
        plain.append(run_variant(synth, [0, 1], hp, "no_faithful"))
    assert np.mean([r.cf_satisfied_fraction for r in full]) > np.mean([r.cf_satisfied_fraction for r in plain])
    assert np.mean([r.evidence_coverage for r in full]) > np.mean([r.evidence_coverage for r in plain])


def test_retrieval_helps_in_distribution():
    with_retrieval, without = [], []
    for seed in SEEDS:
        synth = replace(BENCH, seed=BENCH.seed + seed)
        hp = replace(HP, seed=seed)
        with_retrieval.append(run_variant(synth, [0, 1], hp, "full").per_env[0].ndcg)
        without.append(run_variant(synth, [0, 1], hp, "no_rag").per_env[0].ndcg)
    assert np.mean(with_retrieval) >= np.mean(without)


def test_stage2_pool_refresh_tracks_the_embeddings():
    dataset, pool, _ = generate_synthetic(BENCH)
    split = split_dataset(dataset, [0, 1], HP.max_len)
    hp = replace(HP, t1=1, t2=1)
    result = fit(dataset, split, pool, hp)
    refreshed = embed_evidence(result.pool, result.params)
    np.testing.assert_allclose(refreshed.embedding_matrix, result.pool.embedding_matrix)
    _, log, _ = train_stage2(split, result.pool, result.params, replace(hp, t2=1))
    assert np.isfinite(log.records[0].total)


def test_without_spurious_signal_invariance_training_changes_nothing_measurable():
    neutral = replace(BENCH, spurious_strength=[0.0] * BENCH.num_envs)
    table = sweep_shift(neutral, [0.5], HP, SEEDS, [0, 1], variants=("full", "no_causal"))
    deltas = table.pivot(index="seed", columns="variant", values="ood_delta")
    noise = max(deltas["full"].std(ddof=0), deltas["no_causal"].std(ddof=0))
    assert abs(deltas["full"].mean() - deltas["no_causal"].mean()) < 2 * noise


def test_erm_degradation_grows_with_the_shift():
    table = sweep_shift(BENCH, [0.0, 0.25, 0.5], HP, SEEDS, [0, 1], variants=("no_causal",))
    deltas = table.pivot(index="seed", columns="intensity", values="ood_delta")
    for low, high in ((0.0, 0.25), (0.25, 0.5)):
        step = deltas[high] - deltas[low]
        assert step.mean() >= -2 * step.std(ddof=0) / np.sqrt(len(step))
