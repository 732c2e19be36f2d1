import numpy as np
import pytest

from src.recommender.exceptions import RankerError
from src.recommender.gradcheck import (
    check_counterfactual,
    check_coverage_surrogate,
    check_rank_score,
    random_instance,
)
from src.recommender.models import RankOutput, RetrievalResult
from src.recommender.ranker import (
    consistency_loss,
    counterfactual_hinge,
    counterfactual_loss,
    coverage_surrogate,
    evidence_matrix,
    rank_forward,
    rank_score,
    select_key_evidence,
    select_key_evidence_loo,
)


def _output(attention) -> RankOutput:
    return RankOutput(score=0.0, attention=np.asarray(attention, dtype=float), aggregated_evidence=np.zeros(2))


@pytest.fixture
def instance():
    return random_instance(np.random.default_rng(21))


def test_empty_evidence_uses_a_zero_aggregate(instance):
    params, _ = instance
    z = np.linspace(-1, 1, params.dim)
    out, _ = rank_forward(params, z, 3, np.zeros((0, params.dim)))
    np.testing.assert_array_equal(out.aggregated_evidence, np.zeros(params.dim))
    x = np.concatenate([z, params.item_embeddings[3], np.zeros(params.dim)])
    expected = float(np.tanh(x @ params.mlp_w1 + params.mlp_b1) @ params.mlp_w2 + params.mlp_b2)
    assert out.score == pytest.approx(expected, rel=1e-12)


def test_single_evidence_gets_all_attention(instance):
    params, pool = instance
    out = rank_score(params, np.ones(params.dim), 1, RetrievalResult((4,), (0.0,)), pool)
    np.testing.assert_array_equal(out.attention, np.array([1.0]))


def test_shape_mismatch_is_rejected(instance):
    params, _ = instance
    with pytest.raises(RankerError) as e:
        rank_forward(params, np.ones(params.dim + 1), 0, np.zeros((0, params.dim)))
    assert e.value.code == "shape-mismatch"
    with pytest.raises(RankerError) as e:
        rank_forward(params, np.ones(params.dim), 0, np.ones((2, params.dim + 1)))
    assert e.value.code == "shape-mismatch"
    with pytest.raises(RankerError) as e:
        rank_forward(params, np.ones(params.dim), params.num_items, np.zeros((0, params.dim)))
    assert e.value.code == "item-out-of-range"


def test_evidence_matrix_follows_rank_order(instance):
    params, pool = instance
    matrix = evidence_matrix(RetrievalResult((5, 2), (0.0, 0.0)), pool, params.dim)
    np.testing.assert_array_equal(matrix[0], pool.items[5].embedding)
    np.testing.assert_array_equal(matrix[1], pool.items[2].embedding)


def test_rank_score_gradients_match_finite_differences():
    rng = np.random.default_rng(31)
    for _ in range(100):
        params, pool = random_instance(rng)
        errors = check_rank_score(params, pool, rng)
        assert max(errors.values()) < 1e-4, errors


def test_select_key_evidence():
    assert select_key_evidence(_output([0.2, 0.5, 0.3])) == 2
    assert select_key_evidence(_output([1 / 3, 1 / 3, 1 / 3])) == 1
    attention = np.random.default_rng(3).dirichlet(np.ones(7))
    best = 0
    for j in range(1, 7):
        if attention[j] > attention[best]:
            best = j
    assert select_key_evidence(_output(attention)) == best + 1
    with pytest.raises(RankerError) as e:
        select_key_evidence(_output([]))
    assert e.value.code == "no-evidence"


def test_leave_one_out_selection_picks_the_largest_drop(instance):
    params, pool = instance
    z = np.random.default_rng(4).normal(size=params.dim)
    retrieved = RetrievalResult((0, 3, 7), (0.0, 0.0, 0.0))
    full = rank_score(params, z, 2, retrieved, pool).score
    drops = [full - rank_score(params, z, 2, retrieved.without_rank(r), pool).score for r in (1, 2, 3)]
    assert select_key_evidence_loo(params, z, 2, retrieved, pool) == int(np.argmax(drops)) + 1


@pytest.mark.parametrize("drop, expected", [(0.31, 0.0), (0.0, 0.2), (0.2, 0.0), (0.05, 0.15)])
def test_counterfactual_hinge(drop, expected):
    assert counterfactual_hinge(0.2, drop) == pytest.approx(expected)


def test_counterfactual_loss_matches_manual_removal(instance):
    params, pool = instance
    z = np.random.default_rng(5).normal(size=params.dim)
    retrieved = RetrievalResult((1, 4, 6), (0.0, 0.0, 0.0))
    full = rank_score(params, z, 0, retrieved, pool)
    key = select_key_evidence(full)
    reduced = rank_score(params, z, 0, retrieved.without_rank(key), pool)
    expected = max(0.0, 0.2 - (full.score - reduced.score))
    assert counterfactual_loss(params, z, 0, retrieved, pool, 0.2).value == pytest.approx(expected)


def test_satisfied_counterfactual_has_no_gradient(instance):
    params, pool = instance
    z = np.random.default_rng(6).normal(size=params.dim)
    loss = counterfactual_loss(params, z, 0, RetrievalResult((1, 4), (0.0, 0.0)), pool, gamma=-100.0)
    assert loss.value == 0.0
    assert all(not np.any(g) for g in loss.grads.values())


def test_counterfactual_gradients_match_finite_differences():
    rng = np.random.default_rng(41)
    for _ in range(100):
        params, pool = random_instance(rng)
        errors = check_counterfactual(params, pool, rng)
        assert max(errors.values()) < 1e-4, errors


def test_coverage_surrogate_limits():
    assert coverage_surrogate(_output([0.5, 0.5]), 0.03, 0.01).value < 0.01
    assert coverage_surrogate(_output([0.03, 0.03]), 0.03, 0.01).value == pytest.approx(0.5)
    with pytest.raises(RankerError):
        coverage_surrogate(_output([]), 0.03, 0.01)


def test_coverage_surrogate_gradients_match_finite_differences():
    rng = np.random.default_rng(51)
    for _ in range(100):
        params, pool = random_instance(rng)
        errors = check_coverage_surrogate(params, pool, rng)
        assert max(errors.values()) < 1e-4, errors


@pytest.mark.parametrize("l_cov, l_cf, expected", [(0.15, 0.0, 0.15), (0.0, 0.2, 0.1), (0.0, 0.0, 0.0)])
def test_consistency_loss(l_cov, l_cf, expected):
    assert consistency_loss(l_cov, l_cf, 0.5) == pytest.approx(expected)


def test_consistency_loss_rejects_negative_terms():
    with pytest.raises(RankerError) as e:
        consistency_loss(-0.1, 0.0, 0.5)
    assert e.value.code == "negative-loss"


def test_attention_ignores_a_common_logit_shift(instance, rng):
    params, pool = instance
    z = rng.normal(size=params.dim)
    evidence = np.stack([pool.items[i].embedding for i in (0, 3, 7, 9)])
    # a shared offset on every evidence row adds the same constant to each logit
    offset = rng.normal(size=params.dim) * 3.0
    base, _ = rank_forward(params, z, 2, evidence)
    shifted, _ = rank_forward(params, z, 2, evidence + offset)
    np.testing.assert_allclose(shifted.attention, base.attention, rtol=0, atol=1e-9)
