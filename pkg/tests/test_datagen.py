from dataclasses import replace

import pytest

from src.recommender.datagen import effective_strengths, generate_synthetic, split_dataset
from src.recommender.exceptions import DatasetError, ValidationError
from src.recommender.models import EvidenceSource, Interaction, InteractionDataset


def test_generation_is_seeded(small_synth, synthetic):
    dataset, pool, truth = synthetic
    again, again_pool, again_truth = generate_synthetic(small_synth)
    assert again.interactions == dataset.interactions
    assert again_pool.items == pool.items
    assert again_truth.meta(small_synth, again, again_pool) == truth.meta(small_synth, dataset, pool)
    other, _, _ = generate_synthetic(replace(small_synth, seed=4))
    assert other.interactions != dataset.interactions


def test_generated_dataset_shape(small_synth, synthetic):
    dataset, pool, truth = synthetic
    assert len(dataset.interactions) == small_synth.num_users * small_synth.interactions_per_user
    assert dataset.env_ids == (0, 1, 2)
    for history in dataset.by_user.values():
        assert {x.env_id for x in history} == {0, 1, 2}
        timestamps = [x.timestamp for x in history]
        assert timestamps == sorted(timestamps)
    assert truth.train_envs == [0, 1]
    assert set(truth.attribute_kinds.values()) == {"stable", "spurious"}


def test_pool_holds_every_source(small_synth, synthetic):
    dataset, pool, _ = synthetic
    sources = {ev.source for ev in pool.items}
    assert sources == set(EvidenceSource)
    attributes = [ev for ev in pool.items if ev.source is EvidenceSource.ATTRIBUTE]
    assert len(attributes) == small_synth.num_items * small_synth.n_attributes
    for user, ids in pool.user_index.items():
        assert len(ids) <= small_synth.history_evidence_per_user
        seen = {x.item_id for x in dataset.by_user[user]}
        assert all(pool.items[i].payload.item_id in seen for i in ids)


def test_history_evidence_skips_held_out_interactions(synthetic):
    dataset, pool, _ = synthetic
    for user, ids in pool.user_index.items():
        last = {x.env_id: x.timestamp for x in dataset.by_user[user]}
        for i in ids:
            assert pool.items[i].payload.timestamp not in last.values()


def test_zero_shift_keeps_training_strengths(small_synth):
    cfg = replace(small_synth, shift_intensity=0.0)
    assert effective_strengths(cfg) == pytest.approx(cfg.spurious_strength)


def test_full_shift_flips_the_last_environment(small_synth):
    cfg = replace(small_synth, shift_intensity=1.0)
    strengths = effective_strengths(cfg)
    assert strengths[:2] == pytest.approx([0.9, 0.6])
    assert strengths[2] == pytest.approx(-0.9)


@pytest.mark.parametrize("change", [
    {"num_envs": 1},
    {"spurious_strength": [0.9, 0.6]},
    {"spurious_strength": [0.9, 0.6, 1.5]},
    {"shift_intensity": 1.5},
    {"interactions_per_user": 4},
    {"env_shares": [0.5, 0.5, 0.0]},
])
def test_bad_configs_are_rejected(small_synth, change):
    with pytest.raises(ValidationError) as e:
        generate_synthetic(replace(small_synth, **change))
    assert e.value.code == "bad-config"


def test_split_holds_out_the_last_interaction_per_environment(synthetic, split, small_hp):
    dataset, _, _ = synthetic
    assert split.train_envs == (0, 1)
    assert split.test_envs == (2,)
    assert split.shifted_env == 2
    for env, cases in split.test_cases.items():
        assert len({c.user_id for c in cases}) == len(cases)
        for case in cases:
            history = dataset.by_user[case.user_id]
            last = max(i for i, x in enumerate(history) if x.env_id == env)
            assert history[last].item_id == case.target
            assert len(case.context) <= small_hp.max_len
    for env, examples in split.train_examples.items():
        assert all(ex.env_id == env for ex in examples)
        assert all(0 < len(ex.context) <= small_hp.max_len for ex in examples)


def test_split_needs_two_training_environments(synthetic):
    dataset, _, _ = synthetic
    with pytest.raises(DatasetError) as e:
        split_dataset(dataset, [0], 5)
    assert e.value.code == "insufficient-environments"
    with pytest.raises(DatasetError) as e:
        split_dataset(dataset, [7, 8], 5)
    assert e.value.code == "empty-split"


def test_split_of_a_tiny_dataset():
    interactions = (
        Interaction(0, 1, 4.0, 0, 0), Interaction(0, 2, 4.0, 1, 0), Interaction(0, 3, 4.0, 2, 0),
        Interaction(0, 4, 4.0, 3, 1), Interaction(0, 5, 4.0, 4, 1),
    )
    split = split_dataset(InteractionDataset(interactions, 1, 6, 2), [0, 1], 2)
    assert [ex.target for ex in split.train_examples[0]] == [2]
    assert [ex.target for ex in split.train_examples[1]] == [4]
    assert split.train_examples[1][0].context == (2, 3)
    assert [(c.target, c.context) for c in split.test_cases[0]] == [(3, (1, 2))]
    assert [(c.target, c.context) for c in split.test_cases[1]] == [(5, (3, 4))]
