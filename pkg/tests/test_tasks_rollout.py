import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rldf import tokens
from rldf.diffusion import DecodeConfig, decode
from rldf.rollout import filter_group, normalize_advantages, rollout_group, score_group, RolloutGroup
from rldf.tasks import (
    FAMILIES,
    PROMPT_LENGTH,
    RESPONSE_LENGTH,
    dataset_manifest,
    extract_answer,
    generate_tasks,
    make_task,
    reward_binary,
    reward_passrate,
)

enc = tokens.encode


# -- rewards -------------------------------------------------------------------------------

def test_binary_reward_exact_and_garbage():
    assert reward_binary(enc("12+34=46$"), 46) == 1.0
    assert reward_binary(enc("12+34=47$"), 46) == 0.0
    assert reward_binary(enc("+=+|?"), 46) == 0.0
    assert reward_binary([], 46) == 0.0


def test_binary_reward_canonicalizes_leading_zeros():
    assert reward_binary(enc("12+34=046$"), 46) == 1.0
    assert reward_binary(enc("=0046__"), 46) == 1.0


def test_binary_reward_token_target_is_exact():
    assert reward_binary(enc("321$"), (3, 2, 1)) == 1.0
    assert reward_binary(enc("0321$"), (3, 2, 1)) == 0.0


def test_extract_answer():
    assert extract_answer(enc("1+2=3$__")) == [3]
    assert extract_answer(enc("=12=34$")) == [3, 4]
    assert extract_answer(enc("=$")) is None
    assert extract_answer(enc("1|2")) is None


def test_passrate():
    checks = [(0, 1), (1, 2), (2, 3), (3, 4)]
    assert reward_passrate(enc("1234"), checks) == 1.0
    assert reward_passrate(enc("1235"), checks) == 0.75
    assert reward_passrate([], checks) == 0.0
    with pytest.raises(ValueError):
        reward_passrate(enc("1"), [])


@pytest.mark.parametrize("family", FAMILIES)
def test_gold_solutions_score_one(family):
    for task in generate_tasks(family, 50, np.random.default_rng(0)):
        assert len(task.prompt) == PROMPT_LENGTH[family]
        assert task.response_length == RESPONSE_LENGTH[family]
        assert task.reward(task.solution) == 1.0


def test_addition_layout():
    t = make_task("addition", np.random.default_rng(1))
    text = tokens.decode(t.solution)
    a, b = tokens.decode(t.prompt).split("+")
    assert text.startswith(f"{a}+{b}={int(a) + int(b)}$")
    assert len(text) == 10


def test_generation_is_seeded():
    a = generate_tasks("sort", 20, np.random.default_rng(3))
    b = generate_tasks("sort", 20, np.random.default_rng(3))
    assert a == b
    assert dataset_manifest("sort", 20, 3, "train") == {
        "family": "sort", "count": 20, "seed": 3, "split": "train", "max_len": 16}


# -- advantages and filtering ----------------------------------------------------------------

def test_advantages_hand_values():
    adv = normalize_advantages([1, 0, 0, 0], 1e-4)
    # mu = 1/4, sigma = sqrt(3)/4
    assert adv == pytest.approx([np.sqrt(3), -1 / np.sqrt(3), -1 / np.sqrt(3), -1 / np.sqrt(3)], abs=1e-12)
    assert normalize_advantages([1, 0], 1e-4) == pytest.approx([1.0, -1.0])
    assert np.all(normalize_advantages([0.5] * 4) == 0.0)


def test_advantages_use_floor():
    adv = normalize_advantages([1e-6, 0.0], 1e-4)
    assert adv == pytest.approx([0.5e-6 / 1e-4, -0.5e-6 / 1e-4])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=2, max_size=16))
def test_advantage_moments(rewards):
    r = np.array(rewards)
    adv = normalize_advantages(r, 1e-4)
    if np.var(r) > 0:
        assert abs(adv.mean()) <= 1e-9
        if r.std() > 1e-4:
            assert abs(adv.std() - 1.0) <= 1e-9


def group_with(rewards):
    g = RolloutGroup(make_task("sort", np.random.default_rng(0)), [None] * len(rewards))
    g.rewards = np.array(rewards, dtype=float)
    return g


@pytest.mark.parametrize("rewards,keep", [([1, 1, 1, 1], False), ([0, 0, 0, 0], False), ([1, 0, 1, 0], True)])
def test_filter(rewards, keep):
    assert filter_group(group_with(rewards)) is keep


# -- rollouts ----------------------------------------------------------------------------------

def test_group_is_reproducible_and_distinct(peaked_model):
    task = make_task("addition", np.random.default_rng(2))
    cfg = DecodeConfig(length=10)
    a = rollout_group(peaked_model, task, 4, cfg, np.random.default_rng(9))
    b = rollout_group(peaked_model, task, 4, cfg, np.random.default_rng(9))
    assert a.trajectories == b.trajectories
    assert len({tr.final for tr in a.trajectories}) == 4


def test_trajectories_depend_only_on_their_own_seed(peaked_model):
    task = make_task("addition", np.random.default_rng(2))
    cfg = DecodeConfig(length=10)
    g = rollout_group(peaked_model, task, 4, cfg, np.random.default_rng(9))
    for tr in g.trajectories:
        assert decode(peaked_model, task.prompt, cfg, np.random.default_rng(tr.seed), seed=tr.seed) == tr


def test_greedy_group_is_identical(peaked_model):
    task = make_task("addition", np.random.default_rng(2))
    g = rollout_group(peaked_model, task, 2, DecodeConfig(length=10, temperature=0.0), np.random.default_rng(0))
    assert g.trajectories[0].final == g.trajectories[1].final
    assert g.trajectories[0].events == g.trajectories[1].events


def test_group_size_and_scores(peaked_model):
    task = make_task("sort", np.random.default_rng(2))
    with pytest.raises(ValueError):
        rollout_group(peaked_model, task, 1, DecodeConfig(length=8), np.random.default_rng(0))
    g = rollout_group(peaked_model, task, 3, DecodeConfig(length=8, max_steps=2), np.random.default_rng(0))
    assert np.all(score_group(g) == 0.0)  # every decode ran out of steps
    g = rollout_group(peaked_model, task, 3, DecodeConfig(length=8), np.random.default_rng(0))
    r = score_group(g)
    assert r.shape == (3,) and np.all((0 <= r) & (r <= 1))
