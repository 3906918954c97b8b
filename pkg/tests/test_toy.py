import numpy as np
import pytest

from vragrl.grpo import GrpoConfig, ToyPolicy
from vragrl.rollout import rollout
from vragrl.toy import (
    TEMPLATES,
    TemplatePolicy,
    ToyAgent,
    enumerate_optimum,
    episode_reward,
    make_toy_task,
    read_curve,
    tokenize,
    train_toy,
    write_curve,
)
from vragrl.trajectory import FinishReason


@pytest.fixture(scope="module")
def toy():
    return make_toy_task(0)


def test_optimum_is_search_then_answer(toy):
    assert enumerate_optimum(toy) == (1.0, (TEMPLATES.index("search_key"), TEMPLATES.index("answer")))


def test_template_rewards(toy):
    def reward(seq):
        return episode_reward(rollout(toy.task, TemplatePolicy(toy, seq), toy.env, toy.rollout_config), toy)

    assert reward([3]) < 1.0  # answering blind reads "unknown"
    assert reward([4]) == 0.0
    assert reward([1, 3]) < reward([0, 3])


def test_tokenize_round_trips_actions(toy):
    traj = rollout(toy.task, TemplatePolicy(toy, [1, 2, 0]), toy.env, toy.rollout_config)
    p = ToyPolicy.uniform(3, 5)
    tok = tokenize(traj, toy, p, p)
    assert [int(t) for t in tok.token_ids[tok.mask == 1]] == [1, 2, 0]
    assert [int(s) for s in tok.states[tok.mask == 1]] == [0, 1, 2]
    assert traj.finish_reason is FinishReason.BUDGET_EXHAUSTED


def test_zero_steps_leaves_policy(toy):
    p = ToyPolicy.uniform(3, 5)
    result = train_toy(toy, p, steps=0)
    assert result.curve == [] and np.array_equal(result.policy.params, np.zeros((3, 5)))


def test_zero_learning_rate_is_flat(toy):
    result = train_toy(toy, ToyPolicy.uniform(3, 5), GrpoConfig(learning_rate=0.0), steps=20)
    assert np.array_equal(result.policy.params, np.zeros((3, 5)))
    assert len({p.greedy_reward for p in result.curve}) == 1


def test_training_is_deterministic(toy):
    a = train_toy(toy, ToyPolicy.uniform(3, 5), steps=30, seed=3)
    b = train_toy(toy, ToyPolicy.uniform(3, 5), steps=30, seed=3)
    assert np.array_equal(a.policy.params, b.policy.params)
    assert a.curve == b.curve


def test_learns_optimum(toy):
    result = train_toy(toy, ToyPolicy.uniform(3, 5), steps=300, seed=0)
    assert not result.diverged
    assert result.curve[-1].greedy_reward == 1.0
    greedy = rollout(toy.task, ToyAgent(result.policy, toy, greedy=True), toy.env, toy.rollout_config)
    actions = [toy.match(t.text, []) if i == 0 else None for i, t in enumerate(greedy.assistant_turns())]
    assert actions[0] == TEMPLATES.index("search_key") and greedy.step_count == 2
    smooth = np.convolve([p.mean_reward for p in result.curve], np.ones(50) / 50, mode="valid")
    assert smooth[-1] >= smooth[0]
    assert np.all(np.diff(smooth[::50]) > -0.05)


def test_kl_penalty_keeps_policy_near_reference(toy):
    kls = {}
    for beta in (0.0, 5.0):
        cfg = GrpoConfig(learning_rate=0.05, kl_coefficient=beta)
        result = train_toy(toy, ToyPolicy.uniform(3, 5), cfg, steps=300, seed=1)
        kls[beta] = np.mean([p.kl for p in result.curve[-50:]])
    assert kls[5.0] < kls[0.0]


def test_curve_csv_round_trip(toy, tmp_path):
    result = train_toy(toy, ToyPolicy.uniform(3, 5), steps=5, seed=2)
    write_curve(tmp_path / "c.csv", result.curve)
    assert read_curve(tmp_path / "c.csv") == result.curve
