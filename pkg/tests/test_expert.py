import json

import pytest

from vragrl.clients import FunctionModel
from vragrl.expert import (
    BudgetExhausted,
    ExpertClients,
    GroundingDegenerate,
    GuideUnparseable,
    InvalidTargets,
    action_mix,
    guide_step,
    reground_region,
    synthesize_dataset,
    synthesize_trajectory,
    to_sft_record,
    validate_targets,
)
from vragrl.grammar import Answer, Region, Search, parse_response, render_response
from vragrl.perception import EncoderProfile
from vragrl.retrieval import SimulatedRetriever, make_planted_corpus
from vragrl.reward import ExactMatchJudge, StaticJudge, score_trajectory
from vragrl.rollout import EnvironmentBundle, OraclePolicy, _assistant_count, initial_trajectory
from vragrl.trajectory import FinishReason, Role, read_jsonl

CORPUS, TASKS = make_planted_corpus(n_docs=8, n_tasks=3, seed=2, page_size=(800, 600))
BY_ID = {t.id: t for t in TASKS}


def env():
    return EnvironmentBundle(SimulatedRetriever(CORPUS, seed=2), profile=EncoderProfile(patch_multiple=8))


def scripted_guide(steps):
    """Guide that plays ``steps[n]`` at its n-th assistant turn, for any task."""

    def fn(messages):
        n = _assistant_count(messages)
        step = steps[min(n, len(steps) - 1)]
        if callable(step):
            step = step(messages)
        return step if isinstance(step, str) else render_response("thinking", step)

    return FunctionModel(fn)


def key(task):
    return Search(task.metadata["oracle_queries"][0])


def fixed_grounder(box):
    return FunctionModel(lambda messages: f"<bbox>{list(box)}</bbox>")


def oracle_guide():
    policy = OraclePolicy(TASKS)
    return FunctionModel(lambda messages: policy.generate(messages))


def test_grounder_box_replaces_guide_box():
    task = TASKS[0]
    guide = scripted_guide([key(task), Region((0, 0, 5, 5)), Answer(task.golden_answer)])
    traj = synthesize_trajectory(task, ExpertClients(guide, fixed_grounder((120, 80, 400, 300))), env())
    assert traj.turns[3].images[0].view.enc_width == 800
    region_turn = traj.turns[4]
    assert region_turn.action == Region((120, 80, 400, 300))
    assert region_turn.provenance == "expert" and traj.turns[2].provenance == "guide"
    assert parse_response(region_turn.text).action == Region((120, 80, 400, 300))
    crop = traj.turns[5].images[0].view
    assert crop.raw_box == (120, 80, 400, 300)
    assert traj.finish_reason is FinishReason.ANSWERED


def _with_image(task):
    e = env()
    traj = initial_trajectory(task, e)
    from vragrl.rollout import execute_action
    from vragrl.trajectory import RolloutConfig, Turn

    traj.append(Turn(Role.ASSISTANT, text=render_response("t", key(task)), thought="t", action=key(task)))
    traj.append(execute_action(traj, key(task), e, RolloutConfig()))
    return traj, e


@pytest.mark.parametrize("box", [(700, 500, 900, 700), (10, 10, 10, 50)])
def test_degenerate_grounding(box):
    traj, e = _with_image(TASKS[0])
    with pytest.raises(GroundingDegenerate):
        reground_region(traj, "t", Region((0, 0, 5, 5)), fixed_grounder(box), e)


def test_unparseable_grounding():
    traj, e = _with_image(TASKS[0])
    with pytest.raises(GroundingDegenerate):
        reground_region(traj, "t", Region((0, 0, 5, 5)), FunctionModel(lambda m: "somewhere left"), e)


def test_non_region_passes_through():
    traj, e = _with_image(TASKS[0])
    grounder = FunctionModel(lambda m: pytest.fail("grounder must not be called"))
    assert reground_region(traj, "t", Answer("x"), grounder, e) == Answer("x")


def test_region_on_empty_history_retries_then_fails():
    calls = []

    def fn(messages):
        calls.append(messages)
        return render_response("zoom", Region((0, 0, 10, 10)))

    traj = initial_trajectory(TASKS[0], env())
    with pytest.raises(GuideUnparseable):
        guide_step(traj, FunctionModel(fn))
    assert len(calls) == 2
    assert "NoImageInContext" in calls[1][-1]["text"]


def test_retry_recovers():
    replies = iter(["<think>a</think><search>x</search><answer>y</answer>", render_response("b", Search("q"))])
    traj = initial_trajectory(TASKS[0], env())
    assert guide_step(traj, FunctionModel(lambda m: next(replies))) == ("b", Search("q"))


def test_two_actions_unparseable():
    bad = "<think>a</think><search>x</search><answer>y</answer>"
    traj = initial_trajectory(TASKS[0], env())
    with pytest.raises(GuideUnparseable):
        guide_step(traj, FunctionModel(lambda m: bad))


def test_validate_targets():
    assert validate_targets({"2": 2, "3|answer=1,search=2": 1}) == {2: 2, (3, "answer=1,search=2"): 1}
    with pytest.raises(InvalidTargets):
        validate_targets({7: 1})
    with pytest.raises(InvalidTargets):
        validate_targets({1: 1})
    with pytest.raises(InvalidTargets):
        validate_targets({2: 2}, count=3)


def test_dataset_meets_targets(tmp_path):
    two = oracle_guide()
    def fn(messages):
        # alternate between 2-step oracle plans and 3-step plans with a zoom
        n = _assistant_count(messages)
        prompt = messages[1]["text"]
        task = next(t for t in TASKS if t.question in prompt)
        if task is TASKS[1]:
            plan = [key(task), Region((0, 0, 400, 300)), Answer(task.golden_answer)]
            return render_response("t", plan[min(n, 2)])
        return two.complete(messages)

    clients = ExpertClients(FunctionModel(fn), fixed_grounder((0, 0, 800, 600)))
    manifest, kept = synthesize_dataset(TASKS, clients, env(), {2: 2, 3: 2}, ExactMatchJudge(), out_dir=tmp_path)
    assert manifest.complete()
    assert manifest.achieved() == {"2": 2, "3": 2}
    assert sorted(t.step_count for t in kept) == [2, 2, 3, 3]
    assert manifest.rejected["BucketFull"] >= 1
    data = json.loads((tmp_path / "dataset_manifest.json").read_text())
    assert data["histogram"] == {"2|answer=1,search=1": 2, "3|answer=1,region=1,search=1": 2}

    for traj in read_jsonl(tmp_path / "trajectories.jsonl"):
        for turn in traj.assistant_turns():
            assert parse_response(turn.text).pattern_valid
        b = score_trajectory(traj, BY_ID[traj.task_id], ExactMatchJudge())
        assert (b.r_pat, b.r_ans) == (1.0, 1.0)


def test_action_mix():
    traj = synthesize_trajectory(TASKS[0], ExpertClients(oracle_guide(), fixed_grounder((0, 0, 1, 1))), env())
    assert action_mix(traj) == "answer=1,search=1"


def test_rejecting_judge_exhausts_budget(tmp_path):
    clients = ExpertClients(oracle_guide(), fixed_grounder((0, 0, 1, 1)))
    judge = StaticJudge("<judge>False</judge>")
    with pytest.raises(BudgetExhausted) as info:
        synthesize_dataset(TASKS, clients, env(), {2: 2}, judge, out_dir=tmp_path, max_attempts=6)
    m = info.value.manifest
    assert m.attempts == 6 and m.rejected == {"WrongAnswer": 6} and m.records == []
    assert (tmp_path / "dataset_manifest.json").exists()


def test_parallel_dataset_matches_serial():
    clients = ExpertClients(oracle_guide(), fixed_grounder((0, 0, 1, 1)))
    a, ka = synthesize_dataset(TASKS, clients, env(), {2: 3}, ExactMatchJudge(), workers=1)
    b, kb = synthesize_dataset(TASKS, clients, env(), {2: 3}, ExactMatchJudge(), workers=3)
    assert a.to_dict() == b.to_dict()
    assert [t.to_dict() for t in ka] == [t.to_dict() for t in kb]


def test_sft_record_shape():
    traj = synthesize_trajectory(TASKS[0], ExpertClients(oracle_guide(), fixed_grounder((0, 0, 1, 1))), env())
    rec = to_sft_record(traj, "imgs/")
    assert rec["task_id"] == TASKS[0].id
    roles = [m["role"] for m in rec["messages"]]
    assert roles == ["system", "user", "assistant", "user", "assistant"]
    obs = rec["messages"][3]["content"]
    assert obs[0]["type"] == "image" and obs[0]["image"].startswith("imgs/") and obs[0]["image"].endswith(".png")
    assert isinstance(rec["messages"][4]["content"], str)
