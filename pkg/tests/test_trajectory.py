import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from vragrl.grammar import Answer, Search
from vragrl.perception import EncodedView
from vragrl.trajectory import (
    AppendToFinished,
    EmptyBatch,
    FinishReason,
    ImageRef,
    QueryTask,
    Role,
    RolloutConfig,
    Trajectory,
    TrajectoryError,
    Turn,
    append_turn,
    compute_metrics,
    iter_jsonl,
    read_jsonl,
    write_jsonl,
)


def ref(doc_id):
    return ImageRef(EncodedView(doc_id, 28, 28, (0, 0), (100, 100), 100, 100), "0" * 64)


def assistant(action=None, text="t"):
    return Turn(Role.ASSISTANT, text=text, action=action)


def obs(*doc_ids):
    return Turn(Role.USER, images=tuple(ref(d) for d in doc_ids))


def answered(n_actions, invalid=0):
    traj = Trajectory("t")
    for i in range(n_actions - 1):
        traj.append(assistant(Search("q")))
        if i < invalid:
            traj.record_invalid()
        traj.append(obs(f"d{i}"))
    traj.append(assistant(Answer("a")))
    return traj.finish(FinishReason.ANSWERED)


def test_task_invariants():
    with pytest.raises(ValueError):
        QueryTask("x", "  ", "a", {"d"})
    with pytest.raises(ValueError):
        QueryTask("x", "q", "a", set())
    assert QueryTask("x", "q", "a", set(), answer_only=True).golden_doc_ids == frozenset()


def test_task_round_trip():
    t = QueryTask("x", "q?", "a", {"d2", "d1"}, "c", metadata={"oracle_queries": ["k"]})
    assert QueryTask.from_dict(json.loads(json.dumps(t.to_dict()))) == t


def test_append_first_assistant():
    traj = append_turn(Trajectory("t"), assistant(Search("q")))
    assert len(traj.turns) == 1 and traj.step_count == 1


def test_append_dedups_retrieved():
    traj = Trajectory("t")
    traj.append(assistant(Search("q"))).append(obs("d1"))
    traj.append(assistant(Search("q"))).append(obs("d1", "d2"))
    assert traj.retrieved_doc_ids == ["d1", "d2"]


def test_append_to_finished():
    with pytest.raises(AppendToFinished):
        answered(2).append(obs("d9"))


def test_role_invariants():
    with pytest.raises(ValueError):
        Turn(Role.USER, action=Search("q"))
    with pytest.raises(ValueError):
        Turn(Role.ASSISTANT, images=(ref("d"),))
    traj = Trajectory("t").append(assistant())
    with pytest.raises(ValueError):
        traj.append(assistant())


def test_answered_requires_answer():
    traj = Trajectory("t").append(assistant(Search("q")))
    with pytest.raises(TrajectoryError):
        traj.finish(FinishReason.ANSWERED)


def test_metrics_examples():
    m = compute_metrics([answered(2), answered(2)])
    assert (m.finish_rate, m.invalid_action_rate, m.mean_steps) == (1.0, 0.0, 2.0)
    budget = Trajectory("t").append(assistant(Search("q"))).finish(FinishReason.BUDGET_EXHAUSTED)
    assert compute_metrics([answered(2), budget]).finish_rate == 0.5
    m = compute_metrics([answered(5, invalid=1), answered(5)])
    assert m.invalid_action_rate == pytest.approx(0.1)
    with pytest.raises(EmptyBatch):
        compute_metrics([])


def test_rollout_config_defaults():
    c = RolloutConfig()
    assert (c.max_iterations, c.max_prompt_tokens, c.max_response_tokens) == (10, 8192, 2048)
    with pytest.raises(ValueError):
        RolloutConfig(max_iterations=0)


@given(st.lists(st.lists(st.sampled_from("abcdefg"), max_size=4), max_size=8))
def test_retrieved_is_dedup_subsequence(batches):
    traj = Trajectory("t")
    for batch in batches:
        traj.append(assistant(Search("q")))
        traj.append(obs(*batch))
    flat = [d for b in batches for d in b]
    # set-trace oracle: first occurrences in order
    seen, expected = set(), []
    for d in flat:
        if d not in seen:
            seen.add(d)
            expected.append(d)
    assert traj.retrieved_doc_ids == expected
    assert traj.step_count == len(batches)


def test_jsonl_round_trip(tmp_path):
    trajs = [answered(3), answered(2, invalid=1)]
    path = tmp_path / "t.jsonl"
    write_jsonl(path, trajs)
    back = read_jsonl(path)
    assert [t.to_dict() for t in back] == [t.to_dict() for t in trajs]
    record = json.loads(path.read_text().splitlines()[0])
    assert {"task_id", "turns", "finish_reason", "retrieved_doc_ids"} <= set(record)
    assert record["turns"][1]["images"][0]["sha256"] == "0" * 64


def test_iter_jsonl_reports_bad_lines(tmp_path):
    path = tmp_path / "t.jsonl"
    write_jsonl(path, [answered(2)])
    with open(path, "a") as fh:
        fh.write("{not json\n")
        fh.write(json.dumps({"version": 99, "task_id": "x", "turns": []}) + "\n")
    items = list(iter_jsonl(path))
    assert isinstance(items[0][1], Trajectory)
    assert [isinstance(x, Exception) for _, x in items[1:]] == [True, True]
    with pytest.raises(ValueError):
        read_jsonl(path)
