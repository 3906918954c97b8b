"""Terminal reward for a finished trajectory.

Three components are combined linearly:

* retrieval reward: NDCG of the order in which golden pages were retrieved,
* outcome reward: binary verdict of a judge model on the final answer,
* pattern reward: share of assistant turns that follow the tag format,
  zeroed when the trajectory never answers.
"""

from __future__ import annotations

import logging
import math
import re
import string
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .clients import BadCompletion, ChatModel, EndpointUnreachable
from .grammar import parse_response
from .prompts import judge_messages
from .retrieval import relevance_labels
from .trajectory import FinishReason, QueryTask, Trajectory

logger = logging.getLogger(__name__)

NO_GOLDEN = "NoGolden"
JUDGE_UNPARSEABLE = "JudgeUnparseable"
NO_ANSWER = "NoAnswer"
JUDGE_SKIPPED = "JudgeSkipped"


class InvalidWeights(ValueError):
    pass


class JudgeUnreachable(Exception):
    """The judge endpoint is down; retry the batch later."""


@dataclass(frozen=True)
class RewardWeights:
    alpha: float
    beta: float
    gamma: float

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise InvalidWeights(f"negative weight in {self}")
        if abs(self.alpha + self.beta + self.gamma - 1.0) > 1e-9:
            raise InvalidWeights(f"weights sum to {self.alpha + self.beta + self.gamma}, expected 1")


POST_SFT = RewardWeights(alpha=0.3, beta=0.7, gamma=0.0)
COLD_START = RewardWeights(alpha=0.45, beta=0.45, gamma=0.1)
PROFILES = {"post-sft": POST_SFT, "cold-start": COLD_START}


@dataclass(frozen=True)
class RewardBreakdown:
    r_ret: float
    r_ans: Optional[float]
    r_pat: float
    r_total: Optional[float]
    flags: frozenset = frozenset()
    judge_transcript: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "r_ret": self.r_ret,
            "r_ans": self.r_ans,
            "r_pat": self.r_pat,
            "r_total": self.r_total,
            "flags": sorted(self.flags),
        }


def dcg(labels: Iterable[int]) -> float:
    return sum((2.0 ** s - 1.0) / math.log2(i + 1) for i, s in enumerate(labels, start=1))


def idcg(n_rel: int) -> float:
    if n_rel < 0:
        raise ValueError("n_rel must be >= 0")
    return sum(1.0 / math.log2(i + 1) for i in range(1, n_rel + 1))


def retrieval_reward(retrieved: Sequence[str], golden: Iterable[str]) -> float:
    """NDCG of ``retrieved`` against the golden set; 0.0 when there is no golden set."""
    golden = set(golden)
    if not golden:
        return 0.0
    return dcg(relevance_labels(retrieved, golden)) / idcg(len(golden))


def pattern_reward(trajectory: Trajectory) -> float:
    turns = trajectory.assistant_turns()
    if not turns or trajectory.finish_reason is not FinishReason.ANSWERED:
        return 0.0
    valid = sum(1 for t in turns if parse_response(t.text or "").pattern_valid)
    return valid / len(turns)


_JUDGE_RE = re.compile(r"<judge>\s*(true|false)\s*</judge>", re.IGNORECASE)


def parse_judge(text: str) -> Optional[bool]:
    m = _JUDGE_RE.search(text or "")
    if m is None:
        return None
    return m.group(1).lower() == "true"


@dataclass(frozen=True)
class Verdict:
    score: float
    flags: frozenset = frozenset()
    transcript: Optional[str] = None


def judge_answer(task: QueryTask, predicted: Optional[str], judge: ChatModel, attempts: int = 3) -> Verdict:
    """Ask the judge whether ``predicted`` matches the reference answer.

    Unparseable replies are retried; ``attempts`` counts every judge call.
    """
    if predicted is None:
        return Verdict(0.0, frozenset({NO_ANSWER}))
    messages = judge_messages(task.question, task.golden_answer, predicted)
    replies = []
    for _ in range(attempts):
        try:
            reply = judge.complete(messages, temperature=0.0)
        except EndpointUnreachable as exc:
            raise JudgeUnreachable(str(exc)) from exc
        except BadCompletion as exc:
            reply = f"<bad completion: {exc}>"
        replies.append(reply)
        verdict = parse_judge(reply)
        if verdict is not None:
            return Verdict(1.0 if verdict else 0.0, frozenset(), reply)
    return Verdict(0.0, frozenset({JUDGE_UNPARSEABLE}), "\n---\n".join(replies))


def outcome_reward(task: QueryTask, predicted: Optional[str], judge: ChatModel, attempts: int = 3) -> float:
    return judge_answer(task, predicted, judge, attempts).score


def combine(
    r_ret: float,
    r_ans: Optional[float],
    r_pat: float,
    weights: RewardWeights,
    flags: Iterable[str] = (),
    judge_transcript: Optional[str] = None,
) -> RewardBreakdown:
    if not isinstance(weights, RewardWeights):
        raise InvalidWeights(f"not a RewardWeights: {weights!r}")
    total = None
    if r_ans is not None:
        total = weights.alpha * r_ret + weights.beta * r_ans + weights.gamma * r_pat
    return RewardBreakdown(r_ret, r_ans, r_pat, total, frozenset(flags), judge_transcript)


def score_trajectory(
    trajectory: Trajectory,
    task: QueryTask,
    judge: Optional[ChatModel],
    weights: RewardWeights = POST_SFT,
    judge_attempts: int = 3,
) -> RewardBreakdown:
    """Full breakdown; with ``judge=None`` the outcome and total are left empty."""
    flags = set()
    if not task.golden_doc_ids:
        flags.add(NO_GOLDEN)
    r_ret = retrieval_reward(trajectory.retrieved_doc_ids, task.golden_doc_ids)
    r_pat = pattern_reward(trajectory)
    if judge is None:
        flags.add(JUDGE_SKIPPED)
        return combine(r_ret, None, r_pat, weights, flags)
    verdict = judge_answer(task, trajectory.final_answer, judge, judge_attempts)
    return combine(r_ret, verdict.score, r_pat, weights, flags | verdict.flags, verdict.transcript)


def score_batch(
    trajectories: Sequence[Trajectory],
    tasks: dict[str, QueryTask],
    judge: Optional[ChatModel],
    weights: RewardWeights = POST_SFT,
    workers: int = 4,
    judge_attempts: int = 3,
) -> list[RewardBreakdown]:
    """Score in parallel; output order follows ``trajectories``."""

    def one(traj):
        return score_trajectory(traj, tasks[traj.task_id], judge, weights, judge_attempts)

    if workers <= 1 or len(trajectories) <= 1:
        return [one(t) for t in trajectories]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, trajectories))


_PUNCT = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> list[str]:
    return text.lower().translate(_PUNCT).split()


class ExactMatchJudge:
    """Local stand-in for a judge model: True when the reference tokens appear
    as a contiguous run inside the generated answer."""

    _REF = re.compile(r"^Reference Answer: (.*)$", re.MULTILINE)
    _GEN = re.compile(r"^Generated Answer: (.*)$", re.MULTILINE)

    def complete(self, messages: Sequence[dict], **params) -> str:
        user = messages[-1]["text"]
        ref = normalize_answer(self._REF.search(user).group(1))
        gen = normalize_answer(self._GEN.search(user).group(1))
        n = len(ref)
        hit = n > 0 and any(gen[i : i + n] == ref for i in range(len(gen) - n + 1))
        return f"<judge>{hit}</judge>"

    def identity(self) -> str:
        return "local:exact-match"


class StaticJudge:
    """Always replies with the same text."""

    def __init__(self, reply: str = "<judge>True</judge>"):
        self.reply = reply
        self.calls = 0

    def complete(self, messages: Sequence[dict], **params) -> str:
        self.calls += 1
        return self.reply

    def identity(self) -> str:
        return f"static:{self.reply}"
