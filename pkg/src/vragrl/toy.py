"""Desk-scale closed loop for the GRPO trainer.

The toy policy picks one of a handful of response templates given a coarse
state of the conversation (how many image observations it holds). Its
responses go through the real rollout engine, retriever and reward engine,
so the only thing that is small is the policy itself. On the planted task the
best behaviour is to search with the planted key and then answer.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .grammar import Answer, Region, Search, render_response
from .grpo import GrpoConfig, GrpoGroup, ToyPolicy, TokenizedTrajectory, grpo_loss
from .perception import EncoderProfile
from .retrieval import SimulatedRetriever, make_planted_corpus
from .reward import POST_SFT, ExactMatchJudge, RewardWeights, score_trajectory
from .rollout import EnvironmentBundle, _assistant_count, derive_seed, rollout, rollout_group
from .trajectory import QueryTask, Role, RolloutConfig, Trajectory

logger = logging.getLogger(__name__)

TEMPLATES = ("search_key", "search_other", "zoom", "answer", "babble")
N_STATES = 3
# The default learning rate targets a large model; a 15-parameter softmax needs a far larger step.
TOY_LEARNING_RATE = 2.0

_ANSWER_RE = re.compile(r"\banswer (\S+)")


@dataclass
class ToyTask:
    task: QueryTask
    env: EnvironmentBundle
    key_query: str
    other_query: str
    zoom_box: tuple[int, int, int, int]
    max_steps: int = 3

    @property
    def rollout_config(self) -> RolloutConfig:
        return RolloutConfig(max_iterations=self.max_steps)

    def render(self, action: int, messages: Sequence[dict]) -> str:
        name = TEMPLATES[action]
        if name == "search_key":
            return render_response("I need the page that records this.", Search(self.key_query))
        if name == "search_other":
            return render_response("Let me look somewhere else.", Search(self.other_query))
        if name == "zoom":
            return render_response("Zoom into the top left.", Region(self.zoom_box))
        if name == "answer":
            return render_response("I can answer from what I have seen.", Answer(self.read_answer(messages)))
        return "I am not sure what to do next."

    def read_answer(self, messages: Sequence[dict]) -> str:
        """Answer printed on the most recently observed page, else 'unknown'."""
        for msg in reversed(messages):
            for ref in reversed(msg.get("images") or ()):
                m = _ANSWER_RE.search(self.env.retriever.document(ref.doc_id).text)
                if m:
                    return m.group(1)
        return "unknown"

    def match(self, text: str, messages: Sequence[dict]) -> int:
        for a in range(len(TEMPLATES)):
            if self.render(a, messages) == text:
                return a
        raise ValueError(f"response is not a toy template: {text!r}")


def toy_state(messages: Sequence[dict]) -> int:
    n_images = sum(1 for m in messages if m["role"] != Role.ASSISTANT.value and m.get("images"))
    return min(n_images, N_STATES - 1)


def make_toy_task(seed: int = 0, n_docs: int = 8, max_steps: int = 3) -> ToyTask:
    corpus, tasks = make_planted_corpus(n_docs=n_docs, n_tasks=1, seed=seed, page_size=(320, 240), corpus_id=f"toy-{seed}")
    task = tasks[0]
    profile = EncoderProfile(max_pixels=224 * 224, patch_multiple=28)
    env = EnvironmentBundle(SimulatedRetriever(corpus, seed=seed), profile=profile)
    distractor = sorted(d for d in corpus.documents if d not in task.golden_doc_ids)[0]
    return ToyTask(
        task=task,
        env=env,
        key_query=task.metadata["oracle_queries"][0],
        other_query=corpus[distractor].text,
        zoom_box=(0, 0, 112, 84),
        max_steps=max_steps,
    )


class ToyAgent:
    """PolicyClient backed by a :class:`ToyPolicy`."""

    def __init__(self, policy: ToyPolicy, toy: ToyTask, greedy: bool = False):
        self.policy = policy
        self.toy = toy
        self.greedy = greedy

    def generate(self, messages: Sequence[dict], *, seed: Optional[int] = None, **decoding) -> str:
        p = self.policy.probs(toy_state(messages))
        if self.greedy:
            action = int(np.argmax(p))
        else:
            action = int(np.random.default_rng(seed).choice(len(p), p=p))
        return self.toy.render(action, messages)


class TemplatePolicy:
    """Plays a fixed sequence of template ids."""

    def __init__(self, toy: ToyTask, actions: Sequence[int]):
        self.toy = toy
        self.actions = list(actions)

    def generate(self, messages: Sequence[dict], *, seed: Optional[int] = None, **decoding) -> str:
        n = _assistant_count(messages)
        return self.toy.render(self.actions[min(n, len(self.actions) - 1)], messages)


def tokenize(trajectory: Trajectory, toy: ToyTask, old: ToyPolicy, ref: ToyPolicy) -> TokenizedTrajectory:
    """One token per turn: template id on assistant turns, -1 on everything else."""
    old_table, ref_table = old.log_probs(), ref.log_probs()
    tokens, mask, states, roles, lp_old, lp_ref = [], [], [], [], [], []
    messages: list[dict] = []
    for turn in trajectory.turns:
        roles.append(turn.role)
        if turn.role is Role.ASSISTANT:
            s = toy_state(messages)
            a = toy.match(turn.text, messages)
            tokens.append(a)
            mask.append(1)
            states.append(s)
            lp_old.append(old_table[s, a])
            lp_ref.append(ref_table[s, a])
        else:
            tokens.append(-1)
            mask.append(0)
            states.append(-1)
            lp_old.append(0.0)
            lp_ref.append(0.0)
        messages.append({"role": turn.role.value, "text": turn.text, "images": turn.images})
    return TokenizedTrajectory(tokens, mask, lp_old, lp_ref, states=states, roles=roles)


def episode_reward(trajectory: Trajectory, toy: ToyTask, weights: RewardWeights = POST_SFT, judge=None) -> float:
    return score_trajectory(trajectory, toy.task, judge or ExactMatchJudge(), weights).r_total


def greedy_reward(policy: ToyPolicy, toy: ToyTask, weights: RewardWeights = POST_SFT) -> float:
    traj = rollout(toy.task, ToyAgent(policy, toy, greedy=True), toy.env, toy.rollout_config)
    return episode_reward(traj, toy, weights)


def enumerate_optimum(toy: ToyTask, weights: RewardWeights = POST_SFT) -> tuple[float, tuple[int, ...]]:
    """Best reward over every template sequence of length <= max_steps.

    Ties go to the shortest sequence.
    """
    best, best_seq = -math.inf, ()
    seen = set()
    answer = TEMPLATES.index("answer")
    for seq in itertools.product(range(len(TEMPLATES)), repeat=toy.max_steps):
        cut = seq[: seq.index(answer) + 1] if answer in seq else seq
        if cut in seen:
            continue
        seen.add(cut)
        traj = rollout(toy.task, TemplatePolicy(toy, cut), toy.env, toy.rollout_config)
        r = episode_reward(traj, toy, weights)
        if r > best or (r == best and len(cut) < len(best_seq)):
            best, best_seq = r, cut
    return best, best_seq


@dataclass
class CurvePoint:
    step: int
    mean_reward: float
    loss: float
    kl: float
    clip_fraction: float
    greedy_reward: float


@dataclass
class TrainResult:
    policy: ToyPolicy
    curve: list[CurvePoint] = field(default_factory=list)
    diverged: bool = False


def train_toy(
    toy: ToyTask,
    policy: ToyPolicy,
    config: GrpoConfig = GrpoConfig(learning_rate=TOY_LEARNING_RATE),
    steps: int = 500,
    seed: int = 0,
    weights: RewardWeights = POST_SFT,
    on_step: Optional[Callable[[CurvePoint], None]] = None,
) -> TrainResult:
    """GRPO on the toy task: one group per update, old policy snapshotted per
    update, reference policy frozen at the starting parameters."""
    ref = policy.copy()
    result = TrainResult(policy)
    judge = ExactMatchJudge()
    for step in range(steps):
        old = policy.copy()
        trajs = rollout_group(
            toy.task, ToyAgent(old, toy), toy.env, toy.rollout_config, config.group_size, derive_seed(seed, step)
        )
        rewards = [episode_reward(t, toy, weights, judge) for t in trajs]
        group = GrpoGroup.build([tokenize(t, toy, old, ref) for t in trajs], rewards, config)
        out = grpo_loss(group, config, policy, ref)
        if not (np.isfinite(out.loss) and np.all(np.isfinite(out.grad))):
            result.diverged = True
            logger.error("non-finite loss at step %d", step)
            break
        policy.params -= config.learning_rate * out.grad
        point = CurvePoint(step, float(np.mean(rewards)), out.loss, out.kl, out.clip_fraction, greedy_reward(policy, toy, weights))
        result.curve.append(point)
        if on_step:
            on_step(point)
    return result


def write_curve(path, curve: Sequence[CurvePoint]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "mean_reward", "loss", "kl", "clip_fraction", "greedy_reward"])
        for p in curve:
            writer.writerow([p.step, repr(p.mean_reward), repr(p.loss), repr(p.kl), repr(p.clip_fraction), repr(p.greedy_reward)])


def read_curve(path) -> list[CurvePoint]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        CurvePoint(int(r["step"]), float(r["mean_reward"]), float(r["loss"]), float(r["kl"]), float(r["clip_fraction"]), float(r["greedy_reward"]))
        for r in rows
    ]
