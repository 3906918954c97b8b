"""Multi-turn interaction loop between a policy and the environment.

Each iteration asks the policy for one response, parses it, and dispatches
the action: a search appends the retrieved pages as a user turn, a region
appends the zoomed crop as a user turn, an answer ends the episode. Responses
that cannot be executed get a corrective user turn and still use up a step.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence, Union

import numpy as np

from .clients import BadCompletion, ChatClient, EndpointUnreachable, ImageStore
from .grammar import Action, Answer, Region, Search, parse_response, render_response
from .perception import EncoderProfile, PerceptionError, apply_region_action, full_view
from .prompts import AGENT_SYSTEM_PROMPT, ENV_ERROR_TEXT, INVALID_ACTION_TEXT, USER_PROMPT
from .retrieval import RetriableEnvironmentError, Retriever
from .trajectory import FinishReason, QueryTask, Role, RolloutConfig, Trajectory, Turn

logger = logging.getLogger(__name__)

CHARS_PER_TOKEN = 4


class PolicyUnreachable(Exception):
    pass


class PolicyClient(Protocol):
    def generate(self, messages: Sequence[dict], *, seed: Optional[int] = None, **decoding) -> str: ...


@dataclass
class EnvironmentBundle:
    retriever: Retriever
    profile: EncoderProfile = field(default_factory=EncoderProfile)
    system_prompt: str = AGENT_SYSTEM_PROMPT
    store: ImageStore = field(default_factory=ImageStore)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


def initial_trajectory(task: QueryTask, env: EnvironmentBundle) -> Trajectory:
    traj = Trajectory(task_id=task.id)
    traj.append(Turn(Role.SYSTEM, text=env.system_prompt))
    traj.append(Turn(Role.USER, text=USER_PROMPT.format(query=task.question)))
    return traj


def build_messages(trajectory: Trajectory) -> list[dict]:
    return [{"role": t.role.value, "text": t.text, "images": t.images} for t in trajectory.turns]


def estimate_tokens(messages: Sequence[dict], patch: int = 28) -> int:
    total = 0
    for msg in messages:
        total += len(msg.get("text") or "") // CHARS_PER_TOKEN
        for ref in msg.get("images") or ():
            total += (ref.view.enc_width * ref.view.enc_height) // (patch * patch)
    return total


def _search_turn(action: Search, env: EnvironmentBundle, config: RolloutConfig) -> Turn:
    last = None
    for _ in range(max(1, config.env_retries)):
        try:
            result = env.retriever.search(action.query, config.top_k)
            refs = []
            for doc_id in result.doc_ids:
                doc = env.retriever.document(doc_id)
                refs.append(env.store.add_view(doc, full_view(doc, env.profile)))
            if not refs:
                return Turn(Role.USER, text="No results.")
            return Turn(Role.USER, images=tuple(refs))
        except RetriableEnvironmentError as exc:
            last = exc
            logger.warning("search failed: %s", exc)
    return Turn(Role.USER, text=ENV_ERROR_TEXT.format(reason=type(last).__name__))


def execute_action(trajectory: Trajectory, action: Action, env: EnvironmentBundle, config: RolloutConfig) -> Turn:
    """Observation turn for a search or region action.

    Raises :class:`PerceptionError` when a region cannot be applied.
    """
    if isinstance(action, Search):
        return _search_turn(action, env, config)
    if isinstance(action, Region):
        views = [ref.view for ref in trajectory.image_refs()]
        view = apply_region_action(action, views, env.retriever.document, env.profile)
        ref = env.store.add_view(env.retriever.document(view.doc_id), view)
        return Turn(Role.USER, images=(ref,))
    raise TypeError(f"cannot execute {action!r}")


def _invalid(trajectory: Trajectory, reason: str) -> None:
    trajectory.record_invalid()
    trajectory.append(Turn(Role.USER, text=INVALID_ACTION_TEXT.format(reason=reason)))


def rollout(
    task: QueryTask,
    policy: PolicyClient,
    env: EnvironmentBundle,
    config: RolloutConfig = RolloutConfig(),
    seed: int = 0,
) -> Trajectory:
    traj = initial_trajectory(task, env)
    for t in range(config.max_iterations):
        messages = build_messages(traj)
        if estimate_tokens(messages, env.profile.patch_multiple) > config.max_prompt_tokens:
            logger.info("%s: prompt budget exceeded at step %d", task.id, t)
            break
        try:
            raw = policy.generate(
                messages,
                seed=derive_seed(seed, t),
                temperature=config.temperature,
                top_p=config.top_p,
                max_tokens=config.max_response_tokens,
            )
        except PolicyUnreachable as exc:
            return traj.finish(FinishReason.FATAL_ERROR, str(exc))
        raw = raw[: config.max_response_tokens * CHARS_PER_TOKEN]
        parsed = parse_response(raw)
        traj.append(Turn(Role.ASSISTANT, text=raw, thought=parsed.thought, action=parsed.action))

        if parsed.action is None:
            _invalid(traj, ", ".join(v.value for v in parsed.violations))
            continue
        if isinstance(parsed.action, Answer):
            return traj.finish(FinishReason.ANSWERED)
        try:
            obs = execute_action(traj, parsed.action, env, config)
        except PerceptionError as exc:
            _invalid(traj, type(exc).__name__)
            continue
        traj.append(obs)
    return traj.finish(FinishReason.BUDGET_EXHAUSTED)


def rollout_group(
    task: QueryTask,
    policy: PolicyClient,
    env: EnvironmentBundle,
    config: RolloutConfig = RolloutConfig(),
    group_size: int = 5,
    seed: int = 0,
    workers: int = 1,
) -> list[Trajectory]:
    """``group_size`` independent rollouts with distinct derived seeds, in slot order.

    A slot that blows up comes back as a FatalError trajectory.
    """
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    seeds = [derive_seed(seed, i) for i in range(group_size)]

    def slot(s):
        try:
            return rollout(task, policy, env, config, s)
        except Exception as exc:  # one failing slot must not take down its siblings
            logger.exception("rollout slot failed")
            traj = initial_trajectory(task, env)
            return traj.finish(FinishReason.FATAL_ERROR, f"{type(exc).__name__}: {exc}")

    if workers <= 1:
        return [slot(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(slot, seeds))


# --- policies -------------------------------------------------------------------


def _assistant_count(messages: Sequence[dict]) -> int:
    return sum(1 for m in messages if m["role"] == Role.ASSISTANT.value)


class ScriptedPolicy:
    """Plays a fixed list of responses (raw strings or actions), one per turn.

    Once the script runs out the last entry repeats.
    """

    def __init__(self, steps: Sequence[Union[str, Action]], thought: str = "Following the plan."):
        if not steps:
            raise ValueError("empty script")
        self.steps = [s if isinstance(s, str) else render_response(thought, s) for s in steps]

    def generate(self, messages: Sequence[dict], *, seed: Optional[int] = None, **decoding) -> str:
        n = _assistant_count(messages)
        return self.steps[min(n, len(self.steps) - 1)]


class OraclePolicy:
    """Knows each task's planted oracle queries and golden answer."""

    def __init__(self, tasks: Sequence[QueryTask]):
        self.by_prompt = {USER_PROMPT.format(query=t.question): t for t in tasks}

    def plan(self, task: QueryTask) -> list[Action]:
        queries = task.metadata.get("oracle_queries") or [task.question]
        return [Search(q) for q in queries] + [Answer(task.golden_answer)]

    def generate(self, messages: Sequence[dict], *, seed: Optional[int] = None, **decoding) -> str:
        prompt = next(m["text"] for m in messages if m["role"] == Role.USER.value)
        task = self.by_prompt[prompt]
        plan = self.plan(task)
        n = _assistant_count(messages)
        step = plan[min(n, len(plan) - 1)]
        thought = "I should look this up." if isinstance(step, Search) else "The page gives the answer."
        return render_response(thought, step)


class ChatPolicy:
    """Policy served by a chat-completion endpoint."""

    def __init__(self, client: ChatClient):
        self.client = client

    def generate(self, messages: Sequence[dict], *, seed: Optional[int] = None, **decoding) -> str:
        try:
            return self.client.complete(messages, seed=seed, **decoding)
        except (EndpointUnreachable, BadCompletion) as exc:
            raise PolicyUnreachable(str(exc)) from exc

    def identity(self) -> str:
        return self.client.identity()
