"""Trajectory synthesis with a guide model and a grounding expert.

A large guide model writes each thought and action from the history so far.
When it asks for a region, a grounding model is shown the image together with
the guide's thought and its box replaces the guide's. Finished trajectories
are kept only when they answer correctly in clean format, and are balanced
over step counts and action mixes before export.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

from .clients import BadCompletion, ChatModel, EndpointUnreachable
from .grammar import Answer, Region, Search, parse_bbox, parse_response, render_response
from .perception import PerceptionError, map_region_to_raw, resolve_target
from .prompts import GROUNDING_PROMPT, INVALID_ACTION_TEXT
from .reward import POST_SFT, RewardWeights, score_trajectory
from .rollout import EnvironmentBundle, build_messages, derive_seed, execute_action, initial_trajectory
from .trajectory import FinishReason, QueryTask, Role, RolloutConfig, Trajectory, Turn, write_jsonl

logger = logging.getLogger(__name__)

MIN_STEPS, MAX_STEPS = 2, 6
GUIDE, EXPERT = "guide", "expert"


class GuideUnparseable(Exception):
    pass


class GroundingDegenerate(Exception):
    pass


class InvalidTargets(ValueError):
    pass


class BudgetExhausted(Exception):
    """Ran out of attempts before every bucket was filled; ``manifest`` holds what was kept."""

    def __init__(self, message: str, manifest: "DatasetManifest"):
        super().__init__(message)
        self.manifest = manifest


@dataclass
class ExpertClients:
    guide: ChatModel
    grounder: ChatModel


def _kind(action) -> str:
    return {Search: "search", Region: "region", Answer: "answer"}[type(action)]


def action_mix(trajectory: Trajectory) -> str:
    """Canonical multiset of action kinds, e.g. ``answer=1,search=2``."""
    counts = Counter(_kind(t.action) for t in trajectory.assistant_turns() if t.action is not None)
    return ",".join(f"{k}={counts[k]}" for k in sorted(counts))


def _bucket_key(bucket) -> str:
    if isinstance(bucket, tuple):
        return f"{bucket[0]}|{bucket[1]}"
    return str(bucket)


def _parse_bucket(key) -> Union[int, tuple[int, str]]:
    if isinstance(key, (int, tuple)):
        return key
    steps, _, mix = str(key).partition("|")
    return (int(steps), mix) if mix else int(steps)


def validate_targets(targets: dict, count: Optional[int] = None) -> dict:
    """Targets map a step count (2..6), or a ``(steps, mix)`` pair, to a number of trajectories."""
    out = {}
    for key, n in targets.items():
        bucket = _parse_bucket(key)
        steps = bucket[0] if isinstance(bucket, tuple) else bucket
        if not MIN_STEPS <= steps <= MAX_STEPS:
            raise InvalidTargets(f"step bucket {steps} outside {MIN_STEPS}..{MAX_STEPS}")
        if int(n) < 0:
            raise InvalidTargets(f"negative target for bucket {key}")
        out[bucket] = int(n)
    if count is not None and sum(out.values()) != count:
        raise InvalidTargets(f"targets sum to {sum(out.values())}, requested {count}")
    return out


@dataclass
class DatasetManifest:
    targets: dict
    records: list[dict] = field(default_factory=list)
    attempts: int = 0
    rejected: Counter = field(default_factory=Counter)

    def achieved(self) -> dict:
        counts = Counter()
        for rec in self.records:
            counts[rec["bucket"]] += 1
        return {_bucket_key(b): counts[_bucket_key(b)] for b in self.targets}

    def histogram(self) -> dict:
        """Exported trajectories per (steps, action mix)."""
        counts = Counter((rec["step_count"], rec["action_mix"]) for rec in self.records)
        return {f"{s}|{m}": n for (s, m), n in sorted(counts.items())}

    def complete(self) -> bool:
        got = self.achieved()
        return all(got[_bucket_key(b)] >= n for b, n in self.targets.items())

    def to_dict(self) -> dict:
        return {
            "targets": {_bucket_key(b): n for b, n in self.targets.items()},
            "achieved": self.achieved(),
            "histogram": self.histogram(),
            "attempts": self.attempts,
            "rejected": dict(sorted(self.rejected.items())),
            "records": self.records,
        }


def _valid_guide_reply(text: str, trajectory: Trajectory):
    parsed = parse_response(text)
    if parsed.action is None or not parsed.pattern_valid:
        return None, ", ".join(v.value for v in parsed.violations) or "no action"
    if isinstance(parsed.action, Region) and not trajectory.image_refs():
        return None, "NoImageInContext"
    return parsed, None


def guide_step(trajectory: Trajectory, guide: ChatModel, seed: Optional[int] = None) -> tuple[str, object]:
    """Ask the guide for the next thought and action, re-prompting once on a bad reply."""
    messages = build_messages(trajectory)
    reply = guide.complete(messages, seed=seed)
    parsed, reason = _valid_guide_reply(reply, trajectory)
    if parsed is None:
        retry = messages + [
            {"role": Role.ASSISTANT.value, "text": reply, "images": ()},
            {"role": Role.USER.value, "text": INVALID_ACTION_TEXT.format(reason=reason), "images": ()},
        ]
        reply = guide.complete(retry, seed=seed)
        parsed, reason = _valid_guide_reply(reply, trajectory)
        if parsed is None:
            raise GuideUnparseable(reason)
    return parsed.thought, parsed.action


_BOX_RE = re.compile(r"<(bbox|region)>(.*?)</\1>", re.DOTALL)


def reground_region(trajectory: Trajectory, thought: str, action, grounder: ChatModel, env: EnvironmentBundle):
    """Swap the guide's box for the grounding expert's; other actions pass through."""
    if not isinstance(action, Region):
        return action
    try:
        refs = trajectory.image_refs()
        view = resolve_target([r.view for r in refs], action.target_index)
    except PerceptionError as exc:
        raise GroundingDegenerate(str(exc)) from exc
    ref = refs[action.target_index - 1] if action.target_index else refs[-1]
    messages = [{"role": Role.USER.value, "text": GROUNDING_PROMPT.format(thought=thought), "images": (ref,)}]
    reply = grounder.complete(messages, temperature=0.0)
    m = _BOX_RE.search(reply or "")
    box = None
    if m:
        box, _, _ = parse_bbox(m.group(2))
    if box is None:
        raise GroundingDegenerate(f"no usable box in grounding reply {reply[:80]!r}")
    try:
        new = Region(box, action.target_index)
        map_region_to_raw(new.bbox, view, env.retriever.document(view.doc_id), env.profile.clamp_tolerance)
    except (ValueError, PerceptionError) as exc:
        raise GroundingDegenerate(str(exc)) from exc
    return new


def synthesize_trajectory(
    task: QueryTask,
    clients: ExpertClients,
    env: EnvironmentBundle,
    max_steps: int = MAX_STEPS,
    seed: int = 0,
) -> Trajectory:
    """One guided episode. Raises GuideUnparseable / GroundingDegenerate /
    PerceptionError when a step has to be discarded."""
    traj = initial_trajectory(task, env)
    for t in range(max_steps):
        thought, action = guide_step(traj, clients.guide, seed=derive_seed(seed, t))
        provenance = GUIDE
        if isinstance(action, Region):
            action = reground_region(traj, thought, action, clients.grounder, env)
            provenance = EXPERT
        traj.append(Turn(Role.ASSISTANT, text=render_response(thought, action), thought=thought, action=action, provenance=provenance))
        if isinstance(action, Answer):
            return traj.finish(FinishReason.ANSWERED)
        traj.append(execute_action(traj, action, env, RolloutConfig()))
    return traj.finish(FinishReason.BUDGET_EXHAUSTED)


def _bucket_for(traj: Trajectory, need: dict):
    for bucket, n in need.items():
        if n <= 0:
            continue
        if isinstance(bucket, tuple):
            if bucket == (traj.step_count, action_mix(traj)):
                return bucket
        elif bucket == traj.step_count:
            return bucket
    return None


def synthesize_dataset(
    tasks: Sequence[QueryTask],
    clients: ExpertClients,
    env: EnvironmentBundle,
    targets: dict,
    judge: ChatModel,
    out_dir: Optional[Union[str, Path]] = None,
    max_attempts: Optional[int] = None,
    count: Optional[int] = None,
    weights: RewardWeights = POST_SFT,
    seed: int = 0,
    workers: int = 1,
) -> tuple[DatasetManifest, list[Trajectory]]:
    """Rejection-sample guided trajectories until every target bucket is full.

    A candidate is kept only if it answered, every assistant turn is well
    formed and the judge accepts the answer. Tasks are visited round-robin.
    ``max_attempts`` defaults to ten candidates per requested trajectory.
    """
    if not tasks:
        raise ValueError("no tasks")
    targets = validate_targets(targets, count)
    total = sum(targets.values())
    max_attempts = max_attempts if max_attempts is not None else 10 * max(total, 1)
    manifest = DatasetManifest(targets)
    need = dict(targets)
    kept: list[Trajectory] = []

    def candidate(i: int):
        task = tasks[i % len(tasks)]
        try:
            traj = synthesize_trajectory(task, clients, env, seed=derive_seed(seed, i))
        except GuideUnparseable:
            return task, None, "GuideUnparseable"
        except GroundingDegenerate:
            return task, None, "GroundingDegenerate"
        except PerceptionError as exc:
            return task, None, type(exc).__name__
        except (EndpointUnreachable, BadCompletion):
            raise
        if traj.finish_reason is not FinishReason.ANSWERED:
            return task, None, "NotAnswered"
        breakdown = score_trajectory(traj, task, judge, weights)
        if breakdown.r_pat != 1.0:
            return task, None, "PatternInvalid"
        if breakdown.r_ans != 1.0:
            return task, None, "WrongAnswer"
        return task, traj, None

    attempt = 0
    chunk = max(1, workers)
    with ThreadPoolExecutor(max_workers=chunk) as pool:
        while attempt < max_attempts and any(n > 0 for n in need.values()):
            batch = range(attempt, min(attempt + chunk, max_attempts))
            for i, (task, traj, reason) in zip(batch, pool.map(candidate, batch)):
                manifest.attempts += 1
                if reason is None:
                    bucket = _bucket_for(traj, need)
                    if bucket is None:
                        reason = "BucketFull"
                    else:
                        need[bucket] -= 1
                        kept.append(traj)
                        manifest.records.append(
                            {
                                "index": len(kept) - 1,
                                "task_id": task.id,
                                "step_count": traj.step_count,
                                "action_mix": action_mix(traj),
                                "bucket": _bucket_key(bucket),
                            }
                        )
                if reason is not None:
                    manifest.rejected[reason] += 1
            attempt = batch.stop

    if out_dir is not None:
        write_dataset(out_dir, manifest, kept)
    if not manifest.complete():
        raise BudgetExhausted(
            f"{manifest.attempts} attempts, kept {len(kept)} of {total}: {manifest.achieved()}", manifest
        )
    return manifest, kept


def write_dataset(out_dir: Union[str, Path], manifest: DatasetManifest, trajectories: Sequence[Trajectory]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "trajectories.jsonl", trajectories)
    (out / "dataset_manifest.json").write_text(json.dumps(manifest.to_dict(), indent=1, sort_keys=True))


def to_sft_record(trajectory: Trajectory, image_prefix: str = "images/") -> dict:
    """Chat-style fine-tuning record; images are referenced by content hash."""
    messages = []
    for turn in trajectory.turns:
        if turn.images:
            content = [{"type": "image", "image": f"{image_prefix}{im.sha256}.png"} for im in turn.images]
            if turn.text:
                content.append({"type": "text", "text": turn.text})
        else:
            content = turn.text or ""
        messages.append({"role": turn.role.value, "content": content})
    return {"task_id": trajectory.task_id, "messages": messages}
