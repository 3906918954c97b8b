"""Tasks, turns and trajectories shared by every other module.

Trajectories persist as JSON Lines; field names are documented in
``docs/formats.md``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union

from .grammar import Action, Answer, action_from_dict, action_to_dict
from .perception import EncodedView

FORMAT_VERSION = 1


class TrajectoryError(Exception):
    pass


class AppendToFinished(TrajectoryError):
    pass


class EmptyBatch(TrajectoryError):
    pass


class Role(str, Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


class FinishReason(str, Enum):
    ANSWERED = "answered"
    BUDGET_EXHAUSTED = "budget_exhausted"
    FATAL_ERROR = "fatal_error"


@dataclass(frozen=True)
class QueryTask:
    id: str
    question: str
    golden_answer: str
    golden_doc_ids: frozenset = frozenset()
    corpus_id: str = ""
    answer_only: bool = False
    metadata: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if not self.question.strip():
            raise ValueError(f"task {self.id}: empty question")
        object.__setattr__(self, "golden_doc_ids", frozenset(self.golden_doc_ids))
        if not self.golden_doc_ids and not self.answer_only:
            raise ValueError(f"task {self.id}: no golden documents and not flagged answer-only")

    def to_dict(self) -> dict:
        out = {
            "id": self.id,
            "question": self.question,
            "golden_answer": self.golden_answer,
            "golden_doc_ids": sorted(self.golden_doc_ids),
            "corpus_id": self.corpus_id,
            "answer_only": self.answer_only,
        }
        out.update(self.metadata)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "QueryTask":
        known = {"id", "question", "golden_answer", "golden_doc_ids", "corpus_id", "answer_only"}
        return cls(
            id=data["id"],
            question=data["question"],
            golden_answer=data["golden_answer"],
            golden_doc_ids=frozenset(data.get("golden_doc_ids", ())),
            corpus_id=data.get("corpus_id", ""),
            answer_only=data.get("answer_only", False),
            metadata={k: v for k, v in data.items() if k not in known},
        )


@dataclass(frozen=True)
class ImageRef:
    """An image observation: the encoded view plus the hash of its PNG bytes."""

    view: EncodedView
    sha256: str

    @property
    def doc_id(self) -> str:
        return self.view.doc_id

    def to_dict(self) -> dict:
        v = self.view
        return {
            "doc_id": v.doc_id,
            "sha256": self.sha256,
            "size": [v.enc_width, v.enc_height],
            "crop_box": list(v.raw_box),
            "raw_size": [v.raw_width, v.raw_height],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ImageRef":
        x0, y0, x1, y1 = data["crop_box"]
        view = EncodedView(
            data["doc_id"],
            data["size"][0],
            data["size"][1],
            (x0, y0),
            (x1 - x0, y1 - y0),
            data["raw_size"][0],
            data["raw_size"][1],
        )
        return cls(view, data["sha256"])


@dataclass
class Turn:
    role: Role
    text: Optional[str] = None
    images: tuple[ImageRef, ...] = ()
    thought: Optional[str] = None
    action: Optional[Action] = None
    invalid: bool = False
    provenance: Optional[str] = None

    def __post_init__(self):
        self.role = Role(self.role)
        self.images = tuple(self.images)
        if self.action is not None and self.role is not Role.ASSISTANT:
            raise ValueError("only assistant turns carry actions")
        if self.images and self.role is Role.ASSISTANT:
            raise ValueError("images can only appear in user or system turns")

    def to_dict(self) -> dict:
        return {
            "role": self.role.value,
            "text": self.text,
            "images": [im.to_dict() for im in self.images],
            "thought": self.thought,
            "action": action_to_dict(self.action),
            "invalid": self.invalid,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Turn":
        return cls(
            role=Role(data["role"]),
            text=data.get("text"),
            images=tuple(ImageRef.from_dict(d) for d in data.get("images", ())),
            thought=data.get("thought"),
            action=action_from_dict(data.get("action")),
            invalid=data.get("invalid", False),
            provenance=data.get("provenance"),
        )


@dataclass
class Trajectory:
    task_id: str
    turns: list[Turn] = field(default_factory=list)
    finished: bool = False
    finish_reason: Optional[FinishReason] = None
    retrieved_doc_ids: list[str] = field(default_factory=list)
    invalid_action_count: int = 0
    step_count: int = 0
    error: Optional[str] = None

    def append(self, turn: Turn) -> "Trajectory":
        if self.finished:
            raise AppendToFinished(f"trajectory {self.task_id} is finished")
        if turn.role is Role.ASSISTANT:
            if self.turns and self.turns[-1].role is Role.ASSISTANT:
                raise ValueError("two consecutive assistant turns")
            self.step_count += 1
        for image in turn.images:
            if image.doc_id not in self.retrieved_doc_ids:
                self.retrieved_doc_ids.append(image.doc_id)
        self.turns.append(turn)
        return self

    def record_invalid(self) -> None:
        """Mark the latest assistant turn as an invalid action."""
        last = self.last_assistant()
        if last is None:
            raise TrajectoryError("no assistant turn to mark invalid")
        if not last.invalid:
            last.invalid = True
            self.invalid_action_count += 1

    def finish(self, reason: FinishReason, error: Optional[str] = None) -> "Trajectory":
        reason = FinishReason(reason)
        if reason is FinishReason.ANSWERED:
            last = self.last_assistant()
            if last is None or not isinstance(last.action, Answer):
                raise TrajectoryError("answered trajectory must end with an answer action")
        self.finished = True
        self.finish_reason = reason
        self.error = error
        return self

    def last_assistant(self) -> Optional[Turn]:
        for turn in reversed(self.turns):
            if turn.role is Role.ASSISTANT:
                return turn
        return None

    def assistant_turns(self) -> list[Turn]:
        return [t for t in self.turns if t.role is Role.ASSISTANT]

    def image_refs(self) -> list[ImageRef]:
        return [im for t in self.turns if t.role is not Role.ASSISTANT for im in t.images]

    @property
    def final_answer(self) -> Optional[str]:
        if self.finish_reason is FinishReason.ANSWERED:
            return self.last_assistant().action.text
        return None

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "task_id": self.task_id,
            "finished": self.finished,
            "finish_reason": self.finish_reason.value if self.finish_reason else None,
            "step_count": self.step_count,
            "invalid_action_count": self.invalid_action_count,
            "retrieved_doc_ids": list(self.retrieved_doc_ids),
            "error": self.error,
            "turns": [t.to_dict() for t in self.turns],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Trajectory":
        if data.get("version", FORMAT_VERSION) != FORMAT_VERSION:
            raise ValueError(f"unsupported trajectory format version {data.get('version')}")
        reason = data.get("finish_reason")
        traj = cls(
            task_id=data["task_id"],
            turns=[Turn.from_dict(t) for t in data["turns"]],
            finished=data.get("finished", reason is not None),
            finish_reason=FinishReason(reason) if reason else None,
            retrieved_doc_ids=list(data.get("retrieved_doc_ids", ())),
            invalid_action_count=data.get("invalid_action_count", 0),
            error=data.get("error"),
        )
        traj.step_count = sum(1 for t in traj.turns if t.role is Role.ASSISTANT)
        if data.get("step_count", traj.step_count) != traj.step_count:
            raise ValueError("step_count does not match assistant turns")
        return traj


def append_turn(trajectory: Trajectory, turn: Turn) -> Trajectory:
    return trajectory.append(turn)


@dataclass(frozen=True)
class RolloutConfig:
    max_iterations: int = 10
    max_prompt_tokens: int = 8192
    max_response_tokens: int = 2048
    top_k: int = 1
    env_retries: int = 3
    temperature: float = 1.0
    top_p: float = 1.0

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 1 <= self.top_k <= 10:
            raise ValueError("top_k must be within 1..10")


@dataclass(frozen=True)
class Metrics:
    finish_rate: float
    invalid_action_rate: float
    mean_steps: float


def compute_metrics(trajectories: Iterable[Trajectory]) -> Metrics:
    """Finish rate, invalid-action rate and mean steps over a batch.

    Every assistant turn counts as one action attempt.
    """
    trajs = list(trajectories)
    if not trajs:
        raise EmptyBatch("no trajectories")
    answered = sum(1 for t in trajs if t.finish_reason is FinishReason.ANSWERED)
    actions = sum(t.step_count for t in trajs)
    invalid = sum(t.invalid_action_count for t in trajs)
    return Metrics(
        finish_rate=answered / len(trajs),
        invalid_action_rate=invalid / actions if actions else 0.0,
        mean_steps=actions / len(trajs),
    )


def write_jsonl(path: Union[str, Path], trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajectories:
            fh.write(json.dumps(traj.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")


def iter_jsonl(path: Union[str, Path]) -> Iterator[tuple[int, Union[Trajectory, Exception]]]:
    """Yield ``(line_number, trajectory_or_error)`` so callers can skip bad records."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield lineno, Trajectory.from_dict(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                yield lineno, exc


def read_jsonl(path: Union[str, Path]) -> list[Trajectory]:
    out = []
    for lineno, item in iter_jsonl(path):
        if isinstance(item, Exception):
            raise ValueError(f"{path}:{lineno}: {item}") from item
        out.append(item)
    return out
