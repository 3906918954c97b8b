"""Tagged action language emitted by the policy.

A policy turn is free text containing one ``<think>`` span and exactly one
action tag. The grammar is documented in ``docs/grammar.md``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union


class Violation(str, Enum):
    MISSING_THINK = "MissingThink"
    NO_ACTION = "NoAction"
    MULTIPLE_ACTIONS = "MultipleActions"
    UNCLOSED_TAG = "UnclosedTag"
    BAD_BBOX = "BadBboxPayload"
    DEGENERATE_BBOX = "DegenerateBbox"
    EMPTY_QUERY = "EmptyQuery"
    EMPTY_ANSWER = "EmptyAnswer"


@dataclass(frozen=True)
class Search:
    query: str

    def __post_init__(self):
        if not self.query.strip():
            raise ValueError("search query must be non-empty")


@dataclass(frozen=True)
class Region:
    """A crop request. ``target_index`` is 1-based over image observations."""

    bbox: tuple[int, int, int, int]
    target_index: Optional[int] = None

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if min(self.bbox) < 0 or x0 >= x1 or y0 >= y1:
            raise ValueError(f"degenerate bbox {self.bbox}")
        if self.target_index is not None and self.target_index < 1:
            raise ValueError("target_index is 1-based")
        object.__setattr__(self, "bbox", tuple(int(v) for v in self.bbox))


@dataclass(frozen=True)
class Answer:
    text: str


Action = Union[Search, Region, Answer]


@dataclass
class ParsedResponse:
    thought: Optional[str] = None
    action: Optional[Action] = None
    violations: list[Violation] = field(default_factory=list)

    @property
    def pattern_valid(self) -> bool:
        return not self.violations


ACTION_TAGS = ("search", "region", "bbox", "answer")
ALL_TAGS = ("think",) + ACTION_TAGS

_SPAN_RE = re.compile(r"<(think|search|region|bbox|answer)>(.*?)</\1>", re.DOTALL | re.IGNORECASE)
_THINK_RE = re.compile(r"<think>(.*?)</think>", re.DOTALL | re.IGNORECASE)
_OPEN_RE = re.compile(r"<(think|search|region|bbox|answer)>", re.IGNORECASE)
_CLOSE_RE = re.compile(r"</(think|search|region|bbox|answer)>", re.IGNORECASE)
_BBOX_RE = re.compile(
    r"^\s*(?:image\s*(\d+)\s*:)?\s*\[?\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*\]?\s*$",
    re.IGNORECASE,
)


def _unclosed(text: str) -> bool:
    opens: dict[str, int] = {}
    closes: dict[str, int] = {}
    for m in _OPEN_RE.finditer(text):
        opens[m.group(1).lower()] = opens.get(m.group(1).lower(), 0) + 1
    for m in _CLOSE_RE.finditer(text):
        closes[m.group(1).lower()] = closes.get(m.group(1).lower(), 0) + 1
    return any(opens.get(t, 0) != closes.get(t, 0) for t in ALL_TAGS)


def parse_bbox(payload: str) -> tuple[Optional[tuple[int, int, int, int]], Optional[int], Optional[Violation]]:
    m = _BBOX_RE.match(payload)
    if not m:
        return None, None, Violation.BAD_BBOX
    target = int(m.group(1)) if m.group(1) is not None else None
    box = tuple(int(m.group(i)) for i in range(2, 6))
    if target is not None and target < 1:
        return None, None, Violation.BAD_BBOX
    if box[0] >= box[2] or box[1] >= box[3]:
        return None, None, Violation.DEGENERATE_BBOX
    return box, target, None


def parse_response(raw_text: str) -> ParsedResponse:
    """Parse one assistant turn. Never raises; failures become violations.

    Action tags inside the think span are treated as part of the thought.
    """
    text = raw_text or ""
    out = ParsedResponse()

    think = _THINK_RE.search(text)
    if think:
        out.thought = think.group(1).strip()
    else:
        out.violations.append(Violation.MISSING_THINK)

    if _unclosed(text):
        out.violations.append(Violation.UNCLOSED_TAG)

    outside = _THINK_RE.sub(" ", text)
    spans = [(m.group(1).lower(), m.group(2)) for m in _SPAN_RE.finditer(outside) if m.group(1).lower() != "think"]
    opened = [m.group(1).lower() for m in _OPEN_RE.finditer(outside) if m.group(1).lower() != "think"]

    if len(spans) > 1 or len(opened) > 1:
        out.violations.append(Violation.MULTIPLE_ACTIONS)
        return out
    if not spans:
        if not opened:
            out.violations.append(Violation.NO_ACTION)
        return out

    tag, payload = spans[0]
    if tag == "search":
        query = payload.strip()
        if not query:
            out.violations.append(Violation.EMPTY_QUERY)
        else:
            out.action = Search(query)
    elif tag == "answer":
        answer = payload.strip()
        if not answer:
            out.violations.append(Violation.EMPTY_ANSWER)
        else:
            out.action = Answer(answer)
    else:
        box, target, problem = parse_bbox(payload)
        if problem is not None:
            out.violations.append(problem)
        else:
            out.action = Region(box, target)
    return out


def render_action(action: Action) -> str:
    if isinstance(action, Search):
        return f"<search>{action.query}</search>"
    if isinstance(action, Answer):
        return f"<answer>{action.text}</answer>"
    if isinstance(action, Region):
        coords = ", ".join(str(v) for v in action.bbox)
        prefix = f"image {action.target_index}: " if action.target_index is not None else ""
        return f"<region>{prefix}[{coords}]</region>"
    raise TypeError(f"not an action: {action!r}")


def render_response(thought: str, action: Action) -> str:
    return f"<think>{thought}</think>{render_action(action)}"


def action_to_dict(action: Optional[Action]) -> Optional[dict]:
    if action is None:
        return None
    if isinstance(action, Search):
        return {"type": "search", "query": action.query}
    if isinstance(action, Answer):
        return {"type": "answer", "text": action.text}
    return {"type": "region", "bbox": list(action.bbox), "target_index": action.target_index}


def action_from_dict(data: Optional[dict]) -> Optional[Action]:
    if data is None:
        return None
    kind = data["type"]
    if kind == "search":
        return Search(data["query"])
    if kind == "answer":
        return Answer(data["text"])
    if kind == "region":
        return Region(tuple(data["bbox"]), data.get("target_index"))
    raise ValueError(f"unknown action type {kind!r}")
