"""Transcript parsing and verifiable reward scoring.

Agent responses follow the two-tag transcript convention::

    <think> reasoning, including "(1) User_status: ..." </think>
    <answer> the final answer, e.g. "(2) Next_video: 3" or "Yes" </answer>

``parse_response`` decomposes any text into the tag spans and a legal action;
the reward functions score format compliance and task correctness from finite
score tables, and ``total_reward`` composes them. All functions are pure and
never raise on arbitrary input text.

Score tables:

- format: 1 (both tags, correct order), 0.5 (both tags, wrong order),
  0 (exactly one tag), -1 (no tags / empty input)
- judgment: +1 on a correct Yes/No, -1 on mismatch or no parseable action
- selection: +2 on the correct candidate, -1.5 on a wrong candidate,
  -2 when no candidate can be parsed
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass

from .core import Judgment, Selection, TaskKind

_THINK_RE = re.compile(r"<think>(.*?)</think>", re.IGNORECASE | re.DOTALL)
_ANSWER_RE = re.compile(r"<answer>(.*?)</answer>", re.IGNORECASE | re.DOTALL)
_USER_STATUS_RE = re.compile(r"User_status\s*:?\s*(.*)", re.IGNORECASE | re.DOTALL)
_YES_NO_RE = re.compile(r"\b(yes|no)\b", re.IGNORECASE)
_ENUM_PREFIX_RE = re.compile(r"^\s*\(\d+\)\s*")
_NEXT_VIDEO_RE = re.compile(r"next[_\s]?video\s*:?", re.IGNORECASE)
_INT_RE = re.compile(r"[-+]?\d+")


class Verdict(enum.Enum):
    """Judgment-task actions."""

    YES = "yes"
    NO = "no"


@dataclass(frozen=True)
class Select:
    """Selection-task action: a 1-based candidate index."""

    index: int


Action = Verdict | Select


@dataclass(frozen=True)
class ParsedResponse:
    """Structured decomposition of one agent transcript."""

    think_text: str | None
    answer_text: str | None
    user_status: str | None
    tag_order_ok: bool
    action: Action | None


@dataclass(frozen=True)
class RewardBreakdown:
    """Format + task reward components; total is always their exact sum."""

    r_format: float
    r_task: float

    @property
    def total(self) -> float:
        return self.r_format + self.r_task


def _parse_judgment_action(answer: str) -> Verdict | None:
    match = _YES_NO_RE.search(answer)
    if match is None:
        return None
    return Verdict.YES if match.group(1).lower() == "yes" else Verdict.NO


def _parse_selection_action(answer: str, task: Selection) -> Select | None:
    # The "(2)" in the response template is a list marker, not the answer.
    body = _ENUM_PREFIX_RE.sub("", answer)
    marker = _NEXT_VIDEO_RE.search(body)
    if marker is not None:
        body = body[marker.end():]
    size = task.candidates.size
    int_match = _INT_RE.search(body)
    if int_match is not None:
        index = int(int_match.group(0))
        return Select(index) if 1 <= index <= size else None
    # No integer: fall back to an exact candidate-text match.
    needle = body.strip().casefold()
    if not needle:
        return None
    if task.captions is not None:
        for pos, caption in enumerate(task.captions, start=1):
            if caption.strip().casefold() == needle:
                return Select(pos)
    for pos, item_id in enumerate(task.candidates.presentation_order, start=1):
        if item_id.casefold() == needle:
            return Select(pos)
    return None


def parse_response(raw: str, task: TaskKind) -> ParsedResponse:
    """Parse an arbitrary transcript into tag spans and a legal action.

    Deterministic: only the first occurrence of each tag is honored. Content
    that yields no legal action parses to ``action=None`` rather than raising.
    """
    think = _THINK_RE.search(raw)
    answer = _ANSWER_RE.search(raw)
    think_text = think.group(1).strip() if think else None
    answer_text = answer.group(1).strip() if answer else None
    tag_order_ok = bool(think and answer and think.start() < answer.start())

    user_status = None
    if think_text:
        status = _USER_STATUS_RE.search(think_text)
        if status:
            user_status = status.group(1).strip() or None

    action: Action | None = None
    if answer_text:
        if isinstance(task, Judgment):
            action = _parse_judgment_action(answer_text)
        elif isinstance(task, Selection):
            action = _parse_selection_action(answer_text, task)
        else:
            raise TypeError(f"unknown task kind: {task!r}")

    return ParsedResponse(
        think_text=think_text,
        answer_text=answer_text,
        user_status=user_status,
        tag_order_ok=tag_order_ok,
        action=action,
    )


def format_reward(parsed: ParsedResponse) -> float:
    """Score transcript structure: 1, 0.5, 0, or -1 (see module table)."""
    has_think = parsed.think_text is not None
    has_answer = parsed.answer_text is not None
    if has_think and has_answer:
        return 1.0 if parsed.tag_order_ok else 0.5
    if has_think or has_answer:
        return 0.0
    return -1.0


def judgment_reward(parsed: ParsedResponse, truth: str) -> float:
    """+1 when the Yes/No action matches the like/dislike truth, else -1."""
    if truth not in ("like", "dislike"):
        raise ValueError(f"judgment truth must be like/dislike, got {truth!r}")
    if not isinstance(parsed.action, Verdict):
        return -1.0
    predicted = "like" if parsed.action is Verdict.YES else "dislike"
    return 1.0 if predicted == truth else -1.0


def selection_reward(
    parsed: ParsedResponse, truth_index: int, n_candidates: int | None = None
) -> float:
    """+2 for the correct candidate, -1.5 for a wrong one, -2 when unparseable.

    An index outside [1, n_candidates] scores -2 like a missing action.
    ``parse_response`` already rejects out-of-range indices, so the bound here
    only matters for hand-built actions.
    """
    if not isinstance(parsed.action, Select):
        return -2.0
    index = parsed.action.index
    if index < 1 or (n_candidates is not None and index > n_candidates):
        return -2.0
    if index == truth_index:
        return 2.0
    return -1.5


def total_reward(raw: str, task: TaskKind, truth: str | int) -> RewardBreakdown:
    """Parse ``raw`` and compose format + task rewards for the given task."""
    parsed = parse_response(raw, task)
    r_format = format_reward(parsed)
    if isinstance(task, Judgment):
        r_task = judgment_reward(parsed, str(truth))
    else:
        r_task = selection_reward(parsed, int(truth), n_candidates=task.candidates.size)
    return RewardBreakdown(r_format=r_format, r_task=r_task)
