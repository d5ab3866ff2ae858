"""Shared domain types and dataset ingestion.

The vocabulary used by every other module:

- Item: a catalog entry (title, optional enhanced caption, optional feature vector)
- BehaviorRecord / UserHistory: a user's chronological watched + commented sequence
- CandidateSet: the shuffled m+1 candidates for a next-video selection task
- Judgment / Selection: the two task kinds with their ground truth

All types are immutable after construction and safe to share across workers.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

logger = logging.getLogger(__name__)

ItemId = str
UserId = str

# Hard cap on enhanced-caption length (whitespace tokens). The generation
# target is 35 words; the cap leaves tolerance before rejection/truncation.
CAPTION_WORD_LIMIT = 45
CAPTION_TARGET_WORDS = 35


def word_count(text: str) -> int:
    """Number of whitespace-separated tokens; hashtag tags count per token."""
    return len(text.split())


@dataclass(frozen=True)
class Item:
    """A catalog entry. ``feature`` is a dense unitless vector when present."""

    id: ItemId
    title: str
    enhanced_caption: str | None = None
    feature: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("item id must be non-empty")
        if self.enhanced_caption is not None:
            if not self.enhanced_caption.strip():
                raise ValueError(f"item {self.id!r}: enhanced caption must be non-empty")
            if word_count(self.enhanced_caption) > CAPTION_WORD_LIMIT:
                raise ValueError(
                    f"item {self.id!r}: caption exceeds {CAPTION_WORD_LIMIT} words"
                )
        if self.feature is not None and not all(math.isfinite(x) for x in self.feature):
            raise ValueError(f"item {self.id!r}: feature vector has non-finite entries")

    def display_text(self) -> str:
        """Text used to present this item in prompts: caption when available."""
        return self.enhanced_caption if self.enhanced_caption is not None else self.title


@dataclass(frozen=True)
class BehaviorRecord:
    """One watched video with an optional comment at an integer ordinal."""

    item: ItemId
    timestamp: int
    comment: str | None = None

    def __post_init__(self) -> None:
        if not self.item:
            raise ValueError("behavior item id must be non-empty")


@dataclass(frozen=True)
class UserHistory:
    """A user's chronological behavior sequence.

    Loaded histories always have N >= 2 (profile + prediction target); the
    type itself accepts N >= 1 so that training views (the first N-1
    behaviors) remain representable for generator fitting.
    """

    user: UserId
    behaviors: tuple[BehaviorRecord, ...]

    def __post_init__(self) -> None:
        if not self.user:
            raise ValueError("user id must be non-empty")
        if len(self.behaviors) < 1:
            raise ValueError(f"user {self.user!r}: history must be non-empty")
        stamps = [b.timestamp for b in self.behaviors]
        if any(b >= a for b, a in zip(stamps, stamps[1:])):
            raise ValueError(f"user {self.user!r}: ordinals must be strictly increasing")

    def __len__(self) -> int:
        return len(self.behaviors)

    def profile(self) -> tuple[BehaviorRecord, ...]:
        """The first N-1 behaviors (user-profile portion)."""
        self._require_target()
        return self.behaviors[:-1]

    def target(self) -> BehaviorRecord:
        """The N-th behavior (prediction target)."""
        self._require_target()
        return self.behaviors[-1]

    def training_view(self) -> "UserHistory":
        """This history with the held-out target dropped."""
        self._require_target()
        return replace(self, behaviors=self.behaviors[:-1])

    def item_ids(self) -> tuple[ItemId, ...]:
        return tuple(b.item for b in self.behaviors)

    def _require_target(self) -> None:
        if len(self.behaviors) < 2:
            raise ValueError(
                f"user {self.user!r}: need at least 2 behaviors to split profile/target"
            )


@dataclass(frozen=True)
class CandidateSet:
    """The m+1 shuffled candidates: one positive plus m distinct negatives."""

    positive: ItemId
    negatives: tuple[ItemId, ...]
    presentation_order: tuple[ItemId, ...]
    rng_seed: int

    def __post_init__(self) -> None:
        if self.positive in self.negatives:
            raise ValueError("positive item must not appear among negatives")
        if len(set(self.negatives)) != len(self.negatives):
            raise ValueError("negatives must be distinct")
        if sorted(self.presentation_order) != sorted((self.positive, *self.negatives)):
            raise ValueError("presentation order must permute the m+1 candidates")

    @property
    def size(self) -> int:
        return len(self.negatives) + 1

    def truth_index(self) -> int:
        """1-based position of the positive item in the presentation order."""
        return self.presentation_order.index(self.positive) + 1


@dataclass(frozen=True)
class Judgment:
    """Preference-judgment task: would the user like ``item``? Truth is the label."""

    item: ItemId
    label: str  # "like" | "dislike"

    def __post_init__(self) -> None:
        if self.label not in ("like", "dislike"):
            raise ValueError(f"judgment label must be like/dislike, got {self.label!r}")


@dataclass(frozen=True)
class Selection:
    """Next-video selection task over a candidate set.

    ``captions`` holds the rendered candidate texts in presentation order so
    free-text answers can be matched back to a candidate.
    """

    candidates: CandidateSet
    captions: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if self.captions is not None and len(self.captions) != self.candidates.size:
            raise ValueError("captions must align with the presentation order")


TaskKind = Judgment | Selection


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------


def _infer_format(path: Path) -> str:
    if path.suffix == ".tsv":
        return "tsv"
    return "jsonl"


def _parse_jsonl_row(line: str, lineno: int) -> dict:
    try:
        row = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValueError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(row, dict):
        raise ValueError(f"line {lineno}: expected an object")
    return row


def _parse_tsv_row(line: str, lineno: int) -> dict:
    fields = line.rstrip("\n").split("\t")
    if len(fields) not in (3, 4):
        raise ValueError(f"line {lineno}: expected 3 or 4 tab-separated fields")
    row = {"user": fields[0], "item": fields[1], "ord": fields[2]}
    if len(fields) == 4 and fields[3] != "":
        row["comment"] = fields[3]
    return row


def load_interactions(
    path: str | Path, format: str | None = None
) -> tuple[dict[ItemId, Item], list[UserHistory]]:
    """Load an interactions file into a catalog and per-user histories.

    Rows carry user id, item id, integer ordinal, and an optional comment
    (JSONL rows may also carry an optional "title"). Histories are sorted by
    ordinal per user; users with fewer than 2 behaviors are dropped with a
    logged count. Malformed rows and duplicate (user, ordinal) pairs raise
    ValueError naming the line.
    """
    path = Path(path)
    fmt = format or _infer_format(path)
    if fmt not in ("jsonl", "tsv"):
        raise ValueError(f"unknown interactions format {fmt!r}")
    parse = _parse_jsonl_row if fmt == "jsonl" else _parse_tsv_row

    titles: dict[ItemId, str] = {}
    per_user: dict[UserId, dict[int, BehaviorRecord]] = {}
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            row = parse(line, lineno)
            try:
                user = str(row["user"])
                item = str(row["item"])
                ordinal = int(row["ord"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"line {lineno}: missing or malformed field ({exc})") from exc
            if not user:
                raise ValueError(f"line {lineno}: empty user id")
            if not item:
                raise ValueError(f"line {lineno}: empty item id")
            comment = row.get("comment")
            if comment is not None:
                comment = str(comment)
                if not comment.strip():
                    comment = None
            title = row.get("title")
            if title:
                titles[item] = str(title)
            elif item not in titles:
                titles[item] = item
            records = per_user.setdefault(user, {})
            if ordinal in records:
                raise ValueError(
                    f"line {lineno}: duplicate ordinal {ordinal} for user {user!r}"
                )
            records[ordinal] = BehaviorRecord(item=item, timestamp=ordinal, comment=comment)

    histories: list[UserHistory] = []
    dropped = 0
    for user in sorted(per_user):
        records = per_user[user]
        if len(records) < 2:
            dropped += 1
            continue
        behaviors = tuple(records[o] for o in sorted(records))
        histories.append(UserHistory(user=user, behaviors=behaviors))
    if dropped:
        logger.warning("dropped %d user(s) with fewer than 2 behaviors", dropped)

    catalog = {item: Item(id=item, title=title) for item, title in sorted(titles.items())}
    return catalog, histories


def save_interactions(
    path: str | Path, catalog: dict[ItemId, Item], histories: list[UserHistory]
) -> None:
    """Write histories back to interactions JSONL (round-trips with the loader)."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        for history in histories:
            for record in history.behaviors:
                row: dict = {
                    "user": history.user,
                    "item": record.item,
                    "ord": record.timestamp,
                    "comment": record.comment,
                }
                item = catalog.get(record.item)
                if item is not None and item.title != item.id:
                    row["title"] = item.title
                handle.write(json.dumps(row, sort_keys=True) + "\n")


def attach_captions(catalog: dict[ItemId, Item], captions: str | Path) -> dict[ItemId, Item]:
    """Attach enhanced captions from a captions JSONL file.

    Rows are {"item": str, "caption": str}. Unknown item ids and invalid
    captions (empty, over the word cap) are skipped with a warning; they are
    not fatal. Returns a new catalog; the input is unchanged.
    """
    path = Path(captions)
    updated = dict(catalog)
    unknown = 0
    rejected = 0
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            row = _parse_jsonl_row(line, lineno)
            item_id = str(row.get("item", ""))
            caption = row.get("caption")
            if item_id not in updated:
                unknown += 1
                logger.warning("line %d: caption for unknown item %r", lineno, item_id)
                continue
            try:
                updated[item_id] = replace(updated[item_id], enhanced_caption=caption)
            except (ValueError, TypeError) as exc:
                rejected += 1
                logger.warning("line %d: rejected caption for %r (%s)", lineno, item_id, exc)
    if unknown or rejected:
        logger.warning("attach_captions: %d unknown item(s), %d rejected row(s)", unknown, rejected)
    return updated


def write_captions(catalog: dict[ItemId, Item], path: str | Path) -> int:
    """Write the catalog's enhanced captions as captions JSONL; returns row count."""
    path = Path(path)
    written = 0
    with path.open("w", encoding="utf-8") as handle:
        for item_id in sorted(catalog):
            item = catalog[item_id]
            if item.enhanced_caption is None:
                continue
            handle.write(
                json.dumps({"item": item_id, "caption": item.enhanced_caption}, sort_keys=True)
                + "\n"
            )
            written += 1
    return written
