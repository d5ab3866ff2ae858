"""Staged item-perception pipeline: keyframes -> perception -> caption.

Frame-text similarity scores are consumed from files (an external embedding
tool produces them); from the scores onward the pipeline is: pick the top
frames, hold one three-turn conversation with a multimodal chat endpoint
(focus on title-relevant content, extract the key information, then compress
into a recommendation-oriented caption), and enforce the caption word cap
with one corrective re-prompt before truncating.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .core import CAPTION_TARGET_WORDS, CAPTION_WORD_LIMIT, Item, ItemId, word_count
from .llmclient import (
    ChatMessage,
    ChatRequest,
    ClientError,
    ClientStats,
    EndpointConfig,
    Transport,
    complete,
)

logger = logging.getLogger(__name__)

KEYFRAME_COUNT = 3
DEFAULT_CAPTION_MODEL = "item-perception"

FOCUS_PROMPT = (
    "You are a helpful assistant to help to understand a video. These are key frames "
    "from a video, and the title of the video is: {title}. Pay special attention to "
    "content related to the title."
)
PERCEPTION_PROMPT = (
    "Based on the textual and visual contents, identify what visual content aligns "
    "with or extends beyond the title's description, note any discrepancies or "
    "additional context provided by the visuals. Now combined with your knowledge "
    "and understanding, give the key information about the video, including: main "
    "characters, core event and emotional appeal."
)
SUMMARY_PROMPT = (
    "If you want to recommend the video, create a concise summary within "
    f"{CAPTION_TARGET_WORDS} words on what the viewer would be interested in, "
    "following this format: [Core Content Description] + [Refined Tags]. The content "
    "should be clear and elegant, and tags should be brief and accurate to reflect "
    'the video topic. Here is a good example: "the girl just drove the wrong way, '
    'but did not expect to encounter terrible things # thriller movie # movie commentary"'
)
LIMIT_REMINDER = (
    f"Your summary is too long. Rewrite it within {CAPTION_TARGET_WORDS} words, "
    "keeping the format [Core Content Description] + [Refined Tags]."
)


class PipelineError(RuntimeError):
    """A per-item pipeline failure; carries the item and the failing stage."""

    def __init__(self, item: ItemId, stage: str, reason: str) -> None:
        super().__init__(f"item {item!r}, stage {stage!r}: {reason}")
        self.item = item
        self.stage = stage
        self.reason = reason


@dataclass(frozen=True)
class FrameScore:
    index: int
    ref: str
    score: float


@dataclass(frozen=True)
class FrameScores:
    """Similarity scores between a video's sampled frames and its title."""

    item: ItemId
    frames: tuple[FrameScore, ...]

    def __post_init__(self) -> None:
        if not self.frames:
            raise ValueError(f"item {self.item!r}: need at least one scored frame")
        if any(not _finite(f.score) for f in self.frames):
            raise ValueError(f"item {self.item!r}: frame scores must be finite")


def _finite(x: float) -> bool:
    return x == x and abs(x) != float("inf")


@dataclass(frozen=True)
class EnhancedCaption:
    """The final caption plus the two intermediate model replies."""

    item: ItemId
    caption: str
    word_count: int
    stage_transcripts: tuple[str, str]  # (perception, analysis) replies
    retries: int = 0

    def __post_init__(self) -> None:
        if self.word_count > CAPTION_WORD_LIMIT:
            raise ValueError(f"caption exceeds the {CAPTION_WORD_LIMIT}-word cap")


def select_keyframes(scores: FrameScores, n: int = KEYFRAME_COUNT) -> tuple[FrameScore, ...]:
    """The n highest-scoring frames, descending; ties go to the lower index.

    Returns every frame when fewer than n exist.
    """
    ranked = sorted(scores.frames, key=lambda f: (-f.score, f.index))
    return tuple(ranked[:n])


def _ask(
    item: ItemId,
    stage: str,
    messages: list[ChatMessage],
    model: str,
    cfg: EndpointConfig,
    transport: Transport,
    stats: ClientStats | None,
) -> str:
    request = ChatRequest(model=model, messages=tuple(messages))
    reply = complete(request, cfg, transport=transport, stats=stats)
    if not reply.strip():
        raise PipelineError(item, stage, "empty model reply")
    messages.append(ChatMessage(role="assistant", content=reply))
    return reply


def run_ip_pipeline(
    item: Item,
    keyframes: tuple[FrameScore, ...],
    cfg: EndpointConfig,
    transport: Transport,
    model: str = DEFAULT_CAPTION_MODEL,
    word_limit: int = CAPTION_WORD_LIMIT,
    stats: ClientStats | None = None,
) -> EnhancedCaption:
    """Run the three-turn conversation for one item and return its caption.

    The final reply must fit ``word_limit`` words; one corrective re-prompt is
    attempted, after which the caption is truncated with a warning.
    """
    messages = [
        ChatMessage(
            role="user",
            content=FOCUS_PROMPT.format(title=item.title),
            images=tuple(f.ref for f in keyframes),
        )
    ]
    focus_reply = _ask(item.id, "focus", messages, model, cfg, transport, stats)
    messages.append(ChatMessage(role="user", content=PERCEPTION_PROMPT))
    perception_reply = _ask(item.id, "perception", messages, model, cfg, transport, stats)
    messages.append(ChatMessage(role="user", content=SUMMARY_PROMPT))
    caption = _ask(item.id, "summary", messages, model, cfg, transport, stats)

    retries = 0
    if word_count(caption) > word_limit:
        messages.append(ChatMessage(role="user", content=LIMIT_REMINDER))
        caption = _ask(item.id, "summary-retry", messages, model, cfg, transport, stats)
        retries = 1
        if word_count(caption) > word_limit:
            logger.warning(
                "item %r: caption still over %d words after retry; truncating",
                item.id,
                word_limit,
            )
            caption = " ".join(caption.split()[:word_limit])

    return EnhancedCaption(
        item=item.id,
        caption=caption,
        word_count=word_count(caption),
        stage_transcripts=(focus_reply, perception_reply),
        retries=retries,
    )


def load_frame_scores(path: str | Path) -> dict[ItemId, FrameScores]:
    """Read frame-score JSONL: {"item": str, "frames": [{"idx","ref","score"}]}."""
    scores: dict[ItemId, FrameScores] = {}
    with Path(path).open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                frames = tuple(
                    FrameScore(index=int(f["idx"]), ref=str(f["ref"]), score=float(f["score"]))
                    for f in row["frames"]
                )
                scores[str(row["item"])] = FrameScores(item=str(row["item"]), frames=frames)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"line {lineno}: malformed frame-score row ({exc})") from exc
    return scores


@dataclass
class BatchReport:
    """Outcome of a batch augmentation run."""

    written: int = 0
    skipped: int = 0
    failures: list[tuple[ItemId, str]] = field(default_factory=list)


def _existing_caption_items(path: Path) -> set[ItemId]:
    done: set[ItemId] = set()
    if not path.exists():
        return done
    with path.open("r", encoding="utf-8") as handle:
        for line in handle:
            if line.strip():
                done.add(str(json.loads(line)["item"]))
    return done


def batch_augment(
    catalog: dict[ItemId, Item],
    frame_scores: dict[ItemId, FrameScores] | str | Path,
    cfg: EndpointConfig,
    transport: Transport,
    out_path: str | Path,
    items: list[ItemId] | None = None,
    model: str = DEFAULT_CAPTION_MODEL,
    parallelism: int = 1,
    stats: ClientStats | None = None,
) -> BatchReport:
    """Caption many items, appending rows to ``out_path`` incrementally.

    Resumable: items that already have a caption row in the output are
    skipped. Items without frame scores and per-item pipeline errors land in
    the failure report; the batch continues. Output rows are written in
    sorted item order so reruns are byte-identical.
    """
    if not isinstance(frame_scores, dict):
        frame_scores = load_frame_scores(frame_scores)
    out_path = Path(out_path)
    report = BatchReport()
    wanted = sorted(items) if items is not None else sorted(frame_scores)
    done = _existing_caption_items(out_path)

    todo: list[ItemId] = []
    for item_id in wanted:
        if item_id in done:
            report.skipped += 1
        elif item_id not in catalog:
            report.failures.append((item_id, "unknown item"))
        elif item_id not in frame_scores:
            report.failures.append((item_id, "missing frame scores"))
        else:
            todo.append(item_id)

    def caption_one(item_id: ItemId) -> EnhancedCaption | PipelineError | ClientError:
        try:
            return run_ip_pipeline(
                catalog[item_id],
                select_keyframes(frame_scores[item_id]),
                cfg,
                transport,
                model=model,
                stats=stats,
            )
        except (PipelineError, ClientError) as exc:
            return exc

    if parallelism > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            results = list(pool.map(caption_one, todo))
    else:
        results = [caption_one(i) for i in todo]

    with out_path.open("a", encoding="utf-8") as handle:
        for item_id, result in zip(todo, results):
            if isinstance(result, PipelineError):
                report.failures.append((item_id, result.stage))
            elif isinstance(result, ClientError):
                report.failures.append((item_id, f"transport: {result}"))
            else:
                handle.write(
                    json.dumps({"item": item_id, "caption": result.caption}, sort_keys=True) + "\n"
                )
                report.written += 1
    return report
