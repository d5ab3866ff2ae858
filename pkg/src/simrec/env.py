"""Simulated recommendation environment.

Builds candidate sets from a recommender's top-k list, renders judgment and
selection episodes as chat prompts, and provides a synthetic world with
vector-oracle users for desk-scale policy training. Episode generation is
pure given (inputs, seed): the same history, task kind, and seed always
produce byte-identical prompts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .core import (
    BehaviorRecord,
    CandidateSet,
    Item,
    ItemId,
    Judgment,
    Selection,
    TaskKind,
    UserHistory,
    UserId,
)

# Shared response-format instructions; the task-specific goal is substituted in.
_PREAMBLE = (
    "You are a helpful assistant. The assistant first thinks about the user's video "
    "watching history and the comments, analyzes their current status, such as "
    "preferences and purpose, and predicts: {goal}. The reasoning process and answer "
    "are enclosed within <think> </think> and <answer> </answer> tags, respectively, "
    "i.e., <think> reasoning process here </think><answer> answer here </answer>. "
    "After thinking, when you finally reach a conclusion, give the user status and "
    "the answer you predict within <answer> </answer> tags. i.e., "
    "<think> (1) User_status:... </think><answer>(2) Next_video:...  </answer>."
)
_SELECTION_GOAL = "which video they are most likely to watch next from the given candidates"
_JUDGMENT_GOAL = "if they like the next video"


class CandidateSource(Protocol):
    """Anything that can propose a ranked top-k list for a history."""

    def top_k(self, history: UserHistory, k: int | None) -> list[ItemId]: ...


@dataclass(frozen=True)
class EnvConfig:
    """Environment knobs: recall depth, negative count, and the root seed."""

    top_k: int = 10
    m: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.m <= self.top_k:
            raise ValueError(f"need 1 <= m <= top_k, got m={self.m}, top_k={self.top_k}")


@dataclass(frozen=True)
class Episode:
    """One fully rendered task instance for a user."""

    user: UserId
    profile_text: str
    task: TaskKind
    prompt: str
    truth: str | int

    def __post_init__(self) -> None:
        if isinstance(self.task, Judgment):
            if self.truth != self.task.label:
                raise ValueError("judgment truth must equal the task label")
        elif isinstance(self.task, Selection):
            if self.truth != self.task.candidates.truth_index():
                raise ValueError("selection truth must be the positive's 1-based position")
        else:
            raise TypeError(f"unknown task kind: {self.task!r}")


def derive_seed(root: int, *parts: object) -> int:
    """Stable 63-bit sub-seed from a root seed and any labels (hash-based)."""
    digest = hashlib.sha256(repr((root, *parts)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def build_candidate_set(top10: Sequence[ItemId], positive: ItemId, m: int, seed: int) -> CandidateSet:
    """Sample m negatives from ``top10`` (minus the positive) and shuffle.

    Negatives are drawn uniformly without replacement; the presentation order
    is a seeded uniform shuffle of the m+1 candidates, so the positive's
    position is uniform. Fully reconstructible from the same inputs and seed.
    """
    eligible = [i for i in top10 if i != positive]
    if len(set(eligible)) != len(eligible):
        raise ValueError("top-k list must contain distinct items")
    if len(eligible) < m:
        raise ValueError(
            f"need {m} distinct negatives but only {len(eligible)} eligible items"
        )
    rng = np.random.default_rng(seed)
    negatives = tuple(eligible[i] for i in rng.choice(len(eligible), size=m, replace=False))
    pool = (positive, *negatives)
    order = tuple(pool[i] for i in rng.permutation(len(pool)))
    return CandidateSet(
        positive=positive, negatives=negatives, presentation_order=order, rng_seed=seed
    )


def _display(catalog: dict[ItemId, Item], item_id: ItemId) -> str:
    item = catalog.get(item_id)
    if item is None:
        raise ValueError(f"unknown item {item_id!r}")
    return item.display_text()


def render_history(catalog: dict[ItemId, Item], behaviors: Sequence[BehaviorRecord]) -> str:
    """Numbered history lines with comments appended when present."""
    lines = []
    for pos, record in enumerate(behaviors, start=1):
        line = f"{pos}. {_display(catalog, record.item)}"
        if record.comment:
            line += f' (comment: "{record.comment}")'
        lines.append(line)
    return "\n".join(lines)


def render_candidates(catalog: dict[ItemId, Item], candidates: CandidateSet) -> tuple[str, ...]:
    return tuple(_display(catalog, item) for item in candidates.presentation_order)


def selection_prompt(history_str: str, captions: Sequence[str]) -> str:
    candidates_str = "\n".join(f"{pos}. {text}" for pos, text in enumerate(captions, start=1))
    return (
        _PREAMBLE.format(goal=_SELECTION_GOAL)
        + f"\nUser's viewing history: {history_str}"
        + f"\nCandidate videos for the next watch: {candidates_str}"
    )


def judgment_prompt(history_str: str, item_str: str) -> str:
    return (
        _PREAMBLE.format(goal=_JUDGMENT_GOAL)
        + f"\nUser's viewing history: {history_str}"
        + f"\nCandidate video for the next watch: {item_str}"
        + "\nWould the user like to watch it? Answer Yes or No."
    )


def make_episode(
    history: UserHistory,
    catalog: dict[ItemId, Item],
    kind: str,
    cfg: EnvConfig,
    candidate_generator: CandidateSource | None = None,
    judged_item: ItemId | None = None,
    judged_label: str | None = None,
) -> Episode:
    """Build one episode from a real history.

    The profile uses behaviors 1..N-1 and the N-th behavior is the prediction
    target. Selection episodes need ``candidate_generator`` for the top-k
    recall list. Judgment episodes default to the target item with truth
    "like"; pass ``judged_item``/``judged_label`` to judge a sampled negative.
    """
    if len(history) < 2:
        raise ValueError(f"user {history.user!r}: episodes need at least 2 behaviors")
    profile_text = render_history(catalog, history.profile())
    target = history.target()
    ep_seed = derive_seed(cfg.seed, history.user, kind)

    if kind == "selection":
        if candidate_generator is None:
            raise ValueError("selection episodes require a candidate generator")
        top = candidate_generator.top_k(history.training_view(), cfg.top_k)
        candidates = build_candidate_set(top, target.item, cfg.m, ep_seed)
        captions = render_candidates(catalog, candidates)
        task = Selection(candidates=candidates, captions=captions)
        return Episode(
            user=history.user,
            profile_text=profile_text,
            task=task,
            prompt=selection_prompt(profile_text, captions),
            truth=candidates.truth_index(),
        )
    if kind == "judgment":
        item_id = judged_item if judged_item is not None else target.item
        label = judged_label if judged_label is not None else "like"
        task = Judgment(item=item_id, label=label)
        return Episode(
            user=history.user,
            profile_text=profile_text,
            task=task,
            prompt=judgment_prompt(profile_text, _display(catalog, item_id)),
            truth=label,
        )
    raise ValueError(f"unknown episode kind {kind!r}")


def make_judgment_pair(
    history: UserHistory,
    catalog: dict[ItemId, Item],
    cfg: EnvConfig,
    candidate_generator: CandidateSource,
) -> tuple[Episode, Episode]:
    """One balanced like/dislike episode pair for a user.

    The positive is the true target item; the negative is sampled from the
    recommender's top-k minus the target, mirroring the selection sampler.
    """
    like = make_episode(history, catalog, "judgment", cfg)
    top = candidate_generator.top_k(history.training_view(), cfg.top_k)
    pool = [i for i in top if i != history.target().item]
    if not pool:
        raise ValueError(f"user {history.user!r}: no negative candidates available")
    rng = np.random.default_rng(derive_seed(cfg.seed, history.user, "judgment-negative"))
    negative = pool[int(rng.integers(len(pool)))]
    dislike = make_episode(
        history, catalog, "judgment", cfg, judged_item=negative, judged_label="dislike"
    )
    return like, dislike


# ---------------------------------------------------------------------------
# Synthetic world
# ---------------------------------------------------------------------------


@dataclass
class SyntheticWorld:
    """Vector-oracle users and items for desk-scale training.

    Users like an item when the dot product of their vectors exceeds the
    threshold; at noise 0 the oracle's next pick from any pool is the unique
    affinity argmax.
    """

    dim: int
    user_ids: tuple[UserId, ...]
    item_ids: tuple[ItemId, ...]
    user_vectors: np.ndarray
    item_vectors: np.ndarray
    like_threshold: float = 0.0
    noise: float = 0.0
    final_pools: dict[UserId, tuple[ItemId, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.user_vectors)) or not np.all(
            np.isfinite(self.item_vectors)
        ):
            raise ValueError("world vectors must be finite")
        self._user_index = {u: i for i, u in enumerate(self.user_ids)}
        self._item_index = {v: i for i, v in enumerate(self.item_ids)}

    def affinity(self, user: UserId, item: ItemId) -> float:
        return float(
            self.user_vectors[self._user_index[user]] @ self.item_vectors[self._item_index[item]]
        )

    def likes(self, user: UserId, item: ItemId) -> bool:
        return self.affinity(user, item) > self.like_threshold

    def oracle_pick(self, user: UserId, pool: Sequence[ItemId], rng: np.random.Generator) -> ItemId:
        """The item the oracle user picks from a pool (argmax affinity + noise)."""
        scores = np.array([self.affinity(user, item) for item in pool])
        if self.noise > 0:
            scores = scores + self.noise * rng.standard_normal(len(pool))
        return pool[int(np.argmax(scores))]

    def user_vector(self, user: UserId) -> np.ndarray:
        return self.user_vectors[self._user_index[user]]

    def item_vector(self, item: ItemId) -> np.ndarray:
        return self.item_vectors[self._item_index[item]]


def generate_synthetic_world(
    n_users: int,
    n_items: int,
    dim: int,
    seed: int,
    history_length: int | tuple[int, int] = 6,
    pool_size: int = 10,
    like_threshold: float = 0.0,
    noise: float = 0.0,
) -> tuple[SyntheticWorld, dict[ItemId, Item], list[UserHistory]]:
    """Sample a world and derive its catalog and oracle-driven histories.

    Each behavior is the oracle's pick from a fresh random pool of unwatched
    items; the pool behind the final (target) behavior is retained per user so
    selection episodes can reuse it as the recall list. Reproducible from the
    seed alone.
    """
    if n_users < 2 or n_items < 2:
        raise ValueError("need at least 2 users and 2 items")
    if dim < 1:
        raise ValueError("need dim >= 1")
    span = (history_length, history_length) if isinstance(history_length, int) else history_length
    if span[0] < 2:
        raise ValueError("histories need at least 2 behaviors")
    if pool_size > n_items:
        raise ValueError("pool_size cannot exceed the item count")

    rng = np.random.default_rng(seed)
    user_vectors = rng.standard_normal((n_users, dim))
    item_vectors = rng.standard_normal((n_items, dim))
    width = max(3, len(str(n_items - 1)))
    user_ids = tuple(f"u{i:0{width}d}" for i in range(n_users))
    item_ids = tuple(f"v{j:0{width}d}" for j in range(n_items))

    world = SyntheticWorld(
        dim=dim,
        user_ids=user_ids,
        item_ids=item_ids,
        user_vectors=user_vectors,
        item_vectors=item_vectors,
        like_threshold=like_threshold,
        noise=noise,
    )

    catalog = {
        item_id: Item(id=item_id, title=f"clip {item_id}", feature=tuple(map(float, vec)))
        for item_id, vec in zip(item_ids, item_vectors)
    }

    histories: list[UserHistory] = []
    for user in user_ids:
        length = int(rng.integers(span[0], span[1] + 1)) if span[0] != span[1] else span[0]
        watched: list[ItemId] = []
        remaining = list(item_ids)
        for step in range(length):
            pool_idx = rng.choice(len(remaining), size=min(pool_size, len(remaining)), replace=False)
            pool = [remaining[i] for i in pool_idx]
            pick = world.oracle_pick(user, pool, rng)
            if step == length - 1:
                world.final_pools[user] = tuple(pool)
            watched.append(pick)
            remaining.remove(pick)
        behaviors = tuple(
            BehaviorRecord(
                item=item,
                timestamp=t + 1,
                comment="loved it" if world.affinity(user, item) > 1.0 else None,
            )
            for t, item in enumerate(watched)
        )
        histories.append(UserHistory(user=user, behaviors=behaviors))
    return world, catalog, histories


class SyntheticEpisodeSource:
    """Draws fresh judgment/selection episodes from a synthetic world.

    Selection episodes sample a fresh pool, let the oracle pick the positive
    from it, and sample negatives from the rest of the pool, so at noise 0 the
    positive is always the affinity argmax among the candidates. Judgment
    episodes draw a balanced like/dislike item by the threshold oracle.
    """

    def __init__(
        self,
        world: SyntheticWorld,
        catalog: dict[ItemId, Item],
        histories: Sequence[UserHistory],
        cfg: EnvConfig,
        pool_size: int = 10,
    ) -> None:
        self.world = world
        self.catalog = catalog
        self.cfg = cfg
        self.pool_size = pool_size
        self._histories = {h.user: h for h in histories}
        self._users = tuple(h.user for h in histories)

    def sample(self, rng: np.random.Generator, kind: str) -> Episode:
        user = self._users[int(rng.integers(len(self._users)))]
        history = self._histories[user]
        profile_text = render_history(self.catalog, history.profile())
        if kind == "selection":
            return self._selection_episode(user, profile_text, rng)
        if kind == "judgment":
            return self._judgment_episode(user, profile_text, rng)
        raise ValueError(f"unknown episode kind {kind!r}")

    def _selection_episode(
        self, user: UserId, profile_text: str, rng: np.random.Generator
    ) -> Episode:
        items = self.world.item_ids
        pool_idx = rng.choice(len(items), size=self.pool_size, replace=False)
        pool = [items[i] for i in pool_idx]
        positive = self.world.oracle_pick(user, pool, rng)
        candidates = build_candidate_set(
            pool, positive, self.cfg.m, seed=int(rng.integers(2**63 - 1))
        )
        captions = render_candidates(self.catalog, candidates)
        task = Selection(candidates=candidates, captions=captions)
        return Episode(
            user=user,
            profile_text=profile_text,
            task=task,
            prompt=selection_prompt(profile_text, captions),
            truth=candidates.truth_index(),
        )

    def _judgment_episode(
        self, user: UserId, profile_text: str, rng: np.random.Generator
    ) -> Episode:
        want_like = bool(rng.integers(2))
        items = self.world.item_ids
        item = None
        for _ in range(256):
            probe = items[int(rng.integers(len(items)))]
            if self.world.likes(user, probe) == want_like:
                item = probe
                break
        if item is None:  # degenerate threshold; fall back to any item
            item = items[int(rng.integers(len(items)))]
            want_like = self.world.likes(user, item)
        label = "like" if want_like else "dislike"
        task = Judgment(item=item, label=label)
        return Episode(
            user=user,
            profile_text=profile_text,
            task=task,
            prompt=judgment_prompt(profile_text, _display(self.catalog, item)),
            truth=label,
        )


# ---------------------------------------------------------------------------
# Episode export / reload
# ---------------------------------------------------------------------------


def export_episodes(episodes: Iterable[Episode], path: str | Path) -> int:
    """Write episodes as JSONL for offline evaluation; returns the row count."""
    path = Path(path)
    count = 0
    with path.open("w", encoding="utf-8") as handle:
        for ep in episodes:
            row: dict = {
                "user": ep.user,
                "profile": ep.profile_text,
                "prompt": ep.prompt,
                "truth": ep.truth,
            }
            if isinstance(ep.task, Selection):
                row["task"] = "selection"
                row["m"] = ep.task.candidates.size - 1
                row["rng_seed"] = ep.task.candidates.rng_seed
                row["candidate_items"] = list(ep.task.candidates.presentation_order)
                row["negatives"] = list(ep.task.candidates.negatives)
                if ep.task.captions is not None:
                    row["candidate_captions"] = list(ep.task.captions)
            else:
                row["task"] = "judgment"
                row["item"] = ep.task.item
            handle.write(json.dumps(row, sort_keys=True) + "\n")
            count += 1
    return count


def load_episodes(path: str | Path) -> list[Episode]:
    """Reload episodes exported by :func:`export_episodes`."""
    episodes: list[Episode] = []
    with Path(path).open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            row = json.loads(line)
            try:
                if row["task"] == "selection":
                    order = tuple(row["candidate_items"])
                    truth = int(row["truth"])
                    positive = order[truth - 1]
                    if "negatives" in row:
                        negatives = tuple(row["negatives"])
                    else:
                        negatives = tuple(i for i in order if i != positive)
                    candidates = CandidateSet(
                        positive=positive,
                        negatives=negatives,
                        presentation_order=order,
                        rng_seed=int(row.get("rng_seed", 0)),
                    )
                    captions = row.get("candidate_captions")
                    task: TaskKind = Selection(
                        candidates=candidates,
                        captions=tuple(captions) if captions else None,
                    )
                elif row["task"] == "judgment":
                    truth = str(row["truth"])
                    task = Judgment(item=row["item"], label=truth)
                else:
                    raise ValueError(f"unknown task {row['task']!r}")
                episodes.append(
                    Episode(
                        user=row["user"],
                        profile_text=row.get("profile", ""),
                        task=task,
                        prompt=row["prompt"],
                        truth=truth,
                    )
                )
            except (KeyError, IndexError, TypeError) as exc:
                raise ValueError(f"line {lineno}: malformed episode row ({exc})") from exc
    return episodes
