"""Pluggable sequential candidate generators and evaluation metrics.

Three lightweight recall models (popularity, first-order transitions, feature
embeddings) stand in for heavier sequential recommenders; the evaluation
harness can score any generator exposing ``fit`` + ``top_k``. Leave-one-out
protocol: each user's last interaction is held out and ranked against the full
catalog minus that user's training items (ranks are 1-based; ties break by
item id so rankings are deterministic).
"""

from __future__ import annotations

import json
import logging
import math
from abc import ABC, abstractmethod
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .core import BehaviorRecord, Item, ItemId, UserHistory, UserId

logger = logging.getLogger(__name__)


class CandidateGenerator(ABC):
    """A fitted recall model producing ranked, history-excluding candidates."""

    @abstractmethod
    def fit(self, histories: Sequence[UserHistory], catalog: dict[ItemId, Item]) -> None:
        """Learn from training histories over the given catalog."""

    @abstractmethod
    def top_k(self, history: UserHistory, k: int | None) -> list[ItemId]:
        """Ranked candidates for a user, excluding items already in ``history``.

        ``k=None`` returns the full ranking over the catalog.
        """

    def _require_fitted(self, ranked: list[ItemId] | None) -> list[ItemId]:
        if ranked is None:
            raise RuntimeError(f"{type(self).__name__} has not been fitted")
        return ranked

    @staticmethod
    def _exclude(ranked: Iterable[ItemId], history: UserHistory, k: int | None) -> list[ItemId]:
        seen = set(history.item_ids())
        out = [item for item in ranked if item not in seen]
        return out if k is None else out[:k]


class PopularityGenerator(CandidateGenerator):
    """Ranks the catalog by global interaction count."""

    def __init__(self) -> None:
        self._ranked: list[ItemId] | None = None

    def fit(self, histories: Sequence[UserHistory], catalog: dict[ItemId, Item]) -> None:
        if not histories:
            raise ValueError("need non-empty training histories")
        counts = Counter(b.item for h in histories for b in h.behaviors)
        self._ranked = sorted(catalog, key=lambda i: (-counts[i], i))

    def top_k(self, history: UserHistory, k: int | None) -> list[ItemId]:
        return self._exclude(self._require_fitted(self._ranked), history, k)


class MarkovGenerator(CandidateGenerator):
    """Ranks by first-order transition counts from the user's last item.

    Items never seen after the context item fall back to popularity order.
    """

    def __init__(self) -> None:
        self._transitions: dict[ItemId, Counter] | None = None
        self._popular: list[ItemId] | None = None
        self._counts: Counter | None = None

    def fit(self, histories: Sequence[UserHistory], catalog: dict[ItemId, Item]) -> None:
        if not histories:
            raise ValueError("need non-empty training histories")
        transitions: dict[ItemId, Counter] = defaultdict(Counter)
        counts = Counter(b.item for h in histories for b in h.behaviors)
        for history in histories:
            items = history.item_ids()
            for prev, nxt in zip(items, items[1:]):
                transitions[prev][nxt] += 1
        self._transitions = dict(transitions)
        self._counts = counts
        self._popular = sorted(catalog, key=lambda i: (-counts[i], i))

    def top_k(self, history: UserHistory, k: int | None) -> list[ItemId]:
        popular = self._require_fitted(self._popular)
        assert self._transitions is not None and self._counts is not None
        last = history.behaviors[-1].item
        trans = self._transitions.get(last, Counter())
        head = sorted(trans, key=lambda i: (-trans[i], -self._counts[i], i))
        head_set = set(head)
        tail = [item for item in popular if item not in head_set]
        return self._exclude(head + tail, history, k)


class EmbeddingGenerator(CandidateGenerator):
    """Ranks by dot product between the mean history feature and candidates.

    Item features may be caption-derived and supplied externally; this is the
    hook through which enhanced captions feed back into recall quality.
    """

    def __init__(self) -> None:
        self._ids: list[ItemId] | None = None
        self._features: np.ndarray | None = None
        self._index: dict[ItemId, int] = {}

    def fit(self, histories: Sequence[UserHistory], catalog: dict[ItemId, Item]) -> None:
        if not histories:
            raise ValueError("need non-empty training histories")
        missing = sorted(i for i, item in catalog.items() if item.feature is None)
        if missing:
            raise ValueError(
                f"{len(missing)} catalog item(s) lack feature vectors (e.g. {missing[0]!r})"
            )
        self._ids = sorted(catalog)
        self._features = np.array([catalog[i].feature for i in self._ids], dtype=float)
        self._index = {item: pos for pos, item in enumerate(self._ids)}

    def top_k(self, history: UserHistory, k: int | None) -> list[ItemId]:
        ids = self._require_fitted(self._ids)
        assert self._features is not None
        rows = [self._index[b.item] for b in history.behaviors if b.item in self._index]
        if not rows:
            raise ValueError(f"user {history.user!r}: no history item has a feature vector")
        profile = self._features[rows].mean(axis=0)
        scores = self._features @ profile
        ranked = [ids[i] for i in sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))]
        return self._exclude(ranked, history, k)


class RandomGenerator(CandidateGenerator):
    """Seeded uniform ranking; the chance-level baseline for reports."""

    def __init__(self, seed: int) -> None:
        self.seed = seed
        self._ranked: list[ItemId] | None = None

    def fit(self, histories: Sequence[UserHistory], catalog: dict[ItemId, Item]) -> None:
        rng = np.random.default_rng(self.seed)
        ids = sorted(catalog)
        self._ranked = [ids[i] for i in rng.permutation(len(ids))]

    def top_k(self, history: UserHistory, k: int | None) -> list[ItemId]:
        return self._exclude(self._require_fitted(self._ranked), history, k)


def fit_popularity(
    histories: Sequence[UserHistory], catalog: dict[ItemId, Item]
) -> PopularityGenerator:
    gen = PopularityGenerator()
    gen.fit(histories, catalog)
    return gen


def fit_markov(histories: Sequence[UserHistory], catalog: dict[ItemId, Item]) -> MarkovGenerator:
    gen = MarkovGenerator()
    gen.fit(histories, catalog)
    return gen


def fit_embedding(
    histories: Sequence[UserHistory], catalog: dict[ItemId, Item]
) -> EmbeddingGenerator:
    gen = EmbeddingGenerator()
    gen.fit(histories, catalog)
    return gen


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

COLD_MAX_TRAIN_INTERACTIONS = 5


@dataclass
class MetricReport:
    """Ranking and classification metrics for one user slice."""

    slice_tag: str = "all"
    n_users: int = 0
    hr: dict[int, float] = field(default_factory=dict)
    ndcg: dict[int, float] = field(default_factory=dict)
    acc: float | None = None
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    selection_acc: dict[int, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, values in (("hr", self.hr), ("ndcg", self.ndcg), ("selection_acc", self.selection_acc)):
            for k, val in values.items():
                if not 0.0 <= val <= 1.0:
                    raise ValueError(f"{name}@{k} must lie in [0, 1], got {val}")
        for name, val in (
            ("acc", self.acc),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
        ):
            if val is not None and not 0.0 <= val <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {val}")

    def to_dict(self) -> dict:
        out: dict = {"slice": self.slice_tag, "n_users": self.n_users}
        if self.hr:
            out["hr"] = {str(k): v for k, v in sorted(self.hr.items())}
            out["ndcg"] = {str(k): v for k, v in sorted(self.ndcg.items())}
        for name in ("acc", "precision", "recall", "f1"):
            val = getattr(self, name)
            if val is not None:
                out[name] = val
        if self.selection_acc:
            out["selection_acc"] = {str(m): v for m, v in sorted(self.selection_acc.items())}
        return out


def ndcg_contribution(rank: int | None, k: int) -> float:
    """Per-user gain for a single held-out item: 1/log2(rank+1) when rank <= k."""
    if rank is None or rank > k:
        return 0.0
    return 1.0 / math.log2(rank + 1)


def report_from_ranks(ranks: Sequence[int | None], ks: Sequence[int], slice_tag: str) -> MetricReport:
    """Aggregate 1-based held-out ranks into HR@k and NDCG@k."""
    n = len(ranks)
    hr: dict[int, float] = {}
    ndcg: dict[int, float] = {}
    for k in ks:
        if n == 0:
            hr[k] = 0.0
            ndcg[k] = 0.0
            continue
        hr[k] = sum(1 for r in ranks if r is not None and r <= k) / n
        ndcg[k] = sum(ndcg_contribution(r, k) for r in ranks) / n
    return MetricReport(slice_tag=slice_tag, n_users=n, hr=hr, ndcg=ndcg)


def holdout_ranks(
    generator: CandidateGenerator, histories: Sequence[UserHistory]
) -> list[tuple[int | None, bool]]:
    """Per-user (rank of held-out item, is-cold-user) pairs.

    The generator must already be fitted on the training views (behaviors
    1..N-1); the held-out target is ranked against the full catalog minus the
    user's training items.
    """
    out: list[tuple[int | None, bool]] = []
    for history in histories:
        if len(history) < 2:
            raise ValueError(f"user {history.user!r}: evaluation needs at least 2 behaviors")
        prefix = history.training_view()
        ranked = generator.top_k(prefix, None)
        target = history.target().item
        try:
            rank: int | None = ranked.index(target) + 1
        except ValueError:
            rank = None
        out.append((rank, len(prefix) <= COLD_MAX_TRAIN_INTERACTIONS))
    return out


def evaluate_leave_one_out(
    generator: CandidateGenerator,
    histories: Sequence[UserHistory],
    ks: Sequence[int] = (10, 20),
    slices: Sequence[str] = ("all",),
) -> dict[str, MetricReport]:
    """HR@k / NDCG@k over all users and (optionally) the cold-user slice."""
    pairs = holdout_ranks(generator, histories)
    reports: dict[str, MetricReport] = {}
    for tag in slices:
        if tag == "all":
            ranks = [rank for rank, _ in pairs]
        elif tag == "cold":
            ranks = [rank for rank, cold in pairs if cold]
        else:
            raise ValueError(f"unknown slice {tag!r}")
        reports[tag] = report_from_ranks(ranks, ks, tag)
    return reports


class Classification(NamedTuple):
    acc: float
    precision: float
    recall: float
    f1: float


def f1_from_precision_recall(precision: float, recall: float) -> float:
    """Harmonic mean 2pr/(p+r); 0 when both components are 0."""
    if precision + recall == 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def classification_metrics(predictions: Sequence[str], truths: Sequence[str]) -> Classification:
    """Binary accuracy/precision/recall/F1 with "like" as the positive class."""
    if len(predictions) != len(truths):
        raise ValueError("predictions and truths must have equal length")
    if not predictions:
        raise ValueError("need at least one prediction")
    for label in (*predictions, *truths):
        if label not in ("like", "dislike"):
            raise ValueError(f"labels must be like/dislike, got {label!r}")
    tp = sum(1 for p, t in zip(predictions, truths) if p == "like" and t == "like")
    fp = sum(1 for p, t in zip(predictions, truths) if p == "like" and t == "dislike")
    fn = sum(1 for p, t in zip(predictions, truths) if p == "dislike" and t == "like")
    tn = len(truths) - tp - fp - fn
    acc = (tp + tn) / len(truths)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return Classification(
        acc=acc,
        precision=precision,
        recall=recall,
        f1=f1_from_precision_recall(precision, recall),
    )


# ---------------------------------------------------------------------------
# Feedback augmentation
# ---------------------------------------------------------------------------


def augment_with_feedback(
    histories: Sequence[UserHistory],
    liked_feedback: Sequence[tuple[UserId, ItemId]],
    catalog: dict[ItemId, Item] | None = None,
) -> list[UserHistory]:
    """Append simulated liked items as pseudo-behaviors at fresh max ordinals.

    Refitting a generator on the result is the feedback-driven augmentation
    step. Pre-existing behaviors are preserved bit-exactly; duplicate feedback
    pairs are applied once with a warning; unknown users (or, with a catalog,
    unknown items) raise ValueError.
    """
    by_user = {h.user: list(h.behaviors) for h in histories}
    order = [h.user for h in histories]
    seen_pairs: set[tuple[UserId, ItemId]] = set()
    for user, item in liked_feedback:
        if (user, item) in seen_pairs:
            logger.warning("duplicate feedback pair (%r, %r) ignored", user, item)
            continue
        seen_pairs.add((user, item))
        if user not in by_user:
            raise ValueError(f"feedback names unknown user {user!r}")
        if catalog is not None and item not in catalog:
            raise ValueError(f"feedback names unknown item {item!r}")
        behaviors = by_user[user]
        next_ordinal = max(b.timestamp for b in behaviors) + 1
        behaviors.append(BehaviorRecord(item=item, timestamp=next_ordinal))
    return [UserHistory(user=user, behaviors=tuple(by_user[user])) for user in order]


def load_feedback(path: str | Path) -> list[tuple[UserId, ItemId]]:
    """Read liked-feedback pairs from JSONL rows {"user": str, "item": str}."""
    pairs: list[tuple[UserId, ItemId]] = []
    with Path(path).open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                pairs.append((str(row["user"]), str(row["item"])))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"line {lineno}: malformed feedback row ({exc})") from exc
    return pairs


def load_item_features(catalog: dict[ItemId, Item], path: str | Path) -> dict[ItemId, Item]:
    """Attach feature vectors from a JSONL ({"item","vec"}) or .npz file.

    Unknown items are skipped with a warning; returns a new catalog.
    """
    from dataclasses import replace

    path = Path(path)
    vectors: dict[ItemId, tuple[float, ...]] = {}
    if path.suffix == ".npz":
        with np.load(path) as data:
            for item_id in data.files:
                vectors[item_id] = tuple(float(x) for x in data[item_id])
    else:
        with path.open("r", encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    vectors[str(row["item"])] = tuple(float(x) for x in row["vec"])
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise ValueError(f"line {lineno}: malformed feature row ({exc})") from exc
    updated = dict(catalog)
    unknown = 0
    for item_id, vec in vectors.items():
        if item_id not in updated:
            unknown += 1
            continue
        updated[item_id] = replace(updated[item_id], feature=vec)
    if unknown:
        logger.warning("load_item_features: skipped %d unknown item(s)", unknown)
    return updated
