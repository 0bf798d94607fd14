"""Few-shot task construction: support/query sampling and tail corruption."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .kg import DatasetBundle

logger = logging.getLogger(__name__)

MAX_REJECTION_TRIES = 32


class NoEligibleRelationError(ValueError):
    pass


class CorruptionPoolExhaustedError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    k: int = 1
    n_query_pos: int = 3
    n_neg_per_pos: int = 1
    seed: int = 0

    def validate(self) -> None:
        for key in ("k", "n_query_pos", "n_neg_per_pos"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be >= 1")


@dataclass(frozen=True)
class EpisodeTask:
    """One few-shot task for a single relation.

    ``support_neg`` holds one corrupted tail per support pair (the head is
    shared with the positive), ``query_neg`` an ``(n_query, n_neg)`` block of
    corrupted tails. Evaluation episodes carry no query negatives.
    """

    relation: int
    support_pos: np.ndarray
    support_neg: np.ndarray
    query_pos: np.ndarray
    query_neg: np.ndarray

    @property
    def k(self) -> int:
        return len(self.support_pos)

    def entities(self) -> np.ndarray:
        return np.unique(
            np.concatenate(
                [
                    self.support_pos.ravel(),
                    self.support_neg.ravel(),
                    self.query_pos.ravel(),
                    self.query_neg.ravel(),
                ]
            )
        )

    def with_support_neg(self, support_neg) -> EpisodeTask:
        return EpisodeTask(
            self.relation,
            self.support_pos,
            np.asarray(support_neg, dtype=np.int64),
            self.query_pos,
            self.query_neg,
        )


def _pairs(pairs) -> np.ndarray:
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


def corruption_pool(bundle: DatasetBundle, relation: int) -> np.ndarray:
    pool = bundle.candidates.get(relation)
    if pool:
        return np.asarray(pool, dtype=np.int64)
    return np.arange(bundle.vocab.n_entities, dtype=np.int64)


def corrupt_tail(head: int, relation: int, bundle: DatasetBundle, rng: np.random.Generator, pool=None) -> int:
    """Draw a tail uniformly from the corruption pool minus the true tails of (head, relation)."""
    if pool is None:
        pool = corruption_pool(bundle, relation)
    truths = bundle.store.tails(head, relation)
    for _ in range(MAX_REJECTION_TRIES):
        cand = int(pool[rng.integers(len(pool))])
        if cand not in truths:
            return cand
    legal = [int(e) for e in pool if int(e) not in truths]
    if not legal:
        raise CorruptionPoolExhaustedError(
            f"every entity in the corruption pool of relation {relation} is a true tail of head {head}"
        )
    return legal[int(rng.integers(len(legal)))]


def eligible_relations(bundle: DatasetBundle, split: str, k: int) -> list[int]:
    return [r for r, pairs in bundle.task_groups[split].items() if len(pairs) >= k + 1]


def sample_episode(
    bundle: DatasetBundle,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    split: str = "train",
    eligible: list[int] | None = None,
) -> EpisodeTask:
    if eligible is None:
        eligible = eligible_relations(bundle, split, cfg.k)
    if not eligible:
        raise NoEligibleRelationError(f"no {split} relation has at least {cfg.k + 1} triples")
    relation = eligible[int(rng.integers(len(eligible)))]
    pairs = bundle.task_groups[split][relation]
    n_query = min(cfg.n_query_pos, len(pairs) - cfg.k)
    picked = rng.choice(len(pairs), size=cfg.k + n_query, replace=False)
    support = _pairs([pairs[i] for i in picked[: cfg.k]])
    query = _pairs([pairs[i] for i in picked[cfg.k:]])

    pool = corruption_pool(bundle, relation)
    support_neg = np.array([corrupt_tail(h, relation, bundle, rng, pool) for h in support[:, 0]], dtype=np.int64)
    query_neg = np.array(
        [[corrupt_tail(h, relation, bundle, rng, pool) for _ in range(cfg.n_neg_per_pos)] for h in query[:, 0]],
        dtype=np.int64,
    ).reshape(len(query), cfg.n_neg_per_pos)
    return EpisodeTask(relation, support, support_neg, query, query_neg)


@dataclass
class EvalEpisodes:
    episodes: list[EpisodeTask] = field(default_factory=list)
    skipped: int = 0

    def __iter__(self):
        return iter(self.episodes)

    def __len__(self) -> int:
        return len(self.episodes)

    def __getitem__(self, i):
        return self.episodes[i]


def make_eval_episodes(bundle: DatasetBundle, split: str, k: int) -> EvalEpisodes:
    """First ``k`` triples of each relation as support, every other triple as a query."""
    out = EvalEpisodes()
    for relation, pairs in bundle.task_groups[split].items():
        if len(pairs) <= k:
            out.skipped += 1
            continue
        out.episodes.append(
            EpisodeTask(
                relation,
                _pairs(pairs[:k]),
                np.zeros(0, dtype=np.int64),
                _pairs(pairs[k:]),
                np.zeros((len(pairs) - k, 0), dtype=np.int64),
            )
        )
    if out.skipped:
        logger.warning("skipped %d %s relations with <= %d triples", out.skipped, split, k)
    return out


def fill_support_negatives(bundle: DatasetBundle, episode: EpisodeTask, rng: np.random.Generator) -> EpisodeTask:
    pool = corruption_pool(bundle, episode.relation)
    negs = [corrupt_tail(h, episode.relation, bundle, rng, pool) for h in episode.support_pos[:, 0]]
    return episode.with_support_neg(negs)
