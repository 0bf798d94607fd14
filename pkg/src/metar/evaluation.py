"""Filtered ranking evaluation: MRR and Hits@N over per-relation candidate sets."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .episode import fill_support_negatives, make_eval_episodes
from .kg import DatasetBundle
from .model import NO_GRADIENT_META, STANDARD, Hyperparams, ModelParams, support_pass

EVAL_MODES = ("standard", "minus_g", "minus_g_minus_r")
HITS_AT = (1, 5, 10)
EVAL_NEGATIVE_STREAM = 3


class MissingTrueTailError(ValueError):
    pass


@dataclass(frozen=True)
class Metrics:
    mrr: float
    hits1: float
    hits5: float
    hits10: float
    n_queries: int

    @classmethod
    def from_ranks(cls, ranks: Iterable[int]) -> Metrics:
        ranks = [int(r) for r in ranks]
        n = len(ranks)
        if n == 0:
            return cls(0.0, 0.0, 0.0, 0.0, 0)
        # correctly rounded sum, so the result does not depend on query order
        mrr = math.fsum(1.0 / r for r in ranks) / n
        return cls(mrr, *(sum(r <= k for r in ranks) / n for k in HITS_AT), n)

    def as_dict(self) -> dict:
        return {
            "mrr": self.mrr,
            "hits1": self.hits1,
            "hits5": self.hits5,
            "hits10": self.hits10,
            "n_queries": self.n_queries,
        }


@dataclass(frozen=True)
class EvalReport:
    mrr: float
    hits1: float
    hits5: float
    hits10: float
    n_queries: int
    per_relation: dict[str, Metrics] = field(default_factory=dict)

    @classmethod
    def from_ranks(cls, ranks_by_relation: dict[str, list[int]]) -> EvalReport:
        all_ranks = [r for ranks in ranks_by_relation.values() for r in ranks]
        overall = Metrics.from_ranks(all_ranks)
        return cls(
            overall.mrr,
            overall.hits1,
            overall.hits5,
            overall.hits10,
            overall.n_queries,
            {name: Metrics.from_ranks(r) for name, r in ranks_by_relation.items()},
        )

    def as_dict(self) -> dict:
        return {
            "mrr": self.mrr,
            "hits1": self.hits1,
            "hits5": self.hits5,
            "hits10": self.hits10,
            "n_queries": self.n_queries,
            "per_relation": {name: m.as_dict() for name, m in sorted(self.per_relation.items())},
        }

    @classmethod
    def from_dict(cls, data: dict) -> EvalReport:
        per_rel = {
            name: Metrics(m["mrr"], m["hits1"], m["hits5"], m["hits10"], m["n_queries"])
            for name, m in data.get("per_relation", {}).items()
        }
        return cls(data["mrr"], data["hits1"], data["hits5"], data["hits10"], data["n_queries"], per_rel)


def rank_of(true_score: float, other_scores: np.ndarray) -> int:
    """1 + number of competitors scoring strictly lower (ties do not hurt)."""
    return 1 + int(np.count_nonzero(np.asarray(other_scores) < true_score))


def candidate_scores(head_vec: np.ndarray, relation_vec: np.ndarray, cand_vecs: np.ndarray) -> np.ndarray:
    return np.linalg.norm(head_vec + relation_vec - cand_vecs, axis=-1)


def rank_query(head, relation_vec, true_tail, candidates, filtered_truths, embeddings) -> int:
    """Filtered rank of ``true_tail`` among ``candidates`` for one query."""
    candidates = np.asarray(candidates, dtype=np.int64)
    if not np.any(candidates == true_tail):
        raise MissingTrueTailError(f"true tail {true_tail} missing from the candidate list")
    truths = filtered_truths or ()
    keep = np.array([c != true_tail and c not in truths for c in candidates.tolist()], dtype=bool)
    others = candidates[keep]
    head_vec = embeddings[head]
    true_score = np.linalg.norm(head_vec + relation_vec - embeddings[true_tail])
    return rank_of(true_score, candidate_scores(head_vec, relation_vec, embeddings[others]))


def _rank_episode(episode, relation_vec, bundle: DatasetBundle, embeddings) -> list[int]:
    cands = np.asarray(bundle.candidates[episode.relation], dtype=np.int64)
    cand_vecs = embeddings[cands]
    ranks = []
    for h, t in episode.query_pos.tolist():
        pos = np.flatnonzero(cands == t)
        if len(pos) == 0:
            raise MissingTrueTailError(
                f"true tail {bundle.vocab.entity_names[t]!r} missing from candidates of "
                f"{bundle.vocab.relation_names[episode.relation]!r}"
            )
        scores = candidate_scores(embeddings[h], relation_vec, cand_vecs)
        truths = bundle.truths(h, episode.relation)
        drop = np.fromiter((c in truths or c == t for c in cands.tolist()), dtype=bool, count=len(cands))
        ranks.append(rank_of(scores[pos[0]], scores[~drop]))
    return ranks


def evaluate(
    params: ModelParams | None,
    bundle: DatasetBundle,
    split: str,
    k: int,
    mode: str = "standard",
    hp: Hyperparams | None = None,
    transe=None,
    seed: int = 0,
) -> EvalReport:
    """K-shot evaluation on the dev or test relations.

    ``minus_g_minus_r`` ranks with a pretrained TransE model (``transe``)
    instead of the meta learner; the other modes need ``params`` and ``hp``.
    """
    if mode not in EVAL_MODES:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    episodes = make_eval_episodes(bundle, split, k)
    rng = np.random.default_rng([seed, EVAL_NEGATIVE_STREAM])
    names = bundle.vocab.relation_names
    ranks: dict[str, list[int]] = {}
    for episode in episodes:
        if mode == "minus_g_minus_r":
            if transe is None:
                raise ValueError("minus_g_minus_r evaluation needs a pretrained TransE model")
            relation_vec = transe.relation_vector(episode.relation)
            embeddings = transe.entity
        else:
            episode = fill_support_negatives(bundle, episode, rng)
            forward_mode = STANDARD if mode == "standard" else NO_GRADIENT_META
            relation_vec = support_pass(episode, params, hp, forward_mode).updated_meta
            embeddings = params.emb
        ranks[names[episode.relation]] = _rank_episode(episode, relation_vec, bundle, embeddings)
    return EvalReport.from_ranks(ranks)


def format_report(report: EvalReport, label: str = "MetaR") -> str:
    lines = [
        f"{'':<24}{'MRR':>8}{'Hits@10':>9}{'Hits@5':>8}{'Hits@1':>8}{'queries':>9}",
        f"{label:<24}{report.mrr:>8.3f}{report.hits10:>9.3f}{report.hits5:>8.3f}{report.hits1:>8.3f}{report.n_queries:>9d}",
    ]
    if report.n_queries == 0:
        lines.append("WARNING: no queries evaluated (n_queries=0)")
    for name, m in sorted(report.per_relation.items()):
        lines.append(f"  {name:<22}{m.mrr:>8.3f}{m.hits10:>9.3f}{m.hits5:>8.3f}{m.hits1:>8.3f}{m.n_queries:>9d}")
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, path: str | os.PathLike, fmt: str = "json") -> None:
    if fmt == "json":
        text = json.dumps(report.as_dict(), indent=2) + "\n"
    elif fmt == "text":
        text = format_report(report)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def read_report(path: str | os.PathLike) -> EvalReport:
    with open(path, encoding="utf-8") as fh:
        return EvalReport.from_dict(json.load(fh))
