import json

import numpy as np
import pytest

from metar.evaluation import (
    EvalReport,
    Metrics,
    MissingTrueTailError,
    evaluate,
    format_report,
    rank_query,
    read_report,
    write_report,
)
from metar.model import Hyperparams
from metar.train import init_params


def sort_oracle_rank(scores, true_idx, excluded=()):
    """Position of the true candidate after a stable sort that puts it first among equals."""
    order = [i for i in range(len(scores)) if i == true_idx or i not in excluded]
    keyed = sorted(order, key=lambda i: (scores[i], i != true_idx))
    return keyed.index(true_idx) + 1


def line_embeddings(scores):
    """1-d embeddings where candidate i sits at distance scores[i] from head 0 + r."""
    emb = np.zeros((len(scores) + 1, 1))
    emb[1:, 0] = scores
    return emb


def test_rank_matches_sort_oracle_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        n = 20
        scores = rng.integers(0, 6, size=n).astype(float)
        true_idx = int(rng.integers(n))
        excluded = set(rng.choice(n, size=rng.integers(0, 4), replace=False).tolist()) - {true_idx}
        emb = line_embeddings(scores)
        cands = list(range(1, n + 1))
        truths = {c + 1 for c in excluded}
        got = rank_query(0, np.zeros(1), true_idx + 1, cands, truths, emb)
        assert got == sort_oracle_rank(scores, true_idx, excluded)


def test_singleton_and_argmin():
    emb = line_embeddings(np.linspace(0.1, 5, 50))
    assert rank_query(0, np.zeros(1), 1, [1], set(), emb) == 1
    assert rank_query(0, np.zeros(1), 1, list(range(1, 51)), set(), emb) == 1


def test_missing_true_tail():
    with pytest.raises(MissingTrueTailError):
        rank_query(0, np.zeros(1), 3, [1, 2], set(), line_embeddings([1.0, 2.0, 3.0]))


def test_filtering_never_increases_rank():
    rng = np.random.default_rng(1)
    for _ in range(2000):
        scores = rng.normal(size=15)
        emb = line_embeddings(np.abs(scores))
        true = int(rng.integers(1, 16))
        truths = set(rng.integers(1, 16, size=3).tolist())
        cands = list(range(1, 16))
        assert rank_query(0, np.zeros(1), true, cands, truths, emb) <= rank_query(0, np.zeros(1), true, cands, set(), emb)


def test_rank_invariant_under_candidate_permutation():
    rng = np.random.default_rng(2)
    emb = line_embeddings(rng.integers(0, 4, size=12).astype(float))
    cands = list(range(1, 13))
    base = rank_query(0, np.zeros(1), 5, cands, {2}, emb)
    for _ in range(20):
        assert rank_query(0, np.zeros(1), 5, rng.permutation(cands).tolist(), {2}, emb) == base


def test_metrics_by_definition():
    m = Metrics.from_ranks([1, 2, 4])
    assert m.mrr == pytest.approx(0.583333, abs=1e-6)
    assert m.hits1 == pytest.approx(1 / 3)
    assert m.hits5 == 1.0 and m.hits10 == 1.0


def test_hits_monotone():
    rng = np.random.default_rng(3)
    for _ in range(200):
        m = Metrics.from_ranks(rng.integers(1, 50, size=rng.integers(1, 30)))
        assert m.hits1 <= m.hits5 <= m.hits10
        assert m.hits1 <= m.mrr <= 1


def test_report_aggregate_is_query_weighted():
    report = EvalReport.from_ranks({"a": [1, 3], "b": [2, 20, 5, 1]})
    total = sum(m.n_queries for m in report.per_relation.values())
    weighted = sum(m.hits10 * m.n_queries for m in report.per_relation.values()) / total
    assert report.hits10 == pytest.approx(weighted)
    assert report.n_queries == 6


def zero_network_params(bundle, hp):
    """Meta learner with all-zero weights, so every relation meta is 0."""
    params = init_params(hp, bundle.vocab, np.random.default_rng(0))
    for w in params.weights:
        w[:] = 0
    for b in params.biases:
        b[:] = 0
    return params


def test_perfect_model(small_bundle):
    hp = Hyperparams(dim=8, beta=0.0, hidden_sizes=(4,))
    params = zero_network_params(small_bundle, hp)
    # R = 0, so put each true tail exactly on its head and everyone else far away
    from metar.kg import build_bundle
    vocab = small_bundle.vocab
    n = vocab.n_entities
    emb = np.zeros((n, 8))
    emb[:, 0] = np.arange(n) * 10.0
    params.emb[:] = emb
    groups = {"train": small_bundle.task_groups["train"], "dev": small_bundle.task_groups["dev"], "test": {}}
    test_rel = next(iter(small_bundle.task_groups["test"]))
    # use self-loops so h + R = t exactly
    pairs = [(i, i) for i in range(5)]
    groups["test"] = {test_rel: pairs}
    cands = {**small_bundle.candidates, test_rel: list(range(20))}
    bundle = build_bundle(vocab, groups, [], "intrain", cands)
    report = evaluate(params, bundle, "test", 1, "standard", hp)
    assert report.n_queries == 4
    assert report.mrr == 1.0 and report.hits1 == 1.0 and report.hits10 == 1.0


def test_minus_g_equals_standard_at_beta_zero(small_bundle):
    hp = Hyperparams(dim=8, beta=0.0, hidden_sizes=(16,))
    params = init_params(hp, small_bundle.vocab, np.random.default_rng(4))
    a = evaluate(params, small_bundle, "test", 1, "standard", hp)
    b = evaluate(params, small_bundle, "test", 1, "minus_g", hp)
    assert a == b


def test_evaluation_deterministic_and_pure(small_bundle):
    hp = Hyperparams(dim=8, hidden_sizes=(16,))
    params = init_params(hp, small_bundle.vocab, np.random.default_rng(5))
    before = [t.copy() for _, t in params.tensors()]
    a = evaluate(params, small_bundle, "dev", 2, "standard", hp, seed=3)
    b = evaluate(params, small_bundle, "dev", 2, "standard", hp, seed=3)
    assert a == b
    for old, (_, new) in zip(before, params.tensors()):
        assert np.array_equal(old, new)


def test_untrained_model_near_chance(small_bundle):
    hp = Hyperparams(dim=8, hidden_sizes=(16,))
    params = init_params(hp, small_bundle.vocab, np.random.default_rng(6))
    report = evaluate(params, small_bundle, "test", 1, "standard", hp)
    assert report.n_queries > 0
    assert report.hits10 < 0.9


def test_minus_g_minus_r_needs_transe(small_bundle):
    with pytest.raises(ValueError):
        evaluate(None, small_bundle, "test", 1, "minus_g_minus_r")


def test_json_round_trip(tmp_path):
    report = EvalReport.from_ranks({"r1": [1, 2, 4], "r0": [7]})
    write_report(report, tmp_path / "r.json")
    assert read_report(tmp_path / "r.json") == report
    write_report(report, tmp_path / "s.json")
    assert (tmp_path / "r.json").read_bytes() == (tmp_path / "s.json").read_bytes()
    data = json.loads((tmp_path / "r.json").read_text())
    assert list(data) == ["mrr", "hits1", "hits5", "hits10", "n_queries", "per_relation"]
    assert list(data["per_relation"]) == ["r0", "r1"]


def test_empty_report(tmp_path):
    report = EvalReport.from_ranks({})
    assert report.n_queries == 0
    assert "n_queries=0" in format_report(report)
    write_report(report, tmp_path / "e.txt", fmt="text")
    assert "WARNING" in (tmp_path / "e.txt").read_text()
    write_report(report, tmp_path / "e.json")
    assert read_report(tmp_path / "e.json") == report


def test_text_report_layout():
    text = format_report(EvalReport.from_ranks({"r": [1, 2, 4]}), label="MetaR")
    header, row = text.splitlines()[:2]
    assert header.split() == ["MRR", "Hits@10", "Hits@5", "Hits@1", "queries"]
    assert row.split()[:3] == ["MetaR", "0.583", "1.000"]
