import itertools
import json
import os
from pathlib import Path

import numpy as np
import pytest

from metar.kg import (
    BackgroundMode,
    DatasetError,
    SynthConfig,
    TripleStore,
    Vocabulary,
    build_bundle,
    dataset_stats,
    generate_synthetic,
    load_benchmark,
    synthetic_latents,
    write_benchmark,
)

from conftest import write_toy_benchmark


def split_disjoint(bundle):
    for a, b in itertools.combinations(("train", "dev", "test"), 2):
        assert not set(bundle.task_groups[a]) & set(bundle.task_groups[b])


def test_vocabulary_bijection():
    vocab = Vocabulary(("a", "b", "c"), ("r",))
    for i, name in enumerate(vocab.entity_names):
        assert vocab.entity_id(name) == i
    with pytest.raises(DatasetError):
        Vocabulary(("a", "a"), ())


def test_triple_store_dedup_and_membership_exhaustive():
    triples = [(0, 0, 1), (0, 0, 2), (0, 0, 1), (2, 1, 0), (1, 0, 1)]
    store = TripleStore(triples, 3, 2)
    assert len(store) == 4
    for h, r, t in itertools.product(range(3), range(2), range(3)):
        assert (t in store.tails(h, r)) == ((h, r, t) in store.triples)


def test_triple_store_rejects_out_of_bounds():
    with pytest.raises(DatasetError):
        TripleStore([(0, 0, 5)], 3, 1)


class TestLoadBenchmark:
    def test_intrain_merges_background(self, toy_dir):
        b = load_benchmark(toy_dir, BackgroundMode.IN_TRAIN)
        v = b.vocab
        train_rels = {v.relation_names[r] for r in b.task_groups["train"]}
        assert train_rels == {"capital", "locatedin"}
        capital = b.task_groups["train"][v.relation_id("capital")]
        # (france, capital, paris) is in both files and merged once
        assert len(capital) == 3
        split_disjoint(b)

    def test_discard_drops_background(self, toy_dir):
        b = load_benchmark(toy_dir, "discard")
        v = b.vocab
        assert {v.relation_names[r] for r in b.task_groups["train"]} == {"capital"}
        assert b.background_triples == []
        locatedin = v.relation_id("locatedin")
        assert all(r != locatedin for _, r, _ in b.store.triples)

    def test_pretrain_keeps_background_apart(self, toy_dir):
        b = load_benchmark(toy_dir, BackgroundMode.PRE_TRAIN)
        v = b.vocab
        assert {v.relation_names[r] for r in b.task_groups["train"]} == {"capital"}
        assert len(b.background_triples) == 4
        assert (v.entity_id("paris"), v.relation_id("locatedin"), v.entity_id("france")) in b.store

    def test_eval_triples_in_store_not_in_train(self, toy_dir):
        b = load_benchmark(toy_dir, "intrain")
        v = b.vocab
        triple = (v.entity_id("japan"), v.relation_id("language"), v.entity_id("japanese"))
        assert triple in b.store
        assert v.relation_id("language") not in b.task_groups["train"]

    def test_ids_by_first_appearance(self, toy_dir):
        b = load_benchmark(toy_dir, "intrain")
        assert b.vocab.entity_names[:3] == ("france", "paris", "japan")
        assert b.vocab.relation_names[0] == "capital"

    def test_id_files_override(self, toy_dir):
        b = load_benchmark(toy_dir, "intrain")
        names = list(reversed(b.vocab.entity_names))
        (toy_dir / "ent2ids").write_text(json.dumps({n: i for i, n in enumerate(names)}))
        b2 = load_benchmark(toy_dir, "intrain")
        assert b2.vocab.entity_names == tuple(names)

    def test_filtered_truths_from_file_and_store(self, toy_dir):
        b = load_benchmark(toy_dir, "intrain")
        v = b.vocab
        assert b.truths(v.entity_id("nadella"), v.relation_id("ceo")) == {v.entity_id("microsoft")}

    def test_empty_task_file(self, tmp_path):
        root = write_toy_benchmark(tmp_path / "d", dev={})
        with pytest.raises(DatasetError, match="no tasks in split"):
            load_benchmark(root, "intrain")

    def test_missing_file(self, toy_dir):
        (toy_dir / "path_graph").unlink()
        with pytest.raises(DatasetError, match="missing file"):
            load_benchmark(toy_dir, "intrain")

    def test_malformed_background_line(self, toy_dir):
        (toy_dir / "path_graph").write_text("a\tb\n")
        with pytest.raises(DatasetError, match="tab-separated"):
            load_benchmark(toy_dir, "intrain")

    def test_unknown_candidate_entity(self, tmp_path):
        root = write_toy_benchmark(tmp_path / "d", candidates={"ceo": ["microsoft", "twitter", "nowhere"]})
        with pytest.raises(DatasetError, match="unknown entity"):
            load_benchmark(root, "intrain")

    def test_relation_overlap(self, tmp_path):
        root = write_toy_benchmark(
            tmp_path / "d",
            dev={"capital": [["italy", "capital", "rome"]]},
            candidates={"capital": ["rome", "paris"]},
        )
        with pytest.raises(DatasetError, match="overlap"):
            load_benchmark(root, "intrain")


def test_round_trip_task_groups(small_bundle, tmp_path):
    write_benchmark(small_bundle, tmp_path / "b")
    again = load_benchmark(tmp_path / "b", small_bundle.mode)
    assert again.vocab == small_bundle.vocab
    assert again.task_groups == small_bundle.task_groups
    assert again.candidates == small_bundle.candidates
    assert again.store == small_bundle.store
    assert again.filtered_truths == small_bundle.filtered_truths


class TestSynthetic:
    def test_deterministic(self, tmp_path):
        a = write_benchmark(generate_synthetic(SynthConfig(seed=7)), tmp_path / "a")
        b = write_benchmark(generate_synthetic(SynthConfig(seed=7)), tmp_path / "b")
        for f in sorted(os.listdir(a)):
            assert (a / f).read_bytes() == (b / f).read_bytes()

    def test_noiseless_tails_are_nearest(self):
        cfg = SynthConfig(n_entities=80, dim=8, n_train_rel=4, n_dev_rel=1, n_test_rel=1,
                          triples_per_rel=10, candidate_pool=20, seed=2)
        bundle = generate_synthetic(cfg)
        lat = synthetic_latents(cfg)
        z = lat.entities
        for h, r, t in bundle.store.triples:
            dist = np.linalg.norm(z - (z[h] + lat.relations[r]), axis=1)
            dist[h] = np.inf
            assert dist[t] == pytest.approx(dist.min(), abs=1e-12)

    def test_reference_config_counts(self):
        cfg = SynthConfig(n_entities=200, dim=16, n_train_rel=20, n_dev_rel=3, n_test_rel=5,
                          triples_per_rel=30, candidate_pool=50, noise_sigma=0.0)
        bundle = generate_synthetic(cfg)
        sizes = {s: len(bundle.task_groups[s]) for s in ("train", "dev", "test")}
        assert sizes == {"train": 20, "dev": 3, "test": 5}
        assert sum(sizes.values()) == 28
        split_disjoint(bundle)
        for pairs in itertools.chain(*(g.values() for g in bundle.task_groups.values())):
            assert len(pairs) == 30
        for split in ("dev", "test"):
            for r, pairs in bundle.task_groups[split].items():
                assert len(bundle.candidates[r]) == 50
                assert {t for _, t in pairs} <= set(bundle.candidates[r])

    def test_infeasible(self):
        with pytest.raises(ValueError, match="infeasible"):
            generate_synthetic(SynthConfig(n_entities=20, triples_per_rel=21, candidate_pool=10))


class TestStats:
    def test_counts(self, small_bundle):
        stats = dataset_stats(small_bundle)
        assert stats.relations == {"train": 6, "dev": 2, "test": 2}
        assert stats.triples["train"] == 48

    def test_every_entity_twice_gives_zero(self):
        vocab = Vocabulary(("a", "b", "c"), ("r", "s", "q"))
        groups = {"train": {0: [(0, 1), (1, 2), (2, 0)]}, "dev": {1: [(0, 1)]}, "test": {2: [(0, 1)]}}
        bundle = build_bundle(vocab, groups, [], BackgroundMode.IN_TRAIN, {1: [1, 2], 2: [1, 2]})
        assert dataset_stats(bundle).one_shot_proportion == 0.0

    def test_one_shot_fraction(self):
        vocab = Vocabulary(("a", "b", "c", "d"), ("r", "s", "q"))
        groups = {"train": {0: [(0, 1), (1, 2)]}, "dev": {1: [(0, 3)]}, "test": {2: [(0, 3)]}}
        bundle = build_bundle(vocab, groups, [], "intrain", {})
        # a and c appear once, b twice; d is not training-visible
        assert dataset_stats(bundle).one_shot_proportion == pytest.approx(2 / 3)


def _benchmark_dir(name):
    root = os.environ.get("METAR_DATA_DIR")
    if not root:
        return None
    for cand in (Path(root) / name, Path(root)):
        if (cand / "train_tasks.json").exists() and name.lower() in str(cand).lower():
            return cand
    return None


@pytest.mark.fullscale
@pytest.mark.parametrize("mode,train_rels", [("intrain", 321), ("discard", 51)])
def test_nell_one_relation_counts(mode, train_rels):
    root = _benchmark_dir("NELL")
    if root is None:
        pytest.skip("NELL-One benchmark not available under METAR_DATA_DIR")
    b = load_benchmark(root, mode)
    assert (len(b.task_groups["train"]), len(b.task_groups["dev"]), len(b.task_groups["test"])) == (train_rels, 5, 11)


@pytest.mark.fullscale
@pytest.mark.parametrize("name,expected", [("NELL", 0.371), ("Wiki", 0.828)])
def test_one_shot_proportions_full(name, expected):
    root = _benchmark_dir(name)
    if root is None:
        pytest.skip(f"{name}-One benchmark not available under METAR_DATA_DIR")
    assert dataset_stats(load_benchmark(root, "pretrain")).one_shot_proportion == pytest.approx(expected, abs=0.01)
