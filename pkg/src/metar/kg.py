"""Knowledge-graph data model, benchmark loading and synthetic datasets."""

from __future__ import annotations

import enum
import json
import logging
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

logger = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")

TASK_FILES = {
    "train": "train_tasks.json",
    "dev": "dev_tasks.json",
    "test": "test_tasks.json",
}
BACKGROUND_FILE = "path_graph"
CANDIDATES_FILE = "rel2candidates.json"
TRUTHS_FILE = "e1rel_e2.json"
ENTITY_IDS_FILE = "ent2ids"
RELATION_IDS_FILE = "relation2ids"


class DatasetError(ValueError):
    """Raised for missing, malformed or inconsistent dataset content."""


class BackgroundMode(enum.Enum):
    PRE_TRAIN = "pretrain"
    IN_TRAIN = "intrain"
    DISCARD = "discard"

    @classmethod
    def parse(cls, value: str | BackgroundMode) -> BackgroundMode:
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "").replace("_", "").replace("bg:", "")
        for mode in cls:
            if mode.value == key:
                return mode
        raise ValueError(f"unknown background mode {value!r}")


@dataclass(frozen=True)
class Vocabulary:
    entity_names: tuple[str, ...]
    relation_names: tuple[str, ...]
    _ent_index: dict[str, int] = field(init=False, repr=False, compare=False)
    _rel_index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ent = {name: i for i, name in enumerate(self.entity_names)}
        rel = {name: i for i, name in enumerate(self.relation_names)}
        if len(ent) != len(self.entity_names):
            raise DatasetError("duplicate entity names in vocabulary")
        if len(rel) != len(self.relation_names):
            raise DatasetError("duplicate relation names in vocabulary")
        object.__setattr__(self, "_ent_index", ent)
        object.__setattr__(self, "_rel_index", rel)

    @property
    def n_entities(self) -> int:
        return len(self.entity_names)

    @property
    def n_relations(self) -> int:
        return len(self.relation_names)

    def entity_id(self, name: str) -> int:
        return self._ent_index[name]

    def relation_id(self, name: str) -> int:
        return self._rel_index[name]

    def has_entity(self, name: str) -> bool:
        return name in self._ent_index

    def has_relation(self, name: str) -> bool:
        return name in self._rel_index


class TripleStore:
    """Deduplicated triple list with a (head, relation) -> tails index."""

    def __init__(self, triples: Iterable[tuple[int, int, int]], n_entities: int, n_relations: int):
        seen = set()
        ordered = []
        membership: dict[tuple[int, int], set[int]] = defaultdict(set)
        for h, r, t in triples:
            h, r, t = int(h), int(r), int(t)
            if not (0 <= h < n_entities and 0 <= t < n_entities and 0 <= r < n_relations):
                raise DatasetError(f"triple ({h}, {r}, {t}) out of vocabulary bounds")
            if (h, r, t) in seen:
                continue
            seen.add((h, r, t))
            ordered.append((h, r, t))
            membership[(h, r)].add(t)
        self.triples: tuple[tuple[int, int, int], ...] = tuple(ordered)
        self._membership = {key: frozenset(tails) for key, tails in membership.items()}
        self._set = frozenset(seen)

    def __len__(self) -> int:
        return len(self.triples)

    def __contains__(self, triple) -> bool:
        return tuple(triple) in self._set

    def tails(self, head: int, relation: int) -> frozenset[int]:
        return self._membership.get((head, relation), frozenset())

    def keys(self):
        return self._membership.keys()

    def __eq__(self, other) -> bool:
        return isinstance(other, TripleStore) and self.triples == other.triples


@dataclass(frozen=True)
class DatasetBundle:
    vocab: Vocabulary
    store: TripleStore
    task_groups: dict[str, dict[int, list[tuple[int, int]]]]
    background_triples: list[tuple[int, int, int]]
    mode: BackgroundMode
    candidates: dict[int, list[int]]
    filtered_truths: dict[tuple[int, int], frozenset[int]]

    def relations(self, split: str) -> list[int]:
        return list(self.task_groups[split])

    def split_triples(self, split: str) -> list[tuple[int, int, int]]:
        return [(h, r, t) for r, pairs in self.task_groups[split].items() for h, t in pairs]

    def truths(self, head: int, relation: int) -> frozenset[int]:
        return self.filtered_truths.get((head, relation), self.store.tails(head, relation))


def _check_disjoint(groups: Mapping[str, Mapping[int, object]], vocab: Vocabulary) -> None:
    for i, a in enumerate(SPLITS):
        for b in SPLITS[i + 1:]:
            overlap = set(groups[a]) & set(groups[b])
            if overlap:
                names = sorted(vocab.relation_names[r] for r in overlap)
                raise DatasetError(f"relation overlap between {a} and {b}: {names[:5]}")


def build_bundle(
    vocab: Vocabulary,
    task_groups: dict[str, dict[int, list[tuple[int, int]]]],
    background: list[tuple[int, int, int]],
    mode: BackgroundMode,
    candidates: dict[int, list[int]],
    extra_truths: Mapping[tuple[int, int], Iterable[int]] | None = None,
) -> DatasetBundle:
    """Assemble a bundle, applying the background mode and deriving the store."""
    mode = BackgroundMode.parse(mode)
    _check_disjoint(task_groups, vocab)
    groups = {split: {r: list(pairs) for r, pairs in task_groups[split].items()} for split in SPLITS}
    background = list(background)

    if mode is BackgroundMode.IN_TRAIN:
        eval_rels = set(groups["dev"]) | set(groups["test"])
        train = groups["train"]
        for h, r, t in background:
            if r in eval_rels:
                raise DatasetError(
                    f"background relation {vocab.relation_names[r]!r} overlaps an evaluation split"
                )
            train.setdefault(r, [])
        seen = {r: set(pairs) for r, pairs in train.items()}
        for h, r, t in background:
            if (h, t) not in seen[r]:
                seen[r].add((h, t))
                train[r].append((h, t))
    elif mode is BackgroundMode.DISCARD:
        background = []

    all_triples = [(h, r, t) for split in SPLITS for r, pairs in groups[split].items() for h, t in pairs]
    all_triples.extend(background)
    store = TripleStore(all_triples, vocab.n_entities, vocab.n_relations)

    truths: dict[tuple[int, int], set[int]] = defaultdict(set)
    for h, r, t in store.triples:
        truths[(h, r)].add(t)
    for key, tails in (extra_truths or {}).items():
        truths[key].update(tails)

    for r, cands in candidates.items():
        if r in groups["dev"] or r in groups["test"]:
            pool = set(cands)
            missing = {t for _, t in groups["dev"].get(r, []) + groups["test"].get(r, [])} - pool
            if missing:
                raise DatasetError(
                    f"candidates for {vocab.relation_names[r]!r} miss {len(missing)} true tails"
                )

    return DatasetBundle(
        vocab=vocab,
        store=store,
        task_groups=groups,
        background_triples=background,
        mode=mode,
        candidates={r: list(c) for r, c in candidates.items()},
        filtered_truths={key: frozenset(v) for key, v in truths.items()},
    )


# --------------------------------------------------------------------------
# benchmark files


def _read_json(path: Path):
    if not path.exists():
        raise DatasetError(f"missing file: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed JSON in {path}: {exc}") from exc


def _read_tasks(path: Path, split: str) -> dict[str, list[tuple[str, str, str]]]:
    raw = _read_json(path)
    if not isinstance(raw, dict):
        raise DatasetError(f"{path}: expected an object mapping relation -> triples")
    if not raw:
        raise DatasetError(f"no tasks in split {split!r} ({path})")
    tasks = {}
    for rel, triples in raw.items():
        parsed = []
        for lineno, item in enumerate(triples):
            if not (isinstance(item, (list, tuple)) and len(item) == 3 and all(isinstance(x, str) for x in item)):
                raise DatasetError(f"{path}: malformed triple #{lineno} for relation {rel!r}: {item!r}")
            if item[1] != rel:
                raise DatasetError(f"{path}: triple {item!r} listed under relation {rel!r}")
            parsed.append(tuple(item))
        tasks[rel] = parsed
    return tasks


def _read_background(path: Path) -> list[tuple[str, str, str]]:
    if not path.exists():
        raise DatasetError(f"missing file: {path}")
    triples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DatasetError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            triples.append(tuple(parts))
    return triples


def _read_id_file(path: Path) -> list[str] | None:
    if not path.exists():
        return None
    mapping = _read_json(path)
    names = [None] * len(mapping)
    for name, idx in mapping.items():
        if not (isinstance(idx, int) and 0 <= idx < len(names)) or names[idx] is not None:
            raise DatasetError(f"{path}: ids must be dense and zero-based")
        names[idx] = name
    return names


def load_benchmark(directory: str | os.PathLike, mode: BackgroundMode | str) -> DatasetBundle:
    """Load a few-shot benchmark directory (NELL-One / Wiki-One layout)."""
    directory = Path(directory)
    mode = BackgroundMode.parse(mode)
    raw_tasks = {split: _read_tasks(directory / TASK_FILES[split], split) for split in SPLITS}
    raw_background = _read_background(directory / BACKGROUND_FILE)
    raw_candidates = _read_json(directory / CANDIDATES_FILE)
    truths_path = directory / TRUTHS_FILE
    raw_truths = _read_json(truths_path) if truths_path.exists() else {}

    entity_names = _read_id_file(directory / ENTITY_IDS_FILE)
    relation_names = _read_id_file(directory / RELATION_IDS_FILE)
    fixed_entities = entity_names is not None
    fixed_relations = relation_names is not None
    entity_names = entity_names or []
    relation_names = relation_names or []
    ent_index = {n: i for i, n in enumerate(entity_names)}
    rel_index = {n: i for i, n in enumerate(relation_names)}

    def ent(name: str) -> int:
        if name not in ent_index:
            if fixed_entities:
                raise DatasetError(f"entity {name!r} missing from {ENTITY_IDS_FILE}")
            ent_index[name] = len(entity_names)
            entity_names.append(name)
        return ent_index[name]

    def rel(name: str) -> int:
        if name not in rel_index:
            if fixed_relations:
                raise DatasetError(f"relation {name!r} missing from {RELATION_IDS_FILE}")
            rel_index[name] = len(relation_names)
            relation_names.append(name)
        return rel_index[name]

    groups: dict[str, dict[int, list[tuple[int, int]]]] = {}
    for split in SPLITS:
        groups[split] = {}
        for rel_name, triples in raw_tasks[split].items():
            r = rel(rel_name)
            groups[split][r] = [(ent(h), ent(t)) for h, _, t in triples]
    background = [(ent(h), rel(r), ent(t)) for h, r, t in raw_background]

    candidates = {}
    if not isinstance(raw_candidates, dict):
        raise DatasetError(f"{CANDIDATES_FILE}: expected an object")
    for rel_name, names in raw_candidates.items():
        if rel_name not in rel_index:
            raise DatasetError(f"unknown relation {rel_name!r} in {CANDIDATES_FILE}")
        unknown = [n for n in names if n not in ent_index]
        if unknown:
            raise DatasetError(f"unknown entity {unknown[0]!r} in {CANDIDATES_FILE}")
        candidates[rel_index[rel_name]] = [ent_index[n] for n in names]

    extra_truths = _parse_truths(raw_truths, ent_index, rel_index, groups)
    vocab = Vocabulary(tuple(entity_names), tuple(relation_names))
    return build_bundle(vocab, groups, background, mode, candidates, extra_truths)


def _parse_truths(raw, ent_index, rel_index, groups) -> dict[tuple[int, int], set[int]]:
    # keys are head-name + relation-name glued together, so split on the known
    # evaluation relation names (longest suffix wins)
    eval_rels = sorted(
        (name for name, r in rel_index.items() if r in groups["dev"] or r in groups["test"]),
        key=len,
        reverse=True,
    )
    truths: dict[tuple[int, int], set[int]] = defaultdict(set)
    skipped = 0
    for key, tails in raw.items():
        for rel_name in eval_rels:
            head = key[: -len(rel_name)]
            if key.endswith(rel_name) and head in ent_index:
                known = [ent_index[t] for t in tails if t in ent_index]
                skipped += len(tails) - len(known)
                truths[(ent_index[head], rel_index[rel_name])].update(known)
                break
        else:
            skipped += 1
    if skipped:
        logger.warning("ignored %d unresolvable entries in %s", skipped, TRUTHS_FILE)
    return truths


def write_benchmark(bundle: DatasetBundle, directory: str | os.PathLike) -> Path:
    """Write a bundle in the benchmark layout, including explicit id files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    vocab = bundle.vocab
    ename, rname = vocab.entity_names, vocab.relation_names

    def dump(name, obj):
        with open(directory / name, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, ensure_ascii=False, indent=1)
            fh.write("\n")

    for split in SPLITS:
        dump(
            TASK_FILES[split],
            {
                rname[r]: [[ename[h], rname[r], ename[t]] for h, t in pairs]
                for r, pairs in bundle.task_groups[split].items()
            },
        )
    with open(directory / BACKGROUND_FILE, "w", encoding="utf-8") as fh:
        for h, r, t in bundle.background_triples:
            fh.write(f"{ename[h]}\t{rname[r]}\t{ename[t]}\n")
    dump(CANDIDATES_FILE, {rname[r]: [ename[e] for e in c] for r, c in bundle.candidates.items()})
    eval_rels = set(bundle.task_groups["dev"]) | set(bundle.task_groups["test"])
    dump(
        TRUTHS_FILE,
        {
            ename[h] + rname[r]: [ename[t] for t in sorted(tails)]
            for (h, r), tails in sorted(bundle.filtered_truths.items())
            if r in eval_rels
        },
    )
    dump(ENTITY_IDS_FILE, {n: i for i, n in enumerate(ename)})
    dump(RELATION_IDS_FILE, {n: i for i, n in enumerate(rname)})
    return directory


# --------------------------------------------------------------------------
# synthetic planted-translation datasets


@dataclass(frozen=True)
class SynthConfig:
    n_entities: int = 200
    dim: int = 16
    n_train_rel: int = 20
    n_dev_rel: int = 3
    n_test_rel: int = 5
    triples_per_rel: int = 30
    noise_sigma: float = 0.0
    candidate_pool: int = 50
    seed: int = 0

    def validate(self) -> None:
        counts = {
            "n_entities": self.n_entities,
            "dim": self.dim,
            "n_train_rel": self.n_train_rel,
            "n_dev_rel": self.n_dev_rel,
            "n_test_rel": self.n_test_rel,
            "triples_per_rel": self.triples_per_rel,
            "candidate_pool": self.candidate_pool,
        }
        for key, value in counts.items():
            if int(value) < 1:
                raise ValueError(f"{key} must be positive, got {value}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.candidate_pool > self.n_entities:
            raise ValueError("candidate_pool cannot exceed n_entities")
        if self.triples_per_rel > self.n_entities:
            raise ValueError("infeasible configuration: triples_per_rel > n_entities")


@dataclass(frozen=True)
class SynthLatents:
    entities: np.ndarray
    relations: np.ndarray


LATTICE_RANK = 3


def synthetic_latents(cfg: SynthConfig) -> SynthLatents:
    """Entity latents on a unit integer lattice, rotated into ``cfg.dim`` dimensions.

    Entities occupy the ``n_entities`` lattice points closest to the origin;
    relation translations are distinct non-zero lattice steps, so a
    translated entity usually lands exactly on another entity.
    """
    rng = np.random.default_rng([cfg.seed, 0])
    rank = min(LATTICE_RANK, cfg.dim)
    n_rel = cfg.n_train_rel + cfg.n_dev_rel + cfg.n_test_rel

    side = 1
    while side**rank < cfg.n_entities:
        side += 1
    axis = np.arange(side) - (side - 1) / 2.0
    grid = np.stack(np.meshgrid(*[axis] * rank, indexing="ij"), axis=-1).reshape(-1, rank)
    order = np.lexsort((rng.random(len(grid)), np.round((grid * grid).sum(1), 9)))
    coords = grid[order[: cfg.n_entities]]
    coords = coords[rng.permutation(cfg.n_entities)]

    reach = 1
    while (2 * reach + 1) ** rank - 1 < n_rel:
        reach += 1
    steps = np.stack(
        np.meshgrid(*[np.arange(-reach, reach + 1)] * rank, indexing="ij"), axis=-1
    ).reshape(-1, rank)
    steps = steps[np.abs(steps).sum(1) > 0]
    steps = steps[rng.choice(len(steps), size=n_rel, replace=False)]

    basis, _ = np.linalg.qr(rng.normal(size=(cfg.dim, rank)))
    return SynthLatents(coords @ basis.T, steps.astype(np.float64) @ basis.T)


def generate_synthetic(cfg: SynthConfig) -> DatasetBundle:
    """Planted-translation dataset: tail = entity nearest to z_h + v_r + noise.

    Every entity is tried as a head and the ``triples_per_rel`` heads whose
    translated point lands closest to an existing entity are kept.
    """
    cfg.validate()
    latents = synthetic_latents(cfg)
    z, v = latents.entities, latents.relations
    n_rel = len(v)
    rng = np.random.default_rng([cfg.seed, 1])

    sq_norms = (z * z).sum(1)
    groups: dict[str, dict[int, list[tuple[int, int]]]] = {s: {} for s in SPLITS}
    candidates: dict[int, list[int]] = {}
    bounds = np.cumsum([cfg.n_train_rel, cfg.n_dev_rel, cfg.n_test_rel])
    for r in range(n_rel):
        noise = rng.normal(scale=cfg.noise_sigma, size=z.shape) if cfg.noise_sigma > 0 else 0.0
        target = z + v[r] + noise
        dist = (target * target).sum(1)[:, None] - 2.0 * target @ z.T + sq_norms[None, :]
        np.fill_diagonal(dist, np.inf)
        tails = dist.argmin(1)
        residual = dist[np.arange(len(z)), tails]
        heads = np.argsort(residual, kind="stable")[: cfg.triples_per_rel]
        heads = rng.permutation(heads)
        pairs = [(int(h), int(tails[h])) for h in heads]
        split = SPLITS[int(np.searchsorted(bounds, r, side="right"))]
        groups[split][r] = pairs

        true_tails = sorted({t for _, t in pairs})
        if len(true_tails) > cfg.candidate_pool:
            raise ValueError(
                f"infeasible configuration: relation {r} has {len(true_tails)} distinct tails "
                f"but candidate_pool={cfg.candidate_pool}"
            )
        others = np.setdiff1d(np.arange(cfg.n_entities), true_tails)
        fill = rng.choice(others, size=cfg.candidate_pool - len(true_tails), replace=False)
        candidates[r] = [int(e) for e in rng.permutation(np.concatenate([true_tails, fill]))]

    vocab = Vocabulary(
        tuple(f"e{i:05d}" for i in range(cfg.n_entities)),
        tuple(f"r{i:04d}" for i in range(n_rel)),
    )
    return build_bundle(vocab, groups, [], BackgroundMode.IN_TRAIN, candidates)


# --------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class DatasetStats:
    n_entities: int
    relations: dict[str, int]
    triples: dict[str, int]
    n_background: int
    n_training_entities: int
    one_shot_proportion: float

    def as_dict(self) -> dict:
        return {
            "n_entities": self.n_entities,
            "relations": dict(self.relations),
            "triples": dict(self.triples),
            "n_background": self.n_background,
            "n_training_entities": self.n_training_entities,
            "one_shot_proportion": self.one_shot_proportion,
        }


def training_visible_triples(bundle: DatasetBundle) -> list[tuple[int, int, int]]:
    seen = dict.fromkeys(bundle.split_triples("train"))
    seen.update(dict.fromkeys(bundle.background_triples))
    return list(seen)


def dataset_stats(bundle: DatasetBundle) -> DatasetStats:
    """Split sizes plus the share of entities seen in exactly one training triple."""
    visible = training_visible_triples(bundle)
    occurrences: Counter[int] = Counter()
    for h, _, t in visible:
        occurrences[h] += 1
        if t != h:
            occurrences[t] += 1
    n_seen = len(occurrences)
    one_shot = sum(1 for c in occurrences.values() if c == 1)
    return DatasetStats(
        n_entities=bundle.vocab.n_entities,
        relations={s: len(bundle.task_groups[s]) for s in SPLITS},
        triples={s: sum(len(p) for p in bundle.task_groups[s].values()) for s in SPLITS},
        n_background=len(bundle.background_triples),
        n_training_entities=n_seen,
        one_shot_proportion=one_shot / n_seen if n_seen else 0.0,
    )
