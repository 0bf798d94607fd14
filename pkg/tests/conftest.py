import json

import numpy as np
import pytest

from metar.episode import EpisodeTask
from metar.kg import SynthConfig, generate_synthetic
from metar.model import Hyperparams, ModelParams

SMALL_SYNTH = SynthConfig(n_entities=60, dim=8, n_train_rel=6, n_dev_rel=2, n_test_rel=2,
                          triples_per_rel=8, noise_sigma=0.0, candidate_pool=20, seed=3)


@pytest.fixture(scope="session")
def small_bundle():
    return generate_synthetic(SMALL_SYNTH)


def write_toy_benchmark(root, train=None, dev=None, test=None, background=None, candidates=None, truths=None):
    """Write a tiny benchmark directory; every argument overrides one file."""
    root.mkdir(parents=True, exist_ok=True)
    train = train if train is not None else {
        "capital": [["france", "capital", "paris"], ["japan", "capital", "tokyo"], ["spain", "capital", "madrid"]],
    }
    dev = dev if dev is not None else {
        "ceo": [["nadella", "ceo", "microsoft"], ["dorsey", "ceo", "twitter"]],
    }
    test = test if test is not None else {
        "language": [["japan", "language", "japanese"], ["spain", "language", "spanish"], ["france", "language", "french"]],
    }
    background = background if background is not None else [
        ("paris", "locatedin", "france"),
        ("tokyo", "locatedin", "japan"),
        ("france", "capital", "paris"),
        ("madrid", "locatedin", "spain"),
    ]
    candidates = candidates if candidates is not None else {
        "ceo": ["microsoft", "twitter", "paris", "tokyo"],
        "language": ["japanese", "spanish", "french", "paris", "madrid"],
        "capital": ["paris", "tokyo", "madrid", "japanese"],
    }
    truths = truths if truths is not None else {
        "nadellaceo": ["microsoft"],
        "japanlanguage": ["japanese"],
    }
    for name, obj in (("train_tasks.json", train), ("dev_tasks.json", dev), ("test_tasks.json", test),
                      ("rel2candidates.json", candidates), ("e1rel_e2.json", truths)):
        (root / name).write_text(json.dumps(obj), encoding="utf-8")
    (root / "path_graph").write_text("".join(f"{h}\t{r}\t{t}\n" for h, r, t in background), encoding="utf-8")
    return root


@pytest.fixture
def toy_dir(tmp_path):
    return write_toy_benchmark(tmp_path / "toy")


def random_params(rng, n_entities=10, dim=4, hidden=(6,), scale=0.5):
    sizes = [2 * dim, *hidden, dim]
    weights = [rng.normal(scale=scale, size=(o, i)) for i, o in zip(sizes[:-1], sizes[1:])]
    biases = [rng.normal(scale=0.1, size=o) for o in sizes[1:]]
    return ModelParams(rng.normal(size=(n_entities, dim)), weights, biases)


def _corrupt(rng, tails, n_entities, n_neg):
    """Negatives never equal their own positive tail, as with the real sampler."""
    offsets = rng.integers(1, n_entities, size=(len(tails), n_neg))
    return (np.asarray(tails)[:, None] + offsets) % n_entities


def random_task(rng, n_entities=10, k=2, n_query=2, n_neg=1):
    ids = rng.permutation(n_entities)
    support = ids[: 2 * k].reshape(k, 2)
    support_neg = _corrupt(rng, support[:, 1], n_entities, 1)[:, 0]
    query = rng.integers(n_entities, size=(n_query, 2))
    query_neg = _corrupt(rng, query[:, 1], n_entities, n_neg)
    return EpisodeTask(0, support, support_neg, query, query_neg)


def hinge_margins(trace, gamma):
    sup = trace.support
    s = gamma + sup.scores_pos - sup.scores_neg
    q = gamma + trace.query_scores_pos[:, None] - trace.query_scores_neg
    return np.concatenate([np.ravel(s), np.ravel(q)])


def well_posed_instance(seed, n_entities=10, dim=4, hidden=(6,), beta=1.0, k=2, n_query=2, n_neg=1, gamma=1.0):
    """Random tiny model + task with every hinge at least 1e-3 from its kink
    and at least one active query hinge."""
    from metar.model import forward_task

    rng = np.random.default_rng(seed)
    hp = Hyperparams(dim=dim, gamma=gamma, beta=beta, hidden_sizes=hidden)
    while True:
        params = random_params(rng, n_entities, dim, hidden)
        task = random_task(rng, n_entities, k, n_query, n_neg)
        _, trace = forward_task(task, params, hp)
        if (
            np.min(np.abs(hinge_margins(trace, gamma))) > 1e-3
            and trace.query_active.any()
            and trace.support.active.any()
        ):
            return params, task, hp
