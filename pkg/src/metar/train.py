"""Episodic training loop, Adam with sparse embedding rows, and a TransE pretrainer."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .episode import SamplerConfig, eligible_relations, sample_episode
from .evaluation import evaluate
from .grad import GradMode, TaskGradients, backward_task, sum_gradients
from .kg import BackgroundMode, DatasetBundle, Vocabulary
from .model import NO_GRADIENT_META, STANDARD, Hyperparams, ModelParams, forward_task

logger = logging.getLogger(__name__)

ABLATIONS = ("standard", "minus_g", "minus_g_minus_r")

# named random streams, all derived from the run seed
INIT_STREAM = 0
SAMPLER_STREAM = 1
PRETRAIN_STREAM = 2


class NonFiniteError(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ModelParams, lr: float = 1e-3, b1=0.9, b2=0.999, eps=1e-8) -> AdamState:
        state = cls(lr, b1, b2, eps)
        for name, tensor in params.tensors():
            state.m[name] = np.zeros_like(tensor)
            state.v[name] = np.zeros_like(tensor)
        return state

    def copy(self) -> AdamState:
        return AdamState(
            self.lr, self.b1, self.b2, self.eps, self.t,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
        )


def adam_step(params: ModelParams, grads: TaskGradients, state: AdamState) -> None:
    """One bias-corrected Adam update in place; embedding moments move only for touched rows."""
    if not grads.is_finite():
        raise NonFiniteError("non-finite gradient; aborting update")
    if not state.m:
        fresh = AdamState.for_params(params)
        state.m, state.v = fresh.m, fresh.v
    state.t += 1
    bc1 = 1.0 - state.b1 ** state.t
    bc2 = 1.0 - state.b2 ** state.t

    def update(theta, m, v, g):
        m *= state.b1
        m += (1.0 - state.b1) * g
        v *= state.b2
        v += (1.0 - state.b2) * (g * g)
        theta -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)

    rows = grads.entity_ids
    if len(rows):
        m, v, theta = state.m["emb"][rows], state.v["emb"][rows], params.emb[rows]
        update(theta, m, v, grads.entity_rows)
        state.m["emb"][rows], state.v["emb"][rows], params.emb[rows] = m, v, theta
    for l in range(params.n_layers):
        update(params.weights[l], state.m[f"W{l + 1}"], state.v[f"W{l + 1}"], grads.weights[l])
        update(params.biases[l], state.m[f"b{l + 1}"], state.v[f"b{l + 1}"], grads.biases[l])
    params.version += 1


# --------------------------------------------------------------------------
# parameters


def init_params(
    hp: Hyperparams,
    vocab: Vocabulary | int,
    rng: np.random.Generator,
    pretrained: np.ndarray | None = None,
) -> ModelParams:
    """Uniform(+-6/sqrt(d)) embeddings (or pretrained rows), Xavier-uniform layers, zero biases."""
    n_entities = vocab if isinstance(vocab, int) else vocab.n_entities
    bound = 6.0 / math.sqrt(hp.dim)
    emb = rng.uniform(-bound, bound, size=(n_entities, hp.dim))
    if pretrained is not None:
        pretrained = np.asarray(pretrained, dtype=np.float64)
        if pretrained.shape != (n_entities, hp.dim):
            raise ValueError(f"pretrained table has shape {pretrained.shape}, expected {(n_entities, hp.dim)}")
        emb = pretrained.copy()
    sizes = hp.layer_sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return ModelParams(emb, weights, biases)


# --------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class TrainConfig:
    batch_tasks: int = 64
    lr: float = 1e-3
    eval_every: int = 1000
    patience: int = 30
    max_iters: int = 100_000
    grad_mode: str = "full"
    ablation: str = "standard"
    seed: int = 0
    normalize_embeddings: bool = False
    workers: int = 1

    def validate(self) -> None:
        for key in ("batch_tasks", "eval_every", "patience", "max_iters", "workers"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        GradMode.parse(self.grad_mode)

    @property
    def forward_mode(self) -> str:
        return NO_GRADIENT_META if self.ablation == "minus_g" else STANDARD

    @property
    def eval_mode(self) -> str:
        return "minus_g" if self.ablation == "minus_g" else "standard"


def config_fingerprint(*configs) -> str:
    blob = json.dumps([asdict(c) for c in configs], sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    params: ModelParams
    adam: AdamState
    iteration: int
    best_hits10: float
    fingerprint: str = ""
    bad_evals: int = 0
    format_version: int = 1

    def copy(self) -> Checkpoint:
        return Checkpoint(
            self.params.copy(), self.adam.copy(), self.iteration, self.best_hits10,
            self.fingerprint, self.bad_evals, self.format_version,
        )


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    losses: list[float]
    eval_log: list[dict]
    stopped_early: bool


def _normalize_rows(emb: np.ndarray, rows: np.ndarray) -> None:
    norms = np.linalg.norm(emb[rows], axis=1, keepdims=True)
    emb[rows] = emb[rows] / np.maximum(norms, 1e-12)


def train_loop(
    bundle: DatasetBundle,
    sampler_cfg: SamplerConfig,
    train_cfg: TrainConfig,
    hp: Hyperparams,
    params: ModelParams | None = None,
    resume: Checkpoint | None = None,
    dev_metric: Callable[[ModelParams], float] | None = None,
    on_eval: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Minimize the summed query loss over sampled task minibatches.

    Dev Hits@10 is checked every ``eval_every`` iterations; training stops
    after ``patience`` consecutive evaluations without improvement and the
    best-scoring parameters are returned.
    """
    train_cfg.validate()
    sampler_cfg.validate()
    hp.validate()
    if train_cfg.ablation == "minus_g_minus_r":
        raise ValueError("the minus_g_minus_r ablation is a TransE model; use pretrain_transe")
    grad_mode = GradMode.parse(train_cfg.grad_mode)
    forward_mode = train_cfg.forward_mode
    fingerprint = config_fingerprint(sampler_cfg, train_cfg, hp)

    if resume is not None:
        state = resume.copy()
    else:
        if params is None:
            params = init_params(hp, bundle.vocab, np.random.default_rng([train_cfg.seed, INIT_STREAM]))
        params = params.copy()
        state = Checkpoint(params, AdamState.for_params(params, lr=train_cfg.lr), 0, -math.inf, fingerprint)
    params, adam = state.params, state.adam
    best = state.copy()

    if dev_metric is None:
        def dev_metric(p):
            return evaluate(p, bundle, "dev", sampler_cfg.k, train_cfg.eval_mode, hp, seed=train_cfg.seed).hits10

    eligible = eligible_relations(bundle, "train", sampler_cfg.k)
    pool = ThreadPoolExecutor(train_cfg.workers) if train_cfg.workers > 1 else None

    def task_step(task):
        loss, trace = forward_task(task, params, hp, forward_mode)
        return loss, backward_task(trace, task, params, hp, grad_mode)

    losses: list[float] = []
    eval_log: list[dict] = []
    stopped = False
    evaluated = False
    try:
        for it in range(state.iteration + 1, train_cfg.max_iters + 1):
            rng = np.random.default_rng([train_cfg.seed, SAMPLER_STREAM, it])
            tasks = [sample_episode(bundle, sampler_cfg, rng, eligible=eligible) for _ in range(train_cfg.batch_tasks)]
            results = list(pool.map(task_step, tasks)) if pool else [task_step(t) for t in tasks]
            loss = float(sum(r[0] for r in results))
            if not math.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at iteration {it}")
            grads = sum_gradients([r[1] for r in results])
            adam_step(params, grads, adam)
            if train_cfg.normalize_embeddings:
                _normalize_rows(params.emb, grads.entity_ids)
            losses.append(loss)
            state.iteration = it

            if it % train_cfg.eval_every == 0:
                evaluated = True
                hits10 = float(dev_metric(params))
                improved = hits10 > state.best_hits10
                if improved:
                    state.best_hits10 = hits10
                    state.bad_evals = 0
                    best = state.copy()
                else:
                    state.bad_evals += 1
                record = {
                    "iteration": it,
                    "dev_hits10": hits10,
                    "best_hits10": state.best_hits10,
                    "mean_loss": float(np.mean(losses[-train_cfg.eval_every:])),
                }
                eval_log.append(record)
                logger.info("iter %d dev hits@10 %.4f (best %.4f)", it, hits10, state.best_hits10)
                if on_eval:
                    on_eval(record)
                if state.bad_evals >= train_cfg.patience:
                    stopped = True
                    break
    finally:
        if pool:
            pool.shutdown()

    last = state.copy()
    if not evaluated and resume is None:
        best = last.copy()
    return TrainResult(best, last, losses, eval_log, stopped)


# --------------------------------------------------------------------------
# TransE


@dataclass
class TransEModel:
    entity: np.ndarray
    relation: np.ndarray
    trained_relations: frozenset[int] = frozenset()

    def relation_vector(self, relation: int) -> np.ndarray:
        if relation not in self.trained_relations:
            raise KeyError(f"relation {relation} was not seen during TransE training")
        return self.relation[relation]

    def score(self, h: int, r: int, t: int) -> float:
        return float(np.linalg.norm(self.entity[h] + self.relation[r] - self.entity[t]))


def transe_triples(bundle: DatasetBundle) -> list[tuple[int, int, int]]:
    """Triples visible to the pretrainer under the bundle's background mode."""
    triples = dict.fromkeys(bundle.split_triples("train"))
    if bundle.mode is BackgroundMode.PRE_TRAIN:
        triples.update(dict.fromkeys(bundle.background_triples))
    return list(triples)


def eval_support_triples(bundle: DatasetBundle, k: int) -> list[tuple[int, int, int]]:
    """The first-k (support) triples of every dev/test relation."""
    return [(h, r, t) for split in ("dev", "test") for r, pairs in bundle.task_groups[split].items() for h, t in pairs[:k]]


def pretrain_transe(
    bundle: DatasetBundle,
    dim: int,
    epochs: int,
    lr: float,
    margin: float,
    rng: np.random.Generator,
    batch_size: int = 256,
    extra_triples=(),
    triples=None,
) -> TransEModel:
    """Plain TransE with SGD on the margin loss and per-epoch entity normalization."""
    if triples is None:
        triples = transe_triples(bundle)
    triples = np.asarray(list(dict.fromkeys(list(triples) + list(extra_triples))), dtype=np.int64).reshape(-1, 3)
    if len(triples) == 0:
        raise ValueError("no triples visible for TransE pretraining")
    n_ent, n_rel = bundle.vocab.n_entities, bundle.vocab.n_relations
    bound = 6.0 / math.sqrt(dim)
    entity = rng.uniform(-bound, bound, size=(n_ent, dim))
    relation = rng.uniform(-bound, bound, size=(n_rel, dim))
    relation /= np.linalg.norm(relation, axis=1, keepdims=True)
    store = bundle.store
    known = set(map(tuple, triples.tolist()))

    for _ in range(epochs):
        entity /= np.maximum(np.linalg.norm(entity, axis=1, keepdims=True), 1e-12)
        order = rng.permutation(len(triples))
        for start in range(0, len(order), batch_size):
            batch = triples[order[start:start + batch_size]]
            h, r, t = batch[:, 0], batch[:, 1], batch[:, 2]
            neg = rng.integers(n_ent, size=len(batch))
            for i in range(len(batch)):
                tries = 0
                while ((int(h[i]), int(r[i]), int(neg[i])) in known or int(neg[i]) in store.tails(int(h[i]), int(r[i]))) and tries < 16:
                    neg[i] = rng.integers(n_ent)
                    tries += 1
            base = entity[h] + relation[r]
            d_pos = base - entity[t]
            d_neg = base - entity[neg]
            n_pos = np.linalg.norm(d_pos, axis=1)
            n_neg = np.linalg.norm(d_neg, axis=1)
            active = (margin + n_pos - n_neg) > 0
            if not active.any():
                continue
            g_pos = np.where(n_pos[:, None] > 0, d_pos / np.maximum(n_pos, 1e-12)[:, None], 0.0) * active[:, None]
            g_neg = np.where(n_neg[:, None] > 0, d_neg / np.maximum(n_neg, 1e-12)[:, None], 0.0) * active[:, None]
            g_base = g_pos - g_neg
            np.add.at(entity, h, -lr * g_base)
            np.add.at(relation, r, -lr * g_base)
            np.add.at(entity, t, lr * g_pos)
            np.add.at(entity, neg, -lr * g_neg)
    return TransEModel(entity, relation, frozenset(int(r) for r in np.unique(triples[:, 1])))
