"""Relation-meta learner, translation scoring, hinge losses and the rapid update."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .episode import EpisodeTask

STANDARD = "standard"
NO_GRADIENT_META = "no_gradient_meta"
FORWARD_MODES = (STANDARD, NO_GRADIENT_META)


@dataclass(frozen=True)
class Hyperparams:
    dim: int = 100
    gamma: float = 1.0
    beta: float = 1.0
    leaky_slope: float = 0.01
    hidden_sizes: tuple[int, ...] = (500, 200)

    def validate(self) -> None:
        if self.dim < 1:
            raise ValueError("dim must be positive")
        if self.gamma < 0 or self.beta < 0:
            raise ValueError("gamma and beta must be >= 0")
        if not 0 < self.leaky_slope < 1:
            raise ValueError("leaky_slope must lie in (0, 1)")
        if any(h < 1 for h in self.hidden_sizes):
            raise ValueError("hidden sizes must be positive")

    @property
    def layer_sizes(self) -> list[int]:
        return [2 * self.dim, *self.hidden_sizes, self.dim]


@dataclass
class ModelParams:
    """Entity embeddings plus the meta learner's layers (``W`` is out x in).

    ``version`` is bumped on every in-place update so stale forward traces
    can be detected.
    """

    emb: np.ndarray
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    version: int = 0

    def __post_init__(self):
        sizes = [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[1] != sizes[l] or b.shape != (w.shape[0],):
                raise ValueError(f"layer {l + 1} shapes do not chain: W{w.shape}, b{b.shape}")
        if sizes[0] != 2 * self.emb.shape[1] or sizes[-1] != self.emb.shape[1]:
            raise ValueError("meta learner must map 2d -> d")

    @property
    def dim(self) -> int:
        return self.emb.shape[1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        out = [("emb", self.emb)]
        for l, (w, b) in enumerate(zip(self.weights, self.biases), 1):
            out += [(f"W{l}", w), (f"b{l}", b)]
        return out

    def copy(self) -> ModelParams:
        return ModelParams(
            self.emb.copy(), [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.version
        )


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def mlp_forward(x0: np.ndarray, weights, biases, slope: float):
    """Run the meta learner on a batch of concatenated (h, t) rows.

    Returns ``(inputs, pre_activations, output)`` where ``inputs[l]`` is the
    input to layer ``l + 1``.
    """
    inputs, pre = [], []
    x = x0
    last = len(weights) - 1
    for l, (w, b) in enumerate(zip(weights, biases)):
        inputs.append(x)
        z = x @ w.T + b
        pre.append(z)
        x = z if l == last else leaky_relu(z, slope)
    return inputs, pre, x


def entity_pair_meta(h_vec, t_vec, weights, biases, slope: float = 0.01) -> np.ndarray:
    h_vec = np.asarray(h_vec, dtype=np.float64)
    t_vec = np.asarray(t_vec, dtype=np.float64)
    if h_vec.shape != t_vec.shape or h_vec.ndim != 1:
        raise ValueError(f"head/tail dimension mismatch: {h_vec.shape} vs {t_vec.shape}")
    if weights[0].shape[1] != 2 * h_vec.shape[0]:
        raise ValueError(f"meta learner expects input {weights[0].shape[1]}, got {2 * h_vec.shape[0]}")
    return mlp_forward(np.concatenate([h_vec, t_vec])[None, :], weights, biases, slope)[2][0]


def aggregate_meta(metas: Sequence[np.ndarray]) -> np.ndarray:
    metas = np.asarray(metas, dtype=np.float64)
    if metas.size == 0 or len(metas) == 0:
        raise ValueError("cannot aggregate an empty list of relation metas")
    return metas.mean(axis=0)


def score(h_vec, relation_vec, t_vec) -> float:
    """Translation distance; lower means more plausible."""
    return float(np.linalg.norm(np.asarray(h_vec) + relation_vec - np.asarray(t_vec)))


def hinge_loss(pos_scores, neg_scores, gamma: float):
    """Pairwise margin loss; several negatives per positive are averaged.

    Returns ``(loss, active)`` where ``active`` has the shape of
    ``neg_scores`` and marks strictly positive hinge terms.
    """
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if neg.ndim == pos.ndim:
        terms = gamma + pos - neg
        active = terms > 0
        return float(np.where(active, terms, 0.0).sum()), active
    terms = gamma + pos[..., None] - neg
    active = terms > 0
    if neg.shape[-1] == 0:
        return 0.0, active
    return float(np.where(active, terms, 0.0).mean(axis=-1).sum()), active


def unit_rows(v: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """v / ||v|| row-wise, with zero rows for zero norms."""
    safe = np.where(norms > 0, norms, 1.0)
    return np.where((norms > 0)[..., None], v / safe[..., None], 0.0)


def gradient_meta(diff_pos: np.ndarray, diff_neg: np.ndarray, active: np.ndarray) -> np.ndarray:
    """Closed-form gradient of the support hinge loss w.r.t. the relation meta.

    ``diff_pos[i] = h_i + R - t_i`` and ``diff_neg[i] = h_i + R - t'_i``.
    """
    u_pos = unit_rows(diff_pos, np.linalg.norm(diff_pos, axis=-1))
    u_neg = unit_rows(diff_neg, np.linalg.norm(diff_neg, axis=-1))
    mask = np.asarray(active, dtype=np.float64)[:, None]
    return ((u_pos - u_neg) * mask).sum(axis=0)


def rapid_update(relation_meta, grad_meta, beta: float) -> np.ndarray:
    relation_meta = np.asarray(relation_meta, dtype=np.float64)
    if beta == 0:
        return relation_meta.copy()
    return relation_meta - beta * np.asarray(grad_meta, dtype=np.float64)


@dataclass
class SupportPass:
    layer_inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]
    pair_metas: np.ndarray
    relation_meta: np.ndarray
    diff_pos: np.ndarray
    diff_neg: np.ndarray
    scores_pos: np.ndarray
    scores_neg: np.ndarray
    active: np.ndarray
    loss: float
    grad_meta: np.ndarray
    updated_meta: np.ndarray


@dataclass
class TaskForwardTrace:
    mode: str
    params_version: int
    support: SupportPass
    query_diff_pos: np.ndarray
    query_diff_neg: np.ndarray
    query_scores_pos: np.ndarray
    query_scores_neg: np.ndarray
    query_active: np.ndarray
    query_loss: float
    extras: dict = field(default_factory=dict)

    @property
    def support_loss(self) -> float:
        return self.support.loss


def support_pass(task: EpisodeTask, params: ModelParams, hp: Hyperparams, mode: str = STANDARD) -> SupportPass:
    """Relation meta from the support pairs, support loss, gradient meta and R'."""
    if mode not in FORWARD_MODES:
        raise ValueError(f"unknown forward mode {mode!r}")
    emb = params.emb
    heads = emb[task.support_pos[:, 0]]
    tails = emb[task.support_pos[:, 1]]
    x0 = np.concatenate([heads, tails], axis=1)
    inputs, pre, pair_metas = mlp_forward(x0, params.weights, params.biases, hp.leaky_slope)
    relation_meta = pair_metas.mean(axis=0)

    base = heads + relation_meta
    diff_pos = base - tails
    if len(task.support_neg):
        diff_neg = base - emb[task.support_neg]
    else:
        diff_neg = np.zeros((0, params.dim))
    s_pos = np.linalg.norm(diff_pos, axis=1)
    s_neg = np.linalg.norm(diff_neg, axis=1)
    if len(task.support_neg):
        loss, active = hinge_loss(s_pos, s_neg, hp.gamma)
        grad = gradient_meta(diff_pos, diff_neg, active)
    else:
        loss, active = 0.0, np.zeros(0, dtype=bool)
        grad = np.zeros(params.dim)

    if mode == STANDARD:
        updated = rapid_update(relation_meta, grad, hp.beta)
    else:
        updated = relation_meta.copy()
    return SupportPass(inputs, pre, pair_metas, relation_meta, diff_pos, diff_neg, s_pos, s_neg, active, loss, grad, updated)


def forward_task(task: EpisodeTask, params: ModelParams, hp: Hyperparams, mode: str = STANDARD):
    """Full task forward pass; returns ``(query_loss, trace)``."""
    sup = support_pass(task, params, hp, mode)
    emb = params.emb
    q_heads = emb[task.query_pos[:, 0]] + sup.updated_meta
    diff_pos = q_heads - emb[task.query_pos[:, 1]]
    diff_neg = q_heads[:, None, :] - emb[task.query_neg]
    s_pos = np.linalg.norm(diff_pos, axis=-1)
    s_neg = np.linalg.norm(diff_neg, axis=-1)
    loss, active = hinge_loss(s_pos, s_neg, hp.gamma)
    trace = TaskForwardTrace(mode, params.version, sup, diff_pos, diff_neg, s_pos, s_neg, active, loss)
    return loss, trace
