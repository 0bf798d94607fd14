"""Hand-written backward pass for one task, with the second-order path through R'."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .episode import EpisodeTask
from .model import STANDARD, Hyperparams, ModelParams, TaskForwardTrace, forward_task, unit_rows


class GradMode(enum.Enum):
    FULL_SECOND_ORDER = "full"
    FIRST_ORDER = "first"

    @classmethod
    def parse(cls, value) -> GradMode:
        if isinstance(value, cls):
            return value
        key = str(value).lower()
        aliases = {"full": "full", "fullsecondorder": "full", "second": "full", "first": "first", "firstorder": "first"}
        try:
            return cls(aliases[key.replace("_", "").replace("-", "")])
        except KeyError:
            raise ValueError(f"unknown grad mode {value!r}") from None


class StaleTraceError(RuntimeError):
    pass


@dataclass
class TaskGradients:
    """Sparse embedding rows (unique ``entity_ids``) plus dense layer gradients."""

    entity_ids: np.ndarray
    entity_rows: np.ndarray
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def dense_emb(self, n_entities: int) -> np.ndarray:
        out = np.zeros((n_entities, self.entity_rows.shape[1]))
        out[self.entity_ids] = self.entity_rows
        return out

    def is_finite(self) -> bool:
        return bool(
            np.isfinite(self.entity_rows).all()
            and all(np.isfinite(w).all() for w in self.weights)
            and all(np.isfinite(b).all() for b in self.biases)
        )


def _coalesce(ids: list[np.ndarray], rows: list[np.ndarray], dim: int):
    if not ids:
        return np.zeros(0, dtype=np.int64), np.zeros((0, dim))
    ids = np.concatenate(ids)
    rows = np.concatenate(rows)
    unique, inverse = np.unique(ids, return_inverse=True)
    out = np.zeros((len(unique), dim))
    np.add.at(out, inverse, rows)
    return unique, out


def sum_gradients(grads: list[TaskGradients]) -> TaskGradients:
    """Sum per-task gradients in list order (deterministic reduction)."""
    dim = grads[0].entity_rows.shape[1]
    ids, rows = _coalesce([g.entity_ids for g in grads], [g.entity_rows for g in grads], dim)
    weights = [w.copy() for w in grads[0].weights]
    biases = [b.copy() for b in grads[0].biases]
    for g in grads[1:]:
        for acc, w in zip(weights, g.weights):
            acc += w
        for acc, b in zip(biases, g.biases):
            acc += b
    return TaskGradients(ids, rows, weights, biases)


def _hvp(diff: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """Rows of (I - u u^T) vec / ||diff||; zero where the norm vanishes."""
    norms = np.linalg.norm(diff, axis=-1)
    u = unit_rows(diff, norms)
    proj = vec[None, :] - u * (u @ vec)[:, None]
    safe = np.where(norms > 0, norms, 1.0)
    return np.where((norms > 0)[:, None], proj / safe[:, None], 0.0)


def backward_task(
    trace: TaskForwardTrace,
    task: EpisodeTask,
    params: ModelParams,
    hp: Hyperparams,
    mode: GradMode | str = GradMode.FULL_SECOND_ORDER,
) -> TaskGradients:
    """Gradient of the task's query loss w.r.t. embeddings and meta-learner weights."""
    mode = GradMode.parse(mode)
    if trace.params_version != params.version:
        raise StaleTraceError(
            f"trace computed at parameter version {trace.params_version}, params are at {params.version}"
        )
    sup = trace.support
    dim = params.dim
    ids: list[np.ndarray] = []
    rows: list[np.ndarray] = []

    # query hinge -> query scores -> difference vectors
    n_neg = task.query_neg.shape[1]
    coef = trace.query_active / n_neg if n_neg else np.zeros_like(trace.query_active, dtype=np.float64)
    d_pos = unit_rows(trace.query_diff_pos, trace.query_scores_pos) * coef.sum(axis=1)[:, None]
    d_neg = -unit_rows(trace.query_diff_neg, trace.query_scores_neg) * coef[..., None]

    ids += [task.query_pos[:, 0], task.query_pos[:, 1], task.query_neg.ravel()]
    rows += [d_pos + d_neg.sum(axis=1), -d_pos, -d_neg.reshape(-1, dim)]
    g_updated = d_pos.sum(axis=0) + d_neg.sum(axis=(0, 1))

    # R' = R - beta * G(R, support embeddings)
    g_meta = g_updated.copy()
    second_order = (
        mode is GradMode.FULL_SECOND_ORDER
        and trace.mode == STANDARD
        and hp.beta != 0
        and sup.active.any()
    )
    if second_order:
        act = sup.active
        hp_pos = _hvp(sup.diff_pos[act], g_updated)
        hp_neg = _hvp(sup.diff_neg[act], g_updated)
        # dG/dR = sum_i H(v_i) - H(v'_i); every Hessian is symmetric
        g_meta -= hp.beta * (hp_pos.sum(axis=0) - hp_neg.sum(axis=0))
        heads = task.support_pos[act, 0]
        ids += [heads, task.support_pos[act, 1], task.support_neg[act]]
        rows += [-hp.beta * (hp_pos - hp_neg), hp.beta * hp_pos, -hp.beta * hp_neg]

    # R = mean of per-pair metas -> meta learner -> support embeddings
    k = len(task.support_pos)
    dz = np.tile(g_meta / k, (k, 1))
    d_weights = [None] * params.n_layers
    d_biases = [None] * params.n_layers
    for l in range(params.n_layers - 1, -1, -1):
        d_weights[l] = dz.T @ sup.layer_inputs[l]
        d_biases[l] = dz.sum(axis=0)
        dx = dz @ params.weights[l]
        if l > 0:
            dz = dx * np.where(sup.pre_activations[l - 1] > 0, 1.0, hp.leaky_slope)
    ids += [task.support_pos[:, 0], task.support_pos[:, 1]]
    rows += [dx[:, :dim], dx[:, dim:]]

    entity_ids, entity_rows = _coalesce(ids, rows, dim)
    return TaskGradients(entity_ids, entity_rows, d_weights, d_biases)


def task_loss_and_grad(task, params, hp, forward_mode=STANDARD, grad_mode=GradMode.FULL_SECOND_ORDER):
    loss, trace = forward_task(task, params, hp, forward_mode)
    return loss, backward_task(trace, task, params, hp, grad_mode), trace


@dataclass(frozen=True)
class FiniteDiffReport:
    max_rel_err: float
    location: tuple[str, tuple[int, ...]]
    n_checked: int


def relative_error(analytic, numeric, floor: float = 1e-8):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def finite_diff_check(
    task: EpisodeTask,
    params: ModelParams,
    hp: Hyperparams,
    mode: GradMode | str = GradMode.FULL_SECOND_ORDER,
    step: float = 1e-5,
    forward_mode: str = STANDARD,
) -> FiniteDiffReport:
    """Compare backward_task against central differences of the query loss over every scalar."""
    _, trace = forward_task(task, params, hp, forward_mode)
    grads = backward_task(trace, task, params, hp, mode)
    analytic = {"emb": grads.dense_emb(params.emb.shape[0])}
    for l in range(params.n_layers):
        analytic[f"W{l + 1}"] = grads.weights[l]
        analytic[f"b{l + 1}"] = grads.biases[l]

    probe = params.copy()
    worst, where, count = 0.0, ("", ()), 0
    for name, tensor in probe.tensors():
        for idx in np.ndindex(tensor.shape):
            orig = tensor[idx]
            tensor[idx] = orig + step
            plus = forward_task(task, probe, hp, forward_mode)[0]
            tensor[idx] = orig - step
            minus = forward_task(task, probe, hp, forward_mode)[0]
            tensor[idx] = orig
            numeric = (plus - minus) / (2 * step)
            err = float(relative_error(analytic[name][idx], numeric))
            count += 1
            if err > worst:
                worst, where = err, (name, idx)
    return FiniteDiffReport(worst, where, count)
