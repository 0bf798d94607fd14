"""Versioned binary checkpoints with a text manifest sidecar.

Layout (all integers and floats little-endian)::

    b"METARCKPT"  u32 version  u32 kind  u32 n_tensors
    u64 iteration  f64 best_hits10  u32 bad_evals
    u32 len + utf-8 config fingerprint
    per tensor: u32 len + utf-8 name, u32 ndim, u64 dims...
    u32 has_optimizer [u64 t, f64 lr, f64 b1, f64 b2, f64 eps]
    f64 data of every tensor, row-major, in header order
    if has_optimizer: first moments then second moments, same order
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .model import ModelParams
from .train import AdamState, Checkpoint, TransEModel

MAGIC = b"METARCKPT"
FORMAT_VERSION = 1
KIND_MODEL = 0
KIND_EMBEDDING = 1


class CheckpointError(ValueError):
    pass


def manifest_path(path: str | os.PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.txt")


def _write(path, kind, tensors, iteration=0, best=float("nan"), bad=0, fingerprint="", adam=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = bytearray(MAGIC)
    out += struct.pack("<III", FORMAT_VERSION, kind, len(tensors))
    out += struct.pack("<QdI", iteration, best, bad)
    fp = fingerprint.encode()
    out += struct.pack("<I", len(fp)) + fp
    for name, arr in tensors:
        raw = name.encode()
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    if adam is None:
        out += struct.pack("<I", 0)
    else:
        out += struct.pack("<IQdddd", 1, adam.t, adam.lr, adam.b1, adam.b2, adam.eps)
    blocks = [arr for _, arr in tensors]
    if adam is not None:
        blocks += [adam.m[name] for name, _ in tensors] + [adam.v[name] for name, _ in tensors]
    for arr in blocks:
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    path.write_bytes(bytes(out))

    lines = [f"# {MAGIC.decode()} v{FORMAT_VERSION} kind={kind} iteration={iteration}"]
    lines += [f"{name}\t{'x'.join(map(str, arr.shape))}\tfloat64" for name, arr in tensors]
    if adam is not None:
        lines += [f"adam.m.{name}\t{'x'.join(map(str, arr.shape))}\tfloat64" for name, arr in tensors]
        lines += [f"adam.v.{name}\t{'x'.join(map(str, arr.shape))}\tfloat64" for name, arr in tensors]
    manifest_path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointError("truncated checkpoint")
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values

    def text(self) -> str:
        (n,) = self.take("<I")
        raw = self.data[self.pos:self.pos + n]
        self.pos += n
        return raw.decode()

    def array(self, shape) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64))
        if self.pos + 8 * count > len(self.data):
            raise CheckpointError("truncated checkpoint")
        arr = np.frombuffer(self.data, dtype="<f8", count=count, offset=self.pos).reshape(shape)
        self.pos += 8 * count
        return arr.astype(np.float64)


def _read(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    rd = _Reader(data)
    rd.pos = len(MAGIC)
    version, kind, n = rd.take("<III")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    iteration, best, bad = rd.take("<QdI")
    fingerprint = rd.text()
    header = []
    for _ in range(n):
        name = rd.text()
        (ndim,) = rd.take("<I")
        header.append((name, rd.take(f"<{ndim}Q")))
    (has_adam,) = rd.take("<I")
    adam = None
    if has_adam:
        t, lr, b1, b2, eps = rd.take("<Qdddd")
        adam = AdamState(lr, b1, b2, eps, t)
    tensors = {name: rd.array(shape) for name, shape in header}
    if adam is not None:
        adam.m = {name: rd.array(shape) for name, shape in header}
        adam.v = {name: rd.array(shape) for name, shape in header}
    if rd.pos != len(data):
        raise CheckpointError("trailing bytes in checkpoint")
    return kind, tensors, iteration, best, bad, fingerprint, adam


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    _write(
        path, KIND_MODEL, ckpt.params.tensors(), ckpt.iteration, ckpt.best_hits10,
        ckpt.bad_evals, ckpt.fingerprint, ckpt.adam,
    )


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    kind, tensors, iteration, best, bad, fingerprint, adam = _read(path)
    if kind != KIND_MODEL:
        raise CheckpointError(f"{path} holds pretrained embeddings, not a model")
    n_layers = (len(tensors) - 1) // 2
    params = ModelParams(
        tensors["emb"],
        [tensors[f"W{l}"] for l in range(1, n_layers + 1)],
        [tensors[f"b{l}"] for l in range(1, n_layers + 1)],
    )
    if adam is None:
        adam = AdamState.for_params(params)
    return Checkpoint(params, adam, iteration, best, fingerprint, bad, FORMAT_VERSION)


def save_embeddings(model: TransEModel, path: str | os.PathLike) -> None:
    trained = np.zeros(len(model.relation))
    trained[sorted(model.trained_relations)] = 1.0
    _write(path, KIND_EMBEDDING, [("entity", model.entity), ("relation", model.relation), ("relation_mask", trained)])


def load_embeddings(path: str | os.PathLike) -> TransEModel:
    kind, tensors, *_ = _read(path)
    if kind != KIND_EMBEDDING:
        raise CheckpointError(f"{path} is a model checkpoint, not pretrained embeddings")
    mask = tensors["relation_mask"]
    return TransEModel(tensors["entity"], tensors["relation"], frozenset(int(i) for i in np.flatnonzero(mask)))
