"""Two-layer ReLU classifier with hand-derived backprop.

Gradients come back as one flat float64 vector per tensor, in the fixed
order W1, b1, W2, b2, so each tensor can feed its own gradient buffer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagic, DimensionMismatch, EmptyDataset, TruncatedFile

TENSOR_NAMES = ("W1", "b1", "W2", "b2")

CHECKPOINT_MAGIC = b"SFAO"
CHECKPOINT_VERSION = 1


@dataclass
class MlpParams:
    W1: np.ndarray  # [in_dim, hidden]
    b1: np.ndarray  # [hidden]
    W2: np.ndarray  # [hidden, classes]
    b2: np.ndarray  # [classes]

    @property
    def in_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    @property
    def classes(self) -> int:
        return self.W2.shape[1]

    def tensors(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2]

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors())

    def flatten(self) -> list[np.ndarray]:
        return [t.ravel().copy() for t in self.tensors()]

    def with_flat(self, flats) -> "MlpParams":
        shapes = [t.shape for t in self.tensors()]
        return MlpParams(*[np.asarray(f, dtype=np.float64).reshape(s)
                           for f, s in zip(flats, shapes)])

    def copy(self) -> "MlpParams":
        return MlpParams(*[t.copy() for t in self.tensors()])


def init_params(in_dim: int, hidden: int, classes: int, seed: int) -> MlpParams:
    """Seeded uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    rng = np.random.default_rng(seed)
    a1 = np.sqrt(6.0 / (in_dim + hidden))
    a2 = np.sqrt(6.0 / (hidden + classes))
    return MlpParams(
        W1=rng.uniform(-a1, a1, size=(in_dim, hidden)),
        b1=np.zeros(hidden),
        W2=rng.uniform(-a2, a2, size=(hidden, classes)),
        b2=np.zeros(classes),
    )


def forward(params: MlpParams, inputs) -> np.ndarray:
    X = np.asarray(inputs, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.in_dim:
        raise DimensionMismatch(
            f"inputs {X.shape} vs in_dim {params.in_dim}")
    hidden = np.maximum(X @ params.W1 + params.b1, 0.0)
    return hidden @ params.W2 + params.b2


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_and_grads(params: MlpParams, inputs, labels, active=None):
    """Mean softmax cross-entropy and analytic per-tensor gradients.

    ``active``: optional list of class indices; the softmax is computed
    over those columns only and gradients outside them are zero (the
    task-masked training head). Labels must then be drawn from
    ``active``.
    """
    X = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or X.shape[1] != params.in_dim:
        raise DimensionMismatch(f"inputs {X.shape} vs in_dim {params.in_dim}")
    if y.shape[0] != X.shape[0]:
        raise DimensionMismatch(f"{y.shape[0]} labels for {X.shape[0]} inputs")
    n = X.shape[0]

    z1 = X @ params.W1 + params.b1
    h = np.maximum(z1, 0.0)
    logits = h @ params.W2 + params.b2

    if active is None:
        cols = np.arange(params.classes)
        y_local = y
    else:
        cols = np.asarray(active, dtype=np.int64)
        pos = {int(c): i for i, c in enumerate(cols)}
        y_local = np.array([pos[int(lbl)] for lbl in y], dtype=np.int64)

    sub = logits[:, cols]
    logp = _log_softmax(sub)
    loss = -float(logp[np.arange(n), y_local].mean())

    dsub = np.exp(logp)
    dsub[np.arange(n), y_local] -= 1.0
    dsub /= n

    gW2 = np.zeros_like(params.W2)
    gb2 = np.zeros_like(params.b2)
    gW2[:, cols] = h.T @ dsub
    gb2[cols] = dsub.sum(axis=0)

    dh = dsub @ params.W2[:, cols].T
    dz1 = dh * (z1 > 0.0)
    gW1 = X.T @ dz1
    gb1 = dz1.sum(axis=0)

    return loss, [gW1.ravel(), gb1.ravel(), gW2.ravel(), gb2.ravel()]


def evaluate(params: MlpParams, inputs, labels) -> float:
    """Top-1 accuracy; argmax ties break toward the lowest class index."""
    X = np.asarray(inputs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.shape[0] == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    pred = np.argmax(forward(params, X), axis=1)
    return float((pred == y).mean())


# --- checkpoint format ----------------------------------------------
# magic "SFAO", u32 version, u32 tensor count, then per tensor:
# u32 ndim, u32 dims..., little-endian float32 payload.

def save_checkpoint(params: MlpParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(TENSOR_NAMES)))
        for t in params.tensors():
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(t.astype("<f4").tobytes())


def load_checkpoint(path) -> MlpParams:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise BadMagic(f"bad checkpoint magic {magic!r}")
        head = fh.read(8)
        if len(head) < 8:
            raise TruncatedFile("checkpoint header truncated")
        version, count = struct.unpack("<II", head)
        if version != CHECKPOINT_VERSION:
            raise BadMagic(f"unsupported checkpoint version {version}")
        tensors = []
        for _ in range(count):
            raw = fh.read(4)
            if len(raw) < 4:
                raise TruncatedFile("tensor header truncated")
            (ndim,) = struct.unpack("<I", raw)
            raw = fh.read(4 * ndim)
            if len(raw) < 4 * ndim:
                raise TruncatedFile("tensor shape truncated")
            shape = struct.unpack(f"<{ndim}I", raw)
            size = int(np.prod(shape)) if shape else 1
            raw = fh.read(4 * size)
            if len(raw) < 4 * size:
                raise TruncatedFile("tensor payload truncated")
            tensors.append(
                np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape))
    if len(tensors) != 4:
        raise TruncatedFile(f"expected 4 tensors, found {len(tensors)}")
    return MlpParams(*tensors)
