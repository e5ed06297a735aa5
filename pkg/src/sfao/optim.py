"""Similarity-gated update rule and the SGD/OGD limit cases.

The gate is three-valued: a sampled max-cosine score above
``lambda_accept`` keeps the raw gradient, a score in
(lambda_proj, lambda_accept] projects it off the buffered span, and a
score at or below ``lambda_proj`` zeroes the step. Boundaries are
strict ">" for accept and "<=" for discard.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .buffer import GradBuffer
from .errors import InvalidThresholds, LengthMismatch, ZeroVector
from .subspace import ZERO_NORM_TOL, as_vector

EMPTY_SCORE = -1.0


class Decision(enum.Enum):
    ACCEPT = "accept"
    PROJECT = "project"
    DISCARD = "discard"


@dataclass(frozen=True)
class Thresholds:
    lambda_proj: float
    lambda_accept: float

    def validate(self) -> None:
        if self.lambda_proj > self.lambda_accept:
            raise InvalidThresholds(
                f"lambda_proj {self.lambda_proj} > lambda_accept {self.lambda_accept}")


@dataclass(frozen=True)
class GateDecision:
    kind: Decision
    score: float


@dataclass
class OptState:
    """Per-layer momentum state for the decoupled-weight-decay step."""

    momentum: np.ndarray
    beta: float = 0.9
    lr: float = 1e-3
    weight_decay: float = 0.0
    step_count: int = 0

    @classmethod
    def zeros(cls, dim: int, beta: float = 0.9, lr: float = 1e-3,
              weight_decay: float = 0.0) -> "OptState":
        return cls(momentum=np.zeros(dim, dtype=np.float64), beta=beta,
                   lr=lr, weight_decay=weight_decay)


def gate(score, th: Thresholds) -> GateDecision:
    """Map a sampled score to a decision. ``score=None`` encodes an
    empty buffer and accepts (the plain-SGD limit)."""
    th.validate()
    if score is None:
        return GateDecision(Decision.ACCEPT, EMPTY_SCORE)
    if score > th.lambda_accept:
        return GateDecision(Decision.ACCEPT, score)
    if score > th.lambda_proj:
        return GateDecision(Decision.PROJECT, score)
    return GateDecision(Decision.DISCARD, score)


def sfao_direction(g, buf: GradBuffer, th: Thresholds, k: int):
    """Gated update direction for one layer.

    Returns (u, decision). A (near-)zero gradient maps to a discard —
    a null update is trivially safe and keeps training loops total.
    """
    g = as_vector(g)
    if float(np.linalg.norm(g)) <= ZERO_NORM_TOL:
        th.validate()
        return np.zeros_like(g), GateDecision(Decision.DISCARD, EMPTY_SCORE)
    if len(buf) == 0:
        return g.copy(), gate(None, th)
    subset = buf.sample_subset(k)
    try:
        score = buf.mc_max_cos(g, subset)
    except ZeroVector:
        th.validate()
        return np.zeros_like(g), GateDecision(Decision.DISCARD, EMPTY_SCORE)
    decision = gate(score, th)
    if decision.kind is Decision.ACCEPT:
        u = g.copy()
    elif decision.kind is Decision.PROJECT:
        u = buf.basis.project_out(g)
    else:
        u = np.zeros_like(g)
    return u, decision


def apply_step(theta, u, state: OptState) -> np.ndarray:
    """m <- beta*m + (1-beta)*u; theta <- (1 - lr*wd)*theta - lr*m.

    Mutates state.momentum and step_count; returns the new parameters.
    With beta = 0 and weight_decay = 0 this is exactly theta - lr*u.
    """
    theta = as_vector(theta)
    u = as_vector(u)
    if theta.shape != u.shape or theta.shape != state.momentum.shape:
        raise LengthMismatch(
            f"theta {theta.shape}, u {u.shape}, momentum {state.momentum.shape}")
    state.momentum = state.beta * state.momentum + (1.0 - state.beta) * u
    state.step_count += 1
    return (1.0 - state.lr * state.weight_decay) * theta - state.lr * state.momentum


def sgd_direction(g) -> np.ndarray:
    return as_vector(g).copy()


def ogd_direction(g, buf: GradBuffer) -> np.ndarray:
    """Always-project limit: remove every buffered-span component."""
    return buf.basis.project_out(as_vector(g))


def per_layer_step(grads, buffers, ths, ks, states, thetas):
    """Gate and step each layer independently; layers share nothing.

    Returns (new_thetas, decisions). Errors from a layer are re-raised
    with the layer index attached.
    """
    n = len(grads)
    if not (len(buffers) == len(ths) == len(ks) == len(states) == len(thetas) == n):
        raise LengthMismatch(
            f"per-layer lists disagree: {len(grads)}, {len(buffers)}, "
            f"{len(ths)}, {len(ks)}, {len(states)}, {len(thetas)}")
    new_thetas = []
    decisions = []
    for layer in range(n):
        try:
            u, d = sfao_direction(grads[layer], buffers[layer], ths[layer], ks[layer])
            new_thetas.append(apply_step(thetas[layer], u, states[layer]))
            decisions.append(d)
        except Exception as exc:
            raise type(exc)(f"layer {layer}: {exc}") from exc
    return new_thetas, decisions
