"""Training losses and their analytic gradients.

Each loss exists at two levels: ``lattice_*`` functions differentiate with
respect to the scores of a single lattice, and the model-level wrappers chain
that gradient down to feature weights with :func:`~tagunify.features.scatter`.

The CRF distillation gradient is computed from the identity

    d log P(y_t in G) = E[phi | y_t in G] - E[phi]

summed with weights ``q``.  Collecting terms gives ``-Cov(phi, W)`` with
``W(y) = sum_t w_t(y_t)`` and ``w_t(j) = sum_i q_ti / P_ti [j in G_i]``, which
is the forward-mode derivative of the expected statistics along the emission
direction ``w`` (see :func:`~tagunify.lattice.marginal_tangents`).  The
per-clamp version is kept as :func:`lattice_crf_distill_clamped` and used as a
cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .features import (Gradient, LatticeGrad, Model, SentenceFeatures, expected_counts,
                       observed_counts, scatter)
from .lattice import Lattice, as_constraint, path_score, posterior, marginal_tangents
from .tagspace import Projection

CLAMP_SKIP = 1e-8
_TINY = 1e-300


@dataclass(frozen=True)
class DistillConfig:
    tau: float = 1.0
    alpha: float = 0.5

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass(frozen=True)
class SoftTargets:
    """Teacher posteriors ``q`` (T x L_k) over the teacher's own labels."""

    teacher_id: str
    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        if q.ndim != 2:
            raise ValueError("soft targets must be a T x L_k table")
        if np.any(q < -1e-12) or np.any(np.abs(q.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("soft target rows must be distributions")
        object.__setattr__(self, "q", q)


@dataclass(frozen=True)
class PartialAnnotation:
    """Labels observed under a source tag set, read through a projection."""

    tokens: tuple[str, ...]
    labels: tuple[str, ...]
    projection: Projection

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "labels", tuple(self.labels))
        if len(self.tokens) != len(self.labels):
            raise ValueError("tokens and labels differ in length")

    def constraint(self) -> np.ndarray:
        return self.projection.constraint(self.labels)


def _ratio(q: np.ndarray, P: np.ndarray) -> np.ndarray:
    return np.where(q > 0, q / np.maximum(P, _TINY), 0.0)


def _cross_entropy(q: np.ndarray, P: np.ndarray) -> float:
    return float(-(q * np.log(np.maximum(P, _TINY)))[q > 0].sum())


# ---------------------------------------------------------------- lattice level

def lattice_nll(lat: Lattice, y: Sequence[int]) -> tuple[float, LatticeGrad]:
    post = posterior(lat)
    loss = post.log_z - path_score(lat, y)
    return loss, expected_counts(post.node, post.pair) - observed_counts(y, lat.L)


def lattice_marginal_nll(lat: Lattice, allowed) -> tuple[float, LatticeGrad]:
    mask = as_constraint(allowed, lat.T, lat.L)
    if (mask.sum(axis=1) == 1).all():
        # A single admissible path: the clamped lattice collapses to it.
        return lattice_nll(lat, mask.argmax(axis=1))
    free = posterior(lat)
    clamped = posterior(lat.constrain(mask))
    loss = free.log_z - clamped.log_z
    grad = expected_counts(free.node, free.pair) - expected_counts(clamped.node, clamped.pair)
    return loss, grad


def lattice_crf_distill(lat: Lattice, targets: Sequence[tuple[np.ndarray, np.ndarray]],
                        tau: float = 1.0) -> tuple[float, LatticeGrad]:
    """Sum over teachers of ``-sum_t sum_i q_ti log P_ti``.

    ``targets`` holds ``(q, membership)`` pairs, ``membership`` being the
    0/1 teacher-label x unified-label matrix of the projection.
    """
    if not tau > 0:
        raise ValueError("temperature must be positive")
    scaled = lat.scaled(1.0 / tau) if tau != 1.0 else lat
    post = posterior(scaled)
    loss = 0.0
    direction = np.zeros_like(post.node)
    for q, membership in targets:
        if q.shape != (lat.T, membership.shape[0]) or membership.shape[1] != lat.L:
            raise ValueError("soft targets do not match projection / lattice shape")
        P = post.node @ membership.T
        loss += _cross_entropy(q, P)
        direction += _ratio(q, P) @ membership
    _, d_node, d_pair = marginal_tangents(scaled, direction, post)
    trans = d_pair.sum(axis=0) if d_pair is not None else np.zeros((lat.L, lat.L))
    grad = LatticeGrad(-d_node, -trans, -d_node[0], -d_node[-1])
    return loss, grad * (1.0 / tau)


def lattice_crf_distill_clamped(lat: Lattice, q: np.ndarray, membership: np.ndarray,
                                tau: float = 1.0, skip: float = CLAMP_SKIP
                                ) -> tuple[float, LatticeGrad]:
    """Reference gradient: one clamped forward-backward per (token, group) with q >= skip."""
    scaled = lat.scaled(1.0 / tau)
    post = posterior(scaled)
    P = post.node @ membership.T
    loss = _cross_entropy(q, P)
    free = expected_counts(post.node, post.pair)
    grad = LatticeGrad.zeros(lat.T, lat.L)
    for t in range(lat.T):
        for i in range(membership.shape[0]):
            if q[t, i] < skip:
                continue
            mask = np.ones((lat.T, lat.L), dtype=bool)
            mask[t] = membership[i].astype(bool)
            clamped = posterior(scaled.constrain(mask))
            grad = grad - (expected_counts(clamped.node, clamped.pair) - free) * q[t, i]
    return loss, grad * (1.0 / tau)


def local_distill_loss(logits: np.ndarray, targets: SoftTargets | np.ndarray,
                       projection: Projection | np.ndarray, tau: float = 1.0
                       ) -> tuple[float, np.ndarray]:
    """Per-token softmax distillation; returns the loss and its gradient wrt ``logits``."""
    if not tau > 0:
        raise ValueError("temperature must be positive")
    q = targets.q if isinstance(targets, SoftTargets) else np.asarray(targets, dtype=float)
    M = projection.membership if isinstance(projection, Projection) else np.asarray(projection)
    z = np.asarray(logits, dtype=float) / tau
    if q.shape[1] != M.shape[0] or z.shape[1] != M.shape[1] or q.shape[0] != z.shape[0]:
        raise ValueError("projection does not match teacher / student label sets")
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    P = p @ M.T
    w = _ratio(q, P) @ M
    grad = -p * (w - (w * p).sum(axis=1, keepdims=True)) / tau
    return _cross_entropy(q, P), grad


# ---------------------------------------------------------------- model level

def _features(model: Model, sentence) -> SentenceFeatures:
    return sentence if isinstance(sentence, SentenceFeatures) else model.featurize(sentence)


def _to_model(model: Model, feats: SentenceFeatures, g: LatticeGrad) -> Gradient:
    grad = scatter(feats, g)
    if model.kind == "local":
        grad.transition[:] = 0.0
        grad.start[:] = 0.0
        grad.stop[:] = 0.0
    return grad


def nll_loss(model: Model, sentence, y: Sequence[int]) -> tuple[float, Gradient]:
    feats = _features(model, sentence)
    y = np.asarray(y)
    if len(y) != feats.T:
        raise ValueError("label sequence length does not match sentence")
    if y.min() < 0 or y.max() >= model.n_labels:
        raise ValueError("label index out of range")
    loss, g = lattice_nll(model.lattice(feats), y)
    return loss, _to_model(model, feats, g)


def marginal_nll_loss(model: Model, annotation: PartialAnnotation,
                      feats: SentenceFeatures | None = None) -> tuple[float, Gradient]:
    if annotation.projection.unified.labels != model.labels:
        raise ValueError("annotation projection targets a different label space")
    feats = feats if feats is not None else model.featurize(annotation.tokens)
    loss, g = lattice_marginal_nll(model.lattice(feats), annotation.constraint())
    return loss, _to_model(model, feats, g)


def crf_distill_loss(model: Model, sentence, targets: SoftTargets | Sequence[SoftTargets],
                     projections: Projection | Sequence[Projection],
                     cfg: DistillConfig = DistillConfig()) -> tuple[float, Gradient]:
    """Node-marginal distillation from one or several teachers into ``model``."""
    if isinstance(targets, SoftTargets):
        targets, projections = [targets], [projections]
    if len(targets) != len(projections):
        raise ValueError("one projection per teacher is required")
    pairs = []
    for st, proj in zip(targets, projections):
        if proj.unified.labels != model.labels:
            raise ValueError(f"projection for teacher {st.teacher_id!r} targets another label space")
        if st.q.shape[1] != proj.source.n_labels:
            raise ValueError(f"teacher {st.teacher_id!r} label count does not match its projection")
        pairs.append((st.q, proj.membership))
    feats = _features(model, sentence)
    lat = model.lattice(feats)
    if model.kind == "local":
        loss, g_em = 0.0, np.zeros((feats.T, model.n_labels))
        for q, M in pairs:
            l, g = local_distill_loss(lat.emission, q, M, cfg.tau)
            loss += l
            g_em += g
        L = model.n_labels
        return loss, _to_model(model, feats,
                               LatticeGrad(g_em, np.zeros((L, L)), np.zeros(L), np.zeros(L)))
    loss, g = lattice_crf_distill(lat, pairs, cfg.tau)
    return loss, _to_model(model, feats, g)


def combined_loss(distill: Sequence[tuple[float, Gradient]],
                  student: tuple[float, Gradient] | None, alpha: float
                  ) -> tuple[float, Gradient]:
    """``alpha * student + (1 - alpha) * sum(distill)``, or ``sum(distill)`` without a student loss."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if not distill and student is None:
        raise ValueError("at least one loss is required")
    total, grad = 0.0, None
    for l, g in distill:
        total += l
        grad = g if grad is None else grad + g
    if student is None:
        return total, grad
    ls, gs = student
    if grad is None:
        return alpha * ls, gs * alpha
    return alpha * ls + (1 - alpha) * total, gs * alpha + grad * (1 - alpha)


# ---------------------------------------------------------------- training instances

@dataclass
class Instance:
    """One training sentence with whatever supervision is available.

    ``labels`` (unified indices) gives a supervised NLL term, ``allowed`` a
    marginal NLL term; ``targets`` lists ``(q, membership)`` teacher pairs.
    """

    feats: SentenceFeatures
    labels: np.ndarray | None = None
    allowed: np.ndarray | None = None
    targets: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    alpha: float = 0.5
    tau: float = 1.0

    def loss_and_grad(self, model: Model) -> tuple[float, Gradient]:
        lat = model.lattice(self.feats)
        student = None
        if self.labels is not None:
            student = lattice_nll(lat, self.labels)
        elif self.allowed is not None:
            student = lattice_marginal_nll(lat, self.allowed)
        if not self.targets:
            if student is None:
                raise ValueError("instance carries no supervision")
            return student[0], _to_model(model, self.feats, student[1])
        if model.kind == "local":
            loss, g_em = 0.0, np.zeros_like(lat.emission)
            for q, M in self.targets:
                l, g = local_distill_loss(lat.emission, q, M, self.tau)
                loss += l
                g_em += g
            L = model.n_labels
            dist = (loss, LatticeGrad(g_em, np.zeros((L, L)), np.zeros(L), np.zeros(L)))
        else:
            dist = lattice_crf_distill(lat, self.targets, self.tau)
        if student is None:
            loss, g = dist
        else:
            a = self.alpha
            loss = a * student[0] + (1 - a) * dist[0]
            g = student[1] * a + dist[1] * (1 - a)
        return loss, _to_model(model, self.feats, g)
