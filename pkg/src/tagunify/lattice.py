"""Exact inference on linear-chain CRF potential tables.

Everything runs in log space.  Hard constraints add the finite sentinel
``NEG`` instead of ``-inf`` so differences of forbidden scores stay finite.
The ``brute_force_*`` functions enumerate every path and serve as oracles.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

NEG = -1e30
MAX_ENUMERATION = 2 ** 20


def logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    out = np.log(np.exp(a - m).sum(axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis)


@dataclass(frozen=True)
class Lattice:
    emission: np.ndarray    # T x L
    transition: np.ndarray  # L x L, [prev, next]
    start: np.ndarray       # L
    stop: np.ndarray        # L

    def __post_init__(self):
        em = np.asarray(self.emission, dtype=float)
        if em.ndim != 2 or em.shape[0] < 1 or em.shape[1] < 1:
            raise ValueError(f"emission must be T x L with T, L >= 1, got {em.shape}")
        L = em.shape[1]
        tr = np.asarray(self.transition, dtype=float)
        st = np.asarray(self.start, dtype=float)
        sp = np.asarray(self.stop, dtype=float)
        if tr.shape != (L, L) or st.shape != (L,) or sp.shape != (L,):
            raise ValueError("transition/start/stop shapes do not match label count")
        for name, arr in (("emission", em), ("transition", tr), ("start", st), ("stop", sp)):
            if np.isnan(arr).any():
                raise ValueError(f"NaN in {name}")
            object.__setattr__(self, name, arr)

    @property
    def T(self) -> int:
        return self.emission.shape[0]

    @property
    def L(self) -> int:
        return self.emission.shape[1]

    @classmethod
    def zeros(cls, T: int, L: int) -> "Lattice":
        return cls(np.zeros((T, L)), np.zeros((L, L)), np.zeros(L), np.zeros(L))

    @classmethod
    def random(cls, T: int, L: int, rng: np.random.Generator, scale: float = 1.0) -> "Lattice":
        return cls(rng.normal(0, scale, (T, L)), rng.normal(0, scale, (L, L)),
                   rng.normal(0, scale, L), rng.normal(0, scale, L))

    def scaled(self, factor: float) -> "Lattice":
        return Lattice(self.emission * factor, self.transition * factor,
                       self.start * factor, self.stop * factor)

    def constrain(self, allowed: np.ndarray | Sequence[Iterable[int]]) -> "Lattice":
        """Lattice with disallowed (t, label) cells pushed to the sentinel."""
        mask = as_constraint(allowed, self.T, self.L)
        return Lattice(np.where(mask, self.emission, self.emission + NEG),
                       self.transition, self.start, self.stop)

    def with_transition_mask(self, transition_mask: np.ndarray,
                             start_mask: np.ndarray | None = None) -> "Lattice":
        start = self.start if start_mask is None else np.where(start_mask, self.start, self.start + NEG)
        return Lattice(self.emission, np.where(transition_mask, self.transition, self.transition + NEG),
                       start, self.stop)


def as_constraint(allowed, T: int, L: int) -> np.ndarray:
    """Normalize a per-token allowed-label spec to a boolean T x L mask."""
    if isinstance(allowed, np.ndarray) and allowed.dtype == bool:
        mask = allowed
    else:
        mask = np.zeros((T, L), dtype=bool)
        if len(allowed) != T:
            raise ValueError(f"constraint has {len(allowed)} positions, lattice has {T}")
        for t, labels in enumerate(allowed):
            for i in labels:
                if not 0 <= i < L:
                    raise ValueError(f"label {i} out of range at position {t}")
                mask[t, i] = True
    if mask.shape != (T, L):
        raise ValueError(f"constraint shape {mask.shape} does not match lattice {(T, L)}")
    if not mask.any(axis=1).all():
        raise ValueError("constraint has an empty allowed set at position "
                         f"{int(np.flatnonzero(~mask.any(axis=1))[0])}")
    return mask


def forward(lat: Lattice) -> np.ndarray:
    alpha = np.empty((lat.T, lat.L))
    alpha[0] = lat.start + lat.emission[0]
    for t in range(1, lat.T):
        alpha[t] = logsumexp(alpha[t - 1][:, None] + lat.transition, axis=0) + lat.emission[t]
    return alpha


def backward(lat: Lattice) -> np.ndarray:
    beta = np.empty((lat.T, lat.L))
    beta[-1] = lat.stop
    for t in range(lat.T - 2, -1, -1):
        beta[t] = logsumexp(lat.transition + (lat.emission[t + 1] + beta[t + 1])[None, :], axis=1)
    return beta


class Posterior(NamedTuple):
    log_z: float
    node: np.ndarray          # T x L
    pair: np.ndarray | None   # (T-1) x L x L
    alpha: np.ndarray
    beta: np.ndarray


def posterior(lat: Lattice, with_pairs: bool = True) -> Posterior:
    """Forward-backward in one pass: log Z, node and (optionally) pairwise marginals."""
    alpha = forward(lat)
    beta = backward(lat)
    log_z = float(logsumexp(alpha[-1] + lat.stop, axis=0))
    node = np.exp(alpha + beta - log_z)
    node /= node.sum(axis=1, keepdims=True)
    pair = None
    if with_pairs and lat.T > 1:
        pair = np.exp(alpha[:-1, :, None] + lat.transition[None]
                      + (lat.emission[1:] + beta[1:])[:, None, :] - log_z)
        pair /= pair.sum(axis=(1, 2), keepdims=True)
    return Posterior(log_z, node, pair, alpha, beta)


def log_partition(lat: Lattice) -> float:
    return float(logsumexp(forward(lat)[-1] + lat.stop, axis=0))


def constrained_log_partition(lat: Lattice, constraint) -> float:
    return log_partition(lat.constrain(constraint))


def node_marginals(lat: Lattice) -> np.ndarray:
    return posterior(lat, with_pairs=False).node


def clamped_node_marginals(lat: Lattice, t: int, labels: Iterable[int]) -> np.ndarray:
    """Node marginals conditioned on ``y_t`` lying in ``labels``."""
    labels = list(labels)
    if not labels:
        raise ValueError("clamp set must be non-empty")
    if not 0 <= t < lat.T:
        raise IndexError(f"position {t} out of range")
    mask = np.ones((lat.T, lat.L), dtype=bool)
    mask[t] = False
    mask[t, labels] = True
    return node_marginals(lat.constrain(mask))


def pairwise_marginals(lat: Lattice) -> np.ndarray:
    if lat.T < 2:
        raise ValueError("pairwise marginals need at least two tokens")
    return posterior(lat).pair


def path_score(lat: Lattice, y: Sequence[int]) -> float:
    y = np.asarray(y)
    if y.shape != (lat.T,):
        raise ValueError(f"label sequence length {len(y)} != {lat.T}")
    if y.min() < 0 or y.max() >= lat.L:
        raise ValueError("label index out of range")
    return float(lat.start[y[0]] + lat.emission[np.arange(lat.T), y].sum()
                 + lat.transition[y[:-1], y[1:]].sum() + lat.stop[y[-1]])


def viterbi(lat: Lattice) -> tuple[np.ndarray, float]:
    """Best path and its raw score; ties go to the smallest label index."""
    T, L = lat.T, lat.L
    delta = lat.start + lat.emission[0]
    back = np.zeros((T, L), dtype=np.int64)
    for t in range(1, T):
        cand = delta[:, None] + lat.transition
        back[t] = cand.argmax(axis=0)
        delta = cand[back[t], np.arange(L)] + lat.emission[t]
    final = delta + lat.stop
    y = np.empty(T, dtype=np.int64)
    y[-1] = int(final.argmax())
    for t in range(T - 1, 0, -1):
        y[t - 1] = back[t, y[t]]
    return y, float(final[y[-1]])


def marginal_tangents(lat: Lattice, d_emission: np.ndarray, post: Posterior | None = None):
    """Directional derivative of the posterior when emissions move along ``d_emission``.

    Returns ``(d_log_z, d_node, d_pair)``.  Equivalent to differentiating the
    forward-backward recursions in forward mode; costs about one extra pass.
    """
    if post is None:
        post = posterior(lat)
    T = lat.T
    alpha, beta, log_z = post.alpha, post.beta, post.log_z
    d_alpha = np.empty_like(alpha)
    d_alpha[0] = d_emission[0]
    for t in range(1, T):
        w = alpha[t - 1][:, None] + lat.transition
        w = np.exp(w - w.max(axis=0, keepdims=True))
        w /= w.sum(axis=0, keepdims=True)
        d_alpha[t] = d_alpha[t - 1] @ w + d_emission[t]
    d_beta = np.empty_like(beta)
    d_beta[-1] = 0.0
    for t in range(T - 2, -1, -1):
        w = lat.transition + (lat.emission[t + 1] + beta[t + 1])[None, :]
        w = np.exp(w - w.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        d_beta[t] = w @ (d_emission[t + 1] + d_beta[t + 1])
    final = np.exp(alpha[-1] + lat.stop - log_z)
    d_log_z = float(final @ d_alpha[-1] / final.sum())
    d_node = post.node * (d_alpha + d_beta - d_log_z)
    d_pair = None
    if post.pair is not None:
        d_pair = post.pair * (d_alpha[:-1, :, None]
                              + (d_emission[1:] + d_beta[1:])[:, None, :] - d_log_z)
    return d_log_z, d_node, d_pair


def bio_masks(labels: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
    """Allowed transitions and start labels under BIO.

    ``I-X`` may only follow ``B-X`` or ``I-X`` and may not open a sentence.
    """
    L = len(labels)
    trans = np.ones((L, L), dtype=bool)
    start = np.ones(L, dtype=bool)
    for j, lab in enumerate(labels):
        if lab.startswith("I-"):
            start[j] = False
            for i, prev in enumerate(labels):
                trans[i, j] = prev[2:] == lab[2:] and prev != "O"
    return trans, start


def _check_enumerable(lat: Lattice) -> None:
    if lat.L ** lat.T > MAX_ENUMERATION:
        raise ValueError(f"instance too large to enumerate: {lat.L}^{lat.T} paths")


def _all_paths(lat: Lattice, constraint=None) -> tuple[np.ndarray, np.ndarray]:
    _check_enumerable(lat)
    paths = np.array(list(itertools.product(range(lat.L), repeat=lat.T)), dtype=np.int64)
    if constraint is not None:
        mask = as_constraint(constraint, lat.T, lat.L)
        keep = mask[np.arange(lat.T)[None, :], paths].all(axis=1)
        paths = paths[keep]
    scores = (lat.start[paths[:, 0]] + lat.stop[paths[:, -1]]
              + lat.emission[np.arange(lat.T)[None, :], paths].sum(axis=1))
    if lat.T > 1:
        scores = scores + lat.transition[paths[:, :-1], paths[:, 1:]].sum(axis=1)
    return paths, scores


def brute_force_log_partition(lat: Lattice) -> float:
    _, scores = _all_paths(lat)
    return float(logsumexp(scores, axis=0))


def brute_force_constrained_log_partition(lat: Lattice, constraint) -> float:
    _, scores = _all_paths(lat, constraint)
    return float(logsumexp(scores, axis=0))


def brute_force_marginals(lat: Lattice, constraint=None) -> tuple[np.ndarray, np.ndarray | None]:
    """Node and pairwise marginals by summing path probabilities."""
    paths, scores = _all_paths(lat, constraint)
    prob = np.exp(scores - logsumexp(scores, axis=0))
    node = np.zeros((lat.T, lat.L))
    for t in range(lat.T):
        np.add.at(node[t], paths[:, t], prob)
    pair = None
    if lat.T > 1:
        pair = np.zeros((lat.T - 1, lat.L, lat.L))
        for t in range(lat.T - 1):
            np.add.at(pair[t], (paths[:, t], paths[:, t + 1]), prob)
    return node, pair


def brute_force_viterbi(lat: Lattice) -> tuple[np.ndarray, float]:
    paths, scores = _all_paths(lat)
    best = int(scores.argmax())
    return paths[best], float(scores[best])


def brute_force_expectation(lat: Lattice, statistic) -> np.ndarray:
    """``E[statistic(path)]`` under the lattice distribution, by enumeration."""
    paths, scores = _all_paths(lat)
    prob = np.exp(scores - logsumexp(scores, axis=0))
    return sum(p * np.asarray(statistic(y), dtype=float) for p, y in zip(prob, paths))
