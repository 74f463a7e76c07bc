"""Hashed surface features and the log-linear emission scorer.

A :class:`Model` holds sparse emission weights (hashed feature id x label),
dense transition/start/stop scores and the tag space it is bound to.  It is
used both as a teacher and as a student.
"""

from __future__ import annotations

import hashlib
import io
import json
import re
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse

from .lattice import Lattice
from .tagspace import TagSet

HASH_BITS = 22
DEFAULT_SEED = 0
MAGIC = b"TAGUNIFY-MODEL"
FORMAT_VERSION = 1
BOS, EOS = "<BOS>", "<EOS>"

_SHAPE_RUNS = re.compile(r"(.)\1+")


def word_shape(token: str) -> str:
    chars = []
    for ch in token:
        if ch.isupper():
            chars.append("A")
        elif ch.islower():
            chars.append("a")
        elif ch.isdigit():
            chars.append("0")
        else:
            chars.append(ch)
    return _SHAPE_RUNS.sub(r"\1", "".join(chars))


def feature_strings(tokens: Sequence[str], t: int) -> list[str]:
    """Surface features for token ``t``.

    Lowercased identity, collapsed word shape, prefixes and suffixes of
    length 1-3, lowercased neighbours at offsets -2..+2 and a bias.
    """
    if not 0 <= t < len(tokens):
        raise IndexError(f"position {t} out of range for {len(tokens)} tokens")
    tok = tokens[t]
    low = tok.lower()
    feats = ["bias", f"word={low}", f"shape={word_shape(tok)}"]
    for n in (1, 2, 3):
        feats.append(f"pre{n}={low[:n]}")
        feats.append(f"suf{n}={low[-n:]}")
    for off, name in ((-1, "prev1"), (-2, "prev2"), (1, "next1"), (2, "next2")):
        j = t + off
        if j < 0:
            word = BOS
        elif j >= len(tokens):
            word = EOS
        else:
            word = tokens[j].lower()
        feats.append(f"{name}={word}")
    return feats


@lru_cache(maxsize=1 << 20)
def hash_feature(name: str, seed: int = DEFAULT_SEED) -> int:
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8,
                             key=seed.to_bytes(8, "little")).digest()
    return int.from_bytes(digest, "little") & ((1 << HASH_BITS) - 1)


def extract_features(tokens: Sequence[str], t: int, seed: int = DEFAULT_SEED) -> np.ndarray:
    """Sorted unique hashed feature ids active at position ``t``."""
    return np.unique(np.array([hash_feature(f, seed) for f in feature_strings(tokens, t)],
                              dtype=np.int64))


@dataclass(frozen=True)
class SentenceFeatures:
    """Active weight rows of one sentence.

    ``rows`` are the distinct emission-table rows firing anywhere in the
    sentence and ``matrix`` the sparse T x len(rows) incidence matrix.
    Features unknown to the model are dropped.
    """

    T: int
    rows: np.ndarray
    matrix: sparse.csr_matrix

    @classmethod
    def from_pairs(cls, T: int, owner: np.ndarray, rows: np.ndarray) -> "SentenceFeatures":
        uniq, inv = np.unique(rows, return_inverse=True)
        mat = sparse.csr_matrix((np.ones(len(rows)), (owner, inv)), shape=(T, len(uniq)))
        return cls(T, uniq, mat)

    def counts(self, n_rows: int) -> np.ndarray:
        out = np.zeros((self.T, n_rows))
        out[:, self.rows] = self.matrix.toarray()
        return out


@dataclass
class Gradient:
    """Parameter-shaped accumulator with sparse emission rows."""

    rows: np.ndarray
    emission: np.ndarray
    transition: np.ndarray
    start: np.ndarray
    stop: np.ndarray

    @classmethod
    def zeros(cls, n_labels: int) -> "Gradient":
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, n_labels)),
                   np.zeros((n_labels, n_labels)), np.zeros(n_labels), np.zeros(n_labels))

    def __add__(self, other: "Gradient") -> "Gradient":
        rows, inv = np.unique(np.concatenate([self.rows, other.rows]), return_inverse=True)
        em = np.zeros((len(rows), self.emission.shape[1]))
        np.add.at(em, inv, np.concatenate([self.emission, other.emission]))
        return Gradient(rows, em, self.transition + other.transition,
                        self.start + other.start, self.stop + other.stop)

    def __mul__(self, c: float) -> "Gradient":
        return Gradient(self.rows, self.emission * c, self.transition * c,
                        self.start * c, self.stop * c)

    __rmul__ = __mul__

    def __neg__(self) -> "Gradient":
        return self * -1.0

    def __sub__(self, other: "Gradient") -> "Gradient":
        return self + (-other)

    def dense_emission(self, n_rows: int) -> np.ndarray:
        out = np.zeros((n_rows, self.emission.shape[1]))
        np.add.at(out, self.rows, self.emission)
        return out

    def flat(self, n_rows: int) -> np.ndarray:
        return np.concatenate([self.dense_emission(n_rows).ravel(), self.transition.ravel(),
                               self.start, self.stop])

    def max_abs(self) -> float:
        return max(float(np.abs(a).max(initial=0.0)) for a in
                   (self.emission, self.transition, self.start, self.stop))


@dataclass
class LatticeGrad:
    """Gradient of a loss with respect to the scores of one lattice."""

    emission: np.ndarray
    transition: np.ndarray
    start: np.ndarray
    stop: np.ndarray

    @classmethod
    def zeros(cls, T: int, L: int) -> "LatticeGrad":
        return cls(np.zeros((T, L)), np.zeros((L, L)), np.zeros(L), np.zeros(L))

    def __add__(self, other: "LatticeGrad") -> "LatticeGrad":
        return LatticeGrad(self.emission + other.emission, self.transition + other.transition,
                           self.start + other.start, self.stop + other.stop)

    def __sub__(self, other: "LatticeGrad") -> "LatticeGrad":
        return self + other * -1.0

    def __mul__(self, c: float) -> "LatticeGrad":
        return LatticeGrad(self.emission * c, self.transition * c, self.start * c, self.stop * c)

    __rmul__ = __mul__

    def flat(self) -> np.ndarray:
        return np.concatenate([self.emission.ravel(), self.transition.ravel(), self.start, self.stop])


def scatter(feats: SentenceFeatures, g: LatticeGrad) -> Gradient:
    """Chain a lattice-score gradient down to model weights."""
    em = np.asarray(feats.matrix.T @ g.emission)
    return Gradient(feats.rows, em, g.transition.copy(), g.start.copy(), g.stop.copy())


def expected_counts(post_node: np.ndarray, post_pair: np.ndarray | None) -> LatticeGrad:
    """Expected sufficient statistics of lattice scores under a posterior."""
    T, L = post_node.shape
    trans = post_pair.sum(axis=0) if post_pair is not None else np.zeros((L, L))
    return LatticeGrad(post_node.copy(), trans, post_node[0].copy(), post_node[-1].copy())


def observed_counts(y: Sequence[int], L: int) -> LatticeGrad:
    y = np.asarray(y)
    T = len(y)
    em = np.zeros((T, L))
    em[np.arange(T), y] = 1.0
    trans = np.zeros((L, L))
    np.add.at(trans, (y[:-1], y[1:]), 1.0)
    start = np.zeros(L)
    stop = np.zeros(L)
    start[y[0]] = 1.0
    stop[y[-1]] = 1.0
    return LatticeGrad(em, trans, start, stop)


@dataclass
class Model:
    """Log-linear CRF (``kind="crf"``) or per-token softmax (``kind="local"``) tagger.

    A local model is a CRF whose transition, start and stop scores stay at zero.
    """

    tagset: TagSet
    hierarchy_id: str = ""
    kind: str = "crf"
    seed: int = DEFAULT_SEED
    feature_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    weights: np.ndarray | None = None
    transition: np.ndarray | None = None
    start: np.ndarray | None = None
    stop: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("crf", "local"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        L = self.tagset.n_labels
        self.feature_ids = np.asarray(self.feature_ids, dtype=np.int64)
        if self.weights is None:
            self.weights = np.zeros((len(self.feature_ids), L))
        for name in ("transition", "start", "stop"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros((L, L)) if name == "transition" else np.zeros(L))
        if self.weights.shape != (len(self.feature_ids), L):
            raise ValueError("weight table does not match feature ids / label count")
        self._index = {int(f): i for i, f in enumerate(self.feature_ids)}

    @property
    def labels(self) -> list[str]:
        return self.tagset.labels

    @property
    def n_labels(self) -> int:
        return self.tagset.n_labels

    @property
    def n_features(self) -> int:
        return len(self.feature_ids)

    def add_features(self, sentences: Sequence[Sequence[str]]) -> int:
        """Grow the emission table with every feature seen in ``sentences``."""
        new = []
        seen = set(self._index)
        for tokens in sentences:
            for t in range(len(tokens)):
                for f in extract_features(tokens, t, self.seed):
                    f = int(f)
                    if f not in seen:
                        seen.add(f)
                        new.append(f)
        if new:
            base = len(self.feature_ids)
            self.feature_ids = np.concatenate([self.feature_ids, np.array(new, dtype=np.int64)])
            self.weights = np.vstack([self.weights, np.zeros((len(new), self.n_labels))])
            self._index.update({f: base + i for i, f in enumerate(new)})
        return len(new)

    def featurize(self, tokens: Sequence[str]) -> SentenceFeatures:
        rows, owner = [], []
        for t in range(len(tokens)):
            for f in extract_features(tokens, t, self.seed):
                r = self._index.get(int(f))
                if r is not None:
                    rows.append(r)
                    owner.append(t)
        return SentenceFeatures.from_pairs(len(tokens), np.array(owner, dtype=np.int64),
                                           np.array(rows, dtype=np.int64))

    def emission(self, feats: SentenceFeatures) -> np.ndarray:
        return np.asarray(feats.matrix @ self.weights[feats.rows])

    def lattice(self, feats: SentenceFeatures) -> Lattice:
        return Lattice(self.emission(feats), self.transition, self.start, self.stop)

    def apply(self, grad: Gradient, step: float) -> None:
        """In-place ``w -= step * grad``."""
        np.subtract.at(self.weights, grad.rows, step * grad.emission)
        if self.kind == "crf":
            self.transition -= step * grad.transition
            self.start -= step * grad.start
            self.stop -= step * grad.stop

    def copy(self) -> "Model":
        return Model(self.tagset, self.hierarchy_id, self.kind, self.seed,
                     self.feature_ids.copy(), self.weights.copy(), self.transition.copy(),
                     self.start.copy(), self.stop.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.weights.ravel(), self.transition.ravel(), self.start, self.stop])

    def set_flat(self, vec: np.ndarray) -> None:
        F, L = self.weights.shape
        n = F * L
        self.weights = vec[:n].reshape(F, L).copy()
        self.transition = vec[n:n + L * L].reshape(L, L).copy()
        self.start = vec[n + L * L:n + L * L + L].copy()
        self.stop = vec[n + L * L + L:].copy()

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]

    def equals(self, other: "Model") -> bool:
        return self.to_bytes() == other.to_bytes()

    def to_bytes(self) -> bytes:
        header = {
            "tagset_id": self.tagset.id,
            "entity_types": list(self.tagset.entity_types),
            "hierarchy_id": self.hierarchy_id,
            "kind": self.kind,
            "seed": self.seed,
            "hash_bits": HASH_BITS,
            "n_features": self.n_features,
            "n_labels": self.n_labels,
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        buf = io.BytesIO()
        buf.write(MAGIC + b"\n")
        buf.write(struct.pack("<II", FORMAT_VERSION, len(head)))
        buf.write(head)
        for arr, dtype in ((self.transition, "<f8"), (self.start, "<f8"), (self.stop, "<f8"),
                           (self.feature_ids, "<i8"), (self.weights, "<f8")):
            buf.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Model":
        if not data.startswith(MAGIC + b"\n"):
            raise ValueError("not a TAGUNIFY-MODEL file")
        pos = len(MAGIC) + 1
        version, hlen = struct.unpack_from("<II", data, pos)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {version}")
        pos += 8
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        if header["hash_bits"] != HASH_BITS:
            raise ValueError("model was built with a different hash width")
        L, F = header["n_labels"], header["n_features"]

        def take(count, dtype, shape):
            nonlocal pos
            nbytes = count * 8
            arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos).reshape(shape).copy()
            pos += nbytes
            return arr

        transition = take(L * L, "<f8", (L, L))
        start = take(L, "<f8", (L,))
        stop = take(L, "<f8", (L,))
        ids = take(F, "<i8", (F,))
        weights = take(F * L, "<f8", (F, L))
        if pos != len(data):
            raise ValueError("trailing bytes in model file")
        tagset = TagSet(header["tagset_id"], tuple(header["entity_types"]))
        return cls(tagset, header["hierarchy_id"], header["kind"], header["seed"],
                   ids.astype(np.int64), weights.astype(np.float64), transition.astype(np.float64),
                   start.astype(np.float64), stop.astype(np.float64))

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Model":
        return cls.from_bytes(Path(path).read_bytes())


def score_lattice(model: Model, tokens: Sequence[str]) -> Lattice:
    return model.lattice(model.featurize(tokens))


def expected_feature_counts(model: Model, feats: SentenceFeatures, node: np.ndarray,
                            pair: np.ndarray | None) -> Gradient:
    """``E[count(f, i)]`` for every active feature plus transition/start/stop expectations."""
    if node.shape != (feats.T, model.n_labels):
        raise ValueError(f"marginal table {node.shape} does not match sentence "
                         f"({feats.T} tokens, {model.n_labels} labels)")
    if pair is not None and pair.shape != (feats.T - 1, model.n_labels, model.n_labels):
        raise ValueError("pairwise marginal shape mismatch")
    return scatter(feats, expected_counts(node, pair))
