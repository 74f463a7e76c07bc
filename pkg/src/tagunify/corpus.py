"""CoNLL I/O, tag-set surgery and the synthetic corpus generator."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tagspace import BioLabel, TagSet

log = logging.getLogger(__name__)


class CorpusFormatError(ValueError):
    pass


def repair_bio(labels: Sequence[str]) -> tuple[list[str], int]:
    """Turn every ``I-X`` that does not continue an ``X`` span into ``B-X``."""
    out, fixed, prev = [], 0, "O"
    for lab in labels:
        if lab.startswith("I-") and (prev == "O" or prev[2:] != lab[2:]):
            lab = "B-" + lab[2:]
            fixed += 1
        out.append(lab)
        prev = lab
    return out, fixed


def is_bio_valid(labels: Sequence[str]) -> bool:
    return repair_bio(labels)[1] == 0


@dataclass
class AnnotatedCorpus:
    sentences: list[list[str]]
    labels: list[list[str]]
    tagset: TagSet
    provenance: str = ""

    def __post_init__(self):
        if len(self.sentences) != len(self.labels):
            raise ValueError("sentence and label counts differ")
        for n, (s, l) in enumerate(zip(self.sentences, self.labels)):
            if len(s) != len(l):
                raise ValueError(f"sentence {n}: {len(s)} tokens but {len(l)} labels")

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self):
        return iter(zip(self.sentences, self.labels))

    def subset(self, idx: Iterable[int], provenance: str | None = None) -> "AnnotatedCorpus":
        idx = list(idx)
        return AnnotatedCorpus([self.sentences[i] for i in idx], [self.labels[i] for i in idx],
                               self.tagset, self.provenance if provenance is None else provenance)

    def __add__(self, other: "AnnotatedCorpus") -> "AnnotatedCorpus":
        types = list(self.tagset.entity_types)
        types += [t for t in other.tagset.entity_types if t not in types]
        return AnnotatedCorpus(self.sentences + other.sentences, self.labels + other.labels,
                               TagSet(self.tagset.id, tuple(types)), self.provenance)

    def n_tokens(self) -> int:
        return sum(len(s) for s in self.sentences)

    def strip_labels(self) -> "AnnotatedCorpus":
        return AnnotatedCorpus(self.sentences, [["O"] * len(s) for s in self.sentences],
                               TagSet(self.tagset.id, ()), self.provenance + " (labels stripped)")


def _infer_tagset(labels: list[list[str]], tagset_id: str) -> TagSet:
    types: list[str] = []
    for seq in labels:
        for lab in seq:
            if lab != "O" and lab[2:] not in types:
                types.append(lab[2:])
    return TagSet(tagset_id, tuple(types))


def parse_conll(text: str, tagset: TagSet | None = None, tagset_id: str = "corpus",
                source: str = "<string>") -> AnnotatedCorpus:
    sentences, labels = [], []
    toks, labs = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            if toks:
                sentences.append(toks)
                labels.append(labs)
                toks, labs = [], []
            continue
        cols = line.split()
        if len(cols) != 2:
            raise CorpusFormatError(f"{source}:{lineno}: expected 2 columns, got {len(cols)}")
        try:
            BioLabel.parse(cols[1])
        except ValueError:
            raise CorpusFormatError(f"{source}:{lineno}: unknown label {cols[1]!r}") from None
        if tagset is not None and cols[1] != "O" and cols[1][2:] not in tagset:
            raise CorpusFormatError(
                f"{source}:{lineno}: label {cols[1]!r} not in tag set {tagset.id!r}")
        toks.append(cols[0])
        labs.append(cols[1])
    if toks:
        sentences.append(toks)
        labels.append(labs)
    repaired = 0
    for i, seq in enumerate(labels):
        labels[i], n = repair_bio(seq)
        repaired += n
    if repaired:
        log.warning("%s: repaired %d orphan I- labels to B-", source, repaired)
    if tagset is None:
        tagset = _infer_tagset(labels, tagset_id)
    return AnnotatedCorpus(sentences, labels, tagset, provenance=source)


def read_conll(path: str | Path, tagset: TagSet | None = None,
               tagset_id: str | None = None) -> AnnotatedCorpus:
    path = Path(path)
    return parse_conll(path.read_text(encoding="utf-8"), tagset,
                       tagset_id or path.stem, source=str(path))


def format_conll(corpus: AnnotatedCorpus) -> str:
    blocks = []
    for toks, labs in corpus:
        blocks.append("".join(f"{t} {l}\n" for t, l in zip(toks, labs)))
    return "\n".join(blocks)


def write_conll(corpus: AnnotatedCorpus, path: str | Path) -> None:
    Path(path).write_text(format_conll(corpus), encoding="utf-8")


def read_tokens(path: str | Path) -> list[list[str]]:
    """Sentences from a CoNLL-like file, keeping only the first column."""
    sentences, toks = [], []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        cols = raw.split()
        if not cols:
            if toks:
                sentences.append(toks)
                toks = []
            continue
        toks.append(cols[0])
    if toks:
        sentences.append(toks)
    return sentences


def selective_retag(corpus: AnnotatedCorpus, keep: Iterable[str],
                    tagset_id: str | None = None) -> AnnotatedCorpus:
    """Relabel every span whose type is not in ``keep`` as ``O``."""
    keep = set(keep)
    unknown = keep - set(corpus.tagset.entity_types)
    if unknown:
        raise ValueError(f"types {sorted(unknown)} are not in tag set {corpus.tagset.id!r}")
    labels = [[lab if lab == "O" or lab[2:] in keep else "O" for lab in seq]
              for seq in corpus.labels]
    types = tuple(t for t in corpus.tagset.entity_types if t in keep)
    ts = TagSet(tagset_id or f"{corpus.tagset.id}[{','.join(types)}]", types)
    return AnnotatedCorpus([list(s) for s in corpus.sentences], labels, ts,
                           f"{corpus.provenance} retagged to {sorted(keep)}")


def relabel_types(corpus: AnnotatedCorpus, mapping: dict[str, str],
                  tagset_id: str | None = None) -> AnnotatedCorpus:
    """Rename entity types, e.g. fine children to a coarse parent."""
    labels = [[lab if lab == "O" else f"{lab[0]}-{mapping.get(lab[2:], lab[2:])}" for lab in seq]
              for seq in corpus.labels]
    types: list[str] = []
    for t in corpus.tagset.entity_types:
        m = mapping.get(t, t)
        if m not in types:
            types.append(m)
    return AnnotatedCorpus([list(s) for s in corpus.sentences], labels,
                           TagSet(tagset_id or corpus.tagset.id, tuple(types)), corpus.provenance)


def split(corpus: AnnotatedCorpus, ratios: Sequence[float], seed: int = 0
          ) -> tuple[AnnotatedCorpus, ...]:
    """Seeded shuffle then cut by ratios; floor sizes, remainder goes to the first part."""
    ratios = [float(r) for r in ratios]
    if any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError("ratios must be non-negative and sum to 1")
    n = len(corpus)
    order = np.random.default_rng(seed).permutation(n)
    sizes = [math.floor(r * n) for r in ratios]
    sizes[0] += n - sum(sizes)
    parts, pos = [], 0
    for k, size in enumerate(sizes):
        parts.append(corpus.subset(sorted(order[pos:pos + size].tolist()),
                                   f"{corpus.provenance} split {k}"))
        pos += size
    return tuple(parts)


# ------------------------------------------------------------------ synthetic data

_CONSONANTS = "bcdfghjklmnprstvz"
_VOWELS = "aeiou"


def _pseudo_words(rng: np.random.Generator, n: int, taken: set[str], capitalize: bool,
                  syllables=(2, 3)) -> list[str]:
    words, attempts = [], 0
    while len(words) < n:
        attempts += 1
        if attempts > 1000 * (n + 10):
            raise ValueError("cannot draw enough distinct pseudo-words; lower the vocabulary size")
        k = int(rng.integers(syllables[0], syllables[1] + 1))
        w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(k))
        if capitalize:
            w = w.capitalize()
        if w.lower() in taken:
            continue
        taken.add(w.lower())
        words.append(w)
    return words


@dataclass(frozen=True)
class GeneratorSpec:
    """Parameters of the synthetic tagging corpus.

    Each entity type owns a disjoint block of capitalized pseudo-words; with
    probability ``trigger_prob`` an entity is preceded by one of its type's
    cue words.  ``domain`` selects which slice of each block is used so two
    domains share only ``shared_fraction`` of their entity vocabulary.
    """

    entity_types: tuple[str, ...]
    entity_vocab: int = 40
    background_vocab: int = 200
    entity_start_prob: float = 0.15
    mean_entity_length: float = 1.5
    length_range: tuple[int, int] = (6, 16)
    trigger_prob: float = 0.5
    triggers_per_type: int = 3
    type_weights: tuple[float, ...] | None = None
    domain: int = 0
    shared_fraction: float = 1.0
    vocab_seed: int = 1234
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "entity_types", tuple(self.entity_types))
        object.__setattr__(self, "length_range", tuple(self.length_range))
        if not 0.0 <= self.entity_start_prob < 1.0:
            raise ValueError("entity_start_prob must lie in [0, 1)")
        if self.mean_entity_length < 1.0:
            raise ValueError("mean entity length must be >= 1")
        lo, hi = self.length_range
        if lo < 1 or hi < lo:
            raise ValueError("invalid sentence length range")
        if min(self.entity_vocab, self.background_vocab) < 1:
            raise ValueError("vocabulary sizes must be >= 1")
        if not 0.0 <= self.shared_fraction <= 1.0 or not 0.0 <= self.trigger_prob <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        if self.type_weights is not None and len(self.type_weights) != len(self.entity_types):
            raise ValueError("one weight per entity type")

    def with_(self, **kw) -> "GeneratorSpec":
        return replace(self, **kw)


@dataclass
class _Vocabulary:
    background: list[str]
    entity: dict[str, list[str]]
    triggers: dict[str, list[str]] = field(default_factory=dict)


def _vocabulary(spec: GeneratorSpec) -> _Vocabulary:
    # Depends only on vocab_seed, the type list and the domain, never on the sample seed.
    rng = np.random.default_rng(spec.vocab_seed)
    taken: set[str] = set()
    background = _pseudo_words(rng, spec.background_vocab, taken, capitalize=False, syllables=(1, 3))
    n_shared = int(round(spec.shared_fraction * spec.entity_vocab))
    n_own = spec.entity_vocab - n_shared
    entity, triggers = {}, {}
    for t in spec.entity_types:
        triggers[t] = _pseudo_words(rng, spec.triggers_per_type, taken, capitalize=False,
                                    syllables=(2, 2))
        entity[t] = _pseudo_words(rng, n_shared, taken, capitalize=True)
    if n_own:
        # Earlier domains are drawn first so domain blocks never collide with each other.
        for d in range(spec.domain + 1):
            for t in spec.entity_types:
                own = _pseudo_words(rng, n_own, taken, capitalize=True)
                if d == spec.domain:
                    entity[t] = entity[t] + own
    return _Vocabulary(background, entity, triggers)


def generate_synthetic(spec: GeneratorSpec, n_sentences: int,
                       tagset_id: str = "synthetic") -> AnnotatedCorpus:
    """Sample sentences from a first-order chain with type-specific vocabularies."""
    vocab = _vocabulary(spec)
    rng = np.random.default_rng([spec.seed, spec.domain])
    types = spec.entity_types
    weights = np.ones(len(types)) if spec.type_weights is None else np.asarray(spec.type_weights, float)
    weights = weights / weights.sum()
    p_continue = 1.0 - 1.0 / spec.mean_entity_length
    lo, hi = spec.length_range
    sentences, labels = [], []
    for _ in range(n_sentences):
        n = int(rng.integers(lo, hi + 1))
        toks, labs = [], []
        after_entity = False
        while len(toks) < n:
            # A background token always separates two entities.
            if types and not after_entity and rng.random() < spec.entity_start_prob:
                t = types[int(rng.choice(len(types), p=weights))]
                if rng.random() < spec.trigger_prob:
                    toks.append(vocab.triggers[t][int(rng.integers(len(vocab.triggers[t])))])
                    labs.append("O")
                words = vocab.entity[t]
                toks.append(words[int(rng.integers(len(words)))])
                labs.append(f"B-{t}")
                while rng.random() < p_continue:
                    toks.append(words[int(rng.integers(len(words)))])
                    labs.append(f"I-{t}")
                after_entity = True
            else:
                after_entity = False
                toks.append(vocab.background[int(rng.integers(len(vocab.background)))])
                labs.append("O")
        sentences.append(toks)
        labels.append(labs)
    return AnnotatedCorpus(sentences, labels, TagSet(tagset_id, types),
                           provenance=f"synthetic(seed={spec.seed}, domain={spec.domain})")
