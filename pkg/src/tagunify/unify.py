"""Multi-teacher scenarios: marginal distillation, its data-augmented and
progressive variants, and the post-processing merge baseline."""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import AnnotatedCorpus, repair_bio
from .features import Model
from .lattice import bio_masks, posterior, viterbi
from .objectives import DistillConfig, Instance
from .tagspace import Projection, TagHierarchy
from .trainer import TrainConfig, TrainReport, train

log = logging.getLogger(__name__)

MODES = ("mardi", "mardi-data", "progressive")
CACHE_ENV = "TAGUNIFY_CACHE_DIR"


class ScenarioError(ValueError):
    pass


@dataclass
class TeacherHandle:
    """A frozen pre-trained model plus its projection onto the unified leaves."""

    name: str
    model: Model
    projection: Projection

    @classmethod
    def from_model(cls, model: Model, hierarchy: TagHierarchy, name: str | None = None
                   ) -> "TeacherHandle":
        ts = model.tagset
        known = hierarchy.tagsets.get(ts.id)
        if known is not None and known.entity_types != ts.entity_types:
            raise ScenarioError(f"teacher tag set {ts.id!r} differs from the hierarchy's declaration")
        try:
            proj = hierarchy.projection_for(ts)
        except KeyError as exc:
            raise ScenarioError(f"teacher does not fit the hierarchy: {exc}") from None
        return cls(name or ts.id, model, proj)

    @property
    def kind(self) -> str:
        return self.model.kind


def _cache_key(teacher: TeacherHandle, sentences: Sequence[Sequence[str]], tau: float) -> str:
    h = hashlib.sha256()
    h.update(teacher.model.to_bytes())
    for s in sentences:
        h.update("\x1f".join(s).encode("utf-8") + b"\x1e")
    h.update(repr(float(tau)).encode())
    return h.hexdigest()[:32]


def teacher_marginals(teacher: TeacherHandle, sentences: Sequence[Sequence[str]],
                      tau: float = 1.0, cache_dir: str | Path | None = None) -> list[np.ndarray]:
    """Soft targets ``q`` (T x L_k) of a teacher over ``sentences`` at temperature ``tau``.

    Local teachers give per-token softmaxes of their emission scores, CRF
    teachers node marginals.  Results are cached on disk when ``cache_dir``
    (or ``$TAGUNIFY_CACHE_DIR``) is set.
    """
    cache_dir = cache_dir or os.environ.get(CACHE_ENV)
    path = None
    if cache_dir:
        path = Path(cache_dir) / f"q-{_cache_key(teacher, sentences, tau)}.npz"
        if path.exists():
            with np.load(path) as data:
                return [data[f"q{i}"] for i in range(len(sentences))]
    m = teacher.model
    out = []
    for s in sentences:
        lat = m.lattice(m.featurize(s)).scaled(1.0 / tau)
        if m.kind == "local":
            z = lat.emission - lat.emission.max(axis=1, keepdims=True)
            q = np.exp(z)
            q /= q.sum(axis=1, keepdims=True)
        else:
            q = posterior(lat, with_pairs=False).node
        out.append(q)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp.npz")
        np.savez(tmp, **{f"q{i}": q for i, q in enumerate(out)})
        os.replace(tmp, path)
    return out


@dataclass
class ScenarioConfig:
    """What a distillation run may use.

    ``labeled`` corpora are annotated under tag sets of the hierarchy and
    feed the student loss (``mardi-data`` and ``progressive``);
    ``unlabeled`` is distillation text; ``source_unlabeled`` is extra
    source-domain text for the progressive mode.
    """

    mode: str
    hierarchy: TagHierarchy
    teachers: list[TeacherHandle] = field(default_factory=list)
    unlabeled: list[list[str]] = field(default_factory=list)
    labeled: list[AnnotatedCorpus] = field(default_factory=list)
    source_unlabeled: list[list[str]] = field(default_factory=list)
    dev: AnnotatedCorpus | None = None
    distill: DistillConfig = field(default_factory=DistillConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    student_kind: str = "crf"
    init: Model | None = None
    cache_dir: str | Path | None = None
    log_path: str | Path | None = None

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ScenarioError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not self.teachers:
            raise ScenarioError(f"mode {self.mode!r} needs at least one teacher")
        if self.mode == "mardi" and not self.unlabeled:
            raise ScenarioError("mardi needs unlabeled text")
        if self.mode == "mardi-data" and not self.labeled:
            raise ScenarioError("mardi-data needs labeled corpora")
        if self.mode == "progressive":
            if len(self.teachers) != 1:
                raise ScenarioError("progressive needs exactly one source teacher")
            if not self.labeled:
                raise ScenarioError("progressive needs labeled target data")
        for t in self.teachers:
            if t.projection.unified.labels != self.hierarchy.unified.labels:
                raise ScenarioError(f"teacher {t.name!r} is projected onto a different hierarchy")
        for c in self.labeled:
            self.hierarchy.projection_for(c.tagset)


def _dedupe(groups: Sequence[Sequence[Sequence[str]]]) -> list[list[str]]:
    seen, out = set(), []
    for group in groups:
        for s in group:
            key = tuple(s)
            if key not in seen:
                seen.add(key)
                out.append(list(s))
    return out


def distill(cfg: ScenarioConfig) -> tuple[Model, TrainReport]:
    """Train a unified student from frozen teachers (plus labels, depending on mode)."""
    cfg.validate()
    h = cfg.hierarchy
    alpha = cfg.distill.alpha
    use_labels = cfg.mode in ("mardi-data", "progressive") and alpha > 0
    if cfg.init is not None:
        if cfg.init.labels != h.unified.labels:
            raise ScenarioError("initial student is not bound to the unified label space")
        student = cfg.init.copy()
    else:
        student = Model(h.unified, hierarchy_id=h.name, kind=cfg.student_kind)

    annotated: dict[tuple[str, ...], np.ndarray] = {}
    labeled_text: list[list[str]] = []
    for corpus in cfg.labeled:
        labeled_text += [list(s) for s in corpus.sentences]
        if not use_labels:
            continue
        proj = h.projection_for(corpus.tagset)
        for toks, labs in corpus:
            annotated.setdefault(tuple(toks), proj.constraint(labs))

    if cfg.mode == "mardi":
        text = _dedupe([cfg.unlabeled])
    elif cfg.mode == "mardi-data":
        text = _dedupe([labeled_text, cfg.unlabeled])
    else:
        text = _dedupe([labeled_text, cfg.unlabeled, cfg.source_unlabeled])

    student.add_features(text)
    feats = [student.featurize(s) for s in text]
    soft = [teacher_marginals(t, text, cfg.distill.tau, cfg.cache_dir) for t in cfg.teachers]
    instances = []
    for n, s in enumerate(text):
        targets = [(soft[k][n], t.projection.membership) for k, t in enumerate(cfg.teachers)]
        instances.append(Instance(feats[n], allowed=annotated.get(tuple(s)), targets=targets,
                                  alpha=alpha, tau=cfg.distill.tau))
    dev = None
    if cfg.dev is not None:
        dev = (cfg.dev.sentences, unify_labels(cfg.dev, h))
    log.info("distilling %s: %d sentences, %d teachers, %d annotated",
             cfg.mode, len(instances), len(cfg.teachers), len(annotated))
    return train(student, instances, cfg.train, dev=dev, log_path=cfg.log_path)


def unify_labels(corpus: AnnotatedCorpus, hierarchy: TagHierarchy) -> list[list[str]]:
    """Gold labels of a corpus expressed over unified leaves.

    Labels must already be leaves; coarse labels are replaced by their
    representative leaf.
    """
    out = []
    for seq in corpus.labels:
        row = []
        for lab in seq:
            if lab == "O":
                row.append(lab)
            else:
                row.append(f"{lab[0]}-{_to_leaf(lab[2:], hierarchy)}")
        out.append(row)
    return out


def _to_leaf(entity_type: str, hierarchy: TagHierarchy) -> str:
    if entity_type not in hierarchy.parents:
        raise KeyError(f"type {entity_type!r} is not in hierarchy {hierarchy.name!r}")
    return entity_type if hierarchy.is_leaf(entity_type) else hierarchy.representative_leaf(entity_type)


def postprocess_merge(teachers: Sequence[TeacherHandle], tokens: Sequence[str],
                      hierarchy: TagHierarchy, bio_mask: bool = True) -> list[str]:
    """Merge per-teacher decodes token by token.

    The non-O decoded label with the highest node marginal wins (first teacher
    on ties); coarse types map to their representative leaf; orphan ``I-``
    labels are repaired afterwards.
    """
    if not teachers:
        raise ScenarioError("post-processing needs at least one teacher")
    T = len(tokens)
    best_label = ["O"] * T
    best_prob = np.full(T, -1.0)
    for teacher in teachers:
        m = teacher.model
        lat = m.lattice(m.featurize(tokens))
        if bio_mask:
            trans, start = bio_masks(m.labels)
            lat = lat.with_transition_mask(trans, start)
        y, _ = viterbi(lat)
        node = posterior(lat, with_pairs=False).node
        for t, j in enumerate(y):
            if j == 0:
                continue
            prob = node[t, j]
            if prob > best_prob[t]:
                lab = m.labels[j]
                best_prob[t] = prob
                best_label[t] = f"{lab[0]}-{_to_leaf(lab[2:], hierarchy)}"
    return repair_bio(best_label)[0]


def merge_corpus(teachers: Sequence[TeacherHandle], sentences: Sequence[Sequence[str]],
                 hierarchy: TagHierarchy, bio_mask: bool = True) -> list[list[str]]:
    return [postprocess_merge(teachers, s, hierarchy, bio_mask) for s in sentences]
