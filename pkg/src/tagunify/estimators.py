"""scikit-learn style estimators over the CRF machinery.

``X`` is always a list of token lists and ``y`` a list of BIO label lists,
so the estimators work with ``clone``, ``get_params`` and grid search.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, clone
from sklearn.utils.validation import check_is_fitted

from .corpus import AnnotatedCorpus
from .evalmetrics import micro_prf
from .features import Model
from .lattice import bio_masks, posterior
from .objectives import DistillConfig, Instance
from .tagspace import TagHierarchy, TagSet
from .trainer import TrainConfig, decode, train
from .unify import ScenarioConfig, TeacherHandle, distill, unify_labels

ALPHA_GRID = (0.2, 0.4, 0.6, 0.8)


def check_sentences(X) -> list[list[str]]:
    if isinstance(X, (str, bytes)):
        raise TypeError("X must be a sequence of token sequences, not a string")
    out = []
    for n, s in enumerate(X):
        if isinstance(s, str):
            raise TypeError(f"sentence {n} is a string; expected a list of tokens")
        s = list(s)
        if not s:
            raise ValueError(f"sentence {n} is empty")
        if not all(isinstance(t, str) and t for t in s):
            raise ValueError(f"sentence {n} contains a non-string or empty token")
        out.append(s)
    return out


def check_label_sequences(X: list[list[str]], y, tagset: TagSet | None = None) -> list[list[str]]:
    y = [list(seq) for seq in y]
    if len(y) != len(X):
        raise ValueError(f"{len(X)} sentences but {len(y)} label sequences")
    for n, (s, seq) in enumerate(zip(X, y)):
        if len(s) != len(seq):
            raise ValueError(f"sentence {n}: {len(s)} tokens but {len(seq)} labels")
        if tagset is not None:
            for lab in seq:
                tagset.index(lab)
    return y


def _infer_tagset(y: Sequence[Sequence[str]], tagset_id: str = "tags") -> TagSet:
    types: list[str] = []
    for seq in y:
        for lab in seq:
            if lab != "O" and lab[2:] not in types:
                types.append(lab[2:])
    return TagSet(tagset_id, tuple(types))


class CRFTagger(BaseEstimator):
    """Supervised linear-chain CRF (or per-token softmax with ``kind="local"``)."""

    def __init__(self, kind="crf", batch_size=10, learning_rate=0.015, lr_decay=0.05,
                 max_epochs=20, patience=5, l2=1e-6, optimizer="sgd", seed=0, workers=1,
                 bio_mask=True, hash_seed=0, tagset=None):
        self.kind = kind
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.max_epochs = max_epochs
        self.patience = patience
        self.l2 = l2
        self.optimizer = optimizer
        self.seed = seed
        self.workers = workers
        self.bio_mask = bio_mask
        self.hash_seed = hash_seed
        self.tagset = tagset

    def _train_config(self) -> TrainConfig:
        return TrainConfig(batch_size=self.batch_size, learning_rate=self.learning_rate,
                           lr_decay=self.lr_decay, max_epochs=self.max_epochs,
                           patience=self.patience, l2=self.l2, seed=self.seed,
                           optimizer=self.optimizer, workers=self.workers)

    def _dev(self, X_dev, y_dev, tagset: TagSet):
        if X_dev is None:
            return None
        X_dev = check_sentences(X_dev)
        return X_dev, check_label_sequences(X_dev, y_dev, tagset)

    def fit(self, X, y, X_dev=None, y_dev=None, log_path=None):
        X = check_sentences(X)
        tagset = self.tagset or _infer_tagset(y)
        y = check_label_sequences(X, y, tagset)
        model = Model(tagset, kind=self.kind, seed=self.hash_seed)
        model.add_features(X)
        instances = [Instance(model.featurize(s), labels=tagset.encode(labs))
                     for s, labs in zip(X, y)]
        self.model_, self.report_ = train(model, instances, self._train_config(),
                                          self._dev(X_dev, y_dev, tagset), log_path, self.bio_mask)
        return self

    @property
    def labels_(self) -> list[str]:
        check_is_fitted(self, "model_")
        return self.model_.labels

    def predict(self, X) -> list[list[str]]:
        check_is_fitted(self, "model_")
        m = self.model_
        return [m.tagset.decode(decode(m, m.featurize(s), self.bio_mask))
                for s in check_sentences(X)]

    def predict_marginals(self, X, tau: float = 1.0) -> list[np.ndarray]:
        """Per-token label posteriors (T x L) for each sentence."""
        check_is_fitted(self, "model_")
        m = self.model_
        out = []
        for s in check_sentences(X):
            lat = m.lattice(m.featurize(s)).scaled(1.0 / tau)
            out.append(posterior(lat, with_pairs=False).node)
        return out

    def score(self, X, y) -> float:
        """Micro-averaged exact-match span F1."""
        return micro_prf([list(s) for s in y], self.predict(X)).f1


class MarginalCRFTagger(CRFTagger):
    """CRF over unified leaves trained on corpora annotated with different tag sets.

    Tokens labelled ``O`` under one tag set may carry any label the tag set
    does not cover; coarse labels allow any of their descendant leaves.
    """

    def __init__(self, hierarchy=None, kind="crf", batch_size=10, learning_rate=0.015,
                 lr_decay=0.05, max_epochs=20, patience=5, l2=1e-6, optimizer="sgd", seed=0,
                 workers=1, bio_mask=True, hash_seed=0):
        super().__init__(kind=kind, batch_size=batch_size, learning_rate=learning_rate,
                         lr_decay=lr_decay, max_epochs=max_epochs, patience=patience, l2=l2,
                         optimizer=optimizer, seed=seed, workers=workers, bio_mask=bio_mask,
                         hash_seed=hash_seed)
        self.hierarchy = hierarchy

    def fit(self, X, y, tagsets=None, X_dev=None, y_dev=None, log_path=None):
        """``tagsets[n]`` names the tag set (id or :class:`TagSet`) sentence ``n`` is annotated with."""
        h: TagHierarchy = self.hierarchy
        if h is None:
            raise ValueError("MarginalCRFTagger needs a hierarchy")
        X = check_sentences(X)
        if tagsets is None:
            tagsets = [h.unified] * len(X)
        elif isinstance(tagsets, (str, TagSet)):
            tagsets = [tagsets] * len(X)
        if len(tagsets) != len(X):
            raise ValueError("one tag set per sentence is required")
        projections = [h.identity_projection() if ts is h.unified or ts == "unified"
                       else h.projection_for(ts) for ts in tagsets]
        y = [list(seq) for seq in y]
        check_label_sequences(X, y)
        model = Model(h.unified, hierarchy_id=h.name, kind=self.kind, seed=self.hash_seed)
        model.add_features(X)
        instances = [Instance(model.featurize(s), allowed=proj.constraint(labs))
                     for s, labs, proj in zip(X, y, projections)]
        dev = None
        if X_dev is not None:
            Xd = check_sentences(X_dev)
            dev = (Xd, unify_labels(AnnotatedCorpus(Xd, [list(l) for l in y_dev], h.unified), h))
        self.model_, self.report_ = train(model, instances, self._train_config(), dev,
                                          log_path, self.bio_mask)
        return self

    def fit_corpora(self, corpora: Sequence[AnnotatedCorpus], dev: AnnotatedCorpus | None = None,
                    log_path=None):
        X, y, tagsets = [], [], []
        for c in corpora:
            X += c.sentences
            y += c.labels
            tagsets += [c.tagset] * len(c)
        return self.fit(X, y, tagsets, None if dev is None else dev.sentences,
                        None if dev is None else dev.labels, log_path)


class MardiDistiller(CRFTagger):
    """Unified student distilled from frozen teachers through the tag hierarchy.

    ``mode`` is ``"mardi"`` (teachers only), ``"mardi-data"`` (plus the
    marginal likelihood of partially annotated data, weighted by ``alpha``)
    or ``"progressive"`` (one source teacher plus labelled target data).
    """

    def __init__(self, teachers=None, hierarchy=None, mode="mardi", tau=1.0, alpha=0.5,
                 kind="crf", batch_size=10, learning_rate=0.015, lr_decay=0.05, max_epochs=20,
                 patience=5, l2=1e-6, optimizer="sgd", seed=0, workers=1, bio_mask=True,
                 cache_dir=None, init=None):
        super().__init__(kind=kind, batch_size=batch_size, learning_rate=learning_rate,
                         lr_decay=lr_decay, max_epochs=max_epochs, patience=patience, l2=l2,
                         optimizer=optimizer, seed=seed, workers=workers, bio_mask=bio_mask)
        self.teachers = teachers
        self.hierarchy = hierarchy
        self.mode = mode
        self.tau = tau
        self.alpha = alpha
        self.cache_dir = cache_dir
        self.init = init

    def _handles(self) -> list[TeacherHandle]:
        out = []
        for t in self.teachers or ():
            out.append(t if isinstance(t, TeacherHandle)
                       else TeacherHandle.from_model(t, self.hierarchy))
        return out

    def fit(self, X, y=None, tagsets=None, X_unlabeled=None, X_source=None, X_dev=None,
            y_dev=None, log_path=None):
        """Distil over sentences ``X``.

        With ``y`` and ``tagsets`` the sentences also carry partial
        annotations (``mardi-data`` / ``progressive``).  ``X_unlabeled`` adds
        unannotated text and ``X_source`` source-domain text (progressive).
        """
        h: TagHierarchy = self.hierarchy
        if h is None:
            raise ValueError("MardiDistiller needs a hierarchy")
        X = check_sentences(X)
        labeled = []
        unlabeled = X
        if y is not None:
            y = check_label_sequences(X, y)
            if tagsets is None or isinstance(tagsets, (str, TagSet)):
                tagsets = [tagsets or h.unified] * len(X)
            groups: dict[str, tuple[TagSet, list, list]] = {}
            for s, labs, ts in zip(X, y, tagsets):
                ts = ts if isinstance(ts, TagSet) else h.tagsets[ts]
                groups.setdefault(ts.id, (ts, [], []))
                groups[ts.id][1].append(s)
                groups[ts.id][2].append(labs)
            labeled = [AnnotatedCorpus(s, l, ts) for ts, s, l in groups.values()]
            unlabeled = []
        if X_unlabeled is not None:
            unlabeled = unlabeled + check_sentences(X_unlabeled)
        dev = None
        if X_dev is not None:
            Xd = check_sentences(X_dev)
            dev = AnnotatedCorpus(Xd, [list(l) for l in y_dev], h.unified)
        cfg = ScenarioConfig(
            mode=self.mode, hierarchy=h, teachers=self._handles(), unlabeled=unlabeled,
            labeled=labeled, source_unlabeled=check_sentences(X_source) if X_source else [],
            dev=dev, distill=DistillConfig(self.tau, self.alpha), train=self._train_config(),
            student_kind=self.kind, init=self.init, cache_dir=self.cache_dir, log_path=log_path)
        self.model_, self.report_ = distill(cfg)
        return self


def select_alpha(estimator: MardiDistiller, X, y, tagsets, X_dev, y_dev,
                 grid: Sequence[float] = ALPHA_GRID, **fit_kw):
    """Fit one clone per ``alpha`` in ``grid`` and keep the best on dev F1."""
    best, best_f1, scores = None, -1.0, {}
    for a in grid:
        est = clone(estimator).set_params(alpha=a)
        est.fit(X, y, tagsets, X_dev=X_dev, y_dev=y_dev, **fit_kw)
        f1 = est.score(X_dev, y_dev)
        scores[a] = f1
        if f1 > best_f1:
            best, best_f1 = est, f1
    return best, scores
