"""Tag sets, BIO labels and the tag hierarchy that aligns several tag sets.

A hierarchy is a DAG over entity types drawn from every tag set.  Its leaves
form the unified (fine-grained) label space the student predicts over, and
each tag set gets a precomputed :class:`Projection` that maps its BIO labels
onto disjoint groups of unified labels.
"""

from __future__ import annotations

import graphlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

OUTSIDE = "O"
PLACEHOLDER_SUFFIX = "-OTHER"


class HierarchyError(ValueError):
    """Raised for malformed or inconsistent tag hierarchies."""


@dataclass(frozen=True)
class BioLabel:
    kind: str
    entity_type: str | None = None

    def __post_init__(self):
        if self.kind not in ("O", "B", "I"):
            raise ValueError(f"bad BIO kind {self.kind!r}")
        if (self.kind == "O") != (self.entity_type is None):
            raise ValueError("entity_type must be absent iff kind is O")
        if self.entity_type is not None and not self.entity_type:
            raise ValueError("empty entity type")

    @classmethod
    def parse(cls, text: str) -> "BioLabel":
        if text == OUTSIDE:
            return cls("O")
        if len(text) > 2 and text[1] == "-" and text[0] in "BI":
            return cls(text[0], text[2:])
        raise ValueError(f"not a BIO label: {text!r}")

    def __str__(self) -> str:
        return OUTSIDE if self.kind == "O" else f"{self.kind}-{self.entity_type}"


@dataclass(frozen=True)
class TagSet:
    """An ordered inventory of entity types under BIO encoding.

    Label index 0 is ``O``; type ``k`` owns ``B`` at ``2k+1`` and ``I`` at ``2k+2``.
    """

    id: str
    entity_types: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "entity_types", tuple(self.entity_types))
        if len(set(self.entity_types)) != len(self.entity_types):
            raise ValueError(f"duplicate entity types in tag set {self.id!r}")
        if any(not t for t in self.entity_types):
            raise ValueError("empty entity type name")

    @property
    def labels(self) -> list[str]:
        out = [OUTSIDE]
        for t in self.entity_types:
            out += [f"B-{t}", f"I-{t}"]
        return out

    @property
    def n_labels(self) -> int:
        return 2 * len(self.entity_types) + 1

    def index(self, label: str) -> int:
        if label == OUTSIDE:
            return 0
        bio = BioLabel.parse(label)
        try:
            k = self.entity_types.index(bio.entity_type)
        except ValueError:
            raise KeyError(f"label {label!r} not in tag set {self.id!r}") from None
        return 2 * k + 1 + (bio.kind == "I")

    def encode(self, labels: Sequence[str]) -> np.ndarray:
        return np.array([self.index(lab) for lab in labels], dtype=np.int64)

    def decode(self, indices: Iterable[int]) -> list[str]:
        labels = self.labels
        return [labels[i] for i in indices]

    def __contains__(self, entity_type: str) -> bool:
        return entity_type in self.entity_types


@dataclass(frozen=True)
class Projection:
    """Maps each label of a source tag set onto a group of unified labels.

    ``groups[i]`` holds the unified indices for source label ``i``;
    ``membership`` is the equivalent 0/1 matrix (source x unified) and
    ``inverse[j]`` the source label owning unified label ``j``.
    """

    source: TagSet
    unified: TagSet
    mapping: Mapping[str, frozenset[str]]
    groups: tuple[np.ndarray, ...] = field(repr=False)
    membership: np.ndarray = field(repr=False)
    inverse: np.ndarray = field(repr=False)

    @classmethod
    def from_mapping(cls, source: TagSet, unified: TagSet,
                     mapping: Mapping[str, Iterable[str]]) -> "Projection":
        mapping = {k: frozenset(v) for k, v in mapping.items()}
        if set(mapping) != set(source.labels):
            raise HierarchyError(f"projection for {source.id!r} does not cover its labels")
        membership = np.zeros((source.n_labels, unified.n_labels))
        for lab, image in mapping.items():
            if not image:
                raise HierarchyError(f"label {lab} of {source.id!r} maps to nothing")
            for u in image:
                membership[source.index(lab), unified.index(u)] += 1
        cover = membership.sum(axis=0)
        if np.any(cover != 1):
            bad = [unified.labels[j] for j in np.flatnonzero(cover != 1)]
            raise HierarchyError(
                f"projection for tag set {source.id!r} is not a partition; "
                f"unified labels covered !=1 times: {bad}")
        groups = tuple(np.flatnonzero(row) for row in membership)
        inverse = membership.argmax(axis=0)
        for arr in (membership, inverse):
            arr.setflags(write=False)
        return cls(source, unified, mapping, groups, membership, inverse)

    def __call__(self, label: str) -> frozenset[str]:
        return self.mapping[label]

    def to_source(self, unified_indices: Iterable[int]) -> list[str]:
        """Aggregate unified label indices back to source-tag-set labels."""
        return self.source.decode(self.inverse[i] for i in unified_indices)

    def constraint(self, labels: Sequence[str]) -> np.ndarray:
        """Boolean T x L_unified mask of unified labels compatible with ``labels``."""
        idx = self.source.encode(labels)
        return self.membership[idx].astype(bool)

    @property
    def is_identity(self) -> bool:
        return (self.membership.shape[0] == self.membership.shape[1]
                and bool(np.all(self.membership == np.eye(len(self.membership)))))


class TagHierarchy:
    """Validated DAG over entity types with cached per-tag-set projections.

    Build instances through :func:`build_hierarchy` or :func:`parse_hierarchy`.
    """

    def __init__(self, tagsets: Sequence[TagSet], children: Mapping[str, Sequence[str]],
                 placeholders: Iterable[str] = (), name: str = "hierarchy"):
        self.name = name
        self.tagsets = {ts.id: ts for ts in tagsets}
        self.children = {k: tuple(v) for k, v in children.items()}
        self.placeholders = frozenset(placeholders)

        nodes: list[str] = []
        for ts in tagsets:
            for t in ts.entity_types:
                if t not in nodes:
                    nodes.append(t)
        for parent, kids in self.children.items():
            for k in kids:
                if k not in nodes:
                    nodes.append(k)
        self.nodes = tuple(nodes)

        self.parents: dict[str, list[str]] = {n: [] for n in nodes}
        for parent, kids in self.children.items():
            for k in kids:
                self.parents[k].append(parent)

        self._leaf_cache: dict[str, frozenset[str]] = {}
        leaves: list[str] = []
        for n in self.nodes:
            for leaf in self._ordered_leaves(n):
                if leaf not in leaves:
                    leaves.append(leaf)
        self.leaves = tuple(leaves)
        self.unified = TagSet("unified", self.leaves)
        self.projections = {ts.id: self._project(ts) for ts in tagsets}

    def _ordered_leaves(self, node: str) -> list[str]:
        kids = self.children.get(node, ())
        if not kids:
            return [node]
        out: list[str] = []
        for k in kids:
            for leaf in self._ordered_leaves(k):
                if leaf not in out:
                    out.append(leaf)
        return out

    def is_leaf(self, node: str) -> bool:
        return not self.children.get(node)

    def descendant_leaves(self, node: str) -> frozenset[str]:
        if node not in self.parents:
            raise KeyError(f"unknown tag {node!r}")
        if node not in self._leaf_cache:
            self._leaf_cache[node] = frozenset(self._ordered_leaves(node))
        return self._leaf_cache[node]

    def representative_leaf(self, node: str) -> str:
        """Leaf standing in for a coarse node: its placeholder child, else its first leaf."""
        for k in self.children.get(node, ()):
            if k in self.placeholders:
                return k
        return self._ordered_leaves(node)[0]

    def root_of(self, node: str) -> str:
        """Top-level ancestor reached through first parents."""
        if node not in self.parents:
            raise KeyError(f"unknown tag {node!r}")
        while self.parents[node]:
            node = self.parents[node][0]
        return node

    def _project(self, ts: TagSet) -> Projection:
        covered: dict[str, str] = {}
        mapping: dict[str, set[str]] = {}
        for t in ts.entity_types:
            leaves = self.descendant_leaves(t)
            for leaf in leaves:
                if leaf in covered:
                    raise HierarchyError(
                        f"tags {covered[leaf]!r} and {t!r} of tag set {ts.id!r} both "
                        f"claim leaf {leaf!r}; projection cannot partition")
                covered[leaf] = t
            mapping[f"B-{t}"] = {f"B-{x}" for x in leaves}
            mapping[f"I-{t}"] = {f"I-{x}" for x in leaves}
        outside = {OUTSIDE}
        for leaf in self.leaves:
            if leaf not in covered:
                outside |= {f"B-{leaf}", f"I-{leaf}"}
        mapping[OUTSIDE] = outside
        return Projection.from_mapping(ts, self.unified, mapping)

    def projection_for(self, tagset: TagSet | str) -> Projection:
        key = tagset if isinstance(tagset, str) else tagset.id
        if key not in self.projections:
            if isinstance(tagset, str):
                raise KeyError(f"unknown tag set {key!r}")
            missing = [t for t in tagset.entity_types if t not in self.parents]
            if missing:
                raise KeyError(f"tags {missing} are not hierarchy nodes")
            return self._project(tagset)
        return self.projections[key]

    def identity_projection(self) -> Projection:
        return Projection.from_mapping(
            self.unified, self.unified, {lab: {lab} for lab in self.unified.labels})

    def to_text(self) -> str:
        lines = [f"# hierarchy {self.name}"]
        for ts in self.tagsets.values():
            lines.append(f"tagset {ts.id}: {','.join(ts.entity_types)}")
        opened = []
        for parent, kids in self.children.items():
            for k in kids:
                if k in self.placeholders:
                    opened.append(parent)
                else:
                    lines.append(f"edge {parent} -> {k}")
        lines += [f"open {p}" for p in opened]
        return "\n".join(lines) + "\n"

    def __repr__(self) -> str:
        return (f"TagHierarchy(name={self.name!r}, tagsets={list(self.tagsets)}, "
                f"leaves={list(self.leaves)})")


def build_hierarchy(tagsets: Sequence[TagSet], edges: Iterable[tuple[str, str]] = (),
                    open_parents: Iterable[str] = (), name: str = "hierarchy") -> TagHierarchy:
    """Validate tag sets and parent->child edges and return a hierarchy.

    Each parent listed in ``open_parents`` gets an extra ``<PARENT>-OTHER``
    leaf covering the semantic space its declared children leave open.
    """
    known = {t for ts in tagsets for t in ts.entity_types}
    ids = [ts.id for ts in tagsets]
    if len(set(ids)) != len(ids):
        raise HierarchyError("duplicate tag set id")
    children: dict[str, list[str]] = {}
    for parent, child in edges:
        for n in (parent, child):
            if n not in known:
                raise HierarchyError(f"edge references unknown tag {n!r}")
        if parent == child:
            raise HierarchyError(f"self-loop on {parent!r}")
        kids = children.setdefault(parent, [])
        if child not in kids:
            kids.append(child)

    placeholders = []
    for parent in open_parents:
        if parent not in known:
            raise HierarchyError(f"open references unknown tag {parent!r}")
        ph = parent + PLACEHOLDER_SUFFIX
        if ph in known:
            raise HierarchyError(f"placeholder {ph!r} collides with a declared tag")
        if ph in placeholders:
            continue
        children.setdefault(parent, []).append(ph)
        placeholders.append(ph)

    sorter = graphlib.TopologicalSorter({p: set(k) for p, k in children.items()})
    try:
        sorter.prepare()
    except graphlib.CycleError as exc:
        raise HierarchyError(f"cycle in tag hierarchy: {exc.args[1]}") from None

    return TagHierarchy(tagsets, children, placeholders, name=name)


def parse_hierarchy(text: str, name: str = "hierarchy") -> TagHierarchy:
    """Parse the line-oriented hierarchy format.

    ``tagset ID: A,B,C`` declares a tag set, ``edge P -> C`` an edge and
    ``open P`` a non-exhaustive parent.  ``#`` starts a comment.
    """
    tagsets, edges, opened = [], [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, _, rest = line.partition(" ")
        rest = rest.strip()
        if head == "tagset":
            tid, sep, types = rest.partition(":")
            if not sep or not tid.strip():
                raise HierarchyError(f"line {lineno}: expected 'tagset ID: T1,T2'")
            names = tuple(t.strip() for t in types.split(",") if t.strip())
            tagsets.append(TagSet(tid.strip(), names))
        elif head == "edge":
            parent, sep, child = rest.partition("->")
            if not sep or not parent.strip() or not child.strip():
                raise HierarchyError(f"line {lineno}: expected 'edge PARENT -> CHILD'")
            edges.append((parent.strip(), child.strip()))
        elif head == "open":
            if not rest or " " in rest:
                raise HierarchyError(f"line {lineno}: expected 'open PARENT'")
            opened.append(rest)
        else:
            raise HierarchyError(f"line {lineno}: unknown directive {head!r}")
    if not tagsets:
        raise HierarchyError("hierarchy declares no tag sets")
    return build_hierarchy(tagsets, edges, opened, name=name)


def load_hierarchy(path: str | Path) -> TagHierarchy:
    path = Path(path)
    return parse_hierarchy(path.read_text(encoding="utf-8"), name=path.stem)


def flat_hierarchy(*tagsets: TagSet, name: str = "flat") -> TagHierarchy:
    """Hierarchy with no edges: every tag is its own leaf."""
    return build_hierarchy(tagsets, name=name)
