"""Exact-match entity span scoring."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence


class Span(NamedTuple):
    start: int
    end: int
    type: str


def extract_spans(labels: Sequence[str]) -> list[Span]:
    """Maximal B-led runs; an orphan ``I-X`` opens a new span."""
    spans = []
    start, cur = None, None
    for i, lab in enumerate(labels):
        if lab == "O":
            kind, etype = "O", None
        elif len(lab) > 2 and lab[1] == "-" and lab[0] in "BI":
            kind, etype = lab[0], lab[2:]
        else:
            raise ValueError(f"not a BIO label: {lab!r}")
        if kind == "I" and etype == cur:
            continue
        if cur is not None:
            spans.append(Span(start, i, cur))
        start, cur = (i, etype) if kind != "O" else (None, None)
    if cur is not None:
        spans.append(Span(start, len(labels), cur))
    return spans


@dataclass
class TypeCounts:
    gold: int = 0
    predicted: int = 0
    correct: int = 0


def _prf(correct: int, predicted: int, gold: int) -> tuple[float, float, float]:
    p = correct / predicted if predicted else 0.0
    r = correct / gold if gold else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


@dataclass
class EvalResult:
    precision: float
    recall: float
    f1: float
    per_type: dict[str, TypeCounts] = field(default_factory=dict)

    @property
    def correct(self) -> int:
        return sum(c.correct for c in self.per_type.values())

    def to_record(self) -> dict:
        rec = {"precision": self.precision, "recall": self.recall, "f1": self.f1, "per_type": {}}
        for t, c in sorted(self.per_type.items()):
            p, r, f = _prf(c.correct, c.predicted, c.gold)
            rec["per_type"][t] = {"gold": c.gold, "predicted": c.predicted, "correct": c.correct,
                                  "precision": p, "recall": r, "f1": f}
        return rec

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True, indent=2)

    def table(self) -> str:
        rows = [f"{'type':<16}{'gold':>7}{'pred':>7}{'corr':>7}{'P':>8}{'R':>8}{'F1':>8}"]
        for t, c in sorted(self.per_type.items()):
            p, r, f = _prf(c.correct, c.predicted, c.gold)
            rows.append(f"{t:<16}{c.gold:>7}{c.predicted:>7}{c.correct:>7}"
                        f"{p:>8.3f}{r:>8.3f}{f:>8.3f}")
        g = sum(c.gold for c in self.per_type.values())
        pr = sum(c.predicted for c in self.per_type.values())
        rows.append(f"{'micro':<16}{g:>7}{pr:>7}{self.correct:>7}"
                    f"{self.precision:>8.3f}{self.recall:>8.3f}{self.f1:>8.3f}")
        return "\n".join(rows)


def micro_prf(gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]]) -> EvalResult:
    if len(gold) != len(pred):
        raise ValueError(f"{len(gold)} gold sentences vs {len(pred)} predicted")
    counts: dict[str, TypeCounts] = {}
    for n, (g, p) in enumerate(zip(gold, pred)):
        if len(g) != len(p):
            raise ValueError(f"sentence {n}: {len(g)} gold labels vs {len(p)} predicted")
        gs, ps = Counter(extract_spans(g)), Counter(extract_spans(p))
        for s, k in gs.items():
            counts.setdefault(s.type, TypeCounts()).gold += k
        for s, k in ps.items():
            counts.setdefault(s.type, TypeCounts()).predicted += k
        for s in gs.keys() & ps.keys():
            counts[s.type].correct += min(gs[s], ps[s])
    correct = sum(c.correct for c in counts.values())
    predicted = sum(c.predicted for c in counts.values())
    total = sum(c.gold for c in counts.values())
    return EvalResult(*_prf(correct, predicted, total), per_type=counts)


def aggregate_labels(labels: Sequence[str], mapping: dict[str, str]) -> list[str]:
    """Rename entity types (e.g. fine leaves to their coarse ancestor); unmapped types become O."""
    out = []
    for lab in labels:
        if lab == "O":
            out.append(lab)
            continue
        new = mapping.get(lab[2:])
        out.append("O" if new is None else f"{lab[0]}-{new}")
    return out
