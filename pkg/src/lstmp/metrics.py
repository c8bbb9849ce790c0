"""Novel-object metrics over generated captions.

A caption "mentions" object o when o's token appears in it verbatim.  All
functions take captions as token lists and labels as per-image sets of
object tokens, so they score any caption source.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np


@dataclass
class EvalReport:
    per_object_f1: dict[str, float]
    f1_average: float
    novel: float
    accuracy: float
    coverage_rate: float
    heldout: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def _check_aligned(captions, labels):
    if len(captions) != len(labels):
        raise ValueError(f"{len(captions)} captions but {len(labels)} label sets")


def f1_per_object(captions: Sequence[Sequence[str]], labels: Sequence[Sequence[str]], obj: str) -> float:
    _check_aligned(captions, labels)
    tp = fp = fn = 0
    for cap, lab in zip(captions, labels):
        said = obj in cap
        has = obj in lab
        tp += said and has
        fp += said and not has
        fn += has and not said
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def novel_and_accuracy(captions: Sequence[Sequence[str]], labels: Sequence[Sequence[str]],
                       heldout: Sequence[str]) -> tuple[float, float]:
    _check_aligned(captions, labels)
    if not heldout:
        raise ValueError("no held-out objects")
    found, rates = 0, []
    for o in heldout:
        hits = [o in cap for cap, lab in zip(captions, labels) if o in lab]
        if not hits:
            raise ValueError(f"held-out object {o!r} has no test images")
        found += any(hits)
        rates.append(sum(hits) / len(hits))
    return found / len(heldout), float(np.mean(rates))


def coverage_report(captions: Sequence[Sequence[str]], labels: Sequence[Sequence[str]]) -> float:
    """Mean over images of the fraction of labelled objects the caption mentions."""
    _check_aligned(captions, labels)
    rates = [len(set(lab) & set(cap)) / len(set(lab)) for cap, lab in zip(captions, labels) if lab]
    return float(np.mean(rates)) if rates else 0.0


def evaluate(captions: Sequence[Sequence[str]], labels: Sequence[Sequence[str]],
             heldout: Sequence[str]) -> EvalReport:
    per = {o: f1_per_object(captions, labels, o) for o in heldout}
    novel, acc = novel_and_accuracy(captions, labels, heldout)
    return EvalReport(per, float(np.mean(list(per.values()))), novel, acc,
                      coverage_report(captions, labels), list(heldout))


SUMMARY_FIELDS = ("f1_average", "novel", "accuracy", "coverage_rate")


def compare_runs(reports: Mapping[str, EvalReport], fmt: str = "text") -> str:
    """Side-by-side table of reports, in insertion order; deltas vs the first run."""
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    names = list(reports)
    first = reports[names[0]]
    objs = list(first.per_object_f1)
    cols = list(SUMMARY_FIELDS) + [f"F1_{o}" for o in objs]

    def row(rep: EvalReport) -> list[float]:
        return [getattr(rep, f) for f in SUMMARY_FIELDS] + [rep.per_object_f1.get(o, float("nan")) for o in objs]

    base = row(first)
    table = {n: dict(zip(cols, row(reports[n]))) for n in names}
    deltas = {n: dict(zip(cols, (v - b for v, b in zip(row(reports[n]), base)))) for n in names[1:]}
    if fmt == "json":
        return json.dumps({"columns": cols, "runs": table, "delta_vs_" + names[0]: deltas}, indent=1)
    w = max(8, *(len(n) for n in names))
    lines = [f"{'run':<{w}} " + " ".join(f"{c:>14}" for c in cols)]
    for n in names:
        lines.append(f"{n:<{w}} " + " ".join(f"{table[n][c]:>14.4f}" for c in cols))
    for n in names[1:]:
        lines.append(f"{'d ' + n:<{w}} " + " ".join(f"{deltas[n][c]:>+14.4f}" for c in cols))
    return "\n".join(lines)
