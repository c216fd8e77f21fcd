"""Exact-match accuracy and ROUGE-1/2/L F1 on raw token sequences."""

from __future__ import annotations

import collections
import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence


def exact_match(refs: Sequence[Sequence[str]], hyps: Sequence[Sequence[str]]) -> float:
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    if not refs:
        return 0.0
    return sum(list(r) == list(h) for r, h in zip(refs, hyps)) / len(refs)


def _f1(overlap: float, n_hyp: int, n_ref: int) -> float:
    if n_hyp == 0 or n_ref == 0 or overlap == 0:
        return 0.0
    p, r = overlap / n_hyp, overlap / n_ref
    return 2 * p * r / (p + r)


def _ngrams(tokens: Sequence[str], n: int) -> collections.Counter:
    return collections.Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(ref: Sequence[str], hyp: Sequence[str], n: int = 1) -> float:
    """F1 of clipped n-gram overlap."""
    if n < 1:
        raise ValueError("n must be >= 1")
    r, h = _ngrams(ref, n), _ngrams(hyp, n)
    overlap = sum((r & h).values())
    return _f1(overlap, sum(h.values()), sum(r.values()))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(ref: Sequence[str], hyp: Sequence[str]) -> float:
    """F1 over the longest common subsequence."""
    return _f1(lcs_length(ref, hyp), len(hyp), len(ref))


@dataclass
class EvalReport:
    metric: str
    records: list[dict] = field(default_factory=list)

    @property
    def score_keys(self) -> list[str]:
        return ["correct"] if self.metric == "exact" else ["rouge1", "rouge2", "rougeL"]

    def aggregates(self) -> dict[str, float]:
        n = len(self.records)
        return {k: (sum(float(r[k]) for r in self.records) / n if n else 0.0)
                for k in self.score_keys}

    def write(self, csv_path, summary_path) -> None:
        with Path(csv_path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["reference", "hypothesis", *self.score_keys])
            for r in self.records:
                w.writerow([r["reference"], r["hypothesis"], *(r[k] for k in self.score_keys)])
        summary = {"metric": self.metric, "count": len(self.records), **self.aggregates()}
        Path(summary_path).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")


def evaluate(refs: Sequence[str], hyps: Sequence[str], metric: str = "exact",
             level: str = "word") -> EvalReport:
    """Score line-aligned reference/hypothesis strings.

    ``level`` picks how strings are split into tokens (``char`` or ``word``).
    Corpus ROUGE is the mean of per-example F1.
    """
    if len(refs) != len(hyps):
        raise ValueError(f"{len(refs)} references but {len(hyps)} hypotheses")
    if metric not in ("exact", "rouge"):
        raise ValueError(f"unknown metric {metric!r}")
    split = list if level == "char" else str.split
    report = EvalReport(metric)
    for ref, hyp in zip(refs, hyps):
        rt, ht = split(ref), split(hyp)
        rec = {"reference": ref, "hypothesis": hyp}
        if metric == "exact":
            rec["correct"] = int(rt == ht)
        else:
            rec.update(rouge1=rouge_n(rt, ht, 1), rouge2=rouge_n(rt, ht, 2), rougeL=rouge_l(rt, ht))
        report.records.append(rec)
    return report
