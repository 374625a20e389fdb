"""Rank-correlation evaluation: PLCC, SRCC (mid-rank ties), and reporting."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class UndefinedCorrelationError(ValueError):
    """Correlation is undefined (constant input or fewer than two points)."""


def _validate(pred, truth):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if pred.size != truth.size:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {truth.size} labels")
    if pred.size < 2:
        raise UndefinedCorrelationError(f"need at least 2 points, got {pred.size}")
    return pred, truth


def plcc(pred, truth) -> float:
    """Pearson linear correlation; raises on constant input rather than returning 0."""
    pred, truth = _validate(pred, truth)
    px = pred - pred.mean()
    ty = truth - truth.mean()
    sx = np.sqrt((px * px).sum())
    sy = np.sqrt((ty * ty).sum())
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError("correlation undefined for a constant vector")
    return float((px * ty).sum() / (sx * sy))


def midranks(x) -> np.ndarray:
    """1-based fractional ranks; tied values share the average of their positions."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def srcc(pred, truth) -> float:
    """Spearman rank correlation: Pearson on mid-ranks."""
    pred, truth = _validate(pred, truth)
    return plcc(midranks(pred), midranks(truth))


@dataclass
class EvalReport:
    """PLCC/SRCC over a prediction set, with a per-domain breakdown."""

    plcc: float
    srcc: float
    n: int
    per_domain: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"plcc": self.plcc, "srcc": self.srcc, "n": self.n,
                "per_domain": self.per_domain}

    def to_json(self, **extra) -> str:
        payload = self.to_dict()
        payload.update(extra)
        return json.dumps(payload, sort_keys=True)

    def table(self) -> str:
        lines = [f"{'domain':<16} {'n':>5} {'plcc':>8} {'srcc':>8}",
                 f"{'all':<16} {self.n:>5} {self.plcc:>8.4f} {self.srcc:>8.4f}"]
        for dom in sorted(self.per_domain):
            row = self.per_domain[dom]
            p = f"{row['plcc']:>8.4f}" if row["plcc"] is not None else "       -"
            s = f"{row['srcc']:>8.4f}" if row["srcc"] is not None else "       -"
            lines.append(f"{dom:<16} {row['n']:>5} {p} {s}")
        return "\n".join(lines)


def build_report(pred, truth, domains=None) -> EvalReport:
    """Aggregate + per-domain correlations; tiny/constant domains report None."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    report = EvalReport(plcc=plcc(pred, truth), srcc=srcc(pred, truth), n=pred.size)
    if domains is not None:
        domains = list(domains)
        for dom in sorted(set(domains)):
            idx = [i for i, d in enumerate(domains) if d == dom]
            entry = {"n": len(idx), "plcc": None, "srcc": None}
            if len(idx) >= 2:
                try:
                    entry["plcc"] = plcc(pred[idx], truth[idx])
                    entry["srcc"] = srcc(pred[idx], truth[idx])
                except UndefinedCorrelationError:
                    pass
            report.per_domain[dom] = entry
    return report
