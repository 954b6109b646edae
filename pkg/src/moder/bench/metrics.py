"""Accuracy matrices and the continual-learning metrics computed from them.

``A[t, i]`` is the accuracy on task ``i``'s test set after training task ``t``
(both 0-based).  Entries above the diagonal are tasks not yet trained on.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from moder.errors import ContractError, UndefinedMetricError


def _square(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
        raise ContractError(f"accuracy matrix must be square and non-empty, got shape {a.shape}")
    return a


def faa(a) -> float:
    """Final average accuracy: mean of the last row."""
    a = _square(a)
    last = a[-1]
    if not np.all(np.isfinite(last)):
        raise ContractError("last row of the accuracy matrix is incomplete")
    return float(last.mean())


def ci_transfer(a) -> float:
    """Mean over t < T of the average accuracy on tasks after t, measured after task t."""
    a = _square(a)
    n = a.shape[0]
    if n < 2:
        raise UndefinedMetricError("CI-Transfer needs at least 2 tasks")
    upper = a[np.triu_indices(n, k=1)]
    if not np.all(np.isfinite(upper)):
        raise ContractError("strict upper triangle of the accuracy matrix is incomplete")
    return float(np.mean([a[t, t + 1:].mean() for t in range(n - 1)]))


def mtil_metrics(a, inclusive: bool = False) -> tuple[float, float, float]:
    """(Transfer, Avg, Last) for a task-incremental run.

    Transfer averages TR^i over tasks i >= 2 (1-based), where TR^i is the mean
    accuracy on task i before it was trained.  ``inclusive=True`` instead sums
    rows 1..i and still divides by i - 1, replicating the printed formula; it
    can exceed 1.
    """
    a = _square(a)
    n = a.shape[0]
    if n < 2:
        raise UndefinedMetricError("MTIL Transfer needs at least 2 tasks")
    if not np.all(np.isfinite(a)):
        raise ContractError("accuracy matrix is incomplete")
    tr = []
    for i in range(1, n):
        rows = a[: i + 1 if inclusive else i, i]
        tr.append(rows.sum() / i)
    return float(np.mean(tr)), float(a.mean()), float(a[-1].mean())


@dataclass
class MetricsReport:
    protocol: str
    n_tasks: int
    method: str
    faa: float | None = None
    ci_transfer: float | None = None
    transfer: float | None = None
    avg: float | None = None
    last: float | None = None
    per_task_last: list[float] = field(default_factory=list)
    per_task_transfer: list[float] = field(default_factory=list)
    config_hash: str = ""
    seeds: dict[str, int] = field(default_factory=dict)
    accuracy: list[list[float]] = field(default_factory=list)

    @classmethod
    def from_matrix(cls, a, protocol: str, method: str = "moder", inclusive: bool = False,
                    config_hash: str = "", seeds: dict | None = None) -> "MetricsReport":
        a = _square(a)
        n = a.shape[0]
        rep = cls(protocol, n, method, config_hash=config_hash, seeds=dict(seeds or {}),
                  accuracy=a.tolist(), per_task_last=a[-1].tolist())
        if protocol == "class_il":
            rep.faa = faa(a)
            rep.ci_transfer = ci_transfer(a) if n >= 2 else None
        else:
            rep.last = float(a[-1].mean())
            rep.avg = float(a.mean())
            if n >= 2:
                rep.transfer = mtil_metrics(a, inclusive)[0]
        if n >= 2:
            rep.per_task_transfer = [float(a[:i, i].mean()) for i in range(1, n)]
        return rep

    def to_dict(self) -> dict:
        d = asdict(self)
        # Metrics that do not apply to the protocol are left out rather than null.
        keep = ("faa", "ci_transfer") if self.protocol == "class_il" else ("transfer", "avg", "last")
        for k in ("faa", "ci_transfer", "transfer", "avg", "last"):
            if k not in keep or d[k] is None:
                d.pop(k)
        return d

    def to_json(self, extra: dict | None = None) -> str:
        d = self.to_dict()
        if extra:
            d.update(extra)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"


def matrix_to_csv(a) -> str:
    a = _square(a)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["after_task"] + [f"task_{i}" for i in range(a.shape[0])])
    for t, row in enumerate(a):
        w.writerow([t] + [repr(float(v)) for v in row])
    return buf.getvalue()


def matrix_from_csv(text: str) -> np.ndarray:
    rows = list(csv.reader(io.StringIO(text)))
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]])
