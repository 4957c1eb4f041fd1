"""Forecast and regime metrics: RMSE, MAPE, permutation-aligned accuracy, F1, durations."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import List, Tuple

import numpy as np

MAX_EXHAUSTIVE_K = 8


@dataclass
class MetricsRecord:
    rmse: float = float("nan")
    mape: float = float("nan")
    accuracy: float = float("nan")
    f1: float = float("nan")
    duration_per_regime: List[float] = field(default_factory=list)
    label_permutation: List[int] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        extra = d.pop("extra")
        d.update(extra)
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps() + "\n")


def _pair(y_true, y_pred):
    a = np.asarray(y_true, dtype=float)
    b = np.asarray(y_pred, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty input")
    return a, b


def rmse(y_true, y_pred) -> float:
    """Root mean squared error pooled over every step and dimension."""
    a, b = _pair(y_true, y_pred)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def mape(y_true, y_pred, epsilon: float = 1e-8) -> float:
    """Mean absolute percentage error in percent; |y_true| is floored at ``epsilon``."""
    a, b = _pair(y_true, y_pred)
    return float(100.0 * np.mean(np.abs(a - b) / np.maximum(np.abs(a), epsilon)))


def accuracy(d_pred, d_true) -> float:
    return float(np.mean(np.asarray(d_pred) == np.asarray(d_true)))


def align_labels(d_pred, d_true, K: int, solver: str = "exhaustive") -> Tuple[Tuple[int, ...], np.ndarray]:
    """Relabel predictions by the permutation maximising accuracy.

    Returns ``(perm, aligned)`` with ``aligned = perm[d_pred]``. Ties go to
    the lexicographically smallest permutation. ``solver="hungarian"`` uses a
    linear assignment instead of enumeration and is the only option for K > 8.
    """
    d_pred = np.asarray(d_pred, dtype=int)
    d_true = np.asarray(d_true, dtype=int)
    if d_pred.shape != d_true.shape:
        raise ValueError("align_labels: label sequences differ in length")
    if len(d_pred) and (min(d_pred.min(), d_true.min()) < 0 or max(d_pred.max(), d_true.max()) >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    confusion = np.zeros((K, K), dtype=np.int64)
    np.add.at(confusion, (d_pred, d_true), 1)
    if solver == "hungarian":
        from scipy.optimize import linear_sum_assignment
        rows, cols = linear_sum_assignment(-confusion)
        perm = tuple(int(c) for _, c in sorted(zip(rows, cols)))
    else:
        if K > MAX_EXHAUSTIVE_K:
            raise ValueError(f"exhaustive alignment refused for K={K} > {MAX_EXHAUSTIVE_K}; use solver='hungarian'")
        best, perm = -1, None
        for p in itertools.permutations(range(K)):
            score = int(confusion[np.arange(K), p].sum())
            if score > best:
                best, perm = score, p
    return perm, np.asarray(perm, dtype=int)[d_pred] if len(d_pred) else d_pred


def f1_score(d_pred, d_true, K: int) -> float:
    """Binary F1 with regime 1 positive when K == 2, macro F1 otherwise; 0/0 counts as 0."""
    d_pred = np.asarray(d_pred, dtype=int)
    d_true = np.asarray(d_true, dtype=int)

    def f1_for(c):
        tp = np.sum((d_pred == c) & (d_true == c))
        fp = np.sum((d_pred == c) & (d_true != c))
        fn = np.sum((d_pred != c) & (d_true == c))
        denom = 2 * tp + fp + fn
        return 0.0 if tp == 0 or denom == 0 else 2.0 * tp / denom

    if K == 2:
        return float(f1_for(1))
    return float(np.mean([f1_for(c) for c in range(K)]))


def mean_durations(d_path, K: int) -> List[float]:
    """Mean length of maximal constant runs, per regime (0 when absent)."""
    d_path = np.asarray(d_path, dtype=int)
    out = []
    if len(d_path) == 0:
        return [0.0] * K
    change = np.flatnonzero(np.diff(d_path)) + 1
    starts = np.concatenate([[0], change])
    lengths = np.diff(np.concatenate([starts, [len(d_path)]]))
    labels = d_path[starts]
    for k in range(K):
        sel = lengths[labels == k]
        out.append(float(sel.mean()) if len(sel) else 0.0)
    return out


def score(y_true, y_pred, d_pred, d_true, K: int, epsilon: float = 1e-8) -> MetricsRecord:
    """All metrics at once; regime metrics use the accuracy-maximising relabelling."""
    perm, aligned = align_labels(d_pred, d_true, K)
    return MetricsRecord(
        rmse=rmse(y_true, y_pred),
        mape=mape(y_true, y_pred, epsilon),
        accuracy=accuracy(aligned, d_true),
        f1=f1_score(aligned, d_true, K),
        duration_per_regime=mean_durations(aligned, K),
        label_permutation=list(perm),
    )
