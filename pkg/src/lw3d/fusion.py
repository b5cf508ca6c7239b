"""Late fusion of per-stream prediction scores.

Two strategies: plain averaging (MS1) and tanh-of-squared-accuracy
weighting gated at accuracy 0.5 (MS2).  MS2 weights are used unnormalized;
the argmax of the merged vector is unaffected by the overall scale.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

MS1 = "ms1"
MS2 = "ms2"


def tanh_weight(accuracy: float) -> float:
    """tanh(a^2) when the stream's accuracy a is at least 0.5, else 0."""
    if not 0.0 <= accuracy <= 1.0:
        raise ValueError(f"accuracy must lie in [0, 1], got {accuracy}")
    if accuracy < 0.5:
        return 0.0
    return math.tanh(accuracy * accuracy)


def merge(
    scores_a: np.ndarray,
    scores_b: np.ndarray,
    strategy: str,
    acc_a: float | None = None,
    acc_b: float | None = None,
) -> np.ndarray:
    """Merge two per-class score vectors (or stacks of them, rows = clips)."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"score shapes differ: {a.shape} vs {b.shape}")
    strategy = strategy.lower()
    if strategy == MS1:
        return (a + b) / 2.0
    if strategy == MS2:
        if acc_a is None or acc_b is None:
            raise ValueError("ms2 requires both stream accuracies")
        wa, wb = tanh_weight(acc_a), tanh_weight(acc_b)
        if wa == 0.0 and wb == 0.0:
            raise ValueError("both streams gated out (accuracy below 0.5)")
        return wa * a + wb * b
    raise ValueError(f"unknown merge strategy {strategy!r}")


def evaluate_accuracy(
    predictions: Sequence[np.ndarray] | np.ndarray, labels: Sequence[int]
) -> float:
    """Fraction of argmax matches; argmax ties break to the lowest index."""
    preds = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels)
    if len(preds) == 0:
        raise ValueError("no predictions to evaluate")
    if len(preds) != len(labels):
        raise ValueError(f"{len(preds)} predictions vs {len(labels)} labels")
    return float((preds.argmax(axis=1) == labels).mean())
