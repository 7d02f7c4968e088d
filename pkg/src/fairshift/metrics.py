"""Group fairness and accuracy metrics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import MetricError

GROUP_NAMES = ("y0a0", "y0a1", "y1a0", "y1a1")


@dataclass
class GroupStats:
    """Counts indexed ``[y, a]``."""

    count: np.ndarray
    correct: np.ndarray

    @property
    def accuracy(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.correct / self.count

    def require_nonempty(self) -> None:
        empty = np.argwhere(self.count == 0)
        if len(empty):
            cells = ", ".join(f"(y={y}, a={a})" for y, a in empty)
            raise MetricError(f"empty group cell(s): {cells}")

    @property
    def true_positive_rate(self) -> np.ndarray:
        """P(Yhat=1 | Y=1, A=a) per a."""
        return self.accuracy[1]

    @property
    def true_negative_rate(self) -> np.ndarray:
        return self.accuracy[0]


def group_stats(predictions, labels, sensitive, n_classes: int = 2, n_sensitive: int = 2) -> GroupStats:
    pred = np.asarray(predictions)
    y = np.asarray(labels)
    a = np.asarray(sensitive)
    count = np.zeros((n_classes, n_sensitive), dtype=np.int64)
    correct = np.zeros_like(count)
    np.add.at(count, (y, a), 1)
    np.add.at(correct, (y, a), (pred == y).astype(np.int64))
    return GroupStats(count, correct)


def equalized_odds(predictions, labels, sensitive) -> float:
    """Half the summed gap in class-conditional hit rate between the two sensitive groups."""
    stats = group_stats(predictions, labels, sensitive)
    stats.require_nonempty()
    acc = stats.accuracy
    return 0.5 * float(np.abs(acc[:, 0] - acc[:, 1]).sum())


def equalized_odds_multiclass(stats: GroupStats) -> float:
    """Mean over classes of the largest pairwise gap in group accuracy."""
    stats.require_nonempty()
    acc = stats.accuracy
    return float(np.mean(acc.max(axis=1) - acc.min(axis=1)))


def variance_group_accuracy(stats: GroupStats) -> float:
    """Population variance of group accuracies, in percent^2."""
    stats.require_nonempty()
    return float(np.var(100.0 * stats.accuracy))


def benefit_ratio(a_semi: float, a_baseline: float, a_ideal: float) -> float:
    if a_ideal == a_baseline:
        raise MetricError("benefit ratio undefined when ideal and baseline accuracy coincide")
    return (a_semi - a_baseline) / (a_ideal - a_baseline)


def model_selection_score(accuracy: float, dodds: float) -> float:
    return accuracy - dodds


def collect_pareto(points: Sequence[Tuple[float, float]]) -> List[Tuple[float, float]]:
    """Points not dominated under (max accuracy, min unfairness), ordered by accuracy descending."""
    if not points:
        raise ValueError("collect_pareto needs at least one point")
    pts = [tuple(map(float, p)) for p in points]

    def dominated(p):
        return any(
            q[0] >= p[0] and q[1] <= p[1] and (q[0] > p[0] or q[1] < p[1]) for q in pts
        )

    keep = [p for p in pts if not dominated(p)]
    # stable: equal-accuracy points keep their input order
    return sorted(keep, key=lambda p: -p[0])


def group_consistency(
    predict: Callable[[np.ndarray], np.ndarray],
    dataset,
    transform: Callable,
    trials: int,
    rng: np.random.Generator,
) -> Dict[str, Optional[float]]:
    """Per-group rate at which predictions agree under two independent random transforms."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    group = dataset.group
    agree = np.zeros(len(dataset))
    for _ in range(trials):
        p1 = predict(transform(dataset, rng))
        p2 = predict(transform(dataset, rng))
        agree += p1 == p2
    agree /= trials
    out: Dict[str, Optional[float]] = {}
    for g, name in enumerate(GROUP_NAMES):
        mask = group == g
        out[name] = float(agree[mask].mean()) if mask.any() else None
    return out


@dataclass
class EvalReport:
    domain: str
    accuracy: float
    dodds: float
    vacc: float
    group_count: List[List[int]]
    group_accuracy: List[List[float]]
    consistency: Dict[str, Optional[float]] = field(default_factory=dict)

    def csv_row(self) -> Dict[str, str]:
        row = {
            "domain": self.domain,
            "acc": f"{100 * self.accuracy:.2f}",
            "dodds": f"{100 * self.dodds:.2f}",
            "vacc": f"{self.vacc:.2f}",
        }
        for g, name in enumerate(GROUP_NAMES):
            row[f"acc_{name}"] = f"{self.group_accuracy[g // 2][g % 2]:.6f}"
        for name in GROUP_NAMES:
            c = self.consistency.get(name)
            row[f"consistency_{name}"] = "" if c is None else f"{c:.6f}"
        return row

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def evaluate(predictions, labels, sensitive, domain: str, consistency=None) -> EvalReport:
    stats = group_stats(predictions, labels, sensitive)
    stats.require_nonempty()
    return EvalReport(
        domain=domain,
        accuracy=float(np.mean(np.asarray(predictions) == np.asarray(labels))),
        dodds=equalized_odds(predictions, labels, sensitive),
        vacc=variance_group_accuracy(stats),
        group_count=stats.count.tolist(),
        group_accuracy=stats.accuracy.tolist(),
        consistency=dict(consistency or {}),
    )
