"""Supervised, adversarial-fairness, domain and consistency losses.

Each loss comes in two layers: an ``*_from_outputs`` function that maps head
outputs to ``(loss, d_loss/d_outputs)``, and a network-level wrapper that
runs forward/backward and returns parameter gradients.  The training loop
uses the first kind so several losses can share one forward pass.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from .errors import ContractError
from .neuralcore import CLASSIFIER, Network, backward, batch_cross_entropy, forward, softmax

log = logging.getLogger(__name__)

LAFTR_HEAD = "laftr"
CFAIR_HEADS = ("cfair0", "cfair1")
DOMAIN_HEAD = "domain"

Grads = Dict[str, np.ndarray]


@dataclass
class GroupedBatch:
    features: np.ndarray
    labels: np.ndarray
    sensitive: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.sensitive = np.asarray(self.sensitive, dtype=np.int64)
        if not (len(self.features) == len(self.labels) == len(self.sensitive)):
            raise ContractError("features, labels and sensitive must have equal length")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def group(self) -> np.ndarray:
        return 2 * self.labels + self.sensitive


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def classification_from_logits(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    if len(labels) == 0:
        raise ContractError("classification loss on an empty batch")
    per, grad = batch_cross_entropy(logits, labels)
    n = len(labels)
    return float(per.mean()), grad / n


def laftr_from_outputs(adv_logit: np.ndarray, labels: np.ndarray, sensitive: np.ndarray) -> Tuple[float, np.ndarray]:
    """``sum_{(a,y)} mean_group |sigmoid(h) - a|`` over the groups present in the batch."""
    h = _sigmoid(adv_logit[:, 0])
    grad = np.zeros_like(adv_logit)
    loss = 0.0
    group = 2 * labels + sensitive
    for g in range(4):
        idx = np.flatnonzero(group == g)
        if len(idx) == 0:
            log.warning("laftr: group (y=%d, a=%d) empty in batch; term skipped", g // 2, g % 2)
            continue
        a = g % 2
        hg = h[idx]
        loss += float(np.abs(hg - a).mean())
        sign = 1.0 if a == 0 else -1.0
        grad[idx, 0] = sign * hg * (1.0 - hg) / len(idx)
    return loss, grad


def cfair_from_outputs(
    outputs: Tuple[np.ndarray, np.ndarray], labels: np.ndarray, sensitive: np.ndarray
) -> Tuple[float, Tuple[np.ndarray, np.ndarray]]:
    """Sum over classes of the cost-sensitive cross-entropy estimate of the balanced error rate.

    Head ``y`` only sees rows with label ``y``; a row in cell (y, a) is
    weighted by ``1 / (2 * Phat(A=a | Y=y))``.
    """
    grads = []
    loss = 0.0
    for y, logits in enumerate(outputs):
        grad = np.zeros_like(logits)
        rows = np.flatnonzero(labels == y)
        if len(rows):
            a = sensitive[rows]
            per, g = batch_cross_entropy(logits[rows], a)
            weights = np.zeros(len(rows))
            for cell in (0, 1):
                m = a == cell
                if not m.any():
                    log.warning("cfair: cell (y=%d, a=%d) empty in batch; weighted 0", y, cell)
                    continue
                weights[m] = 1.0 / (2.0 * (m.sum() / len(rows)))
            loss += float((weights * per).mean())
            grad[rows] = (weights / len(rows))[:, None] * g
        grads.append(grad)
    return loss, (grads[0], grads[1])


def dann_from_outputs(logits: np.ndarray, domain: np.ndarray) -> Tuple[float, np.ndarray]:
    if len(np.unique(domain)) < 2:
        raise ContractError("domain loss needs both source and target rows in the batch")
    return classification_from_logits(logits, domain)


def standard_consistency_from_outputs(
    student_logits: np.ndarray, pseudo: np.ndarray, mask: np.ndarray
) -> Tuple[float, np.ndarray]:
    n = len(pseudo)
    per, grad = batch_cross_entropy(student_logits, pseudo)
    m = mask.astype(np.float64)
    return float((m * per).sum() / n), grad * (m / n)[:, None]


def teacher_predictions(teacher: Network, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Argmax labels (lowest index on ties) and max softmax confidence."""
    probs = softmax(teacher.logits(x))
    labels = np.argmax(probs, axis=1)
    return labels, probs[np.arange(len(labels)), labels]


# network-level wrappers


def classification_loss(net: Network, batch: GroupedBatch) -> Tuple[float, Grads]:
    out, cache = forward(net, batch.features, heads=[CLASSIFIER])
    loss, d = classification_from_logits(out[CLASSIFIER], batch.labels)
    return loss, backward(net, cache, {CLASSIFIER: d})


def laftr_fairness_loss(net: Network, batch: GroupedBatch) -> Tuple[float, Grads]:
    out, cache = forward(net, batch.features, heads=[LAFTR_HEAD])
    loss, d = laftr_from_outputs(out[LAFTR_HEAD], batch.labels, batch.sensitive)
    return loss, backward(net, cache, {LAFTR_HEAD: d})


def cfair_loss(net: Network, batch: GroupedBatch) -> Tuple[float, Grads]:
    out, cache = forward(net, batch.features, heads=list(CFAIR_HEADS))
    loss, (d0, d1) = cfair_from_outputs((out[CFAIR_HEADS[0]], out[CFAIR_HEADS[1]]), batch.labels, batch.sensitive)
    return loss, backward(net, cache, {CFAIR_HEADS[0]: d0, CFAIR_HEADS[1]: d1})


def dann_domain_loss(net: Network, features: np.ndarray, domain: np.ndarray) -> Tuple[float, Grads]:
    domain = np.asarray(domain, dtype=np.int64)
    out, cache = forward(net, features, heads=[DOMAIN_HEAD])
    loss, d = dann_from_outputs(out[DOMAIN_HEAD], domain)
    return loss, backward(net, cache, {DOMAIN_HEAD: d})


def standard_consistency_loss(
    net: Network, teacher: Network, x: np.ndarray, x_transformed: np.ndarray, tau: float
) -> Tuple[float, Grads, int]:
    """Group-blind consistency: mean over the batch of confident-masked CE against teacher argmax.

    The teacher sees ``x``; the student sees ``x_transformed``.  No gradient
    reaches the teacher.
    """
    if not 0.0 <= tau <= 1.0:
        raise ContractError(f"confidence threshold {tau} outside [0, 1]")
    pseudo, conf = teacher_predictions(teacher, x)
    mask = conf >= tau
    out, cache = forward(net, x_transformed, heads=[CLASSIFIER])
    loss, d = standard_consistency_from_outputs(out[CLASSIFIER], pseudo, mask)
    return loss, backward(net, cache, {CLASSIFIER: d}), int(mask.sum())
