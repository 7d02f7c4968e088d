"""Teacher-student self-training with fair consistency regularization.

One network trains itself: at each epoch boundary (after warm-up) the current
student is frozen into the teacher, whose confident argmax predictions on
transformed unlabeled data become the consistency targets.  Unlabeled rows
are grouped by (pseudo label, true sensitive attribute) and the per-group
consistency losses are combined with weights inversely proportional to each
group's confident count.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np

from .errors import ConfigError, ContractError
from .factorworld import SOURCE, TARGET, Dataset
from .fairlosses import (
    CFAIR_HEADS,
    DOMAIN_HEAD,
    LAFTR_HEAD,
    Grads,
    cfair_from_outputs,
    classification_from_logits,
    dann_from_outputs,
    laftr_from_outputs,
    standard_consistency_from_outputs,
    teacher_predictions,
)
from .metrics import GROUP_NAMES
from .neuralcore import CLASSIFIER, Network, OptimizerState, accumulate, backward, batch_cross_entropy, forward, sgd_step

N_GROUPS = 4


@dataclass(frozen=True)
class TeacherSnapshot:
    network: Network
    epoch: int

    @classmethod
    def of(cls, student: Network, epoch: int) -> "TeacherSnapshot":
        net = student.copy()
        for arr in net.parameters().values():
            arr.flags.writeable = False
        return cls(net, epoch)


@dataclass
class PseudoLabelBatch:
    labels: np.ndarray
    confidence: np.ndarray
    mask: np.ndarray
    group: np.ndarray  # 2 * pseudo label + true sensitive attribute

    def confident_counts(self) -> np.ndarray:
        return np.bincount(self.group[self.mask], minlength=N_GROUPS)

    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.group, minlength=N_GROUPS)


def pseudo_label(teacher: TeacherSnapshot | Network, x: np.ndarray, sensitive: np.ndarray, tau: float) -> PseudoLabelBatch:
    if not 0.0 <= tau <= 1.0:
        raise ContractError(f"confidence threshold {tau} outside [0, 1]")
    net = teacher.network if isinstance(teacher, TeacherSnapshot) else teacher
    labels, conf = teacher_predictions(net, x)
    return PseudoLabelBatch(labels, conf, conf >= tau, 2 * labels + np.asarray(sensitive, dtype=np.int64))


@dataclass
class GroupWeights:
    weights: np.ndarray  # indexed by group 2*y + a
    counts: np.ndarray
    no_confident: bool = False


def compute_group_weights(confident_counts) -> GroupWeights:
    """lambda_g proportional to 1/count_g over groups with a nonzero count; zero elsewhere."""
    counts = np.asarray(confident_counts, dtype=np.float64)
    live = counts > 0
    weights = np.zeros_like(counts)
    if not live.any():
        return GroupWeights(weights, counts, no_confident=True)
    inv = 1.0 / counts[live]
    weights[live] = inv / inv.sum()
    return GroupWeights(weights, counts)


def uniform_group_weights(confident_counts) -> GroupWeights:
    counts = np.asarray(confident_counts, dtype=np.float64)
    live = counts > 0
    weights = np.zeros_like(counts)
    if not live.any():
        return GroupWeights(weights, counts, no_confident=True)
    weights[live] = 1.0 / live.sum()
    return GroupWeights(weights, counts)


def fair_consistency_from_outputs(
    student_logits: np.ndarray,
    pl: PseudoLabelBatch,
    denominator: str = "group",
    uniform: bool = False,
):
    """Returns ``(loss, dlogits, per_group_loss, GroupWeights)``.

    ``denominator="group"`` divides each group's masked CE sum by the group
    size; ``"confident"`` divides by the group's confident count.
    """
    per, grad = batch_cross_entropy(student_logits, pl.labels)
    m = pl.mask.astype(np.float64)
    counts = pl.confident_counts()
    gw = (uniform_group_weights if uniform else compute_group_weights)(counts)
    if denominator == "group":
        denom = pl.group_sizes().astype(np.float64)
    elif denominator == "confident":
        denom = counts.astype(np.float64)
    else:
        raise ConfigError(f"unknown denominator {denominator!r}", key="train.denominator")
    sums = np.bincount(pl.group, weights=m * per, minlength=N_GROUPS)
    with np.errstate(invalid="ignore", divide="ignore"):
        group_loss = np.where(denom > 0, sums / np.where(denom > 0, denom, 1.0), 0.0)
        row_scale = np.where(denom > 0, gw.weights / np.where(denom > 0, denom, 1.0), 0.0)
    loss = float((gw.weights * group_loss).sum())
    d = grad * (m * row_scale[pl.group])[:, None]
    return loss, d, group_loss, gw


def fair_consistency_loss(
    net: Network,
    teacher: TeacherSnapshot | Network,
    x: np.ndarray,
    x_transformed: np.ndarray,
    sensitive: np.ndarray,
    tau: float,
    denominator: str = "group",
):
    """Balanced consistency loss; returns ``(loss, grads, per_group_loss, GroupWeights)``."""
    pl = pseudo_label(teacher, x, sensitive, tau)
    out, cache = forward(net, x_transformed, heads=[CLASSIFIER])
    loss, d, group_loss, gw = fair_consistency_from_outputs(out[CLASSIFIER], pl, denominator)
    return loss, backward(net, cache, {CLASSIFIER: d}), group_loss, gw


FAIRNESS_METHODS = ("none", "laftr", "cfair")
CONSISTENCY_METHODS = ("none", "standard", "fair")
CONSISTENCY_DOMAINS = ("both", "source", "target")


@dataclass
class TrainConfig:
    fairness: str = "none"
    consistency: str = "none"
    dann: bool = False
    w_fair: float = 1.0
    w_cons: float = 1.0
    w_dann: float = 1.0
    tau: float = 0.95
    warmup: int = 5
    batch_size: int = 128
    unlabeled_batch_size: int = 256
    denominator: str = "group"
    freeze_teacher: bool = False
    uniform_group_weights: bool = False
    consistency_domain: str = "both"

    def __post_init__(self):
        if self.fairness not in FAIRNESS_METHODS:
            raise ConfigError(f"unknown fairness method {self.fairness!r}", key="train.fairness")
        if self.consistency not in CONSISTENCY_METHODS:
            raise ConfigError(f"unknown consistency method {self.consistency!r}", key="train.consistency")
        if self.consistency_domain not in CONSISTENCY_DOMAINS:
            raise ConfigError(f"unknown consistency domain {self.consistency_domain!r}", key="ablation.consistency_domain")
        if self.denominator not in ("group", "confident"):
            raise ConfigError(f"unknown denominator {self.denominator!r}", key="train.denominator")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must lie in [0, 1]", key="train.tau")
        if self.batch_size < 4:
            raise ConfigError("batch_size must allow one row per group", key="optim.batch_size")

    @property
    def fairness_active(self) -> bool:
        return self.fairness != "none" and self.w_fair != 0

    @property
    def consistency_active(self) -> bool:
        return self.consistency != "none" and self.w_cons != 0

    @property
    def dann_active(self) -> bool:
        return self.dann and self.w_dann != 0


class StratifiedSampler:
    """Equal per-group quotas drawn from per-group reshuffled queues."""

    def __init__(self, group: np.ndarray, batch_size: int, rng: np.random.Generator):
        self.rng = rng
        self.members = [np.flatnonzero(group == g) for g in range(N_GROUPS)]
        live = [m for m in self.members if len(m)]
        if not live:
            raise ContractError("labeled set is empty")
        self.quota = batch_size // len(live)
        self.queues = [np.empty(0, dtype=np.int64) for _ in self.members]

    def next(self) -> np.ndarray:
        out = []
        for g, members in enumerate(self.members):
            if not len(members):
                continue
            q = self.queues[g]
            while len(q) < self.quota:
                q = np.concatenate([q, self.rng.permutation(members)])
            out.append(q[: self.quota])
            self.queues[g] = q[self.quota:]
        return np.concatenate(out)


class CyclicSampler:
    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise ContractError("cannot sample from an empty pool")
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self.queue = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        while len(self.queue) < self.batch_size:
            self.queue = np.concatenate([self.queue, self.rng.permutation(self.n)])
        out, self.queue = self.queue[: self.batch_size], self.queue[self.batch_size:]
        return out


@dataclass
class TrainingState:
    net: Network
    optimizer: OptimizerState
    seed: int
    teacher: Optional[TeacherSnapshot] = None
    epoch: int = 0
    samplers: Dict[str, object] = field(default_factory=dict)
    rngs: Dict[str, np.random.Generator] = field(default_factory=dict)

    def __post_init__(self):
        if not self.rngs:
            names = ("labeled", "unlabeled", "transform", "dann")
            children = np.random.SeedSequence(self.seed).spawn(len(names))
            self.rngs = {n: np.random.default_rng(c) for n, c in zip(names, children)}


def promote_student_to_teacher(state: TrainingState) -> TrainingState:
    state.teacher = TeacherSnapshot.of(state.net, state.epoch)
    return state


def begin_epoch(state: TrainingState, config: TrainConfig) -> None:
    """Teacher bookkeeping at an epoch boundary."""
    if not config.consistency_active or state.epoch < config.warmup:
        return
    if state.teacher is None or not config.freeze_teacher:
        promote_student_to_teacher(state)


def consistency_pool(source: Dataset, target: Optional[Dataset], domain: str) -> Dataset:
    parts = {"source": [source], "target": [target], "both": [source, target]}[domain]
    parts = [p for p in parts if p is not None]
    if not parts:
        raise ContractError("no unlabeled data for consistency training")
    return Dataset.concat(parts)


LOG_COLUMNS = (
    ["epoch", "step", "L_cls", "L_fair", "L_dann", "L_consis", "L_fconsis"]
    + [f"lambda_{g}" for g in GROUP_NAMES]
    + [f"confident_frac_{g}" for g in GROUP_NAMES]
)


def train_epoch(
    state: TrainingState,
    source: Dataset,
    target: Optional[Dataset],
    transform: Optional[Callable[[Dataset, np.random.Generator], np.ndarray]],
    config: TrainConfig,
) -> List[Dict[str, float]]:
    """One pass of SGD steps over the labeled source set; returns per-step log rows."""
    net = state.net
    if "labeled" not in state.samplers:
        state.samplers["labeled"] = StratifiedSampler(source.group, config.batch_size, state.rngs["labeled"])
    labeled = state.samplers["labeled"]
    use_cons = config.consistency_active and state.teacher is not None
    if use_cons:
        if transform is None:
            raise ContractError("consistency training needs a transform")
        pool = state.samplers.get("pool")
        if pool is None:
            pool = state.samplers["pool"] = consistency_pool(source, target, config.consistency_domain)
            state.samplers["unlabeled"] = CyclicSampler(len(pool), config.unlabeled_batch_size, state.rngs["unlabeled"])
    if config.dann_active:
        if target is None:
            raise ContractError("domain-adversarial training needs target data")
        if "dann" not in state.samplers:
            state.samplers["dann"] = CyclicSampler(len(target), config.batch_size, state.rngs["dann"])

    fair_heads = {"none": [], "laftr": [LAFTR_HEAD], "cfair": list(CFAIR_HEADS)}[config.fairness]
    params = net.parameters()
    steps = max(1, len(source) // config.batch_size)
    rows = []
    for step in range(steps):
        row = dict.fromkeys(LOG_COLUMNS, 0.0)
        row["epoch"], row["step"] = state.epoch, step
        grads: Grads = {}

        idx = labeled.next()
        xb, yb, ab = source.x[idx], source.y[idx], source.a[idx]
        heads = [CLASSIFIER] + (fair_heads if config.fairness_active else [])
        out, cache = forward(net, xb, heads=heads)
        row["L_cls"], d_cls = classification_from_logits(out[CLASSIFIER], yb)
        head_grads = {CLASSIFIER: d_cls}
        if config.fairness_active:
            if config.fairness == "laftr":
                row["L_fair"], d = laftr_from_outputs(out[LAFTR_HEAD], yb, ab)
                head_grads[LAFTR_HEAD] = config.w_fair * d
            else:
                row["L_fair"], (d0, d1) = cfair_from_outputs((out[CFAIR_HEADS[0]], out[CFAIR_HEADS[1]]), yb, ab)
                head_grads[CFAIR_HEADS[0]] = config.w_fair * d0
                head_grads[CFAIR_HEADS[1]] = config.w_fair * d1
        accumulate(grads, backward(net, cache, head_grads))

        if config.dann_active:
            tidx = state.samplers["dann"].next()
            xm = np.concatenate([xb, target.x[tidx]])
            dom = np.concatenate([np.full(len(idx), SOURCE), np.full(len(tidx), TARGET)])
            out, cache = forward(net, xm, heads=[DOMAIN_HEAD])
            row["L_dann"], d = dann_from_outputs(out[DOMAIN_HEAD], dom)
            accumulate(grads, backward(net, cache, {DOMAIN_HEAD: config.w_dann * d}))

        if use_cons:
            batch = pool.subset(state.samplers["unlabeled"].next())
            pl = pseudo_label(state.teacher, batch.x, batch.a, config.tau)
            x_t = transform(batch, state.rngs["transform"])
            out, cache = forward(net, x_t, heads=[CLASSIFIER])
            sizes = pl.group_sizes()
            conf = pl.confident_counts()
            if config.consistency == "fair":
                loss, d, _, gw = fair_consistency_from_outputs(
                    out[CLASSIFIER], pl, config.denominator, config.uniform_group_weights
                )
                row["L_fconsis"] = loss
                for g, name in enumerate(GROUP_NAMES):
                    row[f"lambda_{name}"] = gw.weights[g]
            else:
                row["L_consis"], d = standard_consistency_from_outputs(out[CLASSIFIER], pl.labels, pl.mask)
            for g, name in enumerate(GROUP_NAMES):
                row[f"confident_frac_{name}"] = conf[g] / sizes[g] if sizes[g] else 0.0
            accumulate(grads, backward(net, cache, {CLASSIFIER: config.w_cons * d}))

        sgd_step(params, grads, state.optimizer)
        rows.append(row)
    state.epoch += 1
    return rows
