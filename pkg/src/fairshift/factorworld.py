"""Latent-factor datasets under controlled distribution shift.

Samples are emitted by one fixed generative model shared by both domains,
``x = sum_k embedding[k][value_k] + noise_scale * eps``; only the marginal
distribution of the factors differs between source and target.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError

LABEL, SENSITIVE, NUISANCE = "label", "sensitive", "nuisance"
SOURCE, TARGET = 0, 1
DOMAIN_TAGS = ("S", "T")
SCENARIO_KINDS = ("Sshift1", "Sshift2", "Dshift", "Hshift", "Custom")

_PMF_TOL = 1e-12


@dataclass(frozen=True)
class FactorSpec:
    name: str
    cardinality: int
    role: str

    def __post_init__(self):
        if self.role not in (LABEL, SENSITIVE, NUISANCE):
            raise ConfigError(f"unknown role {self.role!r}", key=f"factors.{self.name}")
        if self.cardinality < 1 or (self.role != NUISANCE and self.cardinality < 2):
            raise ConfigError(f"bad cardinality {self.cardinality}", key=f"factors.{self.name}")


def validate_factors(factors: Sequence[FactorSpec]) -> None:
    roles = [f.role for f in factors]
    if roles.count(LABEL) != 1 or roles.count(SENSITIVE) != 1:
        raise ConfigError("a world needs exactly one label and one sensitive factor", key="factors")
    names = [f.name for f in factors]
    if len(set(names)) != len(names):
        raise ConfigError("factor names must be unique", key="factors")


def _check_pmf(p: np.ndarray, what: str) -> None:
    if np.any(p < 0) or not np.isfinite(p).all():
        raise ConfigError(f"{what} has negative or non-finite entries")
    total = p.sum()
    if total == 0:
        raise ConfigError(f"{what} is degenerate (all zeros)")
    if abs(total - 1.0) > _PMF_TOL:
        raise ConfigError(f"{what} sums to {total!r}, not 1")


@dataclass
class DomainConfig:
    """Factor marginals for one domain.

    ``joint_label_sensitive[y, a]`` is P(Y=y, A=a).  Nuisance factors are
    independent of each other and of (Y, A).
    """

    joint_label_sensitive: np.ndarray
    nuisance_marginals: List[np.ndarray]
    support_masks: Optional[List[np.ndarray]] = None

    def __post_init__(self):
        self.joint_label_sensitive = np.asarray(self.joint_label_sensitive, dtype=np.float64)
        self.nuisance_marginals = [np.asarray(p, dtype=np.float64) for p in self.nuisance_marginals]
        if self.support_masks is None:
            self.support_masks = [p > 0 for p in self.nuisance_marginals]
        else:
            self.support_masks = [np.asarray(m, dtype=bool) for m in self.support_masks]
        self.validate()

    def validate(self) -> None:
        if self.joint_label_sensitive.ndim != 2:
            raise ConfigError("joint_label_sensitive must be a (labels x sensitive) table")
        _check_pmf(self.joint_label_sensitive, "joint_label_sensitive")
        if len(self.support_masks) != len(self.nuisance_marginals):
            raise ConfigError("one support mask per nuisance factor is required")
        for i, (p, m) in enumerate(zip(self.nuisance_marginals, self.support_masks)):
            _check_pmf(p, f"nuisance_marginals[{i}]")
            if m.shape != p.shape:
                raise ConfigError(f"support mask {i} has the wrong length")
            if np.any(p[~m] != 0):
                raise ConfigError(f"nuisance_marginals[{i}] puts mass outside its support mask")


@dataclass
class ShiftScenario:
    kind: str
    factors: List[FactorSpec]
    source: DomainConfig
    target: DomainConfig
    shifted_factor: Optional[str] = None

    @property
    def nuisance_factors(self) -> List[FactorSpec]:
        return [f for f in self.factors if f.role == NUISANCE]

    def union_supports(self) -> List[np.ndarray]:
        return [s | t for s, t in zip(self.source.support_masks, self.target.support_masks)]

    def config(self, domain: int) -> DomainConfig:
        return self.source if domain == SOURCE else self.target


_TABLE8_YA_SOURCE = [0.1, 0.4, 0.4, 0.1]
_TABLE8_YA_FLIPPED = [0.4, 0.1, 0.1, 0.4]
_TABLE8_SSHIFT1_D = (np.array([4, 4, 3, 1, 1, 1, 1, 1]) / 16, np.array([1, 1, 1, 1, 1, 3, 4, 4]) / 16)


def _ya(values) -> np.ndarray:
    # table entries are ordered (y, a) = 00, 01, 10, 11
    return np.asarray(values, dtype=np.float64).reshape(2, 2)


def build_scenario(
    kind: str,
    num_nuisance_values: int = 8,
    extra_nuisance: Sequence[int] = (),
) -> ShiftScenario:
    """One of the four benchmark shift scenarios over binary (Y, A) and a shifted factor ``D``.

    ``extra_nuisance`` adds non-shifting nuisance factors with the given
    cardinalities and uniform marginals in both domains.
    """
    n = int(num_nuisance_values)
    if kind not in SCENARIO_KINDS or kind == "Custom":
        raise ConfigError(f"unsupported scenario kind {kind!r}", key="scenario.kind")
    if n < 2:
        raise ConfigError("the shifted factor needs at least 2 values", key="scenario.num_nuisance_values")
    uniform = np.full(n, 1.0 / n)
    narrow = np.zeros(n)
    k = max(1, n // 4)
    narrow[:k] = 1.0 / k

    ya_s = ya_t = _ya(_TABLE8_YA_SOURCE)
    if kind == "Sshift1":
        if n != 8:
            raise ConfigError("Sshift1 is defined for an 8-valued factor", key="scenario.num_nuisance_values")
        d_s, d_t = _TABLE8_SSHIFT1_D
    elif kind == "Sshift2":
        d_s = d_t = uniform
        ya_t = _ya(_TABLE8_YA_FLIPPED)
    elif kind == "Dshift":
        d_s, d_t = narrow, uniform
    else:
        d_s, d_t = narrow, uniform
        ya_t = _ya(_TABLE8_YA_FLIPPED)

    extras = [np.full(c, 1.0 / c) for c in extra_nuisance]
    factors = [FactorSpec("Y", 2, LABEL), FactorSpec("A", 2, SENSITIVE), FactorSpec("D", n, NUISANCE)]
    factors += [FactorSpec(f"N{i + 1}", c, NUISANCE) for i, c in enumerate(extra_nuisance)]
    return ShiftScenario(
        kind,
        factors,
        DomainConfig(ya_s.copy(), [d_s.copy()] + [e.copy() for e in extras]),
        DomainConfig(ya_t.copy(), [d_t.copy()] + [e.copy() for e in extras]),
        shifted_factor="D",
    )


def custom_scenario(factors: Sequence[FactorSpec], source: DomainConfig, target: DomainConfig) -> ShiftScenario:
    factors = list(factors)
    validate_factors(factors)
    nuis = [f for f in factors if f.role == NUISANCE]
    for cfg in (source, target):
        if len(cfg.nuisance_marginals) != len(nuis):
            raise ConfigError("one marginal per nuisance factor is required")
        for f, p in zip(nuis, cfg.nuisance_marginals):
            if len(p) != f.cardinality:
                raise ConfigError(f"marginal length {len(p)} != cardinality {f.cardinality}", key=f"factors.{f.name}")
    return ShiftScenario("Custom", factors, source, target)


@dataclass
class Emitter:
    """Fixed map from a factor tuple to a feature vector (shared by both domains)."""

    label_embedding: np.ndarray  # (n_labels, d)
    sensitive_embedding: np.ndarray  # (n_sensitive, d)
    nuisance_embeddings: List[np.ndarray]  # each (cardinality, d)
    noise_scale: float

    @classmethod
    def create(
        cls,
        factors: Sequence[FactorSpec],
        feature_dim: int = 16,
        seed: int = 0,
        noise_scale: float = 0.5,
        separability: float = 3.0,
        nuisance_scale: float = 1.0,
    ) -> "Emitter":
        """Embeddings drawn once from a seeded standard normal, then frozen.

        Label and sensitive embeddings are multiplied by ``separability``;
        nuisance embeddings by ``nuisance_scale``.
        """
        validate_factors(factors)
        if feature_dim < 1:
            raise ConfigError("feature_dim must be positive", key="emitter.feature_dim")
        if noise_scale < 0:
            raise ConfigError("noise_scale must be nonnegative", key="emitter.noise_scale")
        rng = np.random.default_rng(seed)
        by_role: Dict[str, List[np.ndarray]] = {LABEL: [], SENSITIVE: [], NUISANCE: []}
        for f in factors:
            by_role[f.role].append(rng.standard_normal((f.cardinality, feature_dim)))
        return cls(
            separability * by_role[LABEL][0],
            separability * by_role[SENSITIVE][0],
            [nuisance_scale * e for e in by_role[NUISANCE]],
            float(noise_scale),
        )

    @property
    def feature_dim(self) -> int:
        return self.label_embedding.shape[1]

    def embed(self, y: np.ndarray, a: np.ndarray, nuisance: np.ndarray) -> np.ndarray:
        x = self.label_embedding[y] + self.sensitive_embedding[a]
        for j, emb in enumerate(self.nuisance_embeddings):
            x = x + emb[nuisance[:, j]]
        return x

    def emit(self, y, a, nuisance, noise: np.ndarray) -> np.ndarray:
        """Feature vectors for factor tuples given a standard-normal noise draw."""
        y = np.asarray(y)
        a = np.asarray(a)
        nuisance = np.asarray(nuisance).reshape(len(y), len(self.nuisance_embeddings))
        return self.embed(y, a, nuisance) + self.noise_scale * noise


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    a: np.ndarray
    nuisance: np.ndarray
    domain: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.a[idx], self.nuisance[idx], self.domain[idx])

    @property
    def group(self) -> np.ndarray:
        """Group index ``2*y + a`` (same ordering as the scenario tables)."""
        return 2 * self.y + self.a

    @staticmethod
    def concat(parts: Sequence["Dataset"]) -> "Dataset":
        return Dataset(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.a for p in parts]),
            np.concatenate([p.nuisance for p in parts]),
            np.concatenate([p.domain for p in parts]),
        )

    def to_csv(self, path) -> None:
        d, m = self.x.shape[1], self.nuisance.shape[1]
        header = [f"x{i}" for i in range(d)] + ["y", "a"] + [f"n{j}" for j in range(m)] + ["domain"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i in range(len(self)):
                w.writerow(
                    [f"{v:.9g}" for v in self.x[i]]
                    + [int(self.y[i]), int(self.a[i])]
                    + [int(v) for v in self.nuisance[i]]
                    + [DOMAIN_TAGS[self.domain[i]]]
                )

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        xs = [i for i, h in enumerate(header) if h.startswith("x")]
        ns = [i for i, h in enumerate(header) if h.startswith("n")]
        iy, ia, idom = header.index("y"), header.index("a"), header.index("domain")
        return cls(
            np.array([[float(r[i]) for i in xs] for r in body], dtype=np.float64).reshape(len(body), len(xs)),
            np.array([int(r[iy]) for r in body], dtype=np.int64),
            np.array([int(r[ia]) for r in body], dtype=np.int64),
            np.array([[int(r[i]) for i in ns] for r in body], dtype=np.int64).reshape(len(body), len(ns)),
            np.array([DOMAIN_TAGS.index(r[idom]) for r in body], dtype=np.int64),
        )


def sample_dataset(config: DomainConfig, emitter: Emitter, n: int, seed: int, domain: int = SOURCE) -> Dataset:
    """Draw ``n`` i.i.d. samples; a pure function of its arguments."""
    if n < 1:
        raise ContractError("n must be at least 1")
    config.validate()
    rng = np.random.default_rng(seed)
    table = config.joint_label_sensitive
    n_a = table.shape[1]
    cell = rng.choice(table.size, size=n, p=table.ravel())
    y, a = cell // n_a, cell % n_a
    nuisance = np.empty((n, len(config.nuisance_marginals)), dtype=np.int64)
    for j, p in enumerate(config.nuisance_marginals):
        nuisance[:, j] = rng.choice(len(p), size=n, p=p)
    noise = rng.standard_normal((n, emitter.feature_dim))
    x = emitter.emit(y, a, nuisance, noise)
    return Dataset(x, y.astype(np.int64), a.astype(np.int64), nuisance, np.full(n, domain, dtype=np.int64))


@dataclass
class NuisanceResample:
    """Group-preserving transformation: redraw chosen nuisance factors, re-emit x.

    Each transformable factor is resampled uniformly over ``supports[j]``
    (normally the union of the source and target supports).  Label and
    sensitive attribute are never touched.
    """

    emitter: Emitter
    factor_indices: Sequence[int]
    supports: Sequence[np.ndarray]

    @classmethod
    def for_scenario(cls, scenario: ShiftScenario, emitter: Emitter, transformable: Sequence[str]) -> "NuisanceResample":
        names = [f.name for f in scenario.nuisance_factors]
        roles = {f.name: f.role for f in scenario.factors}
        idx = []
        for t in transformable:
            if roles.get(t) in (LABEL, SENSITIVE):
                raise ContractError(f"factor {t!r} is a {roles[t]} factor and may not be transformed")
            if t not in names:
                raise ContractError(f"unknown nuisance factor {t!r}")
            idx.append(names.index(t))
        return cls(emitter, idx, scenario.union_supports())

    def __call__(self, data: Dataset, rng: np.random.Generator) -> np.ndarray:
        nuisance = data.nuisance.copy()
        for j in self.factor_indices:
            allowed = np.flatnonzero(self.supports[j])
            nuisance[:, j] = allowed[rng.integers(0, len(allowed), size=len(data))]
        noise = rng.standard_normal((len(data), self.emitter.feature_dim))
        return self.emitter.emit(data.y, data.a, nuisance, noise)


def nuisance_resample_transform(
    sample: Dataset,
    emitter: Emitter,
    transformable: Sequence[str],
    rng: np.random.Generator,
    scenario: ShiftScenario,
) -> np.ndarray:
    return NuisanceResample.for_scenario(scenario, emitter, transformable)(sample, rng)


@dataclass
class FeatureCorruption:
    """Replace a random subset of unprotected coordinates with uniform draws.

    ``low``/``high`` give the per-coordinate corruption range, by default the
    empirical min/max of the training features.
    """

    low: np.ndarray
    high: np.ndarray
    protected: Sequence[int] = field(default_factory=tuple)
    fraction: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ConfigError(f"corruption fraction {self.fraction} outside [0, 1]", key="transform.fraction")
        d = len(self.low)
        bad = [i for i in self.protected if not 0 <= i < d]
        if bad:
            raise ContractError(f"protected indices {bad} outside feature_dim {d}")
        self.eligible = np.setdiff1d(np.arange(d), np.asarray(self.protected, dtype=np.int64))
        self.count = int(round(self.fraction * len(self.eligible)))

    @classmethod
    def fit(cls, x_train: np.ndarray, protected: Sequence[int] = (), fraction: float = 0.5) -> "FeatureCorruption":
        return cls(x_train.min(axis=0), x_train.max(axis=0), tuple(protected), fraction)

    def corrupt(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = np.array(x, dtype=np.float64, copy=True)
        if self.count == 0:
            return out
        n = len(out)
        # argsort of uniform keys gives an independent random subset per row
        keys = rng.random((n, len(self.eligible)))
        chosen = self.eligible[np.argsort(keys, axis=1)[:, : self.count]]
        u = rng.random((n, self.count))
        lo, hi = self.low[chosen], self.high[chosen]
        out[np.arange(n)[:, None], chosen] = lo + u * (hi - lo)
        return out

    def __call__(self, data: Dataset, rng: np.random.Generator) -> np.ndarray:
        return self.corrupt(data.x, rng)


def feature_corruption_transform(sample_x, protected_feature_indices, corruption_fraction, rng, low, high) -> np.ndarray:
    x = np.atleast_2d(np.asarray(sample_x, dtype=np.float64))
    t = FeatureCorruption(np.asarray(low), np.asarray(high), tuple(protected_feature_indices), corruption_fraction)
    out = t.corrupt(x, rng)
    return out[0] if np.ndim(sample_x) == 1 else out
