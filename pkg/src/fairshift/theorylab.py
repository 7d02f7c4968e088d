"""Exact certification of the self-training fairness bounds on finite worlds.

A :class:`DiscreteWorld` is a finite point set split into groups (y, a) with
a probability mass per point under the group distribution U_a^y (the
average of its source and target parts).  Transformations are finite
partial matchings; with radius 0 the ball of ``x`` is ``{x}`` plus its
matched partners, and two points of the same group are neighbours when their balls
intersect.  Everything here is computed by enumeration; nothing is sampled.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Optional

import numpy as np

from .errors import BudgetError, ContractError

TOL = 1e-12
N_GROUPS = 4
EXPANSION_BUDGET = 20
LABELING_BUDGET = 16


@dataclass
class DiscreteWorld:
    group: np.ndarray  # per point, 2*y + a
    domain: np.ndarray  # per point, 0 = S, 1 = T
    mass: np.ndarray  # per point, mass under its group distribution
    group_prior: np.ndarray  # P_U(group), length 4

    def __post_init__(self):
        self.group = np.asarray(self.group, dtype=np.int64)
        self.domain = np.asarray(self.domain, dtype=np.int64)
        self.mass = np.asarray(self.mass, dtype=np.float64)
        self.group_prior = np.asarray(self.group_prior, dtype=np.float64)
        if not (len(self.group) == len(self.domain) == len(self.mass)):
            raise ContractError("per-point arrays must have equal length")
        for g in self.present_groups:
            total = self.mass[self.group == g].sum()
            if abs(total - 1.0) > TOL:
                raise ContractError(f"masses of group {g} sum to {total!r}, not 1")
        if abs(self.group_prior[self.present_groups].sum() - 1.0) > TOL:
            raise ContractError("group prior must sum to 1 over present groups")

    @classmethod
    def from_domain_masses(cls, group, domain, domain_mass, group_prior=None) -> "DiscreteWorld":
        """Build U_a^y = (S_a^y + T_a^y)/2 from masses normalised within each (group, domain) part.

        A group observed in only one domain takes that domain's part as U_a^y.
        """
        group = np.asarray(group, dtype=np.int64)
        domain = np.asarray(domain, dtype=np.int64)
        dm = np.asarray(domain_mass, dtype=np.float64)
        mass = np.zeros_like(dm)
        for g in np.unique(group):
            parts = [d for d in (0, 1) if np.any((group == g) & (domain == d))]
            for d in parts:
                sel = (group == g) & (domain == d)
                mass[sel] = dm[sel] / dm[sel].sum() / len(parts)
        if group_prior is None:
            present = np.unique(group)
            group_prior = np.zeros(N_GROUPS)
            group_prior[present] = 1.0 / len(present)
        return cls(group, domain, mass, group_prior)

    @property
    def n(self) -> int:
        return len(self.group)

    @property
    def present_groups(self) -> List[int]:
        return sorted(set(self.group.tolist()))

    @property
    def oracle(self) -> np.ndarray:
        """g*: every point is labelled with its group's class."""
        return self.group // 2

    def members(self, g: int) -> np.ndarray:
        return np.flatnonzero(self.group == g)


@dataclass
class NeighborGraph:
    """Transformations as partial matchings: each entry ``s: d`` pairs ``s`` and ``d`` both ways."""

    n: int
    maps: List[Dict[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.partners: List[set] = [set() for _ in range(self.n)]
        for t in self.maps:
            for s, d in t.items():
                if not (0 <= s < self.n and 0 <= d < self.n):
                    raise ContractError(f"transformation map {s}->{d} leaves the world")
                if s != d:
                    self.partners[s].add(d)
                    self.partners[d].add(s)

    def ball(self, i: int) -> frozenset:
        return frozenset({i} | self.partners[i])

    def balls(self) -> List[frozenset]:
        return [self.ball(i) for i in range(self.n)]

    def neighbors(self, world: DiscreteWorld) -> List[frozenset]:
        """N(x): points of x's own group whose ball meets B(x)."""
        balls = self.balls()
        out = []
        for i in range(self.n):
            same = world.members(world.group[i])
            out.append(frozenset(int(j) for j in same if balls[i] & balls[j]))
        return out


@dataclass
class ExpansionResult:
    holds: Optional[bool]
    c_star: float  # min P(N(V))/P(V) over small V
    max_cbar: float  # largest cbar for which expansion holds
    n_subsets: int


def check_expansion(
    world: DiscreteWorld, graph: NeighborGraph, group: int, alpha: float, cbar: Optional[float] = None
) -> ExpansionResult:
    """Enumerate every nonempty V in the group's support with P(V) <= alpha.

    ``holds`` (None when ``cbar`` is None) is whether
    ``P(N(V)) >= min(cbar * P(V), 1)`` for every such V.
    """
    idx = world.members(group)
    k = len(idx)
    if k == 0:
        raise ContractError(f"group {group} has no points")
    if k > EXPANSION_BUDGET:
        raise BudgetError(f"group {group} has {k} points; expansion enumeration budget is {EXPANSION_BUDGET}")
    local = {int(p): j for j, p in enumerate(idx)}
    nb = graph.neighbors(world)
    nb_mask = np.array([sum(1 << local[q] for q in nb[p]) for p in idx], dtype=np.int64)
    m = world.mass[idx]

    subsets = np.arange(1, 1 << k, dtype=np.int64)
    bits = ((subsets[:, None] >> np.arange(k)) & 1).astype(bool)
    p_v = bits @ m
    n_mask = np.zeros(len(subsets), dtype=np.int64)
    for j in range(k):
        n_mask[bits[:, j]] |= nb_mask[j]
    n_bits = ((n_mask[:, None] >> np.arange(k)) & 1).astype(bool)
    p_n = n_bits @ m

    small = p_v <= alpha + TOL
    if not small.any():
        return ExpansionResult(True if cbar is not None else None, np.inf, np.inf, 0)
    ratio = p_n[small] / p_v[small]
    c_star = float(ratio.min())
    short = p_n[small] < 1.0 - TOL
    max_cbar = float(ratio[short].min()) if short.any() else np.inf
    holds = None
    if cbar is not None:
        holds = bool(np.all(np.minimum(cbar * p_v[small], 1.0) <= p_n[small] + TOL))
    return ExpansionResult(holds, c_star, max_cbar, int(small.sum()))


def _per_group(world: DiscreteWorld, point_values: np.ndarray) -> np.ndarray:
    """Mass-weighted sums per group (nan for absent groups); works on (..., n) arrays."""
    onehot = np.zeros((world.n, N_GROUPS))
    onehot[np.arange(world.n), world.group] = world.mass
    out = point_values.astype(np.float64) @ onehot
    absent = [g for g in range(N_GROUPS) if g not in world.present_groups]
    out[..., absent] = np.nan
    return out


def _population(world: DiscreteWorld, per_group: np.ndarray) -> np.ndarray:
    prior = world.group_prior
    return np.nansum(per_group * prior, axis=-1)


def inconsistent_points(graph: NeighborGraph, g: np.ndarray) -> np.ndarray:
    """Boolean per point (broadcast over leading labeling axes): some ball member is labelled differently."""
    g = np.asarray(g)
    out = np.zeros(g.shape, dtype=bool)
    for i, ball in enumerate(graph.balls()):
        for j in ball:
            if j != i:
                out[..., i] |= g[..., i] != g[..., j]
    return out


@dataclass
class GroupLosses:
    per_group: np.ndarray  # length 4, nan for absent groups
    overall: float


def consistency_loss_discrete(world: DiscreteWorld, graph: NeighborGraph, g) -> GroupLosses:
    g = np.asarray(g)
    if g.shape != (world.n,):
        raise ContractError("classifier must label every point")
    pg = _per_group(world, inconsistent_points(graph, g))
    return GroupLosses(pg, float(_population(world, pg)))


def error_and_disagreement(world: DiscreteWorld, g, g_ref):
    """Returns ``(error vs g*, disagreement vs g_ref)`` as :class:`GroupLosses`."""
    g = np.asarray(g)
    g_ref = np.asarray(g_ref)
    if g.shape != (world.n,) or g_ref.shape != (world.n,):
        raise ContractError("classifiers must label every point")
    err = _per_group(world, g != world.oracle)
    dis = _per_group(world, g != g_ref)
    return GroupLosses(err, float(_population(world, err))), GroupLosses(dis, float(_population(world, dis)))


def dodds_from_group_errors(err: np.ndarray) -> float:
    """(1/2) sum_y |err(y, a=0) - err(y, a=1)| with groups indexed 2*y + a."""
    return 0.5 * (abs(err[0] - err[1]) + abs(err[2] - err[3]))


@dataclass
class TheoremParams:
    alpha_bar: float
    c_bar: float
    mu: float
    gamma: float

    @property
    def c(self) -> float:
        return min(1.0 / self.alpha_bar, self.c_bar)


@dataclass
class BoundReport:
    preconditions: Dict[str, bool]
    error_lhs: float
    error_rhs: float
    dodds_lhs: float
    dodds_rhs: float
    group_error: List[float]
    group_upper_rhs: List[float]  # restricted per-group upper bound
    group_lower_rhs: List[float]  # triangle lower bound
    group_general_rhs: List[float]  # unrestricted per-group upper bound
    violations: List[str]

    @property
    def certified(self) -> bool:
        return all(self.preconditions.values())

    @property
    def error_slack(self) -> float:
        return self.error_rhs - self.error_lhs

    @property
    def dodds_slack(self) -> float:
        return self.dodds_rhs - self.dodds_lhs


def verify_theorem_bounds(
    world: DiscreteWorld,
    graph: NeighborGraph,
    g_tc,
    g_hat,
    params: TheoremParams,
    expansion: Optional[Dict[int, ExpansionResult]] = None,
) -> BoundReport:
    """Certify the preconditions, then evaluate both sides of every bound.

    ``violations`` lists bounds that fail; it is meaningful only when every
    precondition holds (see ``BoundReport.certified``).
    """
    groups = world.present_groups
    c = params.c
    err_tc, _ = error_and_disagreement(world, g_tc, g_tc)
    err_hat, dis = error_and_disagreement(world, g_hat, g_tc)
    cons = consistency_loss_discrete(world, graph, g_hat)
    e_tc = err_tc.per_group[groups]
    if expansion is None:
        expansion = {g: check_expansion(world, graph, g, params.alpha_bar, params.c_bar) for g in groups}
    gaps = [abs(a - b) for a, b in combinations(e_tc, 2)]
    pre = {
        "alpha_below_one_third": params.alpha_bar < 1.0 / 3.0,
        "cbar_above_three": params.c_bar > 3.0,
        "teacher_error_within_alpha": bool(np.all(e_tc <= params.alpha_bar + TOL)),
        "expansion": all(expansion[g].holds for g in groups),
        "mu_within_teacher_error": bool(params.mu <= e_tc.min() + TOL),
        "disagreement_within_mu": bool(np.all(dis.per_group[groups] <= params.mu + TOL)),
        "gamma_bounds_teacher_gap": bool(max(gaps, default=0.0) <= params.gamma + TOL),
        "all_groups_present": groups == list(range(N_GROUPS)),
    }

    k1, k2 = 2.0 / (c - 1.0), 2.0 * c / (c - 1.0)
    error_rhs = k1 * err_tc.overall + k2 * cons.overall
    max_r = float(np.nanmax(cons.per_group))
    dodds_lhs = dodds_from_group_errors(err_hat.per_group) if pre["all_groups_present"] else float("nan")
    dodds_rhs = k1 * (params.gamma + params.mu + c * max_r)
    upper = k1 * err_tc.per_group + k2 * cons.per_group
    lower = err_tc.per_group - dis.per_group
    general = (c + 1.0) / (c - 1.0) * dis.per_group + k2 * cons.per_group - err_tc.per_group

    violations = []
    if err_hat.overall > error_rhs + TOL:
        violations.append("error_bound")
    if pre["all_groups_present"] and dodds_lhs > dodds_rhs + TOL:
        violations.append("dodds_bound")
    for g in groups:
        if err_hat.per_group[g] > upper[g] + TOL:
            violations.append(f"restricted_upper[{g}]")
        if err_hat.per_group[g] < lower[g] - TOL:
            violations.append(f"triangle_lower[{g}]")
        if err_hat.per_group[g] > general[g] + TOL:
            violations.append(f"general_upper[{g}]")
    return BoundReport(
        preconditions=pre,
        error_lhs=err_hat.overall,
        error_rhs=float(error_rhs),
        dodds_lhs=dodds_lhs,
        dodds_rhs=float(dodds_rhs),
        group_error=err_hat.per_group.tolist(),
        group_upper_rhs=upper.tolist(),
        group_lower_rhs=lower.tolist(),
        group_general_rhs=general.tolist(),
        violations=violations,
    )


def enumerate_labelings(n: int) -> np.ndarray:
    """All binary labelings in lexicographic order (point 0 most significant)."""
    if n > LABELING_BUDGET:
        raise BudgetError(f"{n} points exceed the labeling enumeration budget of {LABELING_BUDGET}")
    k = np.arange(1 << n, dtype=np.int64)
    return ((k[:, None] >> np.arange(n - 1, -1, -1)) & 1).astype(np.int8)


@dataclass
class MinimaxResult:
    feasible: bool
    labeling: Optional[np.ndarray]
    max_group_consistency: float
    error: float
    n_feasible: int
    feasible_labelings: np.ndarray = field(repr=False, default=None)


def solve_constrained_minimax(world: DiscreteWorld, graph: NeighborGraph, g_tc, mu: float) -> MinimaxResult:
    """Brute force: minimise the worst-group consistency loss subject to per-group disagreement <= mu.

    Ties break on smaller population error, then on the lexicographically
    smallest labeling.
    """
    labs = enumerate_labelings(world.n)
    groups = world.present_groups
    g_tc = np.asarray(g_tc)
    dis = _per_group(world, labs != g_tc)[:, groups]
    feasible = np.all(dis <= mu + TOL, axis=1)
    if not feasible.any():
        return MinimaxResult(False, None, float("nan"), float("nan"), 0, labs[:0])
    cand = labs[feasible]
    max_r = np.max(_per_group(world, inconsistent_points(graph, cand))[:, groups], axis=1)
    err = _population(world, _per_group(world, cand != world.oracle))
    best_r = max_r.min()
    tie = max_r <= best_r + TOL
    best_e = err[tie].min()
    tie &= err <= best_e + TOL
    i = int(np.flatnonzero(tie)[0])  # enumeration order is lexicographic
    return MinimaxResult(True, cand[i].astype(np.int64), float(max_r[i]), float(err[i]), int(feasible.sum()), cand)


# random instances


@dataclass
class TheoryInstance:
    world: DiscreteWorld
    graph: NeighborGraph
    teacher: np.ndarray
    params: TheoremParams
    expansion: Dict[int, ExpansionResult]


def random_world(
    rng: np.random.Generator,
    points_per_group=(3, 4),
    n_maps=(1, 3),
    map_prob: float = 0.8,
    cross_group_prob: float = 0.05,
    dirichlet: float = 1.0,
):
    """Random world plus random partial matchings biased toward intra-group pairs."""
    sizes = rng.integers(points_per_group[0], points_per_group[1] + 1, size=N_GROUPS)
    group = np.repeat(np.arange(N_GROUPS), sizes)
    n = len(group)
    domain = np.zeros(n, dtype=np.int64)
    for g in range(N_GROUPS):
        idx = np.flatnonzero(group == g)
        domain[idx] = rng.permutation(np.arange(len(idx)) % 2)  # both domains present
    dm = np.zeros(n)
    for g in range(N_GROUPS):
        for d in (0, 1):
            sel = (group == g) & (domain == d)
            dm[sel] = rng.dirichlet(np.full(sel.sum(), dirichlet))
    prior = rng.dirichlet(np.full(N_GROUPS, 4.0))
    world = DiscreteWorld.from_domain_masses(group, domain, dm, prior)
    maps = []
    for _ in range(int(rng.integers(n_maps[0], n_maps[1] + 1))):
        t: Dict[int, int] = {}
        free = set(range(n))
        for i in rng.permutation(n).tolist():
            if i not in free or rng.random() >= map_prob:
                continue
            free.discard(i)
            if rng.random() < cross_group_prob:
                pool = sorted(free)
            else:
                pool = sorted(free & set(world.members(group[i]).tolist()))
            if pool:
                j = int(rng.choice(pool))
                free.discard(j)
                t[i] = j
        maps.append(t)
    return world, NeighborGraph(n, maps)


def random_teacher(world: DiscreteWorld, rng: np.random.Generator, alpha: float) -> np.ndarray:
    """g* with a random per-group flip set of mass at most ``alpha``.

    The first affordable point of each group is always flipped so the
    teacher errs somewhere in every group whenever it can.
    """
    teacher = world.oracle.copy()
    for g in world.present_groups:
        spent = 0.0
        for i in rng.permutation(world.members(g)):
            if spent + world.mass[i] <= alpha and (spent == 0.0 or rng.random() < 0.5):
                teacher[i] = 1 - teacher[i]
                spent += world.mass[i]
    return teacher


def random_instance(
    rng: np.random.Generator,
    alpha: Optional[float] = None,
    cbar: Optional[float] = None,
    mu_mode: str = "min-teacher-error",
    max_tries: int = 10_000,
    **world_kwargs,
) -> TheoryInstance:
    """Draw worlds until one certifies every precondition.

    With ``cbar=None`` the largest certified expansion constant is used
    (capped at ``1/alpha``, beyond which it no longer changes ``c``).
    """
    for _ in range(max_tries):
        a = float(rng.uniform(0.1, 1 / 3 - 1e-3)) if alpha is None else alpha
        world, graph = random_world(rng, **world_kwargs)
        teacher = random_teacher(world, rng, a)
        exp = {g: check_expansion(world, graph, g, a) for g in world.present_groups}
        cb = cbar
        if cb is None:
            cb = min(min(e.max_cbar for e in exp.values()), 1.0 / a)
        if not cb > 3.0:
            continue
        exp = {g: check_expansion(world, graph, g, a, cb) for g in world.present_groups}
        if not all(e.holds for e in exp.values()):
            continue
        err, _ = error_and_disagreement(world, teacher, teacher)
        e = err.per_group[world.present_groups]
        if mu_mode == "min-teacher-error":
            mu = float(e.min())
        elif mu_mode.startswith("fixed:"):
            mu = float(mu_mode.split(":", 1)[1])
        else:
            raise ContractError(f"unknown mu mode {mu_mode!r}")
        gamma = float(max(abs(x - y) for x, y in combinations(e, 2)))
        params = TheoremParams(a, cb, mu, gamma)
        if params.mu > e.min() + TOL:
            continue
        return TheoryInstance(world, graph, teacher, params, exp)
    raise RuntimeError("no precondition-satisfying world found; loosen the generator parameters")


@dataclass
class WorldCertificate:
    params: TheoremParams
    n_points: int
    optimum: Optional[BoundReport]
    feasible_checked: int
    feasible_violations: int
    worst: Dict[str, float]


def certify_instance(inst: TheoryInstance) -> WorldCertificate:
    """Check the bounds at the minimax optimum and at every feasible labeling."""
    mm = solve_constrained_minimax(inst.world, inst.graph, inst.teacher, inst.params.mu)
    optimum = None
    n_viol = 0
    worst = {"error_slack": np.inf, "dodds_slack": np.inf}
    if mm.feasible:
        optimum = verify_theorem_bounds(inst.world, inst.graph, inst.teacher, mm.labeling, inst.params, inst.expansion)
        for lab in mm.feasible_labelings:
            rep = verify_theorem_bounds(inst.world, inst.graph, inst.teacher, lab.astype(np.int64), inst.params, inst.expansion)
            n_viol += bool(rep.violations)
            worst["error_slack"] = min(worst["error_slack"], rep.error_slack)
            worst["dodds_slack"] = min(worst["dodds_slack"], rep.dodds_slack)
    return WorldCertificate(inst.params, inst.world.n, optimum, mm.n_feasible, n_viol, worst)


# subpopulation-shift propositions


@dataclass
class PropositionReport:
    premise_holds: bool
    dodds_source: float
    dodds_target: float
    claim_holds: Optional[bool]  # None when the premise fails
    detail: str = ""


def _check_pmf(p, name):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > TOL:
        raise ContractError(f"{name} is not a probability vector")
    return p


def _dodds_from_rates(rates_ya: np.ndarray) -> float:
    return 0.5 * float(np.abs(rates_ya[:, 0] - rates_ya[:, 1]).sum())


def verify_prop_subpop(rates, p_source, p_target) -> PropositionReport:
    """Exact equalized odds in both domains when only a nuisance factor's marginal shifts.

    ``rates[y, a, i]`` is P(g(X)=y | Y=y, A=a, Y^i=i).  Latent factors are
    independent, so P(g(X)=y | a, y) = sum_i P(Y^i=i) rates[y, a, i] in each
    domain.  Premise: ``rates[y, 0, i] == rates[y, 1, i]`` for every y, i.
    """
    rates = np.asarray(rates, dtype=np.float64)
    ps = _check_pmf(p_source, "source pmf")
    pt = _check_pmf(p_target, "target pmf")
    if rates.ndim != 3 or rates.shape[:2] != (2, 2) or rates.shape[2] != len(ps) or len(ps) != len(pt):
        raise ContractError("rates must be (2, 2, |Y^i|) and both pmfs must share that sample space")
    premise = bool(np.array_equal(rates[:, 0, :], rates[:, 1, :]))
    d_s = _dodds_from_rates(rates @ ps)
    d_t = _dodds_from_rates(rates @ pt)
    claim = (d_t <= TOL) if premise else None
    detail = "" if premise else "rate table is not conditionally fair for every nuisance value"
    return PropositionReport(premise, d_s, d_t, claim, detail)


def verify_prop_sensitive_shift(rates, p_a_source, p_a_target, nuisance_pmf=None) -> PropositionReport:
    """Equalized odds when only P(A) shifts.

    ``rates`` is ``[y, a]`` (or ``[y, a, i]`` with ``nuisance_pmf``, which is
    shared by both domains).  Group-conditional rates do not involve P(A), so
    both domains see the same rates.
    """
    rates = np.asarray(rates, dtype=np.float64)
    _check_pmf(p_a_source, "source P(A)")
    _check_pmf(p_a_target, "target P(A)")
    if rates.ndim == 3:
        if nuisance_pmf is None:
            raise ContractError("a (2, 2, k) rate table needs the nuisance pmf")
        rates = rates @ _check_pmf(nuisance_pmf, "nuisance pmf")
    if rates.shape != (2, 2):
        raise ContractError("rates must be indexed [y, a]")
    # P(g=y | A=a, Y=y) per domain; P(A) only reweights groups, never these rates
    d_s = _dodds_from_rates(rates)
    d_t = _dodds_from_rates(rates)
    premise = d_s <= TOL
    claim = (d_t <= TOL) if premise else None
    return PropositionReport(premise, d_s, d_t, claim, "" if premise else "source model is not fair")


def random_fair_rates(rng: np.random.Generator, k: int) -> np.ndarray:
    r = rng.random((2, 1, k))
    return np.repeat(r, 2, axis=1)


def random_unfair_rates(rng: np.random.Generator, k: int) -> np.ndarray:
    return rng.random((2, 2, k))


def group_consistency_variance(world: DiscreteWorld, graph: NeighborGraph, g):
    """Returns ``(population variance of per-group R, V_acc of g in percent^2)`` over present groups."""
    cons = consistency_loss_discrete(world, graph, g)
    err, _ = error_and_disagreement(world, g, g)
    groups = world.present_groups
    return float(np.var(cons.per_group[groups])), float(np.var(100.0 * (1.0 - err.per_group[groups])))
