"""Discrete generative models, variational free energy and team-configuration search.

Everything here works in nats.  For a joint ``p(s, o)`` over team states ``s``
and aims ``o``, and a belief ``q(s)``::

    p(o) = sum_s p(s, o)
    F    = sum_s q(s) ln(q(s) / p(s, o)) = -ln p(o) + KL(q || p(s | o))

so ``F >= -ln p(o)`` with equality exactly at the posterior.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Hashable, Iterator, Sequence

import numpy as np

from .errors import (
    ConvergenceError,
    InfeasiblePartitionError,
    InfiniteFreeEnergyError,
    ImpossibleAimError,
    InvalidModelError,
    NoCandidatesError,
    SearchTooLargeError,
    UnknownAimError,
)
from .skill_space import SkillProfile, cooperation_fit, team_profile

ACHIEVED = "achieved"
NOT_ACHIEVED = "not_achieved"
TEAM_AIMS = (ACHIEVED, NOT_ACHIEVED)

DEFAULT_FLOOR = 0.01
DEFAULT_SEARCH_CAP = 10
_SUM_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class GenerativeModel:
    states: tuple[Hashable, ...]
    aims: tuple[Hashable, ...]
    joint: np.ndarray  # shape (len(states), len(aims))

    def __post_init__(self):
        states = tuple(self.states)
        aims = tuple(self.aims)
        joint = np.array(self.joint, dtype=float)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "aims", aims)
        if not states or not aims:
            raise InvalidModelError("a model needs at least one state and one aim")
        if len(set(states)) != len(states) or len(set(aims)) != len(aims):
            raise InvalidModelError("states and aims must be distinct")
        if joint.shape != (len(states), len(aims)):
            raise InvalidModelError(
                f"joint has shape {joint.shape}, expected {(len(states), len(aims))}"
            )
        if not np.all(np.isfinite(joint)) or np.any(joint < 0):
            raise InvalidModelError("joint probabilities must be finite and >= 0")
        total = math.fsum(joint.ravel())
        if abs(total - 1.0) > _SUM_TOL:
            raise InvalidModelError(f"joint sums to {total}, not 1")
        joint.setflags(write=False)
        object.__setattr__(self, "joint", joint)

    def aim_index(self, aim) -> int:
        try:
            return self.aims.index(aim)
        except ValueError:
            raise UnknownAimError(f"unknown aim: {aim!r}") from None

    def column(self, aim) -> np.ndarray:
        return self.joint[:, self.aim_index(aim)]


@dataclass(frozen=True, eq=False)
class VariationalDistribution:
    states: tuple[Hashable, ...]
    q: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=float)
        object.__setattr__(self, "states", tuple(self.states))
        if q.shape != (len(self.states),):
            raise InvalidModelError("q must have one entry per state")
        if not np.all(np.isfinite(q)) or np.any(q < 0):
            raise InvalidModelError("q must be finite and >= 0")
        if abs(math.fsum(q) - 1.0) > _SUM_TOL:
            raise InvalidModelError(f"q sums to {math.fsum(q)}, not 1")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    def total_variation(self, other: "VariationalDistribution") -> float:
        return 0.5 * float(np.abs(self.q - other.q).sum())


@dataclass(frozen=True)
class FreeEnergyReport:
    free_energy: float
    neg_log_evidence: float
    kl_gap: float


def marginal_evidence(model: GenerativeModel, aim) -> float:
    """``p(o)``: the joint column for ``aim`` summed over states."""
    return math.fsum(model.column(aim))


def _check_aligned(q: VariationalDistribution, model: GenerativeModel):
    if q.states != model.states:
        raise InvalidModelError("belief states do not match the model states")


def free_energy(q: VariationalDistribution, model: GenerativeModel, aim) -> FreeEnergyReport:
    _check_aligned(q, model)
    col = model.column(aim)
    qv = q.q
    support = qv > 0
    if np.any(col[support] <= 0):
        bad = [model.states[i] for i in np.flatnonzero(support & (col <= 0))]
        raise InfiniteFreeEnergyError(f"q has mass on zero-probability states {bad}")
    evidence = math.fsum(col)
    qs, ps = qv[support], col[support]
    f = math.fsum(qs * (np.log(qs) - np.log(ps)))
    kl = math.fsum(qs * (np.log(qs) - np.log(ps / evidence)))
    return FreeEnergyReport(free_energy=f, neg_log_evidence=-math.log(evidence), kl_gap=kl)


def exact_posterior(model: GenerativeModel, aim) -> VariationalDistribution:
    col = model.column(aim)
    evidence = math.fsum(col)
    if evidence <= 0:
        raise ImpossibleAimError(f"aim {aim!r} has zero evidence")
    return VariationalDistribution(model.states, col / evidence)


def minimize_free_energy(
    model: GenerativeModel,
    aim,
    max_iters: int = 1000,
    tol: float = 1e-10,
    *,
    step: float = 1.0,
    init: VariationalDistribution | None = None,
    callback: Callable[[int, VariationalDistribution, FreeEnergyReport], None] | None = None,
) -> tuple[VariationalDistribution, FreeEnergyReport]:
    """Fixed-point minimization of F over beliefs q.

    Each iteration moves q towards the stationary point ``q ∝ p(s, o)``::

        q_new ∝ q**(1 - step) * p(s, o)**step

    ``step=1`` jumps straight to the posterior; smaller steps trace the
    geometric path between ``init`` and the posterior, along which F
    decreases monotonically.  Stops once ``F - (-ln p(o)) <= tol``.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if tol <= 0:
        raise ValueError("tol must be > 0")
    if not 0 < step <= 1:
        raise ValueError("step must lie in (0, 1]")
    col = model.column(aim)
    if math.fsum(col) <= 0:
        raise ImpossibleAimError(f"aim {aim!r} has zero evidence")
    support = col > 0
    if init is None:
        q = support / support.sum()
    else:
        _check_aligned(init, model)
        q = init.q.copy()
        if step < 1 and np.any(q[support] <= 0):
            raise ValueError("init must put mass on every state with p(s, o) > 0")

    log_p = np.full(col.shape, -np.inf)
    log_p[support] = np.log(col[support])
    prev_f = math.inf
    gap = math.inf
    for it in range(1, max_iters + 1):
        with np.errstate(divide="ignore"):
            log_q = np.log(q)
        logits = (1.0 - step) * log_q + step * log_p if step < 1 else log_p.copy()
        logits[~support] = -np.inf
        logits -= logits.max()
        w = np.exp(logits)
        q = w / w.sum()
        belief = VariationalDistribution(model.states, q)
        report = free_energy(belief, model, aim)
        # the geometric path guarantees descent; anything else is a bug
        assert report.free_energy <= prev_f + 1e-12, "free energy increased"
        prev_f = report.free_energy
        if callback is not None:
            callback(it, belief, report)
        gap = report.free_energy - report.neg_log_evidence
        if gap <= tol:
            return belief, report
    raise ConvergenceError(
        f"no convergence after {max_iters} iterations (gap {gap:.3e})", q=belief, gap=gap
    )


def aim_probability(fit: float, floor: float, aim=ACHIEVED) -> float:
    """``p(o | s)`` for a team with the given fit, clamped to [floor, 1 - floor]."""
    p = min(max(fit, floor), 1.0 - floor)
    if aim == ACHIEVED:
        return p
    if aim == NOT_ACHIEVED:
        return 1.0 - p
    raise UnknownAimError(f"unknown aim: {aim!r}")


def build_team_model(
    project: SkillProfile,
    candidates: Sequence[tuple[str, SkillProfile]],
    team_size_range: tuple[int, int],
    floor: float = DEFAULT_FLOOR,
) -> GenerativeModel:
    """Uniform prior over admissible teams; likelihood from the team's fit.

    States are tuples of agent ids, ordered by team size then lexicographically.
    """
    if not 0 < floor < 0.5:
        raise ValueError("floor must lie in (0, 0.5)")
    lo, hi = team_size_range
    ordered = sorted(candidates, key=lambda c: c[0])
    ids = [c[0] for c in ordered]
    if len(set(ids)) != len(ids):
        raise ValueError("candidate ids must be unique")
    profiles = dict(ordered)
    states = [
        combo
        for size in range(max(lo, 1), min(hi, len(ids)) + 1)
        for combo in itertools.combinations(ids, size)
    ]
    if not states:
        raise NoCandidatesError("no admissible team in the given size range")
    prior = 1.0 / len(states)
    joint = np.empty((len(states), 2))
    for i, s in enumerate(states):
        fit = cooperation_fit(project, team_profile([profiles[a] for a in s]))
        p = aim_probability(fit, floor)
        joint[i] = (prior * p, prior * (1.0 - p))
    return GenerativeModel(tuple(states), TEAM_AIMS, joint)


def enumerate_partitions(n: int, min_part: int = 2, max_part: int | None = None) -> list[tuple[int, ...]]:
    """Integer partitions of ``n`` with parts in [min_part, max_part].

    Parts are non-increasing within a partition; partitions come in
    descending lexicographic order, so ``(n,)`` is first when allowed.
    """
    if min_part < 1:
        raise ValueError("min_part must be >= 1")
    if n < min_part:
        raise InfeasiblePartitionError(f"cannot split {n} into parts >= {min_part}")
    top = n if max_part is None else min(max_part, n)

    def rec(remaining, largest):
        if remaining == 0:
            yield ()
            return
        for part in range(min(largest, remaining), min_part - 1, -1):
            for rest in rec(remaining - part, part):
                yield (part,) + rest

    out = list(rec(n, top))
    if not out:
        raise InfeasiblePartitionError(
            f"no partition of {n} with parts in [{min_part}, {top}]"
        )
    return out


def set_partitions_with_sizes(items: Sequence, sizes: Sequence[int]) -> Iterator[tuple[tuple, ...]]:
    """Every split of ``items`` into blocks whose sizes form the multiset ``sizes``.

    Each split is produced exactly once: the first remaining item picks
    which size class it lands in, then its companions.
    """
    if sum(sizes) != len(items):
        raise ValueError("sizes must sum to the number of items")

    def rec(remaining, counts):
        if not remaining:
            yield ()
            return
        head, rest = remaining[0], remaining[1:]
        for size in sorted(counts, reverse=True):
            if counts[size] == 0:
                continue
            counts[size] -= 1
            for mates in itertools.combinations(rest, size - 1):
                left = tuple(x for x in rest if x not in mates)
                for tail in rec(left, counts):
                    yield ((head,) + mates,) + tail
            counts[size] += 1

    counts: dict[int, int] = {}
    for s in sizes:
        counts[s] = counts.get(s, 0) + 1
    yield from rec(tuple(items), counts)


@dataclass(frozen=True)
class SubGroupConfiguration:
    partition: tuple[int, ...]
    groups: tuple[tuple[str, ...], ...]
    assignment: dict[str, int]
    total_free_energy: float
    group_free_energies: tuple[float, ...] = ()
    projects: tuple[int, ...] = ()  # sub-project served by each group

    def __post_init__(self):
        flat = [a for g in self.groups for a in g]
        if len(flat) != len(set(flat)) or set(flat) != set(self.assignment):
            raise ValueError("every agent must be assigned exactly once")
        if sorted(len(g) for g in self.groups) != sorted(self.partition):
            raise ValueError("group sizes do not match the partition")


def canonical_groups(groups) -> tuple[tuple[str, ...], ...]:
    return tuple(sorted(tuple(sorted(g)) for g in groups))


class _GroupScorer:
    """Caches ``-ln p(o)`` for (group, sub-project) pairs."""

    def __init__(self, projects, profiles, aim, floor):
        self.projects = projects
        self.profiles = profiles
        self.aim = aim
        self.floor = floor
        self.empty = tuple(-math.log(aim_probability(0.0, floor, aim)) for _ in projects)
        self._cache: dict = {}

    def group(self, members: tuple[str, ...], j: int) -> float:
        key = (members, j)
        if key not in self._cache:
            cands = [(a, self.profiles[a]) for a in members]
            model = build_team_model(self.projects[j], cands, (len(members), len(members)), self.floor)
            self._cache[key] = -math.log(marginal_evidence(model, self.aim))
        return self._cache[key]

    def configuration(self, groups) -> tuple[float, tuple[float, ...], tuple[int, ...]]:
        """Best mapping of groups onto sub-projects; unstaffed sub-projects count as empty teams."""
        m = len(self.projects)
        table = [[self.group(g, j) for j in range(m)] for g in groups]
        best = None
        for mapping in itertools.product(range(m), repeat=len(groups)):
            parts = [table[i][j] for i, j in enumerate(mapping)]
            staffed = set(mapping)
            parts += [self.empty[j] for j in range(m) if j not in staffed]
            total = math.fsum(parts)
            if best is None or total < best[0]:
                best = (total, tuple(table[i][j] for i, j in enumerate(mapping)), mapping)
        return best


def _select(candidates, rel_tol=1e-9):
    """Minimum total; near-ties go to fewer groups, then canonical order."""
    best = min(c[0] for c in candidates)
    slack = rel_tol * max(1.0, abs(best))
    tied = [c for c in candidates if c[0] <= best + slack]
    return min(tied, key=lambda c: (len(c[1]), c[1]))


def stable_subgroup_search(
    project: SkillProfile | Sequence[SkillProfile],
    agents: Sequence[tuple[str, SkillProfile]],
    aim=ACHIEVED,
    mode: str = "exhaustive",
    floor: float = DEFAULT_FLOOR,
    *,
    cap: int = DEFAULT_SEARCH_CAP,
    min_part: int = 2,
    max_part: int | None = None,
) -> SubGroupConfiguration:
    """Split the agents into sub-groups minimizing total free energy.

    ``project`` may be one requirement profile or a list of sub-projects.
    Every sub-group is scored by ``-ln p(o)`` of its own team model against
    the sub-project it serves; a sub-project nobody serves is scored as an
    empty team.  ``exhaustive`` tries every split for every size partition;
    ``greedy`` deals agents (by descending fit) round-robin into each
    partition's groups and is a heuristic only.
    """
    projects = [project] if isinstance(project, SkillProfile) else list(project)
    if not projects:
        raise ValueError("at least one project is required")
    n = len(agents)
    if n < 2:
        raise InfeasiblePartitionError("stable sub-group search needs at least 2 agents")
    if min_part < 1:
        raise ValueError("min_part must be >= 1")
    if mode not in ("exhaustive", "greedy"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "exhaustive" and n > cap:
        raise SearchTooLargeError(
            f"exhaustive search over {n} agents exceeds the cap of {cap}; use mode='greedy'"
        )
    profiles = dict(agents)
    if len(profiles) != n:
        raise ValueError("agent ids must be unique")
    ids = tuple(sorted(profiles))
    scorer = _GroupScorer(projects, profiles, aim, floor)

    candidates = []
    for partition in enumerate_partitions(n, min_part, max_part):
        if mode == "exhaustive":
            splits = set_partitions_with_sizes(ids, partition)
        else:
            splits = [_deal(ids, partition, projects, profiles)]
        for split in splits:
            groups = canonical_groups(split)
            total, per_group, mapping = scorer.configuration(groups)
            candidates.append((total, groups, partition, per_group, mapping))

    total, groups, partition, per_group, mapping = _select(candidates)
    assignment = {a: i for i, g in enumerate(groups) for a in g}
    return SubGroupConfiguration(
        partition=partition,
        groups=groups,
        assignment=assignment,
        total_free_energy=total,
        group_free_energies=per_group,
        projects=mapping,
    )


def _deal(ids, partition, projects, profiles):
    def best_fit(a):
        return max(cooperation_fit(p, profiles[a]) for p in projects)

    order = sorted(ids, key=lambda a: (-best_fit(a), a))
    groups: list[list[str]] = [[] for _ in partition]
    slot = 0
    for a in order:
        while len(groups[slot]) >= partition[slot]:
            slot = (slot + 1) % len(partition)
        groups[slot].append(a)
        slot = (slot + 1) % len(partition)
    return groups
