"""Radial skill profiles and the polygon-overlap cooperation fit index.

A project's skill requirements and each researcher's skills are drawn on a
radar chart: axis ``k`` sits at angle ``2*pi*k/K`` and the profile places a
vertex at radius ``r_k`` on it.  The fit index of a member against a project
is the area of the per-axis overlap polygon divided by the project's area.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateProjectError,
    EmptyTeamError,
    InvalidProfileError,
    InvalidTaxonomyError,
    TaxonomyMismatchError,
)

__all__ = [
    "SkillTaxonomy",
    "SkillProfile",
    "polygon_area",
    "overlap_profile",
    "cooperation_fit",
    "team_profile",
    "group_strength",
    "STRENGTH_THRESHOLD",
]

# group strength at which a candidate pool is evaluated for team formation
STRENGTH_THRESHOLD = 1.0


@dataclass(frozen=True)
class SkillTaxonomy:
    skills: tuple[str, ...]
    id: str = "default"

    def __post_init__(self):
        skills = tuple(self.skills)
        object.__setattr__(self, "skills", skills)
        if len(skills) < 3:
            raise InvalidTaxonomyError(
                f"a taxonomy needs at least 3 skills, got {len(skills)}"
            )
        if any(not isinstance(s, str) or not s for s in skills):
            raise InvalidTaxonomyError("skill labels must be non-empty strings")
        if len(set(skills)) != len(skills):
            raise InvalidTaxonomyError("skill labels must be unique")

    def __len__(self):
        return len(self.skills)

    def index(self, skill: str) -> int:
        return self.skills.index(skill)

    def profile(self, radii: Iterable[float]) -> "SkillProfile":
        return SkillProfile(self, tuple(radii))

    def from_mapping(self, levels: dict[str, float]) -> "SkillProfile":
        """Profile with the given skill levels and zero elsewhere."""
        unknown = set(levels) - set(self.skills)
        if unknown:
            raise InvalidProfileError(f"unknown skills: {sorted(unknown)}")
        return SkillProfile(self, tuple(float(levels.get(s, 0.0)) for s in self.skills))


@dataclass(frozen=True)
class SkillProfile:
    taxonomy: SkillTaxonomy
    radii: tuple[float, ...]

    def __post_init__(self):
        radii = tuple(float(r) for r in self.radii)
        object.__setattr__(self, "radii", radii)
        if len(radii) != len(self.taxonomy):
            raise InvalidProfileError(
                f"expected {len(self.taxonomy)} radii, got {len(radii)}"
            )
        for r in radii:
            if not math.isfinite(r) or r < 0:
                raise InvalidProfileError(f"radii must be finite and >= 0, got {r}")

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.radii, dtype=float)

    def scaled(self, c: float) -> "SkillProfile":
        return SkillProfile(self.taxonomy, tuple(c * r for r in self.radii))


def _check_same(a: SkillProfile, b: SkillProfile):
    if a.taxonomy != b.taxonomy:
        raise TaxonomyMismatchError("profiles use different taxonomies")


def polygon_area(profile: SkillProfile) -> float:
    """Area of the radar polygon, ``0.5*sin(2pi/K) * sum_k r_k r_{k+1}``."""
    r = profile.array
    k = r.size
    if k < 3:
        raise InvalidTaxonomyError("polygon area needs K >= 3")
    return 0.5 * math.sin(2.0 * math.pi / k) * float(np.dot(r, np.roll(r, -1)))


def overlap_profile(a: SkillProfile, b: SkillProfile) -> SkillProfile:
    _check_same(a, b)
    return SkillProfile(a.taxonomy, tuple(np.minimum(a.array, b.array)))


def cooperation_fit(project: SkillProfile, member: SkillProfile) -> float:
    """Share of the project's polygon covered by the member, in [0, 1]."""
    _check_same(project, member)
    denom = polygon_area(project)
    if denom <= 0.0:
        raise DegenerateProjectError("project polygon has zero area")
    fit = polygon_area(overlap_profile(project, member)) / denom
    # min-polygon area never exceeds the project's; clip rounding only
    return min(max(fit, 0.0), 1.0)


def team_profile(members: Sequence[SkillProfile]) -> SkillProfile:
    """Coverage profile of a team: per-axis maximum over members."""
    if not members:
        raise EmptyTeamError("a team needs at least one member")
    first = members[0]
    for m in members[1:]:
        _check_same(first, m)
    stacked = np.vstack([m.array for m in members])
    return SkillProfile(first.taxonomy, tuple(stacked.max(axis=0)))


def group_strength(project: SkillProfile, members: Sequence[SkillProfile]) -> float:
    """Sum of each member's individual fit against the project."""
    if polygon_area(project) <= 0.0:
        raise DegenerateProjectError("project polygon has zero area")
    return math.fsum(cooperation_fit(project, m) for m in members)
