"""Scenario files: a versioned JSON document describing agents, projects and the market.

Schema ``kmarket-scenario/1``::

    {
      "schema": "kmarket-scenario/1",
      "seed": 7,                        # 64-bit integer
      "horizon": 20,                    # ticks, >= 1
      "taxonomy": {"id": "core", "skills": ["stats", "ml", "bio"]},
      "lexicon": {"term": "definition", ...},
      "parameters": {"tau": 0.1, "patience": 3, "floor": 0.01,
                     "team_size": [2, 4], "per_capita": false, "quorum": null,
                     "search_cap": 8},
      "agents": [
        {"id": "r01", "role": "researcher",
         "profile": {"taxonomy_id": "core", "radii": [3, 1, 0]},
         "reservation_price": 0, "balance": 0, "delivery": "honest"},
        {"id": "dao1", "role": "investor", "capital": 5000, "stake": 40,
         "belief_policy": "posterior-follower", "vote_policy": "cooperative",
         "noise": 0.0, "abandon_after": 1}
      ],
      "projects": [
        {"id": "p1", "title": "...", "introduction": "...",
         "literature_review": "...", "methodology": "...",
         "requirement": {"taxonomy_id": "core", "radii": [2, 2, 0]},
         "budget": [{"label": "pay", "amount": 600}],
         "milestones": [{"description": "...", "amount": 600, "deadline": 2}]}
      ],
      "listings": [{"id": "L1", "owner": "r01", "tags": ["term"],
                    "description": "...", "payload": "text", "ask_price": 50}],
      "desiderata": [{"id": "d1", "agent": "dao1", "kind": "request",
                      "tags": ["term"], "quantity": 1, "price": [10, 80],
                      "deadline": 10, "listing": null}]
    }

Milestone deadlines count ticks from the tick a proposal is funded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import InvalidProfileError, InvalidTaxonomyError, ScenarioError
from ..governance import BudgetItem
from ..marketplace import Desideratum, Lexicon
from ..skill_space import SkillProfile, SkillTaxonomy

SCHEMA = "kmarket-scenario/1"
BELIEF_POLICIES = ("posterior-follower", "noisy", "adversarial")
VOTE_POLICIES = ("cooperative", "critical", "abandoning")
ROLES = ("researcher", "investor")


@dataclass(frozen=True)
class Parameters:
    tau: float = 0.1
    patience: int = 3
    floor: float = 0.01
    team_size: tuple[int, int] = (2, 4)
    per_capita: bool = False
    quorum: float | None = None
    search_cap: int = 8


@dataclass(frozen=True)
class AgentSpec:
    id: str
    role: str
    profile: SkillProfile | None = None
    reservation_price: float = 0.0
    balance: float = 0.0
    delivery: str = "honest"
    capital: float = 0.0
    stake: float = 1.0
    belief_policy: str = "posterior-follower"
    vote_policy: str = "cooperative"
    noise: float = 0.0
    abandon_after: int = 1


@dataclass(frozen=True)
class MilestoneSpec:
    description: str
    amount: float
    deadline: int


@dataclass(frozen=True)
class ProjectSpec:
    id: str
    requirement: SkillProfile
    budget: tuple[BudgetItem, ...]
    milestones: tuple[MilestoneSpec, ...]
    title: str = ""
    introduction: str = ""
    literature_review: str = ""
    methodology: str = ""

    @property
    def promised(self) -> float:
        return sum(b.amount for b in self.budget)


@dataclass(frozen=True)
class ListingSpec:
    id: str
    owner: str
    tags: tuple[str, ...]
    payload: str
    ask_price: float
    description: str = ""


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int
    horizon: int
    taxonomy: SkillTaxonomy
    lexicon: Lexicon
    agents: tuple[AgentSpec, ...]
    projects: tuple[ProjectSpec, ...] = ()
    listings: tuple[ListingSpec, ...] = ()
    desiderata: tuple[Desideratum, ...] = ()
    params: Parameters = field(default_factory=Parameters)

    def agent(self, agent_id: str) -> AgentSpec:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise KeyError(agent_id)

    def project(self, project_id: str) -> ProjectSpec:
        for p in self.projects:
            if p.id == project_id:
                return p
        raise KeyError(project_id)

    @property
    def researchers(self) -> list[AgentSpec]:
        return sorted((a for a in self.agents if a.role == "researcher"), key=lambda a: a.id)

    @property
    def investors(self) -> list[AgentSpec]:
        return sorted((a for a in self.agents if a.role == "investor"), key=lambda a: a.id)


class _Collector:
    """Accumulates problems so every one of them can be reported at once."""

    def __init__(self):
        self.problems: list[str] = []

    def add(self, msg):
        self.problems.append(msg)

    def get(self, doc, key, where, kind=None, default=...):
        if not isinstance(doc, dict) or key not in doc:
            if default is ...:
                self.add(f"{where}.{key}: missing")
                return None
            return default
        val = doc[key]
        if kind is not None and val is not None:
            ok = isinstance(val, kind) and not (kind in (int, (int, float)) and isinstance(val, bool))
            if not ok:
                self.add(f"{where}.{key}: expected {getattr(kind, '__name__', 'number')}, got {type(val).__name__}")
                return None if default is ... else default
        return val


_NUM = (int, float)


def _profile(c, doc, taxonomy, where):
    if taxonomy is None or not isinstance(doc, dict):
        c.add(f"{where}: expected a profile object")
        return None
    tid = doc.get("taxonomy_id", taxonomy.id)
    if tid != taxonomy.id:
        c.add(f"{where}.taxonomy_id: dangling reference {tid!r}")
        return None
    try:
        return SkillProfile(taxonomy, tuple(doc.get("radii", ())))
    except (InvalidProfileError, TypeError, ValueError) as exc:
        c.add(f"{where}.radii: {exc}")
        return None


def config_from_dict(doc: dict) -> ScenarioConfig:
    c = _Collector()
    if not isinstance(doc, dict):
        raise ScenarioError("scenario must be a JSON object")
    if doc.get("schema", SCHEMA) != SCHEMA:
        c.add(f"schema: unsupported {doc.get('schema')!r}, expected {SCHEMA}")
    seed = c.get(doc, "seed", "scenario", int)
    if seed is not None and not 0 <= seed < 2**64:
        c.add("scenario.seed: must be a 64-bit unsigned integer")
    horizon = c.get(doc, "horizon", "scenario", int)
    if horizon is not None and horizon < 1:
        c.add("scenario.horizon: must be >= 1")

    taxonomy = None
    tdoc = c.get(doc, "taxonomy", "scenario", dict)
    if tdoc is not None:
        try:
            taxonomy = SkillTaxonomy(tuple(tdoc.get("skills", ())), id=str(tdoc.get("id", "default")))
        except InvalidTaxonomyError as exc:
            c.add(f"taxonomy: {exc}")

    lexicon = Lexicon({})
    ldoc = c.get(doc, "lexicon", "scenario", dict, default={})
    if ldoc:
        lexicon = Lexicon({str(k): str(v) for k, v in ldoc.items()})

    pdoc = c.get(doc, "parameters", "scenario", dict, default={}) or {}
    defaults = Parameters()
    team_size = pdoc.get("team_size", list(defaults.team_size))
    if (not isinstance(team_size, (list, tuple)) or len(team_size) != 2
            or not all(isinstance(x, int) for x in team_size) or not 1 <= team_size[0] <= team_size[1]):
        c.add("parameters.team_size: expected [min, max] with 1 <= min <= max")
        team_size = defaults.team_size
    params = Parameters(
        tau=float(c.get(pdoc, "tau", "parameters", _NUM, defaults.tau)),
        patience=int(c.get(pdoc, "patience", "parameters", int, defaults.patience)),
        floor=float(c.get(pdoc, "floor", "parameters", _NUM, defaults.floor)),
        team_size=tuple(team_size),
        per_capita=bool(c.get(pdoc, "per_capita", "parameters", bool, defaults.per_capita)),
        quorum=c.get(pdoc, "quorum", "parameters", _NUM, defaults.quorum),
        search_cap=int(c.get(pdoc, "search_cap", "parameters", int, defaults.search_cap)),
    )
    if params.tau < 0:
        c.add("parameters.tau: must be >= 0")
    if params.patience < 1:
        c.add("parameters.patience: must be >= 1")
    if not 0 < params.floor < 0.5:
        c.add("parameters.floor: must lie in (0, 0.5)")

    agents = []
    for i, a in enumerate(c.get(doc, "agents", "scenario", list) or []):
        where = f"agents[{i}]"
        aid = c.get(a, "id", where, str)
        role = c.get(a, "role", where, str)
        if role is not None and role not in ROLES:
            c.add(f"{where}.role: unknown role {role!r}")
            continue
        if aid is None or role is None:
            continue
        if role == "researcher":
            prof = _profile(c, a.get("profile"), taxonomy, f"{where}.profile")
            spec = AgentSpec(
                aid, role, prof,
                reservation_price=float(c.get(a, "reservation_price", where, _NUM, 0.0)),
                balance=float(c.get(a, "balance", where, _NUM, 0.0)),
                delivery=c.get(a, "delivery", where, str, "honest"),
            )
            if spec.delivery not in ("honest", "faulty"):
                c.add(f"{where}.delivery: expected honest or faulty")
        else:
            spec = AgentSpec(
                aid, role,
                capital=float(c.get(a, "capital", where, _NUM, 0.0)),
                balance=float(c.get(a, "balance", where, _NUM, 0.0)),
                stake=float(c.get(a, "stake", where, _NUM, 1.0)),
                belief_policy=c.get(a, "belief_policy", where, str, "posterior-follower"),
                vote_policy=c.get(a, "vote_policy", where, str, "cooperative"),
                noise=float(c.get(a, "noise", where, _NUM, 0.0)),
                abandon_after=int(c.get(a, "abandon_after", where, int, 1)),
                delivery=c.get(a, "delivery", where, str, "honest"),
            )
            if spec.belief_policy not in BELIEF_POLICIES:
                c.add(f"{where}.belief_policy: unknown policy {spec.belief_policy!r}")
            if spec.vote_policy not in VOTE_POLICIES:
                c.add(f"{where}.vote_policy: unknown policy {spec.vote_policy!r}")
            if spec.stake < 0 or spec.capital < 0:
                c.add(f"{where}: stake and capital must be >= 0")
        if spec.balance < 0 or spec.reservation_price < 0:
            c.add(f"{where}: balances and prices must be >= 0")
        agents.append(spec)
    ids = [a.id for a in agents]
    dupes = sorted({x for x in ids if ids.count(x) > 1})
    if dupes:
        c.add(f"agents: duplicate ids {dupes}")
    if "protocol" in ids:
        c.add("agents: id 'protocol' is reserved")
    known = set(ids)

    projects = []
    for i, p in enumerate(c.get(doc, "projects", "scenario", list, default=[]) or []):
        where = f"projects[{i}]"
        pid = c.get(p, "id", where, str)
        req = _profile(c, p.get("requirement") if isinstance(p, dict) else None, taxonomy,
                       f"{where}.requirement")
        budget = []
        for j, b in enumerate(c.get(p, "budget", where, list) or []):
            label = c.get(b, "label", f"{where}.budget[{j}]", str)
            amount = c.get(b, "amount", f"{where}.budget[{j}]", _NUM)
            if label is not None and amount is not None:
                budget.append(BudgetItem(label, float(amount)))
        miles = []
        for j, m in enumerate(c.get(p, "milestones", where, list) or []):
            w = f"{where}.milestones[{j}]"
            amount = c.get(m, "amount", w, _NUM)
            deadline = c.get(m, "deadline", w, int, 0)
            if amount is not None:
                miles.append(MilestoneSpec(str(m.get("description", f"milestone {j}")),
                                           float(amount), int(deadline or 0)))
        for ref in (p.get("team", []) if isinstance(p, dict) else []):
            if ref not in known:
                c.add(f"{where}.team: dangling reference {ref!r}")
        if pid is None or req is None:
            continue
        projects.append(ProjectSpec(
            pid, req, tuple(budget), tuple(miles),
            title=str(p.get("title", pid)),
            introduction=str(p.get("introduction", "")),
            literature_review=str(p.get("literature_review", "")),
            methodology=str(p.get("methodology", "")),
        ))

    listings = []
    for i, item in enumerate(c.get(doc, "listings", "scenario", list, default=[]) or []):
        where = f"listings[{i}]"
        lid = c.get(item, "id", where, str)
        owner = c.get(item, "owner", where, str)
        if owner is not None and owner not in known:
            c.add(f"{where}.owner: dangling reference {owner!r}")
        tags = tuple(c.get(item, "tags", where, list) or ())
        for t in tags:
            if t not in lexicon:
                c.add(f"{where}.tags: {t!r} is not in the lexicon")
        if lid is None or owner is None:
            continue
        listings.append(ListingSpec(
            lid, owner, tags, str(c.get(item, "payload", where, str) or ""),
            float(c.get(item, "ask_price", where, _NUM, 0.0)),
            str(item.get("description", "")),
        ))
    listing_ids = {x.id for x in listings}

    desiderata = []
    for i, d in enumerate(c.get(doc, "desiderata", "scenario", list, default=[]) or []):
        where = f"desiderata[{i}]"
        agent = c.get(d, "agent", where, str)
        if agent is not None and agent not in known:
            c.add(f"{where}.agent: dangling reference {agent!r}")
        listing = d.get("listing") if isinstance(d, dict) else None
        if listing is not None and listing not in listing_ids:
            c.add(f"{where}.listing: dangling reference {listing!r}")
        tags = tuple(c.get(d, "tags", where, list) or ())
        for t in tags:
            if t not in lexicon:
                c.add(f"{where}.tags: {t!r} is not in the lexicon")
        try:
            desiderata.append(Desideratum(
                id=str(c.get(d, "id", where, str)), agent=str(agent), kind=c.get(d, "kind", where, str),
                tags=tags, quantity=c.get(d, "quantity", where, int, 1),
                price_bounds=tuple(c.get(d, "price", where, list) or (0, -1)),
                deadline=c.get(d, "deadline", where, int), listing_id=listing,
            ))
        except Exception as exc:  # any malformed field becomes one more problem
            c.add(f"{where}: {exc}")

    if desiderata and len(lexicon.terms) < 3:
        c.add("lexicon: matching desiderata needs at least 3 terms")
    if c.problems:
        raise ScenarioError(c.problems)
    return ScenarioConfig(
        seed=seed, horizon=horizon, taxonomy=taxonomy, lexicon=lexicon,
        agents=tuple(agents), projects=tuple(projects), listings=tuple(listings),
        desiderata=tuple(desiderata), params=params,
    )


def load_scenario(path) -> ScenarioConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return config_from_dict(doc)


def _profile_dict(p: SkillProfile) -> dict:
    return {"taxonomy_id": p.taxonomy.id, "radii": list(p.radii)}


def config_to_dict(cfg: ScenarioConfig) -> dict:
    agents = []
    for a in cfg.agents:
        if a.role == "researcher":
            agents.append({"id": a.id, "role": a.role, "profile": _profile_dict(a.profile),
                           "reservation_price": a.reservation_price, "balance": a.balance,
                           "delivery": a.delivery})
        else:
            agents.append({"id": a.id, "role": a.role, "capital": a.capital, "balance": a.balance,
                           "stake": a.stake, "belief_policy": a.belief_policy,
                           "vote_policy": a.vote_policy, "noise": a.noise,
                           "abandon_after": a.abandon_after, "delivery": a.delivery})
    return {
        "schema": SCHEMA,
        "seed": cfg.seed,
        "horizon": cfg.horizon,
        "taxonomy": {"id": cfg.taxonomy.id, "skills": list(cfg.taxonomy.skills)},
        "lexicon": dict(cfg.lexicon.terms),
        "parameters": {"tau": cfg.params.tau, "patience": cfg.params.patience,
                       "floor": cfg.params.floor, "team_size": list(cfg.params.team_size),
                       "per_capita": cfg.params.per_capita, "quorum": cfg.params.quorum,
                       "search_cap": cfg.params.search_cap},
        "agents": agents,
        "projects": [
            {"id": p.id, "title": p.title, "introduction": p.introduction,
             "literature_review": p.literature_review, "methodology": p.methodology,
             "requirement": _profile_dict(p.requirement),
             "budget": [{"label": b.label, "amount": b.amount} for b in p.budget],
             "milestones": [{"description": m.description, "amount": m.amount,
                             "deadline": m.deadline} for m in p.milestones]}
            for p in cfg.projects
        ],
        "listings": [
            {"id": x.id, "owner": x.owner, "tags": list(x.tags), "payload": x.payload,
             "ask_price": x.ask_price, "description": x.description}
            for x in cfg.listings
        ],
        "desiderata": [
            {"id": d.id, "agent": d.agent, "kind": d.kind, "tags": list(d.tags),
             "quantity": d.quantity, "price": list(d.price_bounds), "deadline": d.deadline,
             "listing": d.listing_id}
            for d in cfg.desiderata
        ],
    }


def bundled_scenarios() -> dict[str, Path]:
    root = Path(__file__).resolve().parent.parent / "scenarios"
    return {p.stem: p for p in sorted(root.glob("*.json"))}
