"""Random but valid scenarios for property tests and stress runs."""

from __future__ import annotations

import numpy as np

from .scenario import BELIEF_POLICIES, SCHEMA, ScenarioConfig, config_from_dict

_TERMS = ("dataset", "protocol", "survey", "simulation", "code", "notes")


def random_scenario_dict(seed: int, *, max_researchers: int = 7, max_investors: int = 3,
                         max_projects: int = 3) -> dict:
    rng = np.random.default_rng(seed)
    k = int(rng.integers(3, 6))
    skills = [f"s{i}" for i in range(k)]

    def radii():
        r = rng.integers(0, 4, size=k)
        if r.max() == 0:
            r[int(rng.integers(k))] = 1
        return [int(x) for x in r]

    n_res = int(rng.integers(2, max_researchers + 1))
    n_inv = int(rng.integers(1, max_investors + 1))
    agents = []
    for i in range(n_res):
        agents.append({
            "id": f"r{i:02d}", "role": "researcher",
            "profile": {"taxonomy_id": "rand", "radii": radii()},
            "reservation_price": float(rng.choice([0, 100, 400])),
            "balance": float(rng.integers(0, 200)),
            "delivery": "faulty" if rng.random() < 0.2 else "honest",
        })
    for i in range(n_inv):
        agents.append({
            "id": f"dao{i}", "role": "investor",
            "capital": float(rng.integers(500, 5000)),
            "stake": float(rng.integers(1, 100)),
            "belief_policy": str(rng.choice(BELIEF_POLICIES)),
            "vote_policy": str(rng.choice(["cooperative", "cooperative", "critical", "abandoning"])),
            "noise": float(rng.uniform(0, 1)),
            "abandon_after": int(rng.integers(0, 4)),
        })

    projects = []
    for j in range(int(rng.integers(1, max_projects + 1))):
        amounts = [float(a) for a in rng.integers(50, 500, size=int(rng.integers(1, 4)))]
        total = sum(amounts)
        projects.append({
            "id": f"p{j}", "title": f"project {j}", "introduction": "why",
            "literature_review": "prior work", "methodology": "how",
            "requirement": {"taxonomy_id": "rand", "radii": radii()},
            "budget": [{"label": "staff", "amount": total}],
            "milestones": [{"description": f"m{i}", "amount": a, "deadline": int(rng.integers(0, 4))}
                           for i, a in enumerate(amounts)],
        })

    listings, desiderata = [], []
    for i in range(int(rng.integers(0, n_res + 1))):
        owner = f"r{i:02d}"
        tags = sorted({str(t) for t in rng.choice(_TERMS, size=int(rng.integers(1, 3)))})
        ask = float(rng.integers(5, 80))
        listings.append({"id": f"L{i}", "owner": owner, "tags": tags, "payload": f"payload {seed} {i}",
                         "ask_price": ask, "description": ""})
        desiderata.append({"id": f"o{i}", "agent": owner, "kind": "offer", "tags": tags, "quantity": 1,
                           "price": [ask * 0.5, ask * 1.5], "deadline": int(rng.integers(0, 4)),
                           "listing": f"L{i}"})
    for i in range(int(rng.integers(0, 4))):
        tags = sorted({str(t) for t in rng.choice(_TERMS, size=int(rng.integers(1, 3)))})
        desiderata.append({"id": f"q{i}", "agent": f"dao{int(rng.integers(n_inv))}", "kind": "request",
                           "tags": tags, "quantity": 1, "price": [0.0, float(rng.integers(20, 120))],
                           "deadline": int(rng.integers(2, 8)), "listing": None})

    lo = int(rng.integers(1, 3))
    return {
        "schema": SCHEMA, "seed": int(seed), "horizon": int(rng.integers(4, 12)),
        "taxonomy": {"id": "rand", "skills": skills},
        "lexicon": {t: t for t in _TERMS},
        "parameters": {"tau": float(rng.choice([0.01, 0.1, 0.5])), "patience": int(rng.integers(1, 4)),
                       "floor": 0.01, "team_size": [lo, lo + int(rng.integers(0, 3))],
                       "per_capita": bool(rng.random() < 0.3), "quorum": None, "search_cap": 8},
        "agents": agents, "projects": projects, "listings": listings, "desiderata": desiderata,
    }


def random_scenario(seed: int, **kwargs) -> ScenarioConfig:
    return config_from_dict(random_scenario_dict(seed, **kwargs))
