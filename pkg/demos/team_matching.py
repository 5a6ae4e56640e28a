"""Split four researchers into teams for a two-part project.

Two researchers cover the statistics half of the project and two cover the
biology half.  The exhaustive search pairs them accordingly; the greedy mode
is shown alongside for comparison.
"""

from kmarket.inference import exact_posterior, build_team_model, stable_subgroup_search
from kmarket.skill_space import SkillTaxonomy, cooperation_fit, team_profile

tax = SkillTaxonomy(("stats", "ml", "genomics", "wetlab"), id="demo")
agents = {
    "s1": tax.profile((3, 0, 0, 0)),
    "s2": tax.profile((0, 3, 0, 0)),
    "b1": tax.profile((0, 0, 3, 0)),
    "b2": tax.profile((0, 0, 0, 3)),
}
halves = [tax.profile((3, 3, 0.2, 0.2)), tax.profile((0.2, 0.2, 3, 3))]

print("fit of each pair against each half")
for a, b in (("s1", "s2"), ("b1", "b2"), ("s1", "b1")):
    team = team_profile([agents[a], agents[b]])
    fits = ", ".join(f"{cooperation_fit(h, team):.3f}" for h in halves)
    print(f"  {a}+{b}: {fits}")

for mode in ("exhaustive", "greedy"):
    cfg = stable_subgroup_search(halves, agents, mode=mode)
    print(f"{mode:>10}: groups {cfg.groups} serve halves {cfg.projects}, "
          f"total free energy {cfg.total_free_energy:.4f}")

model = build_team_model(halves[0], sorted(agents.items()), (2, 2))
post = exact_posterior(model, model.aims[0])
best = sorted(zip(post.q, post.states), reverse=True)[:3]
print("most probable pairs for the statistics half:")
for p, team in best:
    print(f"  {team}: {p:.4f}")
