"""Run the cooperative and adversarial desk scenarios and compare their metrics."""

from kmarket.ledger import verify_chain
from kmarket.replay import replay_chain
from kmarket.sim import bundled_scenarios, emit_report, load_scenario, run

scenarios = bundled_scenarios()
for name in ("desk_cooperative", "desk_adversarial"):
    result = run(load_scenario(scenarios[name]))
    print(f"== {name}: {len(result.chain)} blocks, chain {verify_chain(result.chain)}")
    print(emit_report(result.metrics, "table"))
    replayed = replay_chain(result.chain)
    print("replayed state matches:", replayed.ok and replayed.state == result.state)
    for pid, pr in sorted(result.projects.items()):
        state = pr.proposal.state.value if pr.proposal is not None else "no proposal"
        print(f"  {pid}: {state}, paid {pr.paid:.2f}")
    print()
