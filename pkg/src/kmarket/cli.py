"""Command line entry point.

Exit codes: 0 success, 1 invalid input (unreadable or malformed files,
failed validation), 2 verification failure (a chain that does not verify or
a replay that disagrees with the recorded state).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .errors import DecodeError, MarketError, ScenarioError
from .inference import build_team_model, marginal_evidence, stable_subgroup_search
from .ledger import MAGIC, Chain, verify_chain
from .replay import replay_chain
from .sim.engine import run as run_scenario
from .sim.metrics import emit_report, load_report
from .sim.scenario import load_scenario
from .skill_space import SkillProfile, SkillTaxonomy

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_VERIFY = 2

STATE_SCHEMA = "kmarket-governance-state/1"
EVENTS_SCHEMA = "kmarket-events/1"
MATCH_PROJECT_SCHEMA = "kmarket-match-project/1"
MATCH_AGENTS_SCHEMA = "kmarket-match-agents/1"


class _Invalid(Exception):
    pass


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _read_json(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise _Invalid(f"cannot read {path}: {exc.strerror}") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise _Invalid(f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None


def _load_chain(path) -> Chain:
    """Read a chain in either the JSON-lines export or the binary format."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise _Invalid(f"cannot read {path}: {exc.strerror}") from None
    if data.startswith(MAGIC):
        return Chain.from_bytes(data)
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError:
        raise DecodeError("chain file is neither JSON lines nor the binary format") from None
    return Chain.from_jsonl(text)


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def cmd_simulate(args) -> int:
    config = load_scenario(args.scenario)
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise _Invalid("--seed must be a 64-bit unsigned integer")
        config = dataclasses.replace(config, seed=args.seed)
    result = run_scenario(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.chain.save(out / "chain.jsonl")
    emit_report(result.metrics, "structured", out / "metrics.json")
    header = {"format": EVENTS_SCHEMA, "seed": config.seed, "horizon": config.horizon}
    _write(out / "events.jsonl", "".join(
        json.dumps(e, sort_keys=True, separators=(",", ":")) + "\n" for e in [header, *result.events]
    ))
    _write(out / "governance_state.json",
           json.dumps({"schema": STATE_SCHEMA, **result.state}, indent=2, sort_keys=True) + "\n")
    print(emit_report(result.metrics, "table"), end="")
    print(f"wrote {out}/chain.jsonl ({len(result.chain)} blocks), metrics.json, events.jsonl, "
          "governance_state.json")
    return EXIT_OK


def cmd_ledger_verify(args) -> int:
    try:
        chain = _load_chain(args.chain)
    except DecodeError as exc:
        print(f"FAIL: cannot decode chain: {exc}")
        return EXIT_VERIFY
    report = verify_chain(chain)
    n_tx = sum(len(b.transactions) for b in chain.blocks)
    if report.ok:
        print(f"OK: {len(chain)} blocks, {n_tx} transactions, head {chain.head_hash.hex()}")
        return EXIT_OK
    print(f"FAIL: {report}")
    return EXIT_VERIFY


def cmd_govern_replay(args) -> int:
    try:
        chain = _load_chain(args.chain)
    except DecodeError as exc:
        print(f"FAIL: cannot decode chain: {exc}")
        return EXIT_VERIFY
    report = verify_chain(chain)
    if not report.ok:
        print(f"FAIL: chain does not verify: {report}")
        return EXIT_VERIFY
    result = replay_chain(chain)
    state_path = Path(args.state) if args.state else Path(args.chain).with_name("governance_state.json")
    recorded = None
    if args.state or state_path.exists():
        recorded = _read_json(state_path)
        if recorded.get("schema") != STATE_SCHEMA:
            raise _Invalid(f"{state_path}: expected schema {STATE_SCHEMA}")
        recorded = {k: v for k, v in recorded.items() if k != "schema"}
    print(json.dumps(result.state, indent=2, sort_keys=True))
    failed = False
    for v in result.violations:
        print(f"violation: {v}")
        failed = True
    if recorded is not None:
        if recorded == result.state:
            print(f"OK: replayed state matches {state_path}")
        else:
            failed = True
            for key in sorted(set(recorded) | set(result.state)):
                a, b = recorded.get(key), result.state.get(key)
                if a != b:
                    print(f"mismatch in {key}: recorded {json.dumps(a, sort_keys=True)} "
                          f"replayed {json.dumps(b, sort_keys=True)}")
    return EXIT_VERIFY if failed else EXIT_OK


def _taxonomy(doc, where) -> SkillTaxonomy:
    t = doc.get("taxonomy")
    if not isinstance(t, dict):
        raise _Invalid(f"{where}: missing taxonomy")
    return SkillTaxonomy(tuple(t.get("skills", ())), id=str(t.get("id", "default")))


def cmd_match(args) -> int:
    pdoc = _read_json(args.project)
    adoc = _read_json(args.agents)
    if pdoc.get("schema") != MATCH_PROJECT_SCHEMA:
        raise _Invalid(f"{args.project}: expected schema {MATCH_PROJECT_SCHEMA}")
    if adoc.get("schema") != MATCH_AGENTS_SCHEMA:
        raise _Invalid(f"{args.agents}: expected schema {MATCH_AGENTS_SCHEMA}")
    taxonomy = _taxonomy(pdoc, args.project)
    if _taxonomy(adoc, args.agents) != taxonomy:
        raise _Invalid("project and agents files use different taxonomies")
    reqs = pdoc.get("requirements")
    if not isinstance(reqs, list) or not reqs:
        raise _Invalid(f"{args.project}: 'requirements' must be a non-empty list of radius lists")
    projects = [SkillProfile(taxonomy, tuple(r)) for r in reqs]
    agents = [(str(a["id"]), SkillProfile(taxonomy, tuple(a["radii"]))) for a in adoc.get("agents", [])]
    config = stable_subgroup_search(
        projects if len(projects) > 1 else projects[0], agents, mode=args.mode,
        floor=float(pdoc.get("floor", 0.01)), cap=args.cap,
        min_part=int(pdoc.get("min_part", 2)), max_part=pdoc.get("max_part"),
    )
    print(json.dumps({
        "mode": args.mode,
        "partition": list(config.partition),
        "groups": [list(g) for g in config.groups],
        "sub_projects": list(config.projects),
        "group_free_energies": list(config.group_free_energies),
        "total_free_energy": config.total_free_energy,
    }, indent=2))
    return EXIT_OK


def cmd_inspect_model(args) -> int:
    config = load_scenario(args.scenario)
    try:
        project = config.project(args.project_id)
    except KeyError:
        raise _Invalid(f"unknown project {args.project_id!r}") from None
    cands = [(a.id, a.profile) for a in config.researchers]
    model = build_team_model(project.requirement, cands, config.params.team_size, config.params.floor)
    print(json.dumps({
        "project": project.id,
        "aims": list(model.aims),
        "evidence": {aim: marginal_evidence(model, aim) for aim in model.aims},
        "states": [{"team": list(s), "joint": [float(x) for x in row]}
                   for s, row in zip(model.states, model.joint)],
    }, indent=2))
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        metrics = load_report(args.metrics)
    except OSError as exc:
        raise _Invalid(f"cannot read {args.metrics}: {exc.strerror}") from None
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise _Invalid(f"{args.metrics}: {exc}") from None
    text = emit_report(metrics, args.format, args.out)
    if args.out is None:
        print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kmarket", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a scenario and write chain, metrics and events")
    s.add_argument("scenario")
    s.add_argument("--seed", type=int, help="override the scenario seed")
    s.add_argument("--out", default="out", help="output directory (default: out)")
    s.set_defaults(func=cmd_simulate)

    led = sub.add_parser("ledger", help="ledger tools").add_subparsers(dest="ledger_cmd", required=True)
    v = led.add_parser("verify", help="verify a chain file")
    v.add_argument("chain")
    v.set_defaults(func=cmd_ledger_verify)

    gov = sub.add_parser("govern", help="governance tools").add_subparsers(dest="govern_cmd", required=True)
    r = gov.add_parser("replay", help="re-derive governance state from a chain")
    r.add_argument("chain")
    r.add_argument("--state", help="recorded state to compare with (default: governance_state.json "
                                   "next to the chain, if present)")
    r.set_defaults(func=cmd_govern_replay)

    m = sub.add_parser("match", help="stable sub-group search for a project and agents")
    m.add_argument("--project", required=True)
    m.add_argument("--agents", required=True)
    m.add_argument("--mode", choices=("exhaustive", "greedy"), default="exhaustive")
    m.add_argument("--cap", type=int, default=10, help="largest agent count for exhaustive mode")
    m.set_defaults(func=cmd_match)

    i = sub.add_parser("inspect-model", help="dump a project's team model")
    i.add_argument("scenario")
    i.add_argument("project_id")
    i.set_defaults(func=cmd_inspect_model)

    rep = sub.add_parser("report", help="render a metrics file")
    rep.add_argument("metrics")
    rep.add_argument("--format", choices=("table", "structured"), default="table")
    rep.add_argument("--out", help="write to this path instead of standard output")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ScenarioError as exc:
        for problem in exc.problems:
            _err(problem)
        return EXIT_INVALID
    except (_Invalid, MarketError, KeyError, TypeError, ValueError) as exc:
        _err(str(exc))
        return EXIT_INVALID
    except OSError as exc:
        _err(f"{exc.filename}: {exc.strerror}")
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
