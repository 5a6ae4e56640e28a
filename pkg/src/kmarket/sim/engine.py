"""Deterministic discrete-event loop binding matching, governance and settlement.

Each tick runs, in order: team matching, governance, knowledge settlement,
bookkeeping.  Agents act in ascending id order and the only source of
randomness is the seeded generator, so a config fully determines the chain.
Protocol errors become structured events (and ``RecordEvent`` transactions);
they never abort a run.
"""

from __future__ import annotations

import math
import statistics
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np

from ..accounts import Accounts
from ..errors import MarketError, UndefinedGiniError
from ..governance import (
    Ballot,
    ESCROW_FRACTION,
    DisputeState,
    DisputeStatus,
    EscrowAccount,
    Milestone,
    Proposal,
    ProposalState,
    RejectionReason,
    TeamMember,
    abandon,
    decide_proposal,
    disagreement_score,
    open_escrow,
    release_milestone,
    resolve_forfeit,
    resubmit,
    top_up,
    validate_and_submit,
)
from ..inference import (
    GenerativeModel,
    VariationalDistribution,
    exact_posterior,
    stable_subgroup_search,
)
from ..ledger import PROTOCOL, Chain, Identity, LedgerWriter, TxKind
from ..marketplace import ContractDoc, Marketplace, SettlementStatus, match_desiderata
from ..skill_space import STRENGTH_THRESHOLD, cooperation_fit, group_strength, team_profile
from .metrics import MetricsReport, gini
from .scenario import AgentSpec, ScenarioConfig

OUTCOME_STATES = ("on_track", "delayed", "failed")
REPORT_AIMS = ("reported_complete", "reported_incomplete")
# p(report complete | outcome state)
_REPORT_LIKELIHOOD = np.array([0.9, 0.4, 0.05])
# belief of an investor who expects the work to fail regardless of reports
_ADVERSARIAL_BELIEF = np.array([0.02, 0.08, 0.90])
_MAX_VERSIONS = 5
_CURRENCY_TOL = 1e-9


def milestone_model(fit: float, floor: float) -> GenerativeModel:
    """Outcome model behind the researchers' progress report.

    Prior over (on track, delayed, failed) follows the team's fit; each state
    emits a completion report with a fixed likelihood.
    """
    f = min(max(fit, floor), 1.0 - floor)
    prior = np.array([f, 0.7 * (1.0 - f), 0.3 * (1.0 - f)])
    joint = np.column_stack([prior * _REPORT_LIKELIHOOD, prior * (1.0 - _REPORT_LIKELIHOOD)])
    return GenerativeModel(OUTCOME_STATES, REPORT_AIMS, joint)


def form_belief(agent: AgentSpec, model: GenerativeModel, rng: np.random.Generator) -> VariationalDistribution:
    post = exact_posterior(model, REPORT_AIMS[0])
    if agent.belief_policy == "posterior-follower":
        return post
    if agent.belief_policy == "noisy":
        z = rng.standard_normal(len(post.q))
        w = post.q * np.exp(agent.noise * z)
        return VariationalDistribution(post.states, w / w.sum())
    return VariationalDistribution(post.states, _ADVERSARIAL_BELIEF / _ADVERSARIAL_BELIEF.sum())


@dataclass
class ProjectRun:
    spec: object
    team: tuple[str, ...] = ()
    fit: float = 0.0
    proposal: Proposal | None = None
    escrow: EscrowAccount | None = None
    dispute: DisputeState | None = None
    submitted_tick: int | None = None
    funded_tick: int | None = None
    paid: float = 0.0  # researcher receipts from this project's escrow
    rejected_tick: int | None = None
    abandon_tried: bool = False
    failed: bool = False


@dataclass
class SimulationResult:
    chain: Chain
    metrics: MetricsReport
    events: list[dict]
    state: dict
    currency: list[float] = field(default_factory=list)
    accounts: Accounts | None = None
    projects: dict[str, ProjectRun] = field(default_factory=dict)


class Simulation:
    def __init__(self, config: ScenarioConfig):
        self.cfg = config
        self.params = config.params
        self.rng = np.random.default_rng(config.seed)
        self.writer = LedgerWriter()
        self.events: list[dict] = []
        self.tick = 0
        self.accounts = Accounts()
        self.agents = {a.id: a for a in config.agents}
        self.projects = {p.id: ProjectRun(p) for p in sorted(config.projects, key=lambda p: p.id)}
        self.market = Marketplace(config.lexicon, self.writer)
        self.open_requests: list = []
        self.open_offers: list = []
        self.receipts: dict[str, float] = {a.id: 0.0 for a in config.researchers}
        self.currency: list[float] = []
        self._contracts = 0

    # -- bookkeeping ----------------------------------------------------------

    def event(self, kind: str, **data):
        rec = {"tick": self.tick, "kind": kind, **data}
        self.events.append(rec)
        return rec

    def error(self, phase: str, exc: Exception, **data):
        rec = self.event("error", phase=phase, error=type(exc).__name__, message=str(exc), **data)
        self.writer.record(TxKind.RECORD_EVENT, PROTOCOL, rec)

    def _setup(self):
        seed = self.cfg.seed
        self.writer.register(Identity.derive(PROTOCOL, seed), role="protocol")
        for a in sorted(self.cfg.agents, key=lambda a: a.id):
            self.writer.register(Identity.derive(a.id, seed), role=a.role)
            self.accounts.open(a.id, a.capital + a.balance)
        self.initial_currency = self.accounts.total()
        for spec in sorted(self.cfg.listings, key=lambda x: x.id):
            try:
                self.market.publish_listing(spec.owner, spec.tags, spec.payload.encode("utf-8"),
                                            spec.ask_price, spec.description, listing_id=spec.id)
            except MarketError as exc:
                self.error("setup", exc, listing=spec.id)
        for d in sorted(self.cfg.desiderata, key=lambda d: d.id):
            try:
                self.market.post_desideratum(d)
            except MarketError as exc:
                self.error("setup", exc, desideratum=d.id)
                continue
            (self.open_requests if d.kind == "request" else self.open_offers).append(d)

    # -- phase 1: matching ----------------------------------------------------

    def _busy(self) -> set[str]:
        return {a for run in self.projects.values() for a in run.team}

    def _match(self):
        busy = self._busy()
        open_runs = [r for r in self.projects.values() if not r.team and not r.failed]
        if not open_runs:
            return
        researchers = [a for a in self.cfg.researchers if a.id not in busy]
        triggered = []
        pools = {}
        for run in open_runs:
            pool = [a for a in researchers if a.reservation_price <= run.spec.promised]
            if not pool:
                continue
            try:
                strength = group_strength(run.spec.requirement, [a.profile for a in pool])
            except MarketError as exc:
                self.error("matching", exc, project=run.spec.id)
                run.failed = True
                continue
            if strength >= STRENGTH_THRESHOLD:
                triggered.append(run)
                pools[run.spec.id] = {a.id for a in pool}
        if not triggered:
            return
        lo, hi = self.params.team_size
        candidates = sorted(set().union(*pools.values()))
        if len(candidates) < lo:
            return
        chosen: dict[str, tuple[str, ...]] = {}
        if len(candidates) == 1:
            chosen[triggered[0].spec.id] = tuple(candidates)
        else:
            mode = "exhaustive" if len(candidates) <= self.params.search_cap else "greedy"
            try:
                config = stable_subgroup_search(
                    [r.spec.requirement for r in triggered],
                    [(a, self.agents[a].profile) for a in candidates],
                    mode=mode, floor=self.params.floor, cap=self.params.search_cap,
                    min_part=lo, max_part=hi,
                )
            except MarketError as exc:
                self.error("matching", exc, projects=[r.spec.id for r in triggered])
                return
            self.event("configuration", groups=[list(g) for g in config.groups],
                       projects=[triggered[j].spec.id for j in config.projects],
                       total_free_energy=config.total_free_energy, mode=mode)
            for j, run in enumerate(triggered):
                mine = [(config.group_free_energies[i], g) for i, g in enumerate(config.groups)
                        if config.projects[i] == j and set(g) <= pools[run.spec.id]]
                if mine:
                    chosen[run.spec.id] = min(mine)[1]
        for pid in sorted(chosen):
            self._form_team(self.projects[pid], chosen[pid])

    def _form_team(self, run: ProjectRun, team: tuple[str, ...]):
        run.team = tuple(sorted(team))
        run.fit = cooperation_fit(run.spec.requirement,
                                  team_profile([self.agents[a].profile for a in run.team]))
        rec = self.event("team_formed", project=run.spec.id, team=list(run.team), fit=run.fit)
        self.writer.record(TxKind.RECORD_EVENT, PROTOCOL, rec)
        spec = run.spec
        run.proposal = Proposal(
            id=spec.id, title=spec.title, introduction=spec.introduction,
            literature_review=spec.literature_review, methodology=spec.methodology,
            plan=[Milestone(i, m.description, m.amount, m.deadline) for i, m in enumerate(spec.milestones)],
            budget=list(spec.budget),
            team=[TeamMember.signed(self.writer.identities[a], f"curriculum vitae of {a}") for a in run.team],
        )
        try:
            validate_and_submit(run.proposal, self.writer.public_keys(), writer=self.writer)
            run.submitted_tick = self.tick
        except MarketError as exc:
            run.failed = True
            self.error("governance", exc, project=spec.id)

    # -- phase 2: governance --------------------------------------------------

    def _weight(self, investor: AgentSpec) -> float:
        return investor.stake

    def _proposal_ballots(self, proposal: Proposal) -> list[Ballot]:
        out = []
        for inv in self.cfg.investors:
            if inv.vote_policy == "critical" and proposal.version == 1:
                out.append(Ballot(inv.id, proposal.id, "no", self._weight(inv),
                                  RejectionReason("budget", "cost lines need justification")))
            else:
                out.append(Ballot(inv.id, proposal.id, "yes", self._weight(inv)))
        return out

    def _funders(self, run: ProjectRun) -> list[AgentSpec]:
        return [self.agents[a] for a in sorted(run.escrow.contributions)]

    def _pro_rata(self, investors, amount) -> dict[str, float]:
        total = math.fsum(i.stake for i in investors)
        if total <= 0:
            return {investors[0].id: amount}
        return {i.id: amount * i.stake / total for i in investors}

    def _fund(self, run: ProjectRun, yes_voters: list[AgentSpec]):
        p = run.proposal
        need = Fraction(p.promised) * ESCROW_FRACTION
        shares = self._pro_rata(yes_voters, float(need))
        # float shares may undershoot the exact minimum by a few ulps
        last = sorted(shares)[-1]
        while sum(map(Fraction, shares.values())) < need:
            shares[last] = float(np.nextafter(shares[last], math.inf))
        short = [a for a, v in shares.items() if self.accounts.balance(a) < v]
        if short:
            self.event("funding_delayed", project=p.id, short=short)
            return
        escrow_acct = f"escrow:{p.id}"
        try:
            run.escrow = open_escrow(p, shares, writer=self.writer)
        except MarketError as exc:
            self.error("governance", exc, project=p.id)
            return
        for a in sorted(shares):
            self.accounts.transfer(a, escrow_acct, shares[a])
        run.funded_tick = self.tick
        run.dispute = DisputeState(p.id, tau=self.params.tau, patience=self.params.patience)
        self.event("funded", project=p.id, deposit=run.escrow.deposited)

    def _pay_team(self, run: ProjectRun, amount: float):
        if amount <= 0:
            return
        run.paid += amount
        share = amount / len(run.team)
        for a in run.team:
            self.accounts.transfer(f"escrow:{run.proposal.id}", a, share)
            self.receipts[a] += share

    def _return_to_funders(self, run: ProjectRun, amount: float):
        if amount <= 0:
            return
        contrib = run.escrow.contributions
        total = math.fsum(contrib.values())
        names = sorted(contrib)
        paid = 0.0
        for a in names[:-1]:
            part = amount * contrib[a] / total
            self.accounts.transfer(f"escrow:{run.proposal.id}", a, part)
            paid += part
        self.accounts.transfer(f"escrow:{run.proposal.id}", names[-1], max(0.0, amount - paid))

    def _governance(self):
        for pid, run in self.projects.items():
            p = run.proposal
            if p is None or run.failed:
                continue
            try:
                if p.state is ProposalState.REJECTED and run.rejected_tick < self.tick:
                    if p.version >= _MAX_VERSIONS:
                        continue
                    flagged = {r.section for r in p.rejection_reasons}
                    revisions = self._revisions(p, flagged)
                    resubmit(p, revisions, self.writer.public_keys(), writer=self.writer)
                    self.event("resubmitted", project=pid, version=p.version)
                if p.state is ProposalState.SUBMITTED:
                    ballots = self._proposal_ballots(p)
                    result = decide_proposal(p, ballots, writer=self.writer,
                                             per_capita=self.params.per_capita, quorum=self.params.quorum)
                    self.event("proposal_vote", project=pid, version=p.version, outcome=result.outcome)
                    if not result.accepted:
                        run.rejected_tick = self.tick
                        continue
                if p.state is ProposalState.ACCEPTED:
                    voters = [self.agents[b.voter] for b in self._proposal_ballots(p) if b.choice == "yes"]
                    self._fund(run, voters or self.cfg.investors)
                elif p.state is ProposalState.FUNDED:
                    self._advance_funded(run)
            except MarketError as exc:
                self.error("governance", exc, project=pid)

    def _revisions(self, p: Proposal, flagged: set[str]) -> dict:
        rev = {}
        tag = f" (revised for v{p.version + 1})"
        if "budget" in flagged:
            rev["budget"] = [type(b)(b.label + tag, b.amount) for b in p.budget]
        for name in ("title", "introduction", "literature_review", "methodology"):
            if name in flagged:
                rev[name] = getattr(p, name) + tag
        if "plan" in flagged:
            rev["plan"] = [Milestone(m.index, m.description + tag, m.amount, m.deadline) for m in p.plan]
        if not rev:
            rev["methodology"] = p.methodology + tag
        return rev

    def _advance_funded(self, run: ProjectRun):
        p = run.proposal
        funders = self._funders(run)
        weight = {a.id: a.stake for a in funders}
        if not any(w > 0 for w in weight.values()):
            weight = {a.id: 1.0 for a in funders}

        abandoners = [a for a in funders if a.vote_policy == "abandoning"]
        if abandoners and not run.abandon_tried and self.tick >= run.funded_tick + min(
                a.abandon_after for a in abandoners):
            run.abandon_tried = True
            ballots = [Ballot(a.id, p.id, "yes" if a.vote_policy == "abandoning" else "no", weight[a.id])
                       for a in funders]
            before_released = run.escrow.released
            before_returned = run.escrow.returned
            result = abandon(p, run.escrow, ballots, writer=self.writer, per_capita=self.params.per_capita)
            self.event("abandon_vote", project=p.id, outcome=result.outcome)
            if result.accepted:
                self._pay_team(run, run.escrow.released - before_released)
                self._return_to_funders(run, run.escrow.returned - before_returned)
                return

        model = milestone_model(run.fit, self.params.floor)
        scores = {}
        for a in funders:
            belief = form_belief(a, model, self.rng)
            scores[a.id] = disagreement_score(belief, model, REPORT_AIMS[0])

        if run.dispute.status is DisputeStatus.FORFEIT_PROPOSED:
            ballots = [Ballot(a.id, p.id, "yes" if scores[a.id] > self.params.tau else "no", weight[a.id])
                       for a in funders]
            before = run.escrow.returned
            result = resolve_forfeit(p, run.escrow, run.dispute, ballots, writer=self.writer,
                                     per_capita=self.params.per_capita)
            self.event("forfeit_vote", project=p.id, outcome=result.outcome)
            if result.accepted:
                self._return_to_funders(run, run.escrow.returned - before)
                return

        m = p.next_milestone()
        if m is None or self.tick < run.funded_tick + m.deadline:
            return
        gap = run.escrow.released + m.amount - run.escrow.deposited
        if gap > _CURRENCY_TOL * max(1.0, run.escrow.promised):
            shares = self._pro_rata(funders, gap)
            short = [a for a, v in shares.items() if self.accounts.balance(a) < v]
            if short:
                self.event("top_up_delayed", project=p.id, short=short)
                return
            for a in sorted(shares):
                top_up(run.escrow, shares[a], a, writer=self.writer)
                self.accounts.transfer(a, f"escrow:{p.id}", shares[a])
        ballots = []
        for a in funders:
            if scores[a.id] <= self.params.tau:
                ballots.append(Ballot(a.id, p.id, "yes", weight[a.id]))
            else:
                ballots.append(Ballot(a.id, p.id, "no", weight[a.id],
                                      RejectionReason("methodology", "progress report disputed")))
        total_w = math.fsum(weight.values())
        mean_score = math.fsum(weight[a] * s for a, s in scores.items()) / total_w if total_w else 0.0
        before = run.escrow.released
        result = release_milestone(p, run.escrow, m, ballots, dispute=run.dispute,
                                   disagreement=mean_score, writer=self.writer,
                                   per_capita=self.params.per_capita)
        self.event("milestone_vote", project=p.id, milestone=m.index, outcome=result.outcome,
                   disagreement=mean_score if math.isfinite(mean_score) else "inf")
        self._pay_team(run, run.escrow.released - before)

    # -- phase 3: settlement --------------------------------------------------

    def _settle(self):
        if not self.open_requests or not self.open_offers:
            return
        try:
            matches = self.market_matches()
        except MarketError as exc:
            self.error("settlement", exc)
            return
        candidates = [m for m in matches if m.offer.deadline <= self.tick <= m.request.deadline]
        used_req, used_off = set(), set()
        for m in candidates:
            req, off = m.request, m.offer
            if req.id in used_req or off.id in used_off:
                continue
            listing = self.market.listings[off.listing_id]
            seller = self.market.owners[off.listing_id]
            if seller != off.agent:
                continue
            lo, hi = m.price_range
            price = min(max(listing.ask_price, lo), hi)
            if self.accounts.balance(req.agent) < price:
                continue
            used_req.add(req.id)
            used_off.add(off.id)
            cid = f"C{self._contracts:04d}"
            self._contracts += 1
            doc = ContractDoc(cid, req.agent, seller, listing.id, price,
                              {"request": req.id, "offer": off.id, "shipping": "n/a", "insurance": "n/a"})
            doc = doc.sign(self.writer.identities[req.agent]).sign(self.writer.identities[seller])
            try:
                self.market.form_contract(doc, self.writer.public_keys(), req.price_bounds)
                delivered = None
                if self.agents[seller].delivery == "faulty":
                    delivered = b"not the promised payload"
                rec = self.market.settle(cid, self.accounts, delivered=delivered)
                self.event("settlement", contract=cid, status=rec.status.value)
            except MarketError as exc:
                self.error("settlement", exc, contract=cid)
        self.open_requests = [d for d in self.open_requests if d.id not in used_req]
        self.open_offers = [d for d in self.open_offers if d.id not in used_off]

    def market_matches(self):
        return match_desiderata(self.open_requests, self.open_offers, self.cfg.lexicon)

    # -- loop -----------------------------------------------------------------

    def _check_currency(self):
        total = self.accounts.total()
        self.currency.append(total)
        if abs(total - self.initial_currency) > _CURRENCY_TOL * max(1.0, self.initial_currency):
            raise AssertionError(f"currency not conserved at tick {self.tick}: {total}")
        for run in self.projects.values():
            if run.escrow is not None:
                held = self.accounts.balance(f"escrow:{run.proposal.id}")
                assert abs(held - run.escrow.balance) <= _CURRENCY_TOL * max(1.0, run.escrow.promised)

    def run(self) -> SimulationResult:
        self._setup()
        for self.tick in range(self.cfg.horizon):
            self._match()
            self._governance()
            self._settle()
            self._check_currency()
            self.writer.commit(self.tick)
        return SimulationResult(
            chain=self.writer.chain,
            metrics=self.metrics(),
            events=self.events,
            state=self.state(),
            currency=self.currency,
            accounts=self.accounts,
            projects=self.projects,
        )

    def state(self) -> dict:
        proposals = {}
        for pid, run in self.projects.items():
            p = run.proposal
            if p is None or p.state is ProposalState.DRAFT:
                continue
            e = run.escrow
            proposals[pid] = {
                "state": p.state.value,
                "version": p.version,
                "promised": p.promised,
                "milestones": [m.state.value for m in p.plan],
                "deposited": e.deposited if e else 0.0,
                "released": e.released if e else 0.0,
                "returned": e.returned if e else 0.0,
                "dispute": run.dispute.status.value if run.dispute else DisputeStatus.NONE.value,
                "dispute_rounds": len(run.dispute.rounds) if run.dispute else 0,
            }
        return {
            "proposals": dict(sorted(proposals.items())),
            "settlements": {cid: rec.status.value for cid, rec in sorted(self.market.settlements.items())},
            "owners": dict(sorted(self.market.owners.items())),
        }

    def metrics(self) -> MetricsReport:
        runs = list(self.projects.values())
        funded = [r for r in runs if r.funded_tick is not None]
        teams = [r for r in runs if r.team]
        try:
            g = gini(list(self.receipts.values())) if self.receipts else 0.0
        except UndefinedGiniError:
            g = 0.0

        def rate(num, den):
            return num / den if den else 0.0

        settled = list(self.market.settlements.values())
        complete = sum(1 for s in settled if s.status is SettlementStatus.COMPLETE)
        finished = sum(1 for s in settled if s.status in (SettlementStatus.COMPLETE, SettlementStatus.REFUNDED))
        return MetricsReport(
            gini_funding=min(max(g, 0.0), 1.0),
            mean_match_fit=statistics.fmean([r.fit for r in teams]) if teams else 0.0,
            median_time_to_fund=(float(statistics.median([r.funded_tick - r.submitted_tick for r in funded]))
                                 if funded else None),
            dispute_rate=rate(sum(1 for r in funded if r.dispute.rounds), len(funded)),
            forfeit_rate=rate(sum(1 for r in funded if r.proposal.state is ProposalState.FORFEITED), len(funded)),
            abandonment_rate=rate(sum(1 for r in funded if r.proposal.state is ProposalState.ABANDONED),
                                  len(funded)),
            settlement_completion_rate=rate(complete, finished),
            teams_formed=len(teams),
            proposals_funded=len(funded),
            settlements=finished,
        )


def run(config: ScenarioConfig) -> SimulationResult:
    return Simulation(config).run()
