import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, precondition, rule

from kmarket.errors import (
    CostSheetError,
    DuplicateBallotError,
    EmptyElectorateError,
    GovernanceError,
    InsufficientDepositError,
    LiquidityError,
    MilestoneSumMismatchError,
    MissingReasonsError,
    MissingSectionError,
    OrderingError,
    QuorumError,
    StateError,
    UnaddressedFeedbackError,
    UnsignedCVError,
)
from kmarket.governance import (
    TRANSITIONS,
    Ballot,
    BudgetItem,
    DisputeState,
    DisputeStatus,
    FecCostSheet,
    Milestone,
    MilestoneState,
    Proposal,
    ProposalState,
    RejectionReason,
    TeamMember,
    VotingRound,
    abandon,
    abandonment_payout,
    decide_proposal,
    disagreement_score,
    escalate_dispute,
    fec_cost,
    guaranteed_minimum,
    open_escrow,
    proposal_from_dict,
    release_milestone,
    resolve_forfeit,
    resubmit,
    tally,
    top_up,
    validate_and_submit,
)
from kmarket.inference import GenerativeModel, VariationalDistribution, exact_posterior
from kmarket.ledger import Identity, LedgerWriter, TxKind, verify_chain
from kmarket.replay import replay_chain
from oracles import forfeit_window_oracle

ALICE = Identity.derive("alice", 0)
BOB = Identity.derive("bob", 0)
KEYS = {"alice": ALICE.public_bytes, "bob": BOB.public_bytes}


def make_proposal(milestones=(300.0, 300.0, 400.0), budget=None, pid="p1", **over):
    budget = [BudgetItem("all", float(sum(milestones)))] if budget is None else budget
    fields = dict(
        id=pid, title="Soil microbiome atlas", introduction="why", literature_review="prior work",
        methodology="sequencing",
        plan=[Milestone(i, f"m{i}", a, 2 * (i + 1)) for i, a in enumerate(milestones)],
        budget=budget,
        team=[TeamMember.signed(ALICE, "alice cv"), TeamMember.signed(BOB, "bob cv")],
    )
    fields.update(over)
    return Proposal(**fields)


def yes(voter, w):
    return Ballot(voter, "p1", "yes", w)


def no(voter, w, section="budget", text="too expensive"):
    return Ballot(voter, "p1", "no", w, RejectionReason(section, text))


def funded(milestones=(300.0, 300.0, 400.0), deposit=300.0):
    p = validate_and_submit(make_proposal(milestones), KEYS)
    decide_proposal(p, [yes("d1", 1)])
    return p, open_escrow(p, deposit, investor="d1")


# -- submission ----------------------------------------------------------------

def test_complete_proposal_is_submitted():
    p = validate_and_submit(make_proposal(), KEYS)
    assert p.state is ProposalState.SUBMITTED and p.version == 1


def test_missing_section_named():
    with pytest.raises(MissingSectionError) as info:
        validate_and_submit(make_proposal(methodology="  "), KEYS)
    assert info.value.section == "methodology"
    with pytest.raises(MissingSectionError):
        validate_and_submit(make_proposal(team=[]), KEYS)


def test_milestone_sum_mismatch():
    p = make_proposal((300.0, 300.0, 300.0), budget=[BudgetItem("all", 1000.0)])
    with pytest.raises(MilestoneSumMismatchError):
        validate_and_submit(p, KEYS)
    assert p.state is ProposalState.DRAFT


def test_unsigned_cv():
    with pytest.raises(UnsignedCVError):
        validate_and_submit(make_proposal(team=[TeamMember("alice", b"\x00" * 32)]), KEYS)
    forged = TeamMember("alice", TeamMember.signed(ALICE, "cv").cv_digest, BOB.sign(b"x" * 32))
    with pytest.raises(UnsignedCVError):
        validate_and_submit(make_proposal(team=[forged]), KEYS)


def test_template_document_loader():
    doc = {"id": "px", "title": "t", "introduction": "i", "literature_review": "l", "methodology": "m",
           "plan": [{"description": "a", "amount": 40, "deadline": 3}, {"amount": 60}],
           "budget": [{"label": "pay", "amount": 100}],
           "team": [{"agent": "alice", "cv": "alice cv"}]}
    p = proposal_from_dict(doc, {"alice": ALICE})
    assert p.promised == 100.0 and [m.index for m in p.plan] == [0, 1]
    assert validate_and_submit(p, KEYS).state is ProposalState.SUBMITTED


# -- tally -----------------------------------------------------------------------

def test_tally_examples():
    assert tally([yes("a", 51), no("b", 49)]).accepted
    r = tally([yes("a", 50), no("b", 50)])
    assert not r.accepted and r.reasons == (RejectionReason("budget", "too expensive"),)
    assert tally([yes("a", 1)]).accepted


@pytest.mark.parametrize("scale", [1, 3, 2**-10, 2**20, 1000])
def test_tally_boundary(scale):
    assert tally([yes("a", 5100 * scale), no("b", 4900 * scale)]).accepted
    r = tally([yes("a", 5099 * scale), no("b", 4901 * scale)])
    assert not r.accepted and r.reasons


def test_tally_errors():
    with pytest.raises(EmptyElectorateError):
        tally([yes("a", 0), no("b", 0)])
    with pytest.raises(EmptyElectorateError):
        tally([])
    with pytest.raises(MissingReasonsError):
        tally([yes("a", 1), Ballot("b", "p1", "no", 3)])
    with pytest.raises(DuplicateBallotError):
        tally([yes("a", 1), no("a", 1)])
    with pytest.raises(QuorumError):
        tally([yes("a", 1)], quorum=5)
    with pytest.raises(ValueError):
        Ballot("a", "p1", "maybe", 1)


def test_per_capita_mode():
    ballots = [yes("a", 1), yes("b", 1), no("c", 100)]
    assert not tally(ballots).accepted
    assert tally(ballots, per_capita=True).accepted


def test_voting_round_rejects_second_ballot():
    rnd = VotingRound("p1")
    rnd.cast(yes("a", 1))
    with pytest.raises(DuplicateBallotError):
        rnd.cast(no("a", 1))
    with pytest.raises(GovernanceError):
        rnd.cast(Ballot("b", "p2", "yes", 1))


@settings(max_examples=300)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 10**6)), min_size=1, max_size=8),
       st.one_of(st.integers(1, 10**6), st.sampled_from([2.0**k for k in range(-20, 21)])))
def test_tally_scale_invariance(votes, c):
    # integer weights times an integer or a power of two stay exact in binary floating point
    if sum(w for _, w in votes) == 0:
        return
    ballots = [yes(f"v{i}", w) if y else no(f"v{i}", w) for i, (y, w) in enumerate(votes)]
    scaled = [Ballot(b.voter, b.proposal_id, b.choice, b.weight * c, b.reason) for b in ballots]
    assert tally(ballots, require_reasons=False).accepted == tally(scaled, require_reasons=False).accepted


@settings(max_examples=300)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 1000)), min_size=1, max_size=8))
def test_tally_matches_integer_oracle(votes):
    total = sum(w for _, w in votes)
    if total == 0:
        return
    y = sum(w for b, w in votes if b)
    ballots = [yes(f"v{i}", w) if b else no(f"v{i}", w) for i, (b, w) in enumerate(votes)]
    assert tally(ballots, require_reasons=False).accepted == (100 * y >= 51 * total)


# -- resubmission ----------------------------------------------------------------

def rejected(p=None):
    p = validate_and_submit(p or make_proposal(), KEYS) if p is None or p.state is ProposalState.DRAFT else p
    decide_proposal(p, [yes("a", 40), no("b", 60)])
    assert p.state is ProposalState.REJECTED
    return p


def test_resubmit_with_budget_revision():
    p = rejected()
    new_plan = [Milestone(i, m.description, m.amount * 0.9, m.deadline) for i, m in enumerate(p.plan)]
    resubmit(p, {"budget": [BudgetItem("all", 900.0)], "plan": new_plan}, KEYS)
    assert p.state is ProposalState.SUBMITTED and p.version == 2
    assert p.history[0]["reasons"] == [("budget", "too expensive")]


def test_resubmit_without_addressing_feedback():
    p = rejected()
    with pytest.raises(UnaddressedFeedbackError):
        resubmit(p, {"title": "A new title"}, KEYS)
    assert p.state is ProposalState.REJECTED and p.version == 1


def test_resubmit_keeps_template_valid():
    p = rejected()
    with pytest.raises(MilestoneSumMismatchError):
        resubmit(p, {"budget": [BudgetItem("all", 5.0)]}, KEYS)
    assert p.promised == 1000.0


def test_three_cycles_reach_version_four():
    p = validate_and_submit(make_proposal(), KEYS)
    for cycle in range(3):
        rejected(p)
        resubmit(p, {"budget": [BudgetItem(f"v{cycle + 2}", 1000.0)]}, KEYS)
    assert p.version == 4 and len(p.history) == 3
    assert [h["version"] for h in p.history] == [1, 2, 3]
    decide_proposal(p, [yes("a", 1)])
    assert p.state is ProposalState.ACCEPTED


# -- escrow ----------------------------------------------------------------------

def accepted():
    p = validate_and_submit(make_proposal(), KEYS)
    decide_proposal(p, [yes("d", 1)])
    return p


def test_escrow_examples():
    p = accepted()
    e = open_escrow(p, 300.0)
    assert p.state is ProposalState.FUNDED and e.guaranteed_min == 300.0
    with pytest.raises(InsufficientDepositError) as info:
        open_escrow(accepted(), 299.0)
    assert info.value.shortfall == pytest.approx(1.0, abs=1e-12)
    e = open_escrow(accepted(), 1000.0)
    assert e.guaranteed_min == 300.0 and e.deposited == 1000.0
    with pytest.raises(GovernanceError):
        open_escrow(accepted(), 1000.5)


def test_escrow_minimum_is_exact():
    # 0.3 * promised computed in floating point can round either way; the rule is exact
    for promised in (0.1, 1 / 3, 7.7, 1e9 + 0.1, 123.456):
        p = accepted()
        p.plan = [Milestone(0, "all", promised, 1)]
        p.budget = [BudgetItem("all", promised)]
        need = Fraction(promised) * Fraction(3, 10)
        below = math.nextafter(float(need), 0.0) if Fraction(float(need)) >= need else float(need)
        with pytest.raises(InsufficientDepositError):
            open_escrow(p, below)
        ok = float(need) if Fraction(float(need)) >= need else math.nextafter(float(need), math.inf)
        assert open_escrow(p, ok).deposited == ok
        assert guaranteed_minimum(promised) == float(need)


def test_escrow_split_across_investors():
    e = open_escrow(accepted(), {"d1": 200.0, "d2": 100.0})
    assert e.contributions == {"d1": 200.0, "d2": 100.0}
    with pytest.raises(InsufficientDepositError):
        open_escrow(accepted(), {"d1": 200.0, "d2": 99.0})


def test_escrow_requires_accepted():
    p = validate_and_submit(make_proposal(), KEYS)
    with pytest.raises(StateError):
        open_escrow(p, 300.0)


# -- milestones ------------------------------------------------------------------

def test_release_in_order_and_liquidity():
    p, e = funded()
    with pytest.raises(OrderingError):
        release_milestone(p, e, p.plan[1], [yes("d1", 1)])
    release_milestone(p, e, p.plan[0], [yes("d1", 1)])
    assert e.released == 300.0 and p.plan[0].state is MilestoneState.RELEASED
    with pytest.raises(LiquidityError):
        release_milestone(p, e, p.plan[1], [yes("d1", 1)])
    top_up(e, 700.0, "d1")
    release_milestone(p, e, p.plan[1], [yes("d1", 1)])
    release_milestone(p, e, p.plan[2], [yes("d1", 1)])
    assert p.state is ProposalState.COMPLETED and e.released == e.deposited == 1000.0


def test_rejected_milestone_opens_dispute_round():
    p, e = funded()
    d = DisputeState("p1")
    release_milestone(p, e, p.plan[0], [no("d1", 1, "methodology", "no data")], dispute=d, disagreement=0.4)
    assert p.plan[0].state is MilestoneState.DISPUTED
    assert d.rounds == [0.4] and d.status is DisputeStatus.ESCALATING
    # a disputed milestone can be voted again
    release_milestone(p, e, p.plan[0], [yes("d1", 1)], dispute=d, disagreement=0.0)
    assert e.released == 300.0


# -- disputes ----------------------------------------------------------------------

TWO = GenerativeModel(("s1", "s2"), ("o", "not_o"), [[0.3, 0.25], [0.2, 0.25]])


def test_disagreement_score_examples():
    assert disagreement_score(exact_posterior(TWO, "o"), TWO, "o") == pytest.approx(0.0, abs=1e-12)
    got = disagreement_score(VariationalDistribution(TWO.states, [0.5, 0.5]), TWO, "o")
    assert got == pytest.approx(0.71356 - 0.69315, abs=1e-5)
    m = GenerativeModel(("a", "b"), ("o", "x"), [[0.5, 0.0], [0.0, 0.5]])
    assert disagreement_score(VariationalDistribution(m.states, [0.0, 1.0]), m, "o") == math.inf


def _escalate_all(scores, tau=0.1, patience=3):
    p, _ = funded()
    d = DisputeState("p1", tau=tau, patience=patience)
    for s in scores:
        escalate_dispute(p, d, s)
    return d


def test_escalation_examples():
    assert _escalate_all([0.2, 0.15, 0.12]).status is DisputeStatus.FORFEIT_PROPOSED
    assert _escalate_all([0.2, 0.05, 0.3]).status is DisputeStatus.ESCALATING
    assert _escalate_all([math.inf], patience=1).status is DisputeStatus.FORFEIT_PROPOSED


def test_escalation_needs_funded():
    with pytest.raises(StateError):
        escalate_dispute(accepted(), DisputeState("p1"), 0.5)


def test_forfeit_vote_returns_residue():
    p, e = funded(deposit=600.0)
    release_milestone(p, e, p.plan[0], [yes("d1", 1)])
    d = DisputeState("p1", patience=1)
    escalate_dispute(p, d, 0.5)
    with pytest.raises(StateError):
        release_milestone(p, e, p.plan[1], [yes("d1", 1)], dispute=d)
    resolve_forfeit(p, e, d, [Ballot("a", "p1", "yes", 60), Ballot("b", "p1", "no", 40)])
    assert p.state is ProposalState.FORFEITED and d.status is DisputeStatus.FORFEITED
    assert e.returned == 300.0 and e.balance == 0.0
    assert e.deposited == e.released + e.balance + e.returned


def test_rejected_forfeit_resets_window():
    p, e = funded()
    d = DisputeState("p1", patience=2)
    for s in (0.5, 0.5):
        escalate_dispute(p, d, s)
    resolve_forfeit(p, e, d, [Ballot("a", "p1", "no", 1)])
    assert d.status is DisputeStatus.RESOLVED and p.state is ProposalState.FUNDED
    escalate_dispute(p, d, 0.5)
    assert d.status is DisputeStatus.ESCALATING
    escalate_dispute(p, d, 0.5)
    assert d.status is DisputeStatus.FORFEIT_PROPOSED


@settings(max_examples=300)
@given(st.lists(st.floats(0, 0.3), min_size=1, max_size=12), st.integers(1, 4))
def test_forfeit_proposed_iff_window_oracle(scores, patience):
    p, _ = funded()
    d = DisputeState("p1", tau=0.1, patience=patience)
    for i, s in enumerate(scores):
        escalate_dispute(p, d, s)
        expected = forfeit_window_oracle(scores[:i + 1], 0.1, patience)
        assert (d.status is DisputeStatus.FORFEIT_PROPOSED) == expected
        if expected:
            break


# -- abandonment ---------------------------------------------------------------------

@pytest.mark.parametrize("released,payout", [(0, 300.0), (1, 0.0), (None, 200.0)])
def test_abandonment_examples(released, payout):
    p, e = funded((100.0, 200.0, 700.0) if released is None else (300.0, 300.0, 400.0))
    if released == 1 or released is None:
        release_milestone(p, e, p.plan[0], [yes("d1", 1)])
    assert abandonment_payout(e) == payout
    abandon(p, e, [Ballot("d1", "p1", "yes", 1)])
    assert p.state is ProposalState.ABANDONED
    assert e.released >= 300.0 - 1e-9
    assert e.balance == 0.0 and e.deposited == e.released + e.returned


def test_abandon_requires_funded_and_majority():
    with pytest.raises(StateError):
        abandon(accepted(), None, [yes("d1", 1)])
    p, e = funded()
    r = abandon(p, e, [Ballot("d1", "p1", "yes", 50), Ballot("d2", "p1", "no", 50)])
    assert not r.accepted and p.state is ProposalState.FUNDED


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1))
def test_abandonment_payout_formula(seed):
    rng = np.random.default_rng(seed)
    amounts = tuple(float(x) for x in rng.integers(1, 500, size=rng.integers(1, 5)))
    promised = sum(amounts)
    p, e = funded(amounts, deposit=promised)
    for m in p.plan[: rng.integers(0, len(amounts))]:
        release_milestone(p, e, m, [yes("d1", 1)])
    before = e.released
    expected = max(0.0, 0.3 * promised - before)
    assert abandonment_payout(e) == pytest.approx(expected, abs=1e-9)
    abandon(p, e, [yes("d1", 1)])
    assert e.released - before == pytest.approx(expected, abs=1e-9)


# -- FEC ------------------------------------------------------------------------------

def test_fec_examples():
    sheet = FecCostSheet((("pay", 500.0),), (("space", 200.0), ("services", 100.0)), 1000.0)
    assert fec_cost(sheet).total_cost == 800.0 and fec_cost(sheet).price_warning is None
    r = fec_cost(FecCostSheet(sheet.direct_items, sheet.indirect_items, 700.0))
    assert r.total_cost == 800.0 and r.price_warning.under_recovery == 100.0
    r = fec_cost(FecCostSheet())
    assert r.total_cost == 0.0 and r.price_warning is None
    with pytest.raises(CostSheetError):
        fec_cost(FecCostSheet((("pay", -1.0),)))


# -- ledger integration --------------------------------------------------------------

def test_governance_emits_replayable_transactions():
    w = LedgerWriter()
    for ident in (ALICE, BOB, Identity.derive("d1", 0), Identity.derive("protocol", 0)):
        w.register(ident)
    w.commit(0)
    p = validate_and_submit(make_proposal(), KEYS, writer=w)
    decide_proposal(p, [Ballot("d1", "p1", "yes", 1)], writer=w)
    e = open_escrow(p, 1000.0, investor="d1", writer=w)
    release_milestone(p, e, p.plan[0], [Ballot("d1", "p1", "yes", 1)], writer=w)
    w.commit(1)
    assert verify_chain(w.chain).ok
    kinds = [tx.kind for _, tx in w.chain.transactions()]
    assert kinds.index(TxKind.TALLY_VOTES) < kinds.index(TxKind.DEPOSIT_ESCROW) < kinds.index(
        TxKind.RELEASE_MILESTONE)
    result = replay_chain(w.chain)
    assert result.ok
    assert result.state["proposals"]["p1"]["state"] == "Funded"


# -- state machine fuzzing -------------------------------------------------------------

class TracedProposal(Proposal):
    def transition(self, new):
        before = self.state
        super().transition(new)
        self.steps.append((before, self.state))


class ProposalMachine(RuleBasedStateMachine):
    """Random event sequences; only declared transitions and conservation may appear."""

    def __init__(self):
        super().__init__()
        base = make_proposal((200.0, 300.0, 500.0))
        self.p = TracedProposal(**{f: getattr(base, f) for f in base.__dataclass_fields__})
        self.p.steps = []
        self.e = None
        self.d = DisputeState("p1", tau=0.1, patience=2)
        self.seen = [self.p.state]

    def _try(self, fn, *args, **kw):
        before = self.p.state
        try:
            fn(*args, **kw)
        except (GovernanceError, ValueError):
            assert self.p.state is before
        if self.p.state is not before:
            self.seen.append(self.p.state)

    @rule()
    def submit(self):
        self._try(validate_and_submit, self.p, KEYS)

    @rule(y=st.integers(0, 10), n=st.integers(0, 10))
    def vote(self, y, n):
        self._try(decide_proposal, self.p, [yes("a", y), no("b", n)])

    @rule(rev=st.sampled_from(["budget", "title"]))
    def revise(self, rev):
        value = [BudgetItem(f"v{self.p.version}", 1000.0)] if rev == "budget" else "T2"
        self._try(resubmit, self.p, {rev: value}, KEYS)

    @rule(frac=st.sampled_from([0.2, 0.3, 0.5, 1.0]))
    def fund(self, frac):
        try:
            self.e = open_escrow(self.p, 1000.0 * frac, investor="d1")
            self.seen.append(self.p.state)
        except GovernanceError:
            pass

    @precondition(lambda self: self.e is not None)
    @rule(amount=st.sampled_from([100.0, 250.0, 700.0]))
    def deposit(self, amount):
        try:
            top_up(self.e, amount, "d1")
        except GovernanceError:
            pass

    @precondition(lambda self: self.e is not None)
    @rule(ok=st.booleans(), score=st.floats(0, 0.5))
    def milestone(self, ok, score):
        m = self.p.next_milestone()
        if m is None:
            return
        ballots = [yes("d1", 1)] if ok else [no("d1", 1, "methodology", "late")]
        self._try(release_milestone, self.p, self.e, m, ballots, dispute=self.d, disagreement=score)

    @precondition(lambda self: self.e is not None)
    @rule(ok=st.booleans())
    def forfeit(self, ok):
        self._try(resolve_forfeit, self.p, self.e, self.d, [yes("d1", 1) if ok else Ballot("d1", "p1", "no", 1)])

    @precondition(lambda self: self.e is not None)
    @rule(ok=st.booleans())
    def walk_away(self, ok):
        self._try(abandon, self.p, self.e, [yes("d1", 1) if ok else Ballot("d1", "p1", "no", 1)])

    @invariant()
    def declared_transitions_only(self):
        for a, b in self.p.steps:
            assert b in TRANSITIONS[a]
        if self.p.steps:
            assert self.p.steps[-1][1] is self.p.state

    @invariant()
    def conserved(self):
        if self.e is not None:
            self.e.check()
            assert self.e.deposited == pytest.approx(self.e.released + self.e.balance + self.e.returned,
                                                     abs=1e-9)
            assert self.e.deposited >= self.e.guaranteed_min
        if self.p.state is ProposalState.ABANDONED:
            assert self.e.released >= 0.3 * self.e.promised - 1e-9


TestProposalMachine = ProposalMachine.TestCase
TestProposalMachine.settings = settings(max_examples=150, stateful_step_count=30, deadline=None)
