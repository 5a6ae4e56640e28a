"""DAO funding protocol: proposals, stake-weighted votes, escrow and disputes.

Proposal lifecycle::

    Draft -> Submitted -> Voting -> Accepted -> Funded -> Completed
                 ^           |                    |----> Forfeited
                 +-- Rejected <                   +----> Abandoned

Acceptance needs at least 51% of the cast weight.  Funders put at least 30%
of the promised amount into escrow up front; that share is what researchers
are guaranteed if the funders walk away.  Milestones are paid out of escrow
by vote, in order.  Rejected milestones open a dispute whose rounds are
scored by the free-energy gap between investor beliefs and the researchers'
reported model; ``patience`` consecutive rounds above ``tau`` put the bond
up for forfeiture.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

from .errors import (
    CostSheetError,
    DuplicateBallotError,
    EmptyElectorateError,
    GovernanceError,
    InfiniteFreeEnergyError,
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
from .inference import GenerativeModel, VariationalDistribution, free_energy
from .ledger import PROTOCOL, Identity, LedgerWriter, TxKind, sha256, verify_signature

ACCEPT_THRESHOLD = Fraction(51, 100)
ESCROW_FRACTION = Fraction(3, 10)
DEFAULT_TAU = 0.1
DEFAULT_PATIENCE = 3
_MONEY_TOL = 1e-9

SECTIONS = (
    "title",
    "introduction",
    "literature_review",
    "methodology",
    "plan",
    "budget",
    "team",
)
TEXT_SECTIONS = SECTIONS[:4]


class ProposalState(str, enum.Enum):
    DRAFT = "Draft"
    SUBMITTED = "Submitted"
    VOTING = "Voting"
    ACCEPTED = "Accepted"
    REJECTED = "Rejected"
    FUNDED = "Funded"
    COMPLETED = "Completed"
    FORFEITED = "Forfeited"
    ABANDONED = "Abandoned"


S = ProposalState
TRANSITIONS: dict[ProposalState, frozenset[ProposalState]] = {
    S.DRAFT: frozenset({S.SUBMITTED}),
    S.SUBMITTED: frozenset({S.VOTING}),
    S.VOTING: frozenset({S.ACCEPTED, S.REJECTED}),
    S.REJECTED: frozenset({S.SUBMITTED}),
    S.ACCEPTED: frozenset({S.FUNDED}),
    S.FUNDED: frozenset({S.COMPLETED, S.FORFEITED, S.ABANDONED}),
    S.COMPLETED: frozenset(),
    S.FORFEITED: frozenset(),
    S.ABANDONED: frozenset(),
}


class MilestoneState(str, enum.Enum):
    PENDING = "Pending"
    UNDER_VOTE = "UnderVote"
    RELEASED = "Released"
    DISPUTED = "Disputed"


class DisputeStatus(str, enum.Enum):
    NONE = "None"
    ESCALATING = "Escalating"
    FORFEIT_PROPOSED = "ForfeitProposed"
    FORFEITED = "Forfeited"
    RESOLVED = "Resolved"


@dataclass
class Milestone:
    index: int
    description: str
    amount: float
    deadline: int
    state: MilestoneState = MilestoneState.PENDING


@dataclass(frozen=True)
class BudgetItem:
    label: str
    amount: float


@dataclass(frozen=True)
class RejectionReason:
    section: str
    text: str

    def __post_init__(self):
        if self.section not in SECTIONS:
            raise ValueError(f"reason must be tagged with a template section, got {self.section!r}")
        if not self.text.strip():
            raise ValueError("reason text must not be empty")


@dataclass(frozen=True)
class TeamMember:
    agent_id: str
    cv_digest: bytes
    signature: bytes = b""

    @classmethod
    def signed(cls, identity: Identity, cv_text: str) -> "TeamMember":
        digest = sha256(cv_text.encode("utf-8"))
        return cls(identity.agent_id, digest, identity.sign(digest))


@dataclass
class Proposal:
    id: str
    title: str
    introduction: str
    literature_review: str
    methodology: str
    plan: list[Milestone]
    budget: list[BudgetItem]
    team: list[TeamMember]
    version: int = 1
    state: ProposalState = ProposalState.DRAFT
    rejection_reasons: list[RejectionReason] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)

    @property
    def promised(self) -> float:
        return math.fsum(item.amount for item in self.budget)

    @property
    def lead(self) -> str:
        return self.team[0].agent_id if self.team else PROTOCOL

    def transition(self, new: ProposalState) -> None:
        new = ProposalState(new)
        if new not in TRANSITIONS[self.state]:
            raise StateError(f"proposal {self.id}: {self.state.value} -> {new.value} is not allowed")
        self.state = new

    def next_milestone(self) -> Milestone | None:
        for m in self.plan:
            if m.state is not MilestoneState.RELEASED:
                return m
        return None


@dataclass(frozen=True)
class Ballot:
    voter: str
    proposal_id: str
    choice: str
    weight: float
    reason: RejectionReason | None = None

    def __post_init__(self):
        if self.choice not in ("yes", "no"):
            raise ValueError(f"choice must be 'yes' or 'no', got {self.choice!r}")
        if not math.isfinite(self.weight) or self.weight < 0:
            raise ValueError("ballot weight must be finite and >= 0")


@dataclass(frozen=True)
class TallyResult:
    accepted: bool
    yes_weight: float
    total_weight: float
    reasons: tuple[RejectionReason, ...] = ()

    @property
    def outcome(self) -> str:
        return "Accepted" if self.accepted else "Rejected"


class VotingRound:
    """Collects at most one ballot per voter."""

    def __init__(self, proposal_id: str):
        self.proposal_id = proposal_id
        self.ballots: list[Ballot] = []
        self._voters: set[str] = set()

    def cast(self, ballot: Ballot) -> None:
        if ballot.proposal_id != self.proposal_id:
            raise GovernanceError("ballot is for a different proposal")
        if ballot.voter in self._voters:
            raise DuplicateBallotError(f"{ballot.voter} already voted in this round")
        self._voters.add(ballot.voter)
        self.ballots.append(ballot)


def tally(
    ballots: Sequence[Ballot],
    *,
    threshold: Fraction = ACCEPT_THRESHOLD,
    per_capita: bool = False,
    quorum: float | None = None,
    require_reasons: bool = True,
) -> TallyResult:
    """Accept iff yes-weight / cast-weight >= threshold, compared exactly.

    A rejection must carry at least one tagged reason from the no side
    unless ``require_reasons`` is off (forfeit and abandonment votes).
    """
    voters = [b.voter for b in ballots]
    if len(voters) != len(set(voters)):
        raise DuplicateBallotError("more than one ballot from the same voter")
    weights = [Fraction(1) if per_capita else Fraction(b.weight) for b in ballots]
    total = sum(weights, Fraction(0))
    if total <= 0:
        raise EmptyElectorateError("no ballot carries positive weight")
    if quorum is not None and total < Fraction(quorum):
        raise QuorumError(f"cast weight {float(total)} is below the quorum {quorum}")
    yes = sum((w for w, b in zip(weights, ballots) if b.choice == "yes"), Fraction(0))
    accepted = yes >= Fraction(threshold) * total
    reasons: tuple[RejectionReason, ...] = ()
    if not accepted:
        reasons = tuple(b.reason for b in ballots if b.choice == "no" and b.reason is not None)
        if require_reasons and not reasons:
            raise MissingReasonsError("rejected without any reason from the no side")
    return TallyResult(accepted, float(yes), float(total), reasons)


def _check_template(proposal: Proposal, public_keys: Mapping[str, bytes]) -> None:
    for name in TEXT_SECTIONS:
        if not str(getattr(proposal, name)).strip():
            raise MissingSectionError(name)
    for name in ("plan", "budget", "team"):
        if not getattr(proposal, name):
            raise MissingSectionError(name)
    if [m.index for m in proposal.plan] != list(range(len(proposal.plan))):
        raise GovernanceError("milestone indices must run 0..n-1 in order")
    if any(m.amount < 0 for m in proposal.plan) or any(b.amount < 0 for b in proposal.budget):
        raise GovernanceError("amounts must be non-negative")
    planned = math.fsum(m.amount for m in proposal.plan)
    if abs(planned - proposal.promised) > _MONEY_TOL * max(1.0, proposal.promised):
        raise MilestoneSumMismatchError(
            f"milestones sum to {planned} but the budget promises {proposal.promised}"
        )
    for member in proposal.team:
        key = public_keys.get(member.agent_id)
        if key is None or not member.signature:
            raise UnsignedCVError(f"CV of {member.agent_id} is not signed")
        if not verify_signature(key, member.cv_digest, member.signature):
            raise UnsignedCVError(f"CV signature of {member.agent_id} does not verify")


def _submission_payload(proposal: Proposal) -> dict:
    return {
        "proposal_id": proposal.id,
        "version": proposal.version,
        "promised": proposal.promised,
        "milestones": [m.amount for m in proposal.plan],
        "team": [m.agent_id for m in proposal.team],
        "title": proposal.title,
    }


def validate_and_submit(
    proposal: Proposal, public_keys: Mapping[str, bytes], *, writer: LedgerWriter | None = None
) -> Proposal:
    if proposal.state is not ProposalState.DRAFT:
        raise StateError(f"only Draft proposals can be submitted, not {proposal.state.value}")
    _check_template(proposal, public_keys)
    proposal.transition(ProposalState.SUBMITTED)
    if writer is not None:
        writer.record(TxKind.SUBMIT_PROPOSAL, proposal.lead, _submission_payload(proposal))
    return proposal


def _record_votes(writer, ballots, subject, proposal_id, result, milestone=None):
    if writer is None:
        return
    for b in ballots:
        writer.record(TxKind.CAST_VOTE, b.voter, {
            "proposal_id": proposal_id, "subject": subject, "milestone": milestone,
            "choice": b.choice, "weight": b.weight,
            "reason": None if b.reason is None else [b.reason.section, b.reason.text],
        })
    writer.record(TxKind.TALLY_VOTES, PROTOCOL, {
        "proposal_id": proposal_id, "subject": subject, "milestone": milestone,
        "accepted": result.accepted, "yes": result.yes_weight, "total": result.total_weight,
        "reasons": [[r.section, r.text] for r in result.reasons],
    })


def decide_proposal(
    proposal: Proposal,
    ballots: Sequence[Ballot],
    *,
    writer: LedgerWriter | None = None,
    per_capita: bool = False,
    quorum: float | None = None,
) -> TallyResult:
    """Open the vote on a submitted proposal and apply the tally."""
    if proposal.state not in (ProposalState.SUBMITTED, ProposalState.VOTING):
        raise StateError(f"proposal {proposal.id} is not open for voting")
    # tally first so a failed vote leaves the proposal where it was
    result = tally(ballots, per_capita=per_capita, quorum=quorum)
    if proposal.state is ProposalState.SUBMITTED:
        proposal.transition(ProposalState.VOTING)
    if result.accepted:
        proposal.transition(ProposalState.ACCEPTED)
    else:
        proposal.transition(ProposalState.REJECTED)
        proposal.rejection_reasons = list(result.reasons)
    _record_votes(writer, ballots, "proposal", proposal.id, result)
    return result


def resubmit(
    proposal: Proposal,
    revisions: Mapping[str, object],
    public_keys: Mapping[str, bytes],
    *,
    writer: LedgerWriter | None = None,
) -> Proposal:
    """Revise a rejected proposal and submit it again as the next version."""
    if proposal.state is not ProposalState.REJECTED:
        raise StateError("only Rejected proposals can be resubmitted")
    unknown = set(revisions) - set(SECTIONS)
    if unknown:
        raise ValueError(f"unknown sections: {sorted(unknown)}")
    flagged = {r.section for r in proposal.rejection_reasons}
    changed = {k for k, v in revisions.items() if getattr(proposal, k) != v}
    if not changed & flagged:
        raise UnaddressedFeedbackError(
            f"revision must change one of the flagged sections {sorted(flagged)}"
        )
    backup = {k: getattr(proposal, k) for k in revisions}
    for k, v in revisions.items():
        setattr(proposal, k, v)
    try:
        _check_template(proposal, public_keys)
    except GovernanceError:
        for k, v in backup.items():
            setattr(proposal, k, v)
        raise
    proposal.history.append({
        "version": proposal.version,
        "reasons": [(r.section, r.text) for r in proposal.rejection_reasons],
        "revised": sorted(changed),
    })
    proposal.rejection_reasons = []
    proposal.version += 1
    proposal.transition(ProposalState.SUBMITTED)
    if writer is not None:
        writer.record(TxKind.SUBMIT_PROPOSAL, proposal.lead, _submission_payload(proposal))
    return proposal


@dataclass
class EscrowAccount:
    proposal_id: str
    promised: float
    guaranteed_min: float
    deposited: float = 0.0
    released: float = 0.0
    returned: float = 0.0
    contributions: dict[str, float] = field(default_factory=dict)

    @property
    def balance(self) -> float:
        return self.deposited - self.released - self.returned

    def check(self) -> None:
        tol = _MONEY_TOL * max(1.0, self.promised)
        assert -tol <= self.released <= self.deposited + tol <= self.promised + 2 * tol
        assert abs(self.deposited - (self.released + self.balance + self.returned)) <= tol


def guaranteed_minimum(promised: float) -> float:
    return float(Fraction(promised) * ESCROW_FRACTION)


def _add_deposit(escrow, amount, investor, writer):
    if amount < 0 or not math.isfinite(amount):
        raise GovernanceError("deposits must be finite and >= 0")
    if escrow.deposited + amount > escrow.promised * (1 + _MONEY_TOL):
        raise GovernanceError("deposits may not exceed the promised amount")
    escrow.deposited += amount
    escrow.contributions[investor] = escrow.contributions.get(investor, 0.0) + amount
    if writer is not None:
        writer.record(TxKind.DEPOSIT_ESCROW, investor, {
            "proposal_id": escrow.proposal_id, "amount": amount,
            "guaranteed_min": escrow.guaranteed_min,
        })


def open_escrow(
    proposal: Proposal,
    deposit: float | Mapping[str, float],
    *,
    investor: str = "investor",
    writer: LedgerWriter | None = None,
) -> EscrowAccount:
    """Fund an accepted proposal.  ``deposit`` may be split across investors."""
    if proposal.state is not ProposalState.ACCEPTED:
        raise StateError("only Accepted proposals can be funded")
    parts = dict(deposit) if isinstance(deposit, Mapping) else {investor: float(deposit)}
    total = sum((Fraction(v) for v in parts.values()), Fraction(0))
    promised = proposal.promised
    need = Fraction(promised) * ESCROW_FRACTION
    if total < need:
        raise InsufficientDepositError(float(need - total))
    if total > Fraction(promised) * (1 + Fraction(_MONEY_TOL)):
        raise GovernanceError("deposit exceeds the promised amount")
    escrow = EscrowAccount(proposal.id, promised, float(need))
    for who in sorted(parts):
        _add_deposit(escrow, parts[who], who, writer)
    proposal.transition(ProposalState.FUNDED)
    return escrow


def top_up(escrow: EscrowAccount, amount: float, investor: str, *,
           writer: LedgerWriter | None = None) -> EscrowAccount:
    _add_deposit(escrow, amount, investor, writer)
    return escrow


@dataclass
class DisputeState:
    proposal_id: str
    tau: float = DEFAULT_TAU
    patience: int = DEFAULT_PATIENCE
    rounds: list[float] = field(default_factory=list)
    status: DisputeStatus = DisputeStatus.NONE
    window_start: int = 0  # rounds before this index were settled by a vote

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


def release_milestone(
    proposal: Proposal,
    escrow: EscrowAccount,
    milestone: Milestone,
    ballots: Sequence[Ballot],
    *,
    dispute: DisputeState | None = None,
    disagreement: float | None = None,
    writer: LedgerWriter | None = None,
    per_capita: bool = False,
) -> TallyResult:
    """Vote on paying out ``milestone``.  Rejection records a dispute round."""
    if proposal.state is not ProposalState.FUNDED:
        raise StateError("milestones are only released on Funded proposals")
    if dispute is not None and dispute.status is DisputeStatus.FORFEIT_PROPOSED:
        raise StateError("a forfeiture vote is pending")
    nxt = proposal.next_milestone()
    if nxt is None or nxt.index != milestone.index:
        raise OrderingError(
            f"milestone {milestone.index} is not next (next is {None if nxt is None else nxt.index})"
        )
    milestone = nxt
    tol = _MONEY_TOL * max(1.0, escrow.promised)
    if escrow.released + milestone.amount > escrow.deposited + tol:
        raise LiquidityError(
            f"releasing {milestone.amount} needs {escrow.released + milestone.amount - escrow.deposited}"
            " more in escrow"
        )
    result = tally(ballots, per_capita=per_capita)
    if not result.accepted and (dispute is None or disagreement is None):
        raise ValueError("a rejected milestone needs a dispute state and a disagreement score")
    _record_votes(writer, ballots, "milestone", proposal.id, result, milestone.index)
    if result.accepted:
        escrow.released += milestone.amount
        milestone.state = MilestoneState.RELEASED
        if writer is not None:
            writer.record(TxKind.RELEASE_MILESTONE, PROTOCOL, {
                "proposal_id": proposal.id, "milestone": milestone.index, "amount": milestone.amount,
            })
        if proposal.next_milestone() is None:
            proposal.transition(ProposalState.COMPLETED)
    else:
        milestone.state = MilestoneState.DISPUTED
        escalate_dispute(proposal, dispute, disagreement, writer=writer)
    return result


def disagreement_score(belief: VariationalDistribution, model: GenerativeModel, aim) -> float:
    """Free energy of the investor belief above the evidence bound (nats)."""
    try:
        report = free_energy(belief, model, aim)
    except InfiniteFreeEnergyError:
        return math.inf
    return max(0.0, report.kl_gap)


def escalate_dispute(
    proposal: Proposal,
    dispute: DisputeState,
    new_score: float,
    *,
    writer: LedgerWriter | None = None,
) -> DisputeState:
    if proposal.state is not ProposalState.FUNDED:
        raise StateError("disputes only escalate on Funded proposals")
    if dispute.status is DisputeStatus.FORFEIT_PROPOSED:
        raise StateError("a forfeiture vote is already pending")
    if math.isnan(new_score) or new_score < 0:
        raise ValueError("disagreement scores are non-negative")
    dispute.rounds.append(new_score)
    window = dispute.rounds[dispute.window_start:][-dispute.patience:]
    if len(window) == dispute.patience and all(s > dispute.tau for s in window):
        dispute.status = DisputeStatus.FORFEIT_PROPOSED
    else:
        dispute.status = DisputeStatus.ESCALATING
    if writer is not None:
        writer.record(TxKind.RAISE_DISPUTE, PROTOCOL, {
            "proposal_id": proposal.id,
            "score": new_score if math.isfinite(new_score) else "inf",
            "status": dispute.status.value,
        })
        if dispute.status is DisputeStatus.FORFEIT_PROPOSED:
            writer.record(TxKind.FORFEIT_BOND, PROTOCOL, {
                "proposal_id": proposal.id, "phase": "proposed",
            })
    return dispute


def resolve_forfeit(
    proposal: Proposal,
    escrow: EscrowAccount,
    dispute: DisputeState,
    ballots: Sequence[Ballot],
    *,
    writer: LedgerWriter | None = None,
    per_capita: bool = False,
) -> TallyResult:
    """51% vote on a proposed forfeiture; acceptance returns the escrow residue."""
    if proposal.state is not ProposalState.FUNDED:
        raise StateError("only Funded proposals can forfeit")
    if dispute.status is not DisputeStatus.FORFEIT_PROPOSED:
        raise StateError("no forfeiture has been proposed")
    result = tally(ballots, per_capita=per_capita, require_reasons=False)
    _record_votes(writer, ballots, "forfeit", proposal.id, result)
    returned = 0.0
    if result.accepted:
        returned = escrow.balance
        escrow.returned += returned
        dispute.status = DisputeStatus.FORFEITED
        proposal.transition(ProposalState.FORFEITED)
    else:
        dispute.status = DisputeStatus.RESOLVED
        dispute.window_start = len(dispute.rounds)
    if writer is not None:
        writer.record(TxKind.FORFEIT_BOND, PROTOCOL, {
            "proposal_id": proposal.id,
            "phase": "executed" if result.accepted else "rejected",
            "returned": returned,
        })
    return result


def abandonment_payout(escrow: EscrowAccount) -> float:
    """What researchers still get so their receipts reach the guaranteed minimum."""
    return max(0.0, escrow.guaranteed_min - escrow.released)


def abandon(
    proposal: Proposal,
    escrow: EscrowAccount,
    ballots: Sequence[Ballot],
    *,
    writer: LedgerWriter | None = None,
    per_capita: bool = False,
) -> TallyResult:
    if proposal.state is not ProposalState.FUNDED:
        raise StateError("only Funded proposals can be abandoned")
    result = tally(ballots, per_capita=per_capita, require_reasons=False)
    _record_votes(writer, ballots, "abandon", proposal.id, result)
    if result.accepted:
        payout = abandonment_payout(escrow)
        escrow.released += payout
        returned = escrow.balance
        escrow.returned += returned
        proposal.transition(ProposalState.ABANDONED)
        if writer is not None:
            writer.record(TxKind.ABANDON_PROPOSAL, PROTOCOL, {
                "proposal_id": proposal.id, "payout": payout, "returned": returned,
            })
    return result


@dataclass(frozen=True)
class FecCostSheet:
    direct_items: tuple[tuple[str, float], ...] = ()
    indirect_items: tuple[tuple[str, float], ...] = ()
    price: float = 0.0


@dataclass(frozen=True)
class PriceWarning:
    under_recovery: float

    def __str__(self):
        return f"price is {self.under_recovery} below full economic cost"


@dataclass(frozen=True)
class FecResult:
    total_cost: float
    price_warning: PriceWarning | None = None


def fec_cost(sheet: FecCostSheet) -> FecResult:
    """Full economic cost: every direct and indirect item, compared to the asking price."""
    items = list(sheet.direct_items) + list(sheet.indirect_items)
    for label, amount in items:
        if not math.isfinite(amount) or amount < 0:
            raise CostSheetError(f"cost item {label!r} must be a non-negative amount")
    if not math.isfinite(sheet.price) or sheet.price < 0:
        raise CostSheetError("price must be a non-negative amount")
    total = math.fsum(a for _, a in items)
    warning = PriceWarning(total - sheet.price) if sheet.price < total else None
    return FecResult(total, warning)


def proposal_from_dict(doc: Mapping, identities: Mapping[str, Identity] | None = None) -> Proposal:
    """Build a Draft proposal from the template document format.

    Team entries either carry ``cv_digest``/``signature`` in hex or a ``cv``
    text that is signed with the matching identity.
    """
    team = []
    for entry in doc.get("team", []):
        agent = entry["agent"]
        if "signature" in entry:
            team.append(TeamMember(agent, bytes.fromhex(entry["cv_digest"]),
                                   bytes.fromhex(entry["signature"])))
        elif identities and agent in identities:
            team.append(TeamMember.signed(identities[agent], entry.get("cv", "")))
        else:
            team.append(TeamMember(agent, sha256(entry.get("cv", "").encode("utf-8"))))
    return Proposal(
        id=str(doc["id"]),
        title=doc.get("title", ""),
        introduction=doc.get("introduction", ""),
        literature_review=doc.get("literature_review", ""),
        methodology=doc.get("methodology", ""),
        plan=[
            Milestone(i, m.get("description", ""), float(m["amount"]), int(m.get("deadline", 0)))
            for i, m in enumerate(doc.get("plan", []))
        ],
        budget=[BudgetItem(b["label"], float(b["amount"])) for b in doc.get("budget", [])],
        team=team,
    )


def load_proposal(path, identities: Mapping[str, Identity] | None = None) -> Proposal:
    return proposal_from_dict(json.loads(Path(path).read_text(encoding="utf-8")), identities)
