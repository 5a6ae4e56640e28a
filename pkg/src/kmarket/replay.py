"""Re-derive governance and settlement state from a chain's transactions.

The reducer only reads transaction payloads, never simulator memory, so
comparing its output with the simulator's recorded state checks that the
chain alone explains every outcome.  Protocol violations found on the way
(a release without an accepted milestone vote, a key released before
payment, an undeclared state transition) are collected, not raised.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .governance import TRANSITIONS, DisputeStatus, MilestoneState, ProposalState
from .ledger import Chain, TxKind


@dataclass
class ReplayResult:
    state: dict
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def _proposal_record(payload) -> dict:
    return {
        "state": ProposalState.SUBMITTED.value,
        "version": payload["version"],
        "promised": payload["promised"],
        "milestone_amounts": list(payload["milestones"]),
        "milestones": [MilestoneState.PENDING.value] * len(payload["milestones"]),
        "deposited": 0.0,
        "released": 0.0,
        "returned": 0.0,
        "dispute": DisputeStatus.NONE.value,
        "dispute_rounds": 0,
    }


def replay_chain(chain: Chain) -> ReplayResult:
    proposals: dict[str, dict] = {}
    approved: dict[str, int | None] = {}
    contracts: dict[str, dict] = {}
    owners: dict[str, str] = {}
    violations: list[str] = []

    def move(pid, rec, new, height):
        old = ProposalState(rec["state"])
        new = ProposalState(new)
        if new not in TRANSITIONS[old]:
            violations.append(f"height {height}: proposal {pid} {old.value} -> {new.value} is undeclared")
        rec["state"] = new.value

    for height, tx in chain.transactions():
        if tx.kind in (TxKind.REGISTER_IDENTITY, TxKind.CAST_VOTE, TxKind.POST_DESIDERATUM,
                       TxKind.RECORD_EVENT):
            continue
        payload = chain.payload_json(tx)
        if payload is None:
            violations.append(f"height {height}: payload of {tx.kind.value} is missing")
            continue
        kind = tx.kind
        pid = payload.get("proposal_id")
        rec = proposals.get(pid) if pid is not None else None

        if kind is TxKind.SUBMIT_PROPOSAL:
            if rec is None:
                proposals[pid] = _proposal_record(payload)
                if payload["version"] != 1:
                    violations.append(f"height {height}: {pid} first seen at version {payload['version']}")
            else:
                if payload["version"] != rec["version"] + 1:
                    violations.append(f"height {height}: {pid} version jumps to {payload['version']}")
                move(pid, rec, ProposalState.SUBMITTED, height)
                rec.update({k: v for k, v in _proposal_record(payload).items()
                            if k in ("version", "promised", "milestone_amounts", "milestones")})
            continue

        if pid is not None and rec is None and kind in (
            TxKind.TALLY_VOTES, TxKind.DEPOSIT_ESCROW, TxKind.RELEASE_MILESTONE,
            TxKind.FORFEIT_BOND, TxKind.ABANDON_PROPOSAL, TxKind.RAISE_DISPUTE,
        ):
            violations.append(f"height {height}: {kind.value} for unknown proposal {pid}")
            continue

        if kind is TxKind.TALLY_VOTES:
            subject = payload["subject"]
            if subject == "proposal":
                if rec["state"] == ProposalState.SUBMITTED.value:
                    move(pid, rec, ProposalState.VOTING, height)
                move(pid, rec, ProposalState.ACCEPTED if payload["accepted"] else ProposalState.REJECTED,
                     height)
            elif subject == "milestone":
                idx = payload["milestone"]
                if payload["accepted"]:
                    approved[pid] = idx
                else:
                    rec["milestones"][idx] = MilestoneState.DISPUTED.value
        elif kind is TxKind.DEPOSIT_ESCROW:
            rec["deposited"] += payload["amount"]
            if rec["state"] == ProposalState.ACCEPTED.value:
                move(pid, rec, ProposalState.FUNDED, height)
        elif kind is TxKind.RELEASE_MILESTONE:
            idx = payload["milestone"]
            if approved.pop(pid, None) != idx:
                violations.append(f"height {height}: milestone {idx} of {pid} released without an accepted vote")
            expected = next((i for i, s in enumerate(rec["milestones"])
                             if s != MilestoneState.RELEASED.value), None)
            if expected != idx:
                violations.append(f"height {height}: milestone {idx} of {pid} released out of order")
            rec["released"] += payload["amount"]
            rec["milestones"][idx] = MilestoneState.RELEASED.value
            if all(s == MilestoneState.RELEASED.value for s in rec["milestones"]):
                move(pid, rec, ProposalState.COMPLETED, height)
        elif kind is TxKind.RAISE_DISPUTE:
            if pid is not None:
                rec["dispute_rounds"] += 1
                rec["dispute"] = payload["status"]
        elif kind is TxKind.FORFEIT_BOND:
            phase = payload["phase"]
            if phase == "proposed":
                rec["dispute"] = DisputeStatus.FORFEIT_PROPOSED.value
            elif phase == "executed":
                rec["returned"] += payload["returned"]
                rec["dispute"] = DisputeStatus.FORFEITED.value
                move(pid, rec, ProposalState.FORFEITED, height)
            else:
                rec["dispute"] = DisputeStatus.RESOLVED.value
        elif kind is TxKind.ABANDON_PROPOSAL:
            rec["released"] += payload["payout"]
            rec["returned"] += payload["returned"]
            move(pid, rec, ProposalState.ABANDONED, height)

        elif kind is TxKind.CREATE_LISTING:
            owners[payload["listing_id"]] = tx.actor
        elif kind is TxKind.FORM_CONTRACT:
            contracts[payload["contract_id"]] = {
                "listing_id": payload["listing_id"], "buyer": payload["buyer"],
                "seller": payload["seller"], "status": "Formed", "paid": False,
            }
        elif kind in (TxKind.ESCROW_PAYMENT, TxKind.RELEASE_KEY, TxKind.TRANSFER_OWNERSHIP,
                      TxKind.REFUND_PAYMENT, TxKind.SETTLE_CONTRACT):
            cid = payload["contract_id"]
            c = contracts.get(cid)
            if c is None:
                violations.append(f"height {height}: {kind.value} for unknown contract {cid}")
                continue
            if kind is TxKind.ESCROW_PAYMENT:
                c["paid"] = True
                c["status"] = "PaymentPending"
            elif kind is TxKind.RELEASE_KEY:
                if not c["paid"]:
                    violations.append(f"height {height}: key for {cid} released before payment")
                c["status"] = "KeyReleased"
            elif kind is TxKind.TRANSFER_OWNERSHIP:
                owners[c["listing_id"]] = c["buyer"]
            elif kind is TxKind.SETTLE_CONTRACT:
                c["status"] = payload["status"]

    for rec in proposals.values():
        rec.pop("milestone_amounts", None)
    state = {
        "proposals": dict(sorted(proposals.items())),
        "settlements": {cid: c["status"] for cid, c in sorted(contracts.items())},
        "owners": dict(sorted(owners.items())),
    }
    return ReplayResult(state, violations)


def confidentiality_violations(chain: Chain) -> list[str]:
    """Contracts whose key release is not preceded by their payment."""
    paid: set[str] = set()
    bad = []
    for height, tx in chain.transactions():
        if tx.kind is TxKind.ESCROW_PAYMENT:
            paid.add(chain.payload_json(tx)["contract_id"])
        elif tx.kind is TxKind.RELEASE_KEY:
            cid = chain.payload_json(tx)["contract_id"]
            if cid not in paid:
                bad.append(f"height {height}: {cid}")
    return bad
