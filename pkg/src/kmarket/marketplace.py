"""Knowledge listings, desiderata matching, contracts and settlement.

Payloads are encrypted before listing and only the ciphertext digest is
published.  Settlement runs payment -> key release -> acknowledgement, each
step a ledger transaction, so no key is released before payment is held.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .accounts import Accounts
from .errors import (
    EmptyPayloadError,
    IncompleteDesideratumError,
    InsufficientFundsError,
    LexiconViolationError,
    ListingUnavailableError,
    MarketplaceError,
    PriceOutOfBoundsError,
    UnsignedContractError,
)
from .ledger import PROTOCOL, Identity, LedgerWriter, TxKind, canonical_json, sha256, verify_signature
from .skill_space import SkillProfile, SkillTaxonomy, cooperation_fit

# radius of an absent tag in a tag profile; keeps every profile non-degenerate
TAG_BASELINE = 0.1


@dataclass(frozen=True)
class Lexicon:
    terms: Mapping[str, str]

    def __post_init__(self):
        object.__setattr__(self, "terms", dict(self.terms))
        if any(not t for t in self.terms):
            raise ValueError("lexicon terms must be non-empty")

    def __contains__(self, tag):
        return tag in self.terms

    def validate(self, tags: Sequence[str]) -> None:
        for tag in tags:
            if tag not in self.terms:
                raise LexiconViolationError(tag)

    def taxonomy(self) -> SkillTaxonomy:
        return SkillTaxonomy(tuple(sorted(self.terms)), id="lexicon")

    def tag_profile(self, tags: Sequence[str]) -> SkillProfile:
        tax = self.taxonomy()
        present = set(tags)
        return tax.profile(1.0 if t in present else TAG_BASELINE for t in tax.skills)


@dataclass(frozen=True)
class Listing:
    id: str
    owner: str
    tags: tuple[str, ...]
    description: str
    payload_commitment: bytes
    ask_price: float


def payload_key(payload: bytes) -> bytes:
    """Convergent key: equal payloads encrypt to equal ciphertexts."""
    return sha256(b"kmarket-payload-key|" + payload)


def encrypt_payload(payload: bytes) -> tuple[bytes, bytes]:
    key = payload_key(payload)
    nonce = sha256(b"kmarket-nonce|" + key)[:12]
    return key, AESGCM(key).encrypt(nonce, payload, None)


def decrypt_payload(key: bytes, ciphertext: bytes) -> bytes:
    nonce = sha256(b"kmarket-nonce|" + key)[:12]
    return AESGCM(key).decrypt(nonce, ciphertext, None)


@dataclass(frozen=True)
class Desideratum:
    id: str
    agent: str
    kind: str  # "request" | "offer"
    tags: tuple[str, ...]
    quantity: int
    price_bounds: tuple[float, float]
    deadline: int
    listing_id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "tags", tuple(self.tags))
        object.__setattr__(self, "price_bounds", tuple(float(p) for p in self.price_bounds))
        if self.kind not in ("request", "offer"):
            raise IncompleteDesideratumError(f"kind must be request or offer, got {self.kind!r}")
        if not self.tags:
            raise IncompleteDesideratumError(f"{self.id}: tags are required")
        if self.quantity is None or self.quantity < 1:
            raise IncompleteDesideratumError(f"{self.id}: quantity must be >= 1")
        lo, hi = self.price_bounds
        if not (math.isfinite(lo) and math.isfinite(hi)) or lo < 0 or lo > hi:
            raise IncompleteDesideratumError(f"{self.id}: price bounds must satisfy 0 <= lo <= hi")
        if self.deadline is None or self.deadline < 0:
            raise IncompleteDesideratumError(f"{self.id}: deadline tick is required")
        if self.kind == "offer" and self.listing_id is None:
            raise IncompleteDesideratumError(f"{self.id}: an offer must name its listing")


@dataclass(frozen=True)
class MatchCandidate:
    request: Desideratum
    offer: Desideratum
    score: float
    price_range: tuple[float, float]


def is_compatible(request: Desideratum, offer: Desideratum) -> bool:
    lo = max(request.price_bounds[0], offer.price_bounds[0])
    hi = min(request.price_bounds[1], offer.price_bounds[1])
    return (
        bool(set(request.tags) & set(offer.tags))
        and lo <= hi
        and offer.deadline <= request.deadline
        and request.agent != offer.agent
    )


def match_desiderata(
    requests: Sequence[Desideratum], offers: Sequence[Desideratum], lexicon: Lexicon
) -> list[MatchCandidate]:
    """Every compatible (request, offer) pair, best tag fit first.

    Compatible means: a shared tag, overlapping price bounds, the offer's
    deadline no later than the request's, and different agents.  The score
    is the cooperation fit of the offer's tag profile against the request's.
    """
    out = []
    for req in requests:
        want = lexicon.tag_profile(req.tags)
        for off in offers:
            if not is_compatible(req, off):
                continue
            score = cooperation_fit(want, lexicon.tag_profile(off.tags))
            lo = max(req.price_bounds[0], off.price_bounds[0])
            hi = min(req.price_bounds[1], off.price_bounds[1])
            out.append(MatchCandidate(req, off, score, (lo, hi)))
    out.sort(key=lambda m: (-m.score, m.request.id, m.offer.id))
    return out


@dataclass(frozen=True)
class ContractDoc:
    id: str
    buyer: str
    seller: str
    listing_id: str
    agreed_price: float
    terms: Mapping[str, str] = field(default_factory=dict)
    buyer_signature: bytes = b""
    seller_signature: bytes = b""

    def signing_bytes(self) -> bytes:
        return canonical_json({
            "id": self.id, "buyer": self.buyer, "seller": self.seller,
            "listing_id": self.listing_id, "agreed_price": self.agreed_price,
            "terms": dict(self.terms),
        })

    @property
    def terms_digest(self) -> bytes:
        return sha256(canonical_json(dict(self.terms)))

    def sign(self, identity: Identity) -> "ContractDoc":
        sig = identity.sign(self.signing_bytes())
        if identity.agent_id == self.buyer:
            return replace(self, buyer_signature=sig)
        if identity.agent_id == self.seller:
            return replace(self, seller_signature=sig)
        raise MarketplaceError(f"{identity.agent_id} is not a party to contract {self.id}")


def verify_contract(doc: ContractDoc, public_keys: Mapping[str, bytes]) -> bool:
    msg = doc.signing_bytes()
    for party, sig in ((doc.buyer, doc.buyer_signature), (doc.seller, doc.seller_signature)):
        key = public_keys.get(party)
        if key is None or not sig or not verify_signature(key, msg, sig):
            return False
    return True


class SettlementStatus(str, enum.Enum):
    PAYMENT_PENDING = "PaymentPending"
    KEY_RELEASED = "KeyReleased"
    COMPLETE = "Complete"
    REFUNDED = "Refunded"


@dataclass
class SettlementRecord:
    contract_id: str
    status: SettlementStatus = SettlementStatus.PAYMENT_PENDING
    payment_tx: bytes | None = None
    key_release_tx: bytes | None = None
    ownership_tx: bytes | None = None
    refund_tx: bytes | None = None


class Marketplace:
    """Listings, their sealed payloads, and contract/settlement state."""

    def __init__(self, lexicon: Lexicon, writer: LedgerWriter | None = None):
        self.lexicon = lexicon
        self.writer = writer
        self.listings: dict[str, Listing] = {}
        self.owners: dict[str, str] = {}
        self.desiderata: dict[str, Desideratum] = {}
        self.contracts: dict[str, ContractDoc] = {}
        self.settlements: dict[str, SettlementRecord] = {}
        self._vault: dict[str, tuple[bytes, bytes]] = {}  # listing -> (key, ciphertext)
        self._n_listings = 0

    def _record(self, kind, actor, payload):
        if self.writer is not None:
            return self.writer.record(kind, actor, payload).digest
        return None

    def publish_listing(self, owner: str, tags: Sequence[str], payload: bytes, ask_price: float,
                        description: str = "", listing_id: str | None = None) -> Listing:
        self.lexicon.validate(tags)
        if not payload:
            raise EmptyPayloadError("knowledge payload must not be empty")
        if not math.isfinite(ask_price) or ask_price < 0:
            raise MarketplaceError("ask price must be >= 0")
        if listing_id is None:
            listing_id = f"L{self._n_listings:04d}"
        if listing_id in self.listings:
            raise MarketplaceError(f"listing {listing_id} already exists")
        self._n_listings += 1
        key, ciphertext = encrypt_payload(bytes(payload))
        listing = Listing(listing_id, owner, tuple(tags), description, sha256(ciphertext), float(ask_price))
        self.listings[listing_id] = listing
        self.owners[listing_id] = owner
        self._vault[listing_id] = (key, ciphertext)
        self._record(TxKind.CREATE_LISTING, owner, {
            "listing_id": listing_id, "tags": list(listing.tags), "ask_price": listing.ask_price,
            "commitment": listing.payload_commitment.hex(), "description": description,
        })
        return listing

    def post_desideratum(self, d: Desideratum) -> Desideratum:
        self.lexicon.validate(d.tags)
        if d.kind == "offer" and d.listing_id not in self.listings:
            raise ListingUnavailableError(f"offer {d.id} names unknown listing {d.listing_id}")
        if d.id in self.desiderata:
            raise MarketplaceError(f"desideratum {d.id} already exists")
        self.desiderata[d.id] = d
        self._record(TxKind.POST_DESIDERATUM, d.agent, {
            "id": d.id, "kind": d.kind, "tags": list(d.tags), "quantity": d.quantity,
            "price_bounds": list(d.price_bounds), "deadline": d.deadline, "listing_id": d.listing_id,
        })
        return d

    def ciphertext(self, listing_id: str) -> bytes:
        return self._vault[listing_id][1]

    def form_contract(self, doc: ContractDoc, public_keys: Mapping[str, bytes],
                      price_bounds: tuple[float, float] | None = None) -> ContractDoc:
        listing = self.listings.get(doc.listing_id)
        if listing is None:
            raise ListingUnavailableError(f"listing {doc.listing_id} is not live")
        if self.owners[doc.listing_id] != doc.seller:
            raise MarketplaceError(f"{doc.seller} does not own listing {doc.listing_id}")
        if doc.buyer not in public_keys or doc.seller not in public_keys:
            raise MarketplaceError("both parties need registered identities")
        if not doc.buyer_signature or not doc.seller_signature:
            raise UnsignedContractError(f"contract {doc.id} lacks a party signature")
        if not verify_contract(doc, public_keys):
            raise UnsignedContractError(f"contract {doc.id} signatures do not verify")
        if price_bounds is not None:
            lo, hi = price_bounds
            if not lo <= doc.agreed_price <= hi:
                raise PriceOutOfBoundsError(f"price {doc.agreed_price} outside [{lo}, {hi}]")
        if doc.id in self.contracts:
            raise MarketplaceError(f"contract {doc.id} already exists")
        self.contracts[doc.id] = doc
        self._record(TxKind.FORM_CONTRACT, doc.seller, {
            "contract_id": doc.id, "buyer": doc.buyer, "seller": doc.seller,
            "listing_id": doc.listing_id, "agreed_price": doc.agreed_price,
            "terms_digest": doc.terms_digest.hex(),
            "buyer_signature": doc.buyer_signature.hex(), "seller_signature": doc.seller_signature.hex(),
        })
        return doc

    def settle(self, contract_id: str, accounts: Accounts,
               delivered: bytes | None = None) -> SettlementRecord:
        """Payment into a hold, key release, then the buyer's digest check.

        ``delivered`` overrides the ciphertext the seller hands over; a digest
        that does not match the listing commitment refunds the buyer.
        """
        doc = self.contracts.get(contract_id)
        if doc is None:
            raise MarketplaceError(f"contract {contract_id} is not committed")
        if contract_id in self.settlements:
            raise MarketplaceError(f"contract {contract_id} was already settled")
        if accounts.balance(doc.buyer) < doc.agreed_price:
            raise InsufficientFundsError(
                f"{doc.buyer} holds {accounts.balance(doc.buyer)} < {doc.agreed_price}"
            )
        rec = SettlementRecord(contract_id)
        hold = f"hold:{contract_id}"
        accounts.transfer(doc.buyer, hold, doc.agreed_price)
        rec.payment_tx = self._record(TxKind.ESCROW_PAYMENT, doc.buyer, {
            "contract_id": contract_id, "amount": doc.agreed_price,
        })
        self.settlements[contract_id] = rec

        key, ciphertext = self._vault[doc.listing_id]
        rec.key_release_tx = self._record(TxKind.RELEASE_KEY, doc.seller, {
            "contract_id": contract_id, "key_digest": sha256(key).hex(),
        })
        rec.status = SettlementStatus.KEY_RELEASED

        handed = ciphertext if delivered is None else delivered
        listing = self.listings[doc.listing_id]
        if sha256(handed) == listing.payload_commitment:
            decrypt_payload(key, handed)
            accounts.transfer(hold, doc.seller, doc.agreed_price)
            self.owners[doc.listing_id] = doc.buyer
            rec.ownership_tx = self._record(TxKind.TRANSFER_OWNERSHIP, doc.buyer, {
                "contract_id": contract_id, "listing_id": doc.listing_id,
                "payload_digest": sha256(handed).hex(),
            })
            self._record(TxKind.SETTLE_CONTRACT, PROTOCOL, {
                "contract_id": contract_id, "status": SettlementStatus.COMPLETE.value,
            })
            rec.status = SettlementStatus.COMPLETE
        else:
            accounts.transfer(hold, doc.buyer, doc.agreed_price)
            rec.refund_tx = self._record(TxKind.REFUND_PAYMENT, PROTOCOL, {
                "contract_id": contract_id, "amount": doc.agreed_price,
            })
            self._record(TxKind.RAISE_DISPUTE, doc.buyer, {
                "contract_id": contract_id, "reason": "payload digest does not match commitment",
                "delivered_digest": sha256(handed).hex(),
            })
            self._record(TxKind.SETTLE_CONTRACT, PROTOCOL, {
                "contract_id": contract_id, "status": SettlementStatus.REFUNDED.value,
            })
            rec.status = SettlementStatus.REFUNDED
        return rec
