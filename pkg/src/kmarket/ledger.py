"""Append-only, hash-chained ledger with Ed25519-signed transactions.

Canonical byte layout (all integers big-endian)::

    Transaction := str(kind) str(actor) digest[32] u64(nonce) bytes(signature)
    Block       := u64(height) u64(timestamp) prev_hash[32] tx_root[32]
                   u32(count) Transaction*
    str(x)      := u32(len(utf8(x))) utf8(x)
    bytes(x)    := u32(len(x)) x

A transaction is signed over its layout without the trailing signature
field.  ``tx_root = sha256(d_0 || d_1 || ...)`` over the ordered
transaction digests ``d_i = sha256(Transaction)``, and a block's hash is
``sha256(Block)``.  Payloads live beside the chain, keyed by their
sha256 digest.

Serialized chain (``Chain.to_bytes``)::

    "KMCHAIN\\0" u16(version=1) u32(n_blocks)
    { u32(len) Block hash[32] } * n_blocks
    u32(n_payloads) { digest[32] bytes(payload) } * n_payloads   (sorted by digest)
"""

from __future__ import annotations

import base64
import enum
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .errors import (
    DecodeError,
    EmptyBlockError,
    LedgerError,
    ReplayError,
    SignatureError,
    UnknownActorError,
)

ZERO_HASH = bytes(32)
# the protocol itself signs tallies, releases and settlements
PROTOCOL = "protocol"
MAGIC = b"KMCHAIN\x00"
FORMAT_VERSION = 1
JSONL_FORMAT = "kmarket-chain"


class TxKind(str, enum.Enum):
    REGISTER_IDENTITY = "RegisterIdentity"
    CREATE_LISTING = "CreateListing"
    POST_DESIDERATUM = "PostDesideratum"
    SUBMIT_PROPOSAL = "SubmitProposal"
    CAST_VOTE = "CastVote"
    DEPOSIT_ESCROW = "DepositEscrow"
    RELEASE_MILESTONE = "ReleaseMilestone"
    RAISE_DISPUTE = "RaiseDispute"
    FORFEIT_BOND = "ForfeitBond"
    FORM_CONTRACT = "FormContract"
    SETTLE_CONTRACT = "SettleContract"
    TRANSFER_OWNERSHIP = "TransferOwnership"
    # protocol bookkeeping needed to replay governance and settlement
    TALLY_VOTES = "TallyVotes"
    ABANDON_PROPOSAL = "AbandonProposal"
    ESCROW_PAYMENT = "EscrowPayment"
    RELEASE_KEY = "ReleaseKey"
    REFUND_PAYMENT = "RefundPayment"
    RECORD_EVENT = "RecordEvent"


_KINDS = {k.value: k for k in TxKind}


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def canonical_json(payload) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=True,
                      allow_nan=False).encode("ascii")


class Identity:
    """An agent's signing key."""

    def __init__(self, agent_id: str, private_key: Ed25519PrivateKey):
        self.agent_id = agent_id
        self._key = private_key
        self.public_bytes = private_key.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )

    @classmethod
    def derive(cls, agent_id: str, seed: int | str) -> "Identity":
        """Deterministic key for simulations; not for real custody."""
        secret = sha256(f"kmarket-identity|{seed}|{agent_id}".encode())
        return cls(agent_id, Ed25519PrivateKey.from_private_bytes(secret))

    def sign(self, message: bytes) -> bytes:
        return self._key.sign(message)

    def __repr__(self):
        return f"Identity({self.agent_id!r}, {self.public_bytes.hex()[:16]}...)"


def verify_signature(public_key: bytes, message: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


# -- canonical encoding -------------------------------------------------------

def _str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack(">I", len(raw)) + raw


def _blob(b: bytes) -> bytes:
    return struct.pack(">I", len(b)) + b


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise DecodeError("truncated input")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())

    def str(self) -> str:
        try:
            return self.blob().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(str(exc)) from None

    def done(self):
        if self.pos != len(self.data):
            raise DecodeError(f"{len(self.data) - self.pos} trailing bytes")


@dataclass(frozen=True)
class Transaction:
    kind: TxKind
    actor: str
    payload_digest: bytes
    nonce: int
    signature: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "kind", TxKind(self.kind))
        if len(self.payload_digest) != 32:
            raise ValueError("payload_digest must be 32 bytes")
        if not 0 <= self.nonce < 2**64:
            raise ValueError("nonce out of range")

    def signing_bytes(self) -> bytes:
        return (
            _str(self.kind.value)
            + _str(self.actor)
            + self.payload_digest
            + struct.pack(">Q", self.nonce)
        )

    @property
    def digest(self) -> bytes:
        return sha256(canonical_serialize(self))

    @classmethod
    def signed(cls, kind, identity: Identity, payload_digest: bytes, nonce: int) -> "Transaction":
        unsigned = cls(kind, identity.agent_id, payload_digest, nonce)
        return cls(kind, identity.agent_id, payload_digest, nonce,
                   identity.sign(unsigned.signing_bytes()))


@dataclass(frozen=True)
class Block:
    height: int
    timestamp: int
    prev_hash: bytes
    tx_root: bytes
    transactions: tuple[Transaction, ...]

    def __post_init__(self):
        object.__setattr__(self, "transactions", tuple(self.transactions))

    @property
    def hash(self) -> bytes:
        return sha256(canonical_serialize(self))


def canonical_serialize(record: Transaction | Block) -> bytes:
    if isinstance(record, Transaction):
        return record.signing_bytes() + _blob(record.signature)
    if isinstance(record, Block):
        head = struct.pack(">QQ", record.height, record.timestamp)
        body = b"".join(canonical_serialize(tx) for tx in record.transactions)
        return (head + record.prev_hash + record.tx_root
                + struct.pack(">I", len(record.transactions)) + body)
    raise TypeError(f"cannot serialize {type(record).__name__}")


def _read_tx(r: _Reader) -> Transaction:
    kind_name = r.str()
    if kind_name not in _KINDS:
        raise DecodeError(f"unknown transaction kind {kind_name!r}")
    actor = r.str()
    digest = r.take(32)
    nonce = r.u64()
    signature = r.blob()
    return Transaction(_KINDS[kind_name], actor, digest, nonce, signature)


def _read_block(r: _Reader) -> Block:
    height = r.u64()
    timestamp = r.u64()
    prev_hash = r.take(32)
    tx_root = r.take(32)
    count = r.u32()
    txs = tuple(_read_tx(r) for _ in range(count))
    return Block(height, timestamp, prev_hash, tx_root, txs)


def deserialize_transaction(data: bytes) -> Transaction:
    r = _Reader(data)
    tx = _read_tx(r)
    r.done()
    return tx


def deserialize_block(data: bytes) -> Block:
    r = _Reader(data)
    block = _read_block(r)
    r.done()
    return block


def compute_tx_root(txs: Iterable[Transaction]) -> bytes:
    return sha256(b"".join(tx.digest for tx in txs))


# -- chain --------------------------------------------------------------------

@dataclass(frozen=True)
class VerificationReport:
    ok: bool
    height: int | None = None
    cause: str | None = None
    detail: str = ""

    def __bool__(self):
        return self.ok

    def __str__(self):
        if self.ok:
            return "ok"
        where = "chain" if self.height is None else f"height {self.height}"
        return f"FAILED at {where}: {self.cause}" + (f" ({self.detail})" if self.detail else "")


def _identity_key(payload: bytes, actor: str) -> bytes:
    try:
        doc = json.loads(payload)
        if doc["agent"] != actor:
            raise LedgerError("identity payload names a different agent")
        key = bytes.fromhex(doc["public_key"])
    except (ValueError, KeyError, TypeError) as exc:
        raise LedgerError(f"malformed identity payload: {exc}") from None
    if len(key) != 32:
        raise LedgerError("public key must be 32 bytes")
    return key


class _TxChecker:
    """Signature and nonce rules, shared by append and verification."""

    def __init__(self, payloads: Mapping[bytes, bytes]):
        self.payloads = payloads
        self.keys: dict[str, bytes] = {}
        self.nonces: dict[str, int] = {}

    def check(self, tx: Transaction) -> dict:
        """Validate ``tx`` against current state; return the state delta."""
        if tx.kind is TxKind.REGISTER_IDENTITY:
            if tx.actor in self.keys:
                raise LedgerError(f"identity {tx.actor!r} already registered")
            payload = self.payloads.get(tx.payload_digest)
            if payload is None:
                raise UnknownActorError(f"identity payload for {tx.actor!r} is missing")
            key = _identity_key(payload, tx.actor)
        else:
            key = self.keys.get(tx.actor)
            if key is None:
                raise UnknownActorError(f"actor {tx.actor!r} has no registered identity")
        if not verify_signature(key, tx.signing_bytes(), tx.signature):
            raise SignatureError(f"bad signature from {tx.actor!r} (nonce {tx.nonce})")
        last = self.nonces.get(tx.actor, -1)
        if tx.nonce <= last:
            raise ReplayError(f"nonce {tx.nonce} from {tx.actor!r} does not exceed {last}")
        return {"actor": tx.actor, "key": key, "nonce": tx.nonce}

    def apply(self, delta: dict):
        self.keys[delta["actor"]] = delta["key"]
        self.nonces[delta["actor"]] = delta["nonce"]


class Chain:
    """Single-writer chain.  Committed blocks are immutable; only appends exist."""

    def __init__(self):
        self._blocks: list[Block] = []
        self._hashes: list[bytes] = []
        self._payloads: dict[bytes, bytes] = {}
        self._checker = _TxChecker(self._payloads)

    @property
    def blocks(self) -> tuple[Block, ...]:
        return tuple(self._blocks)

    @property
    def hashes(self) -> tuple[bytes, ...]:
        return tuple(self._hashes)

    @property
    def payloads(self) -> Mapping[bytes, bytes]:
        return dict(self._payloads)

    def __len__(self):
        return len(self._blocks)

    @property
    def head_hash(self) -> bytes:
        return self._hashes[-1] if self._hashes else ZERO_HASH

    def public_key(self, actor: str) -> bytes | None:
        return self._checker.keys.get(actor)

    def last_nonce(self, actor: str) -> int:
        return self._checker.nonces.get(actor, -1)

    def put_payload(self, data: bytes) -> bytes:
        digest = sha256(data)
        self._payloads[digest] = bytes(data)
        return digest

    def payload(self, digest: bytes) -> bytes | None:
        return self._payloads.get(digest)

    def payload_json(self, tx: Transaction):
        data = self._payloads.get(tx.payload_digest)
        return None if data is None else json.loads(data)

    def append_block(self, txs: Sequence[Transaction], timestamp: int) -> Block:
        txs = tuple(txs)
        if not txs:
            raise EmptyBlockError("a block needs at least one transaction")
        if self._blocks and timestamp < self._blocks[-1].timestamp:
            raise LedgerError("timestamps must not decrease")
        # validate everything before touching state
        staged = _TxChecker(self._payloads)
        staged.keys = dict(self._checker.keys)
        staged.nonces = dict(self._checker.nonces)
        for tx in txs:
            staged.apply(staged.check(tx))
        block = Block(len(self._blocks), timestamp, self.head_hash, compute_tx_root(txs), txs)
        self._blocks.append(block)
        self._hashes.append(block.hash)
        self._checker.keys, self._checker.nonces = staged.keys, staged.nonces
        return block

    def transactions(self) -> Iterable[tuple[int, Transaction]]:
        for block in self._blocks:
            for tx in block.transactions:
                yield block.height, tx

    # -- import / export ------------------------------------------------------

    @classmethod
    def from_records(cls, blocks, hashes, payloads) -> "Chain":
        """Rebuild a chain from stored records without validating it."""
        chain = cls()
        chain._blocks = list(blocks)
        chain._hashes = list(hashes)
        chain._payloads.update(payloads)
        if len(chain._blocks) != len(chain._hashes):
            raise DecodeError("block and hash counts differ")
        return chain

    def to_bytes(self) -> bytes:
        out = [MAGIC, struct.pack(">HI", FORMAT_VERSION, len(self._blocks))]
        for block, h in zip(self._blocks, self._hashes):
            out.append(_blob(canonical_serialize(block)))
            out.append(h)
        out.append(struct.pack(">I", len(self._payloads)))
        for digest in sorted(self._payloads):
            out.append(digest + _blob(self._payloads[digest]))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Chain":
        r = _Reader(data)
        if r.take(len(MAGIC)) != MAGIC:
            raise DecodeError("bad magic")
        if r.u16() != FORMAT_VERSION:
            raise DecodeError("unsupported format version")
        blocks, hashes = [], []
        for _ in range(r.u32()):
            blocks.append(deserialize_block(r.blob()))
            hashes.append(r.take(32))
        payloads = {}
        prev = None
        for _ in range(r.u32()):
            digest = r.take(32)
            if prev is not None and digest <= prev:
                raise DecodeError("payload digests out of order")
            payloads[digest] = r.blob()
            prev = digest
        r.done()
        return cls.from_records(blocks, hashes, payloads)

    def to_jsonl(self) -> str:
        lines = [{"format": JSONL_FORMAT, "version": FORMAT_VERSION,
                  "blocks": len(self._blocks), "payloads": len(self._payloads)}]
        for block, h in zip(self._blocks, self._hashes):
            lines.append({
                "type": "block",
                "height": block.height,
                "timestamp": block.timestamp,
                "prev_hash": block.prev_hash.hex(),
                "tx_root": block.tx_root.hex(),
                "hash": h.hex(),
                "transactions": [
                    {"kind": tx.kind.value, "actor": tx.actor,
                     "payload_digest": tx.payload_digest.hex(), "nonce": tx.nonce,
                     "signature": tx.signature.hex()}
                    for tx in block.transactions
                ],
            })
        for digest in sorted(self._payloads):
            data = self._payloads[digest]
            try:
                rec = {"type": "payload", "digest": digest.hex(), "text": data.decode("utf-8")}
            except UnicodeDecodeError:
                rec = {"type": "payload", "digest": digest.hex(),
                       "base64": base64.b64encode(data).decode("ascii")}
            lines.append(rec)
        return "".join(json.dumps(x, sort_keys=True, separators=(",", ":")) + "\n" for x in lines)

    @classmethod
    def from_jsonl(cls, text: str) -> "Chain":
        try:
            records = [json.loads(line) for line in text.splitlines() if line.strip()]
            header = records[0]
            if header.get("format") != JSONL_FORMAT or header.get("version") != FORMAT_VERSION:
                raise DecodeError("not a kmarket chain file")
            blocks, hashes, payloads = [], [], {}
            for rec in records[1:]:
                if rec["type"] == "block":
                    txs = tuple(
                        Transaction(_KINDS[t["kind"]], t["actor"], bytes.fromhex(t["payload_digest"]),
                                    int(t["nonce"]), bytes.fromhex(t["signature"]))
                        for t in rec["transactions"]
                    )
                    blocks.append(Block(int(rec["height"]), int(rec["timestamp"]),
                                        bytes.fromhex(rec["prev_hash"]),
                                        bytes.fromhex(rec["tx_root"]), txs))
                    hashes.append(bytes.fromhex(rec["hash"]))
                elif rec["type"] == "payload":
                    data = (rec["text"].encode("utf-8") if "text" in rec
                            else base64.b64decode(rec["base64"]))
                    payloads[bytes.fromhex(rec["digest"])] = data
                else:
                    raise DecodeError(f"unknown record type {rec['type']!r}")
            if len(blocks) != header["blocks"] or len(payloads) != header["payloads"]:
                raise DecodeError("record counts do not match the header")
        except DecodeError:
            raise
        except (ValueError, KeyError, TypeError, IndexError, struct.error) as exc:
            raise DecodeError(f"malformed chain file: {exc}") from None
        return cls.from_records(blocks, hashes, payloads)

    def save(self, path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Chain":
        return cls.from_jsonl(Path(path).read_text(encoding="utf-8"))


def append_block(chain: Chain, txs: Sequence[Transaction], timestamp: int) -> Chain:
    chain.append_block(txs, timestamp)
    return chain


def verify_chain(chain: Chain) -> VerificationReport:
    """Recheck links, roots, signatures, nonces and stored hashes from scratch."""
    payloads = chain.payloads
    corrupt = {d for d, data in payloads.items() if sha256(data) != d}
    checker = _TxChecker(payloads)
    prev_hash = ZERO_HASH
    prev_ts = None
    for i, (block, recorded) in enumerate(zip(chain.blocks, chain.hashes)):
        def fail(cause, detail=""):
            return VerificationReport(False, i, cause, detail)

        if block.height != i:
            return fail("height_mismatch", f"block claims height {block.height}")
        if block.prev_hash != prev_hash:
            return fail("prev_hash_mismatch")
        if not block.transactions:
            return fail("empty_block")
        if prev_ts is not None and block.timestamp < prev_ts:
            return fail("timestamp_regression")
        if compute_tx_root(block.transactions) != block.tx_root:
            return fail("tx_root_mismatch")
        for tx in block.transactions:
            if tx.payload_digest in corrupt:
                return fail("payload_mismatch", tx.payload_digest.hex())
            try:
                checker.apply(checker.check(tx))
            except SignatureError as exc:
                return fail("bad_signature", str(exc))
            except ReplayError as exc:
                return fail("nonce_replay", str(exc))
            except UnknownActorError as exc:
                return fail("unknown_actor", str(exc))
            except LedgerError as exc:
                return fail("bad_identity", str(exc))
        actual = block.hash
        if actual != recorded:
            return fail("block_hash_mismatch")
        prev_hash = actual
        prev_ts = block.timestamp
    if corrupt:
        return VerificationReport(False, None, "payload_mismatch", f"{len(corrupt)} corrupt payloads")
    return VerificationReport(True)


def verify_bytes(data: bytes) -> VerificationReport:
    try:
        chain = Chain.from_bytes(data)
    except (DecodeError, ValueError) as exc:
        return VerificationReport(False, None, "parse_error", str(exc))
    return verify_chain(chain)


class LedgerWriter:
    """Signs transactions for known identities and batches them into blocks."""

    def __init__(self, chain: Chain | None = None):
        self.chain = chain if chain is not None else Chain()
        self.identities: dict[str, Identity] = {}
        self.pending: list[Transaction] = []
        self._next_nonce: dict[str, int] = {}

    def add_identity(self, identity: Identity) -> None:
        self.identities[identity.agent_id] = identity

    def register(self, identity: Identity, **extra) -> Transaction:
        self.add_identity(identity)
        payload = {"agent": identity.agent_id, "public_key": identity.public_bytes.hex(), **extra}
        return self.record(TxKind.REGISTER_IDENTITY, identity.agent_id, payload)

    def public_keys(self) -> dict[str, bytes]:
        return {a: i.public_bytes for a, i in self.identities.items()}

    def record(self, kind: TxKind, actor: str, payload) -> Transaction:
        identity = self.identities.get(actor)
        if identity is None:
            raise UnknownActorError(f"no signing identity for {actor!r}")
        digest = self.chain.put_payload(canonical_json(payload))
        nonce = self._next_nonce.get(actor, self.chain.last_nonce(actor) + 1)
        tx = Transaction.signed(kind, identity, digest, nonce)
        self._next_nonce[actor] = nonce + 1
        self.pending.append(tx)
        return tx

    def commit(self, timestamp: int) -> Block | None:
        if not self.pending:
            return None
        txs, self.pending = self.pending, []
        return self.chain.append_block(txs, timestamp)
