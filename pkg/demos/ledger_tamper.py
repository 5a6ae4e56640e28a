"""Build a small signed chain, export it, then flip one bit and verify again."""

from kmarket.ledger import Identity, LedgerWriter, TxKind, verify_bytes, verify_chain

writer = LedgerWriter()
for name in ("alice", "bob"):
    writer.register(Identity.derive(name, 7))
writer.commit(0)
for tick in range(1, 6):
    writer.record(TxKind.CAST_VOTE, "alice" if tick % 2 else "bob", {"tick": tick, "vote": "yes"})
    writer.commit(tick)

chain = writer.chain
print(f"{len(chain)} blocks, head {chain.head_hash.hex()[:16]}...")
print("verify:", verify_chain(chain))

data = bytearray(chain.to_bytes())
for offset in (40, len(data) // 2, len(data) - 3):
    flipped = bytearray(data)
    flipped[offset] ^= 0x01
    print(f"bit flip at byte {offset}:", verify_bytes(bytes(flipped)))
