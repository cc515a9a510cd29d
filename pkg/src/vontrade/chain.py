"""Hash-chained trading record with proof-of-contribution block creation.

Byte layout (all integers little-endian, unsigned):

    transaction := serial:u64 slot:u32 rc:u32 tc:u32 n_grants:u32
                   { link:u32 n_fs:u32 fs:u32 * n_fs } * n_grants
    block body  := prev_hash:32B creator:u32 slot:u32 n_tx:u32 transaction * n_tx
    block_hash  := sha256(block body)

A chain file is the concatenation of ``body || block_hash`` for every block.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from itertools import groupby
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from vontrade.engine import Trade
from vontrade.errors import EncodingError

DIGEST_SIZE = 32
ZERO_DIGEST = bytes(DIGEST_SIZE)
U32_MAX = 0xFFFFFFFF
U64_MAX = 0xFFFFFFFFFFFFFFFF

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_TX_HEAD = struct.Struct("<QIIII")
_GRANT_HEAD = struct.Struct("<II")
_BLOCK_HEAD = struct.Struct("<32sIII")


@dataclass(frozen=True)
class Transaction:
    serial: int
    slot_index: int
    rc_id: int
    tc_id: int
    grants: tuple[tuple[int, tuple[int, ...]], ...]

    def to_dict(self) -> dict:
        return {
            "serial": self.serial,
            "slot_index": self.slot_index,
            "rc_id": self.rc_id,
            "tc_id": self.tc_id,
            "grants": [[link, list(fs)] for link, fs in self.grants],
        }

    @classmethod
    def from_dict(cls, d: dict) -> Transaction:
        grants = tuple((int(link), tuple(int(x) for x in fs)) for link, fs in d["grants"])
        return cls(int(d["serial"]), int(d["slot_index"]), int(d["rc_id"]), int(d["tc_id"]), grants)


@dataclass(frozen=True)
class Block:
    prev_hash: bytes
    creator_id: int
    slot_index: int
    transactions: tuple[Transaction, ...]
    block_hash: bytes

    def to_dict(self) -> dict:
        return {
            "prev_hash": self.prev_hash.hex(),
            "creator_id": self.creator_id,
            "slot_index": self.slot_index,
            "block_hash": self.block_hash.hex(),
            "transactions": [tx.to_dict() for tx in self.transactions],
        }

    @classmethod
    def from_dict(cls, d: dict) -> Block:
        return cls(
            bytes.fromhex(d["prev_hash"]),
            int(d["creator_id"]),
            int(d["slot_index"]),
            tuple(Transaction.from_dict(t) for t in d["transactions"]),
            bytes.fromhex(d["block_hash"]),
        )


def _u32(x: int) -> bytes:
    if not 0 <= x <= U32_MAX:
        raise EncodingError(f"value {x} out of u32 range")
    return _U32.pack(x)


def encode_transaction(tx: Transaction) -> bytes:
    if not 0 <= tx.serial <= U64_MAX:
        raise EncodingError(f"serial {tx.serial} out of u64 range")
    if not tx.grants:
        raise EncodingError("transaction has no grants")
    try:
        parts = [_TX_HEAD.pack(tx.serial, tx.slot_index, tx.rc_id, tx.tc_id, len(tx.grants))]
        for link, fss in tx.grants:
            if not fss or any(a >= b for a, b in zip(fss, fss[1:])):
                raise EncodingError("FS list must be nonempty, ascending and duplicate-free")
            parts.append(struct.pack(f"<II{len(fss)}I", link, len(fss), *fss))
    except struct.error as exc:
        raise EncodingError(f"field out of range: {exc}") from exc
    return b"".join(parts)


def encode_body(prev_hash: bytes, creator_id: int, slot_index: int, txs: Sequence[Transaction]) -> bytes:
    if len(prev_hash) != DIGEST_SIZE:
        raise EncodingError("prev_hash must be 32 bytes")
    head = prev_hash + _u32(creator_id) + _u32(slot_index) + _u32(len(txs))
    return head + b"".join(encode_transaction(tx) for tx in txs)


def encode_block(block: Block, with_hash: bool = False) -> bytes:
    body = encode_body(block.prev_hash, block.creator_id, block.slot_index, block.transactions)
    return body + block.block_hash if with_hash else body


def make_block(prev_hash: bytes, creator_id: int, slot_index: int, txs: Sequence[Transaction]) -> Block:
    body = encode_body(prev_hash, creator_id, slot_index, txs)
    return Block(prev_hash, creator_id, slot_index, tuple(txs), hashlib.sha256(body).digest())


def block_hash_ok(block: Block, body: bytes | None = None) -> bool:
    """``body`` may be the block's already-known canonical encoding."""
    if body is None:
        body = encode_block(block)
    return hashlib.sha256(body).digest() == block.block_hash


def _take(buf: bytes, pos: int, n: int) -> int:
    if pos + n > len(buf):
        raise EncodingError("truncated input")
    return pos + n


def decode_transaction(buf: bytes, pos: int = 0) -> tuple[Transaction, int]:
    size = len(buf)
    if pos + _TX_HEAD.size > size:
        raise EncodingError("truncated input")
    serial, slot, rc, tc, n_grants = _TX_HEAD.unpack_from(buf, pos)
    pos += _TX_HEAD.size
    if n_grants == 0:
        raise EncodingError("transaction has no grants")
    grants = []
    for _ in range(n_grants):
        if pos + 8 > size:
            raise EncodingError("truncated input")
        link, n_fs = _GRANT_HEAD.unpack_from(buf, pos)
        pos += 8
        end = pos + 4 * n_fs
        if end > size:
            raise EncodingError("truncated input")
        fss = struct.unpack_from(f"<{n_fs}I", buf, pos)
        pos = end
        if n_fs == 0 or any(a >= b for a, b in zip(fss, fss[1:])):
            raise EncodingError("FS list must be nonempty, ascending and duplicate-free")
        grants.append((link, fss))
    return Transaction(serial, slot, rc, tc, tuple(grants)), pos


def decode_block(buf: bytes, pos: int = 0, with_hash: bool = False) -> tuple[Block, int]:
    end = _take(buf, pos, _BLOCK_HEAD.size)
    prev, creator, slot, n_tx = _BLOCK_HEAD.unpack_from(buf, pos)
    pos = end
    txs = []
    for _ in range(n_tx):
        tx, pos = decode_transaction(buf, pos)
        txs.append(tx)
    digest = b""
    if with_hash:
        end = _take(buf, pos, DIGEST_SIZE)
        digest = bytes(buf[pos:end])
        pos = end
    return Block(prev, creator, slot, tuple(txs), digest), pos


def transactions_for(trades: Iterable[Trade], first_serial: int) -> list[Transaction]:
    """One transaction per (RC, TC) pair of each trade, serials in chain order."""
    out = []
    serial = first_serial
    for trade in sorted(trades, key=lambda t: t.serial):
        for c in trade.contributions:
            out.append(Transaction(serial, trade.slot, trade.rc, c.tc, c.grants))
            serial += 1
    return out


def select_creator(trades: Iterable[Trade], metric: str = "credit") -> int | None:
    """The slot's largest contributor (by earned credit or raw FS count); ties to lowest id."""
    earned: dict[int, int] = {}
    for t in trades:
        for c in t.contributions:
            amount = c.credit if metric == "credit" else c.fs_count
            earned[c.tc] = earned.get(c.tc, 0) + amount
    if not earned:
        return None
    return min(earned, key=lambda von: (-earned[von], von))


class Chain:
    def __init__(self, blocks: Iterable[Block] = ()) -> None:
        self.blocks: list[Block] = list(blocks)

    def __len__(self) -> int:
        return len(self.blocks)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Chain) and self.to_bytes() == other.to_bytes()

    @property
    def head_hash(self) -> bytes:
        return self.blocks[-1].block_hash if self.blocks else ZERO_DIGEST

    @property
    def next_serial(self) -> int:
        for block in reversed(self.blocks):
            if block.transactions:
                return block.transactions[-1].serial + 1
        return 0

    def append(self, block: Block, body: bytes | None = None) -> None:
        if block.prev_hash != self.head_hash or not block_hash_ok(block, body):
            raise EncodingError("block does not extend this chain")
        self.blocks.append(block)

    def to_bytes(self) -> bytes:
        return b"".join(encode_block(b, with_hash=True) for b in self.blocks)

    @classmethod
    def from_bytes(cls, data: bytes) -> Chain:
        blocks = []
        pos = 0
        while pos < len(data):
            block, pos = decode_block(data, pos, with_hash=True)
            blocks.append(block)
        return cls(blocks)

    def dump(self) -> str:
        return json.dumps([b.to_dict() for b in self.blocks], indent=1)

    @classmethod
    def load_dump(cls, text: str) -> Chain:
        return cls(Block.from_dict(d) for d in json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> Chain:
        return cls.from_bytes(Path(path).read_bytes())

    def summary(self) -> dict:
        return {
            "blocks": len(self.blocks),
            "transactions": sum(len(b.transactions) for b in self.blocks),
            "head": self.head_hash.hex(),
        }


@dataclass(frozen=True)
class Verdict:
    ok: bool
    block_index: int | None = None
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


def expected_blocks(trade_log: Sequence[Trade], metric: str = "credit") -> list[tuple[int, int, list[Transaction]]]:
    """(slot, creator, transactions) for every slot that produced a transaction."""
    out = []
    serial = 0
    ordered = sorted(trade_log, key=lambda t: (t.slot, t.serial))
    for slot, group in groupby(ordered, key=lambda t: t.slot):
        trades = list(group)
        txs = transactions_for(trades, serial)
        if not txs:
            continue
        serial += len(txs)
        creator = select_creator(trades, metric)
        assert creator is not None
        out.append((slot, creator, txs))
    return out


def verify_block(
    block: Block,
    prev_hash: bytes,
    slot: int,
    creator: int | None,
    txs: Sequence[Transaction],
    body: bytes | None = None,
) -> str:
    """Empty string when ``block`` is what an honest creator would have produced."""
    if block.prev_hash != prev_hash:
        return "header does not match previous block hash"
    if not block_hash_ok(block, body):
        return "block hash mismatch"
    if block.slot_index != slot:
        return "slot index mismatch"
    if block.creator_id != creator:
        return "creator is not the slot's largest contributor"
    if list(block.transactions) != list(txs):
        return "transactions differ from trade log"
    return ""


def _iter_raw(data: bytes) -> Iterator[tuple[Block, bytes]]:
    pos = 0
    while pos < len(data):
        start = pos
        block, pos = decode_block(data, pos, with_hash=True)
        yield block, bytes(data[start : pos - DIGEST_SIZE])


def verify_chain(chain: Chain | bytes, trade_log: Sequence[Trade], metric: str = "credit") -> Verdict:
    """Check hash links, hashes and content against ``trade_log``.

    ``chain`` may be raw chain-file bytes. Blocks are checked as they are
    decoded, so damage is reported at the first block it touches.
    """
    expected = expected_blocks(trade_log, metric)
    if isinstance(chain, (bytes, bytearray)):
        items: Iterator[tuple[Block, bytes | None]] = _iter_raw(bytes(chain))
    else:
        items = ((b, None) for b in chain.blocks)
    prev = ZERO_DIGEST
    i = 0
    while True:
        try:
            block, body = next(items)
        except StopIteration:
            break
        except (EncodingError, struct.error) as exc:
            return Verdict(False, i, f"undecodable: {exc}")
        if i >= len(expected):
            return Verdict(False, i, "unexpected extra block")
        slot, creator, txs = expected[i]
        reason = verify_block(block, prev, slot, creator, txs, body)
        if reason:
            return Verdict(False, i, reason)
        prev = block.block_hash
        i += 1
    if i < len(expected):
        return Verdict(False, i, "missing block")
    return Verdict(True)
