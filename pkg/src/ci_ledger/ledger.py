"""Tamper-evident per-channel block chain, world state and private data."""

import logging
import os
import threading
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from types import MappingProxyType

from ci_ledger.canonical import (
    EncodingError,
    b64decode,
    canonical_decode,
    canonical_encode,
    canonical_hash,
    sha256,
    sha256_hex,
)

logger = logging.getLogger(__name__)

ZERO_HASH = bytes(32)


class LedgerError(Exception):
    """Error appending to or reading the ledger."""

    pass


class HeightMismatch(LedgerError):
    pass


class PrevHashMismatch(LedgerError):
    pass


class BadMerkleRoot(LedgerError):
    pass


class BadBlockHash(LedgerError):
    pass


class BadTxId(LedgerError):
    pass


class FlagCountMismatch(LedgerError):
    """Block carries a validation flag count different from its transactions."""

    pass


class DuplicateWriteKey(LedgerError):
    pass


class BlockExists(LedgerError):
    """A different block file already exists at this height."""

    pass


class UnknownCollection(LedgerError):
    pass


class AccessDenied(LedgerError):
    """Organization is not a member of a private data collection."""

    pass


class ReadDenied(AccessDenied):
    pass


class PrivateDataUnreadable(LedgerError):
    """A persisted private collection file does not parse."""

    pass


class TxFlag(str, Enum):
    VALID = "Valid"
    MVCC_CONFLICT = "MvccConflict"
    POLICY_FAIL = "PolicyFail"
    BAD_SIGNATURE = "BadSignature"
    DUPLICATE_TX_ID = "DuplicateTxId"


class ChainFault(str, Enum):
    HEIGHT_MISMATCH = "HeightMismatch"
    PREV_HASH_MISMATCH = "PrevHashMismatch"
    BAD_TX_ID = "BadTxId"
    BAD_MERKLE_ROOT = "BadMerkleRoot"
    BAD_BLOCK_HASH = "BadBlockHash"
    FLAG_COUNT_MISMATCH = "FlagCountMismatch"
    UNREADABLE = "Unreadable"
    NON_CANONICAL = "NonCanonical"
    MISSING_BLOCK = "MissingBlock"
    FLAG_MISMATCH = "FlagMismatch"
    PRIVATE_DATA_MISMATCH = "PrivateDataMismatch"


@dataclass(frozen=True, order=True)
class Version:
    """Position of the transaction that last wrote a key."""

    block_height: int
    tx_index: int

    def to_dict(self) -> dict:
        return {"block_height": self.block_height, "tx_index": self.tx_index}

    @classmethod
    def from_dict(cls, data: Mapping | None) -> "Version | None":
        if data is None:
            return None
        return cls(int(data["block_height"]), int(data["tx_index"]))


@dataclass(frozen=True)
class KVRead:
    key: str
    version: Version | None

    def to_dict(self) -> dict:
        return {"key": self.key, "version": self.version.to_dict() if self.version else None}


@dataclass(frozen=True)
class KVWrite:
    key: str
    value: bytes | None  # None is the delete marker

    @property
    def is_delete(self) -> bool:
        return self.value is None

    def to_dict(self) -> dict:
        return {"key": self.key, "value": self.value, "is_delete": self.is_delete}


@dataclass(frozen=True)
class PrivateHash:
    collection: str
    key: str
    value_hash: str

    def to_dict(self) -> dict:
        return {"collection": self.collection, "key": self.key, "value_hash": self.value_hash}


@dataclass(frozen=True)
class Endorsement:
    key_id: str
    signature: bytes

    def to_dict(self) -> dict:
        return {"key_id": self.key_id, "signature": self.signature}


def compute_tx_id(
    channel: str,
    contract: str,
    function: str,
    args: Sequence[str],
    creator: str,
    nonce: bytes,
) -> str:
    """SHA-256 hex of the canonical proposal encoding."""
    return canonical_hash(
        {
            "channel": channel,
            "contract": contract,
            "function": function,
            "args": list(args),
            "creator": creator,
            "nonce": nonce,
        }
    )


@dataclass(frozen=True)
class Transaction:
    """An endorsed proposal with its read/write sets."""

    tx_id: str
    channel: str
    contract: str
    function: str
    args: tuple[str, ...]
    creator: str
    nonce: bytes
    read_set: tuple[KVRead, ...] = ()
    write_set: tuple[KVWrite, ...] = ()
    private_hashes: tuple[PrivateHash, ...] = ()
    endorsements: tuple[Endorsement, ...] = ()

    def __post_init__(self) -> None:
        keys = [w.key for w in self.write_set]
        if len(keys) != len(set(keys)):
            raise DuplicateWriteKey(f"write set of {self.tx_id[:12]}… repeats a key")

    @classmethod
    def create(
        cls,
        channel: str,
        contract: str,
        function: str,
        args: Sequence[str],
        creator: str,
        nonce: bytes,
        **rest,
    ) -> "Transaction":
        tx_id = compute_tx_id(channel, contract, function, args, creator, nonce)
        return cls(tx_id, channel, contract, function, tuple(args), creator, nonce, **rest)

    def recompute_tx_id(self) -> str:
        return compute_tx_id(
            self.channel, self.contract, self.function, self.args, self.creator, self.nonce
        )

    def response_dict(self) -> dict:
        """Execution result every endorser signs."""
        return {
            "tx_id": self.tx_id,
            "read_set": [r.to_dict() for r in self.read_set],
            "write_set": [w.to_dict() for w in self.write_set],
            "private_hashes": [p.to_dict() for p in self.private_hashes],
        }

    def endorsement_payload(self) -> bytes:
        return canonical_encode(self.response_dict())

    def to_dict(self) -> dict:
        return {
            "tx_id": self.tx_id,
            "channel": self.channel,
            "contract": self.contract,
            "function": self.function,
            "args": list(self.args),
            "creator": self.creator,
            "nonce": self.nonce,
            "read_set": [r.to_dict() for r in self.read_set],
            "write_set": [w.to_dict() for w in self.write_set],
            "private_hashes": [p.to_dict() for p in self.private_hashes],
            "endorsements": [e.to_dict() for e in self.endorsements],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Transaction":
        writes = []
        for w in data["write_set"]:
            if w["is_delete"]:
                if w["value"] is not None:
                    raise EncodingError("delete marker carries a value")
                writes.append(KVWrite(w["key"], None))
            else:
                writes.append(KVWrite(w["key"], b64decode(w["value"])))
        return cls(
            tx_id=data["tx_id"],
            channel=data["channel"],
            contract=data["contract"],
            function=data["function"],
            args=tuple(str(a) for a in data["args"]),
            creator=data["creator"],
            nonce=b64decode(data["nonce"]),
            read_set=tuple(
                KVRead(r["key"], Version.from_dict(r["version"])) for r in data["read_set"]
            ),
            write_set=tuple(writes),
            private_hashes=tuple(
                PrivateHash(p["collection"], p["key"], p["value_hash"])
                for p in data["private_hashes"]
            ),
            endorsements=tuple(
                Endorsement(e["key_id"], b64decode(e["signature"])) for e in data["endorsements"]
            ),
        )

    def envelope_hash(self) -> bytes:
        """Merkle leaf: SHA-256 of the full canonical transaction."""
        return sha256(canonical_encode(self.to_dict()))


def merkle_root(leaf_hashes: Sequence[bytes]) -> bytes:
    """Binary Merkle root; an odd node is paired with itself.

    An empty list gives 32 zero bytes and a single leaf is its own root.
    """
    level = list(leaf_hashes)
    if not level:
        return ZERO_HASH
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [sha256(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


def header_hash(height: int, prev_hash: bytes, merkle: bytes) -> bytes:
    header = {"height": height, "prev_hash": prev_hash, "merkle_root": merkle}
    return sha256(canonical_encode(header))


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    merkle_root: bytes
    transactions: tuple[Transaction, ...]
    validation_flags: tuple[TxFlag, ...]
    block_hash: bytes

    def with_flags(self, flags: Sequence[TxFlag]) -> "Block":
        return replace(self, validation_flags=tuple(flags))

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "prev_hash": self.prev_hash,
            "merkle_root": self.merkle_root,
            "block_hash": self.block_hash,
            "transactions": [tx.to_dict() for tx in self.transactions],
            "validation_flags": [flag.value for flag in self.validation_flags],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Block":
        height = data["height"]
        if not isinstance(height, int) or isinstance(height, bool):
            raise EncodingError("block height must be an integer")
        return cls(
            height=height,
            prev_hash=b64decode(data["prev_hash"]),
            merkle_root=b64decode(data["merkle_root"]),
            transactions=tuple(Transaction.from_dict(t) for t in data["transactions"]),
            validation_flags=tuple(TxFlag(f) for f in data["validation_flags"]),
            block_hash=b64decode(data["block_hash"]),
        )

    def encode(self) -> bytes:
        return canonical_encode(self.to_dict())

    @classmethod
    def decode(cls, blob: bytes) -> "Block":
        return cls.from_dict(canonical_decode(blob))


def make_block(
    height: int,
    prev_hash: bytes,
    transactions: Sequence[Transaction],
    flags: Sequence[TxFlag] = (),
) -> Block:
    """Assemble a block, computing its Merkle root and header hash."""
    merkle = merkle_root([tx.envelope_hash() for tx in transactions])
    return Block(
        height=height,
        prev_hash=prev_hash,
        merkle_root=merkle,
        transactions=tuple(transactions),
        validation_flags=tuple(flags),
        block_hash=header_hash(height, prev_hash, merkle),
    )


@dataclass(frozen=True)
class StateEntry:
    value: bytes
    version: Version


@dataclass(frozen=True)
class WorldState:
    """Immutable snapshot of a channel's key/value state."""

    channel: str
    entries: Mapping[str, StateEntry] = field(default_factory=dict)
    private_hashes: Mapping[tuple[str, str], tuple[str, Version]] = field(default_factory=dict)
    height: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", MappingProxyType(dict(self.entries)))
        object.__setattr__(self, "private_hashes", MappingProxyType(dict(self.private_hashes)))

    def version_of(self, key: str) -> Version | None:
        entry = self.entries.get(key)
        return entry.version if entry else None

    def to_dict(self) -> dict:
        return {
            "channel": self.channel,
            "height": self.height,
            "entries": {
                key: {"value": e.value, "version": e.version.to_dict()}
                for key, e in self.entries.items()
            },
            "private_hashes": [
                {"collection": c, "key": k, "value_hash": h, "version": v.to_dict()}
                for (c, k), (h, v) in sorted(self.private_hashes.items())
            ],
        }

    def digest(self) -> str:
        return canonical_hash(self.to_dict())


def get_state(state: WorldState, key: str) -> tuple[bytes, Version] | None:
    """Current (value, version) of a key, or None when absent or deleted."""
    entry = state.entries.get(key)
    if entry is None:
        return None
    return entry.value, entry.version


def get_private_hash(state: WorldState, collection: str, key: str) -> str | None:
    """On-chain hash of a private value; readable by every member."""
    found = state.private_hashes.get((collection, key))
    return found[0] if found else None


def apply_block(state: WorldState, block: Block) -> WorldState:
    """Fold the writes of a block's Valid transactions into a new snapshot."""
    entries = dict(state.entries)
    private = dict(state.private_hashes)
    for index, (tx, flag) in enumerate(zip(block.transactions, block.validation_flags)):
        if flag is not TxFlag.VALID:
            continue
        version = Version(block.height, index)
        for write in tx.write_set:
            if write.is_delete:
                entries.pop(write.key, None)
            else:
                entries[write.key] = StateEntry(write.value, version)
        for ph in tx.private_hashes:
            private[(ph.collection, ph.key)] = (ph.value_hash, version)
    return WorldState(state.channel, entries, private, block.height + 1)


@dataclass(frozen=True)
class ChainCheck:
    """Result of a chain validation: Ok, or the first bad height and why."""

    ok: bool
    height: int | None = None
    reason: ChainFault | None = None
    detail: str = ""

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        if self.ok:
            return "Ok"
        return f"FirstBadHeight({self.height}, {self.reason.value})" + (
            f": {self.detail}" if self.detail else ""
        )


CHAIN_OK = ChainCheck(True)


def _check_block(block: Block, expected_height: int, prev_hash: bytes) -> ChainCheck | None:
    h = expected_height
    if block.height != expected_height:
        return ChainCheck(False, h, ChainFault.HEIGHT_MISMATCH, f"stored height {block.height}")
    if block.prev_hash != prev_hash:
        return ChainCheck(False, h, ChainFault.PREV_HASH_MISMATCH)
    for tx in block.transactions:
        if tx.recompute_tx_id() != tx.tx_id:
            return ChainCheck(False, h, ChainFault.BAD_TX_ID, tx.tx_id)
    if merkle_root([tx.envelope_hash() for tx in block.transactions]) != block.merkle_root:
        return ChainCheck(False, h, ChainFault.BAD_MERKLE_ROOT)
    if header_hash(block.height, block.prev_hash, block.merkle_root) != block.block_hash:
        return ChainCheck(False, h, ChainFault.BAD_BLOCK_HASH)
    if len(block.validation_flags) != len(block.transactions):
        return ChainCheck(False, h, ChainFault.FLAG_COUNT_MISMATCH)
    return None


def validate_chain(blocks: Iterable[Block]) -> ChainCheck:
    """Walk from genesis and report the lowest height failing recomputation."""
    prev = ZERO_HASH
    for expected, block in enumerate(blocks):
        fault = _check_block(block, expected, prev)
        if fault is not None:
            return fault
        prev = block.block_hash
    return CHAIN_OK


def validate_serialized_chain(blobs: Sequence[bytes | None]) -> ChainCheck:
    """Validate block files given in height order (None marks a missing file)."""
    prev = ZERO_HASH
    for expected, blob in enumerate(blobs):
        if blob is None:
            return ChainCheck(False, expected, ChainFault.MISSING_BLOCK)
        try:
            block = Block.decode(blob)
        except (ValueError, KeyError, TypeError, AttributeError, LedgerError, EncodingError) as e:
            return ChainCheck(False, expected, ChainFault.UNREADABLE, type(e).__name__)
        fault = _check_block(block, expected, prev)
        if fault is not None:
            return fault
        if block.encode() != blob:
            return ChainCheck(False, expected, ChainFault.NON_CANONICAL)
        prev = block.block_hash
    return CHAIN_OK


@dataclass(frozen=True)
class HistoryEntry:
    tx_id: str
    value: bytes | None
    version: Version

    @property
    def is_delete(self) -> bool:
        return self.value is None


class Chain:
    """One channel's blocks plus the world state derived from them.

    Commits are serialized by a lock; readers take the current immutable
    snapshot, so they never observe a half-applied block.
    """

    def __init__(self, channel: str) -> None:
        self.channel = channel
        self._blocks: list[Block] = []
        self._state = WorldState(channel)
        self._tx_ids: set[str] = set()
        self._lock = threading.Lock()

    @property
    def blocks(self) -> tuple[Block, ...]:
        return tuple(self._blocks)

    @property
    def height(self) -> int:
        return len(self._blocks)

    @property
    def tip(self) -> Block | None:
        return self._blocks[-1] if self._blocks else None

    @property
    def tip_hash(self) -> bytes:
        return self._blocks[-1].block_hash if self._blocks else ZERO_HASH

    @property
    def state(self) -> WorldState:
        return self._state

    def contains_tx(self, tx_id: str) -> bool:
        return tx_id in self._tx_ids

    def append_block(self, block: Block) -> "Chain":
        with self._lock:
            expected = len(self._blocks)
            if block.height != expected:
                raise HeightMismatch(f"expected height {expected}, got {block.height}")
            if block.prev_hash != self.tip_hash:
                raise PrevHashMismatch(f"block {block.height} does not link to tip")
            if merkle_root([tx.envelope_hash() for tx in block.transactions]) != block.merkle_root:
                raise BadMerkleRoot(f"block {block.height} merkle root does not recompute")
            if header_hash(block.height, block.prev_hash, block.merkle_root) != block.block_hash:
                raise BadBlockHash(f"block {block.height} hash does not recompute")
            if len(block.validation_flags) != len(block.transactions):
                raise FlagCountMismatch(f"block {block.height} is missing validation flags")
            new_state = apply_block(self._state, block)
            self._blocks.append(block)
            self._tx_ids.update(tx.tx_id for tx in block.transactions)
            self._state = new_state
        logger.debug(
            "%s: committed block %d (%d txs)", self.channel, block.height, len(block.transactions)
        )
        return self

    def fingerprint(self) -> str:
        """Digest over block hashes, flags and the resulting state."""
        return canonical_hash(
            {
                "blocks": [
                    {"hash": b.block_hash, "flags": [f.value for f in b.validation_flags]}
                    for b in self._blocks
                ],
                "state": self._state.digest(),
            }
        )


def append_block(chain: Chain, block: Block) -> Chain:
    """Append a block after checking linkage, Merkle root and header hash."""
    return chain.append_block(block)


def read_history(chain: Chain, key: str) -> list[HistoryEntry]:
    """All Valid writes to a key, in commit order."""
    history = []
    for block in chain.blocks:
        for index, (tx, flag) in enumerate(zip(block.transactions, block.validation_flags)):
            if flag is not TxFlag.VALID:
                continue
            for write in tx.write_set:
                if write.key == key:
                    version = Version(block.height, index)
                    history.append(HistoryEntry(tx.tx_id, write.value, version))
    return history


def replay_state(channel: str, blocks: Iterable[Block]) -> WorldState:
    """Fresh fold over blocks from genesis."""
    state = WorldState(channel)
    for block in blocks:
        state = apply_block(state, block)
    return state


@dataclass
class PrivateStore:
    """Off-chain private data; only value hashes are chained."""

    collections: dict[str, dict[str, bytes]] = field(default_factory=dict)
    policy: dict[str, frozenset[str]] = field(default_factory=dict)

    def declare(self, collection: str, reader_orgs: Iterable[str]) -> None:
        self.policy[collection] = frozenset(reader_orgs)
        self.collections.setdefault(collection, {})

    def to_dict(self, collection: str) -> dict:
        return {
            "collection": collection,
            "readers": sorted(self.policy[collection]),
            "values": dict(self.collections.get(collection, {})),
        }


def _member_policy(store: PrivateStore, collection: str) -> frozenset[str]:
    if collection not in store.policy:
        raise UnknownCollection(f"collection {collection} is not declared")
    return store.policy[collection]


def put_private_data(
    store: PrivateStore,
    collection: str,
    key: str,
    value: bytes,
    reader_org: str,
) -> str:
    """Hold a value off-chain and return SHA-256(value) for the transaction.

    Args:
        store: Private store of the committing peer
        collection: Declared collection name
        key: Key within the collection
        value: Private bytes
        reader_org: Organization storing the value; must be a collection member

    Returns:
        Hex SHA-256 of value
    """
    members = _member_policy(store, collection)
    if reader_org not in members:
        raise AccessDenied(f"{reader_org} is not a member of {collection}")
    store.collections[collection][key] = value
    return sha256_hex(value)


def get_private_data(
    store: PrivateStore,
    collection: str,
    key: str,
    reader_org: str,
) -> bytes | None:
    """Read a private value; non-member organizations are refused."""
    members = _member_policy(store, collection)
    if reader_org not in members:
        raise ReadDenied(f"{reader_org} may not read {collection}")
    return store.collections[collection].get(key)


def check_private_data(state: WorldState, store: PrivateStore) -> ChainCheck:
    """Check every held private value against the hash its Valid transaction committed.

    Returns:
        ChainCheck at the height of the committing transaction on a mismatch, or with
        no height when a value has no committed hash at all
    """
    for collection, values in sorted(store.collections.items()):
        for key, value in sorted(values.items()):
            committed = state.private_hashes.get((collection, key))
            if committed is None:
                return ChainCheck(
                    False,
                    None,
                    ChainFault.PRIVATE_DATA_MISMATCH,
                    f"{collection}/{key} has no committed hash",
                )
            value_hash, version = committed
            if sha256_hex(value) != value_hash:
                return ChainCheck(
                    False,
                    version.block_height,
                    ChainFault.PRIVATE_DATA_MISMATCH,
                    f"{collection}/{key} does not hash to {value_hash[:16]}",
                )
    return CHAIN_OK


class LedgerStore:
    """Block files, state snapshot and private data under a ledger root.

    Layout per channel: ``<channel>/blocks/<height>.json``,
    ``<channel>/state.json`` and ``<channel>/private/<collection>.json``.
    """

    def __init__(self, root: Path) -> None:
        self.root = Path(root)

    def channel_dir(self, channel: str) -> Path:
        return self.root / channel

    def block_path(self, channel: str, height: int) -> Path:
        return self.channel_dir(channel) / "blocks" / f"{height}.json"

    def channels(self) -> list[str]:
        if not self.root.is_dir():
            return []
        return sorted(p.name for p in self.root.iterdir() if (p / "blocks").is_dir())

    def has_channel(self, channel: str) -> bool:
        return self.block_path(channel, 0).exists()

    def write_block(self, channel: str, block: Block) -> Path:
        path = self.block_path(channel, block.height)
        blob = block.encode()
        if path.exists():
            if path.read_bytes() != blob:
                raise BlockExists(f"{channel} already has a different block {block.height}")
            return path
        _atomic_write(path, blob)
        return path

    def read_block_blobs(self, channel: str) -> list[bytes | None]:
        """Raw block files in height order; gaps are None."""
        blocks_dir = self.channel_dir(channel) / "blocks"
        if not blocks_dir.is_dir():
            return []
        heights = {}
        for path in blocks_dir.glob("*.json"):
            try:
                heights[int(path.stem)] = path
            except ValueError:
                continue
        if not heights:
            return []
        return [
            heights[h].read_bytes() if h in heights else None for h in range(max(heights) + 1)
        ]

    def load_blocks(self, channel: str) -> list[Block]:
        return [Block.decode(blob) for blob in self.read_block_blobs(channel) if blob is not None]

    def validate(self, channel: str) -> ChainCheck:
        return validate_serialized_chain(self.read_block_blobs(channel))

    def write_state(self, channel: str, state: WorldState) -> Path:
        path = self.channel_dir(channel) / "state.json"
        _atomic_write(path, canonical_encode(state.to_dict()))
        return path

    def write_private(self, channel: str, store: PrivateStore) -> None:
        for collection in store.policy:
            path = self.channel_dir(channel) / "private" / f"{collection}.json"
            _atomic_write(path, canonical_encode(store.to_dict(collection)))

    def read_private(self, channel: str) -> PrivateStore:
        """Load the private collection files of a channel.

        Raises:
            PrivateDataUnreadable: If a collection file does not parse
        """
        store = PrivateStore()
        private_dir = self.channel_dir(channel) / "private"
        if not private_dir.is_dir():
            return store
        for path in sorted(private_dir.glob("*.json")):
            try:
                data = canonical_decode(path.read_bytes())
                collection = data["collection"]
                store.declare(collection, data["readers"])
                for key, value in data["values"].items():
                    store.collections[collection][key] = b64decode(value)
            except (ValueError, KeyError, TypeError, AttributeError, EncodingError) as e:
                raise PrivateDataUnreadable(f"{path}: {type(e).__name__}: {e}") from e
        return store

    def validate_private(self, channel: str, state: WorldState) -> ChainCheck:
        """Check the persisted private values of a channel against its replayed state."""
        try:
            store = self.read_private(channel)
        except PrivateDataUnreadable as e:
            return ChainCheck(False, None, ChainFault.UNREADABLE, str(e))
        return check_private_data(state, store)


def _atomic_write(path: Path, blob: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
