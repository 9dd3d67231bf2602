"""Execute-order-validate: endorsement policies, block cutting, validation and the orderer."""

import logging
import re
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING

from ci_ledger.canonical import canonical_decode, canonical_encode
from ci_ledger.chaincode import CHANNEL_CONFIG_KEY, LIFECYCLE_CONTRACT, contract_definition
from ci_ledger.identity import (
    AclPolicy,
    Action,
    Membership,
    Role,
    SigningIdentity,
    default_policy,
    require_permission,
)
from ci_ledger.ledger import (
    ZERO_HASH,
    Block,
    Chain,
    ChainCheck,
    ChainFault,
    Endorsement,
    Transaction,
    TxFlag,
    Version,
    WorldState,
    compute_tx_id,
    get_state,
    make_block,
    validate_chain,
)

if TYPE_CHECKING:
    from ci_ledger.peer import Peer

logger = logging.getLogger(__name__)


class OrderingError(Exception):
    """Error endorsing, ordering or committing transactions."""

    pass


class EndorsementMismatch(OrderingError):
    """Endorsing peers produced different read/write sets."""

    pass


class PeerUnavailable(OrderingError):
    pass


class UnknownChannel(OrderingError):
    pass


class BadProposal(OrderingError):
    """Proposal signature does not verify under the creator's certificate."""

    pass


class PolicyError(OrderingError):
    """Malformed endorsement policy expression."""

    pass


class ConfigError(OrderingError):
    pass


# endorsement policies


@dataclass(frozen=True)
class Org:
    name: str


@dataclass(frozen=True)
class And:
    children: tuple["EndorsementPolicy", ...]

    def __post_init__(self) -> None:
        if not self.children:
            raise PolicyError("And needs at least one operand")


@dataclass(frozen=True)
class Or:
    children: tuple["EndorsementPolicy", ...]

    def __post_init__(self) -> None:
        if not self.children:
            raise PolicyError("Or needs at least one operand")


@dataclass(frozen=True)
class OutOf:
    k: int
    children: tuple["EndorsementPolicy", ...]

    def __post_init__(self) -> None:
        if not 1 <= self.k <= len(self.children):
            raise PolicyError(f"OutOf({self.k}) over {len(self.children)} operands")


EndorsementPolicy = Org | And | Or | OutOf


def evaluate_policy(policy: EndorsementPolicy, valid_orgs: Iterable[str]) -> bool:
    """Structural evaluation of a policy tree against the orgs with valid endorsements."""
    orgs = valid_orgs if isinstance(valid_orgs, (set, frozenset)) else set(valid_orgs)
    if isinstance(policy, Org):
        return policy.name in orgs
    if isinstance(policy, And):
        return all(evaluate_policy(c, orgs) for c in policy.children)
    if isinstance(policy, Or):
        return any(evaluate_policy(c, orgs) for c in policy.children)
    if isinstance(policy, OutOf):
        return sum(evaluate_policy(c, orgs) for c in policy.children) >= policy.k
    raise PolicyError(f"not a policy node: {policy!r}")


def policy_orgs(policy: EndorsementPolicy) -> set[str]:
    """Every org name mentioned in a policy."""
    if isinstance(policy, Org):
        return {policy.name}
    return set().union(*(policy_orgs(c) for c in policy.children))


_TOKEN = re.compile(r"\s*(?:(\d+)|([A-Za-z_][A-Za-z0-9_.@-]*)|(\()|(\))|(,))")


def _tokenize(text: str) -> list[str]:
    tokens = []
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        match = _TOKEN.match(text, pos)
        if not match:
            raise PolicyError(f"unexpected character at {pos} in {text!r}")
        tokens.append(next(g for g in match.groups() if g is not None))
        pos = match.end()
    return tokens


def parse_policy(text: str) -> EndorsementPolicy:
    """Parse ``OutOf(2, Org1, Org2)``, ``And(...)``, ``Or(...)`` or a bare org name."""
    tokens = _tokenize(text)
    if not tokens:
        raise PolicyError("empty policy")
    pos = 0

    def expect(token: str) -> None:
        nonlocal pos
        if pos >= len(tokens) or tokens[pos] != token:
            raise PolicyError(f"expected {token!r} in {text!r}")
        pos += 1

    def node() -> EndorsementPolicy:
        nonlocal pos
        if pos >= len(tokens):
            raise PolicyError(f"unexpected end of {text!r}")
        name = tokens[pos]
        pos += 1
        if name in ("(", ")", ","):
            raise PolicyError(f"unexpected {name!r} in {text!r}")
        if pos < len(tokens) and tokens[pos] == "(" and name in ("And", "Or", "OutOf"):
            pos += 1
            k = None
            if name == "OutOf":
                if pos >= len(tokens) or not tokens[pos].isdigit():
                    raise PolicyError(f"OutOf needs a count in {text!r}")
                k = int(tokens[pos])
                pos += 1
                expect(",")
            children = [node()]
            while pos < len(tokens) and tokens[pos] == ",":
                pos += 1
                children.append(node())
            expect(")")
            if name == "And":
                return And(tuple(children))
            if name == "Or":
                return Or(tuple(children))
            return OutOf(k, tuple(children))
        if name.isdigit():
            raise PolicyError(f"count {name} outside OutOf in {text!r}")
        return Org(name)

    policy = node()
    if pos != len(tokens):
        raise PolicyError(f"trailing input in {text!r}")
    return policy


def format_policy(policy: EndorsementPolicy) -> str:
    if isinstance(policy, Org):
        return policy.name
    inner = ", ".join(format_policy(c) for c in policy.children)
    if isinstance(policy, OutOf):
        return f"OutOf({policy.k}, {inner})"
    return f"{type(policy).__name__}({inner})"


# proposals and endorsement


@dataclass(frozen=True)
class TransactionProposal:
    """Signed request to execute a contract function."""

    channel: str
    contract: str
    function: str
    args: tuple[str, ...]
    creator: str
    nonce: bytes
    signature: bytes = b""

    @property
    def tx_id(self) -> str:
        return compute_tx_id(
            self.channel, self.contract, self.function, self.args, self.creator, self.nonce
        )

    def payload(self) -> bytes:
        return canonical_encode(
            {
                "channel": self.channel,
                "contract": self.contract,
                "function": self.function,
                "args": list(self.args),
                "creator": self.creator,
                "nonce": self.nonce,
            }
        )

    @classmethod
    def signed(
        cls,
        signer: SigningIdentity,
        channel: str,
        contract: str,
        function: str,
        args: Sequence[str],
        nonce: bytes,
    ) -> "TransactionProposal":
        unsigned = cls(channel, contract, function, tuple(args), signer.key_id, nonce)
        return replace(unsigned, signature=signer.sign(unsigned.payload()))


@dataclass(frozen=True)
class EndorsedTransaction:
    """A transaction with its endorsements, plus the off-chain private payload."""

    transaction: Transaction
    private_payload: Mapping[tuple[str, str], bytes] = field(default_factory=dict)
    result: object = None

    @property
    def tx_id(self) -> str:
        return self.transaction.tx_id


def endorse_proposal(
    proposal: TransactionProposal,
    endorsing_peers: Sequence["Peer"],
) -> EndorsedTransaction:
    """Execute a proposal on every endorsing peer and collect signatures.

    Args:
        proposal: Signed proposal
        endorsing_peers: Peers whose signatures the transaction will carry

    Returns:
        EndorsedTransaction carrying one endorsement per peer

    Raises:
        PeerUnavailable: If an endorsing peer is offline
        EndorsementMismatch: If peers disagree on the read/write set
    """
    if not endorsing_peers:
        raise PeerUnavailable("no endorsing peers")
    results = []
    for peer in endorsing_peers:
        if not peer.online:
            raise PeerUnavailable(f"{peer.name} is unreachable")
        results.append(peer.simulate(proposal))

    reference = results[0]
    for peer, result in zip(endorsing_peers[1:], results[1:]):
        if result.rw_bytes() != reference.rw_bytes():
            logger.warning("%s diverges on %s", peer.name, proposal.tx_id[:12])
            raise EndorsementMismatch(
                f"{peer.name} produced a different read/write set than {endorsing_peers[0].name}"
            )

    tx = Transaction.create(
        proposal.channel,
        proposal.contract,
        proposal.function,
        proposal.args,
        proposal.creator,
        proposal.nonce,
        read_set=reference.read_set,
        write_set=reference.write_set,
        private_hashes=reference.private_hashes,
    )
    payload = tx.endorsement_payload()
    endorsements = tuple(Endorsement(peer.key_id, peer.sign(payload)) for peer in endorsing_peers)
    return EndorsedTransaction(
        transaction=replace(tx, endorsements=endorsements),
        private_payload=reference.private_payload,
        result=reference.result,
    )


# block cutting


@dataclass(frozen=True)
class BlockCutConfig:
    max_tx_per_block: int = 10
    max_wait_ms: int = 500

    def __post_init__(self) -> None:
        if self.max_tx_per_block < 1:
            raise ConfigError("max_tx_per_block must be at least 1")
        if self.max_wait_ms < 0:
            raise ConfigError("max_wait_ms must be non-negative")


@dataclass(frozen=True)
class PendingTx:
    transaction: Transaction
    arrival_ms: int


def cut_blocks(
    pending: Sequence[PendingTx],
    config: BlockCutConfig,
    clock_ms: int | None = None,
) -> list[list[Transaction]]:
    """Greedily batch pending transactions in arrival order.

    A batch closes when it reaches max_tx_per_block, or once max_wait_ms has
    elapsed since its oldest transaction. With clock_ms None every remaining
    transaction is flushed into a final batch.

    Returns:
        Closed batches; transactions still waiting are not included
    """
    batches: list[list[Transaction]] = []
    current: list[Transaction] = []
    oldest = 0
    for item in pending:
        if current and item.arrival_ms - oldest >= config.max_wait_ms:
            batches.append(current)
            current = []
        if not current:
            oldest = item.arrival_ms
        current.append(item.transaction)
        if len(current) == config.max_tx_per_block:
            batches.append(current)
            current = []
    if current and (clock_ms is None or clock_ms - oldest >= config.max_wait_ms):
        batches.append(current)
    return batches


# validation


def channel_orgs(state: WorldState) -> list[str]:
    found = get_state(state, CHANNEL_CONFIG_KEY)
    return list(canonical_decode(found[0])["orgs"]) if found else []


def policy_for(state: WorldState, contract: str) -> EndorsementPolicy | None:
    """Endorsement policy governing a contract on a channel.

    The lifecycle contract needs any single channel member; application
    contracts use the policy recorded when they were initialized.
    """
    if contract == LIFECYCLE_CONTRACT:
        orgs = channel_orgs(state)
        return Or(tuple(Org(o) for o in orgs)) if orgs else None
    definition = contract_definition(state, contract)
    if definition is None:
        return None
    return parse_policy(definition["policy"])


def compute_flags(
    block: Block,
    state: WorldState,
    seen_tx_ids: Callable[[str], bool],
    membership: Membership,
) -> list[TxFlag]:
    """Assign a validation flag to every transaction of a block, in order.

    Checks run DuplicateTxId, BadSignature, PolicyFail then MvccConflict.
    Reads are compared against committed state overlaid with the writes of
    earlier Valid transactions in the same block.
    """
    if block.height == 0:
        return [TxFlag.VALID] * len(block.transactions)

    flags: list[TxFlag] = []
    in_block: set[str] = set()
    overlay: dict[str, Version | None] = {}
    for index, tx in enumerate(block.transactions):
        if seen_tx_ids(tx.tx_id) or tx.tx_id in in_block:
            flags.append(TxFlag.DUPLICATE_TX_ID)
            continue
        in_block.add(tx.tx_id)

        payload = tx.endorsement_payload()
        endorsing_orgs = set()
        bad_signature = False
        for endorsement in tx.endorsements:
            cert = membership.certificate(endorsement.key_id)
            if (
                cert is None
                or cert.identity.role is not Role.PEER
                or not membership.verify(endorsement.key_id, payload, endorsement.signature)
            ):
                bad_signature = True
                continue
            endorsing_orgs.add(cert.identity.org)
        if bad_signature:
            flags.append(TxFlag.BAD_SIGNATURE)
            continue

        policy = policy_for(state, tx.contract)
        if policy is None or not evaluate_policy(policy, endorsing_orgs):
            flags.append(TxFlag.POLICY_FAIL)
            continue

        conflict = False
        for read in tx.read_set:
            current = overlay[read.key] if read.key in overlay else state.version_of(read.key)
            if current != read.version:
                conflict = True
                break
        if conflict:
            flags.append(TxFlag.MVCC_CONFLICT)
            continue

        flags.append(TxFlag.VALID)
        version = Version(block.height, index)
        for write in tx.write_set:
            overlay[write.key] = None if write.is_delete else version
    return flags


def validate_and_commit(block: Block, chain: Chain, membership: Membership) -> Block:
    """Flag every transaction of an ordered block and append it to the chain.

    Args:
        block: Block as cut by the orderer (flags are recomputed)
        chain: Channel chain of the committing peer
        membership: Consortium roots and certificates

    Returns:
        The committed block carrying its validation flags

    Raises:
        HeightMismatch, PrevHashMismatch, BadMerkleRoot, BadBlockHash: From the ledger
    """
    flags = compute_flags(block, chain.state, chain.contains_tx, membership)
    committed = block.with_flags(flags)
    chain.append_block(committed)
    invalid = sum(1 for f in flags if f is not TxFlag.VALID)
    if invalid:
        logger.info(
            "%s block %d: %d invalid of %d", chain.channel, block.height, invalid, len(flags)
        )
    return committed


def audit_chain(blocks: Sequence[Block], membership: Membership) -> ChainCheck:
    """Structural validation followed by a full validation replay.

    A stored flag that differs from the one replay derives is reported as
    FlagMismatch at that height.
    """
    structural = validate_chain(blocks)
    if not structural:
        return structural
    channel = blocks[0].transactions[0].channel if blocks and blocks[0].transactions else ""
    replay = Chain(channel)
    for block in blocks:
        expected = compute_flags(block, replay.state, replay.contains_tx, membership)
        if tuple(expected) != block.validation_flags:
            index = next(
                i for i, (a, b) in enumerate(zip(expected, block.validation_flags)) if a != b
            )
            return ChainCheck(
                False,
                block.height,
                ChainFault.FLAG_MISMATCH,
                f"tx {index}: stored {block.validation_flags[index].value}, "
                f"replay {expected[index].value}",
            )
        replay.append_block(block)
    return ChainCheck(True)


# orderer


class Orderer:
    """Single ordering node: queues endorsed transactions and cuts blocks per channel."""

    def __init__(
        self,
        signer: SigningIdentity,
        config: BlockCutConfig | None = None,
        acl: AclPolicy | None = None,
    ) -> None:
        require_permission(acl or default_policy(), signer.identity, Action.ORDER)
        self.signer = signer
        self.config = config or BlockCutConfig()
        self._pending: dict[str, list[PendingTx]] = {}
        self._blocks: dict[str, list[Block]] = {}

    @property
    def channels(self) -> list[str]:
        return sorted(self._blocks)

    def has_channel(self, channel: str) -> bool:
        return channel in self._blocks

    def register_channel(self, channel: str, blocks: Sequence[Block]) -> None:
        """Adopt an existing chain (genesis or a reloaded workspace)."""
        self._blocks[channel] = list(blocks)
        self._pending.setdefault(channel, [])

    def blocks(self, channel: str, start: int = 0) -> list[Block]:
        if channel not in self._blocks:
            raise UnknownChannel(channel)
        return self._blocks[channel][start:]

    def height(self, channel: str) -> int:
        return len(self.blocks(channel))

    def genesis(self, channel: str, config_tx: Transaction) -> Block:
        if channel in self._blocks:
            raise OrderingError(f"channel {channel} already has a genesis block")
        block = make_block(0, ZERO_HASH, [config_tx], [TxFlag.VALID])
        self.register_channel(channel, [block])
        return block

    def pending(self, channel: str) -> int:
        return len(self._pending.get(channel, []))

    def oldest_arrival(self, channel: str) -> int | None:
        queue = self._pending.get(channel)
        return queue[0].arrival_ms if queue else None

    def submit(self, endorsed: EndorsedTransaction | Transaction, now_ms: int = 0) -> None:
        tx = endorsed.transaction if isinstance(endorsed, EndorsedTransaction) else endorsed
        if tx.channel not in self._blocks:
            raise UnknownChannel(tx.channel)
        if tx.recompute_tx_id() != tx.tx_id:
            raise BadProposal(f"tx_id {tx.tx_id[:12]} does not match its proposal fields")
        self._pending[tx.channel].append(PendingTx(tx, now_ms))

    def cut(self, channel: str, now_ms: int | None = None) -> list[Block]:
        """Cut ready batches into blocks; now_ms None flushes everything pending."""
        queue = self._pending.get(channel, [])
        batches = cut_blocks(queue, self.config, now_ms)
        blocks = []
        chain = self._blocks[channel]
        for batch in batches:
            prev = chain[-1].block_hash if chain else ZERO_HASH
            block = make_block(len(chain), prev, batch)
            chain.append(block)
            blocks.append(block)
            logger.debug("%s: cut block %d with %d txs", channel, block.height, len(batch))
        taken = sum(len(b) for b in batches)
        self._pending[channel] = queue[taken:]
        return blocks
