"""In-process consortium network: channels, contract lifecycle, transactions and the workspace."""

import itertools
import logging
import secrets
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

from ci_ledger.canonical import EncodingError, canonical_decode, canonical_encode, sha256
from ci_ledger.chaincode import (
    CHANNEL_CONFIG_KEY,
    LIFECYCLE_CONTRACT,
    SCAN_REPORT_COLLECTION,
    AlreadyInitialized,
    ContractPackage,
    ContractRegistry,
    NotInstalled,
    contract_definition,
    default_registry,
)
from ci_ledger.identity import (
    AclPolicy,
    Action,
    Membership,
    OrgMaterials,
    Role,
    SigningIdentity,
    UnknownKey,
    default_policy,
    load_all_materials,
    require_permission,
    save_materials,
)
from ci_ledger.ledger import (
    ZERO_HASH,
    Block,
    Chain,
    ChainCheck,
    ChainFault,
    Endorsement,
    KVWrite,
    LedgerError,
    LedgerStore,
    Transaction,
    TxFlag,
    replay_state,
)
from ci_ledger.ordering import (
    BlockCutConfig,
    ConfigError,
    EndorsedTransaction,
    EndorsementPolicy,
    Orderer,
    OrderingError,
    PeerUnavailable,
    TransactionProposal,
    UnknownChannel,
    audit_chain,
    channel_orgs,
    endorse_proposal,
    format_policy,
    parse_policy,
    policy_for,
    policy_orgs,
)
from ci_ledger.peer import Peer

logger = logging.getLogger(__name__)

CHANNEL_CONFIG_CONTRACT = "_config"
NETWORK_FILE = "network.json"


class NetworkError(Exception):
    """Error operating the network or its workspace."""

    pass


class ChannelExists(NetworkError):
    pass


class NotBootstrapped(NetworkError):
    """Workspace holds no crypto materials yet."""

    pass


class CorruptWorkspace(NetworkError):
    """A persisted chain fails validation."""

    def __init__(self, channel: str, check: ChainCheck) -> None:
        self.channel = channel
        self.check = check
        super().__init__(f"{channel}: {check}")


@dataclass(frozen=True)
class Receipt:
    """Outcome of a transaction that went through ordering and commit."""

    transaction: Transaction
    flag: TxFlag | None
    result: Any = None

    @property
    def tx_id(self) -> str:
        return self.transaction.tx_id

    @property
    def valid(self) -> bool:
        return self.flag is TxFlag.VALID


class TipNonces:
    """Nonce source derived from a channel's tip hash and a per-instance counter.

    Attach the network after constructing it. Identical ledgers and identical
    call sequences yield identical transaction ids.
    """

    def __init__(self, channel: str) -> None:
        self.channel = channel
        self.network: Network | None = None
        self._counter = itertools.count()

    def __call__(self) -> bytes:
        tip = ZERO_HASH
        if self.network is not None and self.network.orderer.has_channel(self.channel):
            tip = self.network.orderer.blocks(self.channel)[-1].block_hash
        return sha256(tip + next(self._counter).to_bytes(8, "big"))[:16]


class Network:
    """Peers of every organization plus the single orderer, wired in process."""

    def __init__(
        self,
        materials: Iterable[OrgMaterials],
        registry: ContractRegistry | None = None,
        acl: AclPolicy | None = None,
        cut_config: BlockCutConfig | None = None,
        nonce_source: Callable[[], bytes] | None = None,
    ) -> None:
        self.materials = list(materials)
        if not self.materials:
            raise ConfigError("a network needs at least one organization")
        self.membership = Membership.from_materials(self.materials)
        self.registry = registry or default_registry()
        self.acl = acl or default_policy()
        self.peers = [
            Peer(signer, self.membership, self.registry, self.acl)
            for mat in self.materials
            for signer in mat.signers(Role.PEER)
        ]
        ordering = [m for m in self.materials if m.ordering and m.signers(Role.ORDERER)]
        if not ordering:
            raise ConfigError("no organization provides an orderer identity")
        self.orderer = Orderer(ordering[0].signers(Role.ORDERER)[0], cut_config, self.acl)
        self._nonce = nonce_source or (lambda: secrets.token_bytes(16))
        self.clock_ms = 0

    # identities

    def org(self, name: str) -> OrgMaterials:
        for mat in self.materials:
            if mat.org == name:
                return mat
        raise UnknownKey(f"no organization named {name}")

    @property
    def ordering_org(self) -> str:
        return self.membership.ordering_org

    def identity(self, common_name: str) -> SigningIdentity:
        for mat in self.materials:
            try:
                return mat.by_name(common_name)
            except UnknownKey:
                continue
        raise UnknownKey(f"no identity named {common_name}")

    def admin(self, org: str | None = None) -> SigningIdentity:
        return self.org(org or self.ordering_org).admin()

    def client(self, org: str | None = None) -> SigningIdentity:
        clients = self.org(org or self.ordering_org).signers(Role.CLIENT)
        if not clients:
            raise UnknownKey(f"{org or self.ordering_org} has no client identity")
        return clients[0]

    def peer(self, name: str) -> Peer:
        for peer in self.peers:
            if peer.name == name:
                return peer
        raise UnknownKey(f"no peer named {name}")

    def channel_peers(self, channel: str, online_only: bool = False) -> list[Peer]:
        return [
            p for p in self.peers if channel in p.channels and (p.online or not online_only)
        ]

    def chain(self, channel: str) -> Chain:
        """Committed chain of the first joined peer (all honest peers agree)."""
        peers = self.channel_peers(channel)
        if not peers:
            raise UnknownChannel(channel)
        return peers[0].chain(channel)

    # channels

    def create_channel(
        self,
        channel: str,
        creator: SigningIdentity,
        orgs: Sequence[str] | None = None,
        collections: Mapping[str, Sequence[str]] | None = None,
    ) -> Block:
        """Commit a channel's genesis block carrying its configuration."""
        require_permission(self.acl, creator.identity, Action.CREATE_CHANNEL)
        if self.orderer.has_channel(channel):
            raise ChannelExists(channel)
        if collections is None:
            collections = {SCAN_REPORT_COLLECTION: [self.ordering_org]}
        config = {
            "name": channel,
            "orgs": sorted(orgs or self.membership.orgs),
            "collections": {name: sorted(readers) for name, readers in collections.items()},
        }
        tx = Transaction.create(
            channel,
            CHANNEL_CONFIG_CONTRACT,
            "create",
            [channel],
            creator.key_id,
            self._nonce(),
            write_set=(KVWrite(CHANNEL_CONFIG_KEY, canonical_encode(config)),),
        )
        signature = creator.sign(tx.endorsement_payload())
        tx = replace(tx, endorsements=(Endorsement(creator.key_id, signature),))
        block = self.orderer.genesis(channel, tx)
        logger.info("created channel %s for %s", channel, ", ".join(config["orgs"]))
        return block

    def join_channel(self, peer: Peer, channel: str, caller: SigningIdentity | None = None) -> Peer:
        """Replay the channel's blocks onto a peer.

        Raises:
            UnknownChannel: If the channel has no genesis block
            PermissionDenied: If the caller's role may not join channels
        """
        if not self.orderer.has_channel(channel):
            raise UnknownChannel(channel)
        members = self.channel_peers(channel)
        peer.join(channel, self.orderer.blocks(channel), caller)
        for other in members:
            peer.adopt_private(channel, other.private_store(channel))
        return peer

    def sync(self, peer: Peer, channel: str) -> list[Block]:
        """Commit blocks an offline peer missed."""
        chain = peer.chain(channel)
        return [peer.commit(channel, b) for b in self.orderer.blocks(channel, chain.height)]

    # lifecycle

    def install_contract(
        self, peer: Peer, package: ContractPackage, caller: SigningIdentity
    ) -> str:
        return peer.install(package, caller)

    def install_everywhere(self, package: ContractPackage) -> str:
        """Each org admin installs the package on that org's peers."""
        package_id = package.package_id
        for peer in self.peers:
            peer.install(package, self.admin(peer.org))
        return package_id

    def init_contract(
        self,
        channel: str,
        name: str,
        version: str,
        policy: EndorsementPolicy | str,
        caller: SigningIdentity,
    ) -> Receipt:
        """Activate an installed contract on a channel with its endorsement policy.

        Raises:
            PermissionDenied: If the caller may not initialize contracts
            NotInstalled: If some channel peer lacks the package
            AlreadyInitialized: If the contract is already active on the channel
        """
        require_permission(self.acl, caller.identity, Action.INIT_CONTRACT)
        peers = self.channel_peers(channel)
        if not peers:
            raise UnknownChannel(channel)
        package_id = None
        for peer in peers:
            package = peer.installed.get(name)
            if package is None or package.version != version:
                raise NotInstalled(f"{name} {version} is not installed on {peer.name}")
            package_id = package.package_id
        if contract_definition(self.chain(channel).state, name) is not None:
            raise AlreadyInitialized(f"{name} is already initialized on {channel}")
        if isinstance(policy, str):
            policy = parse_policy(policy)
        unknown = policy_orgs(policy) - set(channel_orgs(self.chain(channel).state))
        if unknown:
            raise ConfigError(f"policy names orgs outside {channel}: {sorted(unknown)}")
        receipt = self.transact(
            channel,
            LIFECYCLE_CONTRACT,
            "init",
            [name, version, package_id, format_policy(policy)],
            caller,
        )
        if not receipt.valid:
            raise OrderingError(f"activation of {name} was flagged {receipt.flag.value}")
        logger.info("initialized %s %s on %s", name, version, channel)
        return receipt

    # transactions

    def propose(
        self,
        channel: str,
        contract: str,
        function: str,
        args: Sequence[str],
        creator: SigningIdentity,
    ) -> TransactionProposal:
        return TransactionProposal.signed(creator, channel, contract, function, args, self._nonce())

    def endorsers_for(self, channel: str, contract: str) -> list[Peer]:
        """First online peer of each org the contract's policy mentions."""
        chain = self.chain(channel)
        policy = policy_for(chain.state, contract)
        orgs = policy_orgs(policy) if policy is not None else set(channel_orgs(chain.state))
        chosen = []
        for org in sorted(orgs):
            for peer in self.channel_peers(channel, online_only=True):
                if peer.org == org:
                    chosen.append(peer)
                    break
        if not chosen:
            raise PeerUnavailable(f"no online endorser for {contract} on {channel}")
        return chosen

    def invoke_contract(
        self,
        channel: str,
        contract: str,
        function: str,
        args: Sequence[str],
        creator: SigningIdentity,
        endorsers: Sequence[Peer] | None = None,
    ) -> EndorsedTransaction:
        """Execute a function on the endorsing peers; nothing commits until flushed."""
        proposal = self.propose(channel, contract, function, args, creator)
        return endorse_proposal(proposal, endorsers or self.endorsers_for(channel, contract))

    def submit(self, endorsed: EndorsedTransaction | Transaction) -> None:
        tx = endorsed.transaction if isinstance(endorsed, EndorsedTransaction) else endorsed
        if isinstance(endorsed, EndorsedTransaction):
            for peer in self.channel_peers(tx.channel):
                peer.stage_private(tx.tx_id, endorsed.private_payload)
        self.orderer.submit(tx, self.clock_ms)

    def deliver(self, channel: str, blocks: Sequence[Block]) -> list[Block]:
        """Hand ordered blocks to every online peer of the channel."""
        committed = []
        for block in blocks:
            peers = self.channel_peers(channel, online_only=True)
            results = [p.commit(channel, block) for p in peers]
            if results:
                committed.append(results[0])
        return committed

    def flush(self, channel: str) -> list[Block]:
        """Cut everything pending on a channel and commit it."""
        return self.deliver(channel, self.orderer.cut(channel))

    def tx_flag(self, channel: str, tx_id: str) -> TxFlag | None:
        for block in reversed(self.chain(channel).blocks):
            for tx, flag in zip(block.transactions, block.validation_flags):
                if tx.tx_id == tx_id:
                    return flag
        return None

    def transact(
        self,
        channel: str,
        contract: str,
        function: str,
        args: Sequence[str],
        creator: SigningIdentity,
    ) -> Receipt:
        """Invoke, order and commit one transaction."""
        endorsed = self.invoke_contract(channel, contract, function, args, creator)
        self.submit(endorsed)
        self.flush(channel)
        return Receipt(endorsed.transaction, self.tx_flag(channel, endorsed.tx_id), endorsed.result)

    def query_contract(
        self,
        channel: str,
        contract: str,
        function: str,
        args: Sequence[str],
        creator: SigningIdentity,
    ) -> Any:
        """Evaluate a read-only function on a peer of the creator's org when possible."""
        online = self.channel_peers(channel, online_only=True)
        if not online:
            raise PeerUnavailable(f"no online peer on {channel}")
        own = [p for p in online if p.org == creator.org]
        peer = (own or online)[0]
        return peer.query(self.propose(channel, contract, function, args, creator))

    # workspace

    def save(self, root: Path) -> None:
        """Persist crypto materials, block files, state snapshots and the peer layout."""
        root = Path(root)
        for mat in self.materials:
            save_materials(mat, root / "crypto")
        store = LedgerStore(root / "ledger")
        for channel in self.orderer.channels:
            members = self.channel_peers(channel)
            if not members:
                continue
            chain = members[0].chain(channel)
            for block in chain.blocks:
                store.write_block(channel, block)
            store.write_state(channel, chain.state)
            readers = [p for p in members if p.org == self.ordering_org] or members
            store.write_private(channel, readers[0].private_store(channel))
        layout = {
            "installed": {
                p.name: [
                    {"name": pkg.name, "version": pkg.version, "functions": sorted(pkg.functions)}
                    for pkg in sorted(p.installed.values(), key=lambda pkg: pkg.name)
                ]
                for p in self.peers
            },
            "joined": {
                ch: [p.name for p in self.channel_peers(ch)] for ch in self.orderer.channels
            },
        }
        (root / NETWORK_FILE).write_bytes(canonical_encode(layout))

    @classmethod
    def open(
        cls,
        root: Path,
        registry: ContractRegistry | None = None,
        cut_config: BlockCutConfig | None = None,
        nonce_source: Callable[[], bytes] | None = None,
    ) -> "Network":
        """Rebuild a network from its workspace, validating every stored chain first.

        Raises:
            NotBootstrapped: If the workspace has no crypto materials
            CorruptWorkspace: If a stored chain fails structural or replay validation, or a
                private value does not match its committed hash
        """
        root = Path(root)
        materials = load_all_materials(root / "crypto")
        if not materials:
            raise NotBootstrapped(f"no crypto materials under {root}")
        net = cls(
            materials, registry=registry, cut_config=cut_config, nonce_source=nonce_source
        )
        try:
            layout = canonical_decode((root / NETWORK_FILE).read_bytes())
        except FileNotFoundError:
            layout = {"installed": {}, "joined": {}}
        except (ValueError, EncodingError) as e:
            raise NetworkError(f"unreadable {NETWORK_FILE}: {e}") from e

        for peer_name, packages in layout.get("installed", {}).items():
            peer = net.peer(peer_name)
            for pkg in packages:
                peer.installed[pkg["name"]] = ContractPackage(
                    pkg["name"], pkg["version"], frozenset(pkg["functions"])
                )

        store = LedgerStore(root / "ledger")
        for channel in store.channels():
            check = store.validate(channel)
            if not check:
                raise CorruptWorkspace(channel, check)
            blocks = store.load_blocks(channel)
            check = audit_chain(blocks, net.membership)
            if not check:
                raise CorruptWorkspace(channel, check)
            check = store.validate_private(channel, replay_state(channel, blocks))
            if not check:
                raise CorruptWorkspace(channel, check)
            net.orderer.register_channel(channel, blocks)
            private = store.read_private(channel)
            for peer_name in layout.get("joined", {}).get(channel, []):
                peer = net.peer(peer_name)
                try:
                    peer.join(channel, blocks)
                except LedgerError as e:
                    raise CorruptWorkspace(
                        channel, ChainCheck(False, None, ChainFault.UNREADABLE, str(e))
                    ) from e
                peer.adopt_private(channel, private)
        logger.debug("opened workspace %s with channels %s", root, net.orderer.channels)
        return net
