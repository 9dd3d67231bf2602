"""Peer replica: installed packages, per-channel chains and private data."""

import logging
from collections.abc import Mapping, Sequence
from functools import partial
from typing import Any

from ci_ledger.canonical import canonical_decode
from ci_ledger.chaincode import (
    CHANNEL_CONFIG_KEY,
    LIFECYCLE_CONTRACT,
    ContractPackage,
    ContractRegistry,
    ExecutionResult,
    InvocationContext,
    NotInstalled,
    NotReadOnly,
    UnknownContract,
    VersionConflict,
    WriteInReadOnly,
    contract_definition,
    execute,
)
from ci_ledger.identity import (
    AclPolicy,
    Action,
    Identity,
    Membership,
    SigningIdentity,
    default_policy,
    require_permission,
)
from ci_ledger.ledger import (
    Block,
    Chain,
    PrivateStore,
    TxFlag,
    get_private_data,
    get_state,
    put_private_data,
    read_history,
)
from ci_ledger.ordering import (
    BadProposal,
    TransactionProposal,
    UnknownChannel,
    validate_and_commit,
)

logger = logging.getLogger(__name__)


class Peer:
    """One endorsing and committing peer of an organization."""

    def __init__(
        self,
        signer: SigningIdentity,
        membership: Membership,
        registry: ContractRegistry,
        acl: AclPolicy | None = None,
    ) -> None:
        self.signer = signer
        self.membership = membership
        self.registry = registry
        self.acl = acl or default_policy()
        self.online = True
        self.installed: dict[str, ContractPackage] = {}
        self._chains: dict[str, Chain] = {}
        self._private: dict[str, PrivateStore] = {}
        self._transient: dict[str, Mapping[tuple[str, str], bytes]] = {}

    def __repr__(self) -> str:
        return f"Peer({self.name})"

    @property
    def name(self) -> str:
        return self.signer.identity.common_name

    @property
    def org(self) -> str:
        return self.signer.org

    @property
    def key_id(self) -> str:
        return self.signer.key_id

    @property
    def channels(self) -> list[str]:
        return sorted(self._chains)

    def sign(self, payload: bytes) -> bytes:
        return self.signer.sign(payload)

    def chain(self, channel: str) -> Chain:
        try:
            return self._chains[channel]
        except KeyError:
            raise UnknownChannel(f"{self.name} has not joined {channel}") from None

    def private_store(self, channel: str) -> PrivateStore:
        self.chain(channel)
        return self._private[channel]

    def install(self, package: ContractPackage, caller: SigningIdentity) -> str:
        """Install a contract package; reinstalling the identical package is a no-op."""
        require_permission(self.acl, caller.identity, Action.INSTALL_CONTRACT)
        registered = self.registry.get(package.name).package()
        if registered.version == package.version and registered.functions != package.functions:
            raise VersionConflict(
                f"{package.name} {package.version} differs from the registered code"
            )
        existing = self.installed.get(package.name)
        if existing is not None and existing.version == package.version:
            if existing.functions != package.functions:
                raise VersionConflict(f"{package.name} {package.version} is installed differently")
            return existing.package_id
        self.installed[package.name] = package
        logger.info("%s installed %s %s", self.name, package.name, package.version)
        return package.package_id

    def join(
        self, channel: str, blocks: Sequence[Block], caller: SigningIdentity | None = None
    ) -> None:
        """Join a channel by replaying its blocks from genesis."""
        require_permission(self.acl, (caller or self.signer).identity, Action.JOIN_CHANNEL)
        if not blocks:
            raise UnknownChannel(f"{channel} has no genesis block")
        chain = Chain(channel)
        for block in blocks:
            validate_and_commit(block, chain, self.membership)
        self._chains[channel] = chain
        self._private[channel] = PrivateStore()
        self._declare_collections(channel)
        logger.info("%s joined %s at height %d", self.name, channel, chain.height)

    def _declare_collections(self, channel: str) -> None:
        found = get_state(self._chains[channel].state, CHANNEL_CONFIG_KEY)
        if found is None:
            return
        config = canonical_decode(found[0])
        for collection, readers in sorted(config.get("collections", {}).items()):
            self._private[channel].declare(collection, readers)

    def _creator(self, proposal: TransactionProposal) -> Identity:
        check = self.membership.verify(proposal.creator, proposal.payload(), proposal.signature)
        if not check:
            raise BadProposal(f"proposal {proposal.tx_id[:12]}: {check.reason.value}")
        return self.membership.certificate(proposal.creator).identity

    def simulate(
        self, proposal: TransactionProposal, action: Action | None = None
    ) -> ExecutionResult:
        """Execute a proposal against this peer's current snapshot without committing.

        Raises:
            BadProposal: If the creator signature does not verify
            PermissionDenied: If the creator's role may not perform the action
            UnknownChannel, UnknownContract, UnknownFunction, NotInstalled
            ContractError: From the function body
        """
        creator = self._creator(proposal)
        target = self.registry.get(proposal.contract)
        fn = target.function(proposal.function)
        require_permission(self.acl, creator, action or fn.action)
        chain = self.chain(proposal.channel)
        if proposal.contract != LIFECYCLE_CONTRACT:
            if proposal.contract not in self.installed:
                raise NotInstalled(f"{proposal.contract} is not installed on {self.name}")
            if contract_definition(chain.state, proposal.contract) is None:
                raise UnknownContract(
                    f"{proposal.contract} is not initialized on {proposal.channel}"
                )
        ctx = InvocationContext(
            channel=proposal.channel,
            creator=creator,
            state=chain.state,
            history_source=partial(read_history, chain),
        )
        return execute(target, proposal.function, proposal.args, ctx)

    def query(self, proposal: TransactionProposal) -> Any:
        """Run a read-only function; no transaction is produced."""
        fn = self.registry.get(proposal.contract).function(proposal.function)
        if not fn.read_only:
            raise NotReadOnly(f"{proposal.contract}.{proposal.function} is not read-only")
        result = self.simulate(proposal, action=Action.QUERY)
        if result.write_set or result.private_hashes:
            raise WriteInReadOnly(f"{proposal.contract}.{proposal.function} attempted a write")
        return result.result

    def stage_private(self, tx_id: str, payload: Mapping[tuple[str, str], bytes]) -> None:
        """Hold private values until the carrying transaction commits."""
        if payload:
            self._transient[tx_id] = dict(payload)

    def commit(self, channel: str, block: Block) -> Block:
        """Validate and append an ordered block, then persist private values of Valid txs."""
        chain = self.chain(channel)
        committed = validate_and_commit(block, chain, self.membership)
        store = self._private[channel]
        for tx, flag in zip(committed.transactions, committed.validation_flags):
            payload = self._transient.pop(tx.tx_id, None)
            if flag is not TxFlag.VALID or not payload:
                continue
            for (collection, key), value in sorted(payload.items()):
                if self.org in store.policy.get(collection, ()):
                    put_private_data(store, collection, key, value, self.org)
        return committed

    def read_private(self, channel: str, collection: str, key: str) -> bytes | None:
        return get_private_data(self.private_store(channel), collection, key, self.org)

    def adopt_private(self, channel: str, store: PrivateStore) -> None:
        """Load persisted private values for the collections this org may read."""
        own = self.private_store(channel)
        for collection, values in store.collections.items():
            if self.org in own.policy.get(collection, ()):
                own.collections[collection].update(values)
