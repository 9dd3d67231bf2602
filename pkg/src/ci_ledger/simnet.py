"""Seeded discrete-event simulation of clients, the orderer and committing peers.

Time is simulated only: integer milliseconds advanced by a heap of events
ordered by (time, sequence). Every random choice draws from one
``random.Random(seed)``, so identical inputs give identical event logs.
"""

import heapq
import logging
import random
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any

from ci_ledger.canonical import canonical_encode, sha256_hex
from ci_ledger.chaincode import BUILTIN_CONTRACTS, ChaincodeError
from ci_ledger.identity import IdentityError, Role, generate_consortium
from ci_ledger.ledger import Block, Chain, LedgerError
from ci_ledger.network import Network
from ci_ledger.ordering import BlockCutConfig, ConfigError, EndorsedTransaction, OrderingError

logger = logging.getLogger(__name__)

ORDERER = "orderer"


@dataclass(frozen=True)
class Partition:
    """Two node groups that cannot reach each other until heal_ms."""

    group_a: frozenset[str]
    group_b: frozenset[str]
    heal_ms: int
    start_ms: int = 0

    def separates(self, a: str, b: str, now_ms: int) -> bool:
        if not self.start_ms <= now_ms < self.heal_ms:
            return False
        forward = a in self.group_a and b in self.group_b
        return forward or (a in self.group_b and b in self.group_a)


@dataclass(frozen=True)
class SimNetConfig:
    seed: int = 0
    latency_range: tuple[int, int] = (5, 50)
    drop_probability: Fraction | float = Fraction(0)
    partitions: tuple[Partition, ...] = ()
    retransmit_ms: int = 100
    max_attempts: int = 100
    submit_interval_ms: int = 10

    def __post_init__(self) -> None:
        low, high = self.latency_range
        if not 0 <= low <= high:
            raise ConfigError(f"latency range {self.latency_range} must satisfy 0 <= min <= max")
        probability = self.drop_probability
        if not isinstance(probability, Fraction):
            probability = Fraction(str(probability))
            object.__setattr__(self, "drop_probability", probability)
        if not 0 <= probability <= 1:
            raise ConfigError(f"drop probability {probability} is outside [0, 1]")
        if self.max_attempts < 1 or self.retransmit_ms < 1:
            raise ConfigError("max_attempts and retransmit_ms must be positive")


@dataclass(frozen=True)
class Topology:
    """Organizations and peers around the single ordering node."""

    n_orgs: int = 2
    peers_per_org: int = 2
    clients_per_org: int = 1
    channel: str = "main"
    key_seed: bytes = bytes(32)
    cut: BlockCutConfig = field(default_factory=BlockCutConfig)

    def __post_init__(self) -> None:
        if self.n_orgs < 1 or self.peers_per_org < 1:
            raise ConfigError("topology needs at least one org with at least one peer")
        if self.clients_per_org < 1:
            raise ConfigError("topology needs a client per org to submit the workload")


@dataclass(frozen=True)
class WorkloadItem:
    contract: str
    function: str
    args: tuple[str, ...]


def default_workload(count: int, seed: int = 0) -> list[WorkloadItem]:
    """Distinct provenance registrations."""
    items = []
    for i in range(count):
        digest = sha256_hex(f"simnet/{seed}/{i}".encode())
        source = sha256_hex(f"simnet-src/{seed}/{i}".encode())
        items.append(WorkloadItem("provenance", "register", (digest, "sim-app", f"v{i}", source)))
    return items


@dataclass(frozen=True)
class SimEvent:
    time_ms: int
    seq: int
    kind: str
    src: str
    dst: str
    detail: str = ""

    def to_dict(self) -> dict:
        return {
            "t": self.time_ms,
            "seq": self.seq,
            "type": self.kind,
            "src": self.src,
            "dst": self.dst,
            "detail": self.detail,
        }


@dataclass
class SimResult:
    channel: str
    chains: dict[str, Chain]
    orderer_height: int
    events: list[SimEvent]
    end_time_ms: int

    def chain_hashes(self) -> dict[str, str]:
        return {name: chain.fingerprint() for name, chain in sorted(self.chains.items())}

    @property
    def converged(self) -> bool:
        heights = {chain.height for chain in self.chains.values()}
        return heights == {self.orderer_height} and len(set(self.chain_hashes().values())) == 1

    def events_jsonl(self) -> bytes:
        return b"".join(canonical_encode(e.to_dict()) + b"\n" for e in self.events)

    def write_events(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.events_jsonl())
        return path


class _Simulation:
    def __init__(
        self,
        topology: Topology,
        config: SimNetConfig,
        workload: Sequence[WorkloadItem],
    ) -> None:
        self.topology = topology
        self.config = config
        self.workload = list(workload)
        self.rng = random.Random(config.seed)
        self.channel = topology.channel
        materials = generate_consortium(
            topology.n_orgs, topology.peers_per_org, topology.clients_per_org, topology.key_seed
        )
        self.net = Network(materials, cut_config=topology.cut, nonce_source=self._nonce)
        self.clients = [s for m in materials for s in m.signers(Role.CLIENT)]
        self.peers = {p.name: p for p in self.net.peers}
        self.events: list[SimEvent] = []
        self._queue: list[tuple[int, int, Callable[..., None], tuple[Any, ...]]] = []
        self._seq = 0
        self._buffers: dict[str, dict[int, Block]] = {name: {} for name in self.peers}
        self._pulling: set[str] = set()
        self._timer_at: int | None = None
        self.now = 0

    def _nonce(self) -> bytes:
        return bytes(self.rng.getrandbits(8) for _ in range(16))

    def _bootstrap(self) -> None:
        """Instant channel setup before simulated time starts."""
        net = self.net
        net.create_channel(self.channel, net.admin())
        for peer in net.peers:
            net.join_channel(peer, self.channel)
        orgs = ", ".join(sorted(net.membership.orgs))
        for target in BUILTIN_CONTRACTS:
            net.install_everywhere(target.package())
            net.init_contract(
                self.channel, target.name, target.version, f"OutOf(1, {orgs})", net.admin()
            )

    def log(self, kind: str, src: str, dst: str, detail: str = "") -> None:
        self._seq += 1
        self.events.append(SimEvent(self.now, self._seq, kind, src, dst, detail))

    def schedule(self, at_ms: int, action: Callable[..., None], *args: Any) -> None:
        self._seq += 1
        heapq.heappush(self._queue, (at_ms, self._seq, action, args))

    def send(
        self, kind: str, src: str, dst: str, payload: Any, detail: str, attempt: int = 1
    ) -> None:
        for partition in self.config.partitions:
            if partition.separates(src, dst, self.now):
                self.log("defer", src, dst, f"{kind} {detail}")
                self.schedule(
                    partition.heal_ms, self.send, kind, src, dst, payload, detail, attempt
                )
                return
        if self.rng.random() < self.config.drop_probability:
            if attempt < self.config.max_attempts:
                self.log("drop", src, dst, f"{kind} {detail} attempt {attempt}")
                retry_at = self.now + self.config.retransmit_ms
                self.schedule(retry_at, self.send, kind, src, dst, payload, detail, attempt + 1)
            else:
                self.log("lost", src, dst, f"{kind} {detail}")
            return
        latency = self.rng.randint(*self.config.latency_range)
        self.log("send", src, dst, f"{kind} {detail}")
        self.schedule(self.now + latency, self.receive, kind, src, dst, payload, detail)

    def receive(self, kind: str, src: str, dst: str, payload: Any, detail: str) -> None:
        self.log("recv", src, dst, f"{kind} {detail}")
        if kind == "submit":
            self._on_submit(payload)
        elif kind == "deliver":
            self._on_deliver(dst, payload)
        elif kind == "pull":
            self._on_pull(src, payload)

    def propose(self, index: int) -> None:
        item = self.workload[index]
        client = self.clients[index % len(self.clients)]
        try:
            endorsed = self.net.invoke_contract(
                self.channel, item.contract, item.function, item.args, client
            )
        except (ChaincodeError, OrderingError, IdentityError, LedgerError) as e:
            self.log("reject", client.identity.common_name, "", f"{index} {type(e).__name__}")
            return
        name = client.identity.common_name
        self.log("endorse", name, "", f"{index} {endorsed.tx_id[:16]}")
        self.send("submit", name, ORDERER, endorsed, endorsed.tx_id[:16])

    def _on_submit(self, endorsed: EndorsedTransaction) -> None:
        for peer in self.net.channel_peers(self.channel):
            peer.stage_private(endorsed.tx_id, endorsed.private_payload)
        self.net.orderer.submit(endorsed, self.now)
        if self.net.orderer.pending(self.channel) >= self.topology.cut.max_tx_per_block:
            self.cut()
        else:
            self._arm_timer()

    def _arm_timer(self) -> None:
        oldest = self.net.orderer.oldest_arrival(self.channel)
        if oldest is None:
            return
        due = oldest + self.topology.cut.max_wait_ms
        if self._timer_at is None or due < self._timer_at:
            self._timer_at = due
            self.schedule(due, self._on_timer, due)

    def _on_timer(self, due: int) -> None:
        if self._timer_at == due:
            self._timer_at = None
            self.cut()

    def cut(self) -> None:
        for block in self.net.orderer.cut(self.channel, self.now):
            self.log("cut", ORDERER, "", f"height {block.height} txs {len(block.transactions)}")
            for name in sorted(self.peers):
                self.send("deliver", ORDERER, name, block, f"height {block.height}")
        self._arm_timer()

    def _on_deliver(self, name: str, block: Block) -> None:
        peer = self.peers[name]
        chain = peer.chain(self.channel)
        if block.height < chain.height:
            return
        self._buffers[name][block.height] = block
        while chain.height in self._buffers[name]:
            committed = peer.commit(self.channel, self._buffers[name].pop(chain.height))
            self.log("commit", name, "", f"height {committed.height}")
        if name in self._pulling and not self._buffers[name]:
            self._pulling.discard(name)
        if self._buffers[name] and name not in self._pulling:
            self._pulling.add(name)
            self.send("pull", name, ORDERER, chain.height, f"from {chain.height}")

    def _on_pull(self, name: str, start: int) -> None:
        for block in self.net.orderer.blocks(self.channel, start):
            self.send("deliver", ORDERER, name, block, f"height {block.height}")

    def _lagging(self) -> list[str]:
        tip = self.net.orderer.height(self.channel)
        return [n for n, p in sorted(self.peers.items()) if p.chain(self.channel).height < tip]

    def run(self) -> SimResult:
        self._bootstrap()
        for index in range(len(self.workload)):
            self.schedule(index * self.config.submit_interval_ms, self.propose, index)
        rounds = 0
        while True:
            while self._queue:
                self.now, _, action, args = heapq.heappop(self._queue)
                action(*args)
            lagging = self._lagging()
            if not lagging or rounds >= self.config.max_attempts:
                break
            rounds += 1
            for name in lagging:
                self._pulling.add(name)
                height = self.peers[name].chain(self.channel).height
                self.send("pull", name, ORDERER, height, f"from {height} (anti-entropy)")
        result = SimResult(
            channel=self.channel,
            chains={name: p.chain(self.channel) for name, p in self.peers.items()},
            orderer_height=self.net.orderer.height(self.channel),
            events=self.events,
            end_time_ms=self.now,
        )
        logger.info(
            "simnet seed %d: %d events, %d blocks, converged=%s",
            self.config.seed,
            len(self.events),
            result.orderer_height,
            result.converged,
        )
        return result


def run_simnet(
    topology: Topology,
    config: SimNetConfig,
    workload: Iterable[WorkloadItem] | None = None,
) -> SimResult:
    """Run a seeded simulation of proposals flowing through one orderer to every peer.

    Args:
        topology: Orgs, peers and block-cut settings
        config: Seed, latency, drop probability and partitions
        workload: Proposals to submit; defaults to 20 distinct registrations

    Returns:
        SimResult with every peer's final chain and the event log

    Raises:
        ConfigError: If the topology or config is empty or inconsistent
    """
    items = list(workload) if workload is not None else default_workload(20, config.seed)
    return _Simulation(topology, config, items).run()
