"""Contract runtime and the built-in provenance, attestation and deployment contracts.

Contracts are natively registered deterministic functions. A function runs
against a world-state snapshot through an InvocationContext, which records
the read/write set that becomes the transaction's rw-set.

World-state key layout (stable, for auditors reading snapshots)::

    artifact/<digest>            ArtifactRecord
    attest/<digest>/<seq>        ScanAttestation, seq counts from 0
    deploy/<env>/<name>          DeploymentRecord
    lifecycle/<contract>         contract definition and endorsement policy
    config/channel               channel configuration (genesis)
"""

import logging
import re
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

from ci_ledger.canonical import canonical_decode, canonical_encode, canonical_hash, sha256_hex
from ci_ledger.identity import Action, Identity
from ci_ledger.ledger import (
    HistoryEntry,
    KVRead,
    KVWrite,
    PrivateHash,
    Version,
    WorldState,
    get_state,
)

logger = logging.getLogger(__name__)

LIFECYCLE_CONTRACT = "_lifecycle"
SCAN_REPORT_COLLECTION = "scan-reports"
DIGEST_PATTERN = re.compile(r"^[0-9a-f]{64}$")


class ChaincodeError(Exception):
    """Error installing, activating or running a contract."""

    pass


class ContractError(ChaincodeError):
    """Error raised by a contract function body."""

    def __init__(self, code: str, message: str = "") -> None:
        self.code = code
        self.message = message
        super().__init__(f"{code}: {message}" if message else code)


class UnknownContract(ChaincodeError):
    pass


class UnknownFunction(ChaincodeError):
    pass


class WriteInReadOnly(ChaincodeError):
    """A query attempted to write state."""

    pass


class NotReadOnly(ChaincodeError):
    """Function is not declared read-only and cannot be queried."""

    pass


class VersionConflict(ChaincodeError):
    """Same name and version installed with different functions."""

    pass


class NotInstalled(ChaincodeError):
    pass


class AlreadyInitialized(ChaincodeError):
    pass


def artifact_key(digest: str) -> str:
    return f"artifact/{digest}"


def attest_key(digest: str, seq: int) -> str:
    return f"attest/{digest}/{seq}"


def deploy_key(environment: str, container_name: str) -> str:
    return f"deploy/{environment}/{container_name}"


def lifecycle_key(contract: str) -> str:
    return f"lifecycle/{contract}"


CHANNEL_CONFIG_KEY = "config/channel"


@dataclass(frozen=True)
class ContractPackage:
    """Installable contract: name, version and its function names."""

    name: str
    version: str
    functions: frozenset[str]

    @property
    def package_id(self) -> str:
        return canonical_hash(
            {"name": self.name, "version": self.version, "functions": sorted(self.functions)}
        )


@dataclass(frozen=True)
class ContractFunction:
    name: str
    handler: Callable[["InvocationContext", Sequence[str]], Any]
    read_only: bool = False
    action: Action = Action.INVOKE


@dataclass(frozen=True)
class Contract:
    name: str
    version: str
    functions: Mapping[str, ContractFunction]

    def package(self) -> ContractPackage:
        return ContractPackage(self.name, self.version, frozenset(self.functions))

    def function(self, name: str) -> ContractFunction:
        try:
            return self.functions[name]
        except KeyError:
            raise UnknownFunction(f"{self.name} has no function {name}") from None


def contract(name: str, version: str, *functions: ContractFunction) -> Contract:
    return Contract(name, version, {fn.name: fn for fn in functions})


@dataclass
class InvocationContext:
    """Execution context accumulating the read/write set of one invocation."""

    channel: str
    creator: Identity
    state: WorldState
    history_source: Callable[[str], list[HistoryEntry]] | None = None
    reads: dict[str, Version | None] = field(default_factory=dict)
    writes: dict[str, bytes | None] = field(default_factory=dict)
    private_puts: dict[tuple[str, str], bytes] = field(default_factory=dict)

    def get_state(self, key: str) -> bytes | None:
        if key in self.writes:
            return self.writes[key]
        found = get_state(self.state, key)
        if key not in self.reads:
            self.reads[key] = found[1] if found else None
        return found[0] if found else None

    def get_version(self, key: str) -> Version | None:
        self.get_state(key)
        return self.reads.get(key)

    def get_json(self, key: str) -> Any:
        raw = self.get_state(key)
        return canonical_decode(raw) if raw is not None else None

    def put_state(self, key: str, value: bytes) -> None:
        self.writes[key] = value

    def put_json(self, key: str, value: Any) -> None:
        self.writes[key] = canonical_encode(value)

    def del_state(self, key: str) -> None:
        self.writes[key] = None

    def put_private(self, collection: str, key: str, value: bytes) -> str:
        self.private_puts[(collection, key)] = value
        return sha256_hex(value)

    def history(self, key: str) -> list[HistoryEntry]:
        if self.history_source is None:
            return []
        return self.history_source(key)


@dataclass(frozen=True)
class ExecutionResult:
    """Deterministic outcome of one function execution."""

    read_set: tuple[KVRead, ...]
    write_set: tuple[KVWrite, ...]
    private_hashes: tuple[PrivateHash, ...]
    private_payload: Mapping[tuple[str, str], bytes]
    result: Any

    def rw_bytes(self) -> bytes:
        """Canonical rw-set; equal across peers for a deterministic execution."""
        return canonical_encode(
            {
                "read_set": [r.to_dict() for r in self.read_set],
                "write_set": [w.to_dict() for w in self.write_set],
                "private_hashes": [p.to_dict() for p in self.private_hashes],
            }
        )


def execute(
    target: Contract,
    function: str,
    args: Sequence[str],
    ctx: InvocationContext,
) -> ExecutionResult:
    """Run a contract function and collect its sorted read/write sets."""
    fn = target.function(function)
    result = fn.handler(ctx, list(args))
    return ExecutionResult(
        read_set=tuple(KVRead(k, ctx.reads[k]) for k in sorted(ctx.reads)),
        write_set=tuple(KVWrite(k, ctx.writes[k]) for k in sorted(ctx.writes)),
        private_hashes=tuple(
            PrivateHash(c, k, sha256_hex(v)) for (c, k), v in sorted(ctx.private_puts.items())
        ),
        private_payload=dict(ctx.private_puts),
        result=result,
    )


class ContractRegistry:
    """Natively registered contracts available to peers."""

    def __init__(self, contracts: Iterable[Contract] = ()) -> None:
        self._contracts: dict[str, Contract] = {}
        for c in contracts:
            self.register(c)

    def register(self, target: Contract) -> None:
        self._contracts[target.name] = target

    def get(self, name: str) -> Contract:
        try:
            return self._contracts[name]
        except KeyError:
            raise UnknownContract(f"no contract named {name}") from None

    def __contains__(self, name: object) -> bool:
        return name in self._contracts

    def names(self) -> list[str]:
        return sorted(self._contracts)


def _require_args(args: Sequence[str], count: int, usage: str) -> None:
    if len(args) < count:
        raise ContractError("BadArguments", f"expected {usage}")


def _require_digest(digest: str) -> None:
    if not DIGEST_PATTERN.match(digest):
        raise ContractError("MalformedDigest", f"{digest!r} is not 64 lowercase hex characters")


def _int_arg(value: str, name: str, low: int, high: int) -> int:
    try:
        number = int(value)
    except ValueError:
        raise ContractError("BadArguments", f"{name} must be an integer") from None
    if not low <= number <= high:
        raise ContractError("BadArguments", f"{name} must be within {low}..{high}")
    return number


def _artifact_record(ctx: InvocationContext, digest: str) -> dict | None:
    record = ctx.get_json(artifact_key(digest))
    if record is None:
        return None
    version = ctx.get_version(artifact_key(digest))
    return {**record, "registered_at": version.to_dict() if version else None}


# provenance


def _provenance_register(ctx: InvocationContext, args: Sequence[str]) -> dict:
    _require_args(args, 4, "register(digest, name, tag, source_digest)")
    digest, name, tag, source_digest = args[:4]
    _require_digest(digest)
    if not name or not tag:
        raise ContractError("EmptyField", "image name and tag must be nonempty")

    existing = ctx.get_json(artifact_key(digest))
    if existing is not None:
        same = (existing["name"], existing["tag"], existing["source_digest"]) == (
            name,
            tag,
            source_digest,
        )
        if not same:
            raise ContractError("DuplicateArtifact", f"{digest} is registered with other metadata")
        return {"status": "AlreadyRegistered", "digest": digest}

    ctx.put_json(
        artifact_key(digest),
        {
            "digest": digest,
            "name": name,
            "tag": tag,
            "source_digest": source_digest,
            "builder": ctx.creator.key_id,
        },
    )
    return {"status": "Registered", "digest": digest}


def _provenance_verify(ctx: InvocationContext, args: Sequence[str]) -> dict:
    _require_args(args, 1, "verify(digest)")
    digest = args[0]
    _require_digest(digest)
    record = _artifact_record(ctx, digest)
    if record is None:
        return {"status": "Unknown", "digest": digest}
    return {"status": "Registered", "digest": digest, "record": record}


def _provenance_history(ctx: InvocationContext, args: Sequence[str]) -> list[dict]:
    _require_args(args, 1, "history(digest)")
    _require_digest(args[0])
    return [
        {
            "tx_id": entry.tx_id,
            "version": entry.version.to_dict(),
            "record": canonical_decode(entry.value) if entry.value is not None else None,
        }
        for entry in ctx.history(artifact_key(args[0]))
    ]


PROVENANCE = contract(
    "provenance",
    "1.0",
    ContractFunction("register", _provenance_register),
    ContractFunction("verify", _provenance_verify, read_only=True),
    ContractFunction("history", _provenance_history, read_only=True),
)


# attestation


def _latest_attestation(ctx: InvocationContext, digest: str) -> tuple[int, dict | None]:
    """Probe attest/<digest>/0.. and return (next free seq, latest record)."""
    seq = 0
    latest = None
    while True:
        record = ctx.get_json(attest_key(digest, seq))
        if record is None:
            return seq, latest
        latest = record
        seq += 1


def _attestation_record(ctx: InvocationContext, args: Sequence[str]) -> dict:
    _require_args(
        args, 6, "record(digest, report_hash, max_score, verdict, threshold, unverified_count)"
    )
    digest, report_hash, max_score_s, verdict, threshold_s, unverified_s = args[:6]
    _require_digest(digest)
    max_score = _int_arg(max_score_s, "max_score", 0, 100)
    threshold = _int_arg(threshold_s, "threshold", 0, 100)
    unverified = _int_arg(unverified_s, "unverified_count", 0, 1_000_000)
    if verdict not in ("Pass", "Halt"):
        raise ContractError("BadArguments", "verdict must be Pass or Halt")
    expected = "Halt" if max_score >= threshold or unverified > 0 else "Pass"
    if verdict != expected:
        raise ContractError("InconsistentVerdict", f"scores imply {expected}, got {verdict}")

    if ctx.get_state(artifact_key(digest)) is None:
        raise ContractError("UnknownArtifact", digest)

    seq, _ = _latest_attestation(ctx, digest)
    record = {
        "artifact_digest": digest,
        "report_hash": report_hash,
        "max_score": max_score,
        "threshold": threshold,
        "unverified_count": unverified,
        "verdict": verdict,
        "scanner": ctx.creator.key_id,
        "seq": seq,
    }
    if len(args) > 6 and args[6]:
        report_bytes = args[6].encode("utf-8")
        if sha256_hex(report_bytes) != report_hash:
            raise ContractError("ReportHashMismatch", "attached report does not match report_hash")
        ctx.put_private(SCAN_REPORT_COLLECTION, f"{digest}/{seq}", report_bytes)
    ctx.put_json(attest_key(digest, seq), record)
    return {"status": "Recorded", "seq": seq, "verdict": verdict}


def _attestation_latest(ctx: InvocationContext, args: Sequence[str]) -> dict:
    _require_args(args, 1, "latest(digest)")
    _require_digest(args[0])
    _, latest = _latest_attestation(ctx, args[0])
    if latest is None:
        return {"status": "None", "digest": args[0]}
    return {"status": "Attested", "digest": args[0], "attestation": latest}


ATTESTATION = contract(
    "attestation",
    "1.0",
    ContractFunction("record", _attestation_record),
    ContractFunction("latest", _attestation_latest, read_only=True),
)


# deployment


def _deployment_record(ctx: InvocationContext, args: Sequence[str]) -> dict:
    _require_args(args, 3, "record(digest, environment, container_name)")
    digest, environment, container_name = args[:3]
    _require_digest(digest)
    if not environment or not container_name:
        raise ContractError("EmptyField", "environment and container name must be nonempty")
    if ctx.get_state(artifact_key(digest)) is None:
        raise ContractError("UnknownArtifact", digest)
    _, latest = _latest_attestation(ctx, digest)
    if latest is None or latest["verdict"] != "Pass":
        raise ContractError("NoPassingAttestation", f"latest attestation of {digest} is not Pass")
    ctx.put_json(
        deploy_key(environment, container_name),
        {
            "artifact_digest": digest,
            "environment": environment,
            "container_name": container_name,
            "deployer": ctx.creator.key_id,
            "attestation_seq": latest["seq"],
        },
    )
    return {"status": "Deployed", "key": deploy_key(environment, container_name)}


def _deployment_status(ctx: InvocationContext, args: Sequence[str]) -> dict:
    _require_args(args, 2, "status(environment, container_name)")
    record = ctx.get_json(deploy_key(args[0], args[1]))
    if record is None:
        return {"status": "NotDeployed", "environment": args[0], "container_name": args[1]}
    return {"status": "Deployed", "record": record}


DEPLOYMENT = contract(
    "deployment",
    "1.0",
    ContractFunction("record", _deployment_record),
    ContractFunction("status", _deployment_status, read_only=True),
)


# lifecycle system contract


def _lifecycle_init(ctx: InvocationContext, args: Sequence[str]) -> dict:
    _require_args(args, 4, "init(name, version, package_id, policy)")
    name, version, package_id, policy = args[:4]
    if ctx.get_state(lifecycle_key(name)) is not None:
        raise ContractError("AlreadyInitialized", name)
    ctx.put_json(
        lifecycle_key(name),
        {"name": name, "version": version, "package_id": package_id, "policy": policy},
    )
    return {"status": "Initialized", "name": name, "version": version}


LIFECYCLE = contract(
    LIFECYCLE_CONTRACT,
    "1.0",
    ContractFunction("init", _lifecycle_init, action=Action.INIT_CONTRACT),
)

BUILTIN_CONTRACTS: tuple[Contract, ...] = (PROVENANCE, ATTESTATION, DEPLOYMENT)


def default_registry() -> ContractRegistry:
    """Registry holding the lifecycle system contract and the built-ins."""
    return ContractRegistry((LIFECYCLE, *BUILTIN_CONTRACTS))


def contract_definition(state: WorldState, name: str) -> dict | None:
    """Committed lifecycle definition of a contract, if activated."""
    found = get_state(state, lifecycle_key(name))
    return canonical_decode(found[0]) if found else None
