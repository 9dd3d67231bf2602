"""Scripted attacks against a workspace with a completed pipeline run, and their detectors."""

import logging
import random
import shutil
import tempfile
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

from ci_ledger.canonical import (
    EncodingError,
    canonical_decode,
    canonical_encode,
    sha256,
    sha256_hex,
)
from ci_ledger.chaincode import BUILTIN_CONTRACTS
from ci_ledger.demo import VULNERABLE_LOG4J_VERSIONS
from ci_ledger.identity import (
    Action,
    PermissionDenied,
    Role,
    check_permission,
    generate_org_materials,
)
from ci_ledger.ledger import Endorsement, LedgerStore, TxFlag
from ci_ledger.network import Network
from ci_ledger.pipeline import (
    ALLOWLIST_FILE,
    RUNS_DIR,
    DigestMismatch,
    PackagedImage,
    StageKind,
    StageStatus,
    open_network,
    stage_deploy,
    stage_depcheck,
)
from ci_ledger.settings import PipelineConfig, config_from_snapshot
from ci_ledger.vulnscan import Verdict, load_allowlist

logger = logging.getLogger(__name__)

ATTACK_REPORT = "attack-report.json"


class AttackError(Exception):
    """Base exception for the attack harness."""

    pass


class WorkspaceNotReady(AttackError):
    """The workspace has no successful pipeline run to attack."""

    pass


class AttackKind(str, Enum):
    ARTIFACT_TAMPER = "ArtifactTamper"
    LEDGER_REWRITE = "LedgerRewrite"
    UNAUTHORIZED_INVOKE = "UnauthorizedInvoke"
    REPLAY_TRANSACTION = "ReplayTransaction"
    DEPENDENCY_DOWNGRADE = "DependencyDowngrade"
    ENDORSEMENT_FORGERY = "EndorsementForgery"


class Stride(str, Enum):
    SPOOFING = "Spoofing"
    TAMPERING = "Tampering"
    REPUDIATION = "Repudiation"
    INFORMATION_DISCLOSURE = "InformationDisclosure"
    DENIAL_OF_SERVICE = "DenialOfService"
    ELEVATION_OF_PRIVILEGE = "ElevationOfPrivilege"


STRIDE_BY_KIND: dict[AttackKind, Stride] = {
    AttackKind.ARTIFACT_TAMPER: Stride.TAMPERING,
    AttackKind.LEDGER_REWRITE: Stride.TAMPERING,
    AttackKind.UNAUTHORIZED_INVOKE: Stride.ELEVATION_OF_PRIVILEGE,
    AttackKind.REPLAY_TRANSACTION: Stride.SPOOFING,
    AttackKind.DEPENDENCY_DOWNGRADE: Stride.TAMPERING,
    AttackKind.ENDORSEMENT_FORGERY: Stride.SPOOFING,
}

EXPECTED_DETECTION: dict[AttackKind, str] = {
    AttackKind.ARTIFACT_TAMPER: "stage_deploy: DigestMismatch",
    AttackKind.LEDGER_REWRITE: "validate_chain: FirstBadHeight",
    AttackKind.UNAUTHORIZED_INVOKE: "init_contract: PermissionDenied",
    AttackKind.REPLAY_TRANSACTION: "commit: DuplicateTxId",
    AttackKind.DEPENDENCY_DOWNGRADE: "dependency gate: Halt",
    AttackKind.ENDORSEMENT_FORGERY: "commit: BadSignature or PolicyFail",
}


def uncovered_stride() -> list[Stride]:
    covered = set(STRIDE_BY_KIND.values())
    return [s for s in Stride if s not in covered]


def derive_seed(base_seed: bytes, kind: AttackKind, index: int) -> int:
    """64-bit scenario seed from SHA-256(base_seed, kind, index)."""
    digest = sha256(base_seed + kind.value.encode() + index.to_bytes(8, "big"))
    return int.from_bytes(digest[:8], "big")


@dataclass(frozen=True)
class AttackScenario:
    kind: AttackKind
    seed: int

    @property
    def stride(self) -> Stride:
        return STRIDE_BY_KIND[self.kind]

    @property
    def expected_detection(self) -> str:
        return EXPECTED_DETECTION[self.kind]


@dataclass(frozen=True)
class ScenarioOutcome:
    scenario: AttackScenario
    detected: bool
    detail: str

    def to_dict(self) -> dict:
        return {
            "kind": self.scenario.kind.value,
            "seed": self.scenario.seed,
            "stride": self.scenario.stride.value,
            "expected": self.scenario.expected_detection,
            "detected": self.detected,
            "detail": self.detail,
        }


# workspace access


@dataclass(frozen=True)
class _Target:
    """What a clean run left in the workspace."""

    workspace: Path
    config: PipelineConfig
    image: PackagedImage
    manifest: Path
    feed: Path
    allowlist: tuple[str, ...]


def _latest_success(workspace: Path) -> dict:
    runs = sorted((Path(workspace) / RUNS_DIR).glob("*/run-report.json"))
    reports = []
    for path in runs:
        try:
            reports.append(canonical_decode(path.read_bytes()))
        except (ValueError, EncodingError):
            continue
    successes = [r for r in reports if r.get("overall") == "Success"]
    if not successes:
        raise WorkspaceNotReady(f"{workspace} has no successful pipeline run")
    return max(successes, key=lambda r: r["config"]["BUILD_NUMBER"])


def _stage(report: dict, kind: StageKind) -> dict:
    for result in report["stage_results"]:
        if result["kind"] == kind.value and result["status"] == StageStatus.SUCCESS.value:
            return result
    raise WorkspaceNotReady(f"run {report['run_id']} has no successful {kind.value} stage")


def load_target(workspace: Path) -> _Target:
    """Locate the packaged image, ledger and scan inputs of the latest clean run.

    Raises:
        WorkspaceNotReady: If no run completed with overall Success
    """
    workspace = Path(workspace)
    report = _latest_success(workspace)
    config = config_from_snapshot(report["config"], workspace)
    if Path(report["config"]["FABRIC_BIN"]).is_absolute():
        raise WorkspaceNotReady("attacks need FABRIC_BIN relative to the workspace")
    build = _stage(report, StageKind.BUILD)
    package = _stage(report, StageKind.PACKAGE)
    image = PackagedImage(
        name=config.image_name,
        tag=config.image_tag,
        digest=package["outputs"]["digest"],
        source_digest=build["outputs"]["source_digest"],
        container_name=package["outputs"]["container_name"],
        path=workspace / package["outputs"]["path"],
    )
    allowlist_path = workspace / ALLOWLIST_FILE
    allowlist = tuple(load_allowlist(allowlist_path)) if allowlist_path.is_file() else ()
    return _Target(
        workspace,
        config,
        image,
        workspace / "deps.json",
        workspace / "feed.json",
        allowlist,
    )


def _flip_bit(path: Path, rng: random.Random) -> int:
    data = bytearray(path.read_bytes())
    offset = rng.randrange(len(data))
    data[offset] ^= 1 << rng.randrange(8)
    path.write_bytes(bytes(data))
    return offset


def _application_blocks(net: Network, channel: str) -> list[int]:
    """Heights holding provenance, attestation or deployment transactions."""
    names = {c.name for c in BUILTIN_CONTRACTS}
    return [
        b.height
        for b in net.chain(channel).blocks
        if any(tx.contract in names for tx in b.transactions)
    ]


# attacks; inject=False runs the detector on the untouched workspace


def _artifact_tamper(target: _Target, rng: random.Random, inject: bool) -> tuple[bool, str]:
    if inject:
        offset = _flip_bit(target.image.path, rng)
        logger.debug("flipped a bit at offset %d of %s", offset, target.image.path)
    net = open_network(target.config)
    try:
        stage_deploy(net, target.image, None, target.config)
    except DigestMismatch:
        return True, f"DigestMismatch: archive no longer hashes to {target.image.digest[:16]}"
    return False, "archive digest matches the registered digest"


def _ledger_rewrite(target: _Target, rng: random.Random, inject: bool) -> tuple[bool, str]:
    channel = target.config.channel
    store = LedgerStore(target.config.fabric_bin / "ledger")
    height = None
    if inject:
        blobs = store.read_block_blobs(channel)
        height = rng.randrange(len(blobs))
        _flip_bit(store.block_path(channel, height), rng)
    check = store.validate(channel)
    if check:
        return False, "chain validates"
    if height is not None and check.height is not None and check.height > height:
        return False, f"{check} reported above the rewritten height {height}"
    return True, str(check)


def _unauthorized_invoke(target: _Target, rng: random.Random, inject: bool) -> tuple[bool, str]:
    net = open_network(target.config)
    if not inject:
        admin = net.admin()
        decision = check_permission(net.acl, admin.identity, Action.INIT_CONTRACT)
        return (not decision), decision.reason
    clients = [s for m in net.materials for s in m.signers(Role.CLIENT)]
    caller = clients[rng.randrange(len(clients))]
    contract = BUILTIN_CONTRACTS[rng.randrange(len(BUILTIN_CONTRACTS))]
    try:
        net.init_contract(
            target.config.channel,
            contract.name,
            contract.version,
            target.config.default_policy(),
            caller,
        )
    except PermissionDenied as e:
        return True, f"PermissionDenied: {e}"
    return False, f"{caller.identity.common_name} initialized {contract.name}"


def _replay_transaction(target: _Target, rng: random.Random, inject: bool) -> tuple[bool, str]:
    channel = target.config.channel
    net = open_network(target.config)
    if inject:
        heights = _application_blocks(net, channel)
        block = net.chain(channel).blocks[heights[rng.randrange(len(heights))]]
        tx = block.transactions[rng.randrange(len(block.transactions))]
    else:
        digest = sha256_hex(b"control/%d" % rng.getrandbits(64))
        endorsed = net.invoke_contract(
            channel, "provenance", "register", [digest, "control", "1", digest], net.client()
        )
        tx = endorsed.transaction
    net.submit(tx)
    block = net.flush(channel)[-1]
    flag = block.validation_flags[[t.tx_id for t in block.transactions].index(tx.tx_id)]
    detail = f"{tx.tx_id[:16]} at height {block.height}: {flag.value}"
    return flag is TxFlag.DUPLICATE_TX_ID, detail


def _dependency_downgrade(target: _Target, rng: random.Random, inject: bool) -> tuple[bool, str]:
    if inject:
        manifest = canonical_decode(target.manifest.read_bytes())
        deps = manifest["dependencies"] if isinstance(manifest, dict) else manifest
        version = VULNERABLE_LOG4J_VERSIONS[rng.randrange(len(VULNERABLE_LOG4J_VERSIONS))]
        log4j = [d for d in deps if (d["vendor"], d["product"]) == ("apache", "log4j")]
        if log4j:
            log4j[0]["version"] = version
        else:
            deps.append({"vendor": "apache", "product": "log4j", "version": version})
        target.manifest.write_bytes(canonical_encode(manifest))
    out_dir = Path(tempfile.mkdtemp(dir=target.workspace))
    report = stage_depcheck(target.manifest, target.feed, target.config, out_dir, target.allowlist)
    detail = f"verdict {report.verdict.value}, max score {report.max_score}"
    return report.verdict is Verdict.HALT, detail


def _endorsement_forgery(target: _Target, rng: random.Random, inject: bool) -> tuple[bool, str]:
    channel = target.config.channel
    net = open_network(target.config)
    digest = sha256_hex(b"forged/%d" % rng.getrandbits(64))
    endorsed = net.invoke_contract(
        channel, "provenance", "register", [digest, "forged", "1", digest], net.client()
    )
    tx = endorsed.transaction
    if inject:
        org = net.materials[rng.randrange(len(net.materials))].org
        rogue = generate_org_materials(org, 1, 0, rng.randbytes(32)).signers(Role.PEER)[0]
        signature = rogue.sign(tx.endorsement_payload())
        tx = replace(tx, endorsements=(Endorsement(rogue.key_id, signature),))
    net.submit(tx)
    block = net.flush(channel)[-1]
    flag = block.validation_flags[[t.tx_id for t in block.transactions].index(tx.tx_id)]
    detected = flag in (TxFlag.BAD_SIGNATURE, TxFlag.POLICY_FAIL)
    return detected, f"{tx.tx_id[:16]} at height {block.height}: {flag.value}"


ATTACKS: dict[AttackKind, Callable[[_Target, random.Random, bool], tuple[bool, str]]] = {
    AttackKind.ARTIFACT_TAMPER: _artifact_tamper,
    AttackKind.LEDGER_REWRITE: _ledger_rewrite,
    AttackKind.UNAUTHORIZED_INVOKE: _unauthorized_invoke,
    AttackKind.REPLAY_TRANSACTION: _replay_transaction,
    AttackKind.DEPENDENCY_DOWNGRADE: _dependency_downgrade,
    AttackKind.ENDORSEMENT_FORGERY: _endorsement_forgery,
}


def _run_on_copy(workspace: Path, scenario: AttackScenario, inject: bool) -> ScenarioOutcome:
    with tempfile.TemporaryDirectory(prefix="attack-") as tmp:
        copy = Path(tmp) / "workspace"
        shutil.copytree(workspace, copy)
        target = load_target(copy)
        rng = random.Random(scenario.seed)
        try:
            detected, detail = ATTACKS[scenario.kind](target, rng, inject)
        except Exception as e:
            # a crash instead of a detector firing counts as a miss
            logger.warning("%s seed %d raised %r", scenario.kind.value, scenario.seed, e)
            detected, detail = False, f"unexpected {type(e).__name__}: {e}"
    return ScenarioOutcome(scenario, detected, detail)


def execute_scenario(scenario: AttackScenario, workspace: Path) -> ScenarioOutcome:
    """Inject one attack into a fresh copy of the workspace and run its detector.

    Raises:
        WorkspaceNotReady: If the workspace has no successful pipeline run
    """
    load_target(workspace)
    outcome = _run_on_copy(Path(workspace), scenario, inject=True)
    logger.info(
        "%s seed %d: %s (%s)",
        scenario.kind.value,
        scenario.seed,
        "detected" if outcome.detected else "MISSED",
        outcome.detail,
    )
    return outcome


def control_run(workspace: Path, kinds: Iterable[AttackKind]) -> list[ScenarioOutcome]:
    """Run each detector on an untouched copy; detections here are false positives."""
    load_target(workspace)
    return [
        _run_on_copy(Path(workspace), AttackScenario(kind, 0), inject=False) for kind in kinds
    ]


@dataclass
class AttackReport:
    outcomes: list[ScenarioOutcome] = field(default_factory=list)
    false_positives: list[ScenarioOutcome] = field(default_factory=list)
    control_checked: int = 0

    @property
    def scenarios_run(self) -> int:
        return len(self.outcomes)

    @property
    def detected(self) -> int:
        return sum(1 for o in self.outcomes if o.detected)

    @property
    def missed(self) -> list[ScenarioOutcome]:
        return [o for o in self.outcomes if not o.detected]

    @property
    def ok(self) -> bool:
        return not self.missed and not self.false_positives

    def per_kind(self) -> dict[str, dict[str, int]]:
        summary: dict[str, dict[str, int]] = {}
        for o in self.outcomes:
            row = summary.setdefault(o.scenario.kind.value, {"run": 0, "detected": 0})
            row["run"] += 1
            row["detected"] += int(o.detected)
        return summary

    def stride_summary(self) -> dict[str, dict[str, int]]:
        summary: dict[str, dict[str, int]] = {}
        for o in self.outcomes:
            row = summary.setdefault(o.scenario.stride.value, {"run": 0, "detected": 0})
            row["run"] += 1
            row["detected"] += int(o.detected)
        return summary

    def to_dict(self) -> dict:
        return {
            "scenarios_run": self.scenarios_run,
            "detected": self.detected,
            "missed": [
                {"kind": o.scenario.kind.value, "seed": o.scenario.seed, "detail": o.detail}
                for o in self.missed
            ],
            "per_kind": self.per_kind(),
            "stride": self.stride_summary(),
            "uncovered_stride": [s.value for s in uncovered_stride()],
            "control_checked": self.control_checked,
            "false_positives": [o.to_dict() for o in self.false_positives],
            "scenarios": [o.to_dict() for o in self.outcomes],
        }

    def write(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(canonical_encode(self.to_dict()))
        return path


def run_suite(
    workspace: Path,
    kinds: Iterable[AttackKind | str],
    seeds_per_kind: int,
    base_seed: bytes,
    control: bool = True,
) -> AttackReport:
    """Run seeds_per_kind scenarios of every kind, each on its own workspace copy.

    Args:
        workspace: Workspace holding a successful pipeline run
        kinds: Attack kinds to run; empty gives an empty report
        seeds_per_kind: Scenarios per kind
        base_seed: Seed material every scenario seed derives from
        control: Also run the detectors on an untouched copy

    Returns:
        AttackReport; identical inputs give identical reports

    Raises:
        WorkspaceNotReady: If the workspace has no successful pipeline run
    """
    kinds = [AttackKind(k) for k in kinds]
    report = AttackReport()
    if not kinds:
        return report
    for kind in kinds:
        for index in range(seeds_per_kind):
            scenario = AttackScenario(kind, derive_seed(base_seed, kind, index))
            report.outcomes.append(execute_scenario(scenario, workspace))
    if control:
        checks = control_run(workspace, kinds)
        report.control_checked = len(checks)
        report.false_positives = [o for o in checks if o.detected]
    logger.info(
        "attack suite: %d run, %d detected, %d false positives",
        report.scenarios_run,
        report.detected,
        len(report.false_positives),
    )
    return report
