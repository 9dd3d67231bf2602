"""DAG pipeline engine: Build, Package, DepCheck, LedgerBootstrap and Deploy stages."""

import asyncio
import io
import json
import logging
import os
import shlex
import subprocess
import tarfile
import threading
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

from ci_ledger.canonical import canonical_encode, canonical_hash, sha256_hex
from ci_ledger.chaincode import BUILTIN_CONTRACTS, ChaincodeError, contract_definition
from ci_ledger.identity import IdentityError, generate_consortium
from ci_ledger.ledger import LedgerError
from ci_ledger.network import Network, NetworkError, TipNonces
from ci_ledger.ordering import OrderingError
from ci_ledger.settings import PipelineConfig, PipelineError, expand_vars
from ci_ledger.vulnscan import (
    ScanError,
    ScanReport,
    Verdict,
    load_allowlist,
    load_feed,
    load_manifest,
    render_report_text,
    scan_manifest,
)

logger = logging.getLogger(__name__)

RUNS_DIR = "runs"
DIST_DIR = "dist"
ALLOWLIST_FILE = "allowlist.txt"


class ParseError(PipelineError):
    """Pipeline definition is not valid JSON or violates the schema."""

    pass


class CycleDetected(PipelineError):
    def __init__(self, path: Sequence[str]) -> None:
        self.path = list(path)
        super().__init__(f"dependency cycle: {' -> '.join(self.path)}")


class UnknownDependency(PipelineError):
    pass


class MissingSource(PipelineError):
    pass


class BuildCommandFailed(PipelineError):
    def __init__(self, exit_code: int, message: str = "") -> None:
        self.exit_code = exit_code
        super().__init__(message or f"build command exited with {exit_code}")


class MissingImageName(PipelineError):
    pass


class DigestMismatch(PipelineError):
    """Packaged archive on disk no longer hashes to the registered digest."""

    pass


class TransactionRejected(PipelineError):
    """A ledger transaction was committed with a non-Valid flag."""

    pass


class InvalidRunId(PipelineError):
    """Run id would resolve outside the runs directory."""

    pass


INTEGRITY_ERRORS = frozenset({"DigestMismatch", "CorruptWorkspace"})
CONFIG_ERRORS = frozenset(
    {
        "ParseError",
        "CycleDetected",
        "UnknownDependency",
        "UnboundVariable",
        "InvalidSetting",
        "MissingSource",
        "MissingImageName",
        "FeedInvalid",
        "ManifestInvalid",
        "BadPrefix",
        "FieldCount",
        "BadPart",
        "ScanError",
        "ConfigError",
        "InvalidRunId",
    }
)


class StageKind(str, Enum):
    BUILD = "Build"
    PACKAGE = "Package"
    DEPCHECK = "DepCheck"
    LEDGER_BOOTSTRAP = "LedgerBootstrap"
    DEPLOY = "Deploy"
    CUSTOM = "Custom"


class StageStatus(str, Enum):
    SUCCESS = "Success"
    FAILED = "Failed"
    HALTED = "Halted"
    SKIPPED = "Skipped"


class Overall(str, Enum):
    SUCCESS = "Success"
    HALTED_AT_GATE = "HaltedAtGate"
    FAILED = "Failed"


# definitions


@dataclass(frozen=True)
class StageDef:
    name: str
    kind: StageKind
    depends_on: tuple[str, ...] = ()
    params: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class PipelineDef:
    stages: tuple[StageDef, ...]

    def stage(self, name: str) -> StageDef:
        for stage in self.stages:
            if stage.name == name:
                return stage
        raise UnknownDependency(name)

    def topological_order(self) -> list[str]:
        """Stage names in dependency order, ties broken by definition order."""
        return [name for wave in self.waves() for name in wave]

    def waves(self) -> list[list[str]]:
        """Groups of stages whose dependencies all lie in earlier groups."""
        remaining = [s.name for s in self.stages]
        done: set[str] = set()
        waves = []
        while remaining:
            ready = [n for n in remaining if set(self.stage(n).depends_on) <= done]
            if not ready:
                raise CycleDetected(find_cycle(self) or remaining)
            waves.append(ready)
            done.update(ready)
            remaining = [n for n in remaining if n not in done]
        return waves

    def upstream(self, name: str) -> list[str]:
        """Transitive dependencies of a stage in definition order."""
        found: set[str] = set()
        frontier = list(self.stage(name).depends_on)
        while frontier:
            current = frontier.pop()
            if current not in found:
                found.add(current)
                frontier.extend(self.stage(current).depends_on)
        return [s.name for s in self.stages if s.name in found]


def find_cycle(definition: PipelineDef) -> list[str] | None:
    """One dependency cycle as a list of stage names, or None."""
    edges = {s.name: list(s.depends_on) for s in definition.stages}
    visiting: list[str] = []
    finished: set[str] = set()

    def visit(node: str) -> list[str] | None:
        if node in visiting:
            return visiting[visiting.index(node) :]
        if node in finished or node not in edges:
            return None
        visiting.append(node)
        for dep in edges[node]:
            cycle = visit(dep)
            if cycle is not None:
                return cycle
        visiting.pop()
        finished.add(node)
        return None

    for stage in definition.stages:
        cycle = visit(stage.name)
        if cycle is not None:
            return cycle
    return None


DEFAULT_PIPELINE: dict = {
    "stages": [
        {"name": "build", "kind": "Build", "params": {"src": "src"}},
        {"name": "package", "kind": "Package", "depends_on": ["build"]},
        {
            "name": "dependency-check",
            "kind": "DepCheck",
            "params": {"manifest": "deps.json", "feed": "feed.json"},
        },
        {"name": "ledger-bootstrap", "kind": "LedgerBootstrap", "depends_on": ["dependency-check"]},
        {"name": "deploy", "kind": "Deploy", "depends_on": ["package", "ledger-bootstrap"]},
    ]
}


def parse_pipeline_def(data: Any, env: Mapping[str, str]) -> PipelineDef:
    """Validate a pipeline definition and expand ``${VAR}`` in stage params.

    Raises:
        ParseError: If the structure is wrong or a stage name repeats
        UnknownDependency: If depends_on names a missing stage
        CycleDetected: If the dependency graph has a cycle
        UnboundVariable: If a param references an undefined variable
    """
    if not isinstance(data, Mapping) or not isinstance(data.get("stages"), list):
        raise ParseError("pipeline definition must be an object with a stages list")
    stages = []
    seen: set[str] = set()
    for i, raw in enumerate(data["stages"]):
        if not isinstance(raw, Mapping):
            raise ParseError(f"stages[{i}] must be an object")
        name = raw.get("name")
        if not isinstance(name, str) or not name:
            raise ParseError(f"stages[{i}].name must be a nonempty string")
        if name in seen:
            raise ParseError(f"duplicate stage name {name!r}")
        seen.add(name)
        try:
            kind = StageKind(raw.get("kind"))
        except ValueError:
            raise ParseError(f"stage {name}: unknown kind {raw.get('kind')!r}") from None
        depends_on = raw.get("depends_on", [])
        if not isinstance(depends_on, list) or not all(isinstance(d, str) for d in depends_on):
            raise ParseError(f"stage {name}: depends_on must be a list of names")
        params = raw.get("params", {})
        if not isinstance(params, Mapping):
            raise ParseError(f"stage {name}: params must be an object")
        expanded = {}
        for key, value in params.items():
            if not isinstance(value, str):
                raise ParseError(f"stage {name}: param {key} must be a string")
            expanded[key] = expand_vars(value, env)
        stages.append(StageDef(name, kind, tuple(depends_on), expanded))

    for stage in stages:
        for dep in stage.depends_on:
            if dep not in seen:
                raise UnknownDependency(f"stage {stage.name} depends on unknown stage {dep}")
    definition = PipelineDef(tuple(stages))
    cycle = find_cycle(definition)
    if cycle is not None:
        raise CycleDetected(cycle)
    return definition


def load_pipeline_def(path: Path | None, env: Mapping[str, str]) -> PipelineDef:
    """Load ``pipeline.json``; None selects the default five-stage definition."""
    if path is None:
        return parse_pipeline_def(DEFAULT_PIPELINE, env)
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}") from e
    except ValueError as e:
        raise ParseError(f"{path} is not valid JSON: {e}") from e
    return parse_pipeline_def(data, env)


# deterministic archives


def _file_tree(root: Path) -> list[tuple[str, Path]]:
    return sorted(
        (p.relative_to(root).as_posix(), p) for p in root.rglob("*") if p.is_file()
    )


def tree_digest(root: Path) -> str:
    """SHA-256 over the sorted (relative path, content hash) pairs of a tree."""
    return canonical_hash(
        [[rel, sha256_hex(path.read_bytes())] for rel, path in _file_tree(Path(root))]
    )


def deterministic_tar(members: Sequence[tuple[str, bytes]]) -> bytes:
    """Uncompressed tar with fixed metadata, members sorted by name."""
    buffer = io.BytesIO()
    with tarfile.open(fileobj=buffer, mode="w", format=tarfile.PAX_FORMAT) as tar:
        for name, data in sorted(members):
            info = tarfile.TarInfo(name)
            info.size = len(data)
            info.mtime = 0
            info.mode = 0o644
            info.uid = info.gid = 0
            info.uname = info.gname = ""
            tar.addfile(info, io.BytesIO(data))
    return buffer.getvalue()


# stage values


@dataclass(frozen=True)
class BuildOutput:
    artifact: bytes
    source_digest: str
    artifact_path: Path


@dataclass(frozen=True)
class PackagedImage:
    name: str
    tag: str
    digest: str
    source_digest: str
    container_name: str
    path: Path


@dataclass(frozen=True)
class DeployOutput:
    tx_ids: tuple[str, ...]
    key: str
    digest: str


def stage_build(
    params: Mapping[str, str],
    workspace: Path,
    config: PipelineConfig,
    work_dir: Path,
) -> BuildOutput:
    """Hash the source tree and produce the build artifact.

    Without a build command the artifact is a deterministic archive of the
    source tree. With one, the command runs in work_dir with SRC_DIR and
    OUT_DIR set and must leave the artifact file behind.

    Raises:
        MissingSource: If the source directory is missing or empty
        BuildCommandFailed: If the command exits nonzero or produces nothing
    """
    src = Path(workspace) / params.get("src", "src")
    if not src.is_dir():
        raise MissingSource(f"source directory {src} does not exist")
    files = _file_tree(src)
    if not files:
        raise MissingSource(f"source directory {src} is empty")
    source_digest = tree_digest(src)
    work_dir.mkdir(parents=True, exist_ok=True)

    command = params.get("command") or config.build_command
    if not command:
        artifact = deterministic_tar([(rel, path.read_bytes()) for rel, path in files])
        artifact_path = work_dir / "artifact.tar"
        artifact_path.write_bytes(artifact)
    else:
        artifact_path = work_dir / params.get("artifact", "artifact.bin")
        proc = subprocess.run(
            shlex.split(command),
            cwd=work_dir,
            env={**os.environ, "SRC_DIR": str(src), "OUT_DIR": str(work_dir)},
            capture_output=True,
            text=True,
        )
        if proc.returncode != 0:
            raise BuildCommandFailed(proc.returncode, proc.stderr.strip()[-500:])
        if not artifact_path.is_file():
            raise BuildCommandFailed(0, f"build command produced no {artifact_path.name}")
        artifact = artifact_path.read_bytes()
    logger.info(
        "built %s (%d bytes) from source %s", artifact_path.name, len(artifact), source_digest[:12]
    )
    return BuildOutput(artifact, source_digest, artifact_path)


def stage_package(build: BuildOutput, config: PipelineConfig, workspace: Path) -> PackagedImage:
    """Wrap the artifact and its manifest in a timestamp-free archive under dist/.

    Raises:
        MissingImageName: If IMAGE_NAME or IMAGE_TAG is empty
    """
    if not config.image_name or not config.image_tag:
        raise MissingImageName("IMAGE_NAME and IMAGE_TAG must be set to package")
    if not build.artifact:
        raise PipelineError("cannot package an empty artifact")
    manifest = {
        "name": config.image_name,
        "tag": config.image_tag,
        "source_digest": build.source_digest,
        "artifact_digest": sha256_hex(build.artifact),
    }
    archive = deterministic_tar(
        [("artifact", build.artifact), ("manifest.json", canonical_encode(manifest))]
    )
    dist = Path(workspace) / DIST_DIR
    dist.mkdir(parents=True, exist_ok=True)
    path = dist / f"{config.image_name}-{config.image_tag}.tar"
    path.write_bytes(archive)
    image = PackagedImage(
        name=config.image_name,
        tag=config.image_tag,
        digest=sha256_hex(archive),
        source_digest=build.source_digest,
        container_name=config.render_container_name(),
        path=path,
    )
    logger.info("packaged %s:%s as %s", image.name, image.tag, image.digest[:12])
    return image


def stage_depcheck(
    manifest_path: Path,
    feed_path: Path,
    config: PipelineConfig,
    out_dir: Path,
    allowlist: Sequence[str] = (),
) -> ScanReport:
    """Scan the manifest and write scan-report.json and scan-report.txt regardless of verdict.

    The allowlist extends the SCAN_ALLOWLIST prefixes of the configuration.
    """
    report = scan_manifest(
        load_manifest(manifest_path),
        load_feed(feed_path),
        threshold=config.threshold,
        allowlist=[*config.allowlist, *allowlist],
        mode=config.mode,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "scan-report.json").write_bytes(report.encode())
    (out_dir / "scan-report.txt").write_text(render_report_text(report), encoding="utf-8")
    return report


@dataclass(frozen=True)
class BootstrapOutput:
    network: Network
    tx_ids: tuple[str, ...]
    changed: bool


def open_network(config: PipelineConfig) -> Network:
    """Reopen the ledger workspace under FABRIC_BIN with reproducible nonces."""
    nonces = TipNonces(config.channel)
    net = Network.open(config.fabric_bin, nonce_source=nonces)
    nonces.network = net
    return net


def stage_ledger_bootstrap(config: PipelineConfig) -> BootstrapOutput:
    """Make sure materials, channel, joined peers and initialized contracts exist.

    Rerunning against a complete workspace changes nothing.

    Raises:
        CorruptWorkspace: If an existing chain fails validation
        PermissionDenied: If an identity check fails during setup
    """
    root = Path(config.fabric_bin)
    if (root / "crypto").is_dir():
        net = open_network(config)
    else:
        nonces = TipNonces(config.channel)
        materials = generate_consortium(
            config.org_count, config.peers_per_org, config.clients_per_org, config.crypto_seed
        )
        net = Network(materials, nonce_source=nonces)
        nonces.network = net

    tx_ids: list[str] = []
    changed = False
    if not net.orderer.has_channel(config.channel):
        genesis = net.create_channel(config.channel, net.admin())
        tx_ids.extend(tx.tx_id for tx in genesis.transactions)
        changed = True
    for peer in net.peers:
        if config.channel not in peer.channels:
            net.join_channel(peer, config.channel)
            changed = True
    for target in BUILTIN_CONTRACTS:
        package = target.package()
        if any(p.installed.get(target.name) != package for p in net.peers):
            net.install_everywhere(package)
            changed = True
        if contract_definition(net.chain(config.channel).state, target.name) is None:
            receipt = net.init_contract(
                config.channel, target.name, target.version, config.default_policy(), net.admin()
            )
            tx_ids.append(receipt.tx_id)
            changed = True
    if changed:
        net.save(root)
        logger.info("bootstrapped ledger at %s (%d txs)", root, len(tx_ids))
    else:
        logger.info("ledger at %s already bootstrapped", root)
    return BootstrapOutput(net, tuple(tx_ids), changed)


def _commit(net: Network, channel: str, contract: str, function: str, args: list[str]) -> Any:
    receipt = net.transact(channel, contract, function, args, net.client())
    if not receipt.valid:
        flag = receipt.flag.value if receipt.flag else "missing"
        raise TransactionRejected(f"{contract}.{function} {receipt.tx_id[:12]} flagged {flag}")
    return receipt


def stage_deploy(
    net: Network,
    image: PackagedImage,
    report: ScanReport | None,
    config: PipelineConfig,
    environment: str | None = None,
) -> DeployOutput:
    """Register, attest and record the deployment of a packaged image.

    The archive on disk is rehashed before the deployment record; it must still
    match the registered digest.

    Raises:
        DigestMismatch: If the archive changed after packaging
        ContractError: NoPassingAttestation and other contract refusals
        TransactionRejected: If a transaction commits with a non-Valid flag
    """
    channel = config.channel
    tx_ids = []
    receipt = _commit(
        net,
        channel,
        "provenance",
        "register",
        [image.digest, image.name, image.tag, image.source_digest],
    )
    tx_ids.append(receipt.tx_id)

    if report is not None:
        receipt = _commit(
            net,
            channel,
            "attestation",
            "record",
            [
                image.digest,
                report.report_hash,
                str(report.max_score),
                report.verdict.value,
                str(report.threshold),
                str(report.gating_unverified),
                report.body_bytes().decode("utf-8"),
            ],
        )
        tx_ids.append(receipt.tx_id)

    on_disk = sha256_hex(Path(image.path).read_bytes()) if Path(image.path).is_file() else None
    registered = net.query_contract(channel, "provenance", "verify", [image.digest], net.client())
    if on_disk != image.digest or registered.get("status") != "Registered":
        raise DigestMismatch(
            f"{image.path} hashes to {on_disk or 'nothing'}, registered {image.digest}"
        )

    env = environment or config.deploy_env
    receipt = _commit(
        net, channel, "deployment", "record", [image.digest, env, image.container_name]
    )
    tx_ids.append(receipt.tx_id)
    key = receipt.result["key"]
    logger.info("deployed %s as %s", image.digest[:12], key)
    return DeployOutput(tuple(tx_ids), key, image.digest)


# engine


@dataclass
class StageResult:
    name: str
    kind: StageKind
    status: StageStatus
    started_us: int = 0
    ended_us: int = 0
    outputs: dict[str, str] = field(default_factory=dict)
    error: str | None = None
    error_type: str | None = None
    value: Any = field(default=None, repr=False, compare=False)

    @property
    def duration_us(self) -> int:
        return self.ended_us - self.started_us

    @property
    def duration_ms(self) -> int:
        return self.duration_us // 1000

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind.value,
            "status": self.status.value,
            "started_us": self.started_us,
            "ended_us": self.ended_us,
            "duration_us": self.duration_us,
            "outputs": dict(self.outputs),
            "error": self.error,
            "error_type": self.error_type,
        }


@dataclass
class PipelineRun:
    run_id: str
    config: dict
    stage_results: list[StageResult]
    overall: Overall
    ledger_txs: list[str]
    parallel: bool = False
    run_dir: Path | None = None

    def result(self, name: str) -> StageResult:
        for r in self.stage_results:
            if r.name == name:
                return r
        raise KeyError(name)

    @property
    def wall_us(self) -> int:
        if not self.stage_results:
            return 0
        return max(r.ended_us for r in self.stage_results) - min(
            r.started_us for r in self.stage_results
        )

    def failure_class(self) -> str | None:
        """"integrity", "config" or "internal" for Failed runs, else None."""
        if self.overall is not Overall.FAILED:
            return None
        types = {r.error_type for r in self.stage_results if r.status is StageStatus.FAILED}
        if types & INTEGRITY_ERRORS:
            return "integrity"
        if types and types <= CONFIG_ERRORS:
            return "config"
        return "internal"

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "config": self.config,
            "parallel": self.parallel,
            "stage_results": [r.to_dict() for r in self.stage_results],
            "overall": self.overall.value,
            "ledger_txs": list(self.ledger_txs),
        }


@dataclass
class _RunState:
    definition: PipelineDef
    config: PipelineConfig
    workspace: Path
    run_dir: Path
    results: dict[str, StageResult] = field(default_factory=dict)
    ledger_lock: threading.Lock = field(default_factory=threading.Lock)
    origin_ns: int = field(default_factory=time.perf_counter_ns)
    network: Network | None = None

    def now_us(self) -> int:
        return (time.perf_counter_ns() - self.origin_ns) // 1000

    def upstream_value(self, stage: StageDef, kind: StageKind) -> Any:
        """Value of the nearest upstream stage of a kind (last in definition order)."""
        for name in reversed(self.definition.upstream(stage.name)):
            result = self.results.get(name)
            if result is not None and result.kind is kind and result.value is not None:
                return result.value
        return None


StageOutcome = tuple[StageStatus, dict[str, str], Any]
StageHandler = Callable[[StageDef, _RunState], StageOutcome]


def _run_build(stage: StageDef, state: _RunState) -> StageOutcome:
    out = stage_build(stage.params, state.workspace, state.config, state.run_dir / stage.name)
    return StageStatus.SUCCESS, {"source_digest": out.source_digest}, out


def _run_package(stage: StageDef, state: _RunState) -> StageOutcome:
    build = state.upstream_value(stage, StageKind.BUILD)
    if build is None:
        raise PipelineError(f"{stage.name} needs an upstream Build stage")
    image = stage_package(build, state.config, state.workspace)
    outputs = {
        "digest": image.digest,
        "image": f"{image.name}:{image.tag}",
        "container_name": image.container_name,
        "path": image.path.relative_to(state.workspace).as_posix(),
    }
    return StageStatus.SUCCESS, outputs, image


def _run_depcheck(stage: StageDef, state: _RunState) -> StageOutcome:
    params = stage.params
    allowlist_path = state.workspace / params.get("allowlist", ALLOWLIST_FILE)
    if allowlist_path.is_file():
        allowlist = load_allowlist(allowlist_path)
    elif "allowlist" in params:
        raise ScanError(f"allowlist {allowlist_path} does not exist")
    else:
        allowlist = []
    report = stage_depcheck(
        state.workspace / params.get("manifest", "deps.json"),
        state.workspace / params.get("feed", "feed.json"),
        state.config,
        state.run_dir,
        allowlist,
    )
    gate = params.get("gate", "true").lower() not in ("false", "0", "no", "off")
    halted = gate and report.verdict is Verdict.HALT
    outputs = {
        "verdict": report.verdict.value,
        "max_score": str(report.max_score),
        "report_hash": report.report_hash,
        "findings": str(len(report.findings)),
    }
    return (StageStatus.HALTED if halted else StageStatus.SUCCESS), outputs, report


def _run_bootstrap(stage: StageDef, state: _RunState) -> StageOutcome:
    with state.ledger_lock:
        out = stage_ledger_bootstrap(state.config)
        state.network = out.network
    outputs = {
        "channel": state.config.channel,
        "height": str(out.network.orderer.height(state.config.channel)),
        "changed": "true" if out.changed else "false",
        "tx_ids": ",".join(out.tx_ids),
    }
    return StageStatus.SUCCESS, outputs, out


def _run_deploy(stage: StageDef, state: _RunState) -> StageOutcome:
    image = state.upstream_value(stage, StageKind.PACKAGE)
    if image is None:
        raise PipelineError(f"{stage.name} needs an upstream Package stage")
    report = state.upstream_value(stage, StageKind.DEPCHECK)
    with state.ledger_lock:
        net = state.network or open_network(state.config)
        state.network = net
        try:
            out = stage_deploy(net, image, report, state.config, stage.params.get("env"))
        finally:
            net.save(state.config.fabric_bin)
    outputs = {"digest": out.digest, "key": out.key, "tx_ids": ",".join(out.tx_ids)}
    return StageStatus.SUCCESS, outputs, out


def _run_custom(stage: StageDef, state: _RunState) -> StageOutcome:
    params = dict(stage.params)
    sleep_ms = int(params.pop("sleep_ms", "0") or 0)
    if sleep_ms:
        time.sleep(sleep_ms / 1000)
    failure = params.pop("fail", None)
    if failure:
        raise PipelineError(failure)
    return StageStatus.SUCCESS, params, None


HANDLERS: dict[StageKind, StageHandler] = {
    StageKind.BUILD: _run_build,
    StageKind.PACKAGE: _run_package,
    StageKind.DEPCHECK: _run_depcheck,
    StageKind.LEDGER_BOOTSTRAP: _run_bootstrap,
    StageKind.DEPLOY: _run_deploy,
    StageKind.CUSTOM: _run_custom,
}

_STAGE_ERRORS = (
    PipelineError,
    ScanError,
    ChaincodeError,
    OrderingError,
    LedgerError,
    IdentityError,
    NetworkError,
    OSError,
    ValueError,
)


def _execute_stage(stage: StageDef, state: _RunState) -> StageResult:
    blocked = [d for d in stage.depends_on if state.results[d].status is not StageStatus.SUCCESS]
    now = state.now_us()
    if blocked:
        logger.info("stage %s skipped: %s did not succeed", stage.name, ", ".join(blocked))
        return StageResult(stage.name, stage.kind, StageStatus.SKIPPED, now, now)
    logger.info("stage %s (%s) started", stage.name, stage.kind.value)
    started = state.now_us()
    try:
        status, outputs, value = HANDLERS[stage.kind](stage, state)
    except _STAGE_ERRORS as e:
        ended = state.now_us()
        logger.warning("stage %s failed: %s: %s", stage.name, type(e).__name__, e)
        error_type = getattr(e, "code", None) or type(e).__name__
        return StageResult(
            stage.name, stage.kind, StageStatus.FAILED, started, ended,
            error=str(e), error_type=error_type,
        )
    ended = state.now_us()
    logger.info("stage %s %s in %d us", stage.name, status.value, ended - started)
    return StageResult(stage.name, stage.kind, status, started, ended, outputs, value=value)


def _overall(results: Sequence[StageResult]) -> Overall:
    if any(r.kind is StageKind.DEPCHECK and r.status is StageStatus.HALTED for r in results):
        return Overall.HALTED_AT_GATE
    if any(r.status in (StageStatus.FAILED, StageStatus.HALTED) for r in results):
        return Overall.FAILED
    return Overall.SUCCESS


def _check_run_id(run_id: str) -> str:
    if not run_id or run_id.startswith(".") or any(sep in run_id for sep in ("/", "\\")):
        raise InvalidRunId(f"run id {run_id!r} must be a plain directory name")
    return run_id


def _new_run_dir(workspace: Path, run_id: str | None, build_number: int) -> tuple[str, Path]:
    runs = Path(workspace) / RUNS_DIR
    if run_id is None:
        run_id = f"run-{build_number}"
        suffix = 1
        while (runs / run_id).exists():
            suffix += 1
            run_id = f"run-{build_number}-{suffix}"
    run_dir = runs / _check_run_id(run_id)
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_id, run_dir


def _finish(state: _RunState, run_id: str, completed: list[StageResult]) -> PipelineRun:
    ledger_txs = []
    for result in completed:
        if result.kind is StageKind.DEPLOY and isinstance(result.value, DeployOutput):
            ledger_txs.extend(result.value.tx_ids)
    run = PipelineRun(
        run_id=run_id,
        config=state.config.snapshot(),
        stage_results=completed,
        overall=_overall(completed),
        ledger_txs=ledger_txs,
        parallel=state.config.parallel,
        run_dir=state.run_dir,
    )
    (state.run_dir / "run-report.json").write_bytes(canonical_encode(run.to_dict()))
    emit_timing_report(run, state.run_dir)
    logger.info("run %s finished: %s", run_id, run.overall.value)
    return run


async def run_pipeline_async(
    definition: PipelineDef,
    config: PipelineConfig,
    workspace: Path,
    run_id: str | None = None,
) -> PipelineRun:
    """Run independent stages of each dependency wave concurrently in worker threads."""
    run_id, run_dir = _new_run_dir(workspace, run_id, config.build_number)
    state = _RunState(definition, config, Path(workspace), run_dir)
    completed: list[StageResult] = []
    for wave in definition.waves():
        stages = [definition.stage(name) for name in wave]
        results = await asyncio.gather(
            *(asyncio.to_thread(_execute_stage, stage, state) for stage in stages)
        )
        for result in sorted(results, key=lambda r: (r.ended_us, wave.index(r.name))):
            state.results[result.name] = result
            completed.append(result)
    return _finish(state, run_id, completed)


def run_pipeline(
    definition: PipelineDef,
    config: PipelineConfig,
    workspace: Path,
    run_id: str | None = None,
) -> PipelineRun:
    """Execute a pipeline definition against a workspace.

    Stages run in dependency order; with ``config.parallel`` the stages of each
    wave run concurrently. A stage that does not succeed marks every
    transitive dependent Skipped. Failures are captured in the results.

    Args:
        definition: Validated pipeline definition
        config: Resolved configuration
        workspace: Project directory holding sources, manifest and feed
        run_id: Report directory name under runs/ (default derived from BUILD_NUMBER)

    Returns:
        PipelineRun, also written to runs/<run_id>/run-report.json
    """
    workspace = Path(workspace)
    if config.parallel:
        return asyncio.run(run_pipeline_async(definition, config, workspace, run_id))
    run_id, run_dir = _new_run_dir(workspace, run_id, config.build_number)
    state = _RunState(definition, config, workspace, run_dir)
    completed = []
    for name in definition.topological_order():
        result = _execute_stage(definition.stage(name), state)
        state.results[name] = result
        completed.append(result)
    return _finish(state, run_id, completed)


def timing_report(run: PipelineRun) -> dict:
    stages = [
        {
            "name": r.name,
            "kind": r.kind.value,
            "status": r.status.value,
            "duration_us": r.duration_us,
            "duration_ms": r.duration_ms,
        }
        for r in run.stage_results
    ]
    serial_sum = sum(r.duration_us for r in run.stage_results)
    depcheck = sum(r.duration_us for r in run.stage_results if r.kind is StageKind.DEPCHECK)
    return {
        "run_id": run.run_id,
        "parallel": run.parallel,
        "stages": stages,
        "total_wall_us": run.wall_us,
        "serial_sum_us": serial_sum,
        "depcheck_us": depcheck,
        "depcheck_share_permille": (depcheck * 1000 // serial_sum) if serial_sum else 0,
    }


def emit_timing_report(run: PipelineRun, run_dir: Path) -> Path:
    """Write timing-report.json with per-stage durations and the DepCheck share."""
    path = Path(run_dir) / "timing-report.json"
    path.write_bytes(canonical_encode(timing_report(run)))
    return path


def load_run_report(workspace: Path, run_id: str) -> dict:
    path = Path(workspace) / RUNS_DIR / _check_run_id(run_id) / "run-report.json"
    if not path.is_file():
        raise PipelineError(f"no run named {run_id} under {Path(workspace) / RUNS_DIR}")
    return json.loads(path.read_text(encoding="utf-8"))

