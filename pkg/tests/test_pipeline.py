"""Tests for the pipeline engine and its stages."""

import io
import json
import shutil
import tarfile
from pathlib import Path

import pytest

from ci_ledger.canonical import canonical_decode, canonical_encode, sha256_hex
from ci_ledger.demo import Variant, write_demo
from ci_ledger.ledger import LedgerStore
from ci_ledger.pipeline import (
    DEFAULT_PIPELINE,
    BuildCommandFailed,
    CycleDetected,
    DigestMismatch,
    InvalidRunId,
    MissingImageName,
    MissingSource,
    Overall,
    ParseError,
    PipelineRun,
    StageKind,
    StageResult,
    StageStatus,
    UnknownDependency,
    deterministic_tar,
    load_pipeline_def,
    load_run_report,
    open_network,
    parse_pipeline_def,
    run_pipeline,
    run_pipeline_async,
    stage_build,
    stage_deploy,
    stage_package,
    tree_digest,
)
from ci_ledger.settings import PipelineError, UnboundVariable
from ci_ledger.vulnscan import Verdict
from tests.conftest import demo_config, run_demo

CHANNEL = "main"


def _custom(name: str, depends_on: tuple[str, ...] = (), **params: str) -> dict:
    return {"name": name, "kind": "Custom", "depends_on": list(depends_on), "params": params}


def _run_custom(workspace: Path, stages: list[dict], parallel: bool) -> PipelineRun:
    config = demo_config(workspace, PIPELINE_PARALLEL="true" if parallel else "false")
    definition = parse_pipeline_def({"stages": stages}, config.variables)
    return run_pipeline(definition, config, workspace)


class TestDefinition:
    """Tests for parsing and ordering pipeline definitions."""

    def test_default_waves(self) -> None:
        """Test the default pipeline groups independent stages."""
        definition = load_pipeline_def(None, {})
        assert definition.waves() == [
            ["build", "dependency-check"],
            ["package", "ledger-bootstrap"],
            ["deploy"],
        ]
        assert definition.topological_order()[-1] == "deploy"
        assert definition.upstream("deploy") == [
            "build",
            "package",
            "dependency-check",
            "ledger-bootstrap",
        ]

    def test_cycle(self) -> None:
        """Test a cycle is reported with its path."""
        data = {"stages": [_custom("a", ("b",)), _custom("b", ("a",)), _custom("c")]}
        with pytest.raises(CycleDetected) as excinfo:
            parse_pipeline_def(data, {})
        assert excinfo.value.path == ["a", "b"]
        assert "a -> b" in str(excinfo.value)

    def test_unknown_dependency(self) -> None:
        """Test depends_on naming a missing stage."""
        with pytest.raises(UnknownDependency, match="ghost"):
            parse_pipeline_def({"stages": [_custom("a", ("ghost",))]}, {})

    @pytest.mark.parametrize(
        "data",
        [
            [],
            {"stages": "build"},
            {"stages": [{"kind": "Build"}]},
            {"stages": [{"name": "a", "kind": "Compile"}]},
            {"stages": [_custom("a"), _custom("a")]},
            {"stages": [{"name": "a", "kind": "Custom", "depends_on": "b"}]},
            {"stages": [{"name": "a", "kind": "Custom", "params": {"n": 1}}]},
        ],
    )
    def test_schema_errors(self, data: object) -> None:
        """Test structurally invalid definitions."""
        with pytest.raises(ParseError):
            parse_pipeline_def(data, {})

    def test_param_expansion(self) -> None:
        """Test ${VAR} in params is expanded from the environment."""
        data = {"stages": [_custom("a", note="${IMAGE_NAME}:${IMAGE_TAG}")]}
        definition = parse_pipeline_def(data, {"IMAGE_NAME": "svc", "IMAGE_TAG": "v1"})
        assert definition.stage("a").params == {"note": "svc:v1"}

    def test_unbound_param(self) -> None:
        """Test a param naming an undefined variable."""
        with pytest.raises(UnboundVariable):
            parse_pipeline_def({"stages": [_custom("a", note="${NOPE}")]}, {})

    def test_load_invalid_json(self, tmp_path: Path) -> None:
        """Test a file that is not JSON."""
        path = tmp_path / "pipeline.json"
        path.write_text("{stages", encoding="utf-8")
        with pytest.raises(ParseError, match="not valid JSON"):
            load_pipeline_def(path, {})

    def test_load_missing_file(self, tmp_path: Path) -> None:
        """Test a missing file."""
        with pytest.raises(ParseError, match="cannot read"):
            load_pipeline_def(tmp_path / "absent.json", {})


class TestArchives:
    """Tests for reproducible archives and tree digests."""

    def test_member_order_irrelevant(self) -> None:
        """Test members are sorted before archiving."""
        first = deterministic_tar([("b", b"2"), ("a", b"1")])
        second = deterministic_tar([("a", b"1"), ("b", b"2")])
        assert first == second
        with tarfile.open(fileobj=io.BytesIO(first)) as tar:
            assert tar.getnames() == ["a", "b"]
            assert all(m.mtime == 0 for m in tar.getmembers())

    def test_tree_digest(self, tmp_path: Path) -> None:
        """Test the digest depends on paths and content only."""
        write_demo(tmp_path / "one")
        write_demo(tmp_path / "two")
        one, two = tmp_path / "one" / "src", tmp_path / "two" / "src"
        assert tree_digest(one) == tree_digest(two)
        (two / "lib" / "store.py").write_text("changed\n", encoding="utf-8")
        assert tree_digest(one) != tree_digest(two)


class TestStages:
    """Tests for individual stage functions."""

    def test_build_is_reproducible(self, tmp_path: Path) -> None:
        """Test two builds of the same tree give identical artifacts."""
        write_demo(tmp_path)
        config = demo_config(tmp_path)
        first = stage_build({}, tmp_path, config, tmp_path / "w1")
        second = stage_build({}, tmp_path, config, tmp_path / "w2")
        assert first.artifact == second.artifact
        assert first.artifact_path.name == "artifact.tar"

    def test_missing_source(self, tmp_path: Path) -> None:
        """Test building without a source directory."""
        with pytest.raises(MissingSource):
            stage_build({}, tmp_path, demo_config(tmp_path), tmp_path / "work")

    def test_empty_source(self, tmp_path: Path) -> None:
        """Test building an empty source directory."""
        (tmp_path / "src").mkdir()
        with pytest.raises(MissingSource, match="empty"):
            stage_build({}, tmp_path, demo_config(tmp_path), tmp_path / "work")

    @pytest.mark.skipif(shutil.which("sh") is None, reason="needs a POSIX shell")
    def test_build_command(self, tmp_path: Path) -> None:
        """Test a build command runs with SRC_DIR and OUT_DIR set."""
        write_demo(tmp_path)
        command = """sh -c 'ls "$SRC_DIR" > "$OUT_DIR/artifact.bin"'"""
        config = demo_config(tmp_path, BUILD_COMMAND=command)
        out = stage_build({}, tmp_path, config, tmp_path / "work")
        assert sorted(out.artifact.split()) == [b"README.txt", b"app.py", b"lib"]

    @pytest.mark.skipif(shutil.which("sh") is None, reason="needs a POSIX shell")
    def test_build_command_fails(self, tmp_path: Path) -> None:
        """Test a nonzero exit is reported with its code."""
        write_demo(tmp_path)
        params = {"command": "sh -c 'exit 3'"}
        with pytest.raises(BuildCommandFailed) as excinfo:
            stage_build(params, tmp_path, demo_config(tmp_path), tmp_path / "work")
        assert excinfo.value.exit_code == 3

    @pytest.mark.skipif(shutil.which("sh") is None, reason="needs a POSIX shell")
    def test_build_command_without_artifact(self, tmp_path: Path) -> None:
        """Test a command that succeeds but writes nothing."""
        write_demo(tmp_path)
        params = {"command": "sh -c true"}
        with pytest.raises(BuildCommandFailed, match="produced no"):
            stage_build(params, tmp_path, demo_config(tmp_path), tmp_path / "work")

    def test_package(self, tmp_path: Path) -> None:
        """Test the packaged archive lands under dist/ with its digest."""
        write_demo(tmp_path)
        config = demo_config(tmp_path, IMAGE_NAME="svc", IMAGE_TAG="v1")
        build = stage_build({}, tmp_path, config, tmp_path / "work")
        image = stage_package(build, config, tmp_path)
        assert image.path == tmp_path / "dist" / "svc-v1.tar"
        assert image.digest == sha256_hex(image.path.read_bytes())
        assert image.container_name == "svc-1"
        with tarfile.open(image.path) as tar:
            manifest = json.loads(tar.extractfile("manifest.json").read())
        assert manifest["source_digest"] == build.source_digest

    def test_package_needs_image_name(self, tmp_path: Path) -> None:
        """Test packaging with an empty image name."""
        write_demo(tmp_path)
        config = demo_config(tmp_path, IMAGE_NAME="")
        build = stage_build({}, tmp_path, config, tmp_path / "work")
        with pytest.raises(MissingImageName):
            stage_package(build, config, tmp_path)

    def test_deploy_detects_tampered_archive(self, copied_clean_workspace: Path) -> None:
        """Test a modified archive is refused before the deployment record."""
        workspace = copied_clean_workspace
        config = demo_config(workspace)
        net = open_network(config)
        build = stage_build({}, workspace, config, workspace / "rebuild")
        image = stage_package(build, config, workspace)
        data = bytearray(image.path.read_bytes())
        data[len(data) // 2] ^= 0x01
        image.path.write_bytes(bytes(data))
        with pytest.raises(DigestMismatch):
            stage_deploy(net, image, None, config)


class TestEndToEnd:
    """Tests for complete demo runs."""

    def test_clean_run(self, clean_workspace: tuple[Path, PipelineRun]) -> None:
        """Test the clean project passes every stage and writes three ledger records."""
        workspace, run = clean_workspace
        assert run.overall is Overall.SUCCESS
        assert run.failure_class() is None
        assert run.run_id == "run-1"
        assert all(r.status is StageStatus.SUCCESS for r in run.stage_results)
        assert len(run.ledger_txs) == 3
        run_dir = workspace / "runs" / "run-1"
        for name in ("run-report.json", "timing-report.json", "scan-report.json"):
            assert (run_dir / name).is_file()
        assert (run_dir / "scan-report.txt").read_text(encoding="utf-8")
        assert LedgerStore(workspace / "fabric" / "ledger").validate(CHANNEL)

    def test_run_report(self, clean_workspace: tuple[Path, PipelineRun]) -> None:
        """Test the run report is canonical and matches the run."""
        workspace, run = clean_workspace
        path = workspace / "runs" / "run-1" / "run-report.json"
        assert path.read_bytes() == canonical_encode(run.to_dict())
        report = load_run_report(workspace, "run-1")
        assert report["overall"] == "Success"
        assert report["config"]["BUILD_NUMBER"] == 1
        with pytest.raises(PipelineError, match="no run named"):
            load_run_report(workspace, "run-99")

    def test_run_id_stays_under_runs(self, clean_workspace: tuple[Path, PipelineRun]) -> None:
        """Test run ids that would leave the runs directory are refused."""
        workspace, _ = clean_workspace
        for run_id in ("../..", "..", "", "run-1/../..", "..\\run-1", ".hidden"):
            with pytest.raises(InvalidRunId):
                load_run_report(workspace, run_id)

    def test_timing_report(self, clean_workspace: tuple[Path, PipelineRun]) -> None:
        """Test per-stage durations and the dependency check share."""
        workspace, run = clean_workspace
        path = workspace / "runs" / "run-1" / "timing-report.json"
        timing = canonical_decode(path.read_bytes())
        assert [s["name"] for s in timing["stages"]] == [r.name for r in run.stage_results]
        assert timing["serial_sum_us"] == sum(r.duration_us for r in run.stage_results)
        assert 0 < timing["depcheck_share_permille"] <= 1000
        assert timing["total_wall_us"] == run.wall_us

    def test_deployment_on_ledger(self, clean_workspace: tuple[Path, PipelineRun]) -> None:
        """Test the deployment record names the packaged digest."""
        workspace, run = clean_workspace
        net = open_network(demo_config(workspace))
        status = net.query_contract(
            CHANNEL, "deployment", "status", ["staging", "app-1"], net.client()
        )
        assert status["status"] == "Deployed"
        assert status["record"]["artifact_digest"] == run.result("package").outputs["digest"]
        chain = net.chain(CHANNEL)
        assert all(chain.contains_tx(tx_id) for tx_id in run.ledger_txs)

    def test_vulnerable_run_halts(self, tmp_path: Path) -> None:
        """Test a vulnerable dependency stops the run before the ledger."""
        run = run_demo(tmp_path, Variant.VULNERABLE)
        assert run.overall is Overall.HALTED_AT_GATE
        assert run.result("dependency-check").status is StageStatus.HALTED
        assert run.result("dependency-check").outputs["verdict"] == Verdict.HALT.value
        assert run.result("ledger-bootstrap").status is StageStatus.SKIPPED
        assert run.result("deploy").status is StageStatus.SKIPPED
        assert run.result("package").status is StageStatus.SUCCESS
        assert run.ledger_txs == []
        assert not (tmp_path / "fabric").exists()
        assert (tmp_path / "runs" / "run-1" / "scan-report.json").is_file()

    def test_serial_and_parallel_agree(self, tmp_path: Path) -> None:
        """Test both schedules record the same transactions and blocks."""
        serial = run_demo(tmp_path / "serial", Variant.CLEAN)
        parallel = run_demo(tmp_path / "parallel", Variant.CLEAN, parallel=True)
        assert parallel.parallel is True
        assert parallel.overall is Overall.SUCCESS
        assert serial.ledger_txs == parallel.ledger_txs
        blobs = [
            LedgerStore(tmp_path / name / "fabric" / "ledger").read_block_blobs(CHANNEL)
            for name in ("serial", "parallel")
        ]
        assert blobs[0] == blobs[1]

    def test_rerun(self, clean_workspace: tuple[Path, PipelineRun]) -> None:
        """Test a second run reuses the bootstrapped ledger and gets a fresh run id."""
        workspace, first = clean_workspace
        config = demo_config(workspace)
        definition = load_pipeline_def(workspace / "pipeline.json", config.variables)
        second = run_pipeline(definition, config, workspace)
        assert second.run_id == "run-1-2"
        assert second.overall is Overall.SUCCESS
        assert second.result("ledger-bootstrap").outputs["changed"] == "false"
        assert set(second.ledger_txs).isdisjoint(first.ledger_txs)
        assert LedgerStore(workspace / "fabric" / "ledger").validate(CHANNEL)

    def test_missing_source_is_config_failure(self, tmp_path: Path) -> None:
        """Test a project without sources fails as a configuration error."""
        write_demo(tmp_path)
        shutil.rmtree(tmp_path / "src")
        config = demo_config(tmp_path)
        run = run_pipeline(load_pipeline_def(None, config.variables), config, tmp_path)
        assert run.overall is Overall.FAILED
        assert run.result("build").error_type == "MissingSource"
        assert run.result("package").status is StageStatus.SKIPPED
        assert run.result("deploy").status is StageStatus.SKIPPED
        assert run.failure_class() == "config"

    def test_ungated_halt_blocks_deployment(self, tmp_path: Path) -> None:
        """Test an ungated Halt verdict is still refused by the deployment contract."""
        write_demo(tmp_path, Variant.VULNERABLE)
        data = json.loads(json.dumps(DEFAULT_PIPELINE))
        data["stages"][2]["params"]["gate"] = "false"
        config = demo_config(tmp_path)
        run = run_pipeline(parse_pipeline_def(data, config.variables), config, tmp_path)
        assert run.result("dependency-check").status is StageStatus.SUCCESS
        assert run.result("dependency-check").outputs["verdict"] == "Halt"
        assert run.result("deploy").status is StageStatus.FAILED
        assert run.result("deploy").error_type == "NoPassingAttestation"
        assert run.overall is Overall.FAILED


class TestScheduling:
    """Tests for skip propagation and concurrent waves."""

    def test_skip_propagation(self, tmp_path: Path) -> None:
        """Test a failure skips every transitive dependent and nothing else."""
        stages = [
            _custom("a", fail="boom"),
            _custom("b", ("a",)),
            _custom("c", ("b",)),
            _custom("d"),
        ]
        run = _run_custom(tmp_path, stages, parallel=False)
        statuses = {r.name: r.status for r in run.stage_results}
        assert statuses == {
            "a": StageStatus.FAILED,
            "b": StageStatus.SKIPPED,
            "c": StageStatus.SKIPPED,
            "d": StageStatus.SUCCESS,
        }
        assert run.result("a").error == "boom"
        assert run.failure_class() == "internal"

    def test_parallel_wave_overlaps(self, tmp_path: Path) -> None:
        """Test two sleeping stages in one wave run concurrently."""
        stages = [
            _custom("a", sleep_ms="300"),
            _custom("b", sleep_ms="300"),
            _custom("c", ("a", "b"), note="done"),
        ]
        parallel = _run_custom(tmp_path / "p", stages, parallel=True)
        serial = _run_custom(tmp_path / "s", stages, parallel=False)
        assert parallel.result("c").outputs == {"note": "done"}
        assert parallel.result("a").duration_us >= 300_000
        assert serial.wall_us >= 600_000
        assert parallel.wall_us < 600_000
        assert parallel.result("c").started_us >= max(
            parallel.result(n).ended_us for n in ("a", "b")
        )

    async def test_async_entry_point(self, tmp_path: Path) -> None:
        """Test the coroutine runner can be awaited from a running loop."""
        stages = [_custom("a", note="x"), _custom("b", ("a",))]
        config = demo_config(tmp_path)
        definition = parse_pipeline_def({"stages": stages}, config.variables)
        run = await run_pipeline_async(definition, config, tmp_path, run_id="custom")
        assert run.run_id == "custom"
        assert run.overall is Overall.SUCCESS
        assert (tmp_path / "runs" / "custom" / "run-report.json").is_file()

    def test_run_id_escaping_runs(self, tmp_path: Path) -> None:
        """Test an explicit run id with a path separator is refused before any stage runs."""
        config = demo_config(tmp_path)
        definition = parse_pipeline_def({"stages": [_custom("a")]}, config.variables)
        with pytest.raises(InvalidRunId):
            run_pipeline(definition, config, tmp_path, run_id="../outside")
        assert not (tmp_path / "outside").exists()

    def test_failure_class_integrity(self) -> None:
        """Test a digest mismatch classifies the run as an integrity failure."""
        results = [
            StageResult(
                "deploy", StageKind.DEPLOY, StageStatus.FAILED, error_type="DigestMismatch"
            ),
            StageResult("x", StageKind.CUSTOM, StageStatus.FAILED, error_type="ParseError"),
        ]
        run = PipelineRun("run-1", {}, results, Overall.FAILED, [])
        assert run.failure_class() == "integrity"
        assert run.wall_us == 0
