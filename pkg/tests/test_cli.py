"""Tests for the CLI module."""

import json
from base64 import b64encode
from pathlib import Path

import pytest
from typer.testing import CliRunner

from ci_ledger import __version__
from ci_ledger.canonical import canonical_decode, canonical_encode, sha256_hex
from ci_ledger.chaincode import SCAN_REPORT_COLLECTION
from ci_ledger.cli import (
    EXIT_HALT,
    EXIT_INTEGRITY,
    EXIT_OK,
    EXIT_USAGE,
    CliState,
    app,
    run_cli,
)
from ci_ledger.ledger import LedgerStore

runner = CliRunner()


def _json_out(capsys: pytest.CaptureFixture[str]) -> object:
    return json.loads(capsys.readouterr().out)


def _cli(workspace: Path, *argv: str, env: dict[str, str] | None = None) -> int:
    return run_cli(["--workspace", str(workspace), *argv], env=env or {})


def _package_digest(workspace: Path) -> str:
    return sha256_hex((workspace / "dist" / "app-latest.tar").read_bytes())


class TestCLI:
    """Tests for global options."""

    def test_version_flag(self) -> None:
        """Test --version flag."""
        result = runner.invoke(app, ["--version"])
        assert result.exit_code == 0
        assert __version__ in result.stdout

    def test_version_short_flag(self) -> None:
        """Test -v flag."""
        result = runner.invoke(app, ["-v"])
        assert result.exit_code == 0
        assert __version__ in result.stdout

    def test_help(self) -> None:
        """Test --help lists the commands."""
        result = runner.invoke(app, ["--help"])
        assert result.exit_code == 0
        for command in ("init", "run", "scan", "ledger-verify", "artifact-verify", "attack"):
            assert command in result.stdout

    def test_missing_required_option(self, tmp_path: Path) -> None:
        """Test a usage error exits with 2."""
        assert _cli(tmp_path, "scan") == EXIT_USAGE

    def test_unknown_command(self, tmp_path: Path) -> None:
        """Test an unknown command exits with 2."""
        assert _cli(tmp_path, "publish") == EXIT_USAGE


class TestInit:
    """Tests for the init command."""

    def test_init_demo(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        """Test init writes the demo project and bootstraps the ledger once."""
        assert _cli(tmp_path, "--json", "init", "--demo", "clean") == EXIT_OK
        summary = _json_out(capsys)
        assert summary["changed"] is True
        assert summary["orgs"] == ["Org1", "Org2"]
        assert summary["demo"] == "clean"
        assert summary["height"] > 1
        assert (tmp_path / "deps.json").is_file()
        assert (tmp_path / "fabric" / "network.json").is_file()

        assert _cli(tmp_path, "--json", "init", "--demo", "vulnerable") == EXIT_OK
        again = _json_out(capsys)
        assert again["changed"] is False
        assert again["demo"] is None
        assert again["height"] == summary["height"]

    def test_init_bad_seed(self, tmp_path: Path) -> None:
        """Test a malformed seed is a usage error."""
        assert _cli(tmp_path, "init", "--seed", "xyz") == EXIT_USAGE

    def test_init_human_output(self, tmp_path: Path) -> None:
        """Test the human-readable summary."""
        result = runner.invoke(
            app, ["-w", str(tmp_path), "init", "--orgs", "3"], obj=CliState(env={})
        )
        assert result.exit_code == 0
        assert "Initialized" in result.stdout
        assert "Org3" in result.stdout


class TestRun:
    """Tests for the run command exit codes."""

    def test_clean(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        """Test a clean project exits 0 with three ledger transactions."""
        _cli(tmp_path, "init", "--demo", "clean")
        capsys.readouterr()
        assert _cli(tmp_path, "--json", "run") == EXIT_OK
        run = _json_out(capsys)
        assert run["overall"] == "Success"
        assert len(run["ledger_txs"]) == 3

    def test_json_after_command(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        """Test --json is also accepted as a command option."""
        _cli(tmp_path, "init", "--demo", "clean")
        capsys.readouterr()
        assert _cli(tmp_path, "run", "--pipeline", "pipeline.json", "--json") == EXIT_OK
        assert _json_out(capsys)["overall"] == "Success"
        assert _cli(tmp_path, "report", "--run", "run-1", "--json") == EXIT_OK
        assert _json_out(capsys)["run_id"] == "run-1"

    def test_vulnerable_halts(self, tmp_path: Path) -> None:
        """Test the dependency gate exits 3."""
        _cli(tmp_path, "init", "--demo", "vulnerable")
        assert _cli(tmp_path, "run", "--parallel") == EXIT_HALT

    def test_invalid_setting(self, tmp_path: Path) -> None:
        """Test a bad environment value exits 2."""
        _cli(tmp_path, "init", "--demo", "clean")
        assert _cli(tmp_path, "run", env={"SCAN_MODE": "bogus"}) == EXIT_USAGE

    def test_missing_sources(self, tmp_path: Path) -> None:
        """Test a config failure inside a stage exits 2."""
        (tmp_path / "pipeline.json").write_bytes(
            canonical_encode({"stages": [{"name": "b", "kind": "Build"}]})
        )
        assert _cli(tmp_path, "run") == EXIT_USAGE

    def test_corrupt_ledger(self, copied_clean_workspace: Path) -> None:
        """Test an edited ledger fails the bootstrap stage with exit 4."""
        path = LedgerStore(copied_clean_workspace / "fabric" / "ledger").block_path("main", 1)
        data = canonical_decode(path.read_bytes())
        data["block_hash"] = "0" * 64
        path.write_bytes(canonical_encode(data))
        assert _cli(copied_clean_workspace, "run") == EXIT_INTEGRITY


class TestScan:
    """Tests for the scan command."""

    def test_clean_passes(self, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
        """Test the clean manifest passes."""
        _cli(tmp_path, "init", "--demo", "clean")
        capsys.readouterr()
        argv = ["--json", "scan", "--manifest", "deps.json", "--feed", "feed.json"]
        assert _cli(tmp_path, *argv, "--allowlist", "allowlist.txt") == EXIT_OK
        assert _json_out(capsys)["verdict"] == "Pass"

    def test_vulnerable_halts(self, tmp_path: Path) -> None:
        """Test log4j 2.14.1 halts the scan."""
        _cli(tmp_path, "init", "--demo", "vulnerable")
        argv = ["scan", "--manifest", "deps.json", "--feed", "feed.json"]
        assert _cli(tmp_path, *argv) == EXIT_HALT

    def test_threshold_out_of_range(self, tmp_path: Path) -> None:
        """Test the threshold option is bounded."""
        argv = ["scan", "--manifest", "deps.json", "--feed", "feed.json", "--threshold", "101"]
        assert _cli(tmp_path, *argv) == EXIT_USAGE

    def test_missing_feed(self, tmp_path: Path) -> None:
        """Test an unreadable feed is a usage error."""
        _cli(tmp_path, "init", "--demo", "clean")
        argv = ["scan", "--manifest", "deps.json", "--feed", "absent.json"]
        assert _cli(tmp_path, *argv) == EXIT_USAGE


class TestLedgerCommands:
    """Tests for ledger-verify, ledger-query and artifact-verify."""

    def test_verify_ok(
        self, copied_clean_workspace: Path, capsys: pytest.CaptureFixture[str]
    ) -> None:
        """Test an untouched chain verifies."""
        assert _cli(copied_clean_workspace, "--json", "ledger-verify") == EXIT_OK
        result = _json_out(capsys)
        assert result["ok"] is True
        assert result["first_bad_height"] is None

    def test_verify_tampered(
        self, copied_clean_workspace: Path, capsys: pytest.CaptureFixture[str]
    ) -> None:
        """Test a flipped bit is reported with its height."""
        path = LedgerStore(copied_clean_workspace / "fabric" / "ledger").block_path("main", 2)
        data = bytearray(path.read_bytes())
        data[-3] ^= 0x01
        path.write_bytes(bytes(data))
        assert _cli(copied_clean_workspace, "--json", "ledger-verify") == EXIT_INTEGRITY
        result = _json_out(capsys)
        assert result["ok"] is False
        assert result["first_bad_height"] == 2

    def test_verify_forged_private_report(
        self, copied_clean_workspace: Path, capsys: pytest.CaptureFixture[str]
    ) -> None:
        """Test a rewritten private scan report fails verification."""
        store = LedgerStore(copied_clean_workspace / "fabric" / "ledger")
        path = store.channel_dir("main") / "private" / f"{SCAN_REPORT_COLLECTION}.json"
        data = canonical_decode(path.read_bytes())
        key = sorted(data["values"])[0]
        data["values"][key] = b64encode(b'{"findings":["forged"]}').decode("ascii")
        path.write_bytes(canonical_encode(data))
        assert _cli(copied_clean_workspace, "ledger-verify", "--json") == EXIT_INTEGRITY
        result = _json_out(capsys)
        assert result["ok"] is False
        assert result["reason"] == "PrivateDataMismatch"
        assert _cli(copied_clean_workspace, "run") == EXIT_INTEGRITY

    def test_verify_unknown_channel(self, copied_clean_workspace: Path) -> None:
        """Test verifying a channel with no stored chain."""
        assert _cli(copied_clean_workspace, "ledger-verify", "--channel", "other") == EXIT_USAGE

    def test_query(self, copied_clean_workspace: Path, capsys: pytest.CaptureFixture[str]) -> None:
        """Test reading the artifact record and its history."""
        key = f"artifact/{_package_digest(copied_clean_workspace)}"
        assert _cli(copied_clean_workspace, "--json", "ledger-query", "--key", key) == EXIT_OK
        found = _json_out(capsys)
        assert found["value"]["name"] == "app"
        argv = ["--json", "ledger-query", "--key", key, "--history"]
        assert _cli(copied_clean_workspace, *argv) == EXIT_OK
        history = _json_out(capsys)
        assert len(history) == 1
        assert history[0]["version"] == found["version"]

    def test_query_missing_key(
        self, copied_clean_workspace: Path, capsys: pytest.CaptureFixture[str]
    ) -> None:
        """Test an unset key prints null."""
        argv = ["--json", "ledger-query", "--key", "artifact/none"]
        assert _cli(copied_clean_workspace, *argv) == EXIT_OK
        assert _json_out(capsys) is None

    def test_query_not_bootstrapped(self, tmp_path: Path) -> None:
        """Test querying a workspace without a ledger."""
        assert _cli(tmp_path, "ledger-query", "--key", "k") == EXIT_USAGE

    def test_artifact_verify(self, copied_clean_workspace: Path) -> None:
        """Test a registered, untouched archive verifies and a modified one does not."""
        digest = _package_digest(copied_clean_workspace)
        argv = ["artifact-verify", "--digest", digest, "--file", "dist/app-latest.tar"]
        assert _cli(copied_clean_workspace, *argv) == EXIT_OK
        archive = copied_clean_workspace / "dist" / "app-latest.tar"
        data = bytearray(archive.read_bytes())
        data[100] ^= 0x01
        archive.write_bytes(bytes(data))
        assert _cli(copied_clean_workspace, *argv) == EXIT_INTEGRITY

    def test_artifact_unregistered(self, copied_clean_workspace: Path) -> None:
        """Test an unknown digest is an integrity failure."""
        argv = ["artifact-verify", "--digest", "f" * 64]
        assert _cli(copied_clean_workspace, *argv) == EXIT_INTEGRITY


class TestAttackAndReport:
    """Tests for the attack and report commands."""

    def test_attack(self, copied_clean_workspace: Path, capsys: pytest.CaptureFixture[str]) -> None:
        """Test one attack kind is detected and the report is written."""
        argv = ["--json", "attack", "--kinds", "ArtifactTamper,ReplayTransaction"]
        assert _cli(copied_clean_workspace, *argv) == EXIT_OK
        summary = _json_out(capsys)
        assert summary["scenarios_run"] == 2
        assert summary["detected"] == 2
        assert (copied_clean_workspace / "attack-report.json").is_file()

    def test_attack_unknown_kind(self, copied_clean_workspace: Path) -> None:
        """Test an unknown kind is a usage error."""
        assert _cli(copied_clean_workspace, "attack", "--kinds", "Phishing") == EXIT_USAGE

    def test_attack_without_run(self, tmp_path: Path) -> None:
        """Test attacking a workspace without a successful run."""
        assert _cli(tmp_path, "attack") == EXIT_USAGE

    def test_report(self, copied_clean_workspace: Path) -> None:
        """Test a stored run report is shown."""
        result = runner.invoke(
            app, ["-w", str(copied_clean_workspace), "report", "--run", "run-1"]
        )
        assert result.exit_code == 0
        assert "Overall: Success" in result.stdout
        assert _cli(copied_clean_workspace, "report", "--run", "run-9") == EXIT_USAGE

    def test_report_outside_runs(self, copied_clean_workspace: Path) -> None:
        """Test a run id that climbs out of runs/ is a usage error."""
        assert _cli(copied_clean_workspace, "report", "--run", "../..") == EXIT_USAGE
        assert _cli(copied_clean_workspace, "report", "--run", "../fabric") == EXIT_USAGE
