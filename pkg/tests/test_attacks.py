"""Tests for the attack harness and its detectors."""

from pathlib import Path

import pytest

from ci_ledger import attacks
from ci_ledger.attacks import (
    AttackKind,
    AttackScenario,
    Stride,
    WorkspaceNotReady,
    derive_seed,
    execute_scenario,
    load_target,
    run_suite,
    uncovered_stride,
)
from ci_ledger.canonical import canonical_decode
from ci_ledger.demo import Variant
from ci_ledger.pipeline import tree_digest
from tests.conftest import run_demo

BASE_SEED = bytes(32)


class TestScenarios:
    """Tests for scenario seeds and threat categories."""

    def test_seed_derivation(self) -> None:
        """Test seeds are stable and differ by kind and index."""
        first = derive_seed(BASE_SEED, AttackKind.LEDGER_REWRITE, 0)
        assert first == derive_seed(BASE_SEED, AttackKind.LEDGER_REWRITE, 0)
        assert first != derive_seed(BASE_SEED, AttackKind.LEDGER_REWRITE, 1)
        assert first != derive_seed(BASE_SEED, AttackKind.ARTIFACT_TAMPER, 0)
        assert 0 <= first < 2**64

    def test_stride_mapping(self) -> None:
        """Test every kind maps to a category and the gaps are reported."""
        scenario = AttackScenario(AttackKind.REPLAY_TRANSACTION, 1)
        assert scenario.stride is Stride.SPOOFING
        assert scenario.expected_detection == "commit: DuplicateTxId"
        assert uncovered_stride() == [
            Stride.REPUDIATION,
            Stride.INFORMATION_DISCLOSURE,
            Stride.DENIAL_OF_SERVICE,
        ]


class TestTarget:
    """Tests for locating the attack target."""

    def test_empty_workspace(self, tmp_path: Path) -> None:
        """Test a workspace without runs is refused."""
        with pytest.raises(WorkspaceNotReady):
            load_target(tmp_path)

    def test_halted_workspace(self, tmp_path: Path) -> None:
        """Test a workspace whose only run halted at the gate is refused."""
        run_demo(tmp_path, Variant.VULNERABLE)
        with pytest.raises(WorkspaceNotReady, match="no successful pipeline run"):
            run_suite(tmp_path, [AttackKind.ARTIFACT_TAMPER], 1, BASE_SEED)

    def test_clean_workspace(self, shared_clean_workspace: Path) -> None:
        """Test the packaged image of the latest clean run is found."""
        target = load_target(shared_clean_workspace)
        assert target.image.path == shared_clean_workspace / "dist" / "app-latest.tar"
        assert target.image.container_name == "app-1"
        assert target.config.fabric_bin == shared_clean_workspace / "fabric"


class TestDetection:
    """Tests that every injected attack is caught on its own copy."""

    @pytest.mark.parametrize("kind", list(AttackKind))
    def test_single_scenario(self, shared_clean_workspace: Path, kind: AttackKind) -> None:
        """Test one scenario of each kind is detected without touching the workspace."""
        before = tree_digest(shared_clean_workspace)
        scenario = AttackScenario(kind, derive_seed(BASE_SEED, kind, 0))
        outcome = execute_scenario(scenario, shared_clean_workspace)
        assert outcome.detected, outcome.detail
        assert tree_digest(shared_clean_workspace) == before

    def test_suite(self, shared_clean_workspace: Path, tmp_path: Path) -> None:
        """Test a full suite detects everything with no false positives."""
        report = run_suite(shared_clean_workspace, list(AttackKind), 2, BASE_SEED)
        assert report.ok
        assert report.scenarios_run == 12
        assert report.detected == 12
        assert report.control_checked == 6
        assert report.false_positives == []
        assert report.per_kind()["LedgerRewrite"] == {"run": 2, "detected": 2}
        assert report.stride_summary()["Tampering"] == {"run": 6, "detected": 6}
        path = report.write(tmp_path / "out" / attacks.ATTACK_REPORT)
        written = canonical_decode(path.read_bytes())
        assert written["missed"] == []
        assert written["uncovered_stride"] == [s.value for s in uncovered_stride()]

    @pytest.mark.slow
    def test_every_kind_many_seeds(self, shared_clean_workspace: Path) -> None:
        """Test 50 seeds of every kind are all detected and the controls stay quiet."""
        report = run_suite(shared_clean_workspace, list(AttackKind), 50, BASE_SEED)
        assert report.scenarios_run == 300
        assert report.detected == 300, [o.detail for o in report.missed]
        assert report.false_positives == []
        assert all(row == {"run": 50, "detected": 50} for row in report.per_kind().values())

    def test_deterministic(self, shared_clean_workspace: Path) -> None:
        """Test identical inputs give identical reports."""
        kinds = ["ReplayTransaction", "DependencyDowngrade"]
        first = run_suite(shared_clean_workspace, kinds, 1, BASE_SEED, control=False)
        second = run_suite(shared_clean_workspace, kinds, 1, BASE_SEED, control=False)
        assert first.to_dict() == second.to_dict()

    def test_empty_kinds(self, shared_clean_workspace: Path) -> None:
        """Test no kinds gives an empty report."""
        report = run_suite(shared_clean_workspace, [], 5, BASE_SEED)
        assert report.scenarios_run == 0
        assert report.ok

    def test_crash_counts_as_miss(
        self, shared_clean_workspace: Path, monkeypatch: pytest.MonkeyPatch
    ) -> None:
        """Test a detector that raises is reported as a miss."""

        def broken(target, rng, inject):
            raise RuntimeError("detector crashed")

        monkeypatch.setitem(attacks.ATTACKS, AttackKind.ARTIFACT_TAMPER, broken)
        report = run_suite(
            shared_clean_workspace, [AttackKind.ARTIFACT_TAMPER], 1, BASE_SEED, control=False
        )
        assert not report.ok
        assert report.missed[0].detail == "unexpected RuntimeError: detector crashed"
