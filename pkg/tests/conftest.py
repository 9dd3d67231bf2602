"""Pytest fixtures for ci-ledger tests."""

import shutil
from collections.abc import Callable
from pathlib import Path

import pytest

from ci_ledger.chaincode import BUILTIN_CONTRACTS, ContractRegistry
from ci_ledger.demo import Variant, write_demo
from ci_ledger.identity import OrgMaterials, generate_consortium
from ci_ledger.network import Network
from ci_ledger.pipeline import PipelineRun, load_pipeline_def, run_pipeline
from ci_ledger.settings import PipelineConfig, load_config

CHANNEL = "main"
STRICT_POLICY = "And(Org1, Org2)"


@pytest.fixture(scope="session")
def consortium() -> list[OrgMaterials]:
    """Two orgs with two peers and one client each, from the all-zero seed."""
    return generate_consortium(2, 2, 1, bytes(32))


@pytest.fixture
def make_network(
    consortium: list[OrgMaterials],
) -> Callable[..., Network]:
    """Factory for a network with channel main and the built-in contracts initialized."""

    def build(
        registry: ContractRegistry | None = None,
        policy: str = STRICT_POLICY,
        extra_contracts: tuple = (),
    ) -> Network:
        net = Network(consortium, registry=registry)
        net.create_channel(CHANNEL, net.admin())
        for peer in net.peers:
            net.join_channel(peer, CHANNEL)
        for target in (*BUILTIN_CONTRACTS, *extra_contracts):
            net.install_everywhere(target.package())
            net.init_contract(CHANNEL, target.name, target.version, policy, net.admin())
        return net

    return build


@pytest.fixture
def network(make_network: Callable[..., Network]) -> Network:
    """Bootstrapped network whose contracts need both orgs to endorse."""
    return make_network()


def demo_config(workspace: Path, **overrides: str) -> PipelineConfig:
    """Configuration that ignores the process environment."""
    return load_config(overrides, env={}, workspace=workspace)


def run_demo(workspace: Path, variant: Variant, parallel: bool = False) -> PipelineRun:
    write_demo(workspace, variant)
    config = demo_config(workspace, PIPELINE_PARALLEL="true" if parallel else "false")
    definition = load_pipeline_def(workspace / "pipeline.json", config.variables)
    return run_pipeline(definition, config, workspace)


@pytest.fixture
def clean_workspace(tmp_path: Path) -> tuple[Path, PipelineRun]:
    """Workspace holding the clean demo project after one successful run."""
    workspace = tmp_path / "clean"
    return workspace, run_demo(workspace, Variant.CLEAN)


@pytest.fixture(scope="module")
def shared_clean_workspace(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """Read-only clean workspace shared by a module; copy it before mutating."""
    workspace = tmp_path_factory.mktemp("shared") / "clean"
    run_demo(workspace, Variant.CLEAN)
    return workspace


@pytest.fixture
def copied_clean_workspace(shared_clean_workspace: Path, tmp_path: Path) -> Path:
    """Private copy of the shared clean workspace."""
    copy = tmp_path / "copy"
    shutil.copytree(shared_clean_workspace, copy)
    return copy
