"""Pipeline configuration: environment variables, defaults and ``${VAR}`` expansion."""

import os
import re
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path

from ci_ledger.vulnscan import DEFAULT_THRESHOLD, ScanMode


class PipelineError(Exception):
    """Base exception for pipeline configuration and execution errors."""

    pass


class UnboundVariable(PipelineError):
    """A ``${VAR}`` placeholder has no value."""

    def __init__(self, name: str) -> None:
        self.name = name
        super().__init__(f"unbound variable ${{{name}}}")


class InvalidSetting(PipelineError):
    """A configuration value does not parse."""

    pass


PLACEHOLDER = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")

# Built-in defaults, lowest precedence.
DEFAULTS: dict[str, str] = {
    "FABRIC_BIN": "fabric",
    "IMAGE_NAME": "app",
    "IMAGE_TAG": "latest",
    "CONTAINER_NAME": "${IMAGE_NAME}-${BUILD_NUMBER}",
    "BUILD_NUMBER": "1",
    "PIPELINE_PARALLEL": "false",
    "SCAN_THRESHOLD": str(DEFAULT_THRESHOLD),
    "SCAN_MODE": ScanMode.STRICT.value,
    "SCAN_ALLOWLIST": "",
    "DEPLOY_ENV": "staging",
    "CHANNEL": "main",
    "ENDORSEMENT_POLICY": "",
    "ORG_COUNT": "2",
    "PEERS_PER_ORG": "2",
    "CLIENTS_PER_ORG": "1",
    "CRYPTO_SEED": "0" * 64,
    "BUILD_COMMAND": "",
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off", ""}


def expand_vars(text: str, variables: Mapping[str, str]) -> str:
    """Replace every ``${NAME}`` in text with its value.

    Args:
        text: String possibly containing placeholders
        variables: Values by name

    Returns:
        The expanded string (a single pass; values are not re-expanded)

    Raises:
        UnboundVariable: If a placeholder has no value
    """

    def lookup(match: re.Match) -> str:
        name = match.group(1)
        if name not in variables:
            raise UnboundVariable(name)
        return variables[name]

    return PLACEHOLDER.sub(lookup, text)


def merge_env(
    overrides: Mapping[str, str] | None = None,
    env: Mapping[str, str] | None = None,
) -> dict[str, str]:
    """Variables by precedence: overrides, then the environment, then DEFAULTS."""
    merged = dict(DEFAULTS)
    source = os.environ if env is None else env
    merged.update({k: v for k, v in source.items() if isinstance(v, str)})
    if overrides:
        merged.update(overrides)
    return merged


def _parse_int(variables: Mapping[str, str], name: str, low: int, high: int | None = None) -> int:
    raw = variables[name]
    try:
        value = int(raw)
    except ValueError:
        raise InvalidSetting(f"{name}={raw!r} is not an integer") from None
    if value < low or (high is not None and value > high):
        bound = f"{low}..{high}" if high is not None else f">= {low}"
        raise InvalidSetting(f"{name}={value} must be {bound}")
    return value


def _parse_bool(variables: Mapping[str, str], name: str) -> bool:
    raw = variables[name].strip().lower()
    if raw in _TRUE:
        return True
    if raw in _FALSE:
        return False
    raise InvalidSetting(f"{name}={variables[name]!r} is not a boolean")


@dataclass
class PipelineConfig:
    """Resolved pipeline configuration."""

    fabric_bin: Path
    image_name: str
    image_tag: str
    container_name: str
    build_number: int
    parallel: bool
    threshold: int
    mode: ScanMode
    allowlist: tuple[str, ...]
    deploy_env: str
    channel: str
    endorsement_policy: str
    org_count: int
    peers_per_org: int
    clients_per_org: int
    crypto_seed: bytes
    build_command: str
    variables: dict[str, str]

    def expand(self, text: str) -> str:
        return expand_vars(text, self.variables)

    def render_container_name(self) -> str:
        """CONTAINER_NAME with IMAGE_NAME, IMAGE_TAG and BUILD_NUMBER substituted."""
        return self.expand(self.container_name)

    def default_policy(self) -> str:
        if self.endorsement_policy:
            return self.endorsement_policy
        orgs = ", ".join(f"Org{i}" for i in range(1, self.org_count + 1))
        return f"OutOf(1, {orgs})"

    def snapshot(self) -> dict:
        """Canonical-encodable view for run reports."""
        return {
            "FABRIC_BIN": self.variables.get("FABRIC_BIN", str(self.fabric_bin)),
            "IMAGE_NAME": self.image_name,
            "IMAGE_TAG": self.image_tag,
            "CONTAINER_NAME": self.container_name,
            "BUILD_NUMBER": self.build_number,
            "PIPELINE_PARALLEL": self.parallel,
            "SCAN_THRESHOLD": self.threshold,
            "SCAN_MODE": self.mode.value,
            "SCAN_ALLOWLIST": list(self.allowlist),
            "DEPLOY_ENV": self.deploy_env,
            "CHANNEL": self.channel,
            "ENDORSEMENT_POLICY": self.default_policy(),
            "ORG_COUNT": self.org_count,
            "PEERS_PER_ORG": self.peers_per_org,
            "CLIENTS_PER_ORG": self.clients_per_org,
        }


def load_config(
    overrides: Mapping[str, str] | None = None,
    env: Mapping[str, str] | None = None,
    workspace: Path | None = None,
) -> PipelineConfig:
    """Resolve a PipelineConfig.

    Args:
        overrides: Explicit values, highest precedence
        env: Environment to read (default: the process environment)
        workspace: Base for a relative FABRIC_BIN

    Returns:
        PipelineConfig with the merged variable table attached

    Raises:
        InvalidSetting: If a numeric, boolean or enum value does not parse
    """
    variables = merge_env(overrides, env)
    mode_raw = variables["SCAN_MODE"].strip().lower()
    try:
        mode = ScanMode(mode_raw)
    except ValueError:
        raise InvalidSetting(f"SCAN_MODE={mode_raw!r} must be strict or permissive") from None
    seed_hex = variables["CRYPTO_SEED"].strip()
    try:
        seed = bytes.fromhex(seed_hex)
    except ValueError:
        raise InvalidSetting("CRYPTO_SEED must be hex") from None
    if len(seed) != 32:
        raise InvalidSetting("CRYPTO_SEED must be 64 hex characters")

    fabric_bin = Path(variables["FABRIC_BIN"])
    if workspace is not None and not fabric_bin.is_absolute():
        fabric_bin = Path(workspace) / fabric_bin
    build_number = _parse_int(variables, "BUILD_NUMBER", 0)
    variables["BUILD_NUMBER"] = str(build_number)

    return PipelineConfig(
        fabric_bin=fabric_bin,
        image_name=variables["IMAGE_NAME"],
        image_tag=variables["IMAGE_TAG"],
        container_name=variables["CONTAINER_NAME"],
        build_number=build_number,
        parallel=_parse_bool(variables, "PIPELINE_PARALLEL"),
        threshold=_parse_int(variables, "SCAN_THRESHOLD", 0, 100),
        mode=mode,
        allowlist=tuple(p.strip() for p in variables["SCAN_ALLOWLIST"].split(",") if p.strip()),
        deploy_env=variables["DEPLOY_ENV"],
        channel=variables["CHANNEL"],
        endorsement_policy=variables["ENDORSEMENT_POLICY"],
        org_count=_parse_int(variables, "ORG_COUNT", 1),
        peers_per_org=_parse_int(variables, "PEERS_PER_ORG", 1),
        clients_per_org=_parse_int(variables, "CLIENTS_PER_ORG", 1),
        crypto_seed=seed,
        build_command=variables["BUILD_COMMAND"],
        variables=variables,
    )


def config_from_snapshot(
    snapshot: Mapping[str, object],
    workspace: Path | None = None,
    overrides: Mapping[str, str] | None = None,
) -> PipelineConfig:
    """Rebuild the configuration recorded in a run report, ignoring the process environment."""
    values: dict[str, str] = {}
    for name, value in snapshot.items():
        if isinstance(value, bool):
            values[name] = "true" if value else "false"
        elif isinstance(value, list):
            values[name] = ",".join(str(v) for v in value)
        else:
            values[name] = str(value)
    values.update(overrides or {})
    return load_config(values, env={}, workspace=workspace)
