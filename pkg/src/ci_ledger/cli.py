"""Command-line interface for ci-ledger."""

import base64
import logging
import sys
from collections.abc import Iterator, Mapping, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Annotated, Any, NoReturn

import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import Progress, SpinnerColumn, TextColumn
from rich.table import Table

from ci_ledger import __version__
from ci_ledger.attacks import ATTACK_REPORT, AttackError, AttackKind, run_suite
from ci_ledger.canonical import EncodingError, canonical_decode, canonical_encode, sha256_hex
from ci_ledger.demo import Variant, write_demo
from ci_ledger.identity import IdentityError, Membership, load_all_materials
from ci_ledger.ledger import LedgerStore, get_state, read_history, replay_state
from ci_ledger.network import CorruptWorkspace, NotBootstrapped
from ci_ledger.ordering import ConfigError, audit_chain
from ci_ledger.pipeline import (
    Overall,
    PipelineRun,
    load_pipeline_def,
    load_run_report,
    open_network,
    run_pipeline,
    stage_ledger_bootstrap,
)
from ci_ledger.settings import PipelineError, load_config
from ci_ledger.vulnscan import (
    ScanError,
    ScanMode,
    Verdict,
    load_allowlist,
    load_feed,
    load_manifest,
    render_report_text,
    scan_manifest,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_HALT = 3
EXIT_INTEGRITY = 4
EXIT_INTERNAL = 5

app = typer.Typer(
    name="ci-ledger",
    help="Ledger-backed CI/CD pipeline with provenance, dependency gating and attack drills.",
    add_completion=False,
    no_args_is_help=True,
)
console = Console()
err_console = Console(stderr=True)

JsonOption = Annotated[bool, typer.Option("--json", help="Print canonical JSON on stdout")]


@dataclass
class CliState:
    workspace: Path = Path(".")
    json: bool = False
    env: Mapping[str, str] | None = None


def _state(ctx: typer.Context, json_output: bool = False) -> CliState:
    if not isinstance(ctx.obj, CliState):
        ctx.obj = CliState()
    ctx.obj.json = ctx.obj.json or json_output
    return ctx.obj


def _emit_json(value: Any) -> None:
    typer.echo(canonical_encode(value).decode("utf-8"))


def _fail(message: str, code: int) -> NoReturn:
    err_console.print(f"[red]Error:[/red] {message}")
    raise typer.Exit(code)


_USAGE_ERRORS = (
    PipelineError,
    ScanError,
    NotBootstrapped,
    AttackError,
    ConfigError,
    IdentityError,
    EncodingError,
    ValueError,
    FileNotFoundError,
)


@contextmanager
def _exit_codes() -> Iterator[None]:
    """Translate exceptions into the CLI exit codes."""
    try:
        yield
    except typer.Exit:
        raise
    except CorruptWorkspace as e:
        _fail(str(e), EXIT_INTEGRITY)
    except _USAGE_ERRORS as e:
        _fail(str(e), EXIT_USAGE)
    except Exception as e:
        logger.exception("internal error")
        _fail(f"internal error: {type(e).__name__}: {e}", EXIT_INTERNAL)


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(message)s",
        handlers=[RichHandler(console=err_console, show_path=False)],
        force=True,
    )


def version_callback(value: bool) -> None:
    """Print version and exit."""
    if value:
        console.print(f"ci-ledger version {__version__}")
        raise typer.Exit()


@app.callback()
def main_options(
    ctx: typer.Context,
    workspace: Annotated[
        Path,
        typer.Option("--workspace", "-w", help="Workspace directory all paths resolve against"),
    ] = Path("."),
    json_output: Annotated[
        bool,
        typer.Option("--json", help="Print canonical JSON on stdout"),
    ] = False,
    verbose: Annotated[
        bool,
        typer.Option("--verbose", help="Log progress to stderr"),
    ] = False,
    version: Annotated[
        bool | None,
        typer.Option(
            "--version",
            "-v",
            callback=version_callback,
            is_eager=True,
            help="Show version and exit",
        ),
    ] = None,
) -> None:
    state = _state(ctx)
    state.workspace = workspace
    state.json = json_output
    _setup_logging(verbose)


@app.command()
def init(
    ctx: typer.Context,
    orgs: Annotated[int | None, typer.Option("--orgs", help="Number of organizations")] = None,
    peers_per_org: Annotated[
        int | None, typer.Option("--peers-per-org", help="Peers per organization")
    ] = None,
    seed: Annotated[
        str | None, typer.Option("--seed", help="64 hex characters of key seed")
    ] = None,
    demo: Annotated[
        Variant | None,
        typer.Option("--demo", help="Also write a demo project (clean or vulnerable)"),
    ] = None,
    json_output: JsonOption = False,
) -> None:
    """Create crypto materials, the channel and the built-in contracts.

    Rerunning against an initialized workspace changes nothing.
    """
    state = _state(ctx, json_output)
    with _exit_codes():
        overrides = {}
        if orgs is not None:
            overrides["ORG_COUNT"] = str(orgs)
        if peers_per_org is not None:
            overrides["PEERS_PER_ORG"] = str(peers_per_org)
        if seed is not None:
            overrides["CRYPTO_SEED"] = seed
        config = load_config(overrides, state.env, state.workspace)
        state.workspace.mkdir(parents=True, exist_ok=True)
        wrote_demo = False
        if demo is not None and not (state.workspace / "deps.json").exists():
            write_demo(state.workspace, demo)
            wrote_demo = True
        out = stage_ledger_bootstrap(config)
        height = out.network.orderer.height(config.channel)
        summary = {
            "channel": config.channel,
            "orgs": out.network.membership.orgs,
            "height": height,
            "changed": out.changed,
            "demo": demo.value if wrote_demo and demo else None,
        }
    if state.json:
        _emit_json(summary)
        return
    verb = "Initialized" if out.changed else "Already initialized"
    console.print(
        f"[green]{verb}[/green] channel [cyan]{config.channel}[/cyan] "
        f"for {', '.join(summary['orgs'])} at height {height}"
    )
    if wrote_demo:
        console.print(f"  Demo project ({demo.value}) written to {state.workspace}")


def _run_exit_code(run: PipelineRun) -> int:
    if run.overall is Overall.SUCCESS:
        return EXIT_OK
    if run.overall is Overall.HALTED_AT_GATE:
        return EXIT_HALT
    return {"integrity": EXIT_INTEGRITY, "config": EXIT_USAGE}.get(
        run.failure_class() or "", EXIT_INTERNAL
    )


def _print_run(run: PipelineRun) -> None:
    table = Table(title=f"Run {run.run_id}")
    table.add_column("Stage")
    table.add_column("Kind")
    table.add_column("Status")
    table.add_column("ms", justify="right")
    table.add_column("Detail")
    colors = {"Success": "green", "Halted": "yellow", "Failed": "red", "Skipped": "dim"}
    for r in run.stage_results:
        color = colors[r.status.value]
        table.add_row(
            r.name,
            r.kind.value,
            f"[{color}]{r.status.value}[/{color}]",
            str(r.duration_ms),
            r.error or ", ".join(f"{k}={v}" for k, v in sorted(r.outputs.items()))[:60],
        )
    console.print(table)
    console.print(f"[bold]Overall:[/bold] {run.overall.value}")


@app.command()
def run(
    ctx: typer.Context,
    pipeline: Annotated[
        Path | None,
        typer.Option("--pipeline", "-p", help="Pipeline definition (default: pipeline.json)"),
    ] = None,
    parallel: Annotated[
        bool, typer.Option("--parallel", help="Run independent stages concurrently")
    ] = False,
    json_output: JsonOption = False,
) -> None:
    """Run the pipeline: build, package, dependency gate, ledger bootstrap and deploy."""
    state = _state(ctx, json_output)
    with _exit_codes():
        overrides = {"PIPELINE_PARALLEL": "true"} if parallel else {}
        config = load_config(overrides, state.env, state.workspace)
        path = state.workspace / pipeline if pipeline else state.workspace / "pipeline.json"
        if pipeline is None and not path.exists():
            path = None
        definition = load_pipeline_def(path, config.variables)
        if state.json:
            result = run_pipeline(definition, config, state.workspace)
        else:
            with Progress(
                SpinnerColumn(),
                TextColumn("[progress.description]{task.description}"),
                console=err_console,
                transient=True,
            ) as progress:
                progress.add_task("Running pipeline...", total=None)
                result = run_pipeline(definition, config, state.workspace)
    if state.json:
        _emit_json(result.to_dict())
    else:
        _print_run(result)
    raise typer.Exit(_run_exit_code(result))


@app.command()
def scan(
    ctx: typer.Context,
    manifest: Annotated[Path, typer.Option("--manifest", help="Dependency manifest JSON")],
    feed: Annotated[Path, typer.Option("--feed", help="CVE feed JSON")],
    threshold: Annotated[
        int | None,
        typer.Option("--threshold", min=0, max=100, help="Gate threshold in tenths"),
    ] = None,
    allowlist: Annotated[
        Path | None, typer.Option("--allowlist", help="File of allowed source URL prefixes")
    ] = None,
    mode: Annotated[
        ScanMode | None, typer.Option("--mode", help="strict or permissive")
    ] = None,
    json_output: JsonOption = False,
) -> None:
    """Scan a dependency manifest against an offline CVE feed."""
    state = _state(ctx, json_output)
    ws = state.workspace
    with _exit_codes():
        config = load_config(None, state.env, ws)
        prefixes = list(config.allowlist)
        if allowlist is not None:
            prefixes += load_allowlist(ws / allowlist)
        report = scan_manifest(
            load_manifest(ws / manifest),
            load_feed(ws / feed),
            threshold=config.threshold if threshold is None else threshold,
            allowlist=prefixes,
            mode=mode or config.mode,
        )
    if state.json:
        _emit_json(report.to_dict())
    else:
        console.print(render_report_text(report), end="")
    raise typer.Exit(EXIT_HALT if report.verdict is Verdict.HALT else EXIT_OK)


@app.command("ledger-verify")
def ledger_verify(
    ctx: typer.Context,
    channel: Annotated[str, typer.Option("--channel", help="Channel to verify")] = "main",
    json_output: JsonOption = False,
) -> None:
    """Recompute every block hash, replay validation and check stored private values."""
    state = _state(ctx, json_output)
    with _exit_codes():
        config = load_config(None, state.env, state.workspace)
        store = LedgerStore(config.fabric_bin / "ledger")
        if not store.has_channel(channel):
            _fail(f"no stored chain for channel {channel} under {store.root}", EXIT_USAGE)
        check = store.validate(channel)
        height = len(store.read_block_blobs(channel))
        if check:
            materials = load_all_materials(config.fabric_bin / "crypto")
            blocks = store.load_blocks(channel)
            check = audit_chain(blocks, Membership.from_materials(materials))
            if check:
                check = store.validate_private(channel, replay_state(channel, blocks))
    if state.json:
        _emit_json(
            {
                "channel": channel,
                "ok": check.ok,
                "height": height,
                "first_bad_height": check.height,
                "reason": check.reason.value if check.reason else None,
                "detail": check.detail,
            }
        )
    if not check:
        err_console.print(f"[red]Integrity violation:[/red] {channel}: {check}")
        raise typer.Exit(EXIT_INTEGRITY)
    if not state.json:
        console.print(f"[green]Ok[/green] {channel}: {height} blocks verified")


def _render_value(value: bytes | None) -> Any:
    if value is None:
        return None
    try:
        return canonical_decode(value)
    except (ValueError, EncodingError):
        return {"base64": base64.b64encode(value).decode("ascii")}


@app.command("ledger-query")
def ledger_query(
    ctx: typer.Context,
    key: Annotated[str, typer.Option("--key", help="World-state key")],
    channel: Annotated[str, typer.Option("--channel", help="Channel to query")] = "main",
    history: Annotated[
        bool, typer.Option("--history", help="Show every committed write of the key")
    ] = False,
    json_output: JsonOption = False,
) -> None:
    """Read a key from the world state, or its full write history."""
    state = _state(ctx, json_output)
    with _exit_codes():
        config = load_config({"CHANNEL": channel}, state.env, state.workspace)
        chain = open_network(config).chain(channel)
        if history:
            result: Any = [
                {
                    "tx_id": entry.tx_id,
                    "version": entry.version.to_dict(),
                    "value": _render_value(entry.value),
                }
                for entry in read_history(chain, key)
            ]
        else:
            found = get_state(chain.state, key)
            result = (
                None
                if found is None
                else {"key": key, "value": _render_value(found[0]), "version": found[1].to_dict()}
            )
    if state.json:
        _emit_json(result)
    elif result is None:
        console.print(f"[yellow]{key}[/yellow] is not set on {channel}")
    else:
        console.print_json(canonical_encode(result).decode("utf-8"))


@app.command("artifact-verify")
def artifact_verify(
    ctx: typer.Context,
    digest: Annotated[str, typer.Option("--digest", help="SHA-256 of the packaged archive")],
    file: Annotated[
        Path | None, typer.Option("--file", help="Archive to rehash and compare")
    ] = None,
    channel: Annotated[str, typer.Option("--channel", help="Channel to query")] = "main",
    json_output: JsonOption = False,
) -> None:
    """Check that an artifact is registered and, with --file, that the archive still matches."""
    state = _state(ctx, json_output)
    with _exit_codes():
        config = load_config({"CHANNEL": channel}, state.env, state.workspace)
        net = open_network(config)
        verified = net.query_contract(channel, "provenance", "verify", [digest], net.client())
        attestation = net.query_contract(channel, "attestation", "latest", [digest], net.client())
        problems = []
        if verified["status"] != "Registered":
            problems.append(f"{digest} is not registered")
        if file is not None:
            actual = sha256_hex((state.workspace / file).read_bytes())
            if actual != digest:
                problems.append(f"{file} hashes to {actual}")
    result = {
        "digest": digest,
        "status": verified["status"],
        "record": verified.get("record"),
        "attestation": attestation.get("attestation"),
        "problems": problems,
    }
    if state.json:
        _emit_json(result)
    elif not problems:
        record = verified["record"]
        console.print(
            f"[green]Registered[/green] {record['name']}:{record['tag']} "
            f"source {record['source_digest'][:16]}"
        )
        if result["attestation"]:
            console.print(f"  Latest attestation: {result['attestation']['verdict']}")
    for problem in problems:
        err_console.print(f"[red]Integrity violation:[/red] {problem}")
    raise typer.Exit(EXIT_INTEGRITY if problems else EXIT_OK)


@app.command()
def attack(
    ctx: typer.Context,
    kinds: Annotated[
        str, typer.Option("--kinds", help="Comma-separated attack kinds or 'all'")
    ] = "all",
    seeds: Annotated[int, typer.Option("--seeds", min=0, help="Scenarios per kind")] = 1,
    base_seed: Annotated[
        str, typer.Option("--base-seed", help="Hex seed all scenario seeds derive from")
    ] = "00",
    json_output: JsonOption = False,
) -> None:
    """Run scripted attacks on copies of the workspace and report what was detected."""
    state = _state(ctx, json_output)
    with _exit_codes():
        if kinds.strip().lower() == "all":
            selected = list(AttackKind)
        else:
            selected = [AttackKind(k.strip()) for k in kinds.split(",") if k.strip()]
        seed_bytes = bytes.fromhex(base_seed)
        report = run_suite(state.workspace, selected, seeds, seed_bytes)
        report.write(state.workspace / ATTACK_REPORT)
    if state.json:
        _emit_json(report.to_dict())
    else:
        table = Table(title="Attack suite")
        table.add_column("Kind")
        table.add_column("STRIDE")
        table.add_column("Detected", justify="right")
        stride = {o.scenario.kind.value: o.scenario.stride.value for o in report.outcomes}
        for kind, row in report.per_kind().items():
            table.add_row(kind, stride[kind], f"{row['detected']}/{row['run']}")
        console.print(table)
        console.print(
            f"[bold]Summary:[/bold] {report.detected} detected, {len(report.missed)} missed, "
            f"{len(report.false_positives)} false positives"
        )
    raise typer.Exit(EXIT_OK if report.ok else EXIT_INTEGRITY)


@app.command()
def report(
    ctx: typer.Context,
    run_id: Annotated[str, typer.Option("--run", help="Run id under runs/")],
    json_output: JsonOption = False,
) -> None:
    """Show a stored run report."""
    state = _state(ctx, json_output)
    with _exit_codes():
        data = load_run_report(state.workspace, run_id)
    if state.json:
        _emit_json(data)
        return
    table = Table(title=f"Run {data['run_id']}")
    table.add_column("Stage")
    table.add_column("Status")
    table.add_column("us", justify="right")
    for r in data["stage_results"]:
        table.add_row(r["name"], r["status"], str(r["duration_us"]))
    console.print(table)
    console.print(f"[bold]Overall:[/bold] {data['overall']}")
    if data["ledger_txs"]:
        console.print(f"  Ledger transactions: {len(data['ledger_txs'])}")


_EXIT_CODES = (EXIT_OK, EXIT_USAGE, EXIT_HALT, EXIT_INTEGRITY, EXIT_INTERNAL)


def run_cli(argv: Sequence[str], env: Mapping[str, str] | None = None) -> int:
    """Run the CLI in process and return its exit code (0, 2, 3, 4 or 5).

    Args:
        argv: Arguments after the program name
        env: Environment for configuration lookups (default: the process environment)
    """
    command = typer.main.get_command(app)
    try:
        command.main(
            args=list(argv),
            prog_name="ci-ledger",
            standalone_mode=True,
            obj=CliState(env=env),
        )
    except SystemExit as e:
        if e.code is None:
            return EXIT_OK
        return e.code if e.code in _EXIT_CODES else EXIT_USAGE
    except Exception as e:
        err_console.print(f"[red]Error:[/red] internal error: {type(e).__name__}: {e}")
        return EXIT_INTERNAL
    return EXIT_OK


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
