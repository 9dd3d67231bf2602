"""Offline dependency scanner: CPE parsing, version ordering and CVE feed matching."""

import io
import json
import logging
import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from decimal import Decimal, InvalidOperation
from enum import Enum
from pathlib import Path
from typing import Any

from rich.console import Console
from rich.table import Table

from ci_ledger.canonical import canonical_encode, canonical_hash

logger = logging.getLogger(__name__)

WILDCARD = "*"
CPE_PREFIX = "cpe:2.3:"
DEFAULT_THRESHOLD = 70
CVE_ID = re.compile(r"^CVE-\d{4}-\d{4,}$")


class ScanError(Exception):
    """Error parsing scanner inputs."""

    pass


class BadPrefix(ScanError):
    pass


class FieldCount(ScanError):
    pass


class BadPart(ScanError):
    pass


class FeedInvalid(ScanError):
    """Feed violates the schema; path points at the offending field."""

    def __init__(self, path: str, message: str) -> None:
        self.path = path
        super().__init__(f"{path}: {message}")


class ManifestInvalid(ScanError):
    def __init__(self, path: str, message: str) -> None:
        self.path = path
        super().__init__(f"{path}: {message}")


class Ordering(str, Enum):
    LESS = "Less"
    EQUAL = "Equal"
    GREATER = "Greater"


class Severity(str, Enum):
    NONE = "None"
    LOW = "Low"
    MEDIUM = "Medium"
    HIGH = "High"
    CRITICAL = "Critical"


class Verdict(str, Enum):
    PASS = "Pass"
    HALT = "Halt"


class ScanMode(str, Enum):
    STRICT = "strict"
    PERMISSIVE = "permissive"


class MatchReason(str, Enum):
    VERSION_MATCH = "VersionMatch"
    EXACT_MATCH = "ExactMatch"


def severity_for(score: int) -> Severity:
    """CVSS band of a score given in tenths."""
    if score == 0:
        return Severity.NONE
    if score < 40:
        return Severity.LOW
    if score < 70:
        return Severity.MEDIUM
    if score < 90:
        return Severity.HIGH
    return Severity.CRITICAL


# CPE names


@dataclass(frozen=True)
class CpeName:
    part: str
    vendor: str
    product: str
    version: str = WILDCARD
    update: str = WILDCARD
    edition: str = WILDCARD
    language: str = WILDCARD
    sw_edition: str = WILDCARD
    target_sw: str = WILDCARD
    target_hw: str = WILDCARD
    other: str = WILDCARD

    def __str__(self) -> str:
        fields = [
            self.part, self.vendor, self.product, self.version, self.update, self.edition,
            self.language, self.sw_edition, self.target_sw, self.target_hw, self.other,
        ]
        return CPE_PREFIX + ":".join(f.replace(":", "\\:") for f in fields)


def _split_cpe(text: str) -> list[str]:
    fields = []
    current = []
    chars = iter(text)
    for ch in chars:
        if ch == "\\":
            escaped = next(chars, "")
            current.append(escaped)
        elif ch == ":":
            fields.append("".join(current))
            current = []
        else:
            current.append(ch)
    fields.append("".join(current))
    return fields


def parse_cpe(text: str) -> CpeName:
    """Parse a CPE 2.3 formatted string.

    Splits on unescaped colons (``\\:`` is a literal colon) and lowercases
    vendor and product.

    Raises:
        BadPrefix: If the text does not start with ``cpe:2.3:``
        FieldCount: If there are not exactly 13 fields
        BadPart: If the part is not a, o or h
    """
    if not text.startswith(CPE_PREFIX):
        raise BadPrefix(f"{text!r} does not start with {CPE_PREFIX}")
    fields = _split_cpe(text)
    if len(fields) != 13:
        raise FieldCount(f"{text!r} has {len(fields)} fields, expected 13")
    part = fields[2]
    if part not in ("a", "o", "h"):
        raise BadPart(f"part {part!r} is not one of a, o, h")
    rest = fields[3:]
    return CpeName(part, rest[0].lower(), rest[1].lower(), *rest[2:])


# versions


def _segment_key(segment: str) -> tuple:
    if not segment:
        segment = "0"
    if segment[0].isdigit():
        digits = len(segment) - len(segment.lstrip("0123456789"))
        return (1, int(segment[:digits]), segment[digits:].encode())
    if segment < "0":
        return (0, segment.encode())
    return (2, segment.encode())


def _segments(version: str) -> list[str]:
    return re.split(r"[.-]", version)


def compare_versions(a: str, b: str) -> Ordering:
    """Compare dot/dash separated versions segment by segment.

    Numeric segments compare numerically, others bytewise; missing segments
    count as ``0``; ``1a`` sorts after ``1``.
    """
    left, right = _segments(a), _segments(b)
    width = max(len(left), len(right))
    left += ["0"] * (width - len(left))
    right += ["0"] * (width - len(right))
    for x, y in zip(left, right):
        kx, ky = _segment_key(x), _segment_key(y)
        if kx < ky:
            return Ordering.LESS
        if kx > ky:
            return Ordering.GREATER
    return Ordering.EQUAL


# feed and manifest


@dataclass(frozen=True)
class CpeMatch:
    cpe: CpeName
    version_start_including: str | None = None
    version_start_excluding: str | None = None
    version_end_including: str | None = None
    version_end_excluding: str | None = None

    @property
    def has_bounds(self) -> bool:
        return any(
            b is not None
            for b in (
                self.version_start_including,
                self.version_start_excluding,
                self.version_end_including,
                self.version_end_excluding,
            )
        )

    def in_range(self, version: str) -> bool:
        if self.version_start_including is not None:
            if compare_versions(version, self.version_start_including) is Ordering.LESS:
                return False
        if self.version_start_excluding is not None:
            if compare_versions(version, self.version_start_excluding) is not Ordering.GREATER:
                return False
        if self.version_end_including is not None:
            if compare_versions(version, self.version_end_including) is Ordering.GREATER:
                return False
        if self.version_end_excluding is not None:
            if compare_versions(version, self.version_end_excluding) is not Ordering.LESS:
                return False
        return True


@dataclass(frozen=True)
class CveEntry:
    id: str
    description: str
    base_score: int
    severity: Severity
    matches: tuple[CpeMatch, ...]


@dataclass(frozen=True)
class Dependency:
    vendor: str
    product: str
    version: str
    source_url: str = ""
    declared_in: str = ""

    def to_dict(self) -> dict:
        return {
            "vendor": self.vendor,
            "product": self.product,
            "version": self.version,
            "source_url": self.source_url,
            "declared_in": self.declared_in,
        }

    def sort_key(self) -> tuple:
        return (self.vendor, self.product, self.version, self.source_url, self.declared_in)


@dataclass(frozen=True)
class Manifest:
    dependencies: tuple[Dependency, ...]
    suppress: frozenset[str] = frozenset()


_BOUND_KEYS = {
    "version_start_including": ("version_start_including", "versionStartIncluding"),
    "version_start_excluding": ("version_start_excluding", "versionStartExcluding"),
    "version_end_including": ("version_end_including", "versionEndIncluding"),
    "version_end_excluding": ("version_end_excluding", "versionEndExcluding"),
}


def _score_tenths(entry: Mapping, path: str) -> int:
    if "base_score" in entry:
        score = entry["base_score"]
        if not isinstance(score, int) or isinstance(score, bool):
            raise FeedInvalid(f"{path}.base_score", "must be an integer number of tenths")
    elif "cvss" in entry:
        try:
            decimal = Decimal(str(entry["cvss"]))
        except InvalidOperation:
            raise FeedInvalid(f"{path}.cvss", "not a number") from None
        tenths = decimal * 10
        if tenths != tenths.to_integral_value():
            raise FeedInvalid(f"{path}.cvss", "more than one decimal place")
        score = int(tenths)
    else:
        raise FeedInvalid(path, "missing base_score or cvss")
    if not 0 <= score <= 100:
        raise FeedInvalid(path, f"score {score} outside 0..100 tenths")
    return score


def _parse_match(raw: Any, path: str) -> CpeMatch:
    if not isinstance(raw, Mapping):
        raise FeedInvalid(path, "match must be an object")
    text = raw.get("cpe", raw.get("criteria"))
    if not isinstance(text, str):
        raise FeedInvalid(f"{path}.cpe", "missing CPE string")
    try:
        cpe = parse_cpe(text)
    except ScanError as e:
        raise FeedInvalid(f"{path}.cpe", str(e)) from e
    bounds = {}
    for name, keys in _BOUND_KEYS.items():
        for key in keys:
            if key in raw and raw[key] is not None:
                if not isinstance(raw[key], str) or not raw[key]:
                    raise FeedInvalid(f"{path}.{key}", "bound must be a nonempty string")
                bounds[name] = raw[key]
    if "version_start_including" in bounds and "version_start_excluding" in bounds:
        raise FeedInvalid(path, "more than one start bound")
    if "version_end_including" in bounds and "version_end_excluding" in bounds:
        raise FeedInvalid(path, "more than one end bound")
    return CpeMatch(cpe, **bounds)


def parse_feed(data: Any, source: str = "feed") -> list[CveEntry]:
    """Validate feed JSON against the supported schema subset.

    Raises:
        FeedInvalid: With the path of the first offending field
    """
    if isinstance(data, Mapping) and "vulnerabilities" in data:
        data = data["vulnerabilities"]
    if not isinstance(data, list):
        raise FeedInvalid(source, "feed must be a list of entries")
    entries = []
    for i, raw in enumerate(data):
        path = f"{source}[{i}]"
        if not isinstance(raw, Mapping):
            raise FeedInvalid(path, "entry must be an object")
        cve_id = raw.get("id")
        if not isinstance(cve_id, str) or not CVE_ID.match(cve_id):
            raise FeedInvalid(f"{path}.id", f"{cve_id!r} is not a CVE id")
        score = _score_tenths(raw, path)
        expected = severity_for(score)
        if "severity" in raw:
            try:
                severity = Severity(str(raw["severity"]).capitalize())
            except ValueError:
                raise FeedInvalid(
                    f"{path}.severity", f"unknown severity {raw['severity']!r}"
                ) from None
            if severity is not expected:
                raise FeedInvalid(
                    f"{path}.severity", f"{severity.value} inconsistent with score {score}"
                )
        matches_raw = raw.get("matches", raw.get("cpe_match"))
        if not isinstance(matches_raw, list):
            raise FeedInvalid(f"{path}.matches", "missing list of CPE matches")
        matches = tuple(
            _parse_match(m, f"{path}.matches[{j}]") for j, m in enumerate(matches_raw)
        )
        entries.append(
            CveEntry(cve_id, str(raw.get("description", "")), score, expected, matches)
        )
    return entries


def load_feed(path: Path) -> list[CveEntry]:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise FeedInvalid(str(path), f"unreadable feed: {e}") from e
    return parse_feed(data, source=str(path))


def parse_manifest(data: Any, source: str = "manifest") -> Manifest:
    """Validate a dependency manifest: a list of dependencies or an object with suppressions."""
    suppress: list[str] = []
    if isinstance(data, Mapping):
        suppress = data.get("suppress", [])
        if not isinstance(suppress, list) or not all(isinstance(s, str) for s in suppress):
            raise ManifestInvalid(f"{source}.suppress", "must be a list of CVE ids")
        data = data.get("dependencies")
    if not isinstance(data, list):
        raise ManifestInvalid(source, "manifest must list dependencies")
    deps = []
    for i, raw in enumerate(data):
        path = f"{source}[{i}]"
        if not isinstance(raw, Mapping):
            raise ManifestInvalid(path, "dependency must be an object")
        values = {}
        for key in ("vendor", "product", "version"):
            value = raw.get(key)
            if not isinstance(value, str) or not value:
                raise ManifestInvalid(f"{path}.{key}", "must be a nonempty string")
            values[key] = value
        source_url = raw.get("source_url", "")
        if not isinstance(source_url, str):
            raise ManifestInvalid(f"{path}.source_url", "must be a string")
        deps.append(
            Dependency(
                values["vendor"].lower(),
                values["product"].lower(),
                values["version"],
                source_url,
                source,
            )
        )
    return Manifest(tuple(deps), frozenset(suppress))


def load_manifest(path: Path) -> Manifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise ManifestInvalid(str(path), f"unreadable manifest: {e}") from e
    return parse_manifest(data, source=path.name)


def load_allowlist(path: Path) -> list[str]:
    """URL prefixes from a JSON list or one prefix per line."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("["):
        try:
            prefixes = json.loads(text)
        except ValueError as e:
            raise ScanError(f"{path}: unreadable allowlist: {e}") from e
        return [str(p) for p in prefixes]
    return [line.strip() for line in text.splitlines() if line.strip() and not line.startswith("#")]


# matching


@dataclass(frozen=True)
class Finding:
    dependency: Dependency
    cve_id: str
    base_score: int
    reason: MatchReason

    def to_dict(self) -> dict:
        return {
            "dependency": self.dependency.to_dict(),
            "cve_id": self.cve_id,
            "base_score": self.base_score,
            "reason": self.reason.value,
        }

    def sort_key(self) -> tuple:
        return (self.cve_id, *self.dependency.sort_key())


def _name_matches(pattern: str, value: str) -> bool:
    return pattern == WILDCARD or pattern.lower() == value.lower()


def match_reason(dep: Dependency, match: CpeMatch) -> MatchReason | None:
    """Why a single CPE match hits a dependency, or None."""
    if not _name_matches(match.cpe.vendor, dep.vendor):
        return None
    if not _name_matches(match.cpe.product, dep.product):
        return None
    if match.has_bounds:
        return MatchReason.VERSION_MATCH if match.in_range(dep.version) else None
    if match.cpe.version == WILDCARD:
        return MatchReason.VERSION_MATCH
    if compare_versions(dep.version, match.cpe.version) is Ordering.EQUAL:
        return MatchReason.EXACT_MATCH
    return None


def match_dependency(dep: Dependency, feed: Iterable[CveEntry]) -> list[Finding]:
    """One finding per feed entry with a CPE match hitting the dependency."""
    findings = []
    for entry in feed:
        for match in entry.matches:
            reason = match_reason(dep, match)
            if reason is not None:
                findings.append(Finding(dep, entry.id, entry.base_score, reason))
                break
    return findings


def check_source_allowlist(
    dep: Dependency,
    allowlist: Sequence[str],
    mode: ScanMode = ScanMode.STRICT,
) -> bool:
    """True when the dependency's source is verified.

    An empty allowlist verifies nothing in strict mode and everything in
    permissive mode.
    """
    if not allowlist:
        return ScanMode(mode) is ScanMode.PERMISSIVE
    return any(dep.source_url.startswith(prefix) for prefix in allowlist)


@dataclass(frozen=True)
class ScanReport:
    findings: tuple[Finding, ...]
    unverified_sources: tuple[Dependency, ...]
    suppressed: tuple[Finding, ...]
    max_score: int
    threshold: int
    mode: ScanMode
    verdict: Verdict
    dependency_count: int = 0
    report_hash: str = field(default="", compare=False)

    @property
    def gating_unverified(self) -> int:
        """Unverified sources that count towards the verdict."""
        return len(self.unverified_sources) if self.mode is ScanMode.STRICT else 0

    def body(self) -> dict:
        return {
            "findings": [f.to_dict() for f in self.findings],
            "unverified_sources": [d.to_dict() for d in self.unverified_sources],
            "suppressed": [f.to_dict() for f in self.suppressed],
            "max_score": self.max_score,
            "threshold": self.threshold,
            "mode": self.mode.value,
            "verdict": self.verdict.value,
            "dependency_count": self.dependency_count,
        }

    def compute_hash(self) -> str:
        return canonical_hash(self.body())

    def to_dict(self) -> dict:
        return {**self.body(), "report_hash": self.report_hash}

    def encode(self) -> bytes:
        return canonical_encode(self.to_dict())

    def body_bytes(self) -> bytes:
        """Canonical bytes whose SHA-256 is report_hash."""
        return canonical_encode(self.body())


def scan_manifest(
    manifest: Sequence[Dependency] | Manifest,
    feed: Iterable[CveEntry],
    threshold: int = DEFAULT_THRESHOLD,
    allowlist: Sequence[str] = (),
    mode: ScanMode | str = ScanMode.STRICT,
    suppress: Iterable[str] = (),
) -> ScanReport:
    """Match every dependency against the feed and apply the gate.

    Args:
        manifest: Dependencies to scan (a Manifest also contributes suppressions)
        feed: Validated CVE entries
        threshold: Gate threshold in tenths of a CVSS point
        allowlist: URL prefixes of verified sources
        mode: strict gates on unverified sources, permissive does not
        suppress: CVE ids reported as suppressed and excluded from the verdict

    Returns:
        ScanReport with sorted findings and its report_hash; a dependency listed
        twice in the manifest is reported twice

    Raises:
        ValueError: If threshold is outside 0..100
    """
    if not 0 <= threshold <= 100:
        raise ValueError(f"threshold {threshold} outside 0..100 tenths")
    mode = ScanMode(mode)
    suppressed_ids = set(suppress)
    if isinstance(manifest, Manifest):
        suppressed_ids |= manifest.suppress
        deps = list(manifest.dependencies)
    else:
        deps = list(manifest)
    entries = list(feed)

    findings, suppressed, unverified = [], [], []
    for dep in deps:
        for finding in match_dependency(dep, entries):
            (suppressed if finding.cve_id in suppressed_ids else findings).append(finding)
        if not check_source_allowlist(dep, allowlist, mode):
            unverified.append(dep)

    max_score = max((f.base_score for f in findings), default=0)
    halt = max_score >= threshold or (mode is ScanMode.STRICT and bool(unverified))
    report = ScanReport(
        findings=tuple(sorted(findings, key=Finding.sort_key)),
        unverified_sources=tuple(sorted(unverified, key=Dependency.sort_key)),
        suppressed=tuple(sorted(suppressed, key=Finding.sort_key)),
        max_score=max_score,
        threshold=threshold,
        mode=mode,
        verdict=Verdict.HALT if halt else Verdict.PASS,
        dependency_count=len(deps),
    )
    report = replace(report, report_hash=report.compute_hash())
    logger.info(
        "scanned %d deps: %d findings, max %d, verdict %s",
        len(deps),
        len(report.findings),
        max_score,
        report.verdict.value,
    )
    return report


def render_report_text(report: ScanReport) -> str:
    """Human-readable rendering of a scan report."""
    console = Console(file=io.StringIO(), record=True, width=100, color_system=None)
    table = Table(title="Dependency findings")
    table.add_column("CVE")
    table.add_column("Dependency")
    table.add_column("Version")
    table.add_column("Score", justify="right")
    table.add_column("Severity")
    table.add_column("Reason")
    for f in report.findings:
        table.add_row(
            f.cve_id,
            f"{f.dependency.vendor}/{f.dependency.product}",
            f.dependency.version,
            f"{f.base_score // 10}.{f.base_score % 10}",
            severity_for(f.base_score).value,
            f.reason.value,
        )
    console.print(table)
    if report.suppressed:
        console.print(f"Suppressed: {', '.join(sorted({f.cve_id for f in report.suppressed}))}")
    for dep in report.unverified_sources:
        console.print(f"Unverified source: {dep.vendor}/{dep.product} from {dep.source_url or '-'}")
    console.print(
        f"Max score {report.max_score // 10}.{report.max_score % 10}, "
        f"threshold {report.threshold // 10}.{report.threshold % 10}, "
        f"mode {report.mode.value}: {report.verdict.value}"
    )
    console.print(f"Report hash {report.report_hash}")
    return console.export_text()
