"""Demo project writer: a small source tree, dependency manifest, CVE feed and pipeline."""

import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from ci_ledger.canonical import canonical_encode
from ci_ledger.pipeline import ALLOWLIST_FILE, DEFAULT_PIPELINE

logger = logging.getLogger(__name__)

MAVEN = "https://repo1.maven.org/maven2/"
NPM = "https://registry.npmjs.org/"

# Version inside the log4j entry's vulnerable range, used by downgrade scenarios.
VULNERABLE_LOG4J = "2.14.1"
VULNERABLE_LOG4J_VERSIONS = ("2.0", "2.3", "2.12.1", "2.13.3", "2.14.0", "2.14.1")


class Variant(str, Enum):
    CLEAN = "clean"
    VULNERABLE = "vulnerable"


SOURCES: dict[str, str] = {
    "app.py": (
        '"""Inventory service entry point."""\n\n'
        "from lib.store import Store\n\n\n"
        "def main() -> None:\n"
        "    store = Store()\n"
        '    store.add("widget", 3)\n'
        "    print(store.report())\n\n\n"
        'if __name__ == "__main__":\n'
        "    main()\n"
    ),
    "lib/store.py": (
        "class Store:\n"
        "    def __init__(self) -> None:\n"
        "        self.items: dict[str, int] = {}\n\n"
        "    def add(self, name: str, count: int) -> None:\n"
        "        self.items[name] = self.items.get(name, 0) + count\n\n"
        "    def report(self) -> str:\n"
        '        return ", ".join(f"{k}={v}" for k, v in sorted(self.items.items()))\n'
    ),
    "README.txt": "Inventory service used to exercise the delivery pipeline.\n",
}

FEED: list[dict] = [
    {
        "id": "CVE-2021-44228",
        "description": "Remote code execution through JNDI lookups in log messages",
        "base_score": 100,
        "severity": "Critical",
        "matches": [
            {
                "cpe": "cpe:2.3:a:apache:log4j:*:*:*:*:*:*:*:*",
                "version_start_including": "2.0",
                "version_end_excluding": "2.15.0",
            }
        ],
    },
    {
        "id": "CVE-2022-42889",
        "description": "Insecure interpolation defaults allow code injection",
        "cvss": "9.8",
        "severity": "Critical",
        "matches": [
            {
                "criteria": "cpe:2.3:a:apache:commons_text:*:*:*:*:*:*:*:*",
                "versionStartIncluding": "1.5",
                "versionEndExcluding": "1.10.0",
            }
        ],
    },
    {
        "id": "CVE-2020-36518",
        "description": "Insecure deserialization of deeply nested objects",
        "base_score": 75,
        "severity": "High",
        "matches": [
            {
                "cpe": "cpe:2.3:a:fasterxml:jackson-databind:*:*:*:*:*:*:*:*",
                "version_end_excluding": "2.12.6.1",
            }
        ],
    },
    {
        "id": "CVE-2020-11022",
        "description": "Cross-site scripting when passing untrusted HTML to DOM methods",
        "base_score": 61,
        "severity": "Medium",
        "matches": [{"cpe": "cpe:2.3:a:jquery:jquery:3.4.1:*:*:*:*:*:*:*"}],
    },
    {
        "id": "CVE-2022-23221",
        "description": "SQL injection leading to code execution through the web console",
        "base_score": 98,
        "severity": "Critical",
        "matches": [
            {
                "cpe": "cpe:2.3:a:h2database:h2:*:*:*:*:*:*:*:*",
                "version_end_excluding": "2.1.210",
            }
        ],
    },
]


def manifest_for(variant: Variant) -> dict:
    log4j = VULNERABLE_LOG4J if variant is Variant.VULNERABLE else "2.17.1"
    return {
        "dependencies": [
            {
                "vendor": "apache",
                "product": "log4j",
                "version": log4j,
                "source_url": f"{MAVEN}org/apache/logging/log4j/log4j-core/{log4j}/",
            },
            {
                "vendor": "apache",
                "product": "commons_text",
                "version": "1.10.0",
                "source_url": f"{MAVEN}org/apache/commons/commons-text/1.10.0/",
            },
            {
                "vendor": "fasterxml",
                "product": "jackson-databind",
                "version": "2.13.4",
                "source_url": f"{MAVEN}com/fasterxml/jackson/core/jackson-databind/2.13.4/",
            },
            {
                "vendor": "jquery",
                "product": "jquery",
                "version": "3.6.0",
                "source_url": f"{NPM}jquery/-/jquery-3.6.0.tgz",
            },
        ],
        "suppress": [],
    }


@dataclass(frozen=True)
class DemoProject:
    root: Path
    variant: Variant

    @property
    def manifest(self) -> Path:
        return self.root / "deps.json"

    @property
    def feed(self) -> Path:
        return self.root / "feed.json"

    @property
    def pipeline(self) -> Path:
        return self.root / "pipeline.json"

    @property
    def allowlist(self) -> Path:
        return self.root / ALLOWLIST_FILE


def write_demo(root: Path, variant: Variant | str = Variant.CLEAN) -> DemoProject:
    """Write a demo project into root, overwriting the demo files only.

    Args:
        root: Project directory (created if missing)
        variant: clean passes the gate; vulnerable carries log4j 2.14.1

    Returns:
        DemoProject with the paths of the written files
    """
    variant = Variant(variant)
    root = Path(root)
    for rel, text in SOURCES.items():
        path = root / "src" / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    project = DemoProject(root, variant)
    project.manifest.write_bytes(canonical_encode(manifest_for(variant)))
    project.feed.write_bytes(canonical_encode(FEED))
    project.pipeline.write_bytes(canonical_encode(DEFAULT_PIPELINE))
    project.allowlist.write_text(f"{MAVEN}\n{NPM}\n", encoding="utf-8")
    logger.info("wrote %s demo project to %s", variant.value, root)
    return project
