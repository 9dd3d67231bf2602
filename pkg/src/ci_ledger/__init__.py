"""ci-ledger: CI/CD pipeline whose provenance, scan attestations and deployments live on a
permissioned ledger."""

__version__ = "0.1.0"

from ci_ledger.canonical import canonical_encode, canonical_hash
from ci_ledger.identity import Membership, generate_consortium
from ci_ledger.ledger import Block, Chain, LedgerStore, validate_chain
from ci_ledger.network import Network
from ci_ledger.ordering import evaluate_policy, parse_policy
from ci_ledger.pipeline import PipelineDef, load_pipeline_def, run_pipeline
from ci_ledger.settings import PipelineConfig, load_config
from ci_ledger.vulnscan import ScanReport, scan_manifest

__all__ = [
    "__version__",
    "canonical_encode",
    "canonical_hash",
    "Membership",
    "generate_consortium",
    "Block",
    "Chain",
    "LedgerStore",
    "validate_chain",
    "Network",
    "evaluate_policy",
    "parse_policy",
    "PipelineDef",
    "load_pipeline_def",
    "run_pipeline",
    "PipelineConfig",
    "load_config",
    "ScanReport",
    "scan_manifest",
]
