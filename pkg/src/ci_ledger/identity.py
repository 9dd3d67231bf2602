"""Organization crypto materials, certificates, signatures and access control."""

import logging
import os
from collections.abc import Container, Iterable, Mapping
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ed25519

from ci_ledger.canonical import (
    EncodingError,
    b64decode,
    canonical_decode,
    canonical_encode,
    sha256,
    sha256_hex,
)

logger = logging.getLogger(__name__)

KEYGEN_DOMAIN = b"ci-ledger/keygen/v1\x00"


class IdentityError(Exception):
    """Error in identity or access-control handling."""

    pass


class EmptyOrgName(IdentityError):
    """Organization name is empty."""

    pass


class ZeroPeers(IdentityError):
    """An organization needs at least one peer."""

    pass


class InvalidSeed(IdentityError):
    """Key-generation seed is not 32 bytes."""

    pass


class UnknownKey(IdentityError):
    """Signing key does not belong to any known identity."""

    pass


class PermissionDenied(IdentityError):
    """Identity's role is not allowed to perform the action."""

    pass


class InvalidMaterials(IdentityError):
    """Persisted crypto materials are missing or fail verification."""

    pass


class Role(str, Enum):
    ADMIN = "Admin"
    PEER = "Peer"
    ORDERER = "Orderer"
    CLIENT = "Client"


class Action(str, Enum):
    CREATE_CHANNEL = "CreateChannel"
    JOIN_CHANNEL = "JoinChannel"
    INSTALL_CONTRACT = "InstallContract"
    INIT_CONTRACT = "InitContract"
    INVOKE = "Invoke"
    QUERY = "Query"
    ORDER = "Order"


class VerifyFailure(str, Enum):
    BAD_CERT = "BadCert"
    BAD_SIG = "BadSig"
    UNKNOWN_ORG = "UnknownOrg"
    UNKNOWN_CERT = "UnknownCert"


def _raw_public(key: ed25519.Ed25519PublicKey) -> bytes:
    return key.public_bytes(
        encoding=serialization.Encoding.Raw,
        format=serialization.PublicFormat.Raw,
    )


def _raw_private(key: ed25519.Ed25519PrivateKey) -> bytes:
    return key.private_bytes(
        encoding=serialization.Encoding.Raw,
        format=serialization.PrivateFormat.Raw,
        encryption_algorithm=serialization.NoEncryption(),
    )


def key_id_for(public_key: bytes) -> str:
    """Key identifier: lowercase hex SHA-256 of the raw public key."""
    return sha256_hex(public_key)


@dataclass(frozen=True)
class Identity:
    """A member of an organization."""

    org: str
    common_name: str
    role: Role
    public_key: bytes

    @property
    def key_id(self) -> str:
        return key_id_for(self.public_key)

    def to_dict(self) -> dict:
        return {
            "org": self.org,
            "common_name": self.common_name,
            "role": self.role.value,
            "public_key": self.public_key,
            "key_id": self.key_id,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Identity":
        identity = cls(
            org=data["org"],
            common_name=data["common_name"],
            role=Role(data["role"]),
            public_key=b64decode(data["public_key"]),
        )
        if data.get("key_id", identity.key_id) != identity.key_id:
            raise InvalidMaterials(f"key_id mismatch for {identity.common_name}")
        return identity


@dataclass(frozen=True)
class Certificate:
    """Identity record signed by its organization's root key."""

    identity: Identity
    issuer_org: str
    signature: bytes

    @property
    def key_id(self) -> str:
        return self.identity.key_id

    def to_dict(self) -> dict:
        return {
            "identity": self.identity.to_dict(),
            "issuer_org": self.issuer_org,
            "signature": self.signature,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Certificate":
        return cls(
            identity=Identity.from_dict(data["identity"]),
            issuer_org=data["issuer_org"],
            signature=b64decode(data["signature"]),
        )


@dataclass(frozen=True)
class SigningIdentity:
    """A certificate paired with its secret key."""

    certificate: Certificate
    secret_key: ed25519.Ed25519PrivateKey = field(repr=False, compare=False)

    @property
    def identity(self) -> Identity:
        return self.certificate.identity

    @property
    def key_id(self) -> str:
        return self.certificate.key_id

    @property
    def org(self) -> str:
        return self.certificate.identity.org

    @property
    def role(self) -> Role:
        return self.certificate.identity.role

    def sign(self, payload: bytes) -> bytes:
        return sign_payload(self.secret_key, payload)


@dataclass
class OrgMaterials:
    """Root of trust, issued certificates and secret keys of one organization."""

    org: str
    root_key: ed25519.Ed25519PrivateKey = field(repr=False)
    certificates: list[Certificate]
    secret_keys: dict[str, ed25519.Ed25519PrivateKey] = field(repr=False)
    ordering: bool = False

    @property
    def root_public_key(self) -> bytes:
        return _raw_public(self.root_key.public_key())

    @property
    def identities(self) -> list[Identity]:
        return [cert.identity for cert in self.certificates]

    def signer(self, key_id: str) -> SigningIdentity:
        for cert in self.certificates:
            if cert.key_id == key_id:
                return SigningIdentity(cert, self.secret_keys[key_id])
        raise UnknownKey(f"no identity with key_id {key_id[:12]}… in {self.org}")

    def signers(self, role: Role) -> list[SigningIdentity]:
        return [
            SigningIdentity(cert, self.secret_keys[cert.key_id])
            for cert in self.certificates
            if cert.identity.role == role
        ]

    def admin(self) -> SigningIdentity:
        return self.signers(Role.ADMIN)[0]

    def by_name(self, common_name: str) -> SigningIdentity:
        for cert in self.certificates:
            if cert.identity.common_name == common_name:
                return SigningIdentity(cert, self.secret_keys[cert.key_id])
        raise UnknownKey(f"no identity named {common_name} in {self.org}")


def _derive_key(seed: bytes, org: str, label: str) -> ed25519.Ed25519PrivateKey:
    material = sha256(KEYGEN_DOMAIN + seed + org.encode("utf-8") + b"\x00" + label.encode())
    return ed25519.Ed25519PrivateKey.from_private_bytes(material)


def _issue(root: ed25519.Ed25519PrivateKey, identity: Identity) -> Certificate:
    signature = root.sign(canonical_encode(identity.to_dict()))
    return Certificate(identity=identity, issuer_org=identity.org, signature=signature)


def generate_org_materials(
    org: str,
    n_peers: int,
    n_clients: int,
    seed: bytes,
    ordering: bool = False,
) -> OrgMaterials:
    """Generate the crypto materials of one organization.

    Keys are derived from (seed, org, index), so calling this twice with the
    same arguments yields bit-identical materials.

    Args:
        org: Organization name
        n_peers: Number of Peer identities (at least one)
        n_clients: Number of Client identities
        seed: 32-byte seed
        ordering: Also issue an Orderer identity

    Returns:
        OrgMaterials with one Admin, the peers, the clients and optionally an orderer

    Raises:
        EmptyOrgName: If org is empty
        ZeroPeers: If n_peers < 1
        InvalidSeed: If seed is not 32 bytes
    """
    if not org:
        raise EmptyOrgName("organization name must be nonempty")
    if n_peers < 1:
        raise ZeroPeers(f"{org} needs at least one peer, got {n_peers}")
    if len(seed) != 32:
        raise InvalidSeed(f"seed must be 32 bytes, got {len(seed)}")

    root = _derive_key(seed, org, "root")
    domain = org.lower()
    layout: list[tuple[Role, str]] = [(Role.ADMIN, f"Admin@{domain}")]
    layout += [(Role.PEER, f"peer{i}.{domain}") for i in range(n_peers)]
    layout += [(Role.CLIENT, f"User{i + 1}@{domain}") for i in range(n_clients)]
    if ordering:
        layout.append((Role.ORDERER, f"orderer.{domain}"))

    certificates: list[Certificate] = []
    secret_keys: dict[str, ed25519.Ed25519PrivateKey] = {}
    for index, (role, common_name) in enumerate(layout):
        key = _derive_key(seed, org, str(index))
        identity = Identity(
            org=org,
            common_name=common_name,
            role=role,
            public_key=_raw_public(key.public_key()),
        )
        certificates.append(_issue(root, identity))
        secret_keys[identity.key_id] = key

    logger.debug("generated %d identities for %s", len(certificates), org)
    return OrgMaterials(
        org=org,
        root_key=root,
        certificates=certificates,
        secret_keys=secret_keys,
        ordering=ordering,
    )


def generate_consortium(
    n_orgs: int = 2,
    n_peers: int = 2,
    n_clients: int = 1,
    seed: bytes = bytes(32),
) -> list[OrgMaterials]:
    """Generate Org1..OrgN; Org1 is the ordering org."""
    if n_orgs < 1:
        raise IdentityError("a consortium needs at least one organization")
    return [
        generate_org_materials(f"Org{i}", n_peers, n_clients, seed, ordering=(i == 1))
        for i in range(1, n_orgs + 1)
    ]


def sign_payload(
    secret_key: ed25519.Ed25519PrivateKey,
    payload: bytes,
    known_key_ids: Container[str] | None = None,
) -> bytes:
    """Ed25519-sign a payload.

    Args:
        secret_key: Signing key
        payload: Bytes to sign
        known_key_ids: When given, the key must belong to one of these identities

    Returns:
        64-byte signature

    Raises:
        UnknownKey: If the key is not among known_key_ids
    """
    if known_key_ids is not None:
        key_id = key_id_for(_raw_public(secret_key.public_key()))
        if key_id not in known_key_ids:
            raise UnknownKey(f"key {key_id[:12]}… is not a known identity")
    return secret_key.sign(payload)


@dataclass(frozen=True)
class VerifyResult:
    """Outcome of a signature check; falsy on failure."""

    ok: bool
    reason: VerifyFailure | None = None

    def __bool__(self) -> bool:
        return self.ok


def _ed25519_ok(public_key: bytes, signature: bytes, payload: bytes) -> bool:
    try:
        ed25519.Ed25519PublicKey.from_public_bytes(public_key).verify(signature, payload)
        return True
    except (InvalidSignature, ValueError):
        return False


def verify_certificate(certificate: Certificate, org_roots: Mapping[str, bytes]) -> VerifyResult:
    """Check a certificate against its issuer's root key."""
    root = org_roots.get(certificate.issuer_org)
    if root is None:
        return VerifyResult(False, VerifyFailure.UNKNOWN_ORG)
    if certificate.identity.org != certificate.issuer_org:
        return VerifyResult(False, VerifyFailure.BAD_CERT)
    signed = canonical_encode(certificate.identity.to_dict())
    if not _ed25519_ok(root, certificate.signature, signed):
        return VerifyResult(False, VerifyFailure.BAD_CERT)
    return VerifyResult(True)


def verify_signature(
    certificate: Certificate,
    org_roots: Mapping[str, bytes],
    payload: bytes,
    signature: bytes,
) -> VerifyResult:
    """Verify a certificate chain and a payload signature.

    The certificate check comes first, so a mutated certificate reports
    BadCert even when the payload signature itself is valid.
    """
    cert_result = verify_certificate(certificate, org_roots)
    if not cert_result:
        return cert_result
    if not _ed25519_ok(certificate.identity.public_key, signature, payload):
        return VerifyResult(False, VerifyFailure.BAD_SIG)
    return VerifyResult(True)


@dataclass(frozen=True)
class Membership:
    """Public view of the consortium: org roots and issued certificates."""

    roots: Mapping[str, bytes]
    certificates: Mapping[str, Certificate]
    ordering_org: str | None = None

    @classmethod
    def from_materials(cls, materials: Iterable[OrgMaterials]) -> "Membership":
        roots: dict[str, bytes] = {}
        certificates: dict[str, Certificate] = {}
        ordering_org = None
        for mat in materials:
            roots[mat.org] = mat.root_public_key
            for cert in mat.certificates:
                certificates[cert.key_id] = cert
            if mat.ordering and ordering_org is None:
                ordering_org = mat.org
        return cls(roots=roots, certificates=certificates, ordering_org=ordering_org)

    @property
    def orgs(self) -> list[str]:
        return sorted(self.roots)

    def certificate(self, key_id: str) -> Certificate | None:
        return self.certificates.get(key_id)

    def verify(self, key_id: str, payload: bytes, signature: bytes) -> VerifyResult:
        cert = self.certificates.get(key_id)
        if cert is None:
            return VerifyResult(False, VerifyFailure.UNKNOWN_CERT)
        return verify_signature(cert, self.roots, payload, signature)


@dataclass(frozen=True)
class AclPolicy:
    """Role-based permissions per action; unlisted pairs are denied."""

    rules: Mapping[tuple[Action, Role], bool] = field(default_factory=dict)


DEFAULT_GRANTS: dict[Role, tuple[Action, ...]] = {
    Role.ADMIN: tuple(Action),
    Role.PEER: (Action.INVOKE, Action.QUERY, Action.JOIN_CHANNEL),
    Role.ORDERER: (Action.ORDER,),
    Role.CLIENT: (Action.INVOKE, Action.QUERY),
}


def default_policy() -> AclPolicy:
    """Admin may do everything; peers invoke/query/join; orderers order; clients invoke/query."""
    return AclPolicy(
        rules={
            (action, role): True for role, actions in DEFAULT_GRANTS.items() for action in actions
        }
    )


@dataclass(frozen=True)
class Decision:
    """Permission lookup result; falsy when denied."""

    allowed: bool
    reason: str

    def __bool__(self) -> bool:
        return self.allowed


def check_permission(policy: AclPolicy, identity: Identity, action: Action) -> Decision:
    """Look up (action, role) in the policy, denying unlisted pairs."""
    rule = policy.rules.get((action, identity.role))
    if rule is None:
        return Decision(
            False, f"no rule for {identity.role.value} -> {action.value} (default deny)"
        )
    if rule:
        return Decision(True, f"{identity.role.value} may {action.value}")
    return Decision(False, f"{identity.role.value} is denied {action.value}")


def require_permission(policy: AclPolicy, identity: Identity, action: Action) -> None:
    """Raise PermissionDenied unless the identity may perform the action."""
    decision = check_permission(policy, identity, action)
    if not decision:
        logger.warning("denied %s for %s: %s", action.value, identity.common_name, decision.reason)
        raise PermissionDenied(f"{identity.common_name}: {decision.reason}")


def save_materials(materials: OrgMaterials, crypto_dir: Path) -> Path:
    """Write crypto/<org>/identities.json and a permission-restricted secrets.json."""
    org_dir = Path(crypto_dir) / materials.org
    org_dir.mkdir(parents=True, exist_ok=True)

    public = {
        "org": materials.org,
        "ordering": materials.ordering,
        "root_public_key": materials.root_public_key,
        "certificates": [cert.to_dict() for cert in materials.certificates],
    }
    (org_dir / "identities.json").write_bytes(canonical_encode(public))

    secrets_path = org_dir / "secrets.json"
    secrets = {
        "root": _raw_private(materials.root_key),
        "keys": {key_id: _raw_private(key) for key_id, key in materials.secret_keys.items()},
    }
    fd = os.open(secrets_path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "wb") as f:
        f.write(canonical_encode(secrets))
    os.chmod(secrets_path, 0o600)
    return org_dir


def load_materials(crypto_dir: Path, org: str) -> OrgMaterials:
    """Read one organization's materials back and re-verify every certificate."""
    org_dir = Path(crypto_dir) / org
    try:
        public = canonical_decode((org_dir / "identities.json").read_bytes())
        secrets = canonical_decode((org_dir / "secrets.json").read_bytes())
        root = ed25519.Ed25519PrivateKey.from_private_bytes(b64decode(secrets["root"]))
        certificates = [Certificate.from_dict(c) for c in public["certificates"]]
        secret_keys = {
            key_id: ed25519.Ed25519PrivateKey.from_private_bytes(b64decode(raw))
            for key_id, raw in secrets["keys"].items()
        }
        materials = OrgMaterials(
            org=str(public["org"]),
            root_key=root,
            certificates=certificates,
            secret_keys=secret_keys,
            ordering=bool(public.get("ordering", False)),
        )
        stored_root = b64decode(public["root_public_key"])
    except (OSError, KeyError, ValueError, TypeError, AttributeError, EncodingError) as e:
        raise InvalidMaterials(f"cannot load materials for {org}: {e}") from e

    roots = {materials.org: materials.root_public_key}
    if stored_root != materials.root_public_key:
        raise InvalidMaterials(f"root key of {org} does not match its secret")
    for cert in certificates:
        if not verify_certificate(cert, roots):
            raise InvalidMaterials(f"certificate {cert.identity.common_name} fails verification")
        if cert.key_id not in secret_keys:
            raise InvalidMaterials(f"missing secret key for {cert.identity.common_name}")
    return materials


def load_all_materials(crypto_dir: Path) -> list[OrgMaterials]:
    """Load every organization found under crypto_dir, ordered by name."""
    crypto_dir = Path(crypto_dir)
    if not crypto_dir.is_dir():
        return []
    orgs = sorted(p.name for p in crypto_dir.iterdir() if (p / "identities.json").is_file())
    return [load_materials(crypto_dir, org) for org in orgs]
