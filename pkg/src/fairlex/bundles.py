"""Checksummed preservation bundles and multi-backend replication.

A bundle freezes one record version's distribution formats (facsimile
images, PDF, plain text, XML, ...) behind a line-oriented manifest of
SHA-256 digests. Bundles are replicated to at least two backends
(dual-deposit policy) with read-back verification, and restored from the
first backend whose copy still verifies.

On-disk form of a bundle:

    bundle/<id>/manifest.txt      one `<sha256>  <length>  <media-type>  <path>` line per payload
    bundle/<id>/metadata.json     entity, creation time, manifest digest, descriptive metadata
    bundle/<id>/data/<paths>      the payload files
"""

from __future__ import annotations

import abc
import datetime
import enum
import hashlib
import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .errors import FairlexError
from .metatags import DescriptiveMetadata
from .store import EntityPath, RecordVersion

__all__ = [
    "AllBackendsFailed",
    "AllCopiesCorrupt",
    "Backend",
    "BackendDescriptor",
    "BackendHealth",
    "BackendKind",
    "BackendReceipt",
    "BundleReadError",
    "DepositReceiptSet",
    "DuplicatePath",
    "EmptyBundle",
    "EntryState",
    "FailureNote",
    "LocalDirBackend",
    "ManifestEntry",
    "MockBackend",
    "NotFoundAnywhere",
    "PreservationBundle",
    "RestoreResult",
    "VerificationReport",
    "create_bundle",
    "read_bundle",
    "replicate",
    "restore",
    "serialize_manifest",
    "verify_bundle",
    "write_bundle",
]


class DuplicatePath(FairlexError):
    """Two payloads claim the same relative path."""


class EmptyBundle(FairlexError):
    """A bundle needs at least one payload."""


class AllBackendsFailed(FairlexError):
    """No backend accepted and verified the deposit."""


class NotFoundAnywhere(FairlexError):
    """No backend in the plan holds the bundle."""


class AllCopiesCorrupt(FairlexError):
    """Every stored copy failed verification."""


class BundleReadError(FairlexError):
    """A stored bundle could not be read back into memory."""


class BackendKind(enum.Enum):
    LOCAL_DIR = "local_dir"
    INSTITUTIONAL_MOCK = "institutional_mock"
    REPOSITORY_MOCK = "repository_mock"


class BackendHealth(enum.Enum):
    HEALTHY = "healthy"
    DEGRADED = "degraded"
    DOWN = "down"


class EntryState(enum.Enum):
    OK = "ok"
    DIGEST_MISMATCH = "digest_mismatch"
    MISSING = "missing"


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    media_type: str
    length: int
    digest: str


@dataclass(frozen=True)
class PreservationBundle:
    """Manifest-of-record for one version's preservation payloads.

    Payload bytes travel separately; the bundle is the reference they are
    checked against.
    """

    entity: EntityPath
    version_number: int
    manifest: tuple[ManifestEntry, ...]
    metadata_snapshot: DescriptiveMetadata
    created_at: datetime.datetime
    manifest_digest: str

    @property
    def bundle_id(self) -> str:
        e = self.entity
        return f"{e.database}.{e.collection}.{e.record}.v{self.version_number}"


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    kind: BackendKind
    base_location: str
    health: BackendHealth


@dataclass(frozen=True)
class BackendReceipt:
    backend: str
    location: str
    manifest_digest: str
    stored_at: datetime.datetime


@dataclass(frozen=True)
class FailureNote:
    backend: str
    reason: str


@dataclass(frozen=True)
class DepositReceiptSet:
    bundle_id: str
    receipts: tuple[BackendReceipt, ...]
    failures: tuple[FailureNote, ...]

    @property
    def complete(self) -> bool:
        return not self.failures


@dataclass(frozen=True)
class VerificationReport:
    bundle_id: str
    entries: tuple[tuple[str, EntryState], ...]
    manifest_digest_ok: bool

    @property
    def ok(self) -> bool:
        return self.manifest_digest_ok and all(
            state is EntryState.OK for _, state in self.entries
        )

    def state_of(self, path: str) -> EntryState:
        for entry_path, state in self.entries:
            if entry_path == path:
                return state
        raise KeyError(path)


@dataclass(frozen=True)
class RestoreResult:
    bundle: PreservationBundle
    payloads: dict[str, bytes]
    source: str


# -- manifest -----------------------------------------------------------------


def _check_rel_path(path: str) -> None:
    if not path or path.startswith("/"):
        raise ValueError(f"payload path must be relative and non-empty: {path!r}")
    if "\\" in path or "\n" in path or "\r" in path:
        raise ValueError(f"payload path contains illegal characters: {path!r}")
    if "  " in path:
        raise ValueError(f"payload path may not contain double spaces: {path!r}")
    for segment in path.split("/"):
        if segment in ("", ".", ".."):
            raise ValueError(f"payload path may not contain {segment!r} segments: {path!r}")


def serialize_manifest(manifest: Sequence[ManifestEntry]) -> str:
    """Canonical text form: one line per entry, sorted by path."""
    lines = [
        f"{e.digest}  {e.length}  {e.media_type}  {e.path}"
        for e in sorted(manifest, key=lambda e: e.path)
    ]
    return "".join(line + "\n" for line in lines)


def parse_manifest(text: str) -> tuple[ManifestEntry, ...]:
    entries = []
    for line in text.splitlines():
        if not line.strip():
            continue
        parts = line.split("  ", 3)
        if len(parts) != 4:
            raise BundleReadError(f"bad manifest line: {line!r}")
        digest, length, media_type, path = parts
        try:
            entries.append(ManifestEntry(path, media_type, int(length), digest))
        except ValueError:
            raise BundleReadError(f"bad manifest length field: {line!r}") from None
    return tuple(entries)


def manifest_digest(manifest: Sequence[ManifestEntry]) -> str:
    return hashlib.sha256(serialize_manifest(manifest).encode("utf-8")).hexdigest()


def create_bundle(
    version: RecordVersion,
    payloads: Sequence[tuple[str, str, bytes]],
    metadata: DescriptiveMetadata,
) -> tuple[PreservationBundle, dict[str, bytes]]:
    """Digest the payloads into a bundle. Returns (bundle, payload map).

    Deterministic apart from created_at: payload order does not matter.
    """
    if not payloads:
        raise EmptyBundle("a bundle needs at least one payload")
    data: dict[str, bytes] = {}
    entries = []
    for path, media_type, content in payloads:
        _check_rel_path(path)
        if "  " in media_type or "\n" in media_type:
            raise ValueError(f"bad media type: {media_type!r}")
        if path in data:
            raise DuplicatePath(path)
        data[path] = content
        entries.append(
            ManifestEntry(path, media_type, len(content), hashlib.sha256(content).hexdigest())
        )
    entries.sort(key=lambda e: e.path)
    manifest = tuple(entries)
    bundle = PreservationBundle(
        entity=version.path,
        version_number=version.version_number,
        manifest=manifest,
        metadata_snapshot=metadata,
        created_at=datetime.datetime.now(datetime.timezone.utc),
        manifest_digest=manifest_digest(manifest),
    )
    return bundle, data


def verify_bundle(
    bundle: PreservationBundle,
    payload_source: Mapping[str, bytes] | Callable[[str], bytes | None],
) -> VerificationReport:
    """Check every manifest entry against the payload source.

    Failures are report content, never exceptions.
    """
    getter = payload_source.get if isinstance(payload_source, Mapping) else payload_source
    states = []
    for entry in bundle.manifest:
        content = getter(entry.path)
        if content is None:
            states.append((entry.path, EntryState.MISSING))
        elif (
            len(content) != entry.length
            or hashlib.sha256(content).hexdigest() != entry.digest
        ):
            states.append((entry.path, EntryState.DIGEST_MISMATCH))
        else:
            states.append((entry.path, EntryState.OK))
    return VerificationReport(
        bundle_id=bundle.bundle_id,
        entries=tuple(states),
        manifest_digest_ok=manifest_digest(bundle.manifest) == bundle.manifest_digest,
    )


# -- on-disk form ---------------------------------------------------------------


def _bundle_metadata_json(bundle: PreservationBundle) -> str:
    doc = {
        "bundle_id": bundle.bundle_id,
        "entity": bundle.entity.to_json_dict(),
        "version_number": bundle.version_number,
        "created_at": bundle.created_at.isoformat(),
        "manifest_digest": bundle.manifest_digest,
        "metadata": bundle.metadata_snapshot.to_json_dict(),
    }
    return json.dumps(doc, ensure_ascii=False, sort_keys=True, indent=2)


def write_bundle(
    bundle: PreservationBundle, payloads: Mapping[str, bytes], root: str | Path
) -> Path:
    """Materialize bundle/<id>/{manifest.txt,metadata.json,data/...} under root."""
    base = Path(root) / "bundle" / bundle.bundle_id
    (base / "data").mkdir(parents=True, exist_ok=True)
    (base / "manifest.txt").write_text(serialize_manifest(bundle.manifest), encoding="utf-8")
    (base / "metadata.json").write_text(_bundle_metadata_json(bundle), encoding="utf-8")
    for entry in bundle.manifest:
        target = base / "data" / entry.path
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(payloads[entry.path])
    return base


def read_bundle(root: str | Path, bundle_id: str) -> tuple[PreservationBundle, dict[str, bytes]]:
    """Inverse of write_bundle. Raises LookupError when absent,
    BundleReadError when present but unreadable."""
    base = Path(root) / "bundle" / bundle_id
    if not (base / "metadata.json").is_file():
        raise LookupError(bundle_id)
    try:
        doc = json.loads((base / "metadata.json").read_text(encoding="utf-8"))
        manifest = parse_manifest((base / "manifest.txt").read_text(encoding="utf-8"))
        bundle = PreservationBundle(
            entity=EntityPath.from_json_dict(doc["entity"]),
            version_number=doc["version_number"],
            manifest=manifest,
            metadata_snapshot=DescriptiveMetadata.from_json_dict(doc["metadata"]),
            created_at=datetime.datetime.fromisoformat(doc["created_at"]),
            manifest_digest=doc["manifest_digest"],
        )
    except (OSError, KeyError, ValueError, FairlexError) as exc:
        raise BundleReadError(f"{bundle_id}: {exc}") from None
    payloads = {}
    for entry in manifest:
        try:
            payloads[entry.path] = (base / "data" / entry.path).read_bytes()
        except OSError:
            continue  # verification will report it as missing
    return bundle, payloads


# -- backends -------------------------------------------------------------------


class Backend(abc.ABC):
    """A replication target. put/get/head plus an operator-set health state."""

    name: str
    kind: BackendKind

    @abc.abstractmethod
    def put(self, bundle: PreservationBundle, payloads: Mapping[str, bytes]) -> str:
        """Store the bundle; returns the stored-at location."""

    @abc.abstractmethod
    def get(self, bundle_id: str) -> tuple[PreservationBundle, dict[str, bytes]]:
        """Fetch a stored copy. Raises LookupError when absent."""

    @abc.abstractmethod
    def head(self, bundle_id: str) -> str | None:
        """The stored copy's claimed manifest digest, or None when absent."""

    @abc.abstractmethod
    def health(self) -> BackendHealth:
        ...

    @abc.abstractmethod
    def describe(self) -> BackendDescriptor:
        ...


class LocalDirBackend(Backend):
    """Backend writing real files under a base directory."""

    kind = BackendKind.LOCAL_DIR

    def __init__(self, name: str, base: str | Path):
        self.name = name
        self.base = Path(base)
        self._health = BackendHealth.HEALTHY

    def set_health(self, health: BackendHealth) -> None:
        self._health = health

    def put(self, bundle: PreservationBundle, payloads: Mapping[str, bytes]) -> str:
        return str(write_bundle(bundle, payloads, self.base))

    def get(self, bundle_id: str) -> tuple[PreservationBundle, dict[str, bytes]]:
        return read_bundle(self.base, bundle_id)

    def head(self, bundle_id: str) -> str | None:
        meta = self.base / "bundle" / bundle_id / "metadata.json"
        if not meta.is_file():
            return None
        try:
            return json.loads(meta.read_text(encoding="utf-8"))["manifest_digest"]
        except (ValueError, KeyError):
            raise BundleReadError(f"{bundle_id}: unreadable metadata") from None

    def health(self) -> BackendHealth:
        return self._health

    def describe(self) -> BackendDescriptor:
        return BackendDescriptor(self.name, self.kind, str(self.base), self._health)


class MockBackend(Backend):
    """In-memory backend with fault injection for tests.

    - fail_puts: next N put() calls raise
    - corrupt_on_put: silently flip one byte of each stored payload
    - corrupt()/drop(): damage or remove a stored copy after the fact
    """

    def __init__(self, name: str, kind: BackendKind = BackendKind.REPOSITORY_MOCK):
        self.name = name
        self.kind = kind
        self._health = BackendHealth.HEALTHY
        self.fail_puts = 0
        self.corrupt_on_put = False
        self.puts = 0
        self._lock = threading.Lock()
        self._copies: dict[str, tuple[PreservationBundle, dict[str, bytes]]] = {}

    def set_health(self, health: BackendHealth) -> None:
        self._health = health

    @staticmethod
    def _flip_byte(content: bytes, position: int = -1) -> bytes:
        if not content:
            return b"\x00"
        position %= len(content)
        return content[:position] + bytes([content[position] ^ 0xFF]) + content[position + 1:]

    def put(self, bundle: PreservationBundle, payloads: Mapping[str, bytes]) -> str:
        with self._lock:
            self.puts += 1
            if self.fail_puts > 0:
                self.fail_puts -= 1
                raise BundleReadError(f"{self.name}: simulated write failure")
            stored = dict(payloads)
            if self.corrupt_on_put and stored:
                first = sorted(stored)[0]
                stored[first] = self._flip_byte(stored[first])
            self._copies[bundle.bundle_id] = (bundle, stored)
        return f"mock://{self.name}/{bundle.bundle_id}"

    def get(self, bundle_id: str) -> tuple[PreservationBundle, dict[str, bytes]]:
        with self._lock:
            if bundle_id not in self._copies:
                raise LookupError(bundle_id)
            bundle, payloads = self._copies[bundle_id]
            return bundle, dict(payloads)

    def head(self, bundle_id: str) -> str | None:
        with self._lock:
            copy = self._copies.get(bundle_id)
            return copy[0].manifest_digest if copy else None

    def corrupt(self, bundle_id: str, path: str, position: int = -1) -> None:
        with self._lock:
            bundle, payloads = self._copies[bundle_id]
            payloads[path] = self._flip_byte(payloads[path], position)

    def drop(self, bundle_id: str) -> None:
        with self._lock:
            self._copies.pop(bundle_id, None)

    def health(self) -> BackendHealth:
        return self._health

    def describe(self) -> BackendDescriptor:
        return BackendDescriptor(self.name, self.kind, f"mock://{self.name}", self._health)


# -- replication ------------------------------------------------------------------


def _check_plan(plan: Sequence[Backend]) -> None:
    if len(plan) < 2:
        raise ValueError("replication plan needs at least two backends (dual-deposit)")
    names = [backend.name for backend in plan]
    if len(set(names)) != len(names):
        raise ValueError(f"backend names must be unique within a plan: {names}")


def _deposit_one(
    backend: Backend, bundle: PreservationBundle, payloads: Mapping[str, bytes]
) -> BackendReceipt:
    location = backend.put(bundle, payloads)
    stored_bundle, stored_payloads = backend.get(bundle.bundle_id)
    report = verify_bundle(bundle, stored_payloads)
    if not report.ok:
        bad = [path for path, state in report.entries if state is not EntryState.OK]
        raise BundleReadError(f"read-back verification failed for {bad}")
    if stored_bundle.manifest_digest != bundle.manifest_digest:
        raise BundleReadError("read-back manifest digest differs")
    return BackendReceipt(
        backend=backend.name,
        location=location,
        manifest_digest=stored_bundle.manifest_digest,
        stored_at=datetime.datetime.now(datetime.timezone.utc),
    )


def replicate(
    bundle: PreservationBundle,
    payloads: Mapping[str, bytes],
    plan: Sequence[Backend],
) -> DepositReceiptSet:
    """Deposit to every non-down backend concurrently, then verify each copy
    by reading it back. Partial success is reported per backend."""
    _check_plan(plan)
    receipts: list[BackendReceipt] = []
    failures: list[FailureNote] = []
    live = [b for b in plan if b.health() is not BackendHealth.DOWN]
    for backend in plan:
        if backend.health() is BackendHealth.DOWN:
            failures.append(FailureNote(backend.name, "backend is down"))
    if live:
        with ThreadPoolExecutor(max_workers=len(live)) as pool:
            futures = [pool.submit(_deposit_one, b, bundle, payloads) for b in live]
            for backend, future in zip(live, futures):
                try:
                    receipts.append(future.result())
                except Exception as exc:
                    failures.append(FailureNote(backend.name, str(exc)))
    if not receipts:
        raise AllBackendsFailed(
            f"{bundle.bundle_id}: " + "; ".join(f"{f.backend}: {f.reason}" for f in failures)
        )
    return DepositReceiptSet(
        bundle_id=bundle.bundle_id, receipts=tuple(receipts), failures=tuple(failures)
    )


def restore(
    bundle_id: str, plan: Sequence[Backend], expected_digest: str | None = None
) -> RestoreResult:
    """Fetch from the first backend (plan order) whose copy verifies.

    Falls through silently on missing or corrupt copies; raises
    NotFoundAnywhere when no reachable backend holds the bundle and
    AllCopiesCorrupt when copies exist but none verifies.
    """
    found_any = False
    for backend in plan:
        if backend.health() is BackendHealth.DOWN:
            continue
        try:
            bundle, payloads = backend.get(bundle_id)
        except LookupError:
            continue
        except FairlexError:
            found_any = True  # something is there, just unreadable
            continue
        found_any = True
        if expected_digest is not None and bundle.manifest_digest != expected_digest:
            continue
        if verify_bundle(bundle, payloads).ok:
            return RestoreResult(bundle=bundle, payloads=payloads, source=backend.name)
    if not found_any:
        raise NotFoundAnywhere(bundle_id)
    raise AllCopiesCorrupt(bundle_id)
