"""Hierarchical store of immutable record versions.

Records live at database/collection/record paths. Publishing creates a new
immutable version linked to its predecessor; nothing is ever deleted. Typo
amendments are the one sanctioned in-place edit and are logged for
provenance.

On-disk layout, one directory per record:

    <root>/<database>/<collection>/<record>/
        metadata.json        record-level description (written at creation)
        chain.json           current pointer plus chain summary
        amendments.jsonl     one log entry per typo amendment
        v<N>/content         payload bytes as published
        v<N>/version.json    full version record

All JSON is UTF-8 with sorted keys.
"""

from __future__ import annotations

import dataclasses
import datetime
import enum
import hashlib
import json
import os
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

from .errors import FairlexError
from .metatags import Creator, DescriptiveMetadata
from .pids import Doi, PidScheme, parse_doi, validate

__all__ = [
    "AmendmentLogEntry",
    "ChangeKind",
    "Creator",
    "DoiAlreadyBound",
    "DoiDecision",
    "EntityPath",
    "IllegalDecision",
    "NoChange",
    "PathExists",
    "RecordStore",
    "RecordVersion",
    "StaleWrite",
    "Status",
    "UnknownPath",
    "UnknownVersion",
]

_SLUG_RE = re.compile(r"^[a-z0-9](?:[a-z0-9.-]*[a-z0-9])?$")


class PathExists(FairlexError):
    """A record already lives at this path."""


class DoiAlreadyBound(FairlexError):
    """The DOI is already bound to a stored version."""


class UnknownPath(FairlexError):
    """No record at this path."""


class UnknownVersion(FairlexError):
    """The record has no such version."""


class IllegalDecision(FairlexError):
    """Substantial changes must register a new DOI."""


class StaleWrite(FairlexError):
    """Another publish won; re-read the chain and retry."""


class NoChange(FairlexError):
    """Amendment content is identical to what is stored."""


class ChangeKind(enum.Enum):
    INITIAL = "initial"
    CONTENT_UPDATE = "content_update"
    SUBSTANTIAL = "substantial"


class Status(enum.Enum):
    CURRENT = "current"
    SUPERSEDED = "superseded"


class DoiDecision(enum.Enum):
    KEEP_EXISTING = "keep_existing"
    REGISTER_NEW = "register_new"


def _check_slug(value: str, segment: str) -> None:
    if not _SLUG_RE.match(value):
        raise ValueError(
            f"{segment} must be a slug (lowercase alphanumerics, hyphens, dots,"
            f" starting and ending alphanumeric): {value!r}"
        )


@dataclass(frozen=True)
class EntityPath:
    """database/collection/record address of one record."""

    database: str
    collection: str
    record: str

    def __post_init__(self) -> None:
        _check_slug(self.database, "database")
        _check_slug(self.collection, "collection")
        _check_slug(self.record, "record")

    def __str__(self) -> str:
        return f"{self.database}/{self.collection}/{self.record}"

    @classmethod
    def parse(cls, text: str) -> "EntityPath":
        parts = text.strip("/").split("/")
        if len(parts) != 3:
            raise ValueError(f"entity path needs database/collection/record: {text!r}")
        return cls(*parts)

    def to_json_dict(self) -> dict:
        return {"database": self.database, "collection": self.collection, "record": self.record}

    @classmethod
    def from_json_dict(cls, data: dict) -> "EntityPath":
        return cls(data["database"], data["collection"], data["record"])


@dataclass(frozen=True)
class RecordVersion:
    """One immutable published state of a record."""

    path: EntityPath
    version_number: int
    content_hash: str
    published_at: datetime.datetime
    authors: tuple[Creator, ...]
    doi: Doi
    predecessor: tuple[int, Doi] | None
    change_kind: ChangeKind
    status: Status

    def to_json_dict(self) -> dict:
        return {
            "path": self.path.to_json_dict(),
            "version_number": self.version_number,
            "content_hash": self.content_hash,
            "published_at": self.published_at.isoformat(),
            "authors": [
                {"name": a.name, "orcid": a.orcid.normalized if a.orcid else None}
                for a in self.authors
            ],
            "doi": str(self.doi),
            "predecessor": (
                None
                if self.predecessor is None
                else {"version_number": self.predecessor[0], "doi": str(self.predecessor[1])}
            ),
            "change_kind": self.change_kind.value,
            "status": self.status.value,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "RecordVersion":
        predecessor = None
        if data["predecessor"] is not None:
            predecessor = (
                data["predecessor"]["version_number"],
                parse_doi(data["predecessor"]["doi"]),
            )
        return cls(
            path=EntityPath.from_json_dict(data["path"]),
            version_number=data["version_number"],
            content_hash=data["content_hash"],
            published_at=datetime.datetime.fromisoformat(data["published_at"]),
            authors=tuple(
                Creator(
                    a["name"],
                    validate(PidScheme.ORCID, a["orcid"]) if a.get("orcid") else None,
                )
                for a in data["authors"]
            ),
            doi=parse_doi(data["doi"]),
            predecessor=predecessor,
            change_kind=ChangeKind(data["change_kind"]),
            status=Status(data["status"]),
        )


@dataclass(frozen=True)
class AmendmentLogEntry:
    path: EntityPath
    version_number: int
    timestamp: datetime.datetime
    old_hash: str
    new_hash: str
    note: str

    def to_json_dict(self) -> dict:
        return {
            "path": self.path.to_json_dict(),
            "version_number": self.version_number,
            "timestamp": self.timestamp.isoformat(),
            "old_hash": self.old_hash,
            "new_hash": self.new_hash,
            "note": self.note,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "AmendmentLogEntry":
        return cls(
            path=EntityPath.from_json_dict(data["path"]),
            version_number=data["version_number"],
            timestamp=datetime.datetime.fromisoformat(data["timestamp"]),
            old_hash=data["old_hash"],
            new_hash=data["new_hash"],
            note=data["note"],
        )


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, indent=2)


def _write_atomic(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def content_digest(content: bytes) -> str:
    return hashlib.sha256(content).hexdigest()


def _utcnow() -> datetime.datetime:
    return datetime.datetime.now(datetime.timezone.utc)


class RecordStore:
    """Record store rooted at a directory. Thread-safe for concurrent use;
    writes to one record are serialized, reads never block."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._registry_lock = threading.Lock()
        self._record_locks: dict[str, threading.Lock] = {}
        self._doi_owner: dict[str, EntityPath] = {}
        for path in self.records():
            for summary in self._read_chain(path)["versions"]:
                self._doi_owner[summary["doi"]] = path

    # -- path helpers -------------------------------------------------------

    def record_dir(self, path: EntityPath) -> Path:
        return self.root / path.database / path.collection / path.record

    def _version_dir(self, path: EntityPath, n: int) -> Path:
        return self.record_dir(path) / f"v{n}"

    def _chain_file(self, path: EntityPath) -> Path:
        return self.record_dir(path) / "chain.json"

    def exists(self, path: EntityPath) -> bool:
        return self._chain_file(path).is_file()

    def records(self) -> Iterator[EntityPath]:
        """All record paths in the store, sorted."""
        if not self.root.is_dir():
            return
        for chain in sorted(self.root.glob("*/*/*/chain.json")):
            record = chain.parent
            yield EntityPath(record.parent.parent.name, record.parent.name, record.name)

    def _lock_for(self, path: EntityPath) -> threading.Lock:
        with self._registry_lock:
            return self._record_locks.setdefault(str(path), threading.Lock())

    def _read_chain(self, path: EntityPath) -> dict:
        try:
            return json.loads(self._chain_file(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UnknownPath(str(path)) from None

    def _write_chain(self, path: EntityPath, chain: dict) -> None:
        _write_atomic(self._chain_file(path), _dumps(chain).encode("utf-8"))

    def _read_version(self, path: EntityPath, n: int) -> RecordVersion:
        version_file = self._version_dir(path, n) / "version.json"
        try:
            data = json.loads(version_file.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UnknownVersion(f"{path} has no version {n}") from None
        return RecordVersion.from_json_dict(data)

    def _write_version(self, version: RecordVersion) -> None:
        vdir = self._version_dir(version.path, version.version_number)
        vdir.mkdir(parents=True, exist_ok=True)
        _write_atomic(vdir / "version.json", _dumps(version.to_json_dict()).encode("utf-8"))

    def _bind_doi(self, doi: Doi, path: EntityPath) -> None:
        with self._registry_lock:
            self._doi_owner[str(doi)] = path

    def _doi_bound(self, doi: Doi) -> bool:
        with self._registry_lock:
            return str(doi) in self._doi_owner

    # -- operations ---------------------------------------------------------

    def create_record(
        self,
        path: EntityPath,
        content: bytes,
        metadata: DescriptiveMetadata,
        doi: Doi,
    ) -> RecordVersion:
        """Publish version 1 of a new record."""
        with self._lock_for(path):
            if self.exists(path):
                raise PathExists(str(path))
            if self._doi_bound(doi):
                raise DoiAlreadyBound(str(doi))
            version = RecordVersion(
                path=path,
                version_number=1,
                content_hash=content_digest(content),
                published_at=_utcnow(),
                authors=tuple(metadata.creators),
                doi=doi,
                predecessor=None,
                change_kind=ChangeKind.INITIAL,
                status=Status.CURRENT,
            )
            vdir = self._version_dir(path, 1)
            vdir.mkdir(parents=True, exist_ok=True)
            _write_atomic(vdir / "content", content)
            self._write_version(version)
            stored_meta = dataclasses.replace(metadata, identifier=doi)
            _write_atomic(
                self.record_dir(path) / "metadata.json",
                _dumps(stored_meta.to_json_dict()).encode("utf-8"),
            )
            self._write_chain(path, self._chain_summary([version]))
            self._bind_doi(doi, path)
            return version

    def publish_version(
        self,
        path: EntityPath,
        content: bytes,
        change_kind: ChangeKind,
        decision: DoiDecision,
        new_doi: Doi | None = None,
        authors: Sequence[Creator] | None = None,
        expected_current: int | None = None,
    ) -> RecordVersion:
        """Publish a new version; the previous one is archived, never removed.

        With expected_current set, the publish fails with StaleWrite if the
        chain moved on in the meantime (optimistic concurrency).
        """
        if change_kind not in (ChangeKind.CONTENT_UPDATE, ChangeKind.SUBSTANTIAL):
            raise ValueError("published changes are content_update or substantial")
        if change_kind is ChangeKind.SUBSTANTIAL and decision is DoiDecision.KEEP_EXISTING:
            raise IllegalDecision("substantial changes must register a new DOI")
        with self._lock_for(path):
            if not self.exists(path):
                raise UnknownPath(str(path))
            chain = self._read_chain(path)
            current_number = chain["current"]
            if expected_current is not None and expected_current != current_number:
                raise StaleWrite(
                    f"expected current v{expected_current}, found v{current_number}"
                )
            predecessor = self._read_version(path, current_number)
            if decision is DoiDecision.REGISTER_NEW:
                if new_doi is None:
                    raise ValueError("register_new requires new_doi")
                if self._doi_bound(new_doi):
                    raise DoiAlreadyBound(str(new_doi))
                doi = new_doi
            else:
                doi = predecessor.doi
            now = _utcnow()
            if now < predecessor.published_at:
                now = predecessor.published_at
            version = RecordVersion(
                path=path,
                version_number=current_number + 1,
                content_hash=content_digest(content),
                published_at=now,
                authors=tuple(authors) if authors is not None else predecessor.authors,
                doi=doi,
                predecessor=(predecessor.version_number, predecessor.doi),
                change_kind=change_kind,
                status=Status.CURRENT,
            )
            vdir = self._version_dir(path, version.version_number)
            vdir.mkdir(parents=True, exist_ok=True)
            _write_atomic(vdir / "content", content)
            self._write_version(version)
            self._write_version(dataclasses.replace(predecessor, status=Status.SUPERSEDED))
            versions = [
                self._read_version(path, n) for n in range(1, version.version_number + 1)
            ]
            self._write_chain(path, self._chain_summary(versions))
            self._bind_doi(doi, path)
            return version

    def amend_typo(
        self, path: EntityPath, version_number: int, new_content: bytes, note: str
    ) -> AmendmentLogEntry:
        """Replace one version's content in place; DOI and numbering stay."""
        with self._lock_for(path):
            if not self.exists(path):
                raise UnknownPath(str(path))
            stored = self._read_version(path, version_number)
            content_file = self._version_dir(path, version_number) / "content"
            old_content = content_file.read_bytes()
            if old_content == new_content:
                raise NoChange(f"{path} v{version_number} content is unchanged")
            entry = AmendmentLogEntry(
                path=path,
                version_number=version_number,
                timestamp=_utcnow(),
                old_hash=stored.content_hash,
                new_hash=content_digest(new_content),
                note=note,
            )
            _write_atomic(content_file, new_content)
            self._write_version(dataclasses.replace(stored, content_hash=entry.new_hash))
            log_line = json.dumps(entry.to_json_dict(), ensure_ascii=False, sort_keys=True)
            with open(self.record_dir(path) / "amendments.jsonl", "a", encoding="utf-8") as fh:
                fh.write(log_line + "\n")
            return entry

    def history(self, path: EntityPath) -> list[RecordVersion]:
        """All versions, oldest first; the last one is current."""
        if not self.exists(path):
            raise UnknownPath(str(path))
        chain = self._read_chain(path)
        return [self._read_version(path, s["version_number"]) for s in chain["versions"]]

    def get_version(self, path: EntityPath, n: int) -> tuple[RecordVersion, bytes]:
        """One version plus its content bytes (post any typo amendments)."""
        if not self.exists(path):
            raise UnknownPath(str(path))
        version = self._read_version(path, n)
        content = (self._version_dir(path, n) / "content").read_bytes()
        return version, content

    def current_version(self, path: EntityPath) -> RecordVersion:
        chain = self._read_chain(path)
        return self._read_version(path, chain["current"])

    def amendments(self, path: EntityPath) -> list[AmendmentLogEntry]:
        if not self.exists(path):
            raise UnknownPath(str(path))
        log = self.record_dir(path) / "amendments.jsonl"
        if not log.is_file():
            return []
        return [
            AmendmentLogEntry.from_json_dict(json.loads(line))
            for line in log.read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]

    def load_metadata(self, path: EntityPath) -> DescriptiveMetadata:
        meta_file = self.record_dir(path) / "metadata.json"
        if not meta_file.is_file():
            raise UnknownPath(str(path))
        return DescriptiveMetadata.from_json_dict(
            json.loads(meta_file.read_text(encoding="utf-8"))
        )

    def find_record_by_doi(self, doi: Doi) -> EntityPath | None:
        with self._registry_lock:
            return self._doi_owner.get(str(doi))

    # -- integrity ----------------------------------------------------------

    @staticmethod
    def _chain_summary(versions: Sequence[RecordVersion]) -> dict:
        current = max(v.version_number for v in versions if v.status is Status.CURRENT)
        return {
            "current": current,
            "path": versions[0].path.to_json_dict(),
            "versions": [
                {
                    "change_kind": v.change_kind.value,
                    "doi": str(v.doi),
                    "published_at": v.published_at.isoformat(),
                    "status": v.status.value,
                    "version_number": v.version_number,
                }
                for v in sorted(versions, key=lambda v: v.version_number)
            ],
        }

    def audit_record(self, path: EntityPath) -> list[str]:
        """Re-verify every chain invariant by full scan; [] means clean."""
        problems: list[str] = []
        versions = self.history(path)
        numbers = [v.version_number for v in versions]
        if numbers != list(range(1, len(versions) + 1)):
            problems.append(f"{path}: version numbers not contiguous: {numbers}")
        current = [v for v in versions if v.status is Status.CURRENT]
        if len(current) != 1 or current[0].version_number != len(versions):
            problems.append(f"{path}: current-status violation")
        for v in versions:
            if v.version_number == 1:
                if v.predecessor is not None or v.change_kind is not ChangeKind.INITIAL:
                    problems.append(f"{path}: bad base version")
                continue
            prev = versions[v.version_number - 2]
            if v.predecessor != (prev.version_number, prev.doi):
                problems.append(f"{path}: broken predecessor link at v{v.version_number}")
            if v.published_at < prev.published_at:
                problems.append(f"{path}: timestamps decrease at v{v.version_number}")
            if v.change_kind is ChangeKind.SUBSTANTIAL and v.doi == prev.doi:
                problems.append(f"{path}: substantial change kept DOI at v{v.version_number}")
        by_doi: dict[str, list[int]] = {}
        for v in versions:
            by_doi.setdefault(str(v.doi), []).append(v.version_number)
        for doi, nums in by_doi.items():
            if nums != list(range(nums[0], nums[0] + len(nums))):
                problems.append(f"{path}: DOI {doi} spans non-contiguous versions {nums}")
        for v in versions:
            _, content = self.get_version(path, v.version_number)
            if content_digest(content) != v.content_hash:
                problems.append(f"{path}: content hash mismatch at v{v.version_number}")
        return problems

    def audit(self) -> list[str]:
        """Store-wide scan: per-record invariants plus DOI uniqueness."""
        problems: list[str] = []
        owners: dict[str, EntityPath] = {}
        for path in self.records():
            problems.extend(self.audit_record(path))
            for v in self.history(path):
                owner = owners.setdefault(str(v.doi), path)
                if owner != path:
                    problems.append(f"DOI {v.doi} bound to both {owner} and {path}")
        return problems
