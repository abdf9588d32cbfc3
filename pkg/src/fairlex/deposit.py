"""Registrar deposit documents and submission.

A deposit batch describes one database and the record versions being
registered under it, in the registrar's two-level database/dataset XML
dialect. Version succession is declared in a per-dataset Crossmark section
that links the depositing version's DOI to every superseded predecessor DOI.

Submission goes through a pluggable client: a mock for tests, an HTTP
multipart client for a live endpoint, or a dry-run that writes the XML to
disk. Accepted batches are remembered so re-registering the same batch id
never POSTs twice.
"""

from __future__ import annotations

import datetime
import enum
import hashlib
import os
import threading
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

from .errors import FairlexError, MalformedXml
from .metatags import Creator, DescriptiveMetadata, InvalidMetadata
from .pids import Doi, PidScheme, parse_doi, validate
from .store import RecordVersion, UnknownVersion

__all__ = [
    "CrossmarkSection",
    "CrossmarkUpdate",
    "DatabaseElement",
    "DatasetElement",
    "DatasetItem",
    "DepositDocument",
    "DepositHead",
    "EmptyBody",
    "HttpRegistrarClient",
    "MockRegistrarClient",
    "Registrar",
    "RegistrarReceipt",
    "ReceiptStatus",
    "Rejected",
    "RetryPolicy",
    "TransientFailure",
    "UpdateType",
    "Unreachable",
    "UnknownVersion",
    "build_crossmark",
    "build_deposit",
    "parse_deposit",
    "serialize_deposit",
    "write_deposit",
]

DEFAULT_SCHEMA_NAMESPACE = "http://www.crossref.org/schema/5.3.1"
SCHEMA_VERSION = "5.3.1"

ENV_REGISTRAR_USER = "FAIRLEX_REG_USER"
ENV_REGISTRAR_PASS = "FAIRLEX_REG_PASS"


class EmptyBody(FairlexError):
    """A deposit needs at least one dataset element."""


class Rejected(FairlexError):
    """The registrar reported a validation failure; retrying cannot help."""


class TransientFailure(FairlexError):
    """The registrar could not be reached or answered 5xx; retryable."""


class Unreachable(FairlexError):
    """All submission attempts failed."""


class UpdateType(enum.Enum):
    NEW_VERSION = "new_version"
    CORRECTION = "correction"


class ReceiptStatus(enum.Enum):
    ACCEPTED = "accepted"
    REJECTED = "rejected"


def _utc_today() -> datetime.date:
    return datetime.datetime.now(datetime.timezone.utc).date()


@dataclass(frozen=True)
class CrossmarkUpdate:
    update_type: UpdateType
    target_doi: Doi
    date: datetime.date

    def __post_init__(self) -> None:
        if self.date > _utc_today():
            raise ValueError(f"update date {self.date} lies in the future")


@dataclass(frozen=True)
class CrossmarkSection:
    policy_doi: Doi
    updates: tuple[CrossmarkUpdate, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "updates", tuple(self.updates))


@dataclass(frozen=True)
class DepositHead:
    batch_id: str
    timestamp: int
    depositor_name: str
    depositor_email: str
    registrant: str


@dataclass(frozen=True)
class DatasetElement:
    """One record version inside the deposit body."""

    title: str
    creators: tuple[Creator, ...]
    date: datetime.date
    doi: Doi
    landing_url: str
    crossmark: CrossmarkSection | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "creators", tuple(self.creators))
        if self.crossmark is not None:
            for update in self.crossmark.updates:
                if update.target_doi == self.doi:
                    raise ValueError(f"crossmark update targets its own DOI {self.doi}")


@dataclass(frozen=True)
class DatabaseElement:
    title: str
    doi: Doi
    landing_url: str
    datasets: tuple[DatasetElement, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "datasets", tuple(self.datasets))


@dataclass(frozen=True)
class DepositDocument:
    """head plus a body of exactly one database element; the dataset
    elements live inside it, so each one references its database."""

    head: DepositHead
    database: DatabaseElement


@dataclass(frozen=True)
class DatasetItem:
    """build_deposit input: a record version, its descriptive metadata, and
    an optional Crossmark section linking it to superseded DOIs."""

    version: RecordVersion
    metadata: DescriptiveMetadata
    crossmark: CrossmarkSection | None = None


def _normalize_person(name: str) -> str:
    """'Family, Given' with tidy spacing; anything else verbatim."""
    if name.count(",") == 1:
        family, given = (part.strip() for part in name.split(","))
        if family and given:
            return f"{family}, {given}"
    return name


def _split_person(name: str) -> tuple[str, str | None]:
    """(surname, given) for 'Family, Given'; (name, None) otherwise."""
    if name.count(",") == 1:
        family, given = (part.strip() for part in name.split(","))
        if family and given:
            return family, given
    return name, None


# -- building ----------------------------------------------------------------


def build_crossmark(
    chain: Sequence[RecordVersion], for_version: int, *, policy_doi: Doi
) -> CrossmarkSection | None:
    """Link for_version's DOI to each superseded predecessor DOI.

    Targets are the distinct DOIs seen earlier in the chain that differ from
    the depositing version's own DOI, most recent first. Returns None when
    there is nothing to link (version 1, or every predecessor shared the
    DOI).
    """
    by_number = {v.version_number: v for v in chain}
    if for_version not in by_number:
        raise UnknownVersion(f"no version {for_version} in chain")
    current = by_number[for_version]
    targets: list[Doi] = []
    for version in sorted(chain, key=lambda v: v.version_number, reverse=True):
        if version.version_number >= for_version:
            continue
        if version.doi != current.doi and version.doi not in targets:
            targets.append(version.doi)
    if not targets:
        return None
    date = current.published_at.date()
    return CrossmarkSection(
        policy_doi=policy_doi,
        updates=tuple(
            CrossmarkUpdate(UpdateType.NEW_VERSION, target, date) for target in targets
        ),
    )


def _batch_id(database_slug: str, when: datetime.datetime, body: bytes) -> str:
    stamp = when.strftime("%Y%m%d%H%M%S%f")
    return f"{database_slug}-{stamp}-{hashlib.sha256(body).hexdigest()[:8]}"


def build_deposit(
    db_meta: DescriptiveMetadata,
    items: Sequence[DatasetItem],
    *,
    depositor_name: str,
    depositor_email: str,
    registrant: str,
) -> DepositDocument:
    """Assemble a deposit: one database element, one dataset per version.

    Deterministic apart from the batch id and timestamp, which are taken
    from the build time and a hash of the body.
    """
    if not items:
        raise EmptyBody("a deposit needs at least one record version")
    databases = {item.version.path.database for item in items}
    if len(databases) != 1:
        raise InvalidMetadata(f"datasets span multiple databases: {sorted(databases)}")
    datasets = tuple(
        DatasetElement(
            title=item.metadata.title,
            creators=tuple(
                Creator(_normalize_person(c.name), c.orcid) for c in item.version.authors
            ),
            date=item.version.published_at.date(),
            doi=item.version.doi,
            landing_url=item.metadata.landing_url,
            crossmark=item.crossmark,
        )
        for item in items
    )
    database = DatabaseElement(
        title=db_meta.title,
        doi=db_meta.identifier,
        landing_url=db_meta.landing_url,
        datasets=datasets,
    )
    now = datetime.datetime.now(datetime.timezone.utc)
    body_bytes = ET.tostring(_body_element(database), encoding="utf-8")
    head = DepositHead(
        batch_id=_batch_id(databases.pop(), now, body_bytes),
        timestamp=int(now.timestamp()),
        depositor_name=depositor_name,
        depositor_email=depositor_email,
        registrant=registrant,
    )
    return DepositDocument(head=head, database=database)


# -- XML serialization --------------------------------------------------------


def _sub(parent: ET.Element, tag: str, text: str | None = None, **attrs: str) -> ET.Element:
    child = ET.SubElement(parent, tag, attrs)
    if text is not None:
        child.text = text
    return child


def _doi_data(parent: ET.Element, doi: Doi, landing_url: str) -> None:
    data = _sub(parent, "doi_data")
    _sub(data, "doi", str(doi))
    _sub(data, "resource", landing_url)


def _crossmark_element(parent: ET.Element, section: CrossmarkSection) -> None:
    mark = _sub(parent, "crossmark")
    _sub(mark, "crossmark_policy", str(section.policy_doi))
    updates = _sub(mark, "updates")
    for update in section.updates:
        _sub(
            updates,
            "update",
            str(update.target_doi),
            type=update.update_type.value,
            date=update.date.isoformat(),
        )


def _body_element(database: DatabaseElement) -> ET.Element:
    body = ET.Element("body")
    db = _sub(body, "database")
    db_meta = _sub(db, "database_metadata")
    titles = _sub(db_meta, "titles")
    _sub(titles, "title", database.title)
    _doi_data(db_meta, database.doi, database.landing_url)
    for dataset in database.datasets:
        ds = _sub(db, "dataset")
        contributors = _sub(ds, "contributors")
        for i, creator in enumerate(dataset.creators):
            person = _sub(
                contributors,
                "person_name",
                sequence="first" if i == 0 else "additional",
                contributor_role="author",
            )
            surname, given = _split_person(creator.name)
            if given is not None:
                _sub(person, "given_name", given)
            _sub(person, "surname", surname)
            if creator.orcid is not None:
                _sub(person, "ORCID", f"https://orcid.org/{creator.orcid.grouped()}")
        titles = _sub(ds, "titles")
        _sub(titles, "title", dataset.title)
        date = _sub(_sub(ds, "database_date"), "publication_date")
        _sub(date, "month", f"{dataset.date.month:02d}")
        _sub(date, "day", f"{dataset.date.day:02d}")
        _sub(date, "year", str(dataset.date.year))
        if dataset.crossmark is not None:
            _crossmark_element(ds, dataset.crossmark)
        _doi_data(ds, dataset.doi, dataset.landing_url)
    return body


def serialize_deposit(
    document: DepositDocument, namespace: str = DEFAULT_SCHEMA_NAMESPACE
) -> bytes:
    """Deterministic UTF-8 XML: head first, then the body."""
    root = ET.Element("doi_batch", {"xmlns": namespace, "version": SCHEMA_VERSION})
    head = _sub(root, "head")
    _sub(head, "doi_batch_id", document.head.batch_id)
    _sub(head, "timestamp", str(document.head.timestamp))
    depositor = _sub(head, "depositor")
    _sub(depositor, "depositor_name", document.head.depositor_name)
    _sub(depositor, "email_address", document.head.depositor_email)
    _sub(head, "registrant", document.head.registrant)
    root.append(_body_element(document.database))
    ET.indent(root, space="  ")
    return ET.tostring(root, encoding="utf-8", xml_declaration=True)


# -- XML parsing ---------------------------------------------------------------


def _local(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def _children(elem: ET.Element, name: str) -> list[ET.Element]:
    return [child for child in elem if _local(child.tag) == name]


def _child(elem: ET.Element, name: str) -> ET.Element:
    found = _children(elem, name)
    if not found:
        raise MalformedXml(f"<{_local(elem.tag)}> lacks <{name}>")
    return found[0]


def _maybe_child(elem: ET.Element, name: str) -> ET.Element | None:
    found = _children(elem, name)
    return found[0] if found else None


def _text(elem: ET.Element, name: str) -> str:
    return _child(elem, name).text or ""


def _parse_date(elem: ET.Element) -> datetime.date:
    try:
        return datetime.date(
            int(_text(elem, "year")), int(_text(elem, "month")), int(_text(elem, "day"))
        )
    except ValueError as exc:
        raise MalformedXml(f"bad publication_date: {exc}") from None


def _parse_person(person: ET.Element) -> Creator:
    surname = _text(person, "surname")
    given_elem = _maybe_child(person, "given_name")
    name = surname if given_elem is None else f"{surname}, {given_elem.text or ''}"
    orcid_elem = _maybe_child(person, "ORCID")
    orcid = None
    if orcid_elem is not None and orcid_elem.text:
        compact = orcid_elem.text.rsplit("/", 1)[-1]
        orcid = validate(PidScheme.ORCID, compact)
    return Creator(name, orcid)


def _parse_crossmark(mark: ET.Element) -> CrossmarkSection:
    updates = []
    for update in _children(_child(mark, "updates"), "update"):
        updates.append(
            CrossmarkUpdate(
                update_type=UpdateType(update.get("type", "")),
                target_doi=parse_doi(update.text or ""),
                date=datetime.date.fromisoformat(update.get("date", "")),
            )
        )
    return CrossmarkSection(
        policy_doi=parse_doi(_text(mark, "crossmark_policy")), updates=tuple(updates)
    )


def parse_deposit(data: bytes) -> DepositDocument:
    """Inverse of serialize_deposit; tolerant of namespace prefixes."""
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise MalformedXml(str(exc)) from None
    if _local(root.tag) != "doi_batch":
        raise MalformedXml(f"expected <doi_batch>, found <{_local(root.tag)}>")
    head_elem = _child(root, "head")
    depositor = _child(head_elem, "depositor")
    try:
        timestamp = int(_text(head_elem, "timestamp"))
    except ValueError:
        raise MalformedXml("head timestamp is not an integer") from None
    head = DepositHead(
        batch_id=_text(head_elem, "doi_batch_id"),
        timestamp=timestamp,
        depositor_name=_text(depositor, "depositor_name"),
        depositor_email=_text(depositor, "email_address"),
        registrant=_text(head_elem, "registrant"),
    )
    db_elem = _child(_child(root, "body"), "database")
    db_meta = _child(db_elem, "database_metadata")
    datasets = []
    for ds in _children(db_elem, "dataset"):
        contributors = [
            _parse_person(p) for p in _children(_child(ds, "contributors"), "person_name")
        ]
        date = _parse_date(_child(_child(ds, "database_date"), "publication_date"))
        mark_elem = _maybe_child(ds, "crossmark")
        doi_data = _child(ds, "doi_data")
        datasets.append(
            DatasetElement(
                title=_text(_child(ds, "titles"), "title"),
                creators=tuple(contributors),
                date=date,
                doi=parse_doi(_text(doi_data, "doi")),
                landing_url=_text(doi_data, "resource"),
                crossmark=None if mark_elem is None else _parse_crossmark(mark_elem),
            )
        )
    if not datasets:
        raise MalformedXml("deposit body has no dataset elements")
    db_doi_data = _child(db_meta, "doi_data")
    database = DatabaseElement(
        title=_text(_child(db_meta, "titles"), "title"),
        doi=parse_doi(_text(db_doi_data, "doi")),
        landing_url=_text(db_doi_data, "resource"),
        datasets=tuple(datasets),
    )
    return DepositDocument(head=head, database=database)


def write_deposit(document: DepositDocument, path: str | Path) -> Path:
    """Dry-run target: serialize to a file instead of POSTing."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(serialize_deposit(document))
    return out


# -- submission ----------------------------------------------------------------


class RegistrarClient(Protocol):
    def submit(self, payload: bytes) -> str:
        """POST one serialized batch; return the acknowledgement message.

        Raises Rejected for terminal validation failures and
        TransientFailure for retryable transport problems.
        """
        ...


@dataclass(frozen=True)
class RetryPolicy:
    """Exponential backoff: delay i = base_delay * multiplier**i."""

    max_attempts: int = 4
    base_delay: float = 0.5
    multiplier: float = 2.0

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be at least 1")

    def delay_before(self, attempt: int) -> float:
        """Seconds to wait before attempt number `attempt` (2-based)."""
        return self.base_delay * self.multiplier ** (attempt - 2)


@dataclass(frozen=True)
class RegistrarReceipt:
    batch_id: str
    status: ReceiptStatus
    message: str
    attempts: int


class Registrar:
    """Submission orchestrator: retries transient failures with backoff and
    keeps accepted receipts so a batch id is never POSTed twice."""

    def __init__(self, client: RegistrarClient, retry: RetryPolicy | None = None, sleep=None):
        self._client = client
        self._retry = retry or RetryPolicy()
        self._sleep = sleep if sleep is not None else time.sleep
        self._receipts: dict[str, RegistrarReceipt] = {}
        self._lock = threading.Lock()

    def receipt_for(self, batch_id: str) -> RegistrarReceipt | None:
        with self._lock:
            return self._receipts.get(batch_id)

    def register(
        self, document: DepositDocument, namespace: str = DEFAULT_SCHEMA_NAMESPACE
    ) -> RegistrarReceipt:
        batch_id = document.head.batch_id
        existing = self.receipt_for(batch_id)
        if existing is not None:
            return existing
        payload = serialize_deposit(document, namespace)
        last_failure: TransientFailure | None = None
        for attempt in range(1, self._retry.max_attempts + 1):
            if attempt > 1:
                self._sleep(self._retry.delay_before(attempt))
            try:
                message = self._client.submit(payload)
            except TransientFailure as exc:
                last_failure = exc
                continue
            receipt = RegistrarReceipt(batch_id, ReceiptStatus.ACCEPTED, message, attempt)
            with self._lock:
                return self._receipts.setdefault(batch_id, receipt)
        raise Unreachable(
            f"batch {batch_id}: no acceptance after {self._retry.max_attempts}"
            f" attempts ({last_failure})"
        )


class MockRegistrarClient:
    """Scripted registrar for tests.

    `script` lists per-call outcomes: "accept", "transient", or "reject".
    Calls beyond the script accept. Every payload is recorded in `calls`.
    """

    def __init__(self, script: Sequence[str] = ()):
        self.script = list(script)
        self.calls: list[bytes] = []
        self._lock = threading.Lock()

    def submit(self, payload: bytes) -> str:
        with self._lock:
            self.calls.append(payload)
            outcome = self.script.pop(0) if self.script else "accept"
        if outcome == "transient":
            raise TransientFailure("simulated outage")
        if outcome == "reject":
            raise Rejected("simulated schema validation failure")
        return "ok"


class HttpRegistrarClient:
    """Multipart HTTP submission to a live registrar endpoint.

    Credentials default to the FAIRLEX_REG_USER / FAIRLEX_REG_PASS
    environment variables.
    """

    def __init__(self, endpoint_url: str, user: str | None = None, password: str | None = None,
                 session=None, timeout: float = 30.0):
        import requests

        self.endpoint_url = endpoint_url
        self.user = user if user is not None else os.environ.get(ENV_REGISTRAR_USER, "")
        self.password = password if password is not None else os.environ.get(ENV_REGISTRAR_PASS, "")
        self._session = session if session is not None else requests.Session()
        self._timeout = timeout

    def submit(self, payload: bytes) -> str:
        import requests

        try:
            response = self._session.post(
                self.endpoint_url,
                data={
                    "operation": "doMDUpload",
                    "login_id": self.user,
                    "login_passwd": self.password,
                },
                files={"mdFile": ("deposit.xml", payload, "application/xml")},
                timeout=self._timeout,
            )
        except (requests.ConnectionError, requests.Timeout) as exc:
            raise TransientFailure(str(exc)) from None
        if response.status_code >= 500:
            raise TransientFailure(f"registrar answered {response.status_code}")
        if response.status_code >= 400:
            raise Rejected(f"registrar answered {response.status_code}: {response.text[:200]}")
        return response.text
