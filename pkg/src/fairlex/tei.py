"""TEI-subset parsing, lemma indexing, first attestation, check stamps.

The parser recognizes a small documented subset of TEI (see
docs/tei-subset.md): header title/author/date, `w` elements carrying a
`lemma` attribute, and person/place/work name elements which become entity
spans. Everything else degrades gracefully to plain tokenized text, so any
well-formed document with a usable header parses.

The corpus index maps lemmas to occurrences with a configurable context
window; `attest` answers the first-attestation question (earliest
publication year, ties broken by work id). Check stamps record "this entry
was last checked against this corpus state" as an append-only log per
record.
"""

from __future__ import annotations

import datetime
import enum
import hashlib
import json
import re
import unicodedata
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import FairlexError, MalformedXml
from .pids import Doi, Pid, PidScheme, parse_doi, validate
from .store import EntityPath, RecordStore, UnknownPath

__all__ = [
    "Attestation",
    "CheckStamp",
    "CorpusIndex",
    "DuplicateWorkId",
    "Edition",
    "Entity",
    "EntityKind",
    "Header",
    "MissingHeader",
    "Occurrence",
    "Token",
    "attest",
    "index_corpus",
    "load_edition",
    "load_index",
    "parse_tei",
    "read_stamps",
    "save_edition",
    "save_index",
    "stamp_check",
    "tokenize",
]

DEFAULT_CONTEXT_WINDOW = 10

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)
_YEAR_RE = re.compile(r"\b(\d{4})\b")
_SLUG_STRIP_RE = re.compile(r"[^a-z0-9]+")


class MissingHeader(FairlexError):
    """The document has no usable title or date in its header."""


class DuplicateWorkId(FairlexError):
    """Two editions claim the same work id."""


class EntityKind(enum.Enum):
    PERSON = "person"
    PLACE = "place"
    WORK = "work"


@dataclass(frozen=True)
class Token:
    surface: str
    lemma: str | None = None


@dataclass(frozen=True)
class Entity:
    kind: EntityKind
    surface: str
    start: int
    length: int


@dataclass(frozen=True)
class Header:
    title: str
    author: str
    publication_year: int


@dataclass(frozen=True)
class Edition:
    """One parsed corpus text."""

    work_id: str
    header: Header
    tokens: tuple[Token, ...]
    entities: tuple[Entity, ...]
    format_identifiers: dict[str, Pid] = field(default_factory=dict)
    doi: Doi | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "entities", tuple(self.entities))
        if not (1400 <= self.header.publication_year <= 2100):
            raise ValueError(
                f"implausible publication year {self.header.publication_year}"
            )
        for entity in self.entities:
            if entity.length < 1 or entity.start < 0 or (
                entity.start + entity.length > len(self.tokens)
            ):
                raise ValueError(f"entity span out of bounds: {entity}")
        for fmt in self.format_identifiers:
            if fmt not in ("xml", "html", "epub"):
                raise ValueError(f"unknown format {fmt!r}")

    def content_digest(self) -> str:
        """Hash of the edition's substance (header, tokens, entity spans)."""
        doc = {
            "work_id": self.work_id,
            "header": [self.header.title, self.header.author, self.header.publication_year],
            "tokens": [[t.surface, t.lemma] for t in self.tokens],
            "entities": [
                [e.kind.value, e.surface, e.start, e.length] for e in self.entities
            ],
        }
        canonical = json.dumps(doc, ensure_ascii=False, sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Occurrence:
    work_id: str
    offset: int
    context: str


@dataclass
class CorpusIndex:
    lemmas: dict[str, tuple[Occurrence, ...]]
    works: dict[str, int]  # work_id -> publication year
    corpus_hash: str
    context_window: int


@dataclass(frozen=True)
class Attestation:
    lemma: str
    first_year: int
    first_work: str
    occurrences: tuple[Occurrence, ...]


@dataclass(frozen=True)
class CheckStamp:
    path: EntityPath
    checked_at: datetime.date
    corpus_hash: str

    def to_json_dict(self) -> dict:
        return {
            "path": str(self.path),
            "checked_at": self.checked_at.isoformat(),
            "corpus_hash": self.corpus_hash,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "CheckStamp":
        return cls(
            path=EntityPath.parse(data["path"]),
            checked_at=datetime.date.fromisoformat(data["checked_at"]),
            corpus_hash=data["corpus_hash"],
        )


# -- parsing ------------------------------------------------------------------


def tokenize(text: str) -> list[str]:
    """Whitespace/punctuation split; punctuation marks are their own tokens."""
    return _TOKEN_RE.findall(text)


def _local(tag) -> str:
    return tag.rsplit("}", 1)[-1] if isinstance(tag, str) else ""


def _slugify(text: str) -> str:
    decomposed = unicodedata.normalize("NFKD", text.lower())
    ascii_text = decomposed.encode("ascii", "ignore").decode("ascii")
    return _SLUG_STRIP_RE.sub("-", ascii_text).strip("-") or "senza-titolo"


def _header_year(header: ET.Element) -> int | None:
    for date_elem in header.iter():
        if _local(date_elem.tag) != "date":
            continue
        for candidate in (date_elem.get("when", ""), date_elem.text or ""):
            match = _YEAR_RE.search(candidate)
            if match:
                return int(match.group(1))
    return None


def _first_text(root: ET.Element, name: str) -> str:
    for elem in root.iter():
        if _local(elem.tag) == name and elem.text and elem.text.strip():
            return " ".join(elem.text.split())
    return ""


def _collect_identifiers(header: ET.Element) -> tuple[dict[str, Pid], Doi | None]:
    formats: dict[str, Pid] = {}
    doi: Doi | None = None
    for elem in header.iter():
        if _local(elem.tag) != "idno":
            continue
        kind = (elem.get("type") or "").upper()
        value = (elem.text or "").strip()
        if not value:
            continue
        if kind == "DOI" and doi is None:
            doi = parse_doi(value)
        elif kind == "ISBN":
            fmt = (elem.get("n") or "").lower()
            if fmt in ("xml", "html", "epub"):
                formats[fmt] = validate(PidScheme.ISBN13, value)
    return formats, doi


_ENTITY_TAGS = {"persname": EntityKind.PERSON, "placename": EntityKind.PLACE}
_NAME_TYPE_KINDS = {
    "person": EntityKind.PERSON,
    "place": EntityKind.PLACE,
    "work": EntityKind.WORK,
}


def _entity_kind(elem: ET.Element) -> EntityKind | None:
    local = _local(elem.tag).lower()
    if local in _ENTITY_TAGS:
        return _ENTITY_TAGS[local]
    if local == "name":
        return _NAME_TYPE_KINDS.get((elem.get("type") or "").lower())
    if local == "title":  # a title cited inside the text body
        return EntityKind.WORK
    return None


class _BodyWalker:
    def __init__(self) -> None:
        self.tokens: list[Token] = []
        self.entities: list[Entity] = []

    def _add_text(self, text: str | None) -> None:
        if text:
            self.tokens.extend(Token(surface) for surface in tokenize(text))

    def walk(self, elem: ET.Element) -> None:
        local = _local(elem.tag).lower()
        if local == "w":
            surface = " ".join("".join(elem.itertext()).split())
            if surface:
                self.tokens.append(Token(surface, elem.get("lemma") or None))
            self._add_text(elem.tail)
            return
        kind = _entity_kind(elem)
        start = len(self.tokens)
        self._add_text(elem.text)
        for child in elem:
            self.walk(child)
        if kind is not None and len(self.tokens) > start:
            surface = " ".join(
                token.surface for token in self.tokens[start:]
            )
            self.entities.append(
                Entity(kind, surface, start, len(self.tokens) - start)
            )
        self._add_text(elem.tail)


def parse_tei(document: bytes, work_id: str | None = None) -> Edition:
    """Parse one TEI-flavored document into an Edition.

    Unrecognized markup is flattened to tokenized text; only a missing or
    unusable header is fatal.
    """
    try:
        root = ET.fromstring(document)
    except ET.ParseError as exc:
        raise MalformedXml(str(exc)) from None
    header_elem = None
    for elem in root.iter():
        if _local(elem.tag) == "teiHeader":
            header_elem = elem
            break
    if header_elem is None:
        raise MissingHeader("document has no teiHeader")
    title = _first_text(header_elem, "title")
    year = _header_year(header_elem)
    if not title:
        raise MissingHeader("header has no title")
    if year is None:
        raise MissingHeader("header has no parseable date")
    author = _first_text(header_elem, "author")
    formats, doi = _collect_identifiers(header_elem)

    walker = _BodyWalker()
    for elem in root:
        if _local(elem.tag) != "teiHeader":
            walker.walk(elem)

    if work_id is None:
        work_id = root.get("{http://www.w3.org/XML/1998/namespace}id") or _slugify(title)
    return Edition(
        work_id=work_id,
        header=Header(title=title, author=author, publication_year=year),
        tokens=tuple(walker.tokens),
        entities=tuple(walker.entities),
        format_identifiers=formats,
        doi=doi,
    )


# -- edition persistence ---------------------------------------------------------


def save_edition(edition: Edition, directory: str | Path) -> Path:
    doc = {
        "work_id": edition.work_id,
        "header": {
            "title": edition.header.title,
            "author": edition.header.author,
            "publication_year": edition.header.publication_year,
        },
        "tokens": [[t.surface, t.lemma] for t in edition.tokens],
        "entities": [
            [e.kind.value, e.surface, e.start, e.length] for e in edition.entities
        ],
        "format_identifiers": {
            fmt: pid.normalized for fmt, pid in sorted(edition.format_identifiers.items())
        },
        "doi": str(edition.doi) if edition.doi else None,
    }
    target = Path(directory) / f"{edition.work_id}.json"
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(
        json.dumps(doc, ensure_ascii=False, sort_keys=True, indent=2), encoding="utf-8"
    )
    return target


def load_edition(path: str | Path) -> Edition:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return Edition(
        work_id=doc["work_id"],
        header=Header(
            title=doc["header"]["title"],
            author=doc["header"]["author"],
            publication_year=doc["header"]["publication_year"],
        ),
        tokens=tuple(Token(s, lemma) for s, lemma in doc["tokens"]),
        entities=tuple(
            Entity(EntityKind(kind), surface, start, length)
            for kind, surface, start, length in doc["entities"]
        ),
        format_identifiers={
            fmt: validate(PidScheme.ISBN13, value)
            for fmt, value in doc["format_identifiers"].items()
        },
        doi=parse_doi(doc["doi"]) if doc.get("doi") else None,
    )


# -- indexing ---------------------------------------------------------------------


def index_corpus(
    editions: Sequence[Edition], context_window: int = DEFAULT_CONTEXT_WINDOW
) -> CorpusIndex:
    """Index every lemma-bearing token with its surrounding context."""
    if not editions:
        raise ValueError("index_corpus needs at least one edition")
    seen: set[str] = set()
    for edition in editions:
        if edition.work_id in seen:
            raise DuplicateWorkId(edition.work_id)
        seen.add(edition.work_id)
    lemmas: dict[str, list[Occurrence]] = {}
    for edition in editions:
        surfaces = [token.surface for token in edition.tokens]
        for offset, token in enumerate(edition.tokens):
            if token.lemma is None:
                continue
            lo = max(0, offset - context_window)
            hi = offset + context_window + 1
            context = " ".join(surfaces[lo:hi])
            lemmas.setdefault(token.lemma, []).append(
                Occurrence(edition.work_id, offset, context)
            )
    return CorpusIndex(
        lemmas={
            lemma: tuple(sorted(occs, key=lambda o: (o.work_id, o.offset)))
            for lemma, occs in lemmas.items()
        },
        works={e.work_id: e.header.publication_year for e in editions},
        corpus_hash=corpus_hash(editions),
        context_window=context_window,
    )


def corpus_hash(editions: Iterable[Edition]) -> str:
    """SHA-256 over sorted (work_id, content digest) pairs."""
    pairs = sorted((e.work_id, e.content_digest()) for e in editions)
    text = "".join(f"{work_id}  {digest}\n" for work_id, digest in pairs)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def attest(index: CorpusIndex, lemma: str) -> Attestation | None:
    """Earliest attestation of a lemma, or None when unindexed.

    first_year is the minimum publication year over works containing the
    lemma; among works sharing that year, the lexicographically smallest
    work id wins.
    """
    occurrences = index.lemmas.get(lemma)
    if not occurrences:
        return None
    work_ids = {occ.work_id for occ in occurrences}
    first_year = min(index.works[w] for w in work_ids)
    first_work = min(w for w in work_ids if index.works[w] == first_year)
    return Attestation(
        lemma=lemma, first_year=first_year, first_work=first_work, occurrences=occurrences
    )


# -- index persistence -------------------------------------------------------------


def save_index(index: CorpusIndex, directory: str | Path) -> Path:
    doc = {
        "context_window": index.context_window,
        "corpus_hash": index.corpus_hash,
        "works": index.works,
        "lemmas": {
            lemma: [
                {"work_id": o.work_id, "offset": o.offset, "context": o.context}
                for o in occs
            ]
            for lemma, occs in sorted(index.lemmas.items())
        },
    }
    target = Path(directory) / "corpus-index.json"
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(
        json.dumps(doc, ensure_ascii=False, sort_keys=True, indent=2), encoding="utf-8"
    )
    return target


def load_index(directory: str | Path) -> CorpusIndex:
    doc = json.loads((Path(directory) / "corpus-index.json").read_text(encoding="utf-8"))
    return CorpusIndex(
        lemmas={
            lemma: tuple(Occurrence(o["work_id"], o["offset"], o["context"]) for o in occs)
            for lemma, occs in doc["lemmas"].items()
        },
        works={work: int(year) for work, year in doc["works"].items()},
        corpus_hash=doc["corpus_hash"],
        context_window=doc["context_window"],
    )


# -- check stamps -------------------------------------------------------------------


def stamp_check(store: RecordStore, path: EntityPath, index: CorpusIndex) -> CheckStamp:
    """Append a 'checked against this corpus state today' stamp to the entry."""
    if not store.exists(path):
        raise UnknownPath(str(path))
    stamp = CheckStamp(
        path=path,
        checked_at=datetime.datetime.now(datetime.timezone.utc).date(),
        corpus_hash=index.corpus_hash,
    )
    log = store.record_dir(path) / "checks.jsonl"
    with open(log, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(stamp.to_json_dict(), ensure_ascii=False, sort_keys=True) + "\n")
    return stamp


def read_stamps(store: RecordStore, path: EntityPath) -> list[CheckStamp]:
    if not store.exists(path):
        raise UnknownPath(str(path))
    log = store.record_dir(path) / "checks.jsonl"
    if not log.is_file():
        return []
    return [
        CheckStamp.from_json_dict(json.loads(line))
        for line in log.read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
