"""Crosswalk of one scheme-neutral description into four meta-tag profiles.

The profiles target different consumers: Dublin Core for libraries and
aggregators, Highwire for scholarly indexers, Open Graph and Twitter cards
for social previews. All emitters are pure and byte-deterministic.
"""

from __future__ import annotations

import datetime
import enum
import html
from dataclasses import dataclass, field

from .errors import FairlexError
from .pids import Doi, Pid, parse_doi

__all__ = [
    "Creator",
    "DescriptiveMetadata",
    "InvalidMetadata",
    "MetaTagSet",
    "Profile",
    "ResourceType",
    "emit_all_profiles",
    "emit_dublin_core",
    "emit_highwire",
    "emit_html_head",
    "emit_open_graph",
    "emit_twitter_card",
]

DESCRIPTION_LIMIT = 300


class InvalidMetadata(FairlexError):
    """Description is missing a field required for reuse."""


def _escape(value: str) -> str:
    # Control whitespace is escaped too so every tag stays on one line.
    out = html.escape(value, quote=True)
    return out.replace("\n", "&#10;").replace("\r", "&#13;").replace("\t", "&#9;")


class ResourceType(enum.Enum):
    DATASET = "dataset"
    TEXT_EDITION = "text_edition"
    ENTRY = "entry"


class Profile(enum.Enum):
    DUBLIN_CORE = "dublin_core"
    HIGHWIRE = "highwire"
    OPEN_GRAPH = "open_graph"
    TWITTER_CARD = "twitter_card"


@dataclass(frozen=True)
class Creator:
    name: str
    orcid: Pid | None = None


@dataclass(frozen=True)
class DescriptiveMetadata:
    """Scheme-neutral description of one published resource.

    Title, at least one creator, publication date, identifier, landing URL,
    license URL, language, and publisher are mandatory; construction raises
    InvalidMetadata otherwise.
    """

    title: str
    creators: tuple[Creator, ...]
    publication_date: datetime.date
    resource_type: ResourceType
    identifier: Doi
    landing_url: str
    language: str
    license_url: str
    publisher: str
    abstract: str | None = None
    image_url: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "creators", tuple(self.creators))
        required = {
            "title": self.title,
            "landing_url": self.landing_url,
            "language": self.language,
            "license_url": self.license_url,
            "publisher": self.publisher,
        }
        for name, value in required.items():
            if not value or not str(value).strip():
                raise InvalidMetadata(f"missing required field: {name}")
        if not self.creators:
            raise InvalidMetadata("at least one creator is required")
        if any(not c.name.strip() for c in self.creators):
            raise InvalidMetadata("creator names must be non-empty")

    def to_json_dict(self) -> dict:
        return {
            "title": self.title,
            "creators": [
                {"name": c.name, "orcid": c.orcid.normalized if c.orcid else None}
                for c in self.creators
            ],
            "publication_date": self.publication_date.isoformat(),
            "resource_type": self.resource_type.value,
            "identifier": str(self.identifier),
            "landing_url": self.landing_url,
            "language": self.language,
            "license_url": self.license_url,
            "publisher": self.publisher,
            "abstract": self.abstract,
            "image_url": self.image_url,
        }

    @classmethod
    def from_json_dict(cls, data: dict, identifier: Doi | None = None) -> "DescriptiveMetadata":
        from .pids import PidScheme, validate

        try:
            creators = tuple(
                Creator(
                    name=c["name"],
                    orcid=validate(PidScheme.ORCID, c["orcid"]) if c.get("orcid") else None,
                )
                for c in data["creators"]
            )
            doi = identifier
            if data.get("identifier"):
                doi = parse_doi(data["identifier"])
            if doi is None:
                raise InvalidMetadata("missing required field: identifier")
            return cls(
                title=data["title"],
                creators=creators,
                publication_date=datetime.date.fromisoformat(data["publication_date"]),
                resource_type=ResourceType(data["resource_type"]),
                identifier=doi,
                landing_url=data["landing_url"],
                language=data["language"],
                license_url=data["license_url"],
                publisher=data["publisher"],
                abstract=data.get("abstract"),
                image_url=data.get("image_url"),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise InvalidMetadata(f"bad metadata document: {exc}") from exc


@dataclass(frozen=True)
class MetaTagSet:
    """Ordered (key, value) pairs for one profile.

    Values are stored raw; to_html() applies HTML attribute escaping. Open
    Graph keys render with the property= attribute, the rest with name=.
    """

    profile: Profile
    tags: tuple[tuple[str, str], ...] = field(default_factory=tuple)

    @property
    def attribute(self) -> str:
        return "property" if self.profile is Profile.OPEN_GRAPH else "name"

    def to_html(self) -> str:
        attr = self.attribute
        lines = [
            f'<meta {attr}="{_escape(key)}" content="{_escape(value)}">'
            for key, value in self.tags
        ]
        return "\n".join(lines)

    def to_json_dict(self) -> dict:
        return {"profile": self.profile.value, "tags": [list(t) for t in self.tags]}


def truncate_at_word(text: str, limit: int = DESCRIPTION_LIMIT) -> str:
    """Cut text to at most `limit` chars, ending at a word boundary.

    A single word longer than the limit is hard-cut.
    """
    if len(text) <= limit:
        return text
    head = text[:limit]
    if text[limit].isspace():
        return head.rstrip()
    clipped = head.rsplit(None, 1)[0] if any(c.isspace() for c in head) else head
    return clipped.rstrip()


def _highwire_author(name: str) -> str:
    # Already "Family, Given" when there is exactly one comma; normalize
    # the spacing. Anything else passes through verbatim.
    if name.count(",") == 1:
        family, given = (part.strip() for part in name.split(","))
        if family and given:
            return f"{family}, {given}"
    return name


_DC_TYPE = {
    ResourceType.DATASET: "Dataset",
    ResourceType.TEXT_EDITION: "Text",
    ResourceType.ENTRY: "Text",
}


def emit_dublin_core(m: DescriptiveMetadata) -> MetaTagSet:
    """Dublin Core Element Set 1.1 tags; dc.description only with an abstract."""
    tags = [("dc.title", m.title)]
    tags += [("dc.creator", c.name) for c in m.creators]
    tags += [
        ("dc.date", m.publication_date.isoformat()),
        ("dc.identifier", m.identifier.url),
        ("dc.language", m.language),
        ("dc.rights", m.license_url),
        ("dc.publisher", m.publisher),
        ("dc.type", _DC_TYPE[m.resource_type]),
    ]
    if m.abstract:
        tags.append(("dc.description", m.abstract))
    return MetaTagSet(Profile.DUBLIN_CORE, tuple(tags))


def emit_highwire(m: DescriptiveMetadata) -> MetaTagSet:
    """Highwire Press tags for scholarly indexers; citation_doi is bare."""
    tags = [("citation_title", m.title)]
    tags += [("citation_author", _highwire_author(c.name)) for c in m.creators]
    tags += [
        ("citation_publication_date", m.publication_date.strftime("%Y/%m/%d")),
        ("citation_doi", str(m.identifier)),
        ("citation_abstract_html_url", m.landing_url),
        ("citation_language", m.language),
    ]
    return MetaTagSet(Profile.HIGHWIRE, tuple(tags))


def _description(m: DescriptiveMetadata) -> str:
    # Social cards need a description even when no abstract was written.
    return truncate_at_word(m.abstract if m.abstract else m.title)


def emit_open_graph(m: DescriptiveMetadata) -> MetaTagSet:
    og_type = "website" if m.resource_type is ResourceType.DATASET else "article"
    tags = [
        ("og:title", m.title),
        ("og:type", og_type),
        ("og:url", m.landing_url),
        ("og:description", _description(m)),
    ]
    if m.image_url:
        tags.append(("og:image", m.image_url))
    return MetaTagSet(Profile.OPEN_GRAPH, tuple(tags))


def emit_twitter_card(m: DescriptiveMetadata) -> MetaTagSet:
    card = "summary_large_image" if m.image_url else "summary"
    tags = [
        ("twitter:card", card),
        ("twitter:title", m.title),
        ("twitter:description", _description(m)),
    ]
    return MetaTagSet(Profile.TWITTER_CARD, tuple(tags))


_EMITTERS = {
    Profile.DUBLIN_CORE: emit_dublin_core,
    Profile.HIGHWIRE: emit_highwire,
    Profile.OPEN_GRAPH: emit_open_graph,
    Profile.TWITTER_CARD: emit_twitter_card,
}


def emit_all_profiles(m: DescriptiveMetadata) -> list[MetaTagSet]:
    """All four tag sets in fixed emission order."""
    return [emitter(m) for emitter in _EMITTERS.values()]


def emit_html_head(m: DescriptiveMetadata) -> str:
    """Concatenated <meta> elements for all profiles, byte-deterministic."""
    return "\n".join(tag_set.to_html() for tag_set in emit_all_profiles(m)) + "\n"
