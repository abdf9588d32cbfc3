"""Persistent identifier parsing, validation, and minting.

Supported schemes: DOI, ISBN-13 (mod-10 check), ORCID and ISNI (ISO 7064
mod 11-2 over 16 characters), ISSN (weighted mod-11). All operations are
pure functions over immutable values.
"""

from __future__ import annotations

import enum
import string
from dataclasses import dataclass, field

from .errors import FairlexError

__all__ = [
    "BadAlphabet",
    "BadLength",
    "ChecksumMismatch",
    "Doi",
    "MalformedDoi",
    "MintPolicy",
    "Pid",
    "PidScheme",
    "TemplateError",
    "mint_doi",
    "parse_doi",
    "validate",
]

# Reserved for testing by the DOI Foundation; real prefixes come from config.
TEST_DOI_PREFIX = "10.5072"
DEFAULT_SUFFIX_TEMPLATE = "viver.{collection}.{record}.v{version}"

_URL_PREFIXES = (
    "https://doi.org/",
    "http://doi.org/",
    "https://dx.doi.org/",
    "http://dx.doi.org/",
    "doi.org/",
    "doi:",
)


class MalformedDoi(FairlexError):
    """Candidate string is not a structurally valid DOI."""


class BadLength(FairlexError):
    """Identifier has the wrong number of significant characters."""


class BadAlphabet(FairlexError):
    """Identifier contains characters outside the scheme's alphabet."""


class ChecksumMismatch(FairlexError):
    """Check digit does not match the identifier body."""


class TemplateError(FairlexError):
    """Mint template is unusable or rendered an illegal suffix."""


class PidScheme(enum.Enum):
    DOI = "doi"
    ISBN13 = "isbn13"
    ORCID = "orcid"
    ISSN = "issn"
    ISNI = "isni"


def _is_legal_suffix(suffix: str) -> bool:
    if not suffix:
        return False
    return not any(ch.isspace() or ord(ch) < 0x20 or ord(ch) == 0x7F for ch in suffix)


@dataclass(frozen=True)
class Doi:
    """A DOI split into registrant prefix and opaque suffix.

    Suffix comparison is case-insensitive; the stored form is lowercased at
    construction so ordinary equality does the right thing.
    """

    prefix: str
    suffix: str

    def __post_init__(self) -> None:
        if not self.prefix.startswith("10."):
            raise MalformedDoi(f"prefix must start with '10.': {self.prefix!r}")
        registrant = self.prefix[3:]
        if len(registrant) < 4 or not registrant.isdigit():
            raise MalformedDoi(f"registrant code must be >=4 digits: {self.prefix!r}")
        if not _is_legal_suffix(self.suffix):
            raise MalformedDoi(f"illegal DOI suffix: {self.suffix!r}")
        object.__setattr__(self, "suffix", self.suffix.lower())

    def __str__(self) -> str:
        return f"{self.prefix}/{self.suffix}"

    @property
    def url(self) -> str:
        return f"https://doi.org/{self}"


def parse_doi(raw: str) -> Doi:
    """Parse a candidate DOI, stripping a leading resolver URL or doi: scheme.

    Raises MalformedDoi when the remainder is not `10.<registrant>/<suffix>`.
    """
    candidate = raw.strip()
    lowered = candidate.lower()
    for url_prefix in _URL_PREFIXES:
        if lowered.startswith(url_prefix):
            candidate = candidate[len(url_prefix):]
            break
    if "/" not in candidate:
        raise MalformedDoi(f"no suffix separator in {raw!r}")
    prefix, _, suffix = candidate.partition("/")
    return Doi(prefix=prefix, suffix=suffix)


@dataclass(frozen=True)
class Pid:
    """A validated persistent identifier in normalized form.

    Equality ignores the raw spelling: two Pids naming the same identifier
    compare equal however they were written.
    """

    scheme: PidScheme
    normalized: str
    raw: str = field(compare=False)

    def grouped(self) -> str:
        """Conventional hyphenated display form (bare string for DOI/ISBN)."""
        n = self.normalized
        if self.scheme in (PidScheme.ORCID, PidScheme.ISNI):
            return f"{n[0:4]}-{n[4:8]}-{n[8:12]}-{n[12:16]}"
        if self.scheme is PidScheme.ISSN:
            return f"{n[0:4]}-{n[4:8]}"
        return n


def _strip_separators(raw: str) -> str:
    return raw.replace("-", "").replace(" ", "").strip()


def isbn13_check_digit(digits12: str) -> str:
    """Check digit for a 12-digit ISBN-13 body (alternating 1/3 weights)."""
    total = sum(int(d) * (1 if i % 2 == 0 else 3) for i, d in enumerate(digits12))
    return str((10 - total % 10) % 10)


def iso7064_mod11_2_check(digits: str) -> str:
    """ISO 7064 mod 11-2 check character over a digit string ('X' for 10)."""
    total = 0
    for d in digits:
        total = (total + int(d)) * 2
    result = (12 - total % 11) % 11
    return "X" if result == 10 else str(result)


def issn_check_digit(digits7: str) -> str:
    """ISSN check digit: weights 8..2 over 7 digits, mod 11 ('X' for 10)."""
    total = sum(int(d) * w for d, w in zip(digits7, range(8, 1, -1)))
    remainder = total % 11
    result = 0 if remainder == 0 else 11 - remainder
    return "X" if result == 10 else str(result)


def _check_body(scheme: PidScheme, compact: str, length: int, check_fn) -> str:
    if len(compact) != length:
        raise BadLength(f"{scheme.value} needs {length} characters, got {len(compact)}")
    body, check = compact[:-1], compact[-1].upper()
    if not body.isdigit():
        raise BadAlphabet(f"{scheme.value} body must be digits: {compact!r}")
    if not (check.isdigit() or check == "X"):
        raise BadAlphabet(f"{scheme.value} check character must be 0-9 or X: {compact!r}")
    expected = check_fn(body)
    if check != expected:
        raise ChecksumMismatch(f"{scheme.value} check digit {check} != expected {expected}")
    return body + check


def validate(scheme: PidScheme, raw: str) -> Pid:
    """Validate `raw` under the given scheme, returning the normalized Pid.

    Normalization strips hyphens and spaces and uppercases a trailing X
    check character. Raises BadLength, BadAlphabet, or ChecksumMismatch;
    DOI candidates go through parse_doi and raise MalformedDoi instead.
    """
    if scheme is PidScheme.DOI:
        return Pid(scheme=scheme, normalized=str(parse_doi(raw)), raw=raw)
    compact = _strip_separators(raw)
    if scheme is PidScheme.ISBN13:
        if len(compact) != 13:
            raise BadLength(f"isbn13 needs 13 digits, got {len(compact)}")
        if not compact.isdigit():
            raise BadAlphabet(f"isbn13 must be all digits: {compact!r}")
        expected = isbn13_check_digit(compact[:12])
        if compact[-1] != expected:
            raise ChecksumMismatch(f"isbn13 check digit {compact[-1]} != expected {expected}")
        normalized = compact
    elif scheme in (PidScheme.ORCID, PidScheme.ISNI):
        normalized = _check_body(scheme, compact, 16, iso7064_mod11_2_check)
    elif scheme is PidScheme.ISSN:
        normalized = _check_body(scheme, compact, 8, issn_check_digit)
    else:  # pragma: no cover - enum is closed
        raise ValueError(f"unknown scheme {scheme!r}")
    return Pid(scheme=scheme, normalized=normalized, raw=raw)


_TEMPLATE_PLACEHOLDERS = {"collection", "record", "version"}


@dataclass(frozen=True)
class MintPolicy:
    """DOI minting policy: a registrant prefix plus a suffix template.

    The template must use exactly the {collection}, {record}, and {version}
    placeholders so that distinct inputs yield distinct suffixes. That
    injectivity additionally relies on slug values not embedding the
    template's own separator runs; the default dot-separated template is
    unambiguous for dot-free slugs.
    """

    prefix: str = TEST_DOI_PREFIX
    suffix_template: str = DEFAULT_SUFFIX_TEMPLATE

    def __post_init__(self) -> None:
        registrant = self.prefix[3:] if self.prefix.startswith("10.") else ""
        if len(registrant) < 4 or not registrant.isdigit():
            raise TemplateError(f"illegal DOI prefix in policy: {self.prefix!r}")
        seen = set()
        for _, field, _, _ in string.Formatter().parse(self.suffix_template):
            if field is None:
                continue
            if field not in _TEMPLATE_PLACEHOLDERS:
                raise TemplateError(f"unknown placeholder {{{field}}} in template")
            seen.add(field)
        missing = _TEMPLATE_PLACEHOLDERS - seen
        if missing:
            raise TemplateError(f"template must use placeholders: {sorted(missing)}")


def mint_doi(policy: MintPolicy, collection: str, record: str, version: int) -> Doi:
    """Render the policy template into a DOI. Deterministic for equal inputs."""
    if version < 1:
        raise TemplateError(f"version must be >= 1, got {version}")
    if not collection or not record:
        raise TemplateError("collection and record must be non-empty")
    suffix = policy.suffix_template.format(
        collection=collection, record=record, version=version
    )
    if not _is_legal_suffix(suffix):
        raise TemplateError(f"template rendered illegal suffix {suffix!r}")
    return Doi(prefix=policy.prefix, suffix=suffix)
