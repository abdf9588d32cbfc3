"""Runtime configuration: defaults, fairlex.toml, and per-flag overrides.

Precedence is flags > config file > built-in defaults. Paths in the file
are resolved relative to the file's own directory; paths given as flags
are resolved relative to the working directory.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import tomli

from .bundles import LocalDirBackend
from .errors import FairlexError
from .metatags import Creator, DescriptiveMetadata, ResourceType
from .pids import DEFAULT_SUFFIX_TEMPLATE, MintPolicy, parse_doi

__all__ = ["BadConfig", "Config", "ReplicaTarget", "load_config", "DEFAULT_CONFIG_NAME"]

DEFAULT_CONFIG_NAME = "fairlex.toml"


class BadConfig(FairlexError):
    """The configuration file is unreadable or holds an illegal value."""


@dataclass(frozen=True)
class ReplicaTarget:
    """One replication destination: a named directory-backed backend."""

    name: str
    directory: Path


@dataclass(frozen=True)
class Config:
    # storage layout
    store_root: Path = Path("store")
    editions_dir: Path = Path("editions")
    index_dir: Path = Path("index")
    deposits_dir: Path = Path("deposits")
    bundles_dir: Path = Path("bundles")
    counters_file: Path = Path("resolver-counters.json")
    # identifier minting
    doi_prefix: str = "10.5072"
    doi_suffix_template: str = DEFAULT_SUFFIX_TEMPLATE
    # registrar
    registrar_url: str = ""
    depositor_name: str = "fairlex deposit agent"
    depositor_email: str = "deposits@viver.example"
    registrant: str = "Accademia Example"
    crossmark_policy_doi: str = "10.5072/viver.crossmark-policy"
    # the database-level description used for deposits
    db_title: str = "Versioned lexicographic archive"
    db_doi: str = "10.5072/viver.archive"
    db_landing_url: str = "https://viver.example/archive"
    publisher: str = "Accademia Example"
    language: str = "it"
    license_url: str = "https://creativecommons.org/licenses/by/4.0/"
    # preservation
    replicas: tuple[ReplicaTarget, ...] = (
        ReplicaTarget("local-a", Path("replicas/local-a")),
        ReplicaTarget("local-b", Path("replicas/local-b")),
    )
    # resolver
    listen: str = "127.0.0.1:8750"
    # corpus
    context_window: int = 10

    def __post_init__(self) -> None:
        for name in (
            "store_root",
            "editions_dir",
            "index_dir",
            "deposits_dir",
            "bundles_dir",
            "counters_file",
        ):
            object.__setattr__(self, name, Path(getattr(self, name)))
        object.__setattr__(
            self,
            "replicas",
            tuple(ReplicaTarget(r.name, Path(r.directory)) for r in self.replicas),
        )
        if self.context_window < 0:
            raise BadConfig(f"context_window must be >= 0, got {self.context_window}")
        seen = set()
        for replica in self.replicas:
            if replica.name in seen:
                raise BadConfig(f"duplicate replica name: {replica.name!r}")
            seen.add(replica.name)

    def mint_policy(self) -> MintPolicy:
        return MintPolicy(prefix=self.doi_prefix, suffix_template=self.doi_suffix_template)

    def backends(self) -> list[LocalDirBackend]:
        return [LocalDirBackend(r.name, r.directory) for r in self.replicas]

    def database_metadata(self) -> DescriptiveMetadata:
        import datetime

        return DescriptiveMetadata(
            title=self.db_title,
            creators=(Creator(self.publisher),),
            publication_date=datetime.date.today(),
            resource_type=ResourceType.DATASET,
            identifier=parse_doi(self.db_doi),
            landing_url=self.db_landing_url,
            language=self.language,
            license_url=self.license_url,
            publisher=self.publisher,
        )


_FLAT_KEYS = {
    "store_root",
    "editions_dir",
    "index_dir",
    "deposits_dir",
    "bundles_dir",
    "counters_file",
    "doi_prefix",
    "doi_suffix_template",
    "listen",
    "context_window",
}
_REGISTRAR_KEYS = {
    "url": "registrar_url",
    "depositor_name": "depositor_name",
    "depositor_email": "depositor_email",
    "registrant": "registrant",
    "crossmark_policy_doi": "crossmark_policy_doi",
}
_DATABASE_KEYS = {
    "title": "db_title",
    "doi": "db_doi",
    "landing_url": "db_landing_url",
    "publisher": "publisher",
    "language": "language",
    "license_url": "license_url",
}
_PATH_FIELDS = {
    "store_root",
    "editions_dir",
    "index_dir",
    "deposits_dir",
    "bundles_dir",
    "counters_file",
}


def _file_values(path: Path) -> dict:
    try:
        with open(path, "rb") as fh:
            doc = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise BadConfig(f"{path}: {exc}") from None
    base = path.parent
    values: dict = {}
    for key, value in doc.items():
        if key in _FLAT_KEYS:
            values[key] = base / value if key in _PATH_FIELDS else value
        elif key == "registrar":
            for sub, target in _REGISTRAR_KEYS.items():
                if sub in value:
                    values[target] = value[sub]
        elif key == "database":
            for sub, target in _DATABASE_KEYS.items():
                if sub in value:
                    values[target] = value[sub]
        elif key == "replica":
            replicas = []
            for entry in value:
                try:
                    replicas.append(ReplicaTarget(entry["name"], base / entry["directory"]))
                except (KeyError, TypeError):
                    raise BadConfig(
                        f"{path}: each [[replica]] needs 'name' and 'directory'"
                    ) from None
            values["replicas"] = tuple(replicas)
        else:
            raise BadConfig(f"{path}: unknown configuration key {key!r}")
    return values


def load_config(
    config_file: str | Path | None = None, overrides: dict | None = None
) -> Config:
    """Assemble the effective configuration.

    With config_file=None, ./fairlex.toml is used when present. overrides
    (flag values, None entries ignored) win over the file.
    """
    values: dict = {}
    path = Path(config_file) if config_file is not None else Path(DEFAULT_CONFIG_NAME)
    if config_file is not None and not path.is_file():
        raise BadConfig(f"config file not found: {path}")
    if path.is_file():
        values.update(_file_values(path))
    known = {f.name for f in fields(Config)}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in known:
            raise BadConfig(f"unknown configuration override {key!r}")
        values[key] = value
    try:
        return Config(**values)
    except (TypeError, ValueError) as exc:
        raise BadConfig(str(exc)) from None
