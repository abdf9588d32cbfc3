"""DOI resolution service: failover targets, repointing, currency, counters.

The core keeps an immutable ResolutionEntry per DOI. Repointing swaps the
whole entry under a lock, so concurrent resolvers observe either the old
target list or the new one, never a mixture. Health is operator-declared
per URL origin; resolution picks the first target whose origin is not
marked down, falling back to the primary target when everything is down.

An HTTP front end (stdlib ThreadingHTTPServer) exposes:

    GET  /{doi}              302 redirect | 410 gone | 404 unknown
    GET  /api/status/{doi}   currency + version chain JSON
    GET  /api/stats[/{doi}]  access counters
    POST /api/repoint/{doi}  {"targets": [...]}
    POST /api/health         {"origin": ..., "state": "healthy"|"down"}

POST endpoints require `Authorization: Bearer $FAIRLEX_ADMIN_TOKEN` when
that environment variable is set.
"""

from __future__ import annotations

import dataclasses
import datetime
import enum
import json
import os
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Iterable
from urllib.parse import unquote, urlsplit

from .errors import FairlexError
from .pids import Doi, parse_doi
from .store import RecordStore

__all__ = [
    "ENV_ADMIN_TOKEN",
    "ChainView",
    "CounterSnapshot",
    "EmptyTargets",
    "EntryStatus",
    "HealthState",
    "Outcome",
    "Resolution",
    "ResolutionEntry",
    "ResolverCore",
    "UnknownDoi",
    "VersionStatus",
    "bootstrap_from_store",
    "make_server",
    "origin_of",
]

ENV_ADMIN_TOKEN = "FAIRLEX_ADMIN_TOKEN"


class UnknownDoi(FairlexError):
    """The resolver has no entry for this DOI."""


class EmptyTargets(FairlexError):
    """A repoint needs at least one target URL."""


class EntryStatus(enum.Enum):
    ACTIVE = "active"
    SUPERSEDED = "superseded"
    TOMBSTONE = "tombstone"


class HealthState(enum.Enum):
    HEALTHY = "healthy"
    DOWN = "down"


class Outcome(enum.Enum):
    REDIRECT = "redirect"
    GONE = "gone"
    NOT_FOUND = "not_found"


@dataclass(frozen=True)
class ResolutionEntry:
    doi: Doi
    targets: tuple[str, ...]
    status: EntryStatus
    superseded_by: Doi | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "targets", tuple(self.targets))
        if self.status is not EntryStatus.TOMBSTONE and not self.targets:
            raise EmptyTargets(f"{self.doi}: non-tombstone entries need a target")
        if self.status is EntryStatus.SUPERSEDED and self.superseded_by is None:
            raise ValueError(f"{self.doi}: superseded entries must name a successor")


@dataclass(frozen=True)
class ChainView:
    """Oldest-first (doi, version_number, date) triples for one record."""

    record: str
    items: tuple[tuple[Doi, int, datetime.date], ...]

    @property
    def latest_doi(self) -> Doi:
        return self.items[-1][0]


@dataclass(frozen=True)
class Resolution:
    outcome: Outcome
    url: str | None = None


@dataclass(frozen=True)
class VersionStatus:
    doi: Doi
    is_current: bool
    latest_doi: Doi
    chain: tuple[tuple[Doi, int, datetime.date], ...]

    def to_json_dict(self) -> dict:
        return {
            "doi": str(self.doi),
            "is_current": self.is_current,
            "latest_doi": str(self.latest_doi),
            "chain": [
                {"doi": str(doi), "version_number": n, "date": date.isoformat()}
                for doi, n, date in self.chain
            ],
        }


@dataclass(frozen=True)
class CounterSnapshot:
    resolutions: int
    status_queries: int


def origin_of(url: str) -> str:
    parts = urlsplit(url)
    return f"{parts.scheme}://{parts.netloc}"


class ResolverCore:
    """Thread-safe resolution table with per-DOI access counters."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._entries: dict[str, ResolutionEntry] = {}
        self._chains: dict[str, ChainView] = {}
        self._health: dict[str, HealthState] = {}
        self._counters: dict[str, list[int]] = {}

    # -- table maintenance --------------------------------------------------

    def add_entry(self, entry: ResolutionEntry, chain: ChainView | None = None) -> None:
        key = str(entry.doi)
        with self._lock:
            self._entries[key] = entry
            self._counters.setdefault(key, [0, 0])
            if chain is not None:
                self._chains[key] = chain

    def entry(self, doi: Doi | str) -> ResolutionEntry:
        key = str(doi) if isinstance(doi, Doi) else str(parse_doi(doi))
        entry = self._entries.get(key)
        if entry is None:
            raise UnknownDoi(key)
        return entry

    def dois(self) -> list[str]:
        with self._lock:
            return sorted(self._entries)

    def set_health(self, origin: str, state: HealthState) -> None:
        with self._lock:
            self._health[origin] = state

    def health_of(self, origin: str) -> HealthState:
        return self._health.get(origin, HealthState.HEALTHY)

    # -- operations -----------------------------------------------------------

    def resolve(self, raw_doi: str) -> Resolution:
        try:
            key = str(parse_doi(raw_doi))
        except FairlexError:
            return Resolution(Outcome.NOT_FOUND)
        entry = self._entries.get(key)
        if entry is None:
            return Resolution(Outcome.NOT_FOUND)
        with self._lock:
            self._counters.setdefault(key, [0, 0])[0] += 1
            health = dict(self._health)
        if entry.status is EntryStatus.TOMBSTONE:
            return Resolution(Outcome.GONE)
        for target in entry.targets:
            if health.get(origin_of(target), HealthState.HEALTHY) is HealthState.HEALTHY:
                return Resolution(Outcome.REDIRECT, target)
        return Resolution(Outcome.REDIRECT, entry.targets[0])  # all down: primary

    def repoint(self, raw_doi: str, new_targets: Iterable[str]) -> ResolutionEntry:
        targets = tuple(new_targets)
        if not targets:
            raise EmptyTargets("repoint needs at least one target URL")
        key = str(parse_doi(raw_doi))
        with self._lock:
            entry = self._entries.get(key)
            if entry is None:
                raise UnknownDoi(key)
            updated = dataclasses.replace(entry, targets=targets)
            self._entries[key] = updated
            return updated

    def version_status(self, raw_doi: str) -> VersionStatus:
        key = str(parse_doi(raw_doi))
        with self._lock:
            entry = self._entries.get(key)
            chain = self._chains.get(key)
            if entry is None or chain is None:
                raise UnknownDoi(key)
            self._counters.setdefault(key, [0, 0])[1] += 1
        return VersionStatus(
            doi=entry.doi,
            is_current=entry.status is not EntryStatus.SUPERSEDED,
            latest_doi=chain.latest_doi,
            chain=chain.items,
        )

    def stats(self, raw_doi: str) -> CounterSnapshot:
        key = str(parse_doi(raw_doi))
        with self._lock:
            if key not in self._entries:
                raise UnknownDoi(key)
            resolutions, status_queries = self._counters.get(key, [0, 0])
        return CounterSnapshot(resolutions, status_queries)

    def stats_all(self) -> dict:
        with self._lock:
            per_doi = {
                key: CounterSnapshot(*self._counters.get(key, [0, 0]))
                for key in self._entries
            }
        return {
            "total": CounterSnapshot(
                sum(s.resolutions for s in per_doi.values()),
                sum(s.status_queries for s in per_doi.values()),
            ),
            "per_doi": per_doi,
        }

    # -- counter persistence ----------------------------------------------------

    def flush_counters(self, path: str | Path) -> None:
        """Write a counter journal; merged monotonically on load."""
        with self._lock:
            doc = {
                key: {"resolutions": pair[0], "status_queries": pair[1]}
                for key, pair in sorted(self._counters.items())
            }
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        tmp = target.with_name(target.name + ".tmp")
        tmp.write_text(json.dumps(doc, sort_keys=True, indent=2), encoding="utf-8")
        os.replace(tmp, target)

    def load_counters(self, path: str | Path) -> None:
        """Merge a journal, never letting any counter decrease."""
        journal = Path(path)
        if not journal.is_file():
            return
        doc = json.loads(journal.read_text(encoding="utf-8"))
        with self._lock:
            for key, pair in doc.items():
                mine = self._counters.setdefault(key, [0, 0])
                mine[0] = max(mine[0], int(pair.get("resolutions", 0)))
                mine[1] = max(mine[1], int(pair.get("status_queries", 0)))


def bootstrap_from_store(store: RecordStore) -> ResolverCore:
    """Build the resolution table from every record's version chain.

    The current DOI points at the record's landing URL; a superseded DOI
    points at the landing URL of its newest version (`.../v{n}`) and names
    its successor.
    """
    core = ResolverCore()
    for path in store.records():
        history = store.history(path)
        landing = store.load_metadata(path).landing_url.rstrip("/")
        current = history[-1]
        chain = ChainView(
            record=str(path),
            items=tuple((v.doi, v.version_number, v.published_at.date()) for v in history),
        )
        newest_with: dict[str, int] = {}
        for version in history:
            newest_with[str(version.doi)] = version.version_number
        for doi_key, newest in newest_with.items():
            doi = parse_doi(doi_key)
            if doi == current.doi:
                entry = ResolutionEntry(doi, (landing,), EntryStatus.ACTIVE)
            else:
                entry = ResolutionEntry(
                    doi,
                    (f"{landing}/v{newest}",),
                    EntryStatus.SUPERSEDED,
                    superseded_by=current.doi,
                )
            core.add_entry(entry, chain)
    return core


# -- HTTP front end -------------------------------------------------------------


class _Handler(BaseHTTPRequestHandler):
    server: "ResolverServer"

    # -- plumbing ---------------------------------------------------------

    def log_message(self, format: str, *args) -> None:  # noqa: A002 (stdlib signature)
        pass

    def _send_json(self, status: int, payload: dict) -> None:
        body = json.dumps(payload, sort_keys=True).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _authorized(self) -> bool:
        token = os.environ.get(ENV_ADMIN_TOKEN)
        if not token:
            return True
        return self.headers.get("Authorization") == f"Bearer {token}"

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length) if length else b"{}"
        try:
            doc = json.loads(raw)
        except ValueError:
            raise FairlexError("request body is not JSON") from None
        if not isinstance(doc, dict):
            raise FairlexError("request body must be a JSON object")
        return doc

    # -- routes -------------------------------------------------------------

    def do_GET(self) -> None:  # noqa: N802 (stdlib naming)
        core = self.server.core
        path = unquote(self.path.split("?", 1)[0])
        if path.startswith("/api/status/"):
            self._handle_status(core, path[len("/api/status/"):])
        elif path == "/api/stats":
            snapshot = core.stats_all()
            self._send_json(
                200,
                {
                    "total": dataclasses.asdict(snapshot["total"]),
                    "per_doi": {
                        key: dataclasses.asdict(counters)
                        for key, counters in snapshot["per_doi"].items()
                    },
                },
            )
        elif path.startswith("/api/stats/"):
            self._handle_stats(core, path[len("/api/stats/"):])
        elif path.startswith("/api/"):
            self._send_json(404, {"error": "no such endpoint"})
        else:
            self._handle_resolve(core, path.lstrip("/"))

    def do_POST(self) -> None:  # noqa: N802 (stdlib naming)
        if not self._authorized():
            self._send_json(401, {"error": "missing or wrong bearer token"})
            return
        core = self.server.core
        path = unquote(self.path.split("?", 1)[0])
        try:
            if path.startswith("/api/repoint/"):
                doc = self._read_body()
                targets = doc.get("targets")
                if not isinstance(targets, list) or not all(
                    isinstance(t, str) for t in targets
                ):
                    self._send_json(400, {"error": "body needs a targets[] list"})
                    return
                entry = core.repoint(path[len("/api/repoint/"):], targets)
                self._send_json(
                    200, {"doi": str(entry.doi), "targets": list(entry.targets)}
                )
            elif path == "/api/health":
                doc = self._read_body()
                try:
                    state = HealthState(doc.get("state", ""))
                except ValueError:
                    self._send_json(400, {"error": "state must be healthy or down"})
                    return
                origin = doc.get("origin")
                if not isinstance(origin, str) or not origin:
                    self._send_json(400, {"error": "body needs an origin"})
                    return
                core.set_health(origin, state)
                self._send_json(200, {"origin": origin, "state": state.value})
            else:
                self._send_json(404, {"error": "no such endpoint"})
        except UnknownDoi as exc:
            self._send_json(404, {"error": f"UnknownDoi: {exc}"})
        except EmptyTargets as exc:
            self._send_json(400, {"error": f"EmptyTargets: {exc}"})
        except FairlexError as exc:
            self._send_json(400, {"error": f"{type(exc).__name__}: {exc}"})

    # -- GET helpers ----------------------------------------------------------

    def _handle_resolve(self, core: ResolverCore, raw_doi: str) -> None:
        resolution = core.resolve(raw_doi)
        if resolution.outcome is Outcome.REDIRECT:
            self.send_response(302)
            self.send_header("Location", resolution.url)
            self.send_header("Content-Length", "0")
            self.end_headers()
        elif resolution.outcome is Outcome.GONE:
            self._send_json(410, {"error": "gone", "doi": raw_doi})
        else:
            self._send_json(404, {"error": "unknown DOI", "doi": raw_doi})

    def _handle_status(self, core: ResolverCore, raw_doi: str) -> None:
        try:
            self._send_json(200, core.version_status(raw_doi).to_json_dict())
        except FairlexError:
            self._send_json(404, {"error": "unknown DOI", "doi": raw_doi})

    def _handle_stats(self, core: ResolverCore, raw_doi: str) -> None:
        try:
            self._send_json(200, dataclasses.asdict(core.stats(raw_doi)))
        except FairlexError:
            self._send_json(404, {"error": "unknown DOI", "doi": raw_doi})


class ResolverServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address: tuple[str, int], core: ResolverCore):
        super().__init__(address, _Handler)
        self.core = core


def make_server(core: ResolverCore, listen: str = "127.0.0.1:0") -> ResolverServer:
    """listen is host:port; port 0 picks a free one (see server_address)."""
    host, _, port = listen.rpartition(":")
    return ResolverServer((host or "127.0.0.1", int(port)), core)
