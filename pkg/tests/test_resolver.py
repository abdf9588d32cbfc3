"""Resolver: failover, atomic repoint, currency status, counters, HTTP API."""

from __future__ import annotations

import datetime
import itertools
import tempfile
import threading

import pytest
import requests
from hypothesis import given, settings
from hypothesis import strategies as st

from fairlex.metatags import Creator, DescriptiveMetadata, ResourceType
from fairlex.pids import Doi, MintPolicy, mint_doi, parse_doi
from fairlex.resolver import (
    ChainView,
    EmptyTargets,
    EntryStatus,
    HealthState,
    Outcome,
    ResolutionEntry,
    ResolverCore,
    UnknownDoi,
    bootstrap_from_store,
    make_server,
    origin_of,
)
from fairlex.store import ChangeKind, DoiDecision, EntityPath, RecordStore

POLICY = MintPolicy()


def make_metadata(doi: Doi, landing: str) -> DescriptiveMetadata:
    return DescriptiveMetadata(
        title="Abbrivo",
        creators=(Creator("Salucci, Giada"),),
        publication_date=datetime.date(2024, 5, 28),
        resource_type=ResourceType.ENTRY,
        identifier=doi,
        landing_url=landing,
        language="it",
        license_url="https://creativecommons.org/licenses/by/4.0/",
        publisher="Accademia Example",
    )


def store_with_chain(root, decisions: list[str]) -> tuple[RecordStore, EntityPath]:
    """decisions: 'keep' or 'new' per post-v1 version."""
    store = RecordStore(root)
    path = EntityPath("viver", "lessico", "abbrivo")
    doi = mint_doi(POLICY, path.collection, path.record, 1)
    landing = "https://viver.example/lessico/abbrivo"
    store.create_record(path, b"v1", make_metadata(doi, landing), doi)
    minted = 1
    for i, decision in enumerate(decisions, start=2):
        if decision == "keep":
            store.publish_version(
                path, f"v{i}".encode(), ChangeKind.CONTENT_UPDATE, DoiDecision.KEEP_EXISTING
            )
        else:
            minted += 1
            store.publish_version(
                path,
                f"v{i}".encode(),
                ChangeKind.SUBSTANTIAL,
                DoiDecision.REGISTER_NEW,
                new_doi=mint_doi(POLICY, path.collection, path.record, minted),
            )
    return store, path


def simple_core() -> ResolverCore:
    core = ResolverCore()
    core.add_entry(
        ResolutionEntry(
            parse_doi("10.5072/current"),
            ("https://primary.example/abbrivo", "https://backup.example/abbrivo"),
            EntryStatus.ACTIVE,
        )
    )
    core.add_entry(
        ResolutionEntry(parse_doi("10.5072/withdrawn"), (), EntryStatus.TOMBSTONE)
    )
    return core


# -- resolve ----------------------------------------------------------------


def test_resolve_prefers_primary_when_healthy():
    core = simple_core()
    resolution = core.resolve("10.5072/current")
    assert resolution.outcome is Outcome.REDIRECT
    assert resolution.url == "https://primary.example/abbrivo"


def test_resolve_fails_over_when_primary_down():
    core = simple_core()
    core.set_health("https://primary.example", HealthState.DOWN)
    assert core.resolve("10.5072/current").url == "https://backup.example/abbrivo"
    core.set_health("https://primary.example", HealthState.HEALTHY)
    assert core.resolve("10.5072/current").url == "https://primary.example/abbrivo"


def test_resolve_all_down_falls_back_to_primary():
    core = simple_core()
    core.set_health("https://primary.example", HealthState.DOWN)
    core.set_health("https://backup.example", HealthState.DOWN)
    assert core.resolve("10.5072/current").url == "https://primary.example/abbrivo"


def test_resolve_tombstone_and_unknown():
    core = simple_core()
    assert core.resolve("10.5072/withdrawn").outcome is Outcome.GONE
    assert core.resolve("10.5072/nessuno").outcome is Outcome.NOT_FOUND
    assert core.resolve("not a doi at all").outcome is Outcome.NOT_FOUND


def test_resolve_suffix_case_insensitive():
    core = ResolverCore()
    core.add_entry(
        ResolutionEntry(
            parse_doi("10.5072/MiXeD.Case"), ("https://t.example/x",), EntryStatus.ACTIVE
        )
    )
    assert core.resolve("10.5072/mixed.case").outcome is Outcome.REDIRECT
    assert core.resolve("10.5072/MIXED.CASE").outcome is Outcome.REDIRECT
    assert core.resolve("https://doi.org/10.5072/MiXeD.CaSe").outcome is Outcome.REDIRECT


def test_failover_exhaustive_over_health_configurations():
    targets = (
        "https://one.example/a",
        "https://two.example/a",
        "https://three.example/a",
    )
    for config in itertools.product([HealthState.HEALTHY, HealthState.DOWN], repeat=3):
        core = ResolverCore()
        core.add_entry(
            ResolutionEntry(parse_doi("10.5072/x"), targets, EntryStatus.ACTIVE)
        )
        for target, state in zip(targets, config):
            core.set_health(origin_of(target), state)
        healthy = [t for t, s in zip(targets, config) if s is HealthState.HEALTHY]
        expected = healthy[0] if healthy else targets[0]
        assert core.resolve("10.5072/x").url == expected, config


# -- repoint ------------------------------------------------------------------


def test_repoint_changes_preference():
    core = simple_core()
    updated = core.repoint(
        "10.5072/current",
        ["https://backup.example/abbrivo", "https://primary.example/abbrivo"],
    )
    assert updated.targets[0] == "https://backup.example/abbrivo"
    assert core.resolve("10.5072/current").url == "https://backup.example/abbrivo"


def test_repoint_errors():
    core = simple_core()
    with pytest.raises(EmptyTargets):
        core.repoint("10.5072/current", [])
    with pytest.raises(UnknownDoi):
        core.repoint("10.5072/nessuno", ["https://x.example/"])


def test_repoint_is_atomic_under_concurrent_resolution():
    list_a = ("https://off.example/a", "https://alpha.example/entry")
    list_b = ("https://off.example/b", "https://beta.example/entry")
    core = ResolverCore()
    core.add_entry(ResolutionEntry(parse_doi("10.5072/x"), list_a, EntryStatus.ACTIVE))
    core.set_health("https://off.example", HealthState.DOWN)

    stop = threading.Event()
    seen_urls: set[str] = set()
    seen_tuples: set[tuple[str, ...]] = set()
    errors: list[str] = []

    def reader() -> None:
        while not stop.is_set():
            url = core.resolve("10.5072/x").url
            targets = core.entry("10.5072/x").targets
            seen_urls.add(url)
            seen_tuples.add(targets)
            if targets not in (list_a, list_b):
                errors.append(f"mixed target list observed: {targets}")
                return

    def writer() -> None:
        for i in range(400):
            core.repoint("10.5072/x", list_b if i % 2 == 0 else list_a)
        stop.set()

    readers = [threading.Thread(target=reader) for _ in range(4)]
    for t in readers:
        t.start()
    writer_thread = threading.Thread(target=writer)
    writer_thread.start()
    writer_thread.join()
    for t in readers:
        t.join()
    assert errors == []
    assert seen_tuples <= {list_a, list_b}
    # the second element wins because the first origin is down; never a
    # URL from the deliberately-down origin, never a torn list
    assert seen_urls <= {"https://alpha.example/entry", "https://beta.example/entry"}


# -- version currency -----------------------------------------------------------


def test_version_status_single_version(tmp_path):
    store, _ = store_with_chain(tmp_path, [])
    core = bootstrap_from_store(store)
    status = core.version_status("10.5072/viver.lessico.abbrivo.v1")
    assert status.is_current
    assert str(status.latest_doi) == "10.5072/viver.lessico.abbrivo.v1"
    assert len(status.chain) == 1


def test_version_status_superseded_doi(tmp_path):
    store, _ = store_with_chain(tmp_path, ["new"])
    core = bootstrap_from_store(store)
    old = core.version_status("10.5072/viver.lessico.abbrivo.v1")
    new = core.version_status("10.5072/viver.lessico.abbrivo.v2")
    assert not old.is_current
    assert str(old.latest_doi) == "10.5072/viver.lessico.abbrivo.v2"
    assert new.is_current
    assert [n for _, n, _ in new.chain] == [1, 2]
    # the superseded DOI still resolves, to its archived version page
    assert core.resolve("10.5072/viver.lessico.abbrivo.v1").url == (
        "https://viver.example/lessico/abbrivo/v1"
    )
    assert core.resolve("10.5072/viver.lessico.abbrivo.v2").url == (
        "https://viver.example/lessico/abbrivo"
    )


def test_version_status_unknown(tmp_path):
    store, _ = store_with_chain(tmp_path, [])
    core = bootstrap_from_store(store)
    with pytest.raises(UnknownDoi):
        core.version_status("10.5072/nessuno")


@settings(max_examples=40)
@given(decisions=st.lists(st.sampled_from(["keep", "new"]), min_size=0, max_size=9))
def test_version_status_agrees_with_history_walk(decisions):
    with tempfile.TemporaryDirectory() as tmp:
        store, path = store_with_chain(tmp, decisions)
        core = bootstrap_from_store(store)
        history = store.history(path)
        latest_doi = history[-1].doi
        for doi in {v.doi for v in history}:
            status = core.version_status(str(doi))
            assert status.is_current == (doi == latest_doi)
            assert status.latest_doi == latest_doi
            assert [(d, n) for d, n, _ in status.chain] == [
                (v.doi, v.version_number) for v in history
            ]
        assert core.version_status(str(latest_doi)).is_current


# -- counters ---------------------------------------------------------------------


def test_counters_count_what_they_say(tmp_path):
    store, _ = store_with_chain(tmp_path, ["new"])
    core = bootstrap_from_store(store)
    v1 = "10.5072/viver.lessico.abbrivo.v1"
    v2 = "10.5072/viver.lessico.abbrivo.v2"
    assert core.stats(v1) == core.stats(v2)
    assert core.stats(v1).resolutions == 0 and core.stats(v1).status_queries == 0
    for _ in range(5):
        core.resolve(v1)
    for _ in range(3):
        core.resolve(v2)
    core.version_status(v2)
    assert core.stats(v1).resolutions == 5
    assert core.stats(v2).resolutions == 3
    assert core.stats(v2).status_queries == 1
    totals = core.stats_all()["total"]
    assert totals.resolutions == 8
    assert totals.status_queries == 1


def test_stats_unknown_doi():
    with pytest.raises(UnknownDoi):
        simple_core().stats("10.5072/nessuno")


def test_gone_resolutions_are_counted():
    core = simple_core()
    core.resolve("10.5072/withdrawn")
    core.resolve("10.5072/withdrawn")
    assert core.stats("10.5072/withdrawn").resolutions == 2


def test_counters_persist_across_restart(tmp_path):
    journal = tmp_path / "counters.json"
    store, _ = store_with_chain(tmp_path / "store", ["keep"])
    core = bootstrap_from_store(store)
    doi = "10.5072/viver.lessico.abbrivo.v1"
    for _ in range(7):
        core.resolve(doi)
    core.version_status(doi)
    core.flush_counters(journal)

    reborn = bootstrap_from_store(store)
    reborn.load_counters(journal)
    assert reborn.stats(doi).resolutions == 7
    assert reborn.stats(doi).status_queries == 1
    # merging the same journal again never decreases anything
    reborn.resolve(doi)
    reborn.load_counters(journal)
    assert reborn.stats(doi).resolutions == 8


# -- HTTP front end ----------------------------------------------------------------


@pytest.fixture()
def http_resolver(tmp_path):
    store, _ = store_with_chain(tmp_path, ["new"])
    core = bootstrap_from_store(store)
    core.add_entry(
        ResolutionEntry(parse_doi("10.5072/withdrawn"), (), EntryStatus.TOMBSTONE)
    )
    server = make_server(core, "127.0.0.1:0")
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    host, port = server.server_address[:2]
    try:
        yield f"http://{host}:{port}", core
    finally:
        server.shutdown()
        thread.join()


def test_http_resolve_redirects(http_resolver):
    base, _ = http_resolver
    response = requests.get(
        f"{base}/10.5072/viver.lessico.abbrivo.v2", allow_redirects=False, timeout=5
    )
    assert response.status_code == 302
    assert response.headers["Location"] == "https://viver.example/lessico/abbrivo"


def test_http_resolve_gone_and_unknown(http_resolver):
    base, _ = http_resolver
    assert requests.get(f"{base}/10.5072/withdrawn", timeout=5).status_code == 410
    assert requests.get(f"{base}/10.5072/nessuno", timeout=5).status_code == 404
    assert requests.get(f"{base}/api/unknown-endpoint", timeout=5).status_code == 404


def test_http_status_endpoint(http_resolver):
    base, _ = http_resolver
    response = requests.get(
        f"{base}/api/status/10.5072/viver.lessico.abbrivo.v1", timeout=5
    )
    assert response.status_code == 200
    doc = response.json()
    assert doc["is_current"] is False
    assert doc["latest_doi"] == "10.5072/viver.lessico.abbrivo.v2"
    assert [item["version_number"] for item in doc["chain"]] == [1, 2]
    missing = requests.get(f"{base}/api/status/10.5072/nessuno", timeout=5)
    assert missing.status_code == 404


def test_http_repoint_and_health(http_resolver):
    base, _ = http_resolver
    doi = "10.5072/viver.lessico.abbrivo.v2"
    response = requests.post(
        f"{base}/api/repoint/{doi}",
        json={"targets": ["https://mirror.example/abbrivo", "https://viver.example/lessico/abbrivo"]},
        timeout=5,
    )
    assert response.status_code == 200
    located = requests.get(f"{base}/{doi}", allow_redirects=False, timeout=5)
    assert located.headers["Location"] == "https://mirror.example/abbrivo"

    health = requests.post(
        f"{base}/api/health",
        json={"origin": "https://mirror.example", "state": "down"},
        timeout=5,
    )
    assert health.status_code == 200
    failed_over = requests.get(f"{base}/{doi}", allow_redirects=False, timeout=5)
    assert failed_over.headers["Location"] == "https://viver.example/lessico/abbrivo"


def test_http_repoint_validation(http_resolver):
    base, _ = http_resolver
    doi = "10.5072/viver.lessico.abbrivo.v2"
    assert (
        requests.post(f"{base}/api/repoint/{doi}", json={"targets": []}, timeout=5)
    ).status_code == 400
    assert (
        requests.post(f"{base}/api/repoint/{doi}", json={"bogus": 1}, timeout=5)
    ).status_code == 400
    assert (
        requests.post(
            f"{base}/api/repoint/10.5072/nessuno",
            json={"targets": ["https://x.example/"]},
            timeout=5,
        )
    ).status_code == 404
    assert (
        requests.post(
            f"{base}/api/health", json={"origin": "https://x.example", "state": "meh"},
            timeout=5,
        )
    ).status_code == 400


def test_http_stats_endpoints(http_resolver):
    base, _ = http_resolver
    doi = "10.5072/viver.lessico.abbrivo.v2"
    for _ in range(3):
        requests.get(f"{base}/{doi}", allow_redirects=False, timeout=5)
    single = requests.get(f"{base}/api/stats/{doi}", timeout=5).json()
    assert single["resolutions"] == 3
    everything = requests.get(f"{base}/api/stats", timeout=5).json()
    assert everything["per_doi"][doi]["resolutions"] == 3
    assert everything["total"]["resolutions"] == sum(
        row["resolutions"] for row in everything["per_doi"].values()
    )
    assert requests.get(f"{base}/api/stats/10.5072/nessuno", timeout=5).status_code == 404


def test_http_admin_token_guards_posts(http_resolver, monkeypatch):
    base, _ = http_resolver
    monkeypatch.setenv("FAIRLEX_ADMIN_TOKEN", "segreto")
    doi = "10.5072/viver.lessico.abbrivo.v2"
    body = {"targets": ["https://mirror.example/abbrivo"]}
    bare = requests.post(f"{base}/api/repoint/{doi}", json=body, timeout=5)
    assert bare.status_code == 401
    wrong = requests.post(
        f"{base}/api/repoint/{doi}",
        json=body,
        headers={"Authorization": "Bearer sbagliato"},
        timeout=5,
    )
    assert wrong.status_code == 401
    right = requests.post(
        f"{base}/api/repoint/{doi}",
        json=body,
        headers={"Authorization": "Bearer segreto"},
        timeout=5,
    )
    assert right.status_code == 200
    # reads stay open
    assert requests.get(f"{base}/{doi}", allow_redirects=False, timeout=5).status_code == 302
