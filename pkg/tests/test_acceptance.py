"""Acceptance gate: one check per shipped guarantee, one printed line each.

Every test prints `criterion N: PASS/FAIL — summary (elapsed)` so the whole
gate can be read at a glance from the pytest output. Stated time budgets
are enforced, not just reported.
"""

from __future__ import annotations

import contextlib
import datetime
import http.client
import json
import random
import subprocess
import sys
import threading
import time
from html.parser import HTMLParser
from pathlib import Path

import pytest
from hypothesis import given, settings

from fairlex.bundles import (
    BackendHealth,
    BackendKind,
    MockBackend,
    EntryState,
    create_bundle,
    replicate,
    restore,
    verify_bundle,
)
from fairlex.deposit import (
    MockRegistrarClient,
    Registrar,
    RetryPolicy,
    UpdateType,
    build_crossmark,
    parse_deposit,
    serialize_deposit,
)
from fairlex.errors import FairlexError
from fairlex.metatags import (
    Creator,
    DescriptiveMetadata,
    ResourceType,
    emit_all_profiles,
    emit_html_head,
)
from fairlex.pids import (
    MintPolicy,
    PidScheme,
    iso7064_mod11_2_check,
    mint_doi,
    parse_doi,
    validate,
)
from fairlex.resolver import (
    EntryStatus,
    HealthState,
    Outcome,
    ResolutionEntry,
    ResolverCore,
    bootstrap_from_store,
    make_server,
    origin_of,
)
from fairlex.store import (
    ChangeKind,
    DoiDecision,
    EntityPath,
    IllegalDecision,
    RecordStore,
)
from fairlex.tei import Edition, Token, attest, corpus_hash, index_corpus, parse_tei

from test_bundles import FORMATS, make_metadata as bundle_metadata, make_version
from test_deposit import build_sample, deposit_documents

FIXTURES = Path(__file__).parent / "fixtures"
FIXTURE_FILES = sorted(FIXTURES.glob("*.xml"))
POLICY = MintPolicy()
POLICY_DOI = parse_doi("10.5072/viver.crossmark-policy")
SEED = 20260817


@contextlib.contextmanager
def criterion(capsys, number: int, summary: str, budget: float | None = None):
    start = time.perf_counter()
    failed = False
    try:
        yield
    except BaseException:
        failed = True
        raise
    finally:
        elapsed = time.perf_counter() - start
        ok = not failed and (budget is None or elapsed <= budget)
        with capsys.disabled():
            print(f"criterion {number}: {'PASS' if ok else 'FAIL'} — {summary} ({elapsed:.2f}s)")
    if budget is not None:
        assert elapsed <= budget, f"criterion {number}: {elapsed:.2f}s over the {budget}s budget"


# -- criterion 1: identifier checksums ------------------------------------------------

AUTHOR_ORCIDS = ["0009-0008-0569-3703", "0000-0002-9587-1620"]
EDITION_ISBNS = ["978-3-8376-5419-6", "978-3-8394-5419-0"]


def _assert_all_mutations_rejected(scheme: PidScheme, compact: str, alphabet_for) -> int:
    rejected = 0
    for position, original in enumerate(compact):
        for replacement in alphabet_for(position):
            if replacement == original:
                continue
            mutant = compact[:position] + replacement + compact[position + 1 :]
            with pytest.raises(FairlexError):
                validate(scheme, mutant)
            rejected += 1
    return rejected


def test_criterion_1(capsys):
    with criterion(
        capsys, 1,
        "author ORCIDs and edition ISBNs validate; every single-digit mutation rejected",
        budget=1.0,
    ):
        total = 0
        for raw in AUTHOR_ORCIDS:
            compact = validate(PidScheme.ORCID, raw).normalized
            assert len(compact) == 16
            total += _assert_all_mutations_rejected(
                PidScheme.ORCID, compact,
                lambda pos: "0123456789X" if pos == 15 else "0123456789",
            )
        for raw in EDITION_ISBNS:
            compact = validate(PidScheme.ISBN13, raw).normalized
            assert len(compact) == 13
            total += _assert_all_mutations_rejected(
                PidScheme.ISBN13, compact, lambda pos: "0123456789"
            )
        assert total == 2 * (15 * 9 + 10) + 2 * (13 * 9)


# -- criterion 2: reference DOIs ---------------------------------------------------------

REFERENCE_DOIS = [
    "10.6093/978-88-6887-355-4",
    "10.31274/jlsc.16288",
    "10.2826/943044",
    "10.1515/opis-2022-0142",
    "10.2481/dsj.4.12",
    "10.35948/DILEF/2023.4307",
    "10.35948/DILEF/2024.4327",
    "10.14361/9783839454190",
    "10.1038/sdata.2016.18",
]


def test_criterion_2(capsys):
    with criterion(capsys, 2, "reference DOIs parse; suffix case-insensitive round-trip"):
        assert len(REFERENCE_DOIS) >= 6
        for raw in REFERENCE_DOIS:
            doi = parse_doi(raw)
            assert doi.suffix == raw.split("/", 1)[1].lower()
            assert parse_doi(raw.upper()) == doi == parse_doi(raw.lower())
            assert parse_doi(str(doi)) == doi


# -- criteria 3 and 7 share one generated store --------------------------------------------

_world: dict = {}


def thousand_chains(tmp_path_factory) -> tuple[RecordStore, list]:
    """1,000 random version chains, built once and shared across criteria."""
    if "store" in _world:
        return _world["store"], _world["chains"]
    rng = random.Random(SEED)
    root = tmp_path_factory.mktemp("acceptance-chains")
    store = RecordStore(root)
    chains = []
    for i in range(1000):
        record = f"rec-{i:04d}"
        path = EntityPath("viver", "lessico", record)
        doi = mint_doi(POLICY, path.collection, record, 1)
        metadata = DescriptiveMetadata(
            title=record,
            creators=(Creator("Salucci, Giada"),),
            publication_date=datetime.date(2024, 5, 28),
            resource_type=ResourceType.ENTRY,
            identifier=doi,
            landing_url=f"https://viver.example/lessico/{record}",
            language="it",
            license_url="https://creativecommons.org/licenses/by/4.0/",
            publisher="Accademia Example",
        )
        store.create_record(path, f"{record} v1".encode(), metadata, doi)
        expected = [(1, doi, ChangeKind.INITIAL)]
        length = rng.randint(1, 10)
        for n in range(2, length + 1):
            # the illegal combination must be rejected at every step
            with pytest.raises(IllegalDecision):
                store.publish_version(
                    path, b"x", ChangeKind.SUBSTANTIAL, DoiDecision.KEEP_EXISTING
                )
            kind = rng.choice([ChangeKind.CONTENT_UPDATE, ChangeKind.SUBSTANTIAL])
            if kind is ChangeKind.SUBSTANTIAL:
                decision = DoiDecision.REGISTER_NEW
            else:
                decision = rng.choice(
                    [DoiDecision.KEEP_EXISTING, DoiDecision.REGISTER_NEW]
                )
            if decision is DoiDecision.REGISTER_NEW:
                new_doi = mint_doi(POLICY, path.collection, record, n)
            else:
                new_doi = None
            version = store.publish_version(
                path, f"{record} v{n}".encode(), kind, decision, new_doi=new_doi
            )
            expected.append((n, version.doi, kind))
        chains.append((path, expected))
    _world["store"] = store
    _world["chains"] = chains
    return store, chains


def _oracle_update_targets(history, for_version: int) -> list:
    """Brute-force scan: distinct predecessor DOIs differing from the
    depositing version's own, most recent first."""
    current_doi = history[for_version - 1].doi
    targets = []
    for version in reversed(history[: for_version - 1]):
        if version.doi != current_doi and version.doi not in targets:
            targets.append(version.doi)
    return targets


def test_criterion_3(capsys, tmp_path_factory):
    with criterion(
        capsys, 3,
        "1,000 random version chains: invariants hold, illegal publishes rejected,"
        " update links match the brute-force oracle",
        budget=10.0,
    ):
        store, chains = thousand_chains(tmp_path_factory)
        for path, expected in chains:
            history = store.history(path)
            assert [v.version_number for v in history] == list(range(1, len(expected) + 1))
            assert [(v.version_number, v.doi, v.change_kind) for v in history] == expected
            assert all(v.status.value == "superseded" for v in history[:-1])
            assert history[-1].status.value == "current"
            for previous, version in zip(history, history[1:]):
                assert version.predecessor == (previous.version_number, previous.doi)
                assert version.published_at >= previous.published_at
                if version.change_kind is ChangeKind.SUBSTANTIAL:
                    assert version.doi != previous.doi
            assert history[0].predecessor is None
            assert store.audit_record(path) == []
            for n in range(1, len(history) + 1):
                section = build_crossmark(history, n, policy_doi=POLICY_DOI)
                expected_targets = _oracle_update_targets(history, n)
                if not expected_targets:
                    assert section is None
                else:
                    assert [u.target_doi for u in section.updates] == expected_targets
                    assert all(u.update_type is UpdateType.NEW_VERSION for u in section.updates)


# -- criterion 4: meta tag profiles -----------------------------------------------------


class _MetaCollector(HTMLParser):
    def __init__(self):
        super().__init__()
        self.pairs = []

    def handle_starttag(self, tag, attrs):
        if tag == "meta":
            attributes = dict(attrs)
            key = attributes.get("name") or attributes.get("property")
            self.pairs.append((key, attributes.get("content")))


_MANDATORY = {
    "dublin_core": [
        "dc.title", "dc.creator", "dc.date", "dc.identifier",
        "dc.language", "dc.rights", "dc.publisher", "dc.type",
    ],
    "highwire": [
        "citation_title", "citation_author", "citation_publication_date",
        "citation_doi", "citation_abstract_html_url", "citation_language",
    ],
    "open_graph": ["og:title", "og:type", "og:url", "og:description"],
    "twitter_card": ["twitter:card", "twitter:title", "twitter:description"],
}

_NASTY = 'aeiablm nořst<>&"\'«»—è'


def _random_metadata(rng: random.Random, i: int) -> DescriptiveMetadata:
    def text(limit: int) -> str:
        value = "".join(rng.choice(_NASTY) for _ in range(rng.randint(1, limit))).strip()
        return value or "x"

    creators = []
    for _ in range(rng.randint(1, 3)):
        if rng.random() < 0.5:
            base = f"{rng.randrange(10**15):015d}"
            orcid = validate(PidScheme.ORCID, base + iso7064_mod11_2_check(base))
        else:
            orcid = None
        name = f"{text(10)}, {text(8)}" if rng.random() < 0.7 else text(12)
        creators.append(Creator(name, orcid))
    return DescriptiveMetadata(
        title=text(40),
        creators=tuple(creators),
        publication_date=datetime.date(1900, 1, 1)
        + datetime.timedelta(days=rng.randrange(45000)),
        resource_type=rng.choice(list(ResourceType)),
        identifier=mint_doi(POLICY, "lessico", f"w{i}", 1),
        landing_url=f"https://viver.example/record/{i}",
        language=rng.choice(["it", "en", "de"]),
        license_url="https://creativecommons.org/licenses/by/4.0/",
        publisher=text(20),
        abstract=text(300) if rng.random() < 0.5 else None,
        image_url=f"https://viver.example/img/{i}.jpg" if rng.random() < 0.3 else None,
    )


def test_criterion_4(capsys):
    with criterion(
        capsys, 4,
        "100 randomized records: mandatory tags survive parse-back,"
        " emission is byte-deterministic, attribute values stay escaped",
    ):
        rng = random.Random(SEED)
        for i in range(100):
            metadata = _random_metadata(rng, i)
            tag_sets = emit_all_profiles(metadata)
            assert emit_html_head(metadata) == emit_html_head(metadata)
            for tag_set in tag_sets:
                html = tag_set.to_html()
                assert html == tag_set.to_html()
                for line in html.splitlines():
                    body = line.removeprefix("<meta ").removesuffix(">")
                    for chunk in body.split('" '):
                        value = chunk.split('="', 1)[1].rstrip('"')
                        assert '"' not in value
                        assert "<" not in value
                        assert ">" not in value
                collector = _MetaCollector()
                collector.feed(html)
                seen = [key for key, _ in collector.pairs]
                for mandatory in _MANDATORY[tag_set.profile.value]:
                    assert mandatory in seen, f"{tag_set.profile.value} lost {mandatory}"
                parsed = dict(collector.pairs)
                assert parsed.get("og:title", metadata.title) == metadata.title
                if tag_set.profile.value == "dublin_core":
                    assert seen.count("dc.creator") == len(metadata.creators)
                if tag_set.profile.value == "highwire":
                    assert seen.count("citation_author") == len(metadata.creators)


# -- criterion 5: deposit round-trip and registration discipline ----------------------------


def test_criterion_5(capsys):
    with criterion(
        capsys, 5,
        "100 generated deposits round-trip; registration is idempotent"
        " and retries transient failures",
    ):
        @settings(max_examples=100, deadline=None)
        @given(document=deposit_documents())
        def roundtrip(document):
            assert parse_deposit(serialize_deposit(document)) == document

        roundtrip()

        # idempotency: the same batch is POSTed exactly once
        client = MockRegistrarClient(["accept"])
        registrar = Registrar(client, sleep=lambda s: None)
        document = build_sample()
        first = registrar.register(document)
        second = registrar.register(document)
        assert first == second
        assert len(client.calls) == 1

        # fail-twice mock: accepted on the third attempt, with backoff naps
        naps = []
        client = MockRegistrarClient(["transient", "transient", "accept"])
        registrar = Registrar(client, RetryPolicy(max_attempts=4), sleep=naps.append)
        receipt = registrar.register(build_sample())
        assert receipt.attempts == 3
        assert len(client.calls) == 3
        assert naps == [0.5, 1.0]


# -- criterion 6: fixity and fault-injected restore -------------------------------------------


def test_criterion_6(capsys):
    with criterion(
        capsys, 6,
        "200 single-byte corruptions each pinpointed;"
        " restore survives either backend down",
    ):
        rng = random.Random(SEED)
        bundle, payloads = create_bundle(make_version(), FORMATS, bundle_metadata())
        paths = sorted(payloads)
        for _ in range(200):
            victim = rng.choice(paths)
            damaged = bytearray(payloads[victim])
            position = rng.randrange(len(damaged))
            damaged[position] ^= rng.randint(1, 255)
            tampered = dict(payloads)
            tampered[victim] = bytes(damaged)
            report = verify_bundle(bundle, tampered)
            assert report.manifest_digest_ok
            assert not report.ok
            for path in paths:
                expected = EntryState.DIGEST_MISMATCH if path == victim else EntryState.OK
                assert report.state_of(path) is expected

        first = MockBackend("istituzionale", BackendKind.INSTITUTIONAL_MOCK)
        second = MockBackend("deposito")
        receipts = replicate(bundle, payloads, [first, second])
        assert receipts.complete
        for down, survivor in ((first, second), (second, first)):
            down.set_health(BackendHealth.DOWN)
            result = restore(bundle.bundle_id, [first, second])
            assert result.source == survivor.name
            assert result.payloads == dict(payloads)
            assert verify_bundle(result.bundle, result.payloads).ok
            down.set_health(BackendHealth.HEALTHY)


# -- criterion 7: resolver behavior ------------------------------------------------------------


def test_criterion_7(capsys, tmp_path_factory):
    with criterion(
        capsys, 7,
        "first-healthy failover exhaustively; atomic repoint under readers;"
        " version status matches store history; superseded DOI reported over HTTP",
    ):
        # exhaustive health configurations over a 3-target entry
        targets = (
            "https://primary.example/a",
            "https://mirror-b.example/a",
            "https://mirror-c.example/a",
        )
        doi = parse_doi("10.5072/viver.failover.demo")
        for mask in range(8):
            core = ResolverCore()
            core.add_entry(ResolutionEntry(doi, targets, EntryStatus.ACTIVE))
            healthy = []
            for index, target in enumerate(targets):
                state = HealthState.HEALTHY if mask & (1 << index) else HealthState.DOWN
                core.set_health(origin_of(target), state)
                if state is HealthState.HEALTHY:
                    healthy.append(target)
            resolution = core.resolve(str(doi))
            assert resolution.outcome is Outcome.REDIRECT
            assert resolution.url == (healthy[0] if healthy else targets[0])

        # concurrent repoint: readers never observe a mixed target list
        list_a = ("https://down-a.example/x", "https://up-a.example/x")
        list_b = ("https://down-b.example/x", "https://up-b.example/x")
        core = ResolverCore()
        core.add_entry(ResolutionEntry(doi, list_a, EntryStatus.ACTIVE))
        for url in (list_a[0], list_b[0]):
            core.set_health(origin_of(url), HealthState.DOWN)
        stop = threading.Event()
        problems: list[str] = []

        def reader():
            while not stop.is_set():
                observed = core.entry(str(doi)).targets
                if observed not in (list_a, list_b):
                    problems.append(f"mixed target list {observed}")
                resolved = core.resolve(str(doi)).url
                if resolved not in (list_a[1], list_b[1]):
                    problems.append(f"resolved through a dead origin: {resolved}")

        readers = [threading.Thread(target=reader) for _ in range(4)]
        for thread in readers:
            thread.start()
        for flip in range(400):
            core.repoint(str(doi), list_b if flip % 2 == 0 else list_a)
        stop.set()
        for thread in readers:
            thread.join()
        assert problems == []

        # version status agrees with the record store on 1,000 random chains
        store, chains = thousand_chains(tmp_path_factory)
        core = bootstrap_from_store(store)
        superseded_doi = None
        superseded_path = None
        for path, expected in chains:
            history = store.history(path)
            latest = history[-1]
            for version_doi in {str(v.doi) for v in history}:
                status = core.version_status(version_doi)
                assert str(status.latest_doi) == str(latest.doi)
                assert status.is_current == (version_doi == str(latest.doi))
                assert len(status.chain) == len(history)
                assert [n for _, n, _ in status.chain] == [
                    v.version_number for v in history
                ]
            if superseded_doi is None and str(history[0].doi) != str(latest.doi):
                superseded_doi = str(history[0].doi)
                superseded_path = path

        # the status endpoint reports a superseded DOI over real HTTP
        assert superseded_doi is not None, "no chain ever changed DOI"
        server = make_server(core, "127.0.0.1:0")
        thread = threading.Thread(target=server.serve_forever, daemon=True)
        thread.start()
        try:
            host, port = server.server_address[:2]
            connection = http.client.HTTPConnection(host, port, timeout=5)
            connection.request("GET", f"/api/status/{superseded_doi}")
            response = connection.getresponse()
            payload = json.loads(response.read())
            connection.close()
            assert response.status == 200
            assert payload["is_current"] is False
            latest = store.history(superseded_path)[-1]
            assert payload["latest_doi"] == str(latest.doi)
        finally:
            server.shutdown()
            server.server_close()


# -- criterion 8: fixture corpus attestation ------------------------------------------------------


def test_criterion_8(capsys):
    with criterion(
        capsys, 8,
        "fixture-corpus attestation matches a full token scan;"
        " corpus hash reproducible and single-token sensitive",
    ):
        editions = [parse_tei(path.read_bytes()) for path in FIXTURE_FILES]
        assert sorted(e.header.publication_year for e in editions) == [1881, 1884, 1889]
        for edition in editions:
            assert 150 <= len(edition.tokens) <= 260
        index = index_corpus(editions)

        for lemma in index.lemmas:
            hits = [
                (edition.header.publication_year, edition.work_id, offset)
                for edition in editions
                for offset, token in enumerate(edition.tokens)
                if token.lemma == lemma
            ]
            assert hits, f"indexed lemma {lemma} not found by scan"
            result = attest(index, lemma)
            year, work, _ = min(hits)
            assert result.first_year == year
            assert result.first_work == work
            assert sorted((o.work_id, o.offset) for o in result.occurrences) == sorted(
                (work_id, offset) for _, work_id, offset in hits
            )

        # re-indexing an unchanged corpus reproduces the hash
        reparsed = [parse_tei(path.read_bytes()) for path in FIXTURE_FILES]
        assert index_corpus(reparsed).corpus_hash == index.corpus_hash
        assert corpus_hash(reversed(reparsed)) == index.corpus_hash

        # changing one token changes it
        victim = reparsed[0]
        tokens = list(victim.tokens)
        tokens[3] = Token(tokens[3].surface + "e", tokens[3].lemma)
        reparsed[0] = Edition(
            work_id=victim.work_id,
            header=victim.header,
            tokens=tuple(tokens),
            entities=victim.entities,
        )
        assert corpus_hash(reparsed) != index.corpus_hash


# -- criterion 9: end-to-end command-line flow ------------------------------------------------------


def _cli(workdir: Path, *argv: str) -> str:
    completed = subprocess.run(
        [sys.executable, "-m", "fairlex", *argv],
        cwd=workdir,
        capture_output=True,
        text=True,
        timeout=25,
    )
    assert completed.returncode == 0, (
        f"fairlex {' '.join(argv)} exited {completed.returncode}: {completed.stderr}"
    )
    return completed.stdout


def test_criterion_9(capsys, tmp_path):
    with criterion(
        capsys, 9,
        "end-to-end command-line flow, finishing with a live resolve"
        " of the freshly minted DOI",
        budget=30.0,
    ):
        for n in (1, 2, 3):
            (tmp_path / f"v{n}.txt").write_text(f"voce, stesura {n}\n", encoding="utf-8")

        _cli(tmp_path, "ingest-tei", *[str(p) for p in FIXTURE_FILES])
        _cli(tmp_path, "index")
        _cli(
            tmp_path, "create", "viver/lessico/abbrivo",
            "--content", "v1.txt", "--title", "Abbrivo",
            "--author", "Salucci, Giada|0000-0002-9587-1620",
        )
        _cli(
            tmp_path, "publish", "viver/lessico/abbrivo",
            "--content", "v2.txt", "--change", "update", "--doi", "keep",
        )
        published = json.loads(
            _cli(
                tmp_path, "publish", "viver/lessico/abbrivo",
                "--content", "v3.txt", "--change", "substantial", "--doi", "new", "--json",
            )
        )
        fresh_doi = published["doi"]
        assert fresh_doi.endswith(".v3")
        _cli(tmp_path, "deposit-build", "viver/lessico/abbrivo")
        _cli(
            tmp_path, "bundle", "viver/lessico/abbrivo", "3", "--media-type", "text/plain"
        )
        _cli(tmp_path, "replicate", "viver.lessico.abbrivo.v3")

        server = subprocess.Popen(
            [sys.executable, "-m", "fairlex", "serve", "--listen", "127.0.0.1:0"],
            cwd=tmp_path,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
        )
        try:
            banner = server.stdout.readline().strip()
            assert banner.startswith("resolver listening on http://"), banner
            _, _, address = banner.rpartition("//")
            host, _, port = address.partition(":")
            connection = http.client.HTTPConnection(host, int(port), timeout=5)
            connection.request("GET", f"/{fresh_doi}")
            response = connection.getresponse()
            response.read()
            assert response.status == 302
            assert (
                response.getheader("Location")
                == "https://viver.example/archive/lessico/abbrivo"
            )
            connection.close()
        finally:
            server.terminate()
            server.wait(timeout=5)
