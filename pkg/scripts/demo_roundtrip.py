#!/usr/bin/env python3
"""End-to-end walkthrough of the whole toolkit against the bundled corpus.

Parses the three sample editions, indexes them, creates and revises a
dictionary entry, builds a registrar deposit, packages and replicates a
preservation bundle, injures one replica to show the fixity check and the
restore fall-through, and finally serves the resolver and follows a DOI
redirect over real HTTP.

Run from the repository root:

    python3 scripts/demo_roundtrip.py            # work in a temp directory
    python3 scripts/demo_roundtrip.py --keep DIR # keep the workspace in DIR
"""

from __future__ import annotations

import argparse
import datetime
import http.client
import json
import sys
import tempfile
import threading
from pathlib import Path

from fairlex.bundles import (
    LocalDirBackend,
    create_bundle,
    replicate,
    restore,
    verify_bundle,
    write_bundle,
)
from fairlex.deposit import (
    DatasetItem,
    MockRegistrarClient,
    Registrar,
    build_crossmark,
    build_deposit,
    serialize_deposit,
)
from fairlex.metatags import Creator, DescriptiveMetadata, ResourceType, emit_html_head
from fairlex.pids import MintPolicy, PidScheme, mint_doi, parse_doi, validate
from fairlex.resolver import bootstrap_from_store, make_server
from fairlex.store import ChangeKind, DoiDecision, EntityPath, RecordStore
from fairlex.tei import attest, index_corpus, parse_tei, save_index, stamp_check

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"
POLICY = MintPolicy()


def banner(title: str) -> None:
    print(f"\n=== {title} " + "=" * max(0, 60 - len(title)))


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--keep", metavar="DIR", help="keep the workspace here instead of a temp dir")
    args = parser.parse_args()

    if args.keep:
        workspace = Path(args.keep)
        workspace.mkdir(parents=True, exist_ok=True)
        run(workspace)
        print(f"\nworkspace kept at {workspace}")
    else:
        with tempfile.TemporaryDirectory(prefix="fairlex-demo-") as tmp:
            run(Path(tmp))
    return 0


def run(workspace: Path) -> None:
    banner("corpus: parse, index, attest")
    editions = [parse_tei(p.read_bytes()) for p in sorted(FIXTURES.glob("*.xml"))]
    for edition in editions:
        print(
            f"  {edition.work_id}: “{edition.header.title}”"
            f" ({edition.header.publication_year}), {len(edition.tokens)} tokens,"
            f" formats {sorted(edition.format_identifiers)}"
        )
    index = index_corpus(editions)
    save_index(index, workspace / "index")
    print(f"  corpus hash {index.corpus_hash[:16]}… covering {len(index.lemmas)} lemmas")
    for lemma in ("mare", "salina"):
        found = attest(index, lemma)
        print(f"  first attestation of {lemma!r}: {found.first_year} in {found.first_work}")

    banner("record: create, revise, amend")
    store = RecordStore(workspace / "store")
    path = EntityPath("viver", "lessico", "abbrivo")
    v1_doi = mint_doi(POLICY, path.collection, path.record, 1)
    metadata = DescriptiveMetadata(
        title="Abbrivo",
        creators=(
            Creator("Salucci, Giada", validate(PidScheme.ORCID, "0000-0002-9587-1620")),
        ),
        publication_date=datetime.date.today(),
        resource_type=ResourceType.ENTRY,
        identifier=v1_doi,
        landing_url="https://viver.example/archive/lessico/abbrivo",
        language="it",
        license_url="https://creativecommons.org/licenses/by/4.0/",
        publisher="Accademia Example",
    )
    store.create_record(path, "abbrivo: slancio iniziale.".encode(), metadata, v1_doi)
    store.publish_version(
        path, "abbrivo: slancio iniziale di una barca.".encode(),
        ChangeKind.CONTENT_UPDATE, DoiDecision.KEEP_EXISTING,
    )
    v3_doi = mint_doi(POLICY, path.collection, path.record, 3)
    store.publish_version(
        path, "abbrivo: voce interamente riscritta.".encode(),
        ChangeKind.SUBSTANTIAL, DoiDecision.REGISTER_NEW, new_doi=v3_doi,
    )
    for version in store.history(path):
        print(
            f"  v{version.version_number} {version.status.value:10}"
            f" {version.change_kind.value:14} {version.doi}"
        )
    stamp = stamp_check(store, path, index)
    print(f"  entry stamped against corpus state on {stamp.checked_at}")

    banner("landing page meta tags")
    print("  " + emit_html_head(store.load_metadata(path)).replace("\n", "\n  ").rstrip())

    banner("registrar deposit with version links")
    history = store.history(path)
    crossmark = build_crossmark(
        history, history[-1].version_number,
        policy_doi=parse_doi("10.5072/viver.crossmark-policy"),
    )
    document = build_deposit(
        DescriptiveMetadata(
            title="Versioned lexicographic archive",
            creators=(Creator("Accademia Example"),),
            publication_date=datetime.date.today(),
            resource_type=ResourceType.DATASET,
            identifier=parse_doi("10.5072/viver.archive"),
            landing_url="https://viver.example/archive",
            language="it",
            license_url="https://creativecommons.org/licenses/by/4.0/",
            publisher="Accademia Example",
        ),
        [DatasetItem(history[-1], store.load_metadata(path), crossmark)],
        depositor_name="fairlex deposit agent",
        depositor_email="deposits@viver.example",
        registrant="Accademia Example",
    )
    xml = serialize_deposit(document)
    print(f"  batch {document.head.batch_id}: {len(xml)} bytes of deposit XML")
    print(f"  links new DOI to: {[str(u.target_doi) for u in crossmark.updates]}")
    client = MockRegistrarClient(["transient", "accept"])
    registrar = Registrar(client, sleep=lambda seconds: None)
    receipt = registrar.register(document)
    print(f"  mock registrar accepted after {receipt.attempts} attempts")
    submissions = len(client.calls)
    registrar.register(document)
    print(
        f"  re-registering the same batch added"
        f" {len(client.calls) - submissions} new submissions"
    )

    banner("preservation: bundle, replicate, injure, restore")
    version, content = store.get_version(path, 3)
    bundle, payloads = create_bundle(
        version,
        [
            ("content.txt", "text/plain", content),
            ("scheda.html", "text/html", b"<html><body>Abbrivo</body></html>"),
        ],
        store.load_metadata(path),
    )
    write_bundle(bundle, payloads, workspace / "bundles")
    first = LocalDirBackend("roma", workspace / "replica-roma")
    second = LocalDirBackend("trieste", workspace / "replica-trieste")
    receipts = replicate(bundle, payloads, [first, second])
    print(f"  {bundle.bundle_id} replicated to {[r.backend for r in receipts.receipts]}")

    victim = workspace / "replica-roma" / "bundle" / bundle.bundle_id / "data" / "content.txt"
    damaged = bytearray(victim.read_bytes())
    damaged[0] ^= 0x40
    victim.write_bytes(bytes(damaged))
    stored_bundle, stored_payloads = first.get(bundle.bundle_id)
    report = verify_bundle(stored_bundle, stored_payloads)
    print(f"  one byte flipped on 'roma': verification says ok={report.ok}")
    print(f"    entry states: {[(p, s.value) for p, s in report.entries]}")
    recovered = restore(bundle.bundle_id, [first, second])
    print(f"  restore fell through to the intact copy on {recovered.source!r}")

    banner("resolver: serve and follow a DOI")
    core = bootstrap_from_store(store)
    server = make_server(core, "127.0.0.1:0")
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        host, port = server.server_address[:2]
        connection = http.client.HTTPConnection(host, port, timeout=5)
        connection.request("GET", f"/{v3_doi}")
        response = connection.getresponse()
        response.read()
        print(f"  GET /{v3_doi} -> {response.status} {response.getheader('Location')}")
        connection.request("GET", f"/api/status/{v1_doi}")
        status = json.loads(connection.getresponse().read())
        print(
            f"  GET /api/status/{v1_doi} -> is_current={status['is_current']},"
            f" latest {status['latest_doi']}"
        )
        connection.close()
    finally:
        server.shutdown()
        server.server_close()


if __name__ == "__main__":
    sys.exit(main())
