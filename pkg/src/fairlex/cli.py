"""Command-line entry point binding every module into operator workflows.

Exit codes: 0 success, 1 domain error (the module-level error name is
printed verbatim, no stack trace), 2 usage error. `--json` switches stdout
to stable-keyed JSON. Configuration comes from flags, then fairlex.toml,
then built-in defaults.
"""

from __future__ import annotations

import argparse
import datetime
import json
import mimetypes
import os
import sys
from pathlib import Path

from . import bundles as bundles_mod
from . import tei as tei_mod
from .config import Config, ReplicaTarget, load_config
from .deposit import (
    DatasetItem,
    DepositDocument,
    HttpRegistrarClient,
    Registrar,
    build_crossmark,
    build_deposit,
    serialize_deposit,
)
from .errors import FairlexError
from .metatags import (
    Creator,
    DescriptiveMetadata,
    ResourceType,
    emit_all_profiles,
    emit_dublin_core,
    emit_highwire,
    emit_html_head,
    emit_open_graph,
    emit_twitter_card,
)
from .pids import PidScheme, mint_doi, parse_doi, validate
from .resolver import bootstrap_from_store, make_server
from .store import ChangeKind, DoiDecision, EntityPath, RecordStore

__all__ = ["main", "build_parser", "VerificationFailed"]

ENV_DEBUG = "FAIRLEX_DEBUG"


class VerificationFailed(FairlexError):
    """A bundle failed its fixity check."""


# -- argument parsing helpers -------------------------------------------------


def _entity_path(raw: str) -> EntityPath:
    try:
        return EntityPath.parse(raw)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _creator(raw: str) -> Creator:
    """'Family, Given' or 'Family, Given|0000-0002-1825-0097'."""
    name, _, orcid = raw.partition("|")
    name = name.strip()
    if not name:
        raise argparse.ArgumentTypeError("creator name must be non-empty")
    if not orcid.strip():
        return Creator(name)
    try:
        return Creator(name, validate(PidScheme.ORCID, orcid.strip()))
    except FairlexError as exc:
        raise argparse.ArgumentTypeError(f"bad ORCID in {raw!r}: {exc}") from None


def _replica(raw: str) -> ReplicaTarget:
    name, sep, directory = raw.partition("=")
    if not sep or not name or not directory:
        raise argparse.ArgumentTypeError(f"expected NAME=DIR, got {raw!r}")
    return ReplicaTarget(name, Path(directory))


def _date(raw: str) -> datetime.date:
    try:
        return datetime.date.fromisoformat(raw)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _read_content(spec: str) -> bytes:
    if spec == "-":
        return sys.stdin.buffer.read()
    return Path(spec).read_bytes()


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="configuration file (default: ./fairlex.toml when present)")
    common.add_argument("--json", action="store_true", help="machine-readable JSON on stdout")
    common.add_argument("--store-root", metavar="DIR", type=Path, help="record store directory")
    common.add_argument("--editions-dir", metavar="DIR", type=Path, help="parsed editions directory")
    common.add_argument("--index-dir", metavar="DIR", type=Path, help="corpus index directory")
    common.add_argument("--deposits-dir", metavar="DIR", type=Path, help="deposit XML output directory")
    common.add_argument("--bundles-dir", metavar="DIR", type=Path, help="preservation bundle directory")
    common.add_argument("--counters-file", metavar="FILE", type=Path, help="resolver counter journal")
    common.add_argument("--doi-prefix", metavar="PREFIX", help="DOI registrant prefix, e.g. 10.5072")
    common.add_argument("--registrar-url", metavar="URL", help="registrar submission endpoint")
    common.add_argument("--listen", metavar="HOST:PORT", help="resolver listen address")
    common.add_argument("--context-window", metavar="N", type=int, help="tokens of context on each side")
    common.add_argument(
        "--replica", metavar="NAME=DIR", type=_replica, action="append", dest="replicas",
        help="replication target (repeat for each backend)",
    )

    parser = argparse.ArgumentParser(
        prog="fairlex",
        description="Versioned lexicographic records: identifiers, deposits, preservation, resolution.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("ingest-tei", parents=[common], help="parse TEI files into stored editions")
    p.add_argument("files", nargs="+", metavar="FILE")
    p.set_defaults(func=cmd_ingest_tei)

    p = sub.add_parser("index", parents=[common], help="build the lemma index over all editions")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("attest", parents=[common], help="look up a lemma's earliest attestation")
    p.add_argument("lemma")
    p.set_defaults(func=cmd_attest)

    p = sub.add_parser("create", parents=[common], help="create a record (version 1, fresh DOI)")
    p.add_argument("path", type=_entity_path, metavar="DB/COLLECTION/RECORD")
    p.add_argument("--content", required=True, metavar="FILE", help="content file, - for stdin")
    p.add_argument("--title", required=True)
    p.add_argument(
        "--author", dest="authors", type=_creator, action="append", required=True,
        metavar="'Family, Given[|ORCID]'", help="repeat for each author",
    )
    p.add_argument("--date", type=_date, metavar="YYYY-MM-DD", help="publication date (default: today)")
    p.add_argument(
        "--type", dest="resource_type", choices=[t.value for t in ResourceType],
        default=ResourceType.ENTRY.value,
    )
    p.add_argument("--landing", metavar="URL", help="landing page (default: derived from database URL)")
    p.add_argument("--abstract")
    p.set_defaults(func=cmd_create)

    p = sub.add_parser("publish", parents=[common], help="publish a new version of a record")
    p.add_argument("path", type=_entity_path, metavar="DB/COLLECTION/RECORD")
    p.add_argument("--content", required=True, metavar="FILE", help="content file, - for stdin")
    p.add_argument("--change", required=True, choices=["update", "substantial"])
    p.add_argument("--doi", required=True, choices=["keep", "new"])
    p.add_argument("--expect-current", type=int, metavar="N", help="fail unless the chain is still at version N")
    p.set_defaults(func=cmd_publish)

    p = sub.add_parser("amend", parents=[common], help="fix a typo in one version, keeping DOI and number")
    p.add_argument("path", type=_entity_path, metavar="DB/COLLECTION/RECORD")
    p.add_argument("version", type=int)
    p.add_argument("--content", required=True, metavar="FILE", help="corrected content file, - for stdin")
    p.add_argument("--note", default="typo amendment")
    p.set_defaults(func=cmd_amend)

    p = sub.add_parser("history", parents=[common], help="show a record's version chain")
    p.add_argument("path", type=_entity_path, metavar="DB/COLLECTION/RECORD")
    p.set_defaults(func=cmd_history)

    p = sub.add_parser("mint", parents=[common], help="render the DOI the policy assigns to a version")
    p.add_argument("path", type=_entity_path, metavar="DB/COLLECTION/RECORD")
    p.add_argument("--version", type=int, metavar="N", help="default: the next version of the record")
    p.set_defaults(func=cmd_mint)

    p = sub.add_parser("emit-meta", parents=[common], help="emit landing-page meta tags")
    p.add_argument("path", type=_entity_path, metavar="DB/COLLECTION/RECORD")
    p.add_argument("--profile", required=True, choices=["dc", "highwire", "og", "twitter", "all"])
    p.set_defaults(func=cmd_emit_meta)

    p = sub.add_parser("deposit-build", parents=[common], help="write registrar deposit XML for the current version")
    p.add_argument("path", type=_entity_path, metavar="DB/COLLECTION/RECORD")
    p.set_defaults(func=cmd_deposit_build)

    p = sub.add_parser("deposit-send", parents=[common], help="submit a deposit (dry-run unless --live)")
    p.add_argument("path", type=_entity_path, metavar="DB/COLLECTION/RECORD")
    p.add_argument("--live", action="store_true", help="actually contact the registrar")
    p.set_defaults(func=cmd_deposit_send)

    p = sub.add_parser("bundle", parents=[common], help="package a version into a preservation bundle")
    p.add_argument("path", type=_entity_path, metavar="DB/COLLECTION/RECORD")
    p.add_argument("version", type=int)
    p.add_argument("--media-type", default="application/octet-stream", help="media type of the stored content")
    p.add_argument(
        "--attach", action="append", metavar="FILE[:MEDIA-TYPE]", default=[],
        help="additional payload file (repeatable)",
    )
    p.set_defaults(func=cmd_bundle)

    p = sub.add_parser("verify", parents=[common], help="fixity-check a written bundle")
    p.add_argument("bundle_id", metavar="BUNDLE-ID")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("replicate", parents=[common], help="deposit a bundle to every replication target")
    p.add_argument("bundle_id", metavar="BUNDLE-ID")
    p.set_defaults(func=cmd_replicate)

    p = sub.add_parser("restore", parents=[common], help="fetch a verified copy back from the replicas")
    p.add_argument("bundle_id", metavar="BUNDLE-ID")
    p.add_argument("--out", type=Path, metavar="DIR", default=Path("restored"), help="directory to restore into")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("stamp-check", parents=[common], help="record that an entry was checked against the corpus")
    p.add_argument("path", type=_entity_path, metavar="DB/COLLECTION/RECORD")
    p.set_defaults(func=cmd_stamp_check)

    p = sub.add_parser("serve", parents=[common], help="run the local resolver over the record store")
    p.set_defaults(func=cmd_serve)

    return parser


def _effective_config(args: argparse.Namespace) -> Config:
    overrides = {
        "store_root": args.store_root,
        "editions_dir": args.editions_dir,
        "index_dir": args.index_dir,
        "deposits_dir": args.deposits_dir,
        "bundles_dir": args.bundles_dir,
        "counters_file": args.counters_file,
        "doi_prefix": args.doi_prefix,
        "registrar_url": args.registrar_url,
        "listen": args.listen,
        "context_window": args.context_window,
    }
    if args.replicas:
        overrides["replicas"] = tuple(args.replicas)
    return load_config(args.config, overrides)


def _emit(args: argparse.Namespace, payload, human: str) -> None:
    if args.json:
        print(json.dumps(payload, ensure_ascii=False, sort_keys=True, indent=2))
    elif human:
        print(human)


# -- corpus commands -----------------------------------------------------------


def cmd_ingest_tei(config: Config, args: argparse.Namespace) -> int:
    results = []
    for file in args.files:
        edition = tei_mod.parse_tei(Path(file).read_bytes())
        target = tei_mod.save_edition(edition, config.editions_dir)
        results.append(
            {
                "file": str(file),
                "work_id": edition.work_id,
                "title": edition.header.title,
                "year": edition.header.publication_year,
                "tokens": len(edition.tokens),
                "entities": len(edition.entities),
                "saved_to": str(target),
            }
        )
    human = "\n".join(
        f"{r['work_id']}: {r['title']} ({r['year']}), {r['tokens']} tokens" for r in results
    )
    _emit(args, results, human)
    return 0


def cmd_index(config: Config, args: argparse.Namespace) -> int:
    editions = [
        tei_mod.load_edition(p) for p in sorted(config.editions_dir.glob("*.json"))
    ]
    index = tei_mod.index_corpus(editions, config.context_window)
    target = tei_mod.save_index(index, config.index_dir)
    payload = {
        "works": len(index.works),
        "lemmas": len(index.lemmas),
        "occurrences": sum(len(o) for o in index.lemmas.values()),
        "corpus_hash": index.corpus_hash,
        "saved_to": str(target),
    }
    human = (
        f"indexed {payload['works']} works, {payload['lemmas']} lemmas,"
        f" {payload['occurrences']} occurrences\ncorpus hash {index.corpus_hash}"
    )
    _emit(args, payload, human)
    return 0


def cmd_attest(config: Config, args: argparse.Namespace) -> int:
    index = tei_mod.load_index(config.index_dir)
    result = tei_mod.attest(index, args.lemma)
    if result is None:
        _emit(
            args,
            {"lemma": args.lemma, "attested": False},
            f"{args.lemma}: not attested in the indexed corpus",
        )
        return 0
    payload = {
        "lemma": result.lemma,
        "attested": True,
        "first_year": result.first_year,
        "first_work": result.first_work,
        "occurrences": [
            {"work_id": o.work_id, "offset": o.offset, "context": o.context}
            for o in result.occurrences
        ],
    }
    lines = [f"{result.lemma}: first attested {result.first_year} in {result.first_work}"]
    lines += [f"  {o.work_id}@{o.offset}: …{o.context}…" for o in result.occurrences]
    _emit(args, payload, "\n".join(lines))
    return 0


def cmd_stamp_check(config: Config, args: argparse.Namespace) -> int:
    store = RecordStore(config.store_root)
    index = tei_mod.load_index(config.index_dir)
    stamp = tei_mod.stamp_check(store, args.path, index)
    _emit(
        args,
        stamp.to_json_dict(),
        f"stamped {args.path} on {stamp.checked_at} against corpus {stamp.corpus_hash[:12]}",
    )
    return 0


# -- record commands --------------------------------------------------------------


def _version_dict(version) -> dict:
    return {
        "path": str(version.path),
        "version": version.version_number,
        "doi": str(version.doi),
        "change": version.change_kind.value,
        "status": version.status.value,
        "published_at": version.published_at.isoformat(),
        "content_hash": version.content_hash,
        "predecessor": (
            {"version": version.predecessor[0], "doi": str(version.predecessor[1])}
            if version.predecessor
            else None
        ),
    }


def cmd_create(config: Config, args: argparse.Namespace) -> int:
    store = RecordStore(config.store_root)
    content = _read_content(args.content)
    path = args.path
    doi = mint_doi(config.mint_policy(), path.collection, path.record, 1)
    landing = args.landing or f"{config.db_landing_url}/{path.collection}/{path.record}"
    metadata = DescriptiveMetadata(
        title=args.title,
        creators=tuple(args.authors),
        publication_date=args.date or datetime.date.today(),
        resource_type=ResourceType(args.resource_type),
        identifier=doi,
        landing_url=landing,
        language=config.language,
        license_url=config.license_url,
        publisher=config.publisher,
        abstract=args.abstract,
    )
    version = store.create_record(path, content, metadata, doi)
    _emit(args, _version_dict(version), f"created {path} v1 with DOI {doi}")
    return 0


def cmd_publish(config: Config, args: argparse.Namespace) -> int:
    store = RecordStore(config.store_root)
    content = _read_content(args.content)
    path = args.path
    change = ChangeKind.CONTENT_UPDATE if args.change == "update" else ChangeKind.SUBSTANTIAL
    decision = DoiDecision.KEEP_EXISTING if args.doi == "keep" else DoiDecision.REGISTER_NEW
    new_doi = None
    if decision is DoiDecision.REGISTER_NEW and store.exists(path):
        next_number = store.current_version(path).version_number + 1
        new_doi = mint_doi(config.mint_policy(), path.collection, path.record, next_number)
    version = store.publish_version(
        path, content, change, decision, new_doi=new_doi,
        expected_current=args.expect_current,
    )
    _emit(
        args,
        _version_dict(version),
        f"published {path} v{version.version_number} ({args.change}, DOI {version.doi})",
    )
    return 0


def cmd_amend(config: Config, args: argparse.Namespace) -> int:
    store = RecordStore(config.store_root)
    entry = store.amend_typo(args.path, args.version, _read_content(args.content), args.note)
    payload = entry.to_json_dict()
    _emit(
        args,
        payload,
        f"amended {args.path} v{args.version}: {entry.old_hash[:12]} -> {entry.new_hash[:12]}",
    )
    return 0


def cmd_history(config: Config, args: argparse.Namespace) -> int:
    store = RecordStore(config.store_root)
    versions = store.history(args.path)
    payload = [_version_dict(v) for v in versions]
    human = "\n".join(
        f"v{v.version_number}  {v.status.value:10}  {v.change_kind.value:14}"
        f"  {v.published_at.date()}  {v.doi}"
        for v in versions
    )
    _emit(args, payload, human)
    return 0


def cmd_mint(config: Config, args: argparse.Namespace) -> int:
    store = RecordStore(config.store_root)
    path = args.path
    if args.version is not None:
        number = args.version
    elif store.exists(path):
        number = store.current_version(path).version_number + 1
    else:
        number = 1
    doi = mint_doi(config.mint_policy(), path.collection, path.record, number)
    _emit(
        args,
        {"path": str(path), "version": number, "doi": str(doi), "url": doi.url},
        str(doi),
    )
    return 0


def cmd_emit_meta(config: Config, args: argparse.Namespace) -> int:
    store = RecordStore(config.store_root)
    metadata = store.load_metadata(args.path)
    emitters = {
        "dc": emit_dublin_core,
        "highwire": emit_highwire,
        "og": emit_open_graph,
        "twitter": emit_twitter_card,
    }
    if args.profile == "all":
        payload = [tag_set.to_json_dict() for tag_set in emit_all_profiles(metadata)]
        human = emit_html_head(metadata).rstrip("\n")
    else:
        tag_set = emitters[args.profile](metadata)
        payload = tag_set.to_json_dict()
        human = tag_set.to_html()
    _emit(args, payload, human)
    return 0


# -- deposit commands ----------------------------------------------------------------


def _build_record_deposit(config: Config, store: RecordStore, path: EntityPath) -> DepositDocument:
    history = store.history(path)
    current = history[-1]
    metadata = store.load_metadata(path)
    crossmark = build_crossmark(
        history,
        current.version_number,
        policy_doi=parse_doi(config.crossmark_policy_doi),
    )
    return build_deposit(
        config.database_metadata(),
        [DatasetItem(version=current, metadata=metadata, crossmark=crossmark)],
        depositor_name=config.depositor_name,
        depositor_email=config.depositor_email,
        registrant=config.registrant,
    )


def _write_deposit_file(config: Config, document: DepositDocument) -> Path:
    config.deposits_dir.mkdir(parents=True, exist_ok=True)
    target = config.deposits_dir / f"{document.head.batch_id}.xml"
    target.write_bytes(serialize_deposit(document))
    return target


def cmd_deposit_build(config: Config, args: argparse.Namespace) -> int:
    store = RecordStore(config.store_root)
    document = _build_record_deposit(config, store, args.path)
    target = _write_deposit_file(config, document)
    dataset = document.database.datasets[0]
    payload = {
        "batch_id": document.head.batch_id,
        "doi": str(dataset.doi),
        "crossmark_targets": [str(u.target_doi) for u in dataset.crossmark.updates]
        if dataset.crossmark
        else [],
        "file": str(target),
    }
    _emit(args, payload, f"wrote deposit {document.head.batch_id} to {target}")
    return 0


def cmd_deposit_send(config: Config, args: argparse.Namespace) -> int:
    store = RecordStore(config.store_root)
    document = _build_record_deposit(config, store, args.path)
    target = _write_deposit_file(config, document)
    if not args.live:
        payload = {
            "batch_id": document.head.batch_id,
            "mode": "dry-run",
            "registrar_url": config.registrar_url or None,
            "file": str(target),
        }
        human = (
            f"dry-run: wrote {target}; would submit batch {document.head.batch_id}"
            f" to {config.registrar_url or '(no registrar configured)'}"
        )
        _emit(args, payload, human)
        return 0
    if not config.registrar_url:
        raise FairlexError("no registrar URL configured; set [registrar] url or --registrar-url")
    registrar = Registrar(HttpRegistrarClient(config.registrar_url))
    receipt = registrar.register(document)
    payload = {
        "batch_id": receipt.batch_id,
        "mode": "live",
        "status": receipt.status.value,
        "attempts": receipt.attempts,
        "message": receipt.message,
        "file": str(target),
    }
    _emit(
        args,
        payload,
        f"registrar accepted batch {receipt.batch_id} after {receipt.attempts} attempt(s)",
    )
    return 0


# -- preservation commands --------------------------------------------------------------


def _attachment(spec: str) -> tuple[str, str, bytes]:
    file_part, sep, media = spec.rpartition(":")
    if not sep or "/" not in media:  # a bare filename, or a Windows-style token
        file_part, media = spec, ""
    source = Path(file_part)
    if not media:
        media = mimetypes.guess_type(source.name)[0] or "application/octet-stream"
    return source.name, media, source.read_bytes()


def cmd_bundle(config: Config, args: argparse.Namespace) -> int:
    store = RecordStore(config.store_root)
    version, content = store.get_version(args.path, args.version)
    metadata = store.load_metadata(args.path)
    payloads = [("content", args.media_type, content)]
    payloads.extend(_attachment(spec) for spec in args.attach)
    bundle, data = bundles_mod.create_bundle(version, payloads, metadata)
    location = bundles_mod.write_bundle(bundle, data, config.bundles_dir)
    payload = {
        "bundle_id": bundle.bundle_id,
        "manifest_digest": bundle.manifest_digest,
        "entries": len(bundle.manifest),
        "location": str(location),
    }
    _emit(
        args,
        payload,
        f"bundled {bundle.bundle_id} ({len(bundle.manifest)} entries) at {location}",
    )
    return 0


def cmd_verify(config: Config, args: argparse.Namespace) -> int:
    bundle, data = bundles_mod.read_bundle(config.bundles_dir, args.bundle_id)
    report = bundles_mod.verify_bundle(bundle, data)
    payload = {
        "bundle_id": report.bundle_id,
        "ok": report.ok,
        "manifest_digest_ok": report.manifest_digest_ok,
        "entries": [
            {"path": path, "state": state.value} for path, state in report.entries
        ],
    }
    human = "\n".join(
        [f"{report.bundle_id}: {'ok' if report.ok else 'DAMAGED'}"]
        + [f"  {state.value:16} {path}" for path, state in report.entries]
    )
    _emit(args, payload, human)
    if not report.ok:
        damaged = [path for path, state in report.entries if state is not bundles_mod.EntryState.OK]
        raise VerificationFailed(f"{report.bundle_id}: damaged entries: {', '.join(damaged)}")
    return 0


def cmd_replicate(config: Config, args: argparse.Namespace) -> int:
    bundle, data = bundles_mod.read_bundle(config.bundles_dir, args.bundle_id)
    result = bundles_mod.replicate(bundle, data, config.backends())
    payload = {
        "bundle_id": result.bundle_id,
        "complete": result.complete,
        "receipts": [
            {"backend": r.backend, "location": r.location, "stored_at": r.stored_at.isoformat()}
            for r in result.receipts
        ],
        "failures": [{"backend": f.backend, "reason": f.reason} for f in result.failures],
    }
    lines = [f"replicated {result.bundle_id} to {len(result.receipts)} backend(s)"]
    lines += [f"  ok    {r.backend}: {r.location}" for r in result.receipts]
    lines += [f"  fail  {f.backend}: {f.reason}" for f in result.failures]
    _emit(args, payload, "\n".join(lines))
    return 0


def cmd_restore(config: Config, args: argparse.Namespace) -> int:
    result = bundles_mod.restore(args.bundle_id, config.backends())
    location = bundles_mod.write_bundle(result.bundle, result.payloads, args.out)
    payload = {
        "bundle_id": result.bundle.bundle_id,
        "source": result.source,
        "files": sorted(result.payloads),
        "restored_to": str(location),
    }
    _emit(
        args,
        payload,
        f"restored {result.bundle.bundle_id} from {result.source} to {location}",
    )
    return 0


# -- resolver ---------------------------------------------------------------------------


def cmd_serve(config: Config, args: argparse.Namespace) -> int:
    store = RecordStore(config.store_root)
    core = bootstrap_from_store(store)
    if config.counters_file.is_file():
        core.load_counters(config.counters_file)
    server = make_server(core, config.listen)
    host, port = server.server_address[:2]
    url = f"http://{host}:{port}"
    if args.json:
        print(json.dumps({"listening": url}, sort_keys=True), flush=True)
    else:
        print(f"resolver listening on {url}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
        core.flush_counters(config.counters_file)
    return 0


# -- entry point -------------------------------------------------------------------------


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _effective_config(args)
        return args.func(config, args)
    except (FairlexError, LookupError, ValueError, OSError) as exc:
        if os.environ.get(ENV_DEBUG):
            raise
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
