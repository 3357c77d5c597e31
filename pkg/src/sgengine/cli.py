"""Command-line tools for building, filtering and scoring scene-graph datasets.

Exit codes: 0 success, 1 data error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence, TypeVar

from . import defaults
from .core import DatasetRecord, SceneGraph
from .evalsuite import LabelSpace, LexicalEmbedder, SentenceEmbeddingProvider, score_dataset
from .filters import ConfigError, FilterReport, MissingScoreError, PredicateRuleMap
from .pipeline import (
    ImageResult,
    PipelineConfig,
    PipelineContext,
    ProposalSet,
    ProposalSource,
    annotate_graph,
    StatsAccumulator,
    edit_record,
    filter_record,
    merge_records,
    refine_proposals,
    run_pipeline,
    validate_record,
)
from .records import (
    RecordFormatError,
    candidate_to_json,
    load_proposals,
    read_jsonl,
    read_proposal_sets,
    read_records,
    write_jsonl,
    write_records,
)
from .sgtext import EditSet, SgTextError, parse_edit_set, parse_scene_graph_text
from .teacher import (
    TransportConfig,
    TransportError,
    build_edit_prompt,
    build_relation_prompt,
    call_with_retry,
    load_transport,
)

log = logging.getLogger("sgengine")

EXIT_OK, EXIT_DATA, EXIT_CONFIG = 0, 1, 2

T = TypeVar("T")
R = TypeVar("R")


class DataError(Exception):
    pass


def _pmap(fn: Callable[[T], R], items: Sequence[T], workers: int) -> list[R]:
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _dump(obj: Any, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def _sidecar(out: str, explicit: str | None) -> Path:
    return Path(explicit) if explicit else Path(out + ".diagnostics.jsonl")


def _write_diagnostics(graphs: Iterable[SceneGraph], path: Path, extra: Iterable[dict] = ()) -> int:
    rows = [dict(d) for d in extra]
    for g in graphs:
        for d in g.diagnostics:
            row = {"image_id": g.image_id, "stage": d.stage, "message": d.message}
            if d.line is not None:
                row["line"] = d.line
            rows.append(row)
    return write_jsonl(rows, path)


def _load_rule_map(path: str | None) -> PredicateRuleMap:
    return PredicateRuleMap.load(path) if path else PredicateRuleMap.default()


def _load_transport(path: str, name: str | None = None) -> TransportConfig:
    try:
        return load_transport(path, name=name)
    except (OSError, ValueError, TypeError) as exc:
        raise ConfigError(f"bad transport config {path}: {exc}") from exc


def _captions(path: str | None) -> dict[str, dict]:
    if not path:
        return {}
    return {str(row["image_id"]): row for row in read_jsonl(path)}


# ---------------------------------------------------------------------------
# commands


def cmd_refine_proposals(args: argparse.Namespace) -> int:
    grouped: dict[str, list[ProposalSet]] = {}
    for path in args.inputs:
        for image_id, source, cands in read_proposal_sets(path):
            try:
                src = ProposalSource(source)
            except ValueError:
                src = ProposalSource.OTHER
            grouped.setdefault(image_id, []).append(ProposalSet(src, tuple(cands)))
    if not grouped:
        log.warning("no proposals found in %s", ", ".join(args.inputs))
    items = list(grouped.items())
    survivors = _pmap(lambda kv: refine_proposals(kv[1], args.iou, args.k), items, args.workers)
    write_jsonl(({"image_id": iid, "source": ProposalSource.OTHER.value,
                  "proposals": [candidate_to_json(c) for c in cands]}
                 for (iid, _), cands in zip(items, survivors)), args.out)
    return EXIT_OK


def cmd_validate_regions(args: argparse.Namespace) -> int:
    records = list(read_records(args.graphs))
    proposals = load_proposals(args.proposals)
    out = _pmap(lambda r: validate_record(r, proposals.get(r.image_id, ()), args.iou),
                records, args.workers)
    write_records(out, args.out)
    _write_diagnostics((r.scene_graph for r in out), _sidecar(args.out, args.diagnostics))
    return EXIT_OK


def _graph_summary(graphs: Sequence[SceneGraph]) -> dict[str, Any]:
    regions = sum(len(g.regions) for g in graphs)
    relations = sum(len(g.relations) for g in graphs)
    subjects = sum(len({r.subject_id for r in g.relations}) for g in graphs)
    return {
        "relations": relations,
        "objects": regions,
        "relations_per_region": relations / regions if regions else 0.0,
        "relations_per_subject": relations / subjects if subjects else 0.0,
    }


def filter_report_summary(before: Sequence[SceneGraph], after: Sequence[SceneGraph],
                          reports: Sequence[FilterReport]) -> dict[str, Any]:
    """Aggregate per-image filter reports into raw-vs-filtered tallies."""
    by_cat: dict[str, dict[str, int]] = {}
    reasons: dict[str, int] = {}
    kept = removed = 0
    for rep in reports:
        kept += len(rep.kept)
        removed += len(rep.removed)
        for cat, c in rep.counts.items():
            slot = by_cat.setdefault(cat, {"raw": 0, "filtered": 0, "removed": 0})
            slot["raw"] += c["input"]
            slot["filtered"] += c["kept"]
            slot["removed"] += c["removed"]
        for reason, n in rep.removed_by_reason.items():
            reasons[reason] = reasons.get(reason, 0) + n
    return {
        "images": len(reports),
        "input": kept + removed,
        "kept": kept,
        "removed": removed,
        "removed_by_reason": dict(sorted(reasons.items())),
        "by_category": dict(sorted(by_cat.items())),
        "raw": _graph_summary(before),
        "filtered": _graph_summary(after),
    }


def _similarity_scores(path: str | None) -> dict[str, dict[tuple[int, str, int], float]] | None:
    if not path:
        return None
    out: dict[str, dict[tuple[int, str, int], float]] = {}
    for row in read_jsonl(path):
        try:
            key = (int(row["subject"]), str(row["predicate"]), int(row["object"]))
            out.setdefault(str(row["image_id"]), {})[key] = float(row["score"])
        except (KeyError, TypeError, ValueError) as exc:
            raise RecordFormatError(f"{path}: malformed similarity row {row!r}: {exc}") from exc
    return out


def cmd_filter(args: argparse.Namespace) -> int:
    rule_map = _load_rule_map(args.rules)
    judges = [_load_transport(p, name=Path(p).stem) for p in (args.judges or [])]
    scores = _similarity_scores(args.sim_scores)
    records = list(read_records(args.graphs))

    def work(rec: DatasetRecord) -> tuple[DatasetRecord, FilterReport]:
        return filter_record(
            rec, rule_map=rule_map, judges=judges,
            similarity_scores=None if scores is None else scores.get(rec.image_id, {}),
            similarity_threshold=args.sim_threshold)

    results = _pmap(work, records, args.workers)
    out = [r for r, _ in results]
    write_records(out, args.out)
    summary = filter_report_summary([r.scene_graph for r in records],
                                    [r.scene_graph for r in out], [rep for _, rep in results])
    _dump(summary, args.report)
    _write_diagnostics((r.scene_graph for r in out), _sidecar(args.out, args.diagnostics))
    return EXIT_OK


def load_edit_files(paths: Iterable[str]) -> dict[str, list[EditSet]]:
    """Edit lines: ``{"image_id": ..., "raw": "<model text>"}`` or ``{"image_id": ..., "edits": {...}}``."""
    out: dict[str, list[EditSet]] = {}
    for path in paths:
        for row in read_jsonl(path):
            if "image_id" not in row:
                raise RecordFormatError(f"{path}: edit line without image_id")
            if "raw" in row:
                text = str(row["raw"])
            elif "edits" in row:
                text = json.dumps(row["edits"])
            else:
                raise RecordFormatError(f"{path}: edit line needs 'raw' or 'edits'")
            try:
                edits = parse_edit_set(text)
            except SgTextError as exc:
                raise RecordFormatError(f"{path}: image {row['image_id']}: {exc}") from exc
            out.setdefault(str(row["image_id"]), []).append(edits)
    return out


def cmd_edit_apply(args: argparse.Namespace) -> int:
    edits = load_edit_files(args.edits)
    records = list(read_records(args.graphs))

    def work(rec: DatasetRecord) -> DatasetRecord:
        for e in edits.get(rec.image_id, []):
            rec = edit_record(rec, e)
        return rec

    out = _pmap(work, records, args.workers)
    known = {r.image_id for r in records}
    orphan = [{"image_id": iid, "stage": "edit-apply", "message": "edits for unknown image"}
              for iid in edits if iid not in known]
    write_records(out, args.out)
    _write_diagnostics((r.scene_graph for r in out), _sidecar(args.out, args.diagnostics), orphan)
    return EXIT_OK


def cmd_merge(args: argparse.Namespace) -> int:
    a_recs = list(read_records(args.a))
    b_by_id: dict[str, DatasetRecord] = {}
    for r in read_records(args.b):
        if r.image_id in b_by_id:
            raise DataError(f"{args.b}: duplicate image_id {r.image_id!r}")
        b_by_id[r.image_id] = r
    a_ids = {r.image_id for r in a_recs}

    def work(rec: DatasetRecord) -> DatasetRecord:
        other = b_by_id.get(rec.image_id)
        return rec if other is None else merge_records(rec, other, args.iou)

    out = _pmap(work, a_recs, args.workers)
    out += [r for iid, r in b_by_id.items() if iid not in a_ids]
    write_records(out, args.out)
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    acc = StatsAccumulator()
    for path in args.graphs:
        for rec in read_records(path):
            acc.add(rec)
    _dump(acc.result().to_dict(), args.out)
    return EXIT_OK


def _provider(name: str):
    return LexicalEmbedder() if name == "lexical" else SentenceEmbeddingProvider(name)


def load_predictions(pred: str, gts: Sequence[SceneGraph]) -> list[SceneGraph]:
    """Predicted graphs aligned with ``gts``; a directory holds ``<image_id>.txt`` model outputs."""
    p = Path(pred)
    out = []
    if p.is_dir():
        for gt in gts:
            f = p / f"{gt.image_id}.txt"
            empty = SceneGraph(gt.image_id, gt.image_width, gt.image_height)
            if not f.exists():
                out.append(empty)
                continue
            try:
                out.append(parse_scene_graph_text(f.read_text(encoding="utf-8"),
                                                  gt.image_width, gt.image_height, gt.image_id))
            except SgTextError as exc:
                log.warning("%s: %s; scored as empty", f, exc)
                out.append(empty)
        return out
    by_id = {r.image_id: r.scene_graph for r in read_records(p)}
    return [by_id.get(g.image_id, SceneGraph(g.image_id, g.image_width, g.image_height))
            for g in gts]


def cmd_eval(args: argparse.Namespace) -> int:
    gts = [r.scene_graph for r in read_records(args.gt)]
    try:
        labels = LabelSpace.from_files(*args.classes)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"bad class lists: {exc}") from exc
    preds = load_predictions(args.pred, gts)
    score = score_dataset(zip(preds, gts), args.k, labels, _provider(args.provider))
    _dump(score.to_dict(), args.out)
    return EXIT_OK


def _dry_run(requests: Iterable[tuple[str, Any]]) -> int:
    for image_id, req in requests:
        sys.stdout.write(json.dumps({"image_id": image_id, "digest": req.digest,
                                     "request": req.to_dict()}, ensure_ascii=False) + "\n")
    return EXIT_OK


def cmd_annotate(args: argparse.Namespace) -> int:
    caps = _captions(args.captions)
    records = list(read_records(args.graphs))

    def request(rec: DatasetRecord):
        c = caps.get(rec.image_id, {})
        return build_relation_prompt(rec.scene_graph, c.get("captions", ()),
                                     c.get("region_captions", ()), c.get("qas", ()),
                                     args.min_subjects)

    if not args.transport:
        return _dry_run((r.image_id, request(r)) for r in records)
    if not args.out:
        raise ConfigError("--out is required when a transport is configured")
    tc = _load_transport(args.transport)

    def work(rec: DatasetRecord) -> tuple[DatasetRecord, dict]:
        req = request(rec)
        text = call_with_retry(tc.transport, req, tc.retry)
        graph = annotate_graph(rec.scene_graph, text)
        return replace(rec, scene_graph=graph), {"image_id": rec.image_id,
                                                 "digest": req.digest, "raw": text}

    results = _pmap(work, records, args.workers)
    write_records([r for r, _ in results], args.out)
    write_jsonl([resp for _, resp in results], args.responses or args.out + ".responses.jsonl")
    _write_diagnostics((r.scene_graph for r, _ in results), _sidecar(args.out, args.diagnostics))
    return EXIT_OK


def cmd_edit_generate(args: argparse.Namespace) -> int:
    caps = _captions(args.captions)
    records = list(read_records(args.graphs))

    def request(rec: DatasetRecord):
        return build_edit_prompt(rec.scene_graph,
                                 caps.get(rec.image_id, {}).get("dense_caption", ""))

    if not args.transport:
        return _dry_run((r.image_id, request(r)) for r in records)
    if not args.out:
        raise ConfigError("--out is required when a transport is configured")
    tc = _load_transport(args.transport)

    def work(rec: DatasetRecord) -> dict:
        req = request(rec)
        text = call_with_retry(tc.transport, req, tc.retry)
        row: dict[str, Any] = {"image_id": rec.image_id, "digest": req.digest, "raw": text}
        try:
            row["edits"] = parse_edit_set(text).to_dict()
        except SgTextError as exc:
            row["error"] = str(exc)
        return row

    write_jsonl(_pmap(work, records, args.workers), args.out)
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    """Run a declarative stage list in one process."""
    try:
        config = PipelineConfig.load(args.config) if args.config else PipelineConfig.default()
    except (OSError, ValueError) as exc:
        raise ConfigError(f"bad pipeline config: {exc}") from exc
    if args.workers > 1:
        config = PipelineConfig(config.stages, args.workers)
    ctx = PipelineContext(
        proposals=load_proposals(args.proposals or []),
        captions=_captions(args.captions),
        teacher=_load_transport(args.teacher) if args.teacher else None,
        editor=_load_transport(args.editor) if args.editor else None,
        judges=[_load_transport(p, name=Path(p).stem) for p in (args.judges or [])],
        rule_map=_load_rule_map(args.rules),
        similarity_scores=_similarity_scores(args.sim_scores),
    )
    records = list(read_records(args.graphs))
    results: list[ImageResult] = run_pipeline(records, config, ctx)
    write_records([r.record for r in results], args.out)
    if args.report:
        filtered = [r for r in results if r.filter_report is not None]
        _dump(filter_report_summary([r.pre_filter for r in filtered],
                                    [r.record.scene_graph for r in filtered],
                                    [r.filter_report for r in filtered]), args.report)
    if args.responses:
        write_jsonl([dict(resp, image_id=r.record.image_id)
                     for r in results for resp in r.responses], args.responses)
    _write_diagnostics((r.record.scene_graph for r in results),
                       _sidecar(args.out, args.diagnostics))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sgengine", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, fn, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=fn)
        p.add_argument("--workers", type=int, default=1, help="per-image worker threads")
        return p

    p = add("refine-proposals", cmd_refine_proposals, "union proposal sets and run area NMS")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--iou", type=float, default=defaults.PROPOSAL_NMS_IOU)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out", required=True)

    p = add("validate-regions", cmd_validate_regions, "drop regions no proposal supports")
    p.add_argument("--graphs", required=True)
    p.add_argument("--proposals", nargs="+", required=True)
    p.add_argument("--iou", type=float, default=defaults.REGION_VALIDATION_IOU)
    p.add_argument("--out", required=True)
    p.add_argument("--diagnostics")

    p = add("filter", cmd_filter, "rule, judge and similarity relation filtering")
    p.add_argument("--graphs", required=True)
    p.add_argument("--rules", help="predicate rule map (default: bundled 22-entry map)")
    p.add_argument("--judges", nargs="*", help="transport config per judge model")
    p.add_argument("--sim-threshold", type=float, default=defaults.SIMILARITY_THRESHOLD)
    p.add_argument("--sim-scores", help="JSONL similarity scores; enables the similarity filter")
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--diagnostics")

    p = add("edit-apply", cmd_edit_apply, "apply SG-Edit edit sets")
    p.add_argument("--graphs", required=True)
    p.add_argument("--edits", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--diagnostics")

    p = add("merge", cmd_merge, "merge two annotations of the same images")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--iou", type=float, default=defaults.MERGE_IOU)
    p.add_argument("--out", required=True)

    p = add("stats", cmd_stats, "dataset statistics")
    p.add_argument("--graphs", nargs="+", required=True)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "scene-graph detection R@K / mR@K")
    p.add_argument("--pred", required=True, help="record file or directory of <image_id>.txt")
    p.add_argument("--gt", required=True)
    p.add_argument("--k", type=int, default=defaults.RECALL_K)
    p.add_argument("--classes", nargs=2, required=True, metavar=("OBJECTS", "PREDICATES"))
    p.add_argument("--provider", default="lexical",
                   help="'lexical' or a sentence-transformers model name")
    p.add_argument("--out", required=True)

    for name, fn, help_ in (("annotate", cmd_annotate, "teacher relation annotation"),
                            ("edit-generate", cmd_edit_generate, "request SG-Edit edit sets")):
        p = add(name, fn, help_)
        p.add_argument("--graphs", required=True)
        p.add_argument("--transport", help="transport config; omit for a dry run")
        p.add_argument("--captions", help="JSONL of per-image captions")
        p.add_argument("--out")
        if name == "annotate":
            p.add_argument("--min-subjects", type=int, default=defaults.MIN_SUBJECTS)
            p.add_argument("--responses")
            p.add_argument("--diagnostics")

    p = add("run", cmd_run, "run a pipeline config end to end")
    p.add_argument("--graphs", required=True)
    p.add_argument("--config")
    p.add_argument("--proposals", nargs="*")
    p.add_argument("--captions")
    p.add_argument("--teacher")
    p.add_argument("--editor")
    p.add_argument("--judges", nargs="*")
    p.add_argument("--rules")
    p.add_argument("--sim-scores")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--responses")
    p.add_argument("--diagnostics")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (RecordFormatError, DataError, MissingScoreError, SgTextError, TransportError,
            ValueError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
