"""Per-image pipeline stages and dataset statistics.

Stage functions take and return :class:`SceneGraph` values; the ``*_record``
variants and :func:`run_pipeline` also maintain record provenance.
"""

from __future__ import annotations

import enum
import json
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .core import (
    BBox,
    DatasetRecord,
    Diagnostic,
    Region,
    Relation,
    RelationCategory,
    SceneGraph,
    canonicalize,
    normalize_predicate,
)
from .defaults import (
    MERGE_IOU,
    PROPOSAL_NMS_IOU,
    REGION_VALIDATION_IOU,
    RELATION_CAP,
    SIMILARITY_THRESHOLD,
)
from .filters import (
    FilterReport,
    JudgeVerdict,
    PredicateRuleMap,
    judge_filter,
    parse_verdict,
    relation_phrase,
    rule_checkable,
    rule_filter,
    similarity_filter,
)
from .geometry import Candidate, candidate_iou, nms_by_area
from .sgtext import EditSet, SgTextError, parse_edit_set
from .teacher import (
    ChatRequest,
    TransportConfig,
    build_edit_prompt,
    build_judge_prompt,
    build_relation_prompt,
    call_with_retry,
    parse_relation_response,
    send_all,
)


class ProposalSource(str, enum.Enum):
    SAM_PART = "sam_part"
    SAM_WHOLE = "sam_whole"
    SEMSAM_G1 = "semsam_g1"
    SEMSAM_G2 = "semsam_g2"
    SEMSAM_ALL6 = "semsam_all6"
    OTHER = "other"


@dataclass(frozen=True)
class ProposalSet:
    source: ProposalSource
    proposals: tuple[Candidate, ...]


# ---------------------------------------------------------------------------
# proposals and region validation


def refine_proposals(sets: Sequence[ProposalSet], iou_threshold: float = PROPOSAL_NMS_IOU,
                     k: int = 100) -> list[Candidate]:
    """Union every proposal set, suppress overlaps and keep the ``k`` largest."""
    pooled = [c for s in sets for c in s.proposals]
    if not pooled:
        return []
    return nms_by_area(pooled, iou_threshold, k)


def _region_candidate(region: Region) -> Candidate | None:
    if region.bbox is None and region.mask is None:
        return None
    box = region.bbox if region.bbox is not None else (region.mask.bounding_box()
                                                       or BBox(0, 0, 0, 0))
    return (box, region.mask)


def best_proposal_iou(region: Region, proposals: Sequence[Candidate]) -> tuple[float, str]:
    cand = _region_candidate(region)
    best, kind = 0.0, "box"
    if cand is None:
        return best, kind
    for p in proposals:
        v, k = candidate_iou(cand, p)
        if v > best:
            best, kind = v, k
    return best, kind


def validate_regions(graph: SceneGraph, proposals: Sequence[Candidate],
                     iou_threshold: float = REGION_VALIDATION_IOU) -> SceneGraph:
    """Keep regions whose best proposal IoU is strictly above ``iou_threshold``.

    Relations touching a dropped region go with it. Each decision, with the
    measure used (mask or box IoU), is noted in the diagnostics.
    """
    kept: list[Region] = []
    notes: list[Diagnostic] = []
    for region in graph.regions:
        best, kind = best_proposal_iou(region, proposals)
        keep = best > iou_threshold
        notes.append(Diagnostic(
            "validate-regions",
            f"region {region.id}: best {kind} IoU {best:.4f} -> {'kept' if keep else 'dropped'}"))
        if keep:
            kept.append(region)
    ids = {r.id for r in kept}
    rels = tuple(r for r in graph.relations if r.subject_id in ids and r.object_id in ids)
    return replace(graph, regions=tuple(kept), relations=rels,
                   diagnostics=graph.diagnostics + tuple(notes))


# ---------------------------------------------------------------------------
# SG-Edit


def apply_edits(graph: SceneGraph, edits: EditSet) -> SceneGraph:
    """Apply renames, then removals, then additions; canonicalize the result.

    Edits naming unknown regions are rejected, and removals that match
    nothing are no-ops; both are noted in the diagnostics.
    """
    if edits.is_empty():
        return graph.with_diagnostics(edits.diagnostics) if edits.diagnostics else graph
    ids = {r.id for r in graph.regions}
    notes: list[Diagnostic] = list(edits.diagnostics)

    def note(msg: str) -> None:
        notes.append(Diagnostic("edit-apply", msg))

    names: dict[int, str] = {}
    for rid, name in edits.renames:
        if rid in ids:
            names[rid] = name
        else:
            note(f"rejected rename of unknown region {rid}")
    regions = tuple(replace(r, name=names[r.id]) if r.id in names else r for r in graph.regions)

    relations = list(graph.relations)
    for rm in edits.removals:
        if rm.subject_id not in ids or rm.object_id not in ids:
            note(f"rejected removal ({rm.subject_id}, {rm.predicate!r}, {rm.object_id}): "
                 "unknown region")
            continue
        key = (rm.subject_id, rm.object_id, normalize_predicate(rm.predicate))
        before = len(relations)
        relations = [r for r in relations if r.key != key]
        if len(relations) == before:
            note(f"removal ({rm.subject_id}, {rm.predicate!r}, {rm.object_id}) matched nothing")

    for add in edits.additions:
        if add.subject_id not in ids or add.object_id not in ids:
            note(f"rejected addition ({add.subject_id}, {add.predicate!r}, {add.object_id}): "
                 "unknown region")
        elif add.subject_id == add.object_id:
            note(f"rejected self relation on region {add.subject_id} {add.predicate!r}")
        elif not add.predicate.strip():
            note(f"rejected addition with empty predicate on region {add.subject_id}")
        else:
            relations.append(Relation(add.subject_id, add.object_id,
                                      " ".join(add.predicate.split()), add.category))

    out = replace(graph, regions=regions, relations=tuple(relations),
                  diagnostics=graph.diagnostics + tuple(notes))
    return canonicalize(out)


# ---------------------------------------------------------------------------
# merging


def _match_regions(a: SceneGraph, b: SceneGraph, iou_threshold: float) -> dict[int, int]:
    """Greedy one-to-one pairing by descending IoU; maps b ids to a ids."""
    cands = []
    a_c = [(r, _region_candidate(r)) for r in a.regions]
    b_c = [(r, _region_candidate(r)) for r in b.regions]
    for i, (ra, ca) in enumerate(a_c):
        if ca is None:
            continue
        for j, (rb, cb) in enumerate(b_c):
            if cb is None:
                continue
            v, _ = candidate_iou(ca, cb)
            if v > iou_threshold:
                cands.append((-v, i, j))
    cands.sort()
    used_a: set[int] = set()
    used_b: set[int] = set()
    mapping: dict[int, int] = {}
    for _, i, j in cands:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        mapping[b.regions[j].id] = a.regions[i].id
    return mapping


def merge_graphs(a: SceneGraph, b: SceneGraph,
                 iou_threshold: float = MERGE_IOU) -> SceneGraph:
    """Merge two annotations of one image, unifying duplicate regions.

    Regions of ``b`` pair with regions of ``a`` greedily by descending IoU;
    pairs above ``iou_threshold`` unify under ``a``'s id and name and ``b``'s
    relations are re-pointed. Unmatched ``b`` regions get fresh ids.
    """
    if a.image_id != b.image_id:
        raise ValueError(f"cannot merge graphs of different images: "
                         f"{a.image_id!r} vs {b.image_id!r}")
    if (a.image_width, a.image_height) != (b.image_width, b.image_height):
        raise ValueError(f"image {a.image_id!r} has inconsistent sizes: "
                         f"{a.image_width}x{a.image_height} vs {b.image_width}x{b.image_height}")
    mapping = _match_regions(a, b, iou_threshold)
    next_id = max((r.id for r in a.regions), default=-1) + 1
    regions = list(a.regions)
    for r in b.regions:
        if r.id in mapping:
            continue
        mapping[r.id] = next_id
        regions.append(replace(r, id=next_id))
        next_id += 1
    relations = list(a.relations) + [
        replace(rel, subject_id=mapping[rel.subject_id], object_id=mapping[rel.object_id])
        for rel in b.relations
        if rel.subject_id in mapping and rel.object_id in mapping
    ]
    # pairing is one-to-one, so only self loops already present in b survive to here
    relations = [r for r in relations if r.subject_id != r.object_id]
    merged = replace(a, regions=tuple(regions), relations=tuple(relations),
                     diagnostics=a.diagnostics + b.diagnostics)
    return canonicalize(merged)


# ---------------------------------------------------------------------------
# teacher annotation


def annotate_graph(graph: SceneGraph, response_text: str) -> SceneGraph:
    """Fold a teacher relation response into the graph (no relation cap yet)."""
    annotations, notes = parse_relation_response(response_text)
    diags = [Diagnostic("annotate", n) for n in notes]
    ids = {r.id for r in graph.regions}
    names: dict[int, str] = {}
    relations = list(graph.relations)
    for ann in annotations:
        if ann.id not in ids:
            diags.append(Diagnostic("annotate", f"subject {ann.id} is not a region; skipped"))
            continue
        if ann.description:
            names[ann.id] = " ".join(ann.description.split())
        for pred, oid, cat in ann.relations:
            if oid not in ids or oid == ann.id or not pred.strip():
                diags.append(Diagnostic(
                    "annotate", f"relation ({ann.id}, {pred!r}, {oid}) rejected"))
                continue
            relations.append(Relation(ann.id, oid, " ".join(pred.split()), cat))
    regions = tuple(replace(r, name=names[r.id]) if r.id in names else r for r in graph.regions)
    out = replace(graph, regions=regions, relations=tuple(relations),
                  diagnostics=graph.diagnostics + tuple(diags))
    return canonicalize(out, max_per_subject=None)


# ---------------------------------------------------------------------------
# filter stage


def judge_requests(graph: SceneGraph, relations: Sequence[Relation]) -> list[ChatRequest]:
    regions = graph.region_map()
    return [build_judge_prompt(regions[r.subject_id], r.predicate, regions[r.object_id],
                               graph.image_id) for r in relations]


def filter_graph(
    graph: SceneGraph,
    rule_map: PredicateRuleMap | None = None,
    judges: Sequence[TransportConfig] = (),
    similarity_scores: Mapping[tuple[int, str, int], float] | None = None,
    similarity_threshold: float = SIMILARITY_THRESHOLD,
    max_workers: int = 1,
) -> tuple[SceneGraph, FilterReport]:
    """Rule filter, then judge votes on the rest, then optional similarity, then cap.

    Judges only see non-spatial relations the rule map could not check. With
    no judges configured those relations pass through. ``similarity_scores``
    is keyed by ``(subject_id, predicate, object_id)``.
    """
    rule_map = rule_map or PredicateRuleMap.default()
    report = rule_filter(graph, rule_map)
    if judges:
        pending = [r for r in report.kept
                   if r.category is not RelationCategory.SPATIAL
                   and not rule_checkable(r, graph, rule_map)]
        verdicts: dict[Relation, list[JudgeVerdict]] = {r: [] for r in pending}
        if pending:
            requests = judge_requests(graph, pending)
            for judge in judges:
                answers = send_all(judge.transport, requests, judge.retry, max_workers)
                for rel, text in zip(pending, answers):
                    verdicts[rel].append(parse_verdict(judge.name, text))
        pending_set = set(pending)
        items = [(r, relation_phrase(r, graph)) for r in report.kept]
        judged = judge_filter([x for x in items if x[0] in pending_set], verdicts)
        # relations outside the judge's scope stay in input order
        rejected = {rel for rel, _ in judged.removed}
        report = report.then(FilterReport(
            tuple(r for r in report.kept if r not in rejected), judged.removed))
    if similarity_scores is not None:
        regions = graph.region_map()
        pairs, owners = [], {}
        for rel in report.kept:
            s, o = regions[rel.subject_id], regions[rel.object_id]
            crop = (f"{graph.image_id}#crop" if s.bbox is None or o.bbox is None
                    else build_judge_prompt(s, rel.predicate, o, graph.image_id).image_refs[0])
            pair = (relation_phrase(rel, graph), crop, rel.subject_id, rel.predicate,
                    rel.object_id)
            pairs.append(pair)
            owners[pair] = rel
        scores = {}
        for pair in pairs:
            key = (pair[2], pair[3], pair[4])
            if key in similarity_scores:
                scores[pair] = similarity_scores[key]
        sim = similarity_filter(pairs, scores, similarity_threshold)
        report = report.then(FilterReport(
            tuple(owners[p] for p in sim.kept),
            tuple((owners[p], reason) for p, reason in sim.removed)))
    filtered = canonicalize(report.apply(graph), max_per_subject=RELATION_CAP)
    return filtered, report


# ---------------------------------------------------------------------------
# statistics


_CATEGORY_KEYS = tuple(c.value for c in RelationCategory) + ("uncategorized",)


@dataclass(frozen=True)
class DatasetStats:
    images: int
    regions: int
    relations: int
    objects_per_image: float
    triplets_per_image: float
    predicates_per_region: float
    predicates_per_region_image_mean: float
    relations_by_category: dict[str, int]

    def to_dict(self) -> dict[str, Any]:
        return {
            "images": self.images,
            "regions": self.regions,
            "relations": self.relations,
            "objects_per_image": self.objects_per_image,
            "triplets_per_image": self.triplets_per_image,
            "predicates_per_region": self.predicates_per_region,
            "predicates_per_region_image_mean": self.predicates_per_region_image_mean,
            "relations_by_category": dict(self.relations_by_category),
        }


@dataclass
class StatsAccumulator:
    """Associative fold behind :func:`compute_stats`; shards combine with ``+``."""

    images: int = 0
    regions: int = 0
    relations: int = 0
    by_category: Counter = field(default_factory=Counter)
    ratio_sum: Fraction = Fraction(0)
    ratio_images: int = 0

    def add(self, record: DatasetRecord | SceneGraph) -> "StatsAccumulator":
        g = record.scene_graph if isinstance(record, DatasetRecord) else record
        self.images += 1
        self.regions += len(g.regions)
        self.relations += len(g.relations)
        for rel in g.relations:
            self.by_category[rel.category.value if rel.category else "uncategorized"] += 1
        if g.regions:
            self.ratio_sum += Fraction(len(g.relations), len(g.regions))
            self.ratio_images += 1
        return self

    def __add__(self, other: "StatsAccumulator") -> "StatsAccumulator":
        return StatsAccumulator(
            self.images + other.images,
            self.regions + other.regions,
            self.relations + other.relations,
            self.by_category + other.by_category,
            self.ratio_sum + other.ratio_sum,
            self.ratio_images + other.ratio_images,
        )

    def result(self) -> DatasetStats:
        def ratio(n: int | Fraction, d: int) -> float:
            return float(Fraction(n) / d) if d else 0.0

        return DatasetStats(
            images=self.images,
            regions=self.regions,
            relations=self.relations,
            objects_per_image=ratio(self.regions, self.images),
            triplets_per_image=ratio(self.relations, self.images),
            predicates_per_region=ratio(self.relations, self.regions),
            predicates_per_region_image_mean=ratio(self.ratio_sum, self.ratio_images),
            relations_by_category={k: self.by_category.get(k, 0) for k in _CATEGORY_KEYS},
        )


def compute_stats(records: Iterable[DatasetRecord | SceneGraph]) -> DatasetStats:
    acc = StatsAccumulator()
    for record in records:
        acc.add(record)
    return acc.result()


# ---------------------------------------------------------------------------
# record-level stages and the declarative runner


def validate_record(record: DatasetRecord, proposals: Sequence[Candidate],
                    iou_threshold: float = REGION_VALIDATION_IOU) -> DatasetRecord:
    return record.advance(validate_regions(record.scene_graph, proposals, iou_threshold),
                          "validated")


def edit_record(record: DatasetRecord, edits: EditSet) -> DatasetRecord:
    return record.advance(apply_edits(record.scene_graph, edits), "edited")


def filter_record(record: DatasetRecord, **kwargs) -> tuple[DatasetRecord, FilterReport]:
    graph, report = filter_graph(record.scene_graph, **kwargs)
    return record.advance(graph, "filtered"), report


def merge_records(a: DatasetRecord, b: DatasetRecord,
                  iou_threshold: float = MERGE_IOU) -> DatasetRecord:
    merged = merge_graphs(a.scene_graph, b.scene_graph, iou_threshold)
    source = a.source if a.source == b.source else "+".join(x for x in (a.source, b.source) if x)
    return replace(a, source=source).advance(merged, "merged")


STAGES = ("validate_regions", "annotate", "filter", "edit_generate", "edit_apply")


@dataclass(frozen=True)
class StageSpec:
    name: str
    params: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class PipelineConfig:
    stages: tuple[StageSpec, ...]
    workers: int = 1

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PipelineConfig":
        stages = []
        for entry in data.get("stages", []):
            if isinstance(entry, str):
                entry = {"stage": entry}
            name = entry.get("stage")
            if name not in STAGES:
                raise ValueError(f"unknown pipeline stage {name!r}; expected one of {STAGES}")
            stages.append(StageSpec(name, {k: v for k, v in entry.items() if k != "stage"}))
        return cls(tuple(stages), int(data.get("workers", 1)))

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def default(cls) -> "PipelineConfig":
        return cls.from_dict({"stages": list(STAGES)})


@dataclass
class PipelineContext:
    """External inputs the stages draw on, keyed by image id."""

    proposals: Mapping[str, Sequence[Candidate]] = field(default_factory=dict)
    captions: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)
    teacher: TransportConfig | None = None
    editor: TransportConfig | None = None
    judges: Sequence[TransportConfig] = ()
    rule_map: PredicateRuleMap | None = None
    similarity_scores: Mapping[str, Mapping[tuple[int, str, int], float]] | None = None


@dataclass
class ImageResult:
    record: DatasetRecord
    filter_report: FilterReport | None = None
    responses: list[dict[str, str]] = field(default_factory=list)
    edits: EditSet | None = None
    pre_filter: SceneGraph | None = None


def _captions(ctx: PipelineContext, image_id: str) -> Mapping[str, Any]:
    return ctx.captions.get(image_id, {})


def run_image(record: DatasetRecord, config: PipelineConfig,
              ctx: PipelineContext) -> ImageResult:
    result = ImageResult(record)
    for stage in config.stages:
        p = stage.params
        rec = result.record
        g = rec.scene_graph
        if stage.name == "validate_regions":
            result.record = validate_record(
                rec, ctx.proposals.get(rec.image_id, ()),
                float(p.get("iou", REGION_VALIDATION_IOU)))
        elif stage.name == "annotate":
            if ctx.teacher is None:
                continue
            caps = _captions(ctx, rec.image_id)
            req = build_relation_prompt(g, caps.get("captions", ()),
                                        caps.get("region_captions", ()), caps.get("qas", ()),
                                        int(p.get("min_subjects", 5)))
            text = call_with_retry(ctx.teacher.transport, req, ctx.teacher.retry)
            result.responses.append({"stage": "annotate", "digest": req.digest, "raw": text})
            result.record = replace(rec, scene_graph=annotate_graph(g, text))
        elif stage.name == "filter":
            if result.pre_filter is None:
                result.pre_filter = g
            scores = None
            if ctx.similarity_scores is not None:
                scores = ctx.similarity_scores.get(rec.image_id, {})
            result.record, report = filter_record(
                rec,
                rule_map=ctx.rule_map,
                judges=ctx.judges if p.get("judges", True) else (),
                similarity_scores=scores,
                similarity_threshold=float(p.get("sim_threshold", SIMILARITY_THRESHOLD)),
            )
            result.filter_report = (report if result.filter_report is None
                                    else result.filter_report.then(report))
        elif stage.name == "edit_generate":
            if ctx.editor is None:
                continue
            req = build_edit_prompt(g, _captions(ctx, rec.image_id).get("dense_caption", ""))
            text = call_with_retry(ctx.editor.transport, req, ctx.editor.retry)
            result.responses.append({"stage": "edit_generate", "digest": req.digest,
                                     "raw": text})
            try:
                result.edits = parse_edit_set(text)
            except SgTextError as exc:
                result.record = replace(rec, scene_graph=g.with_diagnostics(
                    [Diagnostic("edit-generate", f"unusable editor response: {exc}")]))
        elif stage.name == "edit_apply":
            if result.edits is None:
                continue
            result.record = edit_record(rec, result.edits)
    return result


def run_pipeline(records: Iterable[DatasetRecord], config: PipelineConfig,
                 ctx: PipelineContext) -> list[ImageResult]:
    """Run the configured stages on every record; results keep input order."""
    records = list(records)
    work: Callable[[DatasetRecord], ImageResult] = lambda r: run_image(r, config, ctx)
    if config.workers <= 1:
        return [work(r) for r in records]
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        return list(pool.map(work, records))
