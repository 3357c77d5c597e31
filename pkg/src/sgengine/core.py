"""Scene-graph value types and the two structural operations on them.

Everything here is an immutable value. Pipeline stages build new graphs with
:func:`dataclasses.replace` instead of mutating.
"""

from __future__ import annotations

import enum
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

MAX_REGIONS = 99
MAX_RELATIONS_PER_SUBJECT = 20
DEPTH_MIN, DEPTH_MAX = 0, 255

STAGE_ORDER = ("raw", "validated", "filtered", "edited", "merged")


class IntegrityError(ValueError):
    """A relation points at a region id the graph does not contain."""


@dataclass(frozen=True, slots=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.x2 - self.x1, 0.0) * max(self.y2 - self.y1, 0.0)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True, slots=True)
class Mask:
    """Binary raster stored as column-major run lengths, background first."""

    width: int
    height: int
    runs: tuple[int, ...]

    @classmethod
    def from_array(cls, array: np.ndarray) -> "Mask":
        arr = np.asarray(array, dtype=bool)
        if arr.ndim != 2:
            raise ValueError(f"mask array must be 2-D, got shape {arr.shape}")
        height, width = arr.shape
        flat = arr.flatten(order="F")
        if flat.size == 0:
            return cls(width, height, ())
        change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
        bounds = np.concatenate(([0], change, [flat.size]))
        runs = np.diff(bounds).tolist()
        if flat[0]:
            runs.insert(0, 0)
        return cls(width, height, tuple(int(r) for r in runs))

    def to_array(self) -> np.ndarray:
        if sum(self.runs) != self.width * self.height:
            raise ValueError(
                f"run lengths sum to {sum(self.runs)}, expected {self.width * self.height}"
            )
        values = np.zeros(len(self.runs), dtype=bool)
        values[1::2] = True
        flat = np.repeat(values, self.runs)
        return flat.reshape((self.height, self.width), order="F")

    @property
    def area(self) -> int:
        return int(sum(self.runs[1::2]))

    def bounding_box(self) -> BBox | None:
        arr = self.to_array()
        ys, xs = np.nonzero(arr)
        if xs.size == 0:
            return None
        return BBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


class RelationCategory(str, enum.Enum):
    SPATIAL = "spatial"
    INTERACTIONAL = "interactional"
    FUNCTIONAL = "functional"
    SOCIAL = "social"
    EMOTIONAL = "emotional"

    @classmethod
    def parse(cls, value: "str | RelationCategory | None") -> "RelationCategory | None":
        """Case-insensitive lookup. ``None`` passes through; unknown tags raise."""
        if value is None or isinstance(value, RelationCategory):
            return value
        key = str(value).strip().lower()
        # teacher output sometimes uses the adjective with a trailing noun
        key = key.removesuffix(" relationships").removesuffix(" relationship")
        key = key.removesuffix(" relations").removesuffix(" relation")
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown relation category {value!r}") from None


@dataclass(frozen=True, slots=True)
class Region:
    id: int
    name: str
    bbox: BBox | None
    mask: Mask | None = None
    depth: int | None = None


@dataclass(frozen=True, slots=True)
class Relation:
    subject_id: int
    object_id: int
    predicate: str
    category: RelationCategory | None = None

    @property
    def key(self) -> tuple[int, int, str]:
        return (self.subject_id, self.object_id, normalize_predicate(self.predicate))


@dataclass(frozen=True, slots=True)
class Diagnostic:
    """A non-fatal note produced while parsing or transforming a graph."""

    stage: str
    message: str
    line: int | None = None


@dataclass(frozen=True, slots=True)
class SceneGraph:
    image_id: str
    image_width: int
    image_height: int
    regions: tuple[Region, ...] = ()
    relations: tuple[Relation, ...] = ()
    diagnostics: tuple[Diagnostic, ...] = field(default=(), compare=False, repr=False)

    def region_map(self) -> dict[int, Region]:
        out: dict[int, Region] = {}
        for region in self.regions:
            out.setdefault(region.id, region)
        return out

    def with_diagnostics(self, extra: Iterable[Diagnostic]) -> "SceneGraph":
        return replace(self, diagnostics=self.diagnostics + tuple(extra))


@dataclass(frozen=True, slots=True)
class DatasetRecord:
    scene_graph: SceneGraph
    source: str = ""
    provenance: tuple[str, ...] = ("raw",)

    @property
    def image_id(self) -> str:
        return self.scene_graph.image_id

    def advance(self, graph: SceneGraph, stage: str) -> "DatasetRecord":
        """Return a record holding ``graph`` with ``stage`` appended to provenance."""
        if stage not in STAGE_ORDER:
            raise ValueError(f"unknown provenance stage {stage!r}")
        if self.provenance and STAGE_ORDER.index(stage) < STAGE_ORDER.index(self.provenance[-1]):
            raise ValueError(
                f"stage {stage!r} cannot follow {self.provenance[-1]!r} in provenance"
            )
        return replace(self, scene_graph=graph, provenance=self.provenance + (stage,))


@dataclass(frozen=True, slots=True)
class Violation:
    field: str
    rule: str
    message: str


def normalize_predicate(predicate: str) -> str:
    return " ".join(predicate.split()).casefold()


def canonicalize(graph: SceneGraph,
                 max_per_subject: int | None = MAX_RELATIONS_PER_SUBJECT) -> SceneGraph:
    """Drop duplicate relations and cap each subject at 20 outgoing relations.

    Duplicates share subject, object and normalized predicate; the first one
    wins. ``max_per_subject=None`` skips the cap. Raises
    :class:`IntegrityError` on a dangling endpoint.
    """
    ids = {r.id for r in graph.regions}
    seen: set[tuple[int, int, str]] = set()
    per_subject: dict[int, int] = defaultdict(int)
    kept: list[Relation] = []
    for rel in graph.relations:
        if rel.subject_id not in ids or rel.object_id not in ids:
            raise IntegrityError(
                f"relation ({rel.subject_id}, {rel.predicate!r}, {rel.object_id}) "
                f"references a region missing from image {graph.image_id!r}"
            )
        key = rel.key
        if key in seen:
            continue
        seen.add(key)
        if max_per_subject is not None and per_subject[rel.subject_id] >= max_per_subject:
            continue
        per_subject[rel.subject_id] += 1
        kept.append(rel)
    if len(kept) == len(graph.relations):
        return graph
    return replace(graph, relations=tuple(kept))


def validate(graph: SceneGraph) -> list[Violation]:
    out: list[Violation] = []

    def bad(where: str, rule: str, message: str) -> None:
        out.append(Violation(where, rule, message))

    if graph.image_width <= 0 or graph.image_height <= 0:
        bad("image", "positive_dimensions",
            f"image size {graph.image_width}x{graph.image_height} is not positive")
    if len(graph.regions) > MAX_REGIONS:
        bad("regions", "region_count", f"{len(graph.regions)} regions exceeds {MAX_REGIONS}")

    seen_ids: set[int] = set()
    for idx, region in enumerate(graph.regions):
        where = f"regions[{idx}]"
        if region.id in seen_ids:
            bad(f"{where}.id", "unique_id", f"duplicate region id {region.id}")
        seen_ids.add(region.id)
        if not 0 <= region.id < MAX_REGIONS:
            bad(f"{where}.id", "id_range", f"region id {region.id} outside [0, {MAX_REGIONS - 1}]")
        b = region.bbox
        if b is not None:
            if min(b.x1, b.y1, b.x2, b.y2) < 0:
                bad(f"{where}.bbox", "non_negative", f"negative coordinate in {b.as_list()}")
            if b.x1 > b.x2 or b.y1 > b.y2:
                bad(f"{where}.bbox", "corner_order", f"corners out of order in {b.as_list()}")
        if region.depth is not None and not DEPTH_MIN <= region.depth <= DEPTH_MAX:
            bad(f"{where}.depth", "depth_range",
                f"depth {region.depth} outside [{DEPTH_MIN}, {DEPTH_MAX}]")
        m = region.mask
        if m is not None:
            if (m.width, m.height) != (graph.image_width, graph.image_height):
                bad(f"{where}.mask", "mask_dimensions",
                    f"mask is {m.width}x{m.height}, image is "
                    f"{graph.image_width}x{graph.image_height}")
            if sum(m.runs) != m.width * m.height:
                bad(f"{where}.mask", "run_length_sum",
                    f"runs sum to {sum(m.runs)}, expected {m.width * m.height}")
            elif m.area == 0:
                bad(f"{where}.mask", "empty_mask", "mask has no foreground pixels")

    per_subject: dict[int, int] = defaultdict(int)
    for idx, rel in enumerate(graph.relations):
        where = f"relations[{idx}]"
        if rel.subject_id == rel.object_id:
            bad(where, "self_loop", f"relation on region {rel.subject_id} points at itself")
        for end, rid in (("subject_id", rel.subject_id), ("object_id", rel.object_id)):
            if rid not in seen_ids:
                bad(f"{where}.{end}", "dangling_endpoint", f"region {rid} does not exist")
        if not rel.predicate.strip():
            bad(f"{where}.predicate", "non_empty", "predicate is empty")
        per_subject[rel.subject_id] += 1
    for sid, count in per_subject.items():
        if count > MAX_RELATIONS_PER_SUBJECT:
            bad("relations", "relation_cap",
                f"region {sid} has {count} outgoing relations (max {MAX_RELATIONS_PER_SUBJECT})")
    return out


def validate_record(record: DatasetRecord) -> list[Violation]:
    out = validate(record.scene_graph)
    ranks = []
    for tag in record.provenance:
        if tag not in STAGE_ORDER:
            out.append(Violation("provenance", "known_stage", f"unknown stage tag {tag!r}"))
        else:
            ranks.append(STAGE_ORDER.index(tag))
    if ranks != sorted(ranks):
        out.append(Violation("provenance", "stage_order",
                             f"provenance {list(record.provenance)} is not in pipeline order"))
    return out
