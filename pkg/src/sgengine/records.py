"""JSONL persistence for dataset records, proposals and edit files.

Record line schema (version 1)::

    {"schema_version": 1, "image_id": "...", "width": 640, "height": 480,
     "source": "vg", "provenance": ["raw", "validated"],
     "regions": [{"id": 0, "name": "dog", "bbox": [x1, y1, x2, y2],
                  "mask": {"size": [h, w], "counts": [...]}, "depth": 120}],
     "relations": [{"subject": 0, "predicate": "on", "object": 1,
                    "category": "spatial"}]}

``mask``, ``depth`` and ``category`` are optional; ``bbox`` may be null.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterable, Iterator, TextIO

from .core import BBox, DatasetRecord, Mask, Region, Relation, RelationCategory, SceneGraph
from .geometry import Candidate

SCHEMA_VERSION = 1


class RecordFormatError(ValueError):
    """A JSONL line does not follow the record schema."""


class SchemaVersionError(RecordFormatError):
    pass


def mask_to_json(mask: Mask) -> dict[str, Any]:
    return {"size": [mask.height, mask.width], "counts": list(mask.runs)}


def mask_from_json(data: dict[str, Any]) -> Mask:
    h, w = data["size"]
    return Mask(int(w), int(h), tuple(int(c) for c in data["counts"]))


def _bbox_from_json(data: Any) -> BBox | None:
    if data is None:
        return None
    if len(data) != 4:
        raise RecordFormatError(f"bbox must have 4 numbers, got {data!r}")
    return BBox(*(float(v) for v in data))


def _num(v: float) -> float | int:
    # integral floats written as ints keep files compact and stable
    return int(v) if float(v).is_integer() else v


def record_to_json(record: DatasetRecord) -> dict[str, Any]:
    g = record.scene_graph
    regions = []
    for r in g.regions:
        entry: dict[str, Any] = {
            "id": r.id,
            "name": r.name,
            "bbox": None if r.bbox is None else [_num(v) for v in r.bbox.as_list()],
        }
        if r.mask is not None:
            entry["mask"] = mask_to_json(r.mask)
        if r.depth is not None:
            entry["depth"] = r.depth
        regions.append(entry)
    relations = []
    for rel in g.relations:
        entry = {"subject": rel.subject_id, "predicate": rel.predicate, "object": rel.object_id}
        if rel.category is not None:
            entry["category"] = rel.category.value
        relations.append(entry)
    return {
        "schema_version": SCHEMA_VERSION,
        "image_id": g.image_id,
        "width": g.image_width,
        "height": g.image_height,
        "source": record.source,
        "provenance": list(record.provenance),
        "regions": regions,
        "relations": relations,
    }


def record_from_json(data: dict[str, Any]) -> DatasetRecord:
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"record schema_version {version!r} is not supported (expected {SCHEMA_VERSION})")
    try:
        regions = tuple(
            Region(
                id=int(r["id"]),
                name=str(r["name"]),
                bbox=_bbox_from_json(r.get("bbox")),
                mask=mask_from_json(r["mask"]) if r.get("mask") else None,
                depth=int(r["depth"]) if r.get("depth") is not None else None,
            )
            for r in data.get("regions", [])
        )
        relations = tuple(
            Relation(int(x["subject"]), int(x["object"]), str(x["predicate"]),
                     RelationCategory.parse(x.get("category")))
            for x in data.get("relations", [])
        )
        graph = SceneGraph(str(data["image_id"]), int(data["width"]), int(data["height"]),
                           regions, relations)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, RecordFormatError):
            raise
        raise RecordFormatError(f"malformed record: {exc}") from exc
    return DatasetRecord(graph, str(data.get("source", "")),
                         tuple(data.get("provenance", ["raw"])))


def dumps_record(record: DatasetRecord) -> str:
    return json.dumps(record_to_json(record), ensure_ascii=False)


def _iter_json_lines(path: str | Path) -> Iterator[tuple[int, dict[str, Any]]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordFormatError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            if not isinstance(data, dict):
                raise RecordFormatError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, data


def read_records(path: str | Path) -> Iterator[DatasetRecord]:
    for lineno, data in _iter_json_lines(path):
        try:
            yield record_from_json(data)
        except RecordFormatError as exc:
            raise type(exc)(f"{path}:{lineno}: {exc}") from exc


def write_records(records: Iterable[DatasetRecord], path_or_fh: str | Path | TextIO) -> int:
    if hasattr(path_or_fh, "write"):
        return _write_lines((dumps_record(r) for r in records), path_or_fh)
    with open(path_or_fh, "w", encoding="utf-8") as fh:
        return _write_lines((dumps_record(r) for r in records), fh)


def _write_lines(lines: Iterable[str], fh: TextIO) -> int:
    n = 0
    for line in lines:
        fh.write(line + "\n")
        n += 1
    return n


def write_jsonl(rows: Iterable[dict[str, Any]], path: str | Path) -> int:
    with open(path, "w", encoding="utf-8") as fh:
        return _write_lines((json.dumps(r, ensure_ascii=False) for r in rows), fh)


def read_jsonl(path: str | Path) -> Iterator[dict[str, Any]]:
    for _, data in _iter_json_lines(path):
        yield data


# ---------------------------------------------------------------------------
# proposals: {"image_id": ..., "source": "sam_whole", "proposals": [{"bbox": [...], "mask": {...}}]}


def candidate_to_json(c: Candidate) -> dict[str, Any]:
    out: dict[str, Any] = {"bbox": [_num(v) for v in c[0].as_list()]}
    if c[1] is not None:
        out["mask"] = mask_to_json(c[1])
    return out


def candidate_from_json(data: dict[str, Any]) -> Candidate:
    mask = mask_from_json(data["mask"]) if data.get("mask") else None
    box = _bbox_from_json(data.get("bbox"))
    if box is None:
        if mask is None:
            raise RecordFormatError("proposal needs a bbox or a mask")
        box = mask.bounding_box() or BBox(0, 0, 0, 0)
    return (box, mask)


def read_proposal_sets(path: str | Path) -> Iterator[tuple[str, str, list[Candidate]]]:
    """Yield ``(image_id, source, candidates)`` per line."""
    for lineno, data in _iter_json_lines(path):
        try:
            yield (str(data["image_id"]), str(data.get("source", "other")),
                   [candidate_from_json(p) for p in data.get("proposals", [])])
        except (KeyError, TypeError, ValueError) as exc:
            raise RecordFormatError(f"{path}:{lineno}: malformed proposal line: {exc}") from exc


def load_proposals(paths: Iterable[str | Path]) -> dict[str, list[Candidate]]:
    out: dict[str, list[Candidate]] = {}
    for path in paths:
        for image_id, _source, cands in read_proposal_sets(path):
            out.setdefault(image_id, []).extend(cands)
    return out
