"""Region-token scene-graph text and the edit-set object format.

Scene graphs travel to and from models as two blocks::

    Objects:
    region2: fence <|box_start|>(0,175),(1000,504)<|box_end|>
    region4: person <|box_start|>(102,253),(431,964)<|box_end|>
    Relations:
    region4: region3 standing on, region7 beside

Box coordinates are normalized to 0-1000. Parsing is forgiving: malformed
lines are skipped and reported, never raised, unless the ``Objects:`` header
is missing entirely.
"""

from __future__ import annotations

import ast
import json
import re
from dataclasses import dataclass, field
from typing import Any

from .core import (
    Diagnostic,
    Region,
    Relation,
    RelationCategory,
    SceneGraph,
    normalize_predicate,
)
from .geometry import NORM_SCALE, NormBBox, denormalize_box, normalize_box


class SgTextError(ValueError):
    """Raised when model output has nothing recoverable in it."""


_NUM = r"(-?\d+(?:\.\d+)?)"
BOX_RE = re.compile(
    r"<\|box_start\|>\s*\(\s*" + _NUM + r"\s*,\s*" + _NUM + r"\s*\)\s*,\s*\(\s*"
    + _NUM + r"\s*,\s*" + _NUM + r"\s*\)\s*<\|box_end\|>"
)
_MASK_POS_RE = re.compile(r"<mask>\s*<pos>")
_REGION_TOKEN_RE = re.compile(
    r"^region(\d+)(\s*<mask>\s*<pos>)?(?:\s*(" + BOX_RE.pattern + r"))?$"
)
_LINE_RE = re.compile(r"^\s*region(\d+)\s*:\s*(.*?)\s*$")
_ITEM_RE = re.compile(r"^\s*region(\d+)\s+(\S.*?)\s*$")
_HEADER_RE = re.compile(r"^[\s*#_`]*(objects|relations)\s*:[\s*_`]*$", re.IGNORECASE)


# ---------------------------------------------------------------------------
# region tokens


@dataclass(frozen=True, slots=True)
class RegionToken:
    id: int
    has_mask_pos: bool = False
    norm_bbox: NormBBox | None = None

    def __str__(self) -> str:
        return format_region_token(self.id, self.norm_bbox, self.has_mask_pos)


def format_box_token(nb: NormBBox) -> str:
    return f"<|box_start|>({nb.x1},{nb.y1}),({nb.x2},{nb.y2})<|box_end|>"


def format_region_token(region_id: int, norm_bbox: NormBBox | None = None,
                        mask_pos: bool = False) -> str:
    parts = [f"region{region_id}"]
    if mask_pos:
        parts.append("<mask> <pos>")
    if norm_bbox is not None:
        parts.append(format_box_token(norm_bbox))
    return " ".join(parts)


def _box_from_match(m: re.Match, offset: int = 0) -> NormBBox:
    vals = []
    for g in m.groups()[offset:offset + 4]:
        v = float(g)
        if v != int(v):
            raise ValueError(f"non-integer coordinate {g}")
        vals.append(int(v))
    return NormBBox(*vals)


def parse_region_token(text: str) -> RegionToken:
    m = _REGION_TOKEN_RE.match(text.strip())
    if not m:
        raise SgTextError(f"not a region token: {text!r}")
    try:
        box = _box_from_match(m, offset=3) if m.group(3) else None
    except ValueError as exc:
        raise SgTextError(f"bad box in region token {text!r}: {exc}") from exc
    return RegionToken(int(m.group(1)), bool(m.group(2)), box)


# ---------------------------------------------------------------------------
# scene-graph blocks


@dataclass(frozen=True, slots=True)
class SgTextDocument:
    objects: tuple[tuple[int, str, NormBBox | None], ...] = ()
    relations: tuple[tuple[int, tuple[tuple[int, str], ...]], ...] = ()
    diagnostics: tuple[Diagnostic, ...] = ()
    # line bookkeeping: every input line lands in exactly one of these
    accepted_lines: tuple[int, ...] = ()
    rejected_lines: tuple[int, ...] = ()
    blank_lines: tuple[int, ...] = ()
    # line number of each object / relation entry, parallel to the tuples above
    object_lines: tuple[int, ...] = field(default=(), repr=False)
    relation_lines: tuple[int, ...] = field(default=(), repr=False)


def _strip_markup(s: str) -> str:
    return s.replace("`", "").strip()


def _relation_items(body: str, rid: int, lineno: int,
                    diags: list[Diagnostic]) -> list[tuple[int, str]]:
    items: list[tuple[int, str]] = []
    for chunk in body.split(","):
        if not chunk.strip():
            continue
        im = _ITEM_RE.match(chunk)
        if not im:
            diags.append(Diagnostic(
                "sgtext", f"unparseable relation item {chunk.strip()!r} on region{rid}", lineno))
            continue
        items.append((int(im.group(1)), " ".join(im.group(2).split())))
    return items


def parse_sg_document(text: str) -> SgTextDocument:
    lines = text.splitlines()
    header_at = None
    for i, raw in enumerate(lines):
        m = _HEADER_RE.match(raw)
        if m and m.group(1).lower() == "objects":
            header_at = i
            break
    if header_at is None:
        raise SgTextError("no 'Objects:' header found in scene-graph text")

    diags: list[Diagnostic] = []
    accepted: list[int] = []
    rejected: list[int] = []
    blank: list[int] = []
    objects: list[tuple[int, str, NormBBox | None]] = []
    object_lines: list[int] = []
    relations: list[tuple[int, tuple[tuple[int, str], ...]]] = []
    relation_lines: list[int] = []

    def reject(lineno: int, msg: str) -> None:
        rejected.append(lineno)
        diags.append(Diagnostic("sgtext", msg, lineno))

    block = None
    dangling_comma = False
    for i, raw in enumerate(lines):
        line = _strip_markup(raw)
        if not line:
            blank.append(i)
            continue
        hm = _HEADER_RE.match(raw)
        if hm and i >= header_at:
            block = hm.group(1).lower()
            accepted.append(i)
            continue
        if block is None:
            reject(i, "text outside the Objects/Relations blocks")
            continue
        lm = _LINE_RE.match(line)
        if not lm and block == "relations" and dangling_comma and relations:
            # wrapped line: the previous relation list ended with a comma
            rid, prev = relations[-1]
            more = _relation_items(line, rid, i, diags)
            if more:
                relations[-1] = (rid, prev + tuple(more))
                accepted.append(i)
                dangling_comma = line.endswith(",")
                continue
        dangling_comma = False
        if not lm:
            reject(i, f"unrecognized {block} line: {line!r}")
            continue
        rid = int(lm.group(1))
        body = lm.group(2)
        if block == "objects":
            box = None
            bm = BOX_RE.search(body)
            if bm:
                try:
                    box = _box_from_match(bm)
                except ValueError as exc:
                    reject(i, f"bad box on region{rid}: {exc}")
                    continue
                body = body[:bm.start()] + body[bm.end():]
            elif "<|box_start|>" in body:
                reject(i, f"malformed box token on region{rid}")
                continue
            name = " ".join(_MASK_POS_RE.sub(" ", body).split())
            if not name:
                reject(i, f"region{rid} has no description")
                continue
            objects.append((rid, name, box))
            object_lines.append(i)
            accepted.append(i)
        else:
            items = _relation_items(body, rid, i, diags)
            if not items:
                reject(i, f"no relation items on region{rid}")
                continue
            relations.append((rid, tuple(items)))
            relation_lines.append(i)
            accepted.append(i)
            dangling_comma = body.endswith(",")

    return SgTextDocument(
        objects=tuple(objects),
        relations=tuple(relations),
        diagnostics=tuple(diags),
        accepted_lines=tuple(accepted),
        rejected_lines=tuple(rejected),
        blank_lines=tuple(blank),
        object_lines=tuple(object_lines),
        relation_lines=tuple(relation_lines),
    )


def parse_scene_graph_text(
    text: str, image_width: int, image_height: int, image_id: str = ""
) -> SceneGraph:
    """Parse model output into a :class:`SceneGraph` in pixel coordinates.

    Duplicate region ids keep the first occurrence. Relations that point at a
    region that did not parse, or at their own subject, are dropped. All
    skipped content is listed in ``graph.diagnostics``.
    """
    doc = parse_sg_document(text)
    diags = list(doc.diagnostics)
    regions: list[Region] = []
    known: set[int] = set()
    for (rid, name, nb), lineno in zip(doc.objects, doc.object_lines):
        if rid in known:
            diags.append(Diagnostic("sgtext", f"duplicate region{rid}; keeping the first", lineno))
            continue
        known.add(rid)
        bbox = denormalize_box(nb, image_width, image_height) if nb is not None else None
        regions.append(Region(rid, name, bbox))

    relations: list[Relation] = []
    for (sid, items), lineno in zip(doc.relations, doc.relation_lines):
        if sid not in known:
            diags.append(Diagnostic(
                "sgtext", f"relations for unknown subject region{sid} dropped", lineno))
            continue
        for oid, pred in items:
            if oid not in known:
                diags.append(Diagnostic(
                    "sgtext", f"relation region{sid} -> region{oid} {pred!r}: unknown object",
                    lineno))
            elif oid == sid:
                diags.append(Diagnostic(
                    "sgtext", f"self relation on region{sid} {pred!r} dropped", lineno))
            else:
                relations.append(Relation(sid, oid, pred))
    return SceneGraph(
        image_id=image_id,
        image_width=image_width,
        image_height=image_height,
        regions=tuple(regions),
        relations=tuple(relations),
        diagnostics=tuple(diags),
    )


def _clean_name(name: str) -> str:
    return " ".join(name.split())


def _clean_predicate(predicate: str) -> str:
    # commas delimit relation items, so they cannot survive inside a predicate
    return " ".join(predicate.replace(",", " ").split())


def emit_scene_graph_text(graph: SceneGraph, with_boxes: bool = True) -> str:
    out = ["Objects:"]
    for region in graph.regions:
        line = f"region{region.id}: {_clean_name(region.name)}"
        if with_boxes and region.bbox is not None:
            nb = normalize_box(region.bbox, graph.image_width, graph.image_height)
            line += " " + format_box_token(nb)
        out.append(line)
    out.append("Relations:")
    by_subject: dict[int, list[str]] = {}
    for rel in graph.relations:
        by_subject.setdefault(rel.subject_id, []).append(
            f"region{rel.object_id} {_clean_predicate(rel.predicate)}")
    emitted: set[int] = set()
    for region in graph.regions:
        if region.id in by_subject and region.id not in emitted:
            emitted.add(region.id)
            out.append(f"region{region.id}: " + ", ".join(by_subject[region.id]))
    for sid, items in by_subject.items():
        if sid not in emitted:
            out.append(f"region{sid}: " + ", ".join(items))
    return "\n".join(out) + "\n"


def region_listing(graph: SceneGraph, mask_pos: bool = True) -> str:
    """Comma-separated region tokens as used in student-model instructions."""
    tokens = []
    for region in graph.regions:
        nb = (normalize_box(region.bbox, graph.image_width, graph.image_height)
              if region.bbox is not None else None)
        tokens.append(format_region_token(region.id, nb, mask_pos))
    return ",\n".join(tokens)


# ---------------------------------------------------------------------------
# structured-object extraction


_FENCE_RE = re.compile(r"```[a-zA-Z0-9_-]*\s*\n?(.*?)```", re.DOTALL)
_TRAILING_COMMA_RE = re.compile(r",\s*([}\]])")


def _balanced_spans(text: str):
    """Yield (start, end) spans of brace-balanced ``{...}`` substrings."""
    for start, ch in enumerate(text):
        if ch != "{":
            continue
        depth = 0
        quote = None
        escaped = False
        for i in range(start, len(text)):
            c = text[i]
            if quote:
                if escaped:
                    escaped = False
                elif c == "\\":
                    escaped = True
                elif c == quote:
                    quote = None
                continue
            if c in "\"'":
                quote = c
            elif c == "{":
                depth += 1
            elif c == "}":
                depth -= 1
                if depth == 0:
                    yield start, i + 1
                    break


def _loads_lenient(candidate: str) -> Any:
    for attempt in (candidate, _TRAILING_COMMA_RE.sub(r"\1", candidate)):
        try:
            return json.loads(attempt)
        except json.JSONDecodeError:
            pass
        try:
            return ast.literal_eval(attempt)
        except (ValueError, SyntaxError, MemoryError, RecursionError):
            pass
    return None


def extract_object_literal(text: str) -> dict:
    """Find and decode the first object literal in free-form model output.

    Accepts code fences and surrounding prose, Python-style single quotes and
    trailing commas.
    """
    sources = [m.group(1) for m in _FENCE_RE.finditer(text)] + [text]
    for source in sources:
        for start, end in _balanced_spans(source):
            value = _loads_lenient(source[start:end])
            if isinstance(value, dict):
                return value
    raise SgTextError("no object literal found in text")


# ---------------------------------------------------------------------------
# edit sets


@dataclass(frozen=True, slots=True)
class RelationAdd:
    subject_id: int
    predicate: str
    object_id: int
    category: RelationCategory | None = None


@dataclass(frozen=True, slots=True)
class RelationRemove:
    subject_id: int
    predicate: str
    object_id: int


@dataclass(frozen=True, slots=True)
class EditSet:
    renames: tuple[tuple[int, str], ...] = ()
    additions: tuple[RelationAdd, ...] = ()
    removals: tuple[RelationRemove, ...] = ()
    diagnostics: tuple[Diagnostic, ...] = field(default=(), compare=False)

    def is_empty(self) -> bool:
        return not (self.renames or self.additions or self.removals)

    def to_dict(self) -> dict:
        """Canonical object form; ``parse_edit_set(json.dumps(e.to_dict()))`` == ``e``."""
        out: dict[str, dict] = {}

        def slot(sid: int) -> dict:
            return out.setdefault(str(sid), {})

        for sid, name in self.renames:
            slot(sid)["name"] = name
        for a in self.additions:
            adds = slot(a.subject_id).setdefault("rel", {}).setdefault("add", [])
            entry: dict[str, Any] = {"predicate": a.predicate, "object": a.object_id}
            if a.category is not None:
                entry["category"] = a.category.value
            adds.append(entry)
        for r in self.removals:
            rems = slot(r.subject_id).setdefault("rel", {}).setdefault("remove", [])
            rems.append({"predicate": r.predicate, "object": r.object_id})
        return out


_ADD_KEYS = {"add", "added", "adds", "addition", "additions", "new"}
_REMOVE_KEYS = {"remove", "removed", "removes", "removal", "removals", "delete", "deleted"}
_NAME_KEYS = {"name", "new_name", "description", "desc", "revised_name"}
_REL_KEYS = {"rel", "rels", "relation", "relations", "relationship", "relationships"}
_BBOX_KEYS = {"bbox", "box", "bounding_box"}
_ID_LIST_KEYS = {"ids", "obj_ids", "object_ids", "objects", "object", "object_id", "obj_id",
                 "targets", "target"}
_PRED_KEYS = {"predicate", "rel_name", "relation", "rel", "name", "relationship"}
_CAT_KEYS = {"category", "type", "rel_type", "relation_type", "relationship_type"}
_ID_RE = re.compile(r"^\D*?(\d+)$")


def _coerce_id(value: Any) -> int | None:
    if isinstance(value, bool):
        return None
    if isinstance(value, int):
        return value
    if isinstance(value, float) and value.is_integer():
        return int(value)
    if isinstance(value, str):
        m = _ID_RE.match(value.strip())
        if m:
            return int(m.group(1))
    return None


def _as_category(value: Any) -> RelationCategory | None:
    if not isinstance(value, str):
        return None
    try:
        return RelationCategory.parse(value)
    except ValueError:
        return None


def _unflatten(obj: dict) -> dict:
    """Expand ``"4.rel.remove.on"``-style keys into nested objects."""
    if not any(isinstance(k, str) and "." in k for k in obj):
        return obj
    out: dict = {}
    for key, value in obj.items():
        parts = str(key).split(".") if isinstance(key, str) else [key]
        node = out
        for p in parts[:-1]:
            nxt = node.get(p)
            if not isinstance(nxt, dict):
                nxt = node[p] = {}
            node = nxt
        leaf = parts[-1]
        if isinstance(node.get(leaf), dict) and isinstance(value, dict):
            node[leaf].update(value)
        else:
            node[leaf] = value
    return out


def _is_pair_list(value: Any) -> bool:
    # [[8, "spatial"], [9, "spatial"]]
    return (isinstance(value, list) and bool(value)
            and all(isinstance(v, (list, tuple)) for v in value))


class _EditCollector:
    def __init__(self) -> None:
        self.renames: list[tuple[int, str]] = []
        self.additions: list[RelationAdd] = []
        self.removals: list[RelationRemove] = []
        self.diags: list[Diagnostic] = []

    def note(self, msg: str) -> None:
        self.diags.append(Diagnostic("edit-parse", msg))

    def ids(self, value: Any, where: str) -> tuple[list[int], RelationCategory | None]:
        """Object ids (and an optional category tag) from a loosely typed list."""
        if isinstance(value, (list, tuple)):
            items = list(value)
        elif isinstance(value, str) and "," in value:
            items = [v for v in value.split(",") if v.strip()]
        else:
            items = [value]
        ids: list[int] = []
        category = None
        for item in items:
            oid = _coerce_id(item)
            if oid is not None:
                ids.append(oid)
                continue
            cat = _as_category(item)
            if cat is not None:
                category = cat
                continue
            self.note(f"{where}: ignored list entry {item!r}")
        return ids, category

    def add(self, sid: int, pred: str, value: Any, category: RelationCategory | None,
            where: str) -> None:
        if _is_pair_list(value):
            for pair in value:
                self.add(sid, pred, pair, category, where)
            return
        if isinstance(value, dict):
            lowered = {str(k).lower(): v for k, v in value.items()}
            id_value = next((lowered[k] for k in _ID_LIST_KEYS if k in lowered), None)
            cat_value = next((lowered[k] for k in _CAT_KEYS if k in lowered), None)
            if id_value is None:
                self.note(f"{where}: no object ids for {pred!r}")
                return
            value = id_value
            if cat_value is not None:
                category = self.category(cat_value, where) or category
        ids, inline_cat = self.ids(value, where)
        category = inline_cat or category
        if not ids:
            self.note(f"{where}: no object ids for {pred!r}")
        for oid in ids:
            self.additions.append(RelationAdd(sid, pred, oid, category))

    def remove(self, sid: int, pred: str, value: Any, where: str) -> None:
        if _is_pair_list(value):
            for pair in value:
                self.remove(sid, pred, pair, where)
            return
        if isinstance(value, dict):
            lowered = {str(k).lower(): v for k, v in value.items()}
            value = next((lowered[k] for k in _ID_LIST_KEYS if k in lowered), [])
        ids, _ = self.ids(value, where)
        if not ids:
            self.note(f"{where}: no object ids for {pred!r}")
        for oid in ids:
            self.removals.append(RelationRemove(sid, pred, oid))

    def category(self, value: Any, where: str) -> RelationCategory | None:
        cat = _as_category(value)
        if cat is None:
            self.note(f"{where}: unknown relation category {value!r}")
        return cat

    def entry_list(self, sid: int, entries: list, adding: bool, where: str,
                   predicate: str | None = None) -> None:
        """Entries in list form, e.g. ``[{"predicate": "on", "object": 3}]`` or ``[8, "spatial"]``."""
        if predicate is not None and not any(isinstance(e, dict) for e in entries):
            if adding:
                self.add(sid, predicate, entries, None, where)
            else:
                self.remove(sid, predicate, entries, where)
            return
        for entry in entries:
            if not isinstance(entry, dict):
                self.note(f"{where}: ignored entry {entry!r}")
                continue
            lowered = {str(k).lower(): v for k, v in entry.items()}
            pred = predicate or next(
                (lowered[k] for k in _PRED_KEYS if isinstance(lowered.get(k), str)), None)
            if not pred:
                self.note(f"{where}: entry without predicate {entry!r}")
                continue
            id_value = next((lowered[k] for k in _ID_LIST_KEYS if k in lowered), None)
            if id_value is None:
                self.note(f"{where}: entry without object id {entry!r}")
                continue
            if adding:
                cat_value = next((lowered[k] for k in _CAT_KEYS if k in lowered), None)
                cat = self.category(cat_value, where) if cat_value is not None else None
                self.add(sid, pred, id_value, cat, where)
            else:
                self.remove(sid, pred, id_value, where)

    def action_block(self, sid: int, value: Any, adding: bool, where: str) -> None:
        if isinstance(value, list):
            self.entry_list(sid, value, adding, where)
            return
        if not isinstance(value, dict):
            if value not in (None, "", []):
                self.note(f"{where}: expected an object or list, got {value!r}")
            return
        for pred, ids in value.items():
            pred = str(pred)
            cat = _as_category(pred)
            if cat is not None and isinstance(ids, dict):
                # category-first nesting: {"spatial": {"on": [3]}}
                for inner_pred, inner_ids in ids.items():
                    if adding:
                        self.add(sid, str(inner_pred), inner_ids, cat, where)
                    else:
                        self.remove(sid, str(inner_pred), inner_ids, where)
            elif adding:
                self.add(sid, pred, ids, None, where)
            else:
                self.remove(sid, pred, ids, where)

    def rel_block(self, sid: int, rel: Any) -> None:
        where = f"object {sid} rel"
        if not isinstance(rel, dict):
            self.note(f"{where}: expected an object, got {type(rel).__name__}")
            return
        for key, value in rel.items():
            k = str(key).strip().lower()
            if k in _ADD_KEYS:
                self.action_block(sid, value, True, where)
            elif k in _REMOVE_KEYS:
                self.action_block(sid, value, False, where)
            elif isinstance(value, dict) and any(
                    str(x).lower() in _ADD_KEYS | _REMOVE_KEYS for x in value):
                # predicate-first nesting: {"on": {"remove": [4, 5], "add": [8, "spatial"]}}
                for action, ids in value.items():
                    a = str(action).strip().lower()
                    if a in _ADD_KEYS:
                        if isinstance(ids, list):
                            self.entry_list(sid, ids, True, where, predicate=str(key))
                        else:
                            self.add(sid, str(key), ids, None, where)
                    elif a in _REMOVE_KEYS:
                        if isinstance(ids, list):
                            self.entry_list(sid, ids, False, where, predicate=str(key))
                        else:
                            self.remove(sid, str(key), ids, where)
                    else:
                        self.note(f"{where}: unknown key {action!r} under {key!r}")
            else:
                self.note(f"{where}: unknown key {key!r} ignored")


def parse_edit_set(text: str) -> EditSet:
    """Parse an editor model's response into an :class:`EditSet`.

    The response is expected to hold one object keyed by region id, e.g.
    ``{"4": {"name": "red kite", "rel": {"add": {"above": [8, "spatial"]},
    "remove": {"on": [4, 5]}}}}``. Spelling and nesting variants are
    accepted; anything else is reported in ``diagnostics``. Bounding-box
    edits are rejected.
    """
    obj = _unflatten(extract_object_literal(text))
    c = _EditCollector()
    for key, body in obj.items():
        sid = _coerce_id(key)
        if sid is None:
            c.note(f"top-level key {key!r} is not an object id; ignored")
            continue
        if not isinstance(body, dict):
            c.note(f"object {sid}: expected an object, got {type(body).__name__}")
            continue
        for field_name, value in body.items():
            f = str(field_name).strip().lower()
            if f in _NAME_KEYS:
                if isinstance(value, str) and value.strip():
                    c.renames.append((sid, " ".join(value.split())))
                else:
                    c.note(f"object {sid}: empty or non-text name {value!r}")
            elif f in _REL_KEYS:
                c.rel_block(sid, value)
            elif f in _ADD_KEYS:
                c.action_block(sid, value, True, f"object {sid}")
            elif f in _REMOVE_KEYS:
                c.action_block(sid, value, False, f"object {sid}")
            elif f in _BBOX_KEYS:
                c.note(f"object {sid}: bounding-box edits are not allowed; ignored")
            else:
                c.note(f"object {sid}: unknown key {field_name!r} ignored")
    return EditSet(
        renames=tuple(c.renames),
        additions=tuple(c.additions),
        removals=tuple(c.removals),
        diagnostics=tuple(c.diags),
    )


def predicate_matches(a: str, b: str) -> bool:
    return normalize_predicate(a) == normalize_predicate(b)


__all__ = [
    "BOX_RE",
    "EditSet",
    "NORM_SCALE",
    "RegionToken",
    "RelationAdd",
    "RelationRemove",
    "SgTextDocument",
    "SgTextError",
    "emit_scene_graph_text",
    "extract_object_literal",
    "format_box_token",
    "format_region_token",
    "parse_edit_set",
    "parse_region_token",
    "parse_scene_graph_text",
    "parse_sg_document",
    "region_listing",
]
