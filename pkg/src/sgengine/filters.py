"""Relation filters: geometric rules, VQA-judge votes and similarity scores."""

from __future__ import annotations

import enum
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Hashable, Iterable, Mapping, Sequence

from .core import BBox, Region, Relation, RelationCategory, SceneGraph, normalize_predicate
from .defaults import DEPTH_MARGIN, SIMILARITY_THRESHOLD
from .geometry import intersection_area, normalize_box


class ConfigError(ValueError):
    """Rule-map or pipeline configuration is unusable."""


class JudgeWiringError(ValueError):
    """A relation reached the judge filter without any verdicts."""


class MissingScoreError(KeyError):
    pass


class SpatialRule(str, enum.Enum):
    ABOVE = "above"
    BELOW = "below"
    LEFT = "left"
    RIGHT = "right"
    OVERLAP = "overlap"
    ABOVE_OR_OVERLAP = "above_or_overlap"
    BELOW_OR_OVERLAP = "below_or_overlap"


class DepthRule(str, enum.Enum):
    BEHIND = "behind"
    IN_FRONT_OF = "in_front_of"


class RemovalReason(str, enum.Enum):
    RULE_VIOLATION = "rule_violation"
    JUDGE_REJECTION = "judge_rejection"
    SIMILARITY_BELOW_THRESHOLD = "similarity_below_threshold"


# ---------------------------------------------------------------------------
# rule semantics


def _center(lo: float, hi: float) -> float:
    return (lo + hi) / 2.0


def is_overlap(s: BBox, o: BBox) -> bool:
    return intersection_area(s, o) > 0


def is_above(s: BBox, o: BBox) -> bool:
    # overhang of s's bottom edge past o's top edge must stay under half the smaller height
    overhang = s.y2 - o.y1
    return (_center(s.y1, s.y2) < _center(o.y1, o.y2)
            and overhang < 0.5 * min(s.height, o.height))


def is_left(s: BBox, o: BBox) -> bool:
    overhang = s.x2 - o.x1
    return (_center(s.x1, s.x2) < _center(o.x1, o.x2)
            and overhang < 0.5 * min(s.width, o.width))


def eval_box_rule(rule: SpatialRule, s: BBox, o: BBox) -> bool:
    rule = SpatialRule(rule)
    if rule is SpatialRule.ABOVE:
        return is_above(s, o)
    if rule is SpatialRule.BELOW:
        return is_above(o, s)
    if rule is SpatialRule.LEFT:
        return is_left(s, o)
    if rule is SpatialRule.RIGHT:
        return is_left(o, s)
    if rule is SpatialRule.OVERLAP:
        return is_overlap(s, o)
    if rule is SpatialRule.ABOVE_OR_OVERLAP:
        return is_above(s, o) or is_overlap(s, o)
    return is_above(o, s) or is_overlap(s, o)


def eval_rule(rule: SpatialRule, subject: Region | BBox, object: Region | BBox,
              image_size: tuple[int, int] | None = None) -> bool:
    """Evaluate ``rule`` for the (subject, object) pair.

    With ``image_size`` the boxes are first normalized to the 0-1000 grid;
    the rules only compare ratios along each axis, so this matters only
    through rounding.
    """
    s = subject.bbox if isinstance(subject, Region) else subject
    o = object.bbox if isinstance(object, Region) else object
    if s is None or o is None:
        raise ValueError("rule evaluation needs a bounding box on both regions")
    if image_size is not None:
        w, h = image_size
        s = BBox(*normalize_box(s, w, h).as_tuple())
        o = BBox(*normalize_box(o, w, h).as_tuple())
    return eval_box_rule(rule, s, o)


def eval_depth_rule(rule: DepthRule, subject_depth: int, object_depth: int,
                    margin: int = DEPTH_MARGIN) -> bool:
    # larger depth value = closer to the camera
    if DepthRule(rule) is DepthRule.IN_FRONT_OF:
        return subject_depth > object_depth + margin
    return object_depth > subject_depth + margin


# ---------------------------------------------------------------------------
# predicate map


@dataclass(frozen=True)
class PredicateRuleMap:
    rules: Mapping[str, SpatialRule]
    depth_rules: Mapping[str, DepthRule] = field(default_factory=dict)
    depth_margin: int = DEPTH_MARGIN

    def lookup(self, predicate: str) -> SpatialRule | None:
        return self.rules.get(normalize_predicate(predicate))

    def lookup_depth(self, predicate: str) -> DepthRule | None:
        return self.depth_rules.get(normalize_predicate(predicate))

    def __len__(self) -> int:
        return len(self.rules)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PredicateRuleMap":
        if "rules" in data and isinstance(data["rules"], Mapping):
            raw_rules = data["rules"]
            raw_depth = data.get("depth_rules", {}) or {}
            margin = data.get("depth_margin", DEPTH_MARGIN)
        else:
            raw_rules, raw_depth, margin = data, {}, DEPTH_MARGIN
        rules: dict[str, SpatialRule] = {}
        for pred, name in raw_rules.items():
            try:
                rules[normalize_predicate(pred)] = SpatialRule(str(name).strip().lower())
            except ValueError:
                raise ConfigError(f"unknown rule {name!r} for predicate {pred!r}") from None
        depth: dict[str, DepthRule] = {}
        for pred, name in raw_depth.items():
            try:
                depth[normalize_predicate(pred)] = DepthRule(str(name).strip().lower())
            except ValueError:
                raise ConfigError(f"unknown depth rule {name!r} for predicate {pred!r}") from None
        if not isinstance(margin, int) or margin < 0:
            raise ConfigError(f"depth_margin must be a non-negative integer, got {margin!r}")
        return cls(rules, depth, margin)

    @classmethod
    def load(cls, path: str | Path) -> "PredicateRuleMap":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read rule map {path}: {exc}") from exc
        if not isinstance(data, Mapping):
            raise ConfigError(f"rule map {path} must hold an object")
        return cls.from_dict(data)

    @classmethod
    def default(cls) -> "PredicateRuleMap":
        text = resources.files("sgengine").joinpath("data/predicate_rules.json").read_text(
            encoding="utf-8")
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# reports


def _category_of(item: Any) -> str:
    rel = item[0] if isinstance(item, tuple) and item and isinstance(item[0], Relation) else item
    if isinstance(rel, Relation) and rel.category is not None:
        return rel.category.value
    return "uncategorized"


@dataclass(frozen=True)
class FilterReport:
    kept: tuple = ()
    removed: tuple[tuple[Any, RemovalReason], ...] = ()

    @property
    def counts(self) -> dict[str, dict[str, int]]:
        """Per-category ``input`` / ``kept`` / ``removed`` tallies."""
        kept = Counter(_category_of(x) for x in self.kept)
        removed = Counter(_category_of(x) for x, _ in self.removed)
        cats = sorted(set(kept) | set(removed))
        return {c: {"input": kept[c] + removed[c], "kept": kept[c], "removed": removed[c]}
                for c in cats}

    @property
    def removed_by_reason(self) -> dict[str, int]:
        return dict(sorted(Counter(r.value for _, r in self.removed).items()))

    def then(self, later: "FilterReport") -> "FilterReport":
        """Chain a report computed on ``self.kept`` after this one."""
        return FilterReport(later.kept, self.removed + later.removed)

    def apply(self, graph: SceneGraph) -> SceneGraph:
        kept = set(self.kept)
        return SceneGraph(graph.image_id, graph.image_width, graph.image_height,
                          graph.regions, tuple(r for r in graph.relations if r in kept),
                          graph.diagnostics)


def _partition(items: Iterable[Any], keep_fn, reason: RemovalReason) -> FilterReport:
    kept, removed = [], []
    for item in items:
        if keep_fn(item):
            kept.append(item)
        else:
            removed.append((item, reason))
    return FilterReport(tuple(kept), tuple(removed))


# ---------------------------------------------------------------------------
# filters


def rule_checkable(rel: Relation, graph: SceneGraph, rule_map: PredicateRuleMap) -> bool:
    regions = graph.region_map()
    s, o = regions.get(rel.subject_id), regions.get(rel.object_id)
    if s is None or o is None:
        return False
    if rule_map.lookup(rel.predicate) is not None:
        return s.bbox is not None and o.bbox is not None
    if rule_map.lookup_depth(rel.predicate) is not None:
        return s.depth is not None and o.depth is not None
    return False


def rule_filter(graph: SceneGraph, rule_map: PredicateRuleMap | None = None) -> FilterReport:
    """Drop relations whose mapped spatial rule fails on the region geometry.

    Unmapped predicates, and mapped ones lacking the boxes or depths the rule
    needs, pass through.
    """
    rule_map = rule_map or PredicateRuleMap.default()
    regions = graph.region_map()
    size = (graph.image_width, graph.image_height)

    def keep(rel: Relation) -> bool:
        if not rule_checkable(rel, graph, rule_map):
            return True
        s, o = regions[rel.subject_id], regions[rel.object_id]
        rule = rule_map.lookup(rel.predicate)
        if rule is not None:
            return eval_rule(rule, s, o, size)
        return eval_depth_rule(rule_map.lookup_depth(rel.predicate), s.depth, o.depth,
                               rule_map.depth_margin)

    return _partition(graph.relations, keep, RemovalReason.RULE_VIOLATION)


class Answer(str, enum.Enum):
    YES = "yes"
    NO = "no"
    ABSTAIN = "abstain"


@dataclass(frozen=True, slots=True)
class JudgeVerdict:
    judge_name: str
    answer: Answer
    raw_text: str = ""


_WORD_RE = re.compile(r"[a-z]+")


def parse_verdict(judge_name: str, raw_text: str) -> JudgeVerdict:
    """Read a yes/no answer; the first yes- or no-token wins."""
    for word in _WORD_RE.findall(raw_text.lower()):
        if word == "yes":
            return JudgeVerdict(judge_name, Answer.YES, raw_text)
        if word == "no":
            return JudgeVerdict(judge_name, Answer.NO, raw_text)
    return JudgeVerdict(judge_name, Answer.ABSTAIN, raw_text)


def judge_rejects(verdicts: Sequence[JudgeVerdict]) -> bool:
    # abstentions do not block
    return any(v.answer is Answer.NO for v in verdicts)


def judge_filter(
    relations: Sequence[tuple[Relation, str]],
    verdicts: Mapping[Relation, Sequence[JudgeVerdict]],
) -> FilterReport:
    """Remove a relation when any judge answered no.

    Spatial relations are left to the rule filter and pass through here.
    """
    kept, removed = [], []
    for rel, _phrase in relations:
        if rel.category is RelationCategory.SPATIAL:
            kept.append(rel)
            continue
        votes = verdicts.get(rel) or ()
        if not votes:
            raise JudgeWiringError(
                f"no judge verdicts for ({rel.subject_id}, {rel.predicate!r}, {rel.object_id})")
        if judge_rejects(votes):
            removed.append((rel, RemovalReason.JUDGE_REJECTION))
        else:
            kept.append(rel)
    return FilterReport(tuple(kept), tuple(removed))


def similarity_filter(
    pairs: Sequence[Hashable],
    scores: Mapping[Hashable, float],
    threshold: float = SIMILARITY_THRESHOLD,
) -> FilterReport:
    """Keep pairs scoring at least ``threshold``; lower scores are removed."""
    for pair in pairs:
        if pair not in scores:
            raise MissingScoreError(f"no similarity score for {pair!r}")
        if not -1.0 <= scores[pair] <= 1.0:
            raise ValueError(f"similarity score {scores[pair]} for {pair!r} outside [-1, 1]")
    return _partition(pairs, lambda p: scores[p] >= threshold,
                      RemovalReason.SIMILARITY_BELOW_THRESHOLD)


def relation_phrase(rel: Relation, graph: SceneGraph) -> str:
    regions = graph.region_map()
    return f"{regions[rel.subject_id].name} {rel.predicate} {regions[rel.object_id].name}"
