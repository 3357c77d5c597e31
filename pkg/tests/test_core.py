import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgengine.core import (
    BBox,
    DatasetRecord,
    IntegrityError,
    Mask,
    Region,
    Relation,
    RelationCategory,
    SceneGraph,
    canonicalize,
    normalize_predicate,
    validate,
    validate_record,
)

from strategies import masks, scene_graphs


def _graph(relations, n=3):
    regions = tuple(Region(i, f"r{i}", BBox(0, 0, 10, 10)) for i in range(n))
    return SceneGraph("img", 100, 100, regions, tuple(relations))


def rules(graph):
    return {v.rule for v in validate(graph)}


class TestValues:
    def test_graph_is_immutable(self):
        g = _graph([])
        with pytest.raises(dataclasses.FrozenInstanceError):
            g.image_id = "other"

    def test_diagnostics_do_not_affect_equality(self):
        g = _graph([Relation(0, 1, "on")])
        assert g.with_diagnostics([]) == g
        from sgengine.core import Diagnostic
        assert g.with_diagnostics([Diagnostic("x", "note")]) == g

    def test_bbox_area_clamps_inverted(self):
        assert BBox(5, 5, 1, 1).area == 0
        assert BBox(0, 0, 4, 2).area == 8

    @pytest.mark.parametrize("text,expected", [
        ("Spatial", RelationCategory.SPATIAL),
        ("emotional relationships", RelationCategory.EMOTIONAL),
        (" Social Relations ", RelationCategory.SOCIAL),
        (None, None),
    ])
    def test_category_parse(self, text, expected):
        assert RelationCategory.parse(text) is expected

    def test_category_parse_unknown(self):
        with pytest.raises(ValueError):
            RelationCategory.parse("temporal")

    def test_normalize_predicate(self):
        assert normalize_predicate("  Standing   On ") == "standing on"


class TestMask:
    def test_runs_are_column_major_background_first(self):
        arr = np.array([[0, 1], [1, 1]], dtype=bool)
        # column-major: [0, 1, 1, 1]
        assert Mask.from_array(arr).runs == (1, 3)

    def test_leading_foreground_gets_zero_run(self):
        arr = np.array([[1, 0]], dtype=bool)
        assert Mask.from_array(arr).runs == (0, 1, 1)

    @settings(max_examples=200)
    @given(st.integers(1, 6).flatmap(lambda w: st.integers(1, 6).flatmap(
        lambda h: masks(w, h))))
    def test_round_trip(self, mask):
        arr = mask.to_array()
        assert Mask.from_array(arr) == mask
        assert mask.area == int(arr.sum())
        assert sum(mask.runs) == mask.width * mask.height

    def test_bounding_box(self):
        arr = np.zeros((5, 6), dtype=bool)
        arr[1:3, 2:5] = True
        assert Mask.from_array(arr).bounding_box() == BBox(2, 1, 5, 3)
        assert Mask.from_array(np.zeros((2, 2), dtype=bool)).bounding_box() is None

    def test_bad_run_sum(self):
        with pytest.raises(ValueError):
            Mask(2, 2, (1, 1)).to_array()


class TestCanonicalize:
    def test_duplicates_first_wins(self):
        g = _graph([Relation(0, 1, "on", RelationCategory.SPATIAL),
                    Relation(0, 1, "  ON ", None),
                    Relation(1, 0, "on")])
        out = canonicalize(g)
        assert out.relations == (g.relations[0], g.relations[2])

    def test_cap_keeps_first_twenty(self):
        rels = [Relation(1, 0, f"p{i}") for i in range(25)]
        out = canonicalize(_graph(rels))
        assert out.relations == tuple(rels[:20])

    def test_cap_is_per_subject(self):
        rels = [Relation(1, 0, f"p{i}") for i in range(22)] + \
               [Relation(2, 0, f"p{i}") for i in range(3)]
        out = canonicalize(_graph(rels))
        assert sum(r.subject_id == 1 for r in out.relations) == 20
        assert sum(r.subject_id == 2 for r in out.relations) == 3

    def test_no_cap(self):
        rels = [Relation(1, 0, f"p{i}") for i in range(25)]
        assert len(canonicalize(_graph(rels), max_per_subject=None).relations) == 25

    def test_dangling_endpoint(self):
        with pytest.raises(IntegrityError):
            canonicalize(_graph([Relation(0, 7, "on")]))

    @settings(max_examples=200)
    @given(scene_graphs())
    def test_idempotent_and_valid(self, g):
        once = canonicalize(g)
        assert canonicalize(once) == once
        keys = [r.key for r in once.relations]
        assert len(keys) == len(set(keys))
        assert "relation_cap" not in rules(once)


class TestValidate:
    def test_clean_graph(self):
        assert validate(_graph([Relation(0, 1, "on")])) == []

    @pytest.mark.parametrize("graph,rule", [
        (SceneGraph("x", 0, 10), "positive_dimensions"),
        (SceneGraph("x", 10, 10, tuple(Region(i, "r", BBox(0, 0, 1, 1)) for i in range(99))
                    + (Region(99, "r", BBox(0, 0, 1, 1)),)), "region_count"),
        (SceneGraph("x", 10, 10, (Region(1, "a", None), Region(1, "b", None))), "unique_id"),
        (SceneGraph("x", 10, 10, (Region(120, "a", None),)), "id_range"),
        (SceneGraph("x", 10, 10, (Region(1, "a", BBox(-1, 0, 2, 2)),)), "non_negative"),
        (SceneGraph("x", 10, 10, (Region(1, "a", BBox(5, 0, 2, 2)),)), "corner_order"),
        (SceneGraph("x", 10, 10, (Region(1, "a", None, depth=300),)), "depth_range"),
        (SceneGraph("x", 10, 10, (Region(1, "a", None, Mask(3, 3, (9,))),)), "mask_dimensions"),
        (SceneGraph("x", 2, 2, (Region(1, "a", None, Mask(2, 2, (1, 1))),)), "run_length_sum"),
        (SceneGraph("x", 2, 2, (Region(1, "a", None, Mask(2, 2, (4,))),)), "empty_mask"),
    ])
    def test_region_rules(self, graph, rule):
        assert rule in rules(graph)

    def test_relation_rules(self):
        g = _graph([Relation(0, 0, "on"), Relation(0, 9, "on"), Relation(0, 1, "  ")])
        assert {"self_loop", "dangling_endpoint", "non_empty"} <= rules(g)
        over = _graph([Relation(0, 1, f"p{i}") for i in range(21)])
        assert "relation_cap" in rules(over)

    def test_record_provenance(self):
        g = _graph([])
        assert validate_record(DatasetRecord(g, provenance=("raw", "filtered"))) == []
        bad = {v.rule for v in validate_record(
            DatasetRecord(g, provenance=("raw", "edited", "filtered", "shuffled")))}
        assert bad == {"known_stage", "stage_order"}


class TestProvenance:
    def test_advance_appends(self):
        rec = DatasetRecord(_graph([]))
        assert rec.advance(rec.scene_graph, "validated").provenance == ("raw", "validated")

    def test_advance_rejects_regression(self):
        rec = DatasetRecord(_graph([]), provenance=("raw", "edited"))
        with pytest.raises(ValueError):
            rec.advance(rec.scene_graph, "filtered")
        with pytest.raises(ValueError):
            rec.advance(rec.scene_graph, "bogus")

    def test_repeated_stage_allowed(self):
        rec = DatasetRecord(_graph([]), provenance=("raw", "filtered"))
        assert rec.advance(rec.scene_graph, "filtered").provenance[-1] == "filtered"
