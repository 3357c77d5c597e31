"""Open-ended scene-graph detection scoring (R@K, mR@K) and region-classification SS."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from .core import Region, Relation, SceneGraph
from .defaults import MATCH_IOU, RECALL_K
from .geometry import iou_box

OBJECT_TEMPLATE = "The object is {class_name}"
PREDICATE_TEMPLATE = "Object is {predicate} another object"

_PLACEHOLDER_RE = re.compile(r"\{[a-z_]*\}")


class SimilarityProvider(Protocol):
    name: str

    def similarity(self, a: str, b: str) -> float: ...


class LexicalEmbedder:
    """Character-trigram count vectors, L2-normalized; cosine similarity.

    Deterministic and dependency-free, so scores are reproducible anywhere.
    Text is lower-cased, whitespace-collapsed and padded with two spaces on
    each side before trigrams are taken.
    """

    name = "lexical-trigram"

    @staticmethod
    @lru_cache(maxsize=65536)
    def embed(text: str) -> dict[str, float]:
        padded = "  " + " ".join(text.lower().split()) + "  "
        counts = Counter(padded[i:i + 3] for i in range(len(padded) - 2))
        norm = math.sqrt(sum(c * c for c in counts.values()))
        return {g: c / norm for g, c in counts.items()}

    def similarity(self, a: str, b: str) -> float:
        ea, eb = self.embed(a), self.embed(b)
        if len(eb) < len(ea):
            ea, eb = eb, ea
        return sum(v * eb.get(g, 0.0) for g, v in ea.items())


class SentenceEmbeddingProvider:
    """Cosine similarity over a sentence-transformers model (loaded lazily)."""

    def __init__(self, model_name: str = "sentence-transformers/all-MiniLM-L6-v2"):
        self.name = model_name
        self._model = None
        self._cache: dict[str, object] = {}

    def _embed(self, text: str):
        if text not in self._cache:
            if self._model is None:
                from sentence_transformers import SentenceTransformer

                self._model = SentenceTransformer(self.name)
            self._cache[text] = self._model.encode(text, normalize_embeddings=True)
        return self._cache[text]

    def similarity(self, a: str, b: str) -> float:
        return float(self._embed(a) @ self._embed(b))


def fill_template(template: str, value: str) -> str:
    return _PLACEHOLDER_RE.sub(lambda _m: value, template, count=1)


@dataclass(frozen=True)
class LabelSpace:
    object_classes: tuple[str, ...]
    predicate_classes: tuple[str, ...]
    object_template: str = OBJECT_TEMPLATE
    predicate_template: str = PREDICATE_TEMPLATE

    def __post_init__(self) -> None:
        for label, classes in (("object", self.object_classes),
                               ("predicate", self.predicate_classes)):
            if not classes:
                raise ValueError(f"{label} class list is empty")
            if len(set(classes)) != len(classes):
                raise ValueError(f"{label} class list has duplicates")

    @classmethod
    def from_files(cls, object_path: str | Path, predicate_path: str | Path) -> "LabelSpace":
        return cls(read_class_list(object_path), read_class_list(predicate_path))


def read_class_list(path: str | Path) -> tuple[str, ...]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return tuple(s for s in (line.strip() for line in lines) if s)


def assign_label(text: str, classes: Sequence[str], template: str,
                 provider: SimilarityProvider) -> int:
    if not classes:
        raise ValueError("no classes to assign from")
    query = fill_template(template, text)
    best, best_sim = 0, -math.inf
    for i, c in enumerate(classes):
        sim = provider.similarity(query, fill_template(template, c))
        if sim > best_sim:
            best, best_sim = i, sim
    return best


class _Labeler:
    """Memoizes label assignment for one label space and provider."""

    def __init__(self, labels: LabelSpace, provider: SimilarityProvider):
        self.labels = labels
        self.provider = provider
        self._obj: dict[str, int] = {}
        self._pred: dict[str, int] = {}

    def obj(self, text: str) -> int:
        if text not in self._obj:
            self._obj[text] = assign_label(text, self.labels.object_classes,
                                           self.labels.object_template, self.provider)
        return self._obj[text]

    def pred(self, text: str) -> int:
        if text not in self._pred:
            self._pred[text] = assign_label(text, self.labels.predicate_classes,
                                            self.labels.predicate_template, self.provider)
        return self._pred[text]


@dataclass(frozen=True)
class LabeledTriplet:
    subject_box: object
    object_box: object
    subject_label: int
    predicate_label: int
    object_label: int


def label_triplets(graph: SceneGraph, relations: Sequence[Relation],
                   labeler: _Labeler) -> list[LabeledTriplet]:
    regions = graph.region_map()
    out = []
    for rel in relations:
        s: Region = regions[rel.subject_id]
        o: Region = regions[rel.object_id]
        out.append(LabeledTriplet(s.bbox, o.bbox, labeler.obj(s.name),
                                  labeler.pred(rel.predicate), labeler.obj(o.name)))
    return out


def triplet_matches(pred: LabeledTriplet, gt: LabeledTriplet,
                    iou_threshold: float = MATCH_IOU) -> bool:
    if (pred.subject_label, pred.predicate_label, pred.object_label) != (
            gt.subject_label, gt.predicate_label, gt.object_label):
        return False
    if None in (pred.subject_box, pred.object_box, gt.subject_box, gt.object_box):
        return False
    return (iou_box(pred.subject_box, gt.subject_box) > iou_threshold
            and iou_box(pred.object_box, gt.object_box) > iou_threshold)


@dataclass(frozen=True)
class MatchResult:
    # per GT triplet: index of the matching prediction, or None
    gt_matches: tuple[int | None, ...]
    recall_at_k: float
    mean_recall_at_k: float
    # predicate class -> (matched GT, total GT)
    per_predicate: dict[str, tuple[int, int]] = field(default_factory=dict)
    num_predictions: int = 0

    @property
    def matched(self) -> int:
        return sum(m is not None for m in self.gt_matches)

    @property
    def per_predicate_recall(self) -> dict[str, float]:
        return {p: m / t for p, (m, t) in self.per_predicate.items()}


def match_triplets(
    predicted: SceneGraph,
    gt: SceneGraph,
    k: int = RECALL_K,
    labels: LabelSpace | None = None,
    provider: SimilarityProvider | None = None,
    predicted_relations: Sequence[Relation] | None = None,
    gt_relations: Sequence[Relation] | None = None,
    iou_threshold: float = MATCH_IOU,
) -> MatchResult:
    """Recall of GT triplets among the first ``k`` predicted ones.

    A GT triplet is matched by the first still-unmatched prediction, in
    emission order, whose subject and object boxes both exceed
    ``iou_threshold`` IoU with the GT boxes and whose three labels agree.
    Each prediction matches at most one GT triplet.
    """
    if k < 1:
        raise ValueError(f"k must be positive, got {k}")
    gt_rels = list(gt.relations if gt_relations is None else gt_relations)
    if not gt_rels:
        raise ValueError(f"image {gt.image_id!r} has no ground-truth triplets")
    if labels is None:
        raise ValueError("a LabelSpace is required")
    labeler = _Labeler(labels, provider or LexicalEmbedder())
    return _match(predicted, gt, k, labeler, predicted_relations, gt_rels, iou_threshold)


def _match(predicted, gt, k, labeler, predicted_relations, gt_rels, iou_threshold):
    pred_rels = list(predicted.relations if predicted_relations is None else predicted_relations)
    num_predictions = len(pred_rels)
    preds = label_triplets(predicted, pred_rels[:k], labeler)
    gts = label_triplets(gt, gt_rels, labeler)
    used: set[int] = set()
    matches: list[int | None] = []
    for g in gts:
        hit = None
        for pi, p in enumerate(preds):
            if pi not in used and triplet_matches(p, g, iou_threshold):
                hit = pi
                break
        if hit is not None:
            used.add(hit)
        matches.append(hit)
    per_pred: dict[str, list[int]] = {}
    names = labeler.labels.predicate_classes
    for g, m in zip(gts, matches):
        slot = per_pred.setdefault(names[g.predicate_label], [0, 0])
        slot[1] += 1
        slot[0] += m is not None
    per_predicate = {p: (v[0], v[1]) for p, v in sorted(per_pred.items())}
    recall = sum(m is not None for m in matches) / len(gts)
    mean_recall = sum(m / t for m, t in per_predicate.values()) / len(per_predicate)
    return MatchResult(tuple(matches), recall, mean_recall, per_predicate, num_predictions)


@dataclass(frozen=True)
class DatasetScore:
    recall_at_k: float
    mean_recall_at_k: float
    per_image_mean_recall_at_k: float
    mean_predicted_relations: float
    per_predicate: dict[str, tuple[int, int]]
    per_image: tuple[tuple[str, MatchResult | None], ...]
    k: int
    provider: str

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "provider": self.provider,
            "images": len(self.per_image),
            "scored_images": sum(r is not None for _, r in self.per_image),
            "recall_at_k": self.recall_at_k,
            "mean_recall_at_k": self.mean_recall_at_k,
            "per_image_mean_recall_at_k": self.per_image_mean_recall_at_k,
            "mean_predicted_relations": self.mean_predicted_relations,
            "per_predicate": {p: {"matched": m, "total": t}
                              for p, (m, t) in self.per_predicate.items()},
            "per_image": [
                {"image_id": iid, "skipped": True} if r is None else {
                    "image_id": iid,
                    "recall_at_k": r.recall_at_k,
                    "mean_recall_at_k": r.mean_recall_at_k,
                    "matched": r.matched,
                    "gt_triplets": len(r.gt_matches),
                    "predicted_triplets": r.num_predictions,
                    "gt_matches": list(r.gt_matches),
                }
                for iid, r in self.per_image
            ],
        }


def score_dataset(
    pairs: Iterable[tuple[SceneGraph, SceneGraph]],
    k: int = RECALL_K,
    labels: LabelSpace | None = None,
    provider: SimilarityProvider | None = None,
    iou_threshold: float = MATCH_IOU,
) -> DatasetScore:
    """Micro-averaged R@K and global mR@K over (predicted, gt) image pairs.

    Images whose ground truth has no triplets are listed but not scored; they
    still count toward the mean number of predicted relations.
    """
    if labels is None:
        raise ValueError("a LabelSpace is required")
    provider = provider or LexicalEmbedder()
    labeler = _Labeler(labels, provider)
    per_image: list[tuple[str, MatchResult | None]] = []
    matched = total = 0
    n_pred = 0
    totals: dict[str, list[int]] = {}
    for predicted, gt in pairs:
        n_pred += len(predicted.relations)
        if not gt.relations:
            per_image.append((gt.image_id, None))
            continue
        res = _match(predicted, gt, k, labeler, None, list(gt.relations), iou_threshold)
        per_image.append((gt.image_id, res))
        matched += res.matched
        total += len(res.gt_matches)
        for p, (m, t) in res.per_predicate.items():
            slot = totals.setdefault(p, [0, 0])
            slot[0] += m
            slot[1] += t
    per_predicate = {p: (v[0], v[1]) for p, v in sorted(totals.items())}
    scored = [r for _, r in per_image if r is not None]
    return DatasetScore(
        recall_at_k=matched / total if total else 0.0,
        mean_recall_at_k=(sum(m / t for m, t in per_predicate.values()) / len(per_predicate)
                          if per_predicate else 0.0),
        per_image_mean_recall_at_k=(sum(r.mean_recall_at_k for r in scored) / len(scored)
                                    if scored else 0.0),
        mean_predicted_relations=n_pred / len(per_image) if per_image else 0.0,
        per_predicate=per_predicate,
        per_image=tuple(per_image),
        k=k,
        provider=getattr(provider, "name", type(provider).__name__),
    )


def region_classification_ss(
    predictions: Sequence[tuple[Region | None, str]],
    gt_classes: Sequence[str],
    provider: SimilarityProvider | None = None,
) -> float:
    """Mean similarity between predicted region texts and their GT class names."""
    if len(predictions) != len(gt_classes):
        raise ValueError(
            f"{len(predictions)} predictions but {len(gt_classes)} ground-truth classes")
    if not predictions:
        raise ValueError("no predictions to score")
    provider = provider or LexicalEmbedder()
    sims = [provider.similarity(text, gt) for (_, text), gt in zip(predictions, gt_classes)]
    return sum(sims) / len(sims)
