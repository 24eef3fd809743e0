"""Described-object detection metrics.

Each caption (query) is scored as its own category. ``nms_ap`` first runs a
class-ignored NMS per image over every caption's detections, so a model that
fires on both halves of a contradictory pair keeps only one of the boxes.
"""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    EmptyCandidates,
    FormatError,
    InvalidBox,
    MixedImages,
    NoNegativeQueries,
    NonFiniteInput,
    NoPositiveQueries,
)

logger = logging.getLogger(__name__)

DEFAULT_IOU_THRESH = 0.5
DEFAULT_SCORE_THRESH = 0.3
DEFAULT_MAX_DETS = 100

# Exact i/100 values so recall/IoU comparisons are reproducible.
RECALL_THRESHOLDS = np.arange(101) / 100.0
COCO_IOU_THRESHOLDS = np.arange(50, 100, 5) / 100.0


class Protocol(str, Enum):
    COCO = "coco"
    AP50 = "ap50"

    @property
    def iou_thresholds(self) -> np.ndarray:
        return COCO_IOU_THRESHOLDS if self is Protocol.COCO else np.array([0.5])


class Polarity(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidBox(f"non-finite box {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InvalidBox(f"degenerate box {coords}")

    @classmethod
    def of(cls, coords: Sequence[float]) -> "Box":
        if len(coords) != 4:
            raise InvalidBox(f"a box needs 4 coordinates, got {len(coords)}")
        return cls(*(float(c) for c in coords))

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class Detection:
    box: Box
    score: float
    caption_id: str
    image_id: str

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "caption_id": self.caption_id,
            "box": self.box.as_list(),
            "score": self.score,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Detection":
        score = float(data["score"])
        if not math.isfinite(score):
            raise NonFiniteInput(f"non-finite score in {data}")
        return cls(
            box=Box.of(data["box"]),
            score=score,
            caption_id=str(data["caption_id"]),
            image_id=str(data["image_id"]),
        )


@dataclass(frozen=True)
class Query:
    caption_id: str
    text: str
    polarity: Polarity = Polarity.POSITIVE
    contradicts: str | None = None


@dataclass
class QuerySet:
    queries: list[Query]
    ground_truth: dict[tuple[str, str], list[Box]] = field(default_factory=dict)

    def __post_init__(self):
        by_id = {q.caption_id: q for q in self.queries}
        for q in self.queries:
            if q.contradicts is None:
                continue
            other = by_id.get(q.contradicts)
            if other is None or other.contradicts != q.caption_id:
                raise FormatError(f"contradicts link {q.caption_id} -> {q.contradicts} is not symmetric")

    def query(self, caption_id: str) -> Query:
        for q in self.queries:
            if q.caption_id == caption_id:
                return q
        raise KeyError(caption_id)

    def gt_count(self, caption_id: str) -> int:
        return sum(len(boxes) for (_, cid), boxes in self.ground_truth.items() if cid == caption_id)

    def negative_probes(self, image_ids: Iterable[str] = ()) -> list[tuple[str, str]]:
        """(image_id, caption_id) pairs evaluated with empty ground truth.

        Pairs listed with no boxes always count. A negative-polarity query
        with no entry at all for an image counts too, for every image that
        appears in the ground truth or in ``image_ids``.
        """
        probes = [key for key, boxes in self.ground_truth.items() if not boxes]
        images = sorted({image for image, _ in self.ground_truth} | set(image_ids), key=id_key)
        for q in self.queries:
            if q.polarity != Polarity.NEGATIVE:
                continue
            probes += [(image, q.caption_id) for image in images if (image, q.caption_id) not in self.ground_truth]
        return probes

    @classmethod
    def from_dict(cls, data: dict) -> "QuerySet":
        queries = [
            Query(
                caption_id=str(q["caption_id"]),
                text=q.get("text", ""),
                polarity=Polarity(q.get("polarity", "positive")),
                contradicts=str(q["contradicts"]) if q.get("contradicts") is not None else None,
            )
            for q in data["queries"]
        ]
        gt: dict[tuple[str, str], list[Box]] = {}
        for entry in data.get("ground_truth", []):
            key = (str(entry["image_id"]), str(entry["caption_id"]))
            gt.setdefault(key, []).extend(Box.of(b) for b in entry.get("boxes", []))
        return cls(queries=queries, ground_truth=gt)


def load_detections(path: str | Path) -> list[Detection]:
    dets = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                dets.append(Detection.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise FormatError(f"{path}:{lineno}: {e}") from e
    return dets


def load_queries(path: str | Path) -> QuerySet:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return QuerySet.from_dict(data)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: {e}") from e


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: Sequence[Box], b: Sequence[Box]) -> np.ndarray:
    """Pairwise IoU, shape (len(a), len(b))."""
    if not a or not b:
        return np.zeros((len(a), len(b)))
    A = np.array([x.as_list() for x in a])
    B = np.array([x.as_list() for x in b])
    iw = np.clip(np.minimum(A[:, None, 2], B[None, :, 2]) - np.maximum(A[:, None, 0], B[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(A[:, None, 3], B[None, :, 3]) - np.maximum(A[:, None, 1], B[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (A[:, 2] - A[:, 0]) * (A[:, 3] - A[:, 1])
    area_b = (B[:, 2] - B[:, 0]) * (B[:, 3] - B[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def id_key(value: str):
    """Sort numeric ids numerically, everything else lexically after them."""
    return (0, int(value), "") if value.isdigit() else (1, 0, value)


def class_ignored_nms(dets: Sequence[Detection], iou_thresh: float = DEFAULT_IOU_THRESH) -> list[Detection]:
    """Greedy NMS over one image, ignoring which caption produced each box.

    Order is descending score, then caption id, then input position; the
    result keeps that order.
    """
    if not dets:
        return []
    if len({d.image_id for d in dets}) > 1:
        raise MixedImages("class_ignored_nms expects detections from a single image")

    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, id_key(dets[i].caption_id), i))
    ious = iou_matrix([d.box for d in dets], [d.box for d in dets])
    keep: list[int] = []
    suppressed = np.zeros(len(dets), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_thresh
    return [dets[i] for i in keep]


def nms_per_image(dets: Iterable[Detection], iou_thresh: float = DEFAULT_IOU_THRESH) -> list[Detection]:
    by_image: dict[str, list[Detection]] = defaultdict(list)
    for d in dets:
        by_image[d.image_id].append(d)
    kept = []
    for image_id in sorted(by_image, key=id_key):
        kept.extend(class_ignored_nms(by_image[image_id], iou_thresh))
    return kept


def _cap_per_image(dets: list[Detection], max_dets: int) -> list[Detection]:
    groups: dict[tuple[str, str], list[Detection]] = defaultdict(list)
    for d in dets:
        groups[d.image_id, d.caption_id].append(d)
    capped = []
    for group in groups.values():
        group = sorted(group, key=lambda d: -d.score)
        capped.extend(group[:max_dets])
    return capped


def _match(dets: list[Detection], gt: dict[str, list[Box]], threshold: float) -> np.ndarray:
    """Greedy score-ordered matching; returns a TP flag per detection (in given order)."""
    matched = {image_id: np.zeros(len(boxes), dtype=bool) for image_id, boxes in gt.items()}
    ious = {
        image_id: iou_matrix([d.box for d in dets if d.image_id == image_id], boxes)
        for image_id, boxes in gt.items()
    }
    row_of: dict[str, int] = defaultdict(int)
    tp = np.zeros(len(dets), dtype=bool)
    for k, det in enumerate(dets):
        if det.image_id not in gt:
            continue
        row = ious[det.image_id][row_of[det.image_id]]
        row_of[det.image_id] += 1
        candidates = np.where(matched[det.image_id], -1.0, row)
        if candidates.size == 0:
            continue
        best = int(np.argmax(candidates))
        if candidates[best] >= threshold:
            matched[det.image_id][best] = True
            tp[k] = True
    return tp


def _interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    if tp.size == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    recall = tp_cum / num_gt
    precision = tp_cum / (tp_cum + fp_cum)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_THRESHOLDS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


@dataclass(frozen=True)
class QueryScore:
    caption_id: str
    ap: float
    ar: float
    num_gt: int
    num_dets: int


def per_query_scores(dets: Sequence[Detection], qs: QuerySet, protocol: Protocol | str = Protocol.COCO,
                     max_dets: int = DEFAULT_MAX_DETS) -> list[QueryScore]:
    """AP and AR (both in [0, 1]) for every query with at least one GT box."""
    protocol = Protocol(protocol)
    by_caption: dict[str, list[Detection]] = defaultdict(list)
    for d in _cap_per_image(list(dets), max_dets):
        by_caption[d.caption_id].append(d)

    gt_by_caption: dict[str, dict[str, list[Box]]] = defaultdict(dict)
    for (image_id, caption_id), boxes in qs.ground_truth.items():
        if boxes:
            gt_by_caption[caption_id][image_id] = boxes

    scores = []
    for query in qs.queries:
        gt = gt_by_caption.get(query.caption_id)
        if not gt:
            continue
        num_gt = sum(len(b) for b in gt.values())
        ranked = [by_caption[query.caption_id][i] for i in
                  np.argsort([-d.score for d in by_caption[query.caption_id]], kind="stable")]
        aps, ars = [], []
        for threshold in protocol.iou_thresholds:
            tp = _match(ranked, gt, threshold)
            aps.append(_interpolated_ap(tp, num_gt))
            ars.append(float(tp.sum()) / num_gt)
        scores.append(QueryScore(query.caption_id, float(np.mean(aps)), float(np.mean(ars)), num_gt, len(ranked)))
    if not scores:
        raise NoPositiveQueries("no query has a ground-truth box")
    return scores


def average_precision(dets: Sequence[Detection], qs: QuerySet, protocol: Protocol | str = Protocol.COCO,
                      max_dets: int = DEFAULT_MAX_DETS) -> float:
    return float(np.mean([s.ap for s in per_query_scores(dets, qs, protocol, max_dets)]))


def average_recall(dets: Sequence[Detection], qs: QuerySet, protocol: Protocol | str = Protocol.COCO,
                   max_dets: int = DEFAULT_MAX_DETS) -> float:
    return float(np.mean([s.ar for s in per_query_scores(dets, qs, protocol, max_dets)]))


def nms_ap(dets: Sequence[Detection], qs: QuerySet, protocol: Protocol | str = Protocol.COCO,
           iou_thresh: float = DEFAULT_IOU_THRESH, max_dets: int = DEFAULT_MAX_DETS) -> float:
    return average_precision(nms_per_image(dets, iou_thresh), qs, protocol, max_dets)


def operating_point(dets: Sequence[Detection], qs: QuerySet, iou_thresh: float = DEFAULT_IOU_THRESH,
                    score_thresh: float = 0.0) -> tuple[float, float]:
    """Micro precision/recall over all detections at one IoU and score threshold.

    A detection is a true positive only when it matches an unmatched GT box of
    its own caption; boxes fired for a contradicting caption count as false
    positives. Returns (precision, recall).
    """
    kept = [d for d in dets if d.score >= score_thresh]
    total_gt = sum(len(b) for b in qs.ground_truth.values())
    if total_gt == 0:
        raise NoPositiveQueries("no query has a ground-truth box")
    tp = 0
    by_caption: dict[str, list[Detection]] = defaultdict(list)
    for d in kept:
        by_caption[d.caption_id].append(d)
    for caption_id, group in by_caption.items():
        gt = {img: boxes for (img, cid), boxes in qs.ground_truth.items() if cid == caption_id and boxes}
        group = sorted(group, key=lambda d: -d.score)
        tp += int(_match(group, gt, iou_thresh).sum())
    precision = tp / len(kept) if kept else 0.0
    return precision, tp / total_gt


def fpr(dets: Sequence[Detection], qs: QuerySet, score_thresh: float = DEFAULT_SCORE_THRESH,
        apply_nms: bool = True, iou_thresh: float = DEFAULT_IOU_THRESH) -> float:
    """Percentage of empty-GT (image, query) pairs on which a detection survives at >= score_thresh."""
    probes = qs.negative_probes(d.image_id for d in dets)
    if not probes:
        raise NoNegativeQueries("no (image, query) pair has empty ground truth")
    survivors = nms_per_image(dets, iou_thresh) if apply_nms else list(dets)
    fired = {(d.image_id, d.caption_id) for d in survivors if d.score >= score_thresh}
    return 100.0 * sum(probe in fired for probe in probes) / len(probes)


def mcq_select(scores: Sequence[float]) -> int:
    """Index of the highest max-logit candidate; ties go to the lowest index."""
    values = np.asarray(scores, dtype=np.float64)
    if values.ndim != 1 or values.size < 2:
        raise EmptyCandidates("MCQ selection needs at least two candidates")
    if not np.all(np.isfinite(values)):
        raise NonFiniteInput("MCQ scores must be finite")
    return int(np.argmax(values))


def mcq_accuracy(items: Iterable[dict]) -> dict:
    """Select per item and compare with ``answer`` when present."""
    selections = []
    correct = answered = 0
    for item in items:
        if not isinstance(item, dict) or "scores" not in item:
            raise FormatError(f"MCQ item needs a 'scores' list, got {item!r}")
        choice = mcq_select(item["scores"])
        selections.append({"question_id": item.get("question_id"), "selected": choice})
        if item.get("answer") is not None:
            try:
                answer = int(item["answer"])
            except (TypeError, ValueError):
                raise FormatError(f"MCQ answer must be an index, got {item['answer']!r}") from None
            answered += 1
            correct += int(choice == answer)
    accuracy = 100.0 * correct / answered if answered else None
    return {"selections": selections, "accuracy": accuracy, "answered": answered}


@dataclass(frozen=True)
class EvalSettings:
    iou_thresh: float = DEFAULT_IOU_THRESH
    score_thresh: float = DEFAULT_SCORE_THRESH
    protocol: Protocol = Protocol.COCO
    max_dets: int = DEFAULT_MAX_DETS
    nms: bool = True


@dataclass
class EvalReport:
    ap: float
    nms_ap: float
    ar: float
    nms_ar: float
    fpr: float | None
    precision: float
    recall: float
    protocol: str
    per_query: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "ap": self.ap,
            "nms_ap": self.nms_ap,
            "ar": self.ar,
            "nms_ar": self.nms_ar,
            "fpr": self.fpr,
            "precision": self.precision,
            "recall": self.recall,
            "protocol": self.protocol,
            "per_query": self.per_query,
        }

    def table(self) -> str:
        head = ["AP", "NMS-AP", "AR", "NMS-AR", "FPR"]
        vals = [self.ap, self.nms_ap, self.ar, self.nms_ar, self.fpr]
        cells = ["-" if v is None else f"{v:.1f}" for v in vals]
        widths = [max(len(h), len(c)) for h, c in zip(head, cells)]
        lines = [
            "  ".join(h.rjust(w) for h, w in zip(head, widths)),
            "  ".join(c.rjust(w) for c, w in zip(cells, widths)),
        ]
        if self.per_query:
            lines.append("")
            lines.append(f"{'caption':<16}{'AP':>8}{'NMS-AP':>8}{'#gt':>6}")
            for row in self.per_query:
                lines.append(f"{row['caption_id']:<16}{row['ap']:>8.1f}{row['nms_ap']:>8.1f}{row['num_gt']:>6}")
        return "\n".join(lines)


def evaluate(dets: Sequence[Detection], qs: QuerySet, settings: EvalSettings | None = None) -> EvalReport:
    """Full report, scores scaled to percentages."""
    settings = settings or EvalSettings()
    raw = per_query_scores(dets, qs, settings.protocol, settings.max_dets)
    survivors = nms_per_image(dets, settings.iou_thresh)
    logger.info("class-ignored NMS kept %d of %d detections", len(survivors), len(dets))
    after = {s.caption_id: s for s in per_query_scores(survivors, qs, settings.protocol, settings.max_dets)}

    try:
        rate = fpr(dets, qs, settings.score_thresh, settings.nms, settings.iou_thresh)
    except NoNegativeQueries:
        logger.warning("no empty-GT queries; FPR left undefined")
        rate = None
    precision, recall = operating_point(survivors if settings.nms else dets, qs, settings.iou_thresh)

    per_query = [
        {
            "caption_id": s.caption_id,
            "ap": 100 * s.ap,
            "nms_ap": 100 * after[s.caption_id].ap,
            "ar": 100 * s.ar,
            "nms_ar": 100 * after[s.caption_id].ar,
            "num_gt": s.num_gt,
            "num_dets": s.num_dets,
        }
        for s in raw
    ]
    return EvalReport(
        ap=100 * float(np.mean([s.ap for s in raw])),
        nms_ap=100 * float(np.mean([s.ap for s in after.values()])),
        ar=100 * float(np.mean([s.ar for s in raw])),
        nms_ar=100 * float(np.mean([s.ar for s in after.values()])),
        fpr=rate,
        precision=precision,
        recall=recall,
        protocol=Protocol(settings.protocol).value,
        per_query=per_query,
    )
