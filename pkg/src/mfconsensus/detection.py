"""Detector evaluation against point ground truths by centre distance."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .consensus import DEFAULT_RADIUS_UM, ConsensusSet
from .core import Detection, ImageMeta, LabelFilter, Point, PointAnnotation
from .errors import ConfigError, ImageReferenceError, ImageSetMismatchError


@dataclass(frozen=True)
class EvalConfig:
    radius_um: float = DEFAULT_RADIUS_UM
    label_filter: LabelFilter = field(default_factory=LabelFilter)
    min_confidence: float = 0.0

    def __post_init__(self):
        if not self.radius_um > 0:
            raise ConfigError(f"radius_um must be positive, got {self.radius_um}")

    def to_dict(self) -> dict:
        return {
            "radius_um": self.radius_um,
            "labels": self.label_filter.to_list(),
            "min_confidence": self.min_confidence,
        }


@dataclass(frozen=True)
class GroundTruth:
    points: tuple[Point, ...]
    image_ids: frozenset[str]

    @classmethod
    def from_consensus(cls, cs: ConsensusSet) -> "GroundTruth":
        pts = tuple(Point(e.image_id, e.x_px, e.y_px) for e in cs.entries)
        return cls(pts, frozenset(cs.image_ids) | {p.image_id for p in pts})

    @classmethod
    def from_annotations(
        cls,
        annotations: Iterable[PointAnnotation],
        image_ids: Iterable[str],
        label_filter: LabelFilter | None = None,
    ) -> "GroundTruth":
        pts = tuple(
            Point(a.image_id, a.x_px, a.y_px)
            for a in annotations
            if label_filter is None or a.label in label_filter.labels
        )
        return cls(pts, frozenset(image_ids))

    def __len__(self):
        return len(self.points)


def as_ground_truth(gt) -> GroundTruth:
    if isinstance(gt, GroundTruth):
        return gt
    if isinstance(gt, ConsensusSet):
        return GroundTruth.from_consensus(gt)
    pts = tuple(Point(p.image_id, p.x_px, p.y_px) for p in gt)
    return GroundTruth(pts, frozenset(p.image_id for p in pts))


def score_detections(
    detections: Sequence[Detection],
    ground_truth,
    images: Mapping[str, ImageMeta],
    config: EvalConfig = EvalConfig(),
) -> list[tuple[float, bool]]:
    """Flag each detection TP/FP; output follows the input order.

    Per image, detections are visited by descending confidence (ties in
    input order) and take the nearest still-free ground-truth point within
    the radius.
    """
    gt = as_ground_truth(ground_truth)
    gt_by_image: dict[str, list[Point]] = {}
    for p in gt.points:
        gt_by_image.setdefault(p.image_id, []).append(p)
    det_by_image: dict[str, list[int]] = {}
    for i, d in enumerate(detections):
        if d.image_id not in images:
            raise ImageReferenceError(f"detection on unknown image {d.image_id!r}")
        det_by_image.setdefault(d.image_id, []).append(i)

    flags = [False] * len(detections)
    for image_id, idx in det_by_image.items():
        pts = gt_by_image.get(image_id)
        if not pts:
            continue
        mpp = images[image_id].mpp
        gxy = np.array([(p.x_px, p.y_px) for p in pts])
        free = np.ones(len(pts), dtype=bool)
        for i in sorted(idx, key=lambda i: -detections[i].confidence):
            d = detections[i]
            dist = mpp * np.hypot(gxy[:, 0] - d.x_px, gxy[:, 1] - d.y_px)
            dist[~free] = np.inf
            j = int(np.argmin(dist))  # first index on ties
            if dist[j] <= config.radius_um:
                free[j] = False
                flags[i] = True
    return [(d.confidence, f) for d, f in zip(detections, flags)]


def _rank_order(scored: Sequence[tuple[float, bool]]) -> list[int]:
    # stable sort: equal confidences keep input order
    return sorted(range(len(scored)), key=lambda i: -scored[i][0])


def average_precision(scored: Sequence[tuple[float, bool]], n_gt: int) -> float:
    """All-points interpolated AP under the monotone precision envelope."""
    if n_gt < 0:
        raise ConfigError("n_gt must be non-negative")
    if n_gt == 0:
        return 1.0 if not scored else 0.0
    order = _rank_order(scored)
    precisions = []
    tp = 0
    for rank, i in enumerate(order, start=1):
        if scored[i][1]:
            tp += 1
        precisions.append((Fraction(tp, rank), scored[i][1]))
    # only TP ranks move recall; each step is 1/n_gt
    total = Fraction(0)
    env = Fraction(0)
    for prec, is_tp in reversed(precisions):
        if prec > env:
            env = prec
        if is_tp:
            total += env
    return float(total / n_gt)


@dataclass(frozen=True)
class PRCurve:
    points: tuple[tuple[float, float, float], ...]  # (recall, precision, confidence)
    n_gt: int
    n_det: int


def precision_recall_curve(scored: Sequence[tuple[float, bool]], n_gt: int) -> PRCurve:
    pts = []
    tp = 0
    for rank, i in enumerate(_rank_order(scored), start=1):
        conf, is_tp = scored[i]
        tp += is_tp
        recall = tp / n_gt if n_gt else 1.0
        pts.append((recall, tp / rank, conf))
    return PRCurve(tuple(pts), n_gt, len(scored))


def best_f1(scored: Sequence[tuple[float, bool]], n_gt: int) -> tuple[float, float | None]:
    """Highest F1 over confidence thresholds (a threshold keeps every
    detection at or above it, so tied confidences are taken together)."""
    order = _rank_order(scored)
    best, best_conf = (1.0 if n_gt == 0 else 0.0), None
    if n_gt == 0:
        return best, best_conf
    tp = 0
    for rank, i in enumerate(order, start=1):
        tp += scored[i][1]
        last_of_tie = rank == len(order) or scored[order[rank]][0] != scored[i][0]
        if not last_of_tie:
            continue
        f1 = 2 * tp / (rank + n_gt)
        if f1 > best:
            best, best_conf = f1, scored[i][0]
    return best, best_conf


@dataclass(frozen=True)
class EvalResult:
    ap: float
    best_f1: float
    best_f1_confidence: float | None
    n_gt: int
    n_det: int
    pr_curve: PRCurve

    def to_dict(self) -> dict:
        return {
            "ap": self.ap,
            "best_f1": self.best_f1,
            "best_f1_confidence": self.best_f1_confidence,
            "n_gt": self.n_gt,
            "n_det": self.n_det,
            "pr_curve": [list(p) for p in self.pr_curve.points],
        }


def evaluate(
    detections: Sequence[Detection],
    ground_truth,
    images: Mapping[str, ImageMeta],
    config: EvalConfig = EvalConfig(),
) -> EvalResult:
    gt = as_ground_truth(ground_truth)
    dets = [d for d in detections if d.confidence >= config.min_confidence]
    scored = score_detections(dets, gt, images, config)
    f1, conf = best_f1(scored, len(gt))
    return EvalResult(
        average_precision(scored, len(gt)),
        f1,
        conf,
        len(gt),
        len(dets),
        precision_recall_curve(scored, len(gt)),
    )


def cross_label_eval(
    detections: Sequence[Detection],
    gt_he_only,
    gt_phh3_assisted,
    images: Mapping[str, ImageMeta],
    config: EvalConfig = EvalConfig(),
) -> dict[str, EvalResult]:
    """Evaluate one detection set against both ground-truth definitions."""
    return evaluate_many(
        detections,
        {"he_only": gt_he_only, "phh3_assisted": gt_phh3_assisted},
        images,
        config,
    )


def evaluate_many(
    detections: Sequence[Detection],
    ground_truths: Mapping[str, object],
    images: Mapping[str, ImageMeta],
    config: EvalConfig = EvalConfig(),
) -> dict[str, EvalResult]:
    gts = {name: as_ground_truth(gt) for name, gt in ground_truths.items()}
    image_sets = {gt.image_ids for gt in gts.values()}
    if len(image_sets) > 1:
        raise ImageSetMismatchError("ground truths cover different images")
    covered = next(iter(image_sets), frozenset())
    stray = {d.image_id for d in detections} - covered
    if stray:
        raise ImageSetMismatchError(f"detections on images without ground truth: {sorted(stray)}")
    return {name: evaluate(detections, gt, images, config) for name, gt in gts.items()}
