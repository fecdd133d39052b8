"""Object-detection evaluation: IoU, greedy score-ordered matching,
rank-accumulation average precision, and the three-column AP report."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .base import ValidationError
from .corpus import CONCEPTS
from .tables import render_csv, render_markdown

DEFAULT_IOU_THRESHOLD = 0.5


def iou(box_a, box_b):
    """Intersection over union of two (x, y, w, h) boxes."""
    ax, ay, aw, ah = box_a
    bx, by, bw, bh = box_b
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        raise ValidationError(f"degenerate box in IoU: {box_a} vs {box_b}")
    ix = max(ax, bx)
    iy = max(ay, by)
    ix2 = min(ax + aw, bx + bw)
    iy2 = min(ay + ah, by + bh)
    iw = max(0.0, ix2 - ix)
    ih = max(0.0, iy2 - iy)
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union


@dataclass
class MatchResult:
    """Detections of one concept ordered by descending score, each flagged
    true positive or not, plus the ground-truth count they are scored
    against."""

    flags: list  # (detection, is_true_positive) in rank order
    n_ground_truth: int


def match_detections(detections, gt_boxes, concept, iou_threshold=DEFAULT_IOU_THRESHOLD):
    """Greedy matching for one concept.

    Detections are visited by descending score (ties keep input order). A
    detection is a true positive when its best-IoU unmatched ground-truth box
    of the same concept on the same image reaches the IoU threshold; that box
    is then consumed.
    """
    dets = [d for d in detections if d.concept == concept]
    gts = [g for g in gt_boxes if g.concept == concept]
    gt_by_image = defaultdict(list)
    for g in gts:
        gt_by_image[g.image_id].append(g)
    matched = {}

    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    flags = []
    for i in order:
        det = dets[i]
        best_iou, best_gt = 0.0, None
        for g in gt_by_image.get(det.image_id, ()):
            if matched.get(id(g)):
                continue
            overlap = iou(det.box, g.box)
            if overlap > best_iou:
                best_iou, best_gt = overlap, g
        is_tp = best_gt is not None and best_iou >= iou_threshold
        if is_tp:
            matched[id(best_gt)] = True
        flags.append((det, is_tp))
    return MatchResult(flags=flags, n_ground_truth=len(gts))


def ap_from_flags(flags, n_positive):
    """Rank-accumulation average precision over an ordered hit/miss list.

    AP = sum over ranks k of (R_k - R_{k-1}) * P_k, with recall denominators
    taken from n_positive. Returns None when n_positive is zero (undefined,
    reported as absent rather than 0).
    """
    if n_positive <= 0:
        return None
    tp = 0
    ap = 0.0
    for k, hit in enumerate(flags, start=1):
        if hit:
            tp += 1
            ap += (1.0 / n_positive) * (tp / k)
    return ap


def detection_ap(match):
    """AP of a MatchResult; None when there is no ground truth."""
    return ap_from_flags([tp for _, tp in match.flags], match.n_ground_truth)


def _fold_concept_ap(detections, gt_boxes, concept, iou_threshold):
    return detection_ap(match_detections(detections, gt_boxes, concept, iou_threshold))


@dataclass
class DetectionReport:
    columns: tuple  # ("Complete", "Twitter", "Tumblr")
    per_concept: dict  # concept -> {column: (mean_ap, sd) or None}
    map_row: dict  # column -> (mean_map, sd) or None

    def rows(self, digits=2):
        def cell(stat):
            if stat is None:
                return None
            mean, sd = stat
            return f"{mean:.{digits}f} ± {sd:.{digits}f}"

        rows = []
        for concept in CONCEPTS:
            stats = self.per_concept[concept]
            rows.append([concept.replace("_", " ")] + [cell(stats[c]) for c in self.columns])
        rows.append(["mAP"] + [cell(self.map_row[c]) for c in self.columns])
        return rows

    def render(self, fmt="markdown"):
        headers = ["Concept"] + [f"{c} AP ± SD" for c in self.columns]
        rows = [[x if x is not None else "-" for x in row] for row in self.rows()]
        if fmt == "csv":
            return render_csv(headers, rows)
        return render_markdown(headers, rows)


def _mean_sd(values):
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return None
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return (float(arr.mean()), sd)


def detection_report(
    detections,
    gt_boxes,
    image_folds,
    image_sources,
    iou_threshold=DEFAULT_IOU_THRESHOLD,
):
    """Per-concept AP (mean ± sample SD over folds) for the complete image
    set and per-source subsets, plus a per-fold-averaged mAP row.

    `image_folds` maps image_id -> fold index; `image_sources` maps
    image_id -> "twitter" | "tumblr". Each column is computed from scratch on
    its own subset; a concept missing from a subset yields an absent cell.
    """
    folds = sorted(set(image_folds.values()))
    columns = ("Complete", "Twitter", "Tumblr")
    subsets = {
        "Complete": lambda img: True,
        "Twitter": lambda img: image_sources.get(img) == "twitter",
        "Tumblr": lambda img: image_sources.get(img) == "tumblr",
    }

    per_concept = {c: {} for c in CONCEPTS}
    map_row = {}
    for column in columns:
        keep = subsets[column]
        ap_by_concept = {c: [] for c in CONCEPTS}
        fold_maps = []
        for fold in folds:
            in_fold = lambda img: image_folds.get(img) == fold and keep(img)
            dets = [d for d in detections if in_fold(d.image_id)]
            gts = [g for g in gt_boxes if in_fold(g.image_id)]
            fold_aps = []
            for concept in CONCEPTS:
                ap = _fold_concept_ap(dets, gts, concept, iou_threshold)
                if ap is not None:
                    ap_by_concept[concept].append(ap)
                    fold_aps.append(ap)
            if fold_aps:
                fold_maps.append(float(np.mean(fold_aps)))
        for concept in CONCEPTS:
            per_concept[concept][column] = _mean_sd(ap_by_concept[concept])
        map_row[column] = _mean_sd(fold_maps)
    return DetectionReport(columns=columns, per_concept=per_concept, map_row=map_row)
