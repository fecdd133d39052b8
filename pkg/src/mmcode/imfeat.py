"""Image-feature ingestion: precomputed global vectors, concept detections,
and ground-truth boxes, plus the thresholded concept-count features.

File formats (JSONL):

    global_features.jsonl  {"image_id", "vector": [floats]}
    detections.jsonl       {"image_id", "concept", "score", "box": [x, y, w, h]}
    gt_boxes.jsonl         {"image_id", "concept", "box": [x, y, w, h]}
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .base import ValidationError
from .corpus import CONCEPT_INDEX, CONCEPTS

logger = logging.getLogger(__name__)


def _check_box(box, where):
    x, y, w, h = (float(v) for v in box)
    if w <= 0 or h <= 0:
        raise ValidationError(f"{where}: degenerate box (w={w}, h={h})")
    return (x, y, w, h)


def _check_concept(concept, where):
    if concept not in CONCEPT_INDEX:
        raise ValidationError(f"{where}: unknown concept {concept!r}")
    return concept


@dataclass(frozen=True)
class ConceptDetection:
    image_id: str
    concept: str
    score: float
    box: tuple  # (x, y, w, h) in pixels

    def __post_init__(self):
        _check_concept(self.concept, f"detection on {self.image_id}")
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"detection on {self.image_id}: score {self.score} not in [0,1]")
        object.__setattr__(self, "box", _check_box(self.box, f"detection on {self.image_id}"))


@dataclass(frozen=True)
class ConceptBox:
    image_id: str
    concept: str
    box: tuple

    def __post_init__(self):
        _check_concept(self.concept, f"gt box on {self.image_id}")
        object.__setattr__(self, "box", _check_box(self.box, f"gt box on {self.image_id}"))


def _load_jsonl(path, make, what):
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(make(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValidationError) as exc:
                raise ValidationError(f"{path}:{lineno}: malformed {what} record: {exc}") from exc
    return out


def load_detections(path):
    return _load_jsonl(
        path,
        lambda o: ConceptDetection(str(o["image_id"]), o["concept"], float(o["score"]), o["box"]),
        "detection",
    )


def load_gt_boxes(path):
    return _load_jsonl(
        path,
        lambda o: ConceptBox(str(o["image_id"]), o["concept"], o["box"]),
        "gt box",
    )


def save_detections(path, detections):
    from .corpus import write_jsonl

    write_jsonl(
        path,
        (
            {"image_id": d.image_id, "concept": d.concept, "score": d.score, "box": list(d.box)}
            for d in detections
        ),
    )


def save_gt_boxes(path, boxes):
    from .corpus import write_jsonl

    write_jsonl(
        path,
        ({"image_id": b.image_id, "concept": b.concept, "box": list(b.box)} for b in boxes),
    )


def group_by_image(records):
    grouped = defaultdict(list)
    for r in records:
        grouped[r.image_id].append(r)
    return dict(grouped)


class GlobalFeatureStore:
    """image_id -> dense vector map with uniform dimension.

    Lookups of unknown ids return a zero vector and log one warning per id,
    so tweets without images stay classifiable.
    """

    def __init__(self, vectors, dim):
        self.vectors = vectors
        self.dim = dim
        self._warned = set()

    def get(self, image_id):
        if image_id is not None and image_id in self.vectors:
            return self.vectors[image_id]
        if image_id is not None and image_id not in self._warned:
            logger.warning("no global feature vector for image %r; using zeros", image_id)
            self._warned.add(image_id)
        return np.zeros(self.dim)

    def __contains__(self, image_id):
        return image_id in self.vectors

    def __len__(self):
        return len(self.vectors)


def load_global(path):
    """Load global image vectors; all rows must share one dimension."""
    vectors = {}
    dim = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                image_id = str(obj["image_id"])
                vec = np.asarray(obj["vector"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{lineno}: malformed global feature: {exc}") from exc
            if vec.ndim != 1:
                raise ValidationError(f"{path}:{lineno}: vector must be 1-d")
            if not np.all(np.isfinite(vec)):
                raise ValidationError(f"{path}:{lineno}: non-finite vector values")
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise ValidationError(
                    f"{path}:{lineno}: dimension {vec.size} != {dim} of earlier rows"
                )
            if image_id in vectors:
                raise ValidationError(f"{path}:{lineno}: duplicate image_id {image_id!r}")
            vectors[image_id] = vec
    if dim is None:
        raise ValidationError(f"{path}: no global feature rows")
    return GlobalFeatureStore(vectors, dim)


def concept_counts(detections, threshold):
    """Per-concept counts of detections scoring strictly above threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError(f"threshold {threshold} not in [0,1]")
    out = np.zeros(len(CONCEPTS))
    for d in detections:
        if d.score > threshold:
            out[CONCEPT_INDEX[d.concept]] += 1
    return out


def gt_concept_counts(boxes):
    """Per-concept ground-truth box counts."""
    out = np.zeros(len(CONCEPTS))
    for b in boxes:
        out[CONCEPT_INDEX[b.concept]] += 1
    return out


def concept_count_matrix(tweets, detections_by_image, threshold):
    """Stack concept_counts for each tweet; imageless tweets get zeros."""
    X = np.zeros((len(tweets), len(CONCEPTS)))
    for i, t in enumerate(tweets):
        if t.image_id is not None:
            X[i] = concept_counts(detections_by_image.get(t.image_id, ()), threshold)
    return X


def gt_concept_count_matrix(tweets, boxes_by_image):
    X = np.zeros((len(tweets), len(CONCEPTS)))
    for i, t in enumerate(tweets):
        if t.image_id is not None:
            X[i] = gt_concept_counts(boxes_by_image.get(t.image_id, ()))
    return X


def global_feature_matrix(tweets, store):
    X = np.zeros((len(tweets), store.dim))
    for i, t in enumerate(tweets):
        X[i] = store.get(t.image_id) if t.image_id is not None else np.zeros(store.dim)
    return X
