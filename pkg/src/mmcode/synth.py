"""Deterministic synthetic-corpus generator.

Produces tweets, annotations, global image vectors, concept detections, and
ground-truth boxes with controllable code-feature correlations, plus a
ledger recording every latent assignment. Identical seeds give byte-identical
output files, which makes desk-scale end-to-end tests possible without any
real data.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .base import ValidationError, rng_from_seed
from .corpus import CODES, TweetRecord, CodeAnnotation, write_jsonl, _tweet_to_obj, _annotation_to_obj
from .imfeat import ConceptBox, ConceptDetection, save_detections, save_gt_boxes

# Code-specific token vocabularies; the loss/substance/aggression word lists
# follow the strongest per-code cues observed in this domain.
CODE_VOCAB = {
    "aggression": ("🖕", "💉", "opps", "pipe", "2017"),
    "loss": ("free", "miss", "bro", "love", "you"),
    "substance_use": ("smoke", "cup", "drank", "purple", "lean"),
}

# Concepts planted on code-positive images (firearms and gestures for
# aggression, drug concepts for substance use; loss carries no image cue).
CODE_CONCEPTS = {
    "aggression": ("handgun", "long_gun", "hand_gesture"),
    "substance_use": ("joint", "marijuana", "lean"),
}

BACKGROUND_CONCEPTS = ("person", "tattoo", "money", "hand_gesture")

NEUTRAL_VOCAB = tuple(
    f"w{idx:02d}" for idx in range(68)
) + ("day", "good", "night", "block", "squad", "real", "street", "fam", "ride", "town", "💯", "🙏")

_ALL_CODE_WORDS = tuple(w for code in CODES for w in CODE_VOCAB[code])
_BASE_VOCAB = NEUTRAL_VOCAB + _ALL_CODE_WORDS

_CANVAS_W, _CANVAS_H = 640.0, 480.0


def _as_per_code(value, name):
    if np.isscalar(value):
        values = (float(value),) * len(CODES)
    else:
        values = tuple(float(v) for v in value)
        if len(values) != len(CODES):
            raise ValidationError(f"{name} must be a scalar or one value per code")
    for v in values:
        if not 0.0 <= v <= 1.0:
            raise ValidationError(f"{name} values must lie in [0, 1], got {v}")
    return values


@dataclass
class SynthConfig:
    n_users: int = 40
    tweets_per_user_max: int = 20
    code_priors: tuple = (0.25, 0.21, 0.20)
    text_signal_strength: float | tuple = 0.8
    image_signal_strength: float | tuple = 0.8
    global_dim: int = 2048
    seed: int = 0
    annotator_miss_rates: tuple = (0.15, 0.05, 0.05)
    image_prob: float = 0.9
    pos_tag_prob: float = 0.5
    tumblr_prob: float = 0.2
    detector_recall: float = 0.85

    def validate(self):
        if self.n_users < 5:
            raise ValidationError("n_users must be >= 5 (one user per fold minimum)")
        if self.tweets_per_user_max < 1:
            raise ValidationError("tweets_per_user_max must be >= 1")
        if self.global_dim < 1:
            raise ValidationError("global_dim must be >= 1")
        self.code_priors = _as_per_code(self.code_priors, "code_priors")
        self.text_signal_strength = _as_per_code(self.text_signal_strength, "text_signal_strength")
        self.image_signal_strength = _as_per_code(
            self.image_signal_strength, "image_signal_strength"
        )
        self.annotator_miss_rates = _as_per_code(self.annotator_miss_rates, "annotator_miss_rates")
        for name in ("image_prob", "pos_tag_prob", "tumblr_prob", "detector_recall"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        return self


@dataclass
class SynthCorpus:
    tweets: list
    annotations: list
    global_features: list  # (image_id, vector)
    detections: list
    gt_boxes: list
    ledger: list
    paths: dict = field(default_factory=dict)


_POS_BY_KIND = {"word": ("N", "V", "A"), "emoji": ("E",), "mention": ("@",), "punct": (",",)}


def _draw_tokens(rng, latent, strengths):
    n_tokens = int(rng.integers(5, 13))
    tokens = []
    for _ in range(n_tokens):
        surface = None
        for ci, code in enumerate(CODES):
            if latent[code] and rng.random() < strengths[ci]:
                surface = CODE_VOCAB[code][rng.integers(len(CODE_VOCAB[code]))]
                break
        if surface is None:
            surface = _BASE_VOCAB[rng.integers(len(_BASE_VOCAB))]
        tokens.append(surface)
    if rng.random() < 0.15:
        tokens.append("@mention")
    return tokens


def _random_box(rng):
    x = round(float(rng.uniform(0, _CANVAS_W - 90)), 2)
    y = round(float(rng.uniform(0, _CANVAS_H - 70)), 2)
    w = round(float(rng.uniform(20, 90)), 2)
    h = round(float(rng.uniform(20, 70)), 2)
    return (x, y, w, h)


def _annotate(rng, latent, miss_rates):
    """One annotator's flag set: misses a true code with the per-code miss
    rate and raises a false alarm at a tenth of it, so any-positive rates
    stay near the latent priors."""
    flags = {}
    for ci, code in enumerate(CODES):
        if latent[code]:
            flags[code] = rng.random() >= miss_rates[ci]
        else:
            flags[code] = rng.random() < miss_rates[ci] / 10.0
    return flags


def generate(config, out_dir=None):
    """Generate a synthetic corpus; optionally write all JSONL files.

    Emits tweets.jsonl, annotations.jsonl, global_features.jsonl,
    detections.jsonl, gt_boxes.jsonl, and ledger.jsonl under `out_dir`.
    """
    config.validate()
    rng = rng_from_seed(config.seed)
    text_strength = config.text_signal_strength
    image_strength = dict(zip(CODES, config.image_signal_strength))

    directions = {}
    for ci, code in enumerate(CODES):
        d = np.zeros(config.global_dim)
        d[ci :: len(CODES)] = 1.0
        directions[code] = d / np.linalg.norm(d)

    tweets, annotations, ledger = [], [], []
    global_features, detections, gt_boxes = [], [], []

    for u in range(config.n_users):
        user_id = f"u{u:04d}"
        n_tweets = int(rng.integers(1, config.tweets_per_user_max + 1))
        for k in range(n_tweets):
            tweet_id = f"t{u:04d}_{k:03d}"
            latent = {
                code: bool(rng.random() < config.code_priors[ci])
                for ci, code in enumerate(CODES)
            }
            source = "tumblr" if rng.random() < config.tumblr_prob else "twitter"
            tokens = _draw_tokens(rng, latent, text_strength)
            text = " ".join(tokens)

            pos_tags = None
            if rng.random() < config.pos_tag_prob:
                from .lingfeat import tokenize

                toks = tokenize(text)
                pos_tags = tuple(
                    (t.surface, _POS_BY_KIND.get(t.kind, ("X",))[rng.integers(
                        len(_POS_BY_KIND.get(t.kind, ("X",)))
                    )])
                    for t in toks
                )

            has_image = rng.random() < config.image_prob
            image_id = f"img_{tweet_id}" if has_image else None
            tweets.append(
                TweetRecord(
                    tweet_id=tweet_id,
                    user_id=user_id,
                    text=text,
                    source=source,
                    image_id=image_id,
                    pos_tags=pos_tags,
                )
            )

            students = [_annotate(rng, latent, config.annotator_miss_rates) for _ in range(2)]
            experts = [_annotate(rng, latent, config.annotator_miss_rates) for _ in range(2)]
            tweet_annotations = [
                ("s1", "student", students[0]),
                ("s2", "student", students[1]),
                ("e1", "expert", experts[0]),
                ("e2", "expert", experts[1]),
            ]
            if students[0] != students[1]:
                tweet_annotations.append(("tb", "tiebreak", _annotate(rng, latent, config.annotator_miss_rates)))
            for ann_id, role, flags in tweet_annotations:
                annotations.append(
                    CodeAnnotation(tweet_id=tweet_id, annotator_id=ann_id, role=role, **flags)
                )

            planted = []
            if has_image:
                vec = rng.standard_normal(config.global_dim)
                for code in CODES:
                    if latent[code]:
                        vec = vec + image_strength[code] * directions[code] * 2.0
                global_features.append((image_id, np.round(vec, 6)))

                boxes = []
                for _ in range(int(rng.integers(0, 3))):
                    boxes.append(ConceptBox(image_id, "person", _random_box(rng)))
                for concept in BACKGROUND_CONCEPTS[1:]:
                    if rng.random() < 0.08:
                        boxes.append(ConceptBox(image_id, concept, _random_box(rng)))
                for code, concepts in CODE_CONCEPTS.items():
                    if latent[code]:
                        for concept in concepts:
                            if rng.random() < image_strength[code]:
                                boxes.append(ConceptBox(image_id, concept, _random_box(rng)))
                                planted.append(concept)
                gt_boxes.extend(boxes)

                for box in boxes:
                    if rng.random() < config.detector_recall:
                        detections.append(
                            ConceptDetection(
                                image_id,
                                box.concept,
                                round(float(rng.uniform(0.45, 1.0)), 4),
                                box.box,
                            )
                        )
                for _ in range(int(rng.integers(0, 2))):
                    concept = BACKGROUND_CONCEPTS[rng.integers(len(BACKGROUND_CONCEPTS))]
                    detections.append(
                        ConceptDetection(
                            image_id,
                            concept,
                            round(float(rng.uniform(0.05, 0.6)), 4),
                            _random_box(rng),
                        )
                    )

            ledger.append(
                {
                    "tweet_id": tweet_id,
                    "user_id": user_id,
                    "source": source,
                    "latent": latent,
                    "has_image": has_image,
                    "planted_concepts": planted,
                }
            )

    corpus = SynthCorpus(
        tweets=tweets,
        annotations=annotations,
        global_features=global_features,
        detections=detections,
        gt_boxes=gt_boxes,
        ledger=ledger,
    )
    if out_dir is not None:
        corpus.paths = write_corpus_files(corpus, out_dir)
    return corpus


def write_corpus_files(corpus, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        name: os.path.join(out_dir, f"{name}.jsonl")
        for name in (
            "tweets",
            "annotations",
            "global_features",
            "detections",
            "gt_boxes",
            "ledger",
        )
    }
    write_jsonl(paths["tweets"], (_tweet_to_obj(t) for t in corpus.tweets))
    write_jsonl(paths["annotations"], (_annotation_to_obj(a) for a in corpus.annotations))
    write_jsonl(
        paths["global_features"],
        (
            {"image_id": image_id, "vector": [float(v) for v in vec]}
            for image_id, vec in corpus.global_features
        ),
    )
    save_detections(paths["detections"], corpus.detections)
    save_gt_boxes(paths["gt_boxes"], corpus.gt_boxes)
    write_jsonl(paths["ledger"], corpus.ledger)
    return paths
