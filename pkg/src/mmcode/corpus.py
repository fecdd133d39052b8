"""Tweet corpus data model: records, JSONL I/O, label derivation, statistics.

File formats (one JSON object per line, UTF-8, emoji kept verbatim):

    tweets.jsonl       {"tweet_id", "user_id", "text", "image_id"?,
                        "pos_tags"?: [["tok","TAG"], ...], "source": "twitter"|"tumblr"}
    annotations.jsonl  {"tweet_id", "annotator_id", "role",
                        "aggression": bool, "loss": bool, "substance_use": bool}
"""

from __future__ import annotations

import json
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field

from .base import ValidationError
from .tables import render_csv, render_markdown

CODES = ("aggression", "loss", "substance_use")

# Closed 9-concept lexicon. The tuple order is the declared feature-vector
# layout and the row order of all concept tables; never infer it.
CONCEPTS = (
    "handgun",
    "long_gun",
    "joint",
    "marijuana",
    "person",
    "tattoo",
    "hand_gesture",
    "lean",
    "money",
)
CONCEPT_INDEX = {name: i for i, name in enumerate(CONCEPTS)}

SOURCES = ("twitter", "tumblr")
ANNOTATOR_ROLES = ("student", "expert", "tiebreak")
LABEL_RULES = ("any_positive", "majority")


@dataclass(frozen=True)
class TweetRecord:
    tweet_id: str
    user_id: str
    text: str
    source: str
    image_id: str | None = None
    pos_tags: tuple | None = None  # tuple of (token, tag) pairs

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValidationError(f"tweet {self.tweet_id}: unknown source {self.source!r}")


@dataclass(frozen=True)
class CodeAnnotation:
    tweet_id: str
    annotator_id: str
    role: str
    aggression: bool
    loss: bool
    substance_use: bool

    def __post_init__(self):
        if self.role not in ANNOTATOR_ROLES:
            raise ValidationError(
                f"annotation {self.tweet_id}/{self.annotator_id}: unknown role {self.role!r}"
            )

    def flag(self, code):
        return bool(getattr(self, code))


@dataclass(frozen=True)
class CodeLabels:
    tweet_id: str
    labels: dict = field(hash=False)  # code name -> bool
    rule: str = "any_positive"

    def __getitem__(self, code):
        return self.labels[code]


def _parse_jsonl(path, parse_record, what):
    records = []
    if not os.path.exists(path):
        raise ValidationError(f"{what} file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                records.append(parse_record(obj))
            except (json.JSONDecodeError, KeyError, TypeError, ValidationError) as exc:
                raise ValidationError(f"{path}:{lineno}: malformed {what} record: {exc}") from exc
    return records


def _tweet_from_obj(obj):
    pos_tags = obj.get("pos_tags")
    if pos_tags is not None:
        pos_tags = tuple((str(tok), str(tag)) for tok, tag in pos_tags)
    return TweetRecord(
        tweet_id=str(obj["tweet_id"]),
        user_id=str(obj["user_id"]),
        text=str(obj["text"]),
        source=str(obj["source"]),
        image_id=None if obj.get("image_id") is None else str(obj["image_id"]),
        pos_tags=pos_tags,
    )


def _annotation_from_obj(obj):
    return CodeAnnotation(
        tweet_id=str(obj["tweet_id"]),
        annotator_id=str(obj["annotator_id"]),
        role=str(obj["role"]),
        aggression=bool(obj["aggression"]),
        loss=bool(obj["loss"]),
        substance_use=bool(obj["substance_use"]),
    )


def load_corpus(tweets_path, annotations_path, validate_pos=True):
    """Load and cross-validate tweet and annotation collections.

    Raises ValidationError on malformed lines (with line number), duplicate
    keys, annotations referencing unknown tweets, and pos_tags that do not
    match the tokenizer's output.
    """
    tweets = _parse_jsonl(tweets_path, _tweet_from_obj, "tweet")
    annotations = _parse_jsonl(annotations_path, _annotation_from_obj, "annotation")

    seen = set()
    for t in tweets:
        if t.tweet_id in seen:
            raise ValidationError(f"duplicate tweet_id {t.tweet_id!r}")
        seen.add(t.tweet_id)

    seen_ann = set()
    dangling = []
    for a in annotations:
        key = (a.tweet_id, a.annotator_id)
        if key in seen_ann:
            raise ValidationError(f"duplicate annotation key {key!r}")
        seen_ann.add(key)
        if a.tweet_id not in seen:
            dangling.append(a.tweet_id)
    if dangling:
        raise ValidationError(
            "annotations reference unknown tweet_ids: " + ", ".join(sorted(set(dangling)))
        )

    if validate_pos:
        from .lingfeat import tokenize  # deferred: lingfeat imports corpus types

        for t in tweets:
            if t.pos_tags is None:
                continue
            toks = [tok.surface for tok in tokenize(t.text)]
            tagged = [tok for tok, _ in t.pos_tags]
            if toks != tagged:
                raise ValidationError(
                    f"tweet {t.tweet_id}: pos_tags tokens {tagged} do not match "
                    f"tokenizer output {toks}"
                )
    return tweets, annotations


def _tweet_to_obj(t):
    obj = {"tweet_id": t.tweet_id, "user_id": t.user_id, "text": t.text, "source": t.source}
    if t.image_id is not None:
        obj["image_id"] = t.image_id
    if t.pos_tags is not None:
        obj["pos_tags"] = [[tok, tag] for tok, tag in t.pos_tags]
    return obj


def _annotation_to_obj(a):
    return {
        "tweet_id": a.tweet_id,
        "annotator_id": a.annotator_id,
        "role": a.role,
        "aggression": a.aggression,
        "loss": a.loss,
        "substance_use": a.substance_use,
    }


def write_jsonl(path, objs):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for obj in objs:
            f.write(json.dumps(obj, ensure_ascii=False, separators=(", ", ": ")))
            f.write("\n")


def save_corpus(tweets, annotations, tweets_path, annotations_path):
    write_jsonl(tweets_path, (_tweet_to_obj(t) for t in tweets))
    write_jsonl(annotations_path, (_annotation_to_obj(a) for a in annotations))


def derive_labels(annotations, rule="any_positive", tweet_ids=None):
    """Deterministic per-tweet binary labels from annotations.

    any_positive: true iff any annotator flagged the code. majority: true iff
    strictly more than half of the tweet's annotations flag it. When
    `tweet_ids` is given, every listed tweet must have at least one
    annotation.
    """
    if rule not in LABEL_RULES:
        raise ValidationError(f"unknown label rule {rule!r}; expected one of {LABEL_RULES}")
    by_tweet = defaultdict(list)
    for a in annotations:
        by_tweet[a.tweet_id].append(a)
    if tweet_ids is not None:
        missing = [tid for tid in tweet_ids if tid not in by_tweet]
        if missing:
            raise ValidationError(
                "tweets with zero annotations cannot be labeled: " + ", ".join(sorted(missing))
            )
        ids = list(tweet_ids)
    else:
        ids = sorted(by_tweet)

    out = []
    for tid in ids:
        anns = by_tweet[tid]
        labels = {}
        for code in CODES:
            flags = [a.flag(code) for a in anns]
            if rule == "any_positive":
                labels[code] = any(flags)
            else:
                labels[code] = sum(flags) * 2 > len(flags)
        out.append(CodeLabels(tweet_id=tid, labels=labels, rule=rule))
    return out


@dataclass
class CorpusStats:
    n_tweets: int
    n_users: int
    per_source: dict  # source -> tweet count
    per_user: dict  # user_id -> tweet count
    code_counts: dict  # code -> {"any_positive": int, "majority": int}
    concept_counts: dict | None = None  # concept -> {source: count, ..., "total": count}

    def rows(self):
        rows = []
        if self.concept_counts is not None:
            for concept in CONCEPTS:
                c = self.concept_counts[concept]
                rows.append(
                    [concept.replace("_", " "), c["twitter"], c["tumblr"], c["total"]]
                )
        for code in CODES:
            c = self.code_counts[code]
            rows.append(
                [code.replace("_", " "), f"{c['any_positive']} ({c['majority']})", "-", "-"]
            )
        return rows

    def render(self, fmt="markdown"):
        headers = ["Concepts/Codes", "Twitter", "Tumblr", "Total"]
        rows = [[str(c) for c in row] for row in self.rows()]
        if fmt == "csv":
            return render_csv(headers, rows)
        return render_markdown(headers, rows)


def corpus_stats(tweets, annotations, gt_boxes=None):
    """Dataset summary: per-code positives under both rules, per-source and
    per-user tweet counts, and optional per-concept box counts."""
    any_labels = derive_labels(annotations, "any_positive")
    maj_labels = derive_labels(annotations, "majority")
    code_counts = {
        code: {
            "any_positive": sum(l[code] for l in any_labels),
            "majority": sum(l[code] for l in maj_labels),
        }
        for code in CODES
    }
    per_source = Counter(t.source for t in tweets)
    per_user = Counter(t.user_id for t in tweets)

    concept_counts = None
    if gt_boxes is not None:
        source_by_image = {t.image_id: t.source for t in tweets if t.image_id is not None}
        concept_counts = {
            c: {"twitter": 0, "tumblr": 0, "total": 0} for c in CONCEPTS
        }
        for box in gt_boxes:
            entry = concept_counts[box.concept]
            entry["total"] += 1
            src = source_by_image.get(box.image_id)
            if src in entry:
                entry[src] += 1

    return CorpusStats(
        n_tweets=len(tweets),
        n_users=len(per_user),
        per_source={s: per_source.get(s, 0) for s in SOURCES},
        per_user=dict(per_user),
        code_counts=code_counts,
        concept_counts=concept_counts,
    )
