import json
import random

import pytest

from mmcode.base import ValidationError
from mmcode.corpus import (
    CODES,
    CodeAnnotation,
    TweetRecord,
    corpus_stats,
    derive_labels,
    load_corpus,
    save_corpus,
)


def write_lines(path, objs):
    with open(path, "w", encoding="utf-8") as f:
        for obj in objs:
            f.write(json.dumps(obj, ensure_ascii=False) + "\n")


TWEET = {"tweet_id": "t1", "user_id": "u1", "text": "free my bro", "source": "twitter"}


def make_annotation(tweet_id, annotator, agg=False, loss=False, sub=False, role="student"):
    return {
        "tweet_id": tweet_id,
        "annotator_id": annotator,
        "role": role,
        "aggression": agg,
        "loss": loss,
        "substance_use": sub,
    }


class TestLoadCorpus:
    def test_empty_annotations(self, tmp_path):
        write_lines(tmp_path / "t.jsonl", [TWEET])
        (tmp_path / "a.jsonl").write_text("")
        tweets, annotations = load_corpus(tmp_path / "t.jsonl", tmp_path / "a.jsonl")
        assert len(tweets) == 1 and len(annotations) == 0

    def test_dangling_annotation_names_id(self, tmp_path):
        write_lines(tmp_path / "t.jsonl", [TWEET])
        write_lines(tmp_path / "a.jsonl", [make_annotation("missing_tweet", "a1")])
        with pytest.raises(ValidationError, match="missing_tweet"):
            load_corpus(tmp_path / "t.jsonl", tmp_path / "a.jsonl")

    def test_malformed_line_reports_line_number(self, tmp_path):
        (tmp_path / "t.jsonl").write_text(json.dumps(TWEET) + "\n{broken\n")
        (tmp_path / "a.jsonl").write_text("")
        with pytest.raises(ValidationError, match=":2"):
            load_corpus(tmp_path / "t.jsonl", tmp_path / "a.jsonl")

    def test_duplicate_tweet_id(self, tmp_path):
        write_lines(tmp_path / "t.jsonl", [TWEET, TWEET])
        (tmp_path / "a.jsonl").write_text("")
        with pytest.raises(ValidationError, match="duplicate"):
            load_corpus(tmp_path / "t.jsonl", tmp_path / "a.jsonl")

    def test_duplicate_annotation_key(self, tmp_path):
        write_lines(tmp_path / "t.jsonl", [TWEET])
        ann = make_annotation("t1", "a1")
        write_lines(tmp_path / "a.jsonl", [ann, ann])
        with pytest.raises(ValidationError, match="duplicate"):
            load_corpus(tmp_path / "t.jsonl", tmp_path / "a.jsonl")

    def test_pos_tags_must_align(self, tmp_path):
        bad = dict(TWEET, pos_tags=[["wrong", "N"]])
        write_lines(tmp_path / "t.jsonl", [bad])
        (tmp_path / "a.jsonl").write_text("")
        with pytest.raises(ValidationError, match="pos_tags"):
            load_corpus(tmp_path / "t.jsonl", tmp_path / "a.jsonl")

    def test_round_trip_identity(self, tmp_path, small_synth):
        t2 = tmp_path / "tweets2.jsonl"
        a2 = tmp_path / "annotations2.jsonl"
        save_corpus(small_synth.tweets, small_synth.annotations, t2, a2)
        tweets, annotations = load_corpus(t2, a2)
        assert tweets == small_synth.tweets
        assert annotations == small_synth.annotations
        # and byte-identical against the generator's own files
        assert t2.read_bytes() == open(small_synth.paths["tweets"], "rb").read()


class TestDeriveLabels:
    def _annotations(self, flags):
        return [
            CodeAnnotation("t1", f"a{i}", "student", aggression=bool(v), loss=False, substance_use=False)
            for i, v in enumerate(flags)
        ]

    def test_any_positive_single_flag(self):
        labels = derive_labels(self._annotations([1, 0, 0, 0]), "any_positive")
        assert labels[0]["aggression"] is True

    def test_majority_one_of_four(self):
        labels = derive_labels(self._annotations([1, 0, 0, 0]), "majority")
        assert labels[0]["aggression"] is False

    def test_majority_three_of_four(self):
        labels = derive_labels(self._annotations([1, 1, 0, 1]), "majority")
        assert labels[0]["aggression"] is True

    def test_zero_annotations_error(self):
        with pytest.raises(ValidationError, match="zero annotations"):
            derive_labels(self._annotations([1]), "any_positive", tweet_ids=["t1", "t2"])

    def test_unknown_rule(self):
        with pytest.raises(ValidationError):
            derive_labels(self._annotations([1]), "plurality")

    def test_order_independent(self, small_synth):
        anns = list(small_synth.annotations)
        base = derive_labels(anns, "majority")
        random.Random(3).shuffle(anns)
        assert derive_labels(anns, "majority") == base

    def test_majority_subset_of_any_positive(self, small_synth):
        any_pos = {l.tweet_id: l for l in derive_labels(small_synth.annotations, "any_positive")}
        majority = derive_labels(small_synth.annotations, "majority")
        for label in majority:
            for code in CODES:
                if label[code]:
                    assert any_pos[label.tweet_id][code]


class TestCorpusStats:
    def test_empty(self):
        stats = corpus_stats([], [])
        assert stats.n_tweets == 0
        assert all(c["any_positive"] == 0 for c in stats.code_counts.values())

    def test_any_positive_at_least_majority(self, small_synth):
        stats = corpus_stats(small_synth.tweets, small_synth.annotations)
        for code in CODES:
            assert stats.code_counts[code]["any_positive"] >= stats.code_counts[code]["majority"]

    def test_counts_match_generator_ledger(self, small_synth):
        # zero-noise corpus: derived any-positive labels equal the latent draws
        from mmcode.synth import SynthConfig, generate

        corpus = generate(
            SynthConfig(n_users=10, seed=11, global_dim=8, annotator_miss_rates=(0.0, 0.0, 0.0))
        )
        stats = corpus_stats(corpus.tweets, corpus.annotations)
        planted = {code: sum(row["latent"][code] for row in corpus.ledger) for code in CODES}
        for code in CODES:
            assert stats.code_counts[code]["any_positive"] == planted[code]

    def test_concept_counts_by_source(self, small_synth):
        stats = corpus_stats(small_synth.tweets, small_synth.annotations, small_synth.gt_boxes)
        for concept, row in stats.concept_counts.items():
            assert row["total"] == row["twitter"] + row["tumblr"]
        total = sum(row["total"] for row in stats.concept_counts.values())
        assert total == len(small_synth.gt_boxes)
