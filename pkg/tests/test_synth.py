import hashlib

import numpy as np
import pytest
from scipy import stats as scipy_stats

from mmcode.base import ValidationError
from mmcode.corpus import CODES, derive_labels
from mmcode.synth import CODE_VOCAB, SynthConfig, generate


def sha256(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


class TestDeterminism:
    def test_same_seed_identical_files(self, tmp_path):
        cfg = dict(n_users=10, seed=99, global_dim=8)
        a = generate(SynthConfig(**cfg), out_dir=str(tmp_path / "a"))
        b = generate(SynthConfig(**cfg), out_dir=str(tmp_path / "b"))
        for name in a.paths:
            assert sha256(a.paths[name]) == sha256(b.paths[name]), name

    def test_different_seed_differs(self, tmp_path):
        a = generate(SynthConfig(n_users=10, seed=1, global_dim=8), out_dir=str(tmp_path / "a"))
        b = generate(SynthConfig(n_users=10, seed=2, global_dim=8), out_dir=str(tmp_path / "b"))
        assert sha256(a.paths["tweets"]) != sha256(b.paths["tweets"])


class TestConfigValidation:
    def test_min_users(self):
        with pytest.raises(ValidationError):
            generate(SynthConfig(n_users=4))

    def test_priors_in_unit_interval(self):
        with pytest.raises(ValidationError):
            generate(SynthConfig(code_priors=(0.5, 1.2, 0.1)))

    def test_per_code_strengths_accepted(self):
        corpus = generate(
            SynthConfig(
                n_users=6,
                seed=3,
                global_dim=4,
                text_signal_strength=(0.0, 0.9, 0.0),
                image_signal_strength=(0.9, 0.0, 0.9),
            )
        )
        assert len(corpus.tweets) > 0


class TestStatisticalProperties:
    def test_zero_text_signal_independence(self):
        corpus = generate(
            SynthConfig(
                n_users=120,
                tweets_per_user_max=20,
                seed=31,
                global_dim=4,
                text_signal_strength=0.0,
                annotator_miss_rates=(0.0, 0.0, 0.0),
            )
        )
        assert len(corpus.tweets) >= 1000
        for ci, code in enumerate(CODES):
            vocab = set(CODE_VOCAB[code])
            table = np.zeros((2, 2))
            for tweet, row in zip(corpus.tweets, corpus.ledger):
                has_signal = any(tok in vocab for tok in tweet.text.split(" "))
                table[int(row["latent"][code]), int(has_signal)] += 1
            _, p_value, _, _ = scipy_stats.chi2_contingency(table)
            assert p_value > 0.01, code

    def test_nonzero_signal_dependence(self):
        corpus = generate(
            SynthConfig(n_users=80, seed=13, global_dim=4, text_signal_strength=0.9)
        )
        code = "loss"
        vocab = set(CODE_VOCAB[code])
        table = np.zeros((2, 2))
        for tweet, row in zip(corpus.tweets, corpus.ledger):
            has_signal = any(tok in vocab for tok in tweet.text.split(" "))
            table[int(row["latent"][code]), int(has_signal)] += 1
        _, p_value, _, _ = scipy_stats.chi2_contingency(table)
        assert p_value < 1e-6

    def test_any_positive_rates_near_priors(self):
        priors = (0.25, 0.21, 0.20)
        corpus = generate(
            SynthConfig(n_users=150, tweets_per_user_max=20, seed=17, global_dim=4, code_priors=priors)
        )
        assert len(corpus.tweets) >= 1400
        labels = derive_labels(corpus.annotations, "any_positive")
        for prior, code in zip(priors, CODES):
            rate = np.mean([l[code] for l in labels])
            assert abs(rate - prior) < 0.05, (code, rate)


class TestInvariants:
    def test_per_user_tweet_cap(self, small_synth):
        from collections import Counter

        per_user = Counter(t.user_id for t in small_synth.tweets)
        assert max(per_user.values()) <= 12

    def test_zero_noise_labels_match_ledger(self):
        corpus = generate(
            SynthConfig(n_users=10, seed=23, global_dim=4, annotator_miss_rates=(0.0, 0.0, 0.0))
        )
        labels = {l.tweet_id: l for l in derive_labels(corpus.annotations, "any_positive")}
        for row in corpus.ledger:
            for code in CODES:
                assert labels[row["tweet_id"]][code] == row["latent"][code]

    def test_files_cover_images(self, small_synth):
        image_ids = {t.image_id for t in small_synth.tweets if t.image_id}
        assert {img for img, _ in small_synth.global_features} == image_ids
        assert {b.image_id for b in small_synth.gt_boxes} <= image_ids

    def test_pos_tags_align(self, small_synth):
        from mmcode.lingfeat import tokenize

        tagged = [t for t in small_synth.tweets if t.pos_tags is not None]
        assert tagged, "expected some tweets with pos tags"
        for t in tagged:
            assert [tok.surface for tok in tokenize(t.text)] == [tok for tok, _ in t.pos_tags]
