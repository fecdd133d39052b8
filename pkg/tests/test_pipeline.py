import json

import numpy as np
import pytest

from mmcode.base import ValidationError
from mmcode.corpus import CODES, TweetRecord, derive_labels
from mmcode.pipeline import (
    FeatureProvider,
    FoldAssignment,
    ModelSpec,
    evaluate_spec_fold,
    make_folds,
    merge_config,
    run_baseline,
    run_experiment,
    significance_marks,
    standard_roster,
)
from mmcode.synth import SynthConfig, generate


def tiny_cnn_config(overrides):
    cnn = dict(overrides)
    cnn.pop("filter_widths", None)
    return {
        "word": dict(overrides, filter_widths=list(overrides.get("filter_widths", (1, 2)))),
        "char": dict(overrides, filter_widths=list(overrides.get("filter_widths", (1, 2)))),
    }


def experiment_config(paths, tiny_cnn_overrides, **kw):
    cfg = {
        "seed": 11,
        "select_k": 50,
        "cnn": tiny_cnn_config(tiny_cnn_overrides),
        "data": {
            "tweets": paths["tweets"],
            "annotations": paths["annotations"],
            "global_features": paths["global_features"],
            "detections": paths["detections"],
            "gt_boxes": paths["gt_boxes"],
        },
    }
    cfg.update(kw)
    return merge_config(cfg)


@pytest.fixture(scope="module")
def exp_setup(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipeline_corpus")
    corpus = generate(
        SynthConfig(n_users=18, tweets_per_user_max=12, seed=21, global_dim=10),
        out_dir=str(out),
    )
    return corpus


@pytest.fixture(scope="module")
def exp_data(exp_setup):
    from mmcode.pipeline import load_experiment_data

    overrides = {
        "emb_dim": 12,
        "filter_widths": (1, 2),
        "maps_per_width": 4,
        "hidden_dim": 8,
        "max_len": 16,
        "batch_size": 16,
        "max_epochs": 4,
        "patience": 2,
        "lr": 0.01,
    }
    config = experiment_config(exp_setup.paths, overrides)
    data = load_experiment_data(config)
    folds = make_folds(data.tweets, data.labels_by_id, k=config["folds"], seed=config["seed"])
    return data, folds


class TestMakeFolds:
    def _tweets_for_users(self, counts):
        tweets = []
        for u, n in counts.items():
            for i in range(n):
                tweets.append(TweetRecord(f"{u}_{i}", u, "x", "twitter"))
        return tweets

    def test_five_identical_users_one_per_fold(self):
        tweets = self._tweets_for_users({f"u{i}": 3 for i in range(5)})
        folds = make_folds(tweets, {}, k=5, seed=0)
        assert sorted(folds.user_to_fold.values()) == [0, 1, 2, 3, 4]

    def test_partition_property(self, small_synth):
        labels = {l.tweet_id: l for l in derive_labels(small_synth.annotations)}
        folds = make_folds(small_synth.tweets, labels, k=5, seed=3)
        users = {t.user_id for t in small_synth.tweets}
        assert set(folds.user_to_fold) == users
        assert set(folds.user_to_fold.values()) <= set(range(5))
        assert len(set(folds.user_to_fold.values())) == 5

    def test_fewer_users_than_folds(self):
        tweets = self._tweets_for_users({"a": 2, "b": 1})
        with pytest.raises(ValidationError):
            make_folds(tweets, {}, k=5, seed=0)

    def test_balance_on_200_users(self):
        corpus = generate(
            SynthConfig(n_users=200, tweets_per_user_max=20, seed=77, global_dim=4)
        )
        labels = {l.tweet_id: l for l in derive_labels(corpus.annotations)}
        folds = make_folds(corpus.tweets, labels, k=5, seed=7)
        tweet_totals = np.zeros(5)
        positives = np.zeros((5, len(CODES)))
        for t in corpus.tweets:
            f = folds.fold_of(t.user_id)
            tweet_totals[f] += 1
            for ci, code in enumerate(CODES):
                positives[f, ci] += bool(labels[t.tweet_id][code])
        mean_total = tweet_totals.mean()
        assert np.all(np.abs(tweet_totals - mean_total) <= 0.10 * mean_total)
        for ci in range(len(CODES)):
            mean_pos = positives[:, ci].mean()
            assert np.all(np.abs(positives[:, ci] - mean_pos) <= 0.20 * mean_pos)

    def test_save_load_round_trip(self, tmp_path, small_synth):
        labels = {l.tweet_id: l for l in derive_labels(small_synth.annotations)}
        folds = make_folds(small_synth.tweets, labels, k=5, seed=3)
        path = tmp_path / "folds.json"
        folds.save(path)
        loaded = FoldAssignment.load(path)
        assert loaded.user_to_fold == folds.user_to_fold
        assert (loaded.k, loaded.seed) == (folds.k, folds.seed)

    def test_deterministic_given_seed(self, small_synth):
        labels = {l.tweet_id: l for l in derive_labels(small_synth.annotations)}
        a = make_folds(small_synth.tweets, labels, k=5, seed=9)
        b = make_folds(small_synth.tweets, labels, k=5, seed=9)
        assert a.user_to_fold == b.user_to_fold


class TestBaselines:
    def test_positive_baseline_closed_form(self):
        y_train = np.array([1, 0, 0, 0])
        y_test = np.array([1, 0, 0, 0])
        scores, preds = run_baseline("positive", y_train, y_test, seed=0)
        from mmcode.learn import classification_metrics

        p, r, f1, ap = classification_metrics(scores, preds, y_test)
        assert r == 1.0
        assert p == pytest.approx(0.25, abs=1e-12)
        assert f1 == pytest.approx(0.40, abs=1e-12)

    def test_random_baseline_f1_near_prior(self):
        prior = 0.25
        rng = np.random.default_rng(0)
        y_train = (rng.random(400) < prior).astype(int)
        f1s = []
        from mmcode.learn import classification_metrics

        for trial in range(1000):
            y_test = (rng.random(200) < prior).astype(int)
            scores, preds = run_baseline("random", y_train, y_test, seed=trial)
            _, _, f1, _ = classification_metrics(scores, preds, y_test)
            f1s.append(f1)
        assert abs(np.mean(f1s) - prior) < 0.03

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            run_baseline("oracle", np.array([0, 1]), np.array([0, 1]), 0)


class TestSignificanceMarks:
    def test_model_vs_itself_flagged(self):
        aps = {"a": [0.5, 0.6, 0.4, 0.5, 0.5], "b": [0.5, 0.6, 0.4, 0.5, 0.5]}
        best, flags = significance_marks(aps)
        assert flags["a"] and flags["b"]

    def test_constant_gap_significant(self):
        base = np.array([0.5, 0.6, 0.4, 0.55, 0.45])
        aps = {"best": list(base), "worse": list(base - 0.2)}
        best, flags = significance_marks(aps)
        assert best == "best"
        assert flags["best"] is True
        assert flags["worse"] is False

    def test_small_differences_not_significant(self):
        base = np.array([0.5, 0.6, 0.4, 0.55, 0.45])
        diffs = np.array([0.01, -0.02, 0.02, -0.01, 0.00])
        aps = {"best": list(base + np.maximum(diffs, 0)), "other": list(base + np.maximum(diffs, 0) - diffs)}
        best, flags = significance_marks(aps)
        assert flags["other"] is True  # |t| < 2.776

    def test_unequal_fold_counts_error(self):
        with pytest.raises(ValidationError):
            significance_marks({"a": [0.5] * 5, "b": [0.5] * 4})

    def test_ci_overlap_mode(self):
        aps = {"a": [0.50, 0.52, 0.48, 0.51, 0.49], "b": [0.49, 0.51, 0.47, 0.52, 0.50]}
        _, flags = significance_marks(aps, method="ci_overlap")
        assert all(flags.values())


class TestModelSpec:
    def test_late_fusion_needs_two(self):
        with pytest.raises(ValidationError):
            ModelSpec("bad", "text", ("cnn_word",), "late")

    def test_gt_never_in_fusion(self):
        with pytest.raises(ValidationError, match="out of competition"):
            ModelSpec("bad", "image", ("gt_counts", "global"), "early")

    def test_unknown_space(self):
        with pytest.raises(ValidationError):
            ModelSpec("bad", "image", ("pixel_soup",), "none")

    def test_standard_roster_structure(self):
        roster = standard_roster()
        names = [s.name for s in roster]
        assert names[0] == "random-baseline" and names[1] == "positive-baseline"
        for spec in roster:
            if spec.fusion != "none":
                assert "gt_counts" not in spec.features
        assert any(s.out_of_competition for s in roster)


class TestRunExperiment:
    def test_degenerate_early_fusion_equals_single(self, exp_data):
        data, folds = exp_data
        single = ModelSpec("global", "image", ("global",), "none")
        fused = ModelSpec("global-early", "image", ("global",), "early")
        out_single = evaluate_spec_fold(single, "aggression", 0, FeatureProvider(data, folds))
        out_fused = evaluate_spec_fold(fused, "aggression", 0, FeatureProvider(data, folds))
        assert np.array_equal(out_single.scores, out_fused.scores)
        assert np.array_equal(out_single.preds, out_fused.preds)
        assert out_single.metrics() == out_fused.metrics()

    def test_missing_feature_block_named(self, exp_setup, tiny_cnn_overrides):
        config = experiment_config(exp_setup.paths, tiny_cnn_overrides)
        config["data"]["global_features"] = None
        from mmcode.pipeline import load_experiment_data

        data = load_experiment_data(config)
        folds = make_folds(data.tweets, data.labels_by_id, k=5, seed=11)
        provider = FeatureProvider(data, folds)
        spec = ModelSpec("global", "image", ("global",), "none")
        with pytest.raises(ValidationError, match="global"):
            evaluate_spec_fold(spec, "loss", 0, provider)

    def test_report_map_is_mean_of_code_means(self, exp_setup, tiny_cnn_overrides, tmp_path):
        config = experiment_config(
            exp_setup.paths,
            tiny_cnn_overrides,
            models=["random-baseline", "positive-baseline", "local-0.1"],
        )
        report = run_experiment(config, out_dir=str(tmp_path / "out"))
        for entry in report.entries:
            name = entry["name"]
            expected = np.mean([report.mean_ap(name, code) for code in CODES])
            assert report.map_of(name) == pytest.approx(expected, abs=1e-12)
        assert (tmp_path / "out" / "table2.md").exists()
        assert (tmp_path / "out" / "table2.csv").exists()
        assert (tmp_path / "out" / "results.json").exists()
        assert (tmp_path / "out" / "folds.json").exists()

    def test_fold_map_is_per_fold_mean_over_codes(self, exp_setup, tiny_cnn_overrides, tmp_path):
        config = experiment_config(
            exp_setup.paths, tiny_cnn_overrides, models=["positive-baseline"]
        )
        report = run_experiment(config, out_dir=str(tmp_path / "out"))
        fold_maps = report.fold_map("positive-baseline")
        per_code = np.array(
            [[m["ap"] for m in report.entries[0]["per_code"][code]] for code in CODES]
        )
        assert np.allclose(fold_maps, per_code.mean(axis=0))

    def test_jobs_parallel_matches_serial(self, exp_setup, tiny_cnn_overrides, tmp_path):
        config = experiment_config(
            exp_setup.paths,
            tiny_cnn_overrides,
            models=["random-baseline", "linguistic", "local-0.5"],
        )
        serial = run_experiment(config, out_dir=str(tmp_path / "serial"))
        parallel = run_experiment(config, out_dir=str(tmp_path / "parallel"), jobs=4)
        a = (tmp_path / "serial" / "results.json").read_bytes()
        b = (tmp_path / "parallel" / "results.json").read_bytes()
        assert a == b

    def test_early_fusion_text_dimension(self, tmp_path_factory, tiny_cnn_overrides):
        """Selected linguistic (k) + char hidden + word hidden columns."""
        out = tmp_path_factory.mktemp("dim_corpus")
        corpus = generate(
            SynthConfig(n_users=14, tweets_per_user_max=10, seed=2, global_dim=6),
            out_dir=str(out),
        )
        overrides = dict(tiny_cnn_overrides, hidden_dim=20, max_epochs=2, patience=1)
        config = experiment_config(corpus.paths, overrides, select_k=30)
        from mmcode.pipeline import TEXT_BLOCKS, load_experiment_data

        data = load_experiment_data(config)
        folds = make_folds(data.tweets, data.labels_by_id, k=5, seed=11)
        provider = FeatureProvider(data, folds)
        result = provider.block_model(TEXT_BLOCKS, "aggression", 0)
        assert result.states["scaler"]["mean"].shape == (30 + 20 + 20,)


class TestLeakage:
    def test_audit_hashes_match(self, exp_setup, tiny_cnn_overrides):
        from mmcode.pipeline import leakage_audit, load_experiment_data

        overrides = dict(tiny_cnn_overrides, max_epochs=2, patience=1)
        config = experiment_config(exp_setup.paths, overrides, select_k=25)
        data = load_experiment_data(config)
        folds = make_folds(data.tweets, data.labels_by_id, k=5, seed=11)
        audit = leakage_audit(
            data, folds, spaces=("linguistic", "cnn_word", "global"), codes=("loss",)
        )
        for fold, (h_with, h_without, match) in audit.items():
            assert match, f"fold {fold}: fitted state depends on the test fold"


@pytest.fixture(scope="module")
def planted(tmp_path_factory):
    """Crafted gt boxes: handgun tracks aggression, joint tracks substance
    use, other concepts are label-independent noise."""
    out = tmp_path_factory.mktemp("planted")
    corpus = generate(
        SynthConfig(
            n_users=25,
            tweets_per_user_max=14,
            seed=41,
            global_dim=6,
            image_signal_strength=0.0,
            image_prob=1.0,
            annotator_miss_rates=(0.0, 0.0, 0.0),
        ),
        out_dir=str(out),
    )
    rng = np.random.default_rng(8)
    lines = []
    for tweet, row in zip(corpus.tweets, corpus.ledger):
        img = tweet.image_id
        if img is None:
            continue

        def box():
            return [round(float(rng.uniform(0, 500)), 1), 10.0, 40.0, 30.0]

        if row["latent"]["aggression"]:
            if rng.random() < 0.85:
                lines.append({"image_id": img, "concept": "handgun", "box": box()})
        elif rng.random() < 0.05:
            lines.append({"image_id": img, "concept": "handgun", "box": box()})
        if row["latent"]["substance_use"]:
            if rng.random() < 0.85:
                lines.append({"image_id": img, "concept": "joint", "box": box()})
        elif rng.random() < 0.05:
            lines.append({"image_id": img, "concept": "joint", "box": box()})
        for concept in ("person", "money", "tattoo"):
            if rng.random() < 0.3:
                lines.append({"image_id": img, "concept": concept, "box": box()})
    gt_path = out / "gt_boxes.jsonl"
    with open(gt_path, "w", encoding="utf-8") as f:
        for obj in lines:
            f.write(json.dumps(obj) + "\n")
    paths = dict(corpus.paths)
    paths["gt_boxes"] = str(gt_path)
    return paths


@pytest.fixture(scope="module")
def planted_provider(planted, tiny_cnn_overrides):
    from mmcode.pipeline import load_experiment_data

    config = experiment_config(planted, tiny_cnn_overrides)
    data = load_experiment_data(config)
    folds = make_folds(data.tweets, data.labels_by_id, k=5, seed=11)
    return FeatureProvider(data, folds)


class TestSensitivityAndAblation:
    def test_sensitivity_identifies_planted_concepts(self, planted_provider):
        from mmcode.pipeline import sensitivity_table

        table = sensitivity_table(planted_provider, variants=("gt_counts",))
        coefs = table.coefficients["gt_counts"]
        agg = coefs["aggression"]
        assert max(agg, key=agg.get) == "handgun"
        sub = coefs["substance_use"]
        assert max(sub, key=sub.get) == "joint"

    def test_sensitivity_zero_coefficient_for_absent_feature(self, planted_provider):
        from mmcode.pipeline import sensitivity_table

        table = sensitivity_table(planted_provider, variants=("gt_counts",))
        # long_gun never occurs in the crafted boxes: its column is all zero
        for code in CODES:
            assert abs(table.coefficients["gt_counts"][code]["long_gun"]) < 1e-6

    def test_sensitivity_order_invariant(self, planted_provider, rng):
        from mmcode.learn import LinearSquaredHingeSVM

        X_train, _ = planted_provider.block("gt_counts", "aggression", 0)
        y_train, _ = planted_provider.labels("aggression", 0)
        svm = LinearSquaredHingeSVM(C=1.0).fit(X_train, y_train)
        perm = rng.permutation(X_train.shape[0])
        svm_perm = LinearSquaredHingeSVM(C=1.0).fit(X_train[perm], y_train[perm])
        assert np.allclose(svm.coef_, svm_perm.coef_, atol=1e-5)

    def test_ablation_flags_planted_concepts(self, planted_provider):
        from mmcode.pipeline import ablation_table

        table = ablation_table(planted_provider)
        agg_ap = {c: np.mean(d) for c, d in table.delta_ap["aggression"].items()}
        sub_ap = {c: np.mean(d) for c, d in table.delta_ap["substance_use"].items()}
        assert table.significant(table.delta_ap["aggression"]["handgun"])
        assert agg_ap["handgun"] < 0
        assert table.significant(table.delta_ap["substance_use"]["joint"])
        assert sub_ap["joint"] < 0
        # removing the all-zero concept is an exact no-op
        assert np.allclose(table.delta_ap["aggression"]["long_gun"], 0.0)
        assert not table.significant(table.delta_ap["aggression"]["long_gun"])

    def test_ablation_suppresses_codes_without_significance(self):
        from mmcode.corpus import CONCEPTS
        from mmcode.pipeline import AblationTable

        quiet = [0.01, -0.01, 0.02, -0.02, 0.0]  # |t| < 2.776
        loud = [-0.30, -0.28, -0.25, -0.31, -0.27]
        delta_f1 = {code: {c: list(quiet) for c in CONCEPTS} for code in CODES}
        delta_ap = {code: {c: list(quiet) for c in CONCEPTS} for code in CODES}
        delta_ap["aggression"]["handgun"] = loud
        delta_ap["substance_use"]["joint"] = loud
        table = AblationTable(delta_f1=delta_f1, delta_ap=delta_ap)
        assert table.visible_codes() == ["aggression", "substance_use"]
        headers, rows = table.table()
        assert not any("loss" in h for h in headers)
        joint_row = next(r for r in rows if r[0] == "joint")
        assert any(cell.startswith("**") for cell in joint_row[1:])

    def test_ablation_deltas_not_additive(self):
        # documented non-additivity: two perfectly redundant concepts both
        # yield zero delta although removing both would destroy the model
        deltas_joint = [0.0] * 5
        deltas_marijuana = [0.0] * 5
        full_model_drop_if_both_removed = -0.5
        assert sum(np.mean(d) for d in (deltas_joint, deltas_marijuana)) != pytest.approx(
            full_model_drop_if_both_removed
        )
