"""Experiment orchestration: grouped fold construction, baselines, the full
model roster (single-feature, early-fusion, late-fusion), significance
marking, sensitivity analysis, ablation study, and the leakage audit."""

from __future__ import annotations

import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import stats

from .base import (
    TrainingError,
    ValidationError,
    derive_seed,
    rng_from_seed,
    state_hash,
)
from .corpus import CODES, derive_labels, load_corpus
from .imfeat import (
    concept_count_matrix,
    global_feature_matrix,
    group_by_image,
    gt_concept_count_matrix,
    load_detections,
    load_global,
    load_gt_boxes,
)
from .learn import (
    AnovaFSelector,
    CalibratedClassifier,
    LinearSquaredHingeSVM,
    RbfSVM,
    Standardizer,
    classification_metrics,
)
from .lingfeat import LinguisticFeaturizer, load_dal, load_phrasebook
from .tables import write_table
from .textcnn import TextCnn, TextCnnConfig, load_embeddings

logger = logging.getLogger(__name__)

TEXT_BLOCKS = ("linguistic", "cnn_char", "cnn_word")
VISUAL_BLOCKS = ("global", "counts@0.1", "counts@0.5")
GT_BLOCK = "gt_counts"
KNOWN_SPACES = TEXT_BLOCKS + VISUAL_BLOCKS + (GT_BLOCK,)


# ---------------------------------------------------------------------------
# fold construction


@dataclass
class FoldAssignment:
    user_to_fold: dict
    k: int
    seed: int

    def fold_of(self, user_id):
        return self.user_to_fold[user_id]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(
                {"k": self.k, "seed": self.seed, "user_to_fold": self.user_to_fold},
                f,
                sort_keys=True,
                indent=2,
            )
            f.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as f:
            obj = json.load(f)
        return cls(user_to_fold=dict(obj["user_to_fold"]), k=int(obj["k"]), seed=int(obj["seed"]))


def make_folds(tweets, labels_by_id, k=5, seed=0):
    """Greedy user-level fold balancing.

    Users are taken in decreasing tweet-count order (the seed shuffles users
    with equal counts); each goes to the fold minimizing the total squared
    deviation of fold totals from the running fold mean, summed over tweet
    count and the three per-code positive counts.
    """
    users = sorted({t.user_id for t in tweets})
    if len(users) < k:
        raise ValidationError(f"{len(users)} users cannot fill {k} folds")

    stats_by_user = {u: np.zeros(1 + len(CODES)) for u in users}
    for t in tweets:
        row = stats_by_user[t.user_id]
        row[0] += 1
        labels = labels_by_id.get(t.tweet_id)
        if labels is not None:
            for ci, code in enumerate(CODES):
                row[1 + ci] += bool(labels[code])

    rng = rng_from_seed(seed)
    tiebreak = {u: r for u, r in zip(users, rng.permutation(len(users)))}
    order = sorted(users, key=lambda u: (-stats_by_user[u][0], tiebreak[u]))

    totals = np.zeros((k, 1 + len(CODES)))
    assignment = {}
    grand = np.zeros(1 + len(CODES))
    for u in order:
        stat = stats_by_user[u]
        grand += stat
        mean = grand / k
        # full post-assignment deviation; only the candidate fold's term moves
        delta = ((totals + stat - mean) ** 2 - (totals - mean) ** 2).sum(axis=1)
        f = int(np.argmin(delta))
        assignment[u] = f
        totals[f] += stat

    counts = np.bincount(list(assignment.values()), minlength=k)
    for empty in np.flatnonzero(counts == 0):
        donor = int(np.argmax(counts))
        movable = sorted(
            (u for u, f in assignment.items() if f == donor),
            key=lambda u: stats_by_user[u][0],
        )[0]
        assignment[movable] = int(empty)
        counts[donor] -= 1
        counts[empty] += 1
    return FoldAssignment(user_to_fold=assignment, k=k, seed=seed)


# ---------------------------------------------------------------------------
# model specifications


@dataclass(frozen=True)
class ModelSpec:
    name: str
    modality: str  # text | image | multimodal | baseline
    features: tuple
    fusion: str  # none | early | late
    out_of_competition: bool = False

    def __post_init__(self):
        if self.fusion not in ("none", "early", "late"):
            raise ValidationError(f"{self.name}: unknown fusion {self.fusion!r}")
        if self.fusion == "late" and len(self.features) < 2:
            raise ValidationError(f"{self.name}: late fusion requires at least 2 feature spaces")
        if self.fusion != "none" and GT_BLOCK in self.features:
            raise ValidationError(
                f"{self.name}: ground-truth concept features are out of competition "
                "and never enter fusion"
            )
        unknown = [f for f in self.features if f not in KNOWN_SPACES]
        if unknown:
            raise ValidationError(f"{self.name}: unknown feature spaces {unknown}")


def standard_roster(include_gt=True):
    specs = [
        ModelSpec("random-baseline", "baseline", (), "none"),
        ModelSpec("positive-baseline", "baseline", (), "none"),
        ModelSpec("linguistic", "text", ("linguistic",), "none"),
        ModelSpec("cnn-char", "text", ("cnn_char",), "none"),
        ModelSpec("cnn-word", "text", ("cnn_word",), "none"),
        ModelSpec("all-textual-early", "text", TEXT_BLOCKS, "early"),
        ModelSpec("all-textual-late", "text", TEXT_BLOCKS, "late"),
        ModelSpec("global", "image", ("global",), "none"),
        ModelSpec("local-0.1", "image", ("counts@0.1",), "none"),
        ModelSpec("local-0.5", "image", ("counts@0.5",), "none"),
        ModelSpec("all-visual-early", "image", VISUAL_BLOCKS, "early"),
        ModelSpec("all-visual-late", "image", VISUAL_BLOCKS, "late"),
        ModelSpec("all-early", "multimodal", TEXT_BLOCKS + VISUAL_BLOCKS, "early"),
        ModelSpec("all-late", "multimodal", TEXT_BLOCKS + VISUAL_BLOCKS, "late"),
    ]
    if include_gt:
        specs.append(
            ModelSpec("gt-concepts", "image", (GT_BLOCK,), "none", out_of_competition=True)
        )
    return specs


# ---------------------------------------------------------------------------
# configuration


DEFAULT_CONFIG = {
    "seed": 0,
    "folds": 5,
    "label_rule": "any_positive",
    "select_k": 1300,
    "min_df": 1,
    "binary_ngrams": False,
    "linear_c": {"aggression": 0.01, "loss": 0.03, "substance_use": 0.003},
    "rbf_c": 1.0,
    "sensitivity_c": 1.0,
    "calibration_folds": 3,
    "significance": "ttest",  # or "ci_overlap"
    "models": None,  # None -> standard roster
    "include_gt_model": True,
    "cnn": {"word": {}, "char": {}},
    "data": {
        "tweets": None,
        "annotations": None,
        "global_features": None,
        "detections": None,
        "gt_boxes": None,
        "dal": None,  # None -> bundled toy lexicon
        "phrasebook": None,
        "embeddings": None,
    },
}


def merge_config(overrides=None):
    def deep_merge(base, over):
        out = dict(base)
        for key, value in (over or {}).items():
            if isinstance(value, dict) and isinstance(out.get(key), dict):
                out[key] = deep_merge(out[key], value)
            else:
                out[key] = value
        return out

    return deep_merge(DEFAULT_CONFIG, overrides)


def bundled_lexicon_paths():
    data_dir = os.path.join(os.path.dirname(__file__), "data")
    return os.path.join(data_dir, "toy_dal.csv"), os.path.join(data_dir, "toy_phrasebook.csv")


@dataclass
class ExperimentData:
    tweets: list
    labels_by_id: dict
    y: dict  # code -> int array aligned with tweets
    config: dict
    global_store: object = None
    detections_by_image: dict = field(default_factory=dict)
    gt_by_image: dict = field(default_factory=dict)
    dal: dict = field(default_factory=dict)
    phrasebook: dict = field(default_factory=dict)
    embeddings: dict | None = None

    def restricted(self, keep_mask):
        """Copy with only the masked tweets (used by the leakage audit)."""
        tweets = [t for t, keep in zip(self.tweets, keep_mask) if keep]
        return ExperimentData(
            tweets=tweets,
            labels_by_id=self.labels_by_id,
            y={code: self.y[code][keep_mask] for code in CODES},
            config=self.config,
            global_store=self.global_store,
            detections_by_image=self.detections_by_image,
            gt_by_image=self.gt_by_image,
            dal=self.dal,
            phrasebook=self.phrasebook,
            embeddings=self.embeddings,
        )


def load_experiment_data(config):
    paths = config["data"]
    if not paths.get("tweets") or not paths.get("annotations"):
        raise ValidationError("config data.tweets and data.annotations are required")
    tweets, annotations = load_corpus(paths["tweets"], paths["annotations"])
    labels = derive_labels(
        annotations, config["label_rule"], tweet_ids=[t.tweet_id for t in tweets]
    )
    labels_by_id = {l.tweet_id: l for l in labels}
    y = {
        code: np.array([int(labels_by_id[t.tweet_id][code]) for t in tweets], dtype=np.int64)
        for code in CODES
    }

    dal_path, pb_path = bundled_lexicon_paths()
    dal = load_dal(paths.get("dal") or dal_path)
    phrasebook = load_phrasebook(paths.get("phrasebook") or pb_path, dal=dal)

    data = ExperimentData(
        tweets=tweets,
        labels_by_id=labels_by_id,
        y=y,
        config=config,
        dal=dal,
        phrasebook=phrasebook,
    )
    if paths.get("global_features"):
        data.global_store = load_global(paths["global_features"])
    if paths.get("detections"):
        data.detections_by_image = group_by_image(load_detections(paths["detections"]))
    if paths.get("gt_boxes"):
        data.gt_by_image = group_by_image(load_gt_boxes(paths["gt_boxes"]))
    if paths.get("embeddings"):
        data.embeddings = load_embeddings(paths["embeddings"])
    return data


# ---------------------------------------------------------------------------
# feature provider with memoized per-fold state


class _Memo:
    def __init__(self):
        self._lock = threading.Lock()
        self._store = {}
        self._events = {}

    def get(self, key, builder):
        with self._lock:
            if key in self._store:
                return self._unwrap(self._store[key])
            event = self._events.get(key)
            owner = event is None
            if owner:
                self._events[key] = event = threading.Event()
        if owner:
            try:
                value = ("ok", builder())
            except BaseException as exc:  # propagate to waiters too
                value = ("error", exc)
            with self._lock:
                self._store[key] = value
            event.set()
            return self._unwrap(value)
        event.wait()
        with self._lock:
            return self._unwrap(self._store[key])

    @staticmethod
    def _unwrap(value):
        status, payload = value
        if status == "error":
            raise payload
        return payload


@dataclass
class BlockModelResult:
    kind: str  # "linear" | "rbf"
    test_scores: np.ndarray
    test_preds: np.ndarray
    test_proba: np.ndarray
    oof_proba: np.ndarray
    states: dict


class FeatureProvider:
    """Builds per-fold feature matrices and fitted per-block models.

    Everything fold-local is fit on the training split only; per-task seeds
    derive from the master seed and the (purpose, code, fold, spaces) path so
    unrelated tasks never share or reshuffle randomness.
    """

    def __init__(self, data, folds):
        self.data = data
        self.folds = folds
        self.config = data.config
        self.master_seed = int(self.config["seed"])
        self._memo = _Memo()
        self._tweet_folds = np.array(
            [folds.fold_of(t.user_id) for t in data.tweets], dtype=np.int64
        )

    def split(self, fold):
        test = self._tweet_folds == fold
        return np.flatnonzero(~test), np.flatnonzero(test)

    def labels(self, code, fold):
        train_idx, test_idx = self.split(fold)
        y = self.data.y[code]
        return y[train_idx], y[test_idx]

    # -- raw feature blocks -------------------------------------------------

    def _full_matrix(self, space):
        def build():
            data = self.data
            if space == "global":
                if data.global_store is None:
                    raise ValidationError("feature block 'global' needs data.global_features")
                return global_feature_matrix(data.tweets, data.global_store)
            if space.startswith("counts@"):
                if not data.detections_by_image:
                    raise ValidationError(f"feature block {space!r} needs data.detections")
                threshold = float(space.split("@", 1)[1])
                return concept_count_matrix(data.tweets, data.detections_by_image, threshold)
            if space == GT_BLOCK:
                if not data.gt_by_image:
                    raise ValidationError("feature block 'gt_counts' needs data.gt_boxes")
                return gt_concept_count_matrix(data.tweets, data.gt_by_image)
            raise ValidationError(f"unknown feature space {space!r}")

        return self._memo.get(("matrix", space), build)

    def linguistic_featurizer(self, fold):
        def build():
            train_idx, test_idx = self.split(fold)
            tweets = self.data.tweets
            featurizer = LinguisticFeaturizer(
                dal=self.data.dal,
                phrasebook=self.data.phrasebook,
                min_df=self.config["min_df"],
                binary_ngrams=self.config["binary_ngrams"],
            ).fit([tweets[i] for i in train_idx])
            X_train = featurizer.transform([tweets[i] for i in train_idx])
            X_test = featurizer.transform([tweets[i] for i in test_idx])
            return featurizer, X_train, X_test

        return self._memo.get(("linguistic", fold), build)

    def cnn_model(self, level, code, fold):
        def build():
            train_idx, _ = self.split(fold)
            tweets = [self.data.tweets[i] for i in train_idx]
            y_train = self.data.y[code][train_idx]
            overrides = dict(self.config["cnn"].get(level, {}))
            overrides["level"] = level
            overrides["seed"] = derive_seed(self.master_seed, "cnn", level, code, fold)
            cfg = TextCnnConfig(**overrides)
            embeddings = self.data.embeddings if level == "word" else None
            model = TextCnn(config=cfg, embeddings=embeddings)
            try:
                model.fit(tweets, y_train)
            except TrainingError:
                raise
            except ValidationError:
                raise
            return model

        return self._memo.get(("cnn", level, code, fold), build)

    def block(self, space, code, fold):
        """(X_train, X_test) for one feature space. The linguistic block is
        sparse and unselected; CNN blocks depend on the code."""
        if space == "linguistic":
            _, X_train, X_test = self.linguistic_featurizer(fold)
            return X_train, X_test
        if space in ("cnn_word", "cnn_char"):
            level = space.split("_", 1)[1]
            model = self.cnn_model(level, code, fold)
            train_idx, test_idx = self.split(fold)
            tweets = self.data.tweets

            def build():
                return (
                    model.extract_features([tweets[i] for i in train_idx]),
                    model.extract_features([tweets[i] for i in test_idx]),
                )

            return self._memo.get(("cnn_feats", level, code, fold), build)
        X = self._full_matrix(space)
        train_idx, test_idx = self.split(fold)
        return X[train_idx], X[test_idx]

    # -- fitted models -------------------------------------------------------

    def block_model(self, features, code, fold):
        features = tuple(features)

        def build():
            if features == ("linguistic",):
                return self._fit_linear_model(code, fold)
            return self._fit_rbf_model(features, code, fold)

        return self._memo.get(("model", features, code, fold), build)

    def _fit_linear_model(self, code, fold):
        X_train, X_test = self.block("linguistic", code, fold)
        y_train, _ = self.labels(code, fold)
        selector = AnovaFSelector(k=self.config["select_k"]).fit(X_train, y_train)
        Xs_train = _densify(selector.transform(X_train))
        Xs_test = _densify(selector.transform(X_test))
        C = float(self.config["linear_c"][code])
        seed = derive_seed(self.master_seed, "fit", code, fold, "linguistic")
        clf = CalibratedClassifier(
            LinearSquaredHingeSVM(C=C, class_weight="balanced"),
            n_folds=self.config["calibration_folds"],
            seed=seed,
        ).fit(Xs_train, y_train)
        scores = clf.decision_function(Xs_test)
        return BlockModelResult(
            kind="linear",
            test_scores=scores,
            test_preds=(scores > 0).astype(np.int64),
            test_proba=clf.predict_proba(Xs_test),
            oof_proba=clf.oof_proba_,
            states={
                "selector": selector.state_dict(),
                "clf": clf.state_dict(),
            },
        )

    def _fit_rbf_model(self, features, code, fold):
        y_train, _ = self.labels(code, fold)
        parts_train, parts_test = [], []
        states = {}
        for space in features:
            X_train, X_test = self.block(space, code, fold)
            if space == "linguistic":
                selector = AnovaFSelector(k=self.config["select_k"]).fit(X_train, y_train)
                X_train = _densify(selector.transform(X_train))
                X_test = _densify(selector.transform(X_test))
                states["selector"] = selector.state_dict()
            parts_train.append(_densify(X_train))
            parts_test.append(_densify(X_test))
        X_train = np.hstack(parts_train) if len(parts_train) > 1 else parts_train[0]
        X_test = np.hstack(parts_test) if len(parts_test) > 1 else parts_test[0]

        scaler = Standardizer().fit(X_train)
        X_train = scaler.transform(X_train)
        X_test = scaler.transform(X_test)
        seed = derive_seed(self.master_seed, "fit", code, fold, *features)
        clf = CalibratedClassifier(
            RbfSVM(C=float(self.config["rbf_c"]), gamma="scale", class_weight="balanced"),
            n_folds=self.config["calibration_folds"],
            seed=seed,
        ).fit(X_train, y_train)
        proba = clf.predict_proba(X_test)
        states["scaler"] = scaler.state_dict()
        states["clf"] = clf.state_dict()
        return BlockModelResult(
            kind="rbf",
            test_scores=proba,
            test_preds=(proba > 0.5).astype(np.int64),
            test_proba=proba,
            oof_proba=clf.oof_proba_,
            states=states,
        )


def _densify(X):
    return np.asarray(X.todense()) if sp.issparse(X) else np.asarray(X, dtype=np.float64)


# ---------------------------------------------------------------------------
# baselines and model evaluation


def run_baseline(kind, y_train, y_test, seed):
    """Scores and hard predictions for the no-input baselines.

    random: Bernoulli(train prior) predictions with uniform-random scores.
    positive: everything positive with constant score 1.0.
    """
    y_test = np.asarray(y_test)
    if kind == "positive":
        return np.ones(y_test.size), np.ones(y_test.size, dtype=np.int64)
    if kind == "random":
        rng = rng_from_seed(seed)
        prior = float(np.mean(y_train))
        preds = (rng.random(y_test.size) < prior).astype(np.int64)
        scores = rng.random(y_test.size)
        return scores, preds
    raise ValidationError(f"unknown baseline kind {kind!r}")


@dataclass
class FoldOutcome:
    scores: np.ndarray
    preds: np.ndarray
    y_test: np.ndarray

    def metrics(self):
        p, r, f1, ap = classification_metrics(self.scores, self.preds, self.y_test)
        return {"precision": p, "recall": r, "f1": f1, "ap": ap}


def evaluate_spec_fold(spec, code, fold, provider):
    y_train, y_test = provider.labels(code, fold)
    master = provider.master_seed
    if spec.modality == "baseline":
        kind = "positive" if "positive" in spec.name else "random"
        seed = derive_seed(master, "baseline", kind, code, fold)
        scores, preds = run_baseline(kind, y_train, y_test, seed)
        return FoldOutcome(scores, preds, y_test)
    if spec.fusion == "late":
        constituents = [provider.block_model((space,), code, fold) for space in spec.features]
        meta_train = np.column_stack([c.oof_proba for c in constituents])
        meta_test = np.column_stack([c.test_proba for c in constituents])
        seed = derive_seed(master, "meta", code, fold, *spec.features)
        meta = CalibratedClassifier(
            RbfSVM(C=float(provider.config["rbf_c"]), gamma="scale", class_weight="balanced"),
            n_folds=provider.config["calibration_folds"],
            seed=seed,
        ).fit(meta_train, y_train)
        scores = meta.predict_proba(meta_test)
        return FoldOutcome(scores, (scores > 0.5).astype(np.int64), y_test)
    result = provider.block_model(spec.features, code, fold)
    return FoldOutcome(result.test_scores, result.test_preds, y_test)


def run_model(spec, code, provider):
    """Per-fold positive-class metrics for one model on one code."""
    outcomes = [evaluate_spec_fold(spec, code, fold, provider) for fold in range(provider.folds.k)]
    return [o.metrics() for o in outcomes]


# ---------------------------------------------------------------------------
# significance and reporting


def t_critical(df, alpha=0.05):
    return float(stats.t.ppf(1.0 - alpha / 2.0, df))


def ci_half_width(values, alpha=0.05):
    values = np.asarray(values, dtype=np.float64)
    k = values.size
    if k < 2:
        return 0.0
    return t_critical(k - 1, alpha) * values.std(ddof=1) / np.sqrt(k)


def significance_marks(fold_aps_by_model, alpha=0.05, method="ttest"):
    """Flag models not significantly worse than the best one.

    The best model has the highest mean AP. Under "ttest" another model is
    flagged when a two-sided paired t-test on fold-wise AP differences fails
    to reject equality; constant nonzero differences count as significant.
    Under "ci_overlap" a model is flagged when its 95% CI overlaps the
    best model's.
    """
    names = list(fold_aps_by_model)
    if not names:
        return None, {}
    sizes = {len(fold_aps_by_model[n]) for n in names}
    if len(sizes) != 1:
        raise ValidationError("all models must report the same number of folds")
    k = sizes.pop()
    means = {n: float(np.mean(fold_aps_by_model[n])) for n in names}
    best = max(names, key=lambda n: means[n])
    best_values = np.asarray(fold_aps_by_model[best], dtype=np.float64)

    flags = {}
    for name in names:
        values = np.asarray(fold_aps_by_model[name], dtype=np.float64)
        if method == "ci_overlap":
            h_best = ci_half_width(best_values, alpha)
            h = ci_half_width(values, alpha)
            flags[name] = bool(
                means[name] + h >= means[best] - h_best
                and means[best] + h_best >= means[name] - h
            )
            continue
        diffs = best_values - values
        if np.allclose(diffs, 0.0, atol=1e-12):
            flags[name] = True
            continue
        sd = diffs.std(ddof=1)
        if sd == 0.0:
            flags[name] = False  # constant nonzero gap: significantly worse
            continue
        t_stat = diffs.mean() / (sd / np.sqrt(k))
        flags[name] = bool(abs(t_stat) < t_critical(k - 1, alpha))
    return best, flags


@dataclass
class EvalReport:
    k: int
    entries: list  # dicts: spec fields + per_code fold metrics
    significance: str = "ttest"

    def per_code_ap(self, name, code):
        entry = self._by_name()[name]
        return [m["ap"] for m in entry["per_code"][code]]

    def fold_map(self, name):
        entry = self._by_name()[name]
        per_fold = np.array(
            [[m["ap"] for m in entry["per_code"][code]] for code in CODES], dtype=np.float64
        )
        return per_fold.mean(axis=0)

    def mean_ap(self, name, code):
        return float(np.mean(self.per_code_ap(name, code)))

    def map_of(self, name):
        return float(np.mean([self.mean_ap(name, code) for code in CODES]))

    def _by_name(self):
        return {e["name"]: e for e in self.entries}

    def flags(self):
        competitors = [e for e in self.entries if not e["out_of_competition"]]
        out = {}
        for code in CODES:
            best, flag = significance_marks(
                {e["name"]: self.per_code_ap(e["name"], code) for e in competitors},
                method=self.significance,
            )
            out[code] = {"best": best, "flagged": flag}
        best, flag = significance_marks(
            {e["name"]: list(self.fold_map(e["name"])) for e in competitors},
            method=self.significance,
        )
        out["map"] = {"best": best, "flagged": flag}
        return out

    def table(self):
        """Headers and rows shaped like the main results table: one row per
        model, P/R/F1/AP per code, then mAP; the best AP per column carries
        an asterisk and bold marks models not significantly worse."""
        flags = self.flags()
        headers = ["Modality", "Features", "Fusion"]
        for code in CODES:
            label = code.replace("_", " ")
            headers += [f"{label} P", f"{label} R", f"{label} F1", f"{label} AP"]
        headers.append("mAP")

        rows = []
        for e in self.entries:
            name = e["name"]
            row = [
                e["modality"],
                (e["label"] + (" [OOC]" if e["out_of_competition"] else "")),
                e["fusion"] if e["fusion"] != "none" else "-",
            ]
            for code in CODES:
                per_fold = e["per_code"][code]
                for metric in ("precision", "recall", "f1"):
                    row.append(f"{np.mean([m[metric] for m in per_fold]):.2f}")
                ap_mean = self.mean_ap(name, code)
                cell = f"{ap_mean:.2f}"
                if not e["out_of_competition"]:
                    if flags[code]["flagged"].get(name):
                        cell = f"**{cell}**"
                    if flags[code]["best"] == name:
                        cell += "*"
                row.append(cell)
            map_cell = f"{self.map_of(name):.2f}"
            if not e["out_of_competition"]:
                if flags["map"]["flagged"].get(name):
                    map_cell = f"**{map_cell}**"
                if flags["map"]["best"] == name:
                    map_cell += "*"
            row.append(map_cell)
            rows.append(row)
        return headers, rows

    def to_json(self):
        return {
            "k": self.k,
            "codes": list(CODES),
            "significance": self.significance,
            "t_critical": t_critical(self.k - 1),
            "models": self.entries,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(k=int(obj["k"]), entries=list(obj["models"]), significance=obj["significance"])


def _spec_label(spec):
    if spec.modality == "baseline":
        return spec.name
    if spec.fusion == "none":
        return spec.features[0]
    return "+".join(spec.features)


def resolve_roster(config):
    if config.get("models"):
        roster = standard_roster(include_gt=True)
        by_name = {s.name: s for s in roster}
        unknown = [n for n in config["models"] if n not in by_name]
        if unknown:
            raise ValidationError(f"unknown model names in config: {unknown}")
        return [by_name[n] for n in config["models"]]
    return standard_roster(include_gt=config.get("include_gt_model", True))


def run_experiment(config, out_dir=None, jobs=1, data=None, folds=None):
    """Evaluate the configured model roster over all codes and folds.

    Returns the EvalReport; with `out_dir` also writes folds.json,
    results.json, and the table as table2.csv/table2.md. Identical master
    seeds give byte-identical report files.
    """
    config = merge_config(config) if "data" not in config or config is not DEFAULT_CONFIG else config
    if data is None:
        data = load_experiment_data(config)
    if folds is None:
        folds = make_folds(data.tweets, data.labels_by_id, k=config["folds"], seed=config["seed"])
    provider = FeatureProvider(data, folds)
    roster = resolve_roster(config)

    tasks = [(spec, code, fold) for spec in roster for code in CODES for fold in range(folds.k)]
    results = {}
    if jobs and jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = {
                pool.submit(evaluate_spec_fold, spec, code, fold, provider): (spec.name, code, fold)
                for spec, code, fold in tasks
            }
            for future, key in futures.items():
                results[key] = future.result().metrics()
    else:
        for spec, code, fold in tasks:
            results[(spec.name, code, fold)] = evaluate_spec_fold(spec, code, fold, provider).metrics()

    entries = []
    for spec in roster:
        entries.append(
            {
                "name": spec.name,
                "modality": spec.modality,
                "label": _spec_label(spec),
                "features": list(spec.features),
                "fusion": spec.fusion,
                "out_of_competition": spec.out_of_competition,
                "per_code": {
                    code: [results[(spec.name, code, fold)] for fold in range(folds.k)]
                    for code in CODES
                },
            }
        )
    report = EvalReport(k=folds.k, entries=entries, significance=config["significance"])

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        folds.save(os.path.join(out_dir, "folds.json"))
        with open(os.path.join(out_dir, "results.json"), "w", encoding="utf-8") as f:
            json.dump(report.to_json(), f, sort_keys=True, indent=2)
            f.write("\n")
        headers, rows = report.table()
        write_table(os.path.join(out_dir, "table2"), headers, rows)
    return report


# ---------------------------------------------------------------------------
# sensitivity analysis and ablation study


SENSITIVITY_VARIANTS = ("counts@0.1", "counts@0.5", GT_BLOCK)
VARIANT_LABELS = {"counts@0.1": "0.1", "counts@0.5": "0.5", GT_BLOCK: "GT"}


@dataclass
class SensitivityTable:
    coefficients: dict  # variant -> code -> concept -> mean coef
    f1: dict  # variant -> code -> mean F1
    ap: dict  # variant -> code -> mean AP
    variants: tuple

    def table(self):
        from .corpus import CONCEPTS

        headers = ["Concept"]
        for code in CODES:
            for variant in self.variants:
                headers.append(f"{code.replace('_', ' ')} {VARIANT_LABELS[variant]}")
        rows = []
        for concept in CONCEPTS:
            row = [concept.replace("_", " ")]
            for code in CODES:
                for variant in self.variants:
                    row.append(f"{self.coefficients[variant][code][concept]:.2f}")
            rows.append(row)
        for metric, store in (("F1", self.f1), ("AP", self.ap)):
            row = [metric]
            for code in CODES:
                for variant in self.variants:
                    row.append(f"{store[variant][code]:.2f}")
            rows.append(row)
        return headers, rows


def sensitivity_table(provider, variants=SENSITIVITY_VARIANTS, C=None):
    """Per-concept mean linear-SVM coefficients across folds, with F1 and AP
    rows, for each concept-feature variant."""
    from .corpus import CONCEPTS

    C = float(C if C is not None else provider.config["sensitivity_c"])
    coefficients = {v: {c: {} for c in CODES} for v in variants}
    f1 = {v: {} for v in variants}
    ap = {v: {} for v in variants}
    for variant in variants:
        for code in CODES:
            coefs = np.zeros((provider.folds.k, len(CONCEPTS)))
            fold_f1, fold_ap = [], []
            for fold in range(provider.folds.k):
                X_train, X_test = provider.block(variant, code, fold)
                y_train, y_test = provider.labels(code, fold)
                svm = LinearSquaredHingeSVM(C=C, class_weight="balanced").fit(X_train, y_train)
                coefs[fold] = svm.coef_
                scores = svm.decision_function(X_test)
                preds = (scores > 0).astype(np.int64)
                p, r, f, a = classification_metrics(scores, preds, y_test)
                fold_f1.append(f)
                fold_ap.append(a if a is not None else 0.0)
            mean_coefs = coefs.mean(axis=0)
            for ci, concept in enumerate(CONCEPTS):
                coefficients[variant][code][concept] = float(mean_coefs[ci])
            f1[variant][code] = float(np.mean(fold_f1))
            ap[variant][code] = float(np.mean(fold_ap))
    return SensitivityTable(
        coefficients=coefficients, f1=f1, ap=ap, variants=tuple(variants)
    )


@dataclass
class AblationTable:
    delta_f1: dict  # code -> concept -> per-fold deltas
    delta_ap: dict
    alpha: float = 0.05

    def significant(self, deltas):
        values = np.asarray(deltas, dtype=np.float64)
        k = values.size
        sd = values.std(ddof=1)
        if sd == 0.0:
            return not np.isclose(values.mean(), 0.0)
        t_stat = values.mean() / (sd / np.sqrt(k))
        return abs(t_stat) >= t_critical(k - 1, self.alpha)

    def visible_codes(self):
        """Codes with at least one significant entry; mirrors the published
        layout where a code with nothing significant is dropped."""
        out = []
        for code in CODES:
            concepts = self.delta_f1[code].keys()
            if any(
                self.significant(self.delta_f1[code][c]) or self.significant(self.delta_ap[code][c])
                for c in concepts
            ):
                out.append(code)
        return out

    def table(self):
        from .corpus import CONCEPTS

        codes = self.visible_codes() or list(CODES)
        headers = ["Removed concept"]
        for code in codes:
            label = code.replace("_", " ")
            headers += [f"{label} dF1", f"{label} dAP"]
        rows = []
        for concept in CONCEPTS:
            row = [concept.replace("_", " ")]
            for code in codes:
                for store in (self.delta_f1, self.delta_ap):
                    deltas = store[code][concept]
                    cell = f"{np.mean(deltas):.2f}"
                    if self.significant(deltas):
                        cell = f"**{cell}**"
                    row.append(cell)
            rows.append(row)
        return headers, rows


def ablation_table(provider, alpha=0.05):
    """Retrain the ground-truth concept model with one concept removed at a
    time; per-fold deltas (reduced minus full) with one-sample t significance."""
    from .corpus import CONCEPTS

    config = provider.config
    delta_f1 = {code: {c: [] for c in CONCEPTS} for code in CODES}
    delta_ap = {code: {c: [] for c in CONCEPTS} for code in CODES}

    def rbf_metrics(X_train, y_train, X_test, y_test, seed):
        scaler = Standardizer().fit(X_train)
        clf = CalibratedClassifier(
            RbfSVM(C=float(config["rbf_c"]), gamma="scale", class_weight="balanced"),
            n_folds=config["calibration_folds"],
            seed=seed,
        ).fit(scaler.transform(X_train), y_train)
        proba = clf.predict_proba(scaler.transform(X_test))
        p, r, f, a = classification_metrics(proba, (proba > 0.5).astype(np.int64), y_test)
        return f, (a if a is not None else 0.0)

    for code in CODES:
        for fold in range(provider.folds.k):
            X_train, X_test = provider.block(GT_BLOCK, code, fold)
            y_train, y_test = provider.labels(code, fold)
            seed = derive_seed(provider.master_seed, "ablation", code, fold, "full")
            full_f1, full_ap = rbf_metrics(X_train, y_train, X_test, y_test, seed)
            for ci, concept in enumerate(CONCEPTS):
                cols = [j for j in range(len(CONCEPTS)) if j != ci]
                seed = derive_seed(provider.master_seed, "ablation", code, fold, concept)
                red_f1, red_ap = rbf_metrics(
                    X_train[:, cols], y_train, X_test[:, cols], y_test, seed
                )
                delta_f1[code][concept].append(red_f1 - full_f1)
                delta_ap[code][concept].append(red_ap - full_ap)
    return AblationTable(delta_f1=delta_f1, delta_ap=delta_ap, alpha=alpha)


# ---------------------------------------------------------------------------
# leakage audit


AUDIT_SPACES = ("linguistic", "cnn_word", "cnn_char", "global", "counts@0.1")


def fitted_state_fingerprint(data, folds, fold, spaces=AUDIT_SPACES, codes=CODES):
    """Hash of every piece of fitted state for one fold: n-gram vocabulary,
    selection indices, standardizers, CNN and SVM parameters, calibrators."""
    provider = FeatureProvider(data, folds)
    state = {}
    usable = [s for s in spaces if _space_available(data, s)]
    for code in codes:
        for space in usable:
            result = provider.block_model((space,), code, fold)
            state[f"{code}/{space}"] = result.states
            if space in ("cnn_word", "cnn_char"):
                level = space.split("_", 1)[1]
                state[f"{code}/{space}/cnn"] = provider.cnn_model(level, code, fold).state_dict()
    if "linguistic" in usable:
        featurizer, _, _ = provider.linguistic_featurizer(fold)
        state["featurizer"] = featurizer.state_dict()
    return state_hash(state)


def _space_available(data, space):
    if space == "global":
        return data.global_store is not None
    if space.startswith("counts@"):
        return bool(data.detections_by_image)
    if space == GT_BLOCK:
        return bool(data.gt_by_image)
    return True


def leakage_audit(data, folds, spaces=AUDIT_SPACES, codes=CODES):
    """For every fold, compare the fitted-state hash with the test fold
    present against the hash with the test fold's tweets deleted outright.
    Returns {fold: (hash_with, hash_without, match)}."""
    out = {}
    tweet_folds = np.array([folds.fold_of(t.user_id) for t in data.tweets])
    for fold in range(folds.k):
        h_with = fitted_state_fingerprint(data, folds, fold, spaces, codes)
        restricted = data.restricted(tweet_folds != fold)
        h_without = fitted_state_fingerprint(restricted, folds, fold, spaces, codes)
        out[fold] = (h_with, h_without, h_with == h_without)
    return out
