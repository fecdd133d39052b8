"""Command-line interface.

Subcommands: gen-synthetic, split, featurize-text, train-cnn, extract-cnn,
featurize-image, eval-detector, run-experiment, sensitivity, ablation,
report. Exit codes: 0 success, 2 validation error, 3 training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .base import TrainingError, ValidationError, derive_seed
from .corpus import CODES, corpus_stats, load_corpus
from .deteval import detection_report
from .features import save_feature_block
from .imfeat import load_detections, load_gt_boxes
from .pipeline import (
    FeatureProvider,
    FoldAssignment,
    EvalReport,
    ablation_table,
    leakage_audit,
    load_experiment_data,
    make_folds,
    merge_config,
    run_experiment,
    sensitivity_table,
)
from .synth import SynthConfig, generate
from .tables import write_table

logger = logging.getLogger(__name__)


def _load_config(args):
    overrides = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as f:
            overrides = json.load(f)
    config = merge_config(overrides)
    if args.seed is not None:
        config["seed"] = args.seed
    return config


def _ensure_out(args):
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _load_or_make_folds(args, config, data):
    folds_path = args.folds or os.path.join(args.out, "folds.json")
    if os.path.exists(folds_path):
        return FoldAssignment.load(folds_path)
    folds = make_folds(data.tweets, data.labels_by_id, k=config["folds"], seed=config["seed"])
    return folds


def cmd_gen_synthetic(args):
    config = _load_config(args)
    synth_overrides = dict(config.get("synthetic", {}))
    if args.seed is not None:
        synth_overrides["seed"] = args.seed
    elif "seed" not in synth_overrides:
        synth_overrides["seed"] = config["seed"]
    synth_config = SynthConfig(**synth_overrides)
    out = _ensure_out(args)
    corpus = generate(synth_config, out_dir=out)
    stats = corpus_stats(corpus.tweets, corpus.annotations, corpus.gt_boxes)
    with open(os.path.join(out, "table1.md"), "w", encoding="utf-8") as f:
        f.write(stats.render("markdown"))
    print(f"wrote synthetic corpus ({len(corpus.tweets)} tweets) to {out}")
    print(stats.render("markdown"))
    return 0


def cmd_split(args):
    config = _load_config(args)
    data = load_experiment_data(config)
    folds = make_folds(data.tweets, data.labels_by_id, k=config["folds"], seed=config["seed"])
    out = _ensure_out(args)
    path = os.path.join(out, "folds.json")
    folds.save(path)
    print(f"wrote {path} ({len(folds.user_to_fold)} users over {folds.k} folds)")
    return 0


def cmd_featurize_text(args):
    config = _load_config(args)
    data = load_experiment_data(config)
    folds = _load_or_make_folds(args, config, data)
    out = _ensure_out(args)
    provider = FeatureProvider(data, folds)
    ids = [t.tweet_id for t in data.tweets]
    for fold in range(folds.k):
        featurizer, _, _ = provider.linguistic_featurizer(fold)
        X = featurizer.transform(data.tweets)
        path = os.path.join(out, f"features_linguistic_fold{fold}.jsonl")
        save_feature_block(path, "linguistic", ids, X)
        print(f"wrote {path} ({X.shape[1]} columns)")
    return 0


def cmd_train_cnn(args):
    config = _load_config(args)
    data = load_experiment_data(config)
    folds = _load_or_make_folds(args, config, data)
    out = _ensure_out(args)
    cnn_dir = os.path.join(out, "cnn")
    os.makedirs(cnn_dir, exist_ok=True)
    provider = FeatureProvider(data, folds)
    levels = args.levels.split(",") if args.levels else ["word", "char"]
    codes = args.codes.split(",") if args.codes else list(CODES)
    for level in levels:
        for code in codes:
            for fold in range(folds.k):
                model = provider.cnn_model(level, code, fold)
                path = os.path.join(cnn_dir, f"{level}_{code}_fold{fold}.ckpt")
                model.save(path, meta={"code": code, "fold": fold})
                print(
                    f"trained {level}/{code}/fold{fold}: stopped at epoch "
                    f"{model.stopped_epoch_}, val loss {model.best_val_loss_:.4f}"
                )
    return 0


def cmd_extract_cnn(args):
    from .textcnn import TextCnn

    config = _load_config(args)
    data = load_experiment_data(config)
    folds = _load_or_make_folds(args, config, data)
    out = _ensure_out(args)
    cnn_dir = os.path.join(out, "cnn")
    ids = [t.tweet_id for t in data.tweets]
    levels = args.levels.split(",") if args.levels else ["word", "char"]
    codes = args.codes.split(",") if args.codes else list(CODES)
    for level in levels:
        for code in codes:
            for fold in range(folds.k):
                path = os.path.join(cnn_dir, f"{level}_{code}_fold{fold}.ckpt")
                if not os.path.exists(path):
                    raise ValidationError(f"missing checkpoint {path}; run train-cnn first")
                model = TextCnn.load(path)
                X = model.extract_features(data.tweets)
                block = os.path.join(out, f"features_cnn_{level}_{code}_fold{fold}.jsonl")
                save_feature_block(block, f"cnn_{level}", ids, X)
                print(f"wrote {block}")
    return 0


def cmd_featurize_image(args):
    config = _load_config(args)
    data = load_experiment_data(config)
    out = _ensure_out(args)
    provider = FeatureProvider(
        data, FoldAssignment(user_to_fold={t.user_id: 0 for t in data.tweets}, k=1, seed=0)
    )
    ids = [t.tweet_id for t in data.tweets]
    spaces = []
    if data.global_store is not None:
        spaces.append("global")
    if data.detections_by_image:
        spaces += ["counts@0.1", "counts@0.5"]
    if data.gt_by_image:
        spaces.append("gt_counts")
    if not spaces:
        raise ValidationError("no image data configured (global_features/detections/gt_boxes)")
    for space in spaces:
        X = provider._full_matrix(space)
        safe = space.replace("@", "_at_")
        path = os.path.join(out, f"features_{safe}.jsonl")
        save_feature_block(path, space, ids, X)
        print(f"wrote {path}")
    return 0


def cmd_eval_detector(args):
    config = _load_config(args)
    paths = config["data"]
    for key in ("tweets", "annotations", "detections", "gt_boxes"):
        if not paths.get(key):
            raise ValidationError(f"eval-detector needs data.{key}")
    data = load_experiment_data(config)
    folds = _load_or_make_folds(args, config, data)
    detections = load_detections(paths["detections"])
    gt_boxes = load_gt_boxes(paths["gt_boxes"])
    image_folds, image_sources = {}, {}
    for t in data.tweets:
        if t.image_id is not None:
            image_folds[t.image_id] = folds.fold_of(t.user_id)
            image_sources[t.image_id] = t.source
    report = detection_report(
        detections, gt_boxes, image_folds, image_sources, iou_threshold=args.iou
    )
    out = _ensure_out(args)
    headers = ["Concept"] + [f"{c} AP ± SD" for c in report.columns]
    rows = [[c if c is not None else "-" for c in row] for row in report.rows()]
    write_table(os.path.join(out, "table5"), headers, rows)
    print(report.render("markdown"))
    return 0


def cmd_run_experiment(args):
    config = _load_config(args)
    out = _ensure_out(args)
    report = run_experiment(config, out_dir=out, jobs=args.jobs)
    headers, rows = report.table()
    from .tables import render_markdown

    print(render_markdown(headers, rows))
    # Table-1-shaped corpus summary alongside the results
    data = load_experiment_data(config)
    gt = None
    if config["data"].get("gt_boxes"):
        gt = load_gt_boxes(config["data"]["gt_boxes"])
    annotations = load_corpus(config["data"]["tweets"], config["data"]["annotations"])[1]
    stats = corpus_stats(data.tweets, annotations, gt)
    with open(os.path.join(out, "table1.md"), "w", encoding="utf-8") as f:
        f.write(stats.render("markdown"))
    return 0


def cmd_sensitivity(args):
    config = _load_config(args)
    data = load_experiment_data(config)
    folds = _load_or_make_folds(args, config, data)
    provider = FeatureProvider(data, folds)
    variants = []
    if data.detections_by_image:
        variants += ["counts@0.1", "counts@0.5"]
    if data.gt_by_image:
        variants.append("gt_counts")
    if not variants:
        raise ValidationError("sensitivity needs detections and/or gt_boxes")
    table = sensitivity_table(provider, variants=tuple(variants))
    headers, rows = table.table()
    out = _ensure_out(args)
    write_table(os.path.join(out, "table3"), headers, rows)
    from .tables import render_markdown

    print(render_markdown(headers, rows))
    return 0


def cmd_ablation(args):
    config = _load_config(args)
    data = load_experiment_data(config)
    if not data.gt_by_image:
        raise ValidationError("ablation needs data.gt_boxes")
    folds = _load_or_make_folds(args, config, data)
    provider = FeatureProvider(data, folds)
    table = ablation_table(provider)
    headers, rows = table.table()
    out = _ensure_out(args)
    write_table(os.path.join(out, "table4"), headers, rows)
    from .tables import render_markdown

    print(render_markdown(headers, rows))
    return 0


def cmd_report(args):
    results_path = args.results or os.path.join(args.out, "results.json")
    if not os.path.exists(results_path):
        raise ValidationError(f"no results file at {results_path}; run run-experiment first")
    with open(results_path, "r", encoding="utf-8") as f:
        report = EvalReport.from_json(json.load(f))
    headers, rows = report.table()
    out = _ensure_out(args)
    write_table(os.path.join(out, "table2"), headers, rows)
    from .tables import render_markdown

    print(render_markdown(headers, rows))
    return 0


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "split": cmd_split,
    "featurize-text": cmd_featurize_text,
    "train-cnn": cmd_train_cnn,
    "extract-cnn": cmd_extract_cnn,
    "featurize-image": cmd_featurize_image,
    "eval-detector": cmd_eval_detector,
    "run-experiment": cmd_run_experiment,
    "sensitivity": cmd_sensitivity,
    "ablation": cmd_ablation,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mmcode",
        description="Multimodal psychosocial-code classification experiments.",
    )
    parser.add_argument("--config", help="JSON config file (paths, seeds, hyperparameters)")
    parser.add_argument("--seed", type=int, help="master seed (overrides config)")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--jobs", type=int, default=1, help="parallel worker count")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-synthetic", help="generate a synthetic corpus")
    sub.add_parser("split", help="build grouped cross-validation folds")
    for name in ("featurize-text", "featurize-image"):
        p = sub.add_parser(name, help=f"write {name.split('-')[1]} feature blocks")
        p.add_argument("--folds", help="folds.json path (default <out>/folds.json)")
    for name in ("train-cnn", "extract-cnn"):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} per code/level/fold")
        p.add_argument("--folds", help="folds.json path")
        p.add_argument("--levels", help="comma list, default word,char")
        p.add_argument("--codes", help="comma list, default all codes")
    p = sub.add_parser("eval-detector", help="detector AP report (Complete/Twitter/Tumblr)")
    p.add_argument("--folds", help="folds.json path")
    p.add_argument("--iou", type=float, default=0.5, help="IoU threshold for matching")
    sub.add_parser("run-experiment", help="run the full code-detection experiment")
    p = sub.add_parser("sensitivity", help="linear-SVM concept-coefficient table")
    p.add_argument("--folds", help="folds.json path")
    p = sub.add_parser("ablation", help="leave-one-concept-out deltas with significance")
    p.add_argument("--folds", help="folds.json path")
    p = sub.add_parser("report", help="re-render tables from a results.json")
    p.add_argument("--results", help="results.json path (default <out>/results.json)")
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ValidationError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
