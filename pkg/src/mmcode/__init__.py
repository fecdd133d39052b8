"""Multimodal psychosocial-code classification toolkit.

Text featurization (n-grams, affect scores, CNN encoders), image-feature
ingestion, from-scratch SVM learners with early/late fusion, grouped
cross-validation, detector evaluation, and sensitivity/ablation analyses.
"""

from .base import TrainingError, ValidationError
from .corpus import (
    CODES,
    CONCEPTS,
    CodeAnnotation,
    CodeLabels,
    TweetRecord,
    corpus_stats,
    derive_labels,
    load_corpus,
    save_corpus,
)
from .deteval import detection_ap, detection_report, iou, match_detections
from .learn import (
    AnovaFSelector,
    CalibratedClassifier,
    LinearSquaredHingeSVM,
    PlattCalibrator,
    RbfSVM,
    Standardizer,
    anova_f_select,
    classification_metrics,
)
from .lingfeat import LinguisticFeaturizer, NgramVocab, dal_vector, ngram_vector, tokenize
from .pipeline import (
    EvalReport,
    FoldAssignment,
    ModelSpec,
    ablation_table,
    leakage_audit,
    make_folds,
    run_baseline,
    run_experiment,
    sensitivity_table,
    significance_marks,
    standard_roster,
)
from .synth import SynthConfig, generate
from .textcnn import TextCnn, TextCnnConfig

__version__ = "0.1.0"

__all__ = [
    "CODES",
    "CONCEPTS",
    "AnovaFSelector",
    "CalibratedClassifier",
    "CodeAnnotation",
    "CodeLabels",
    "EvalReport",
    "FoldAssignment",
    "LinearSquaredHingeSVM",
    "LinguisticFeaturizer",
    "ModelSpec",
    "NgramVocab",
    "PlattCalibrator",
    "RbfSVM",
    "Standardizer",
    "SynthConfig",
    "TextCnn",
    "TextCnnConfig",
    "TrainingError",
    "TweetRecord",
    "ValidationError",
    "ablation_table",
    "anova_f_select",
    "classification_metrics",
    "corpus_stats",
    "dal_vector",
    "derive_labels",
    "detection_ap",
    "detection_report",
    "generate",
    "iou",
    "leakage_audit",
    "load_corpus",
    "make_folds",
    "match_detections",
    "ngram_vector",
    "run_baseline",
    "run_experiment",
    "save_corpus",
    "sensitivity_table",
    "significance_marks",
    "standard_roster",
    "tokenize",
]
