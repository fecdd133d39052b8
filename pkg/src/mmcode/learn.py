"""Learners: ANOVA F-test feature selection, a linear squared-hinge SVM
trained in the primal, an RBF-kernel SVM trained by sequential minimal
optimization, Platt-style probability calibration, and classification
metrics. All estimators follow the fit/transform/predict convention."""

from __future__ import annotations

import logging

import numpy as np
import scipy.sparse as sp

from .base import (
    BaseEstimator,
    TrainingError,
    ValidationError,
    check_array,
    check_binary_labels,
    rng_from_seed,
)
from .deteval import ap_from_flags

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# feature selection and scaling


def anova_f_statistics(X, y):
    """Per-column one-way F statistic between the two class groups.

    Columns identical across classes get F = 0; columns with zero
    within-group variance but distinct means get F = inf.
    """
    y = check_binary_labels(y)
    n = y.shape[0]
    if sp.issparse(X):
        X = X.tocsr()
        sums, sumsqs, counts = [], [], []
        for cls in (0, 1):
            rows = X[y == cls]
            sums.append(np.asarray(rows.sum(axis=0)).ravel())
            sumsqs.append(np.asarray(rows.multiply(rows).sum(axis=0)).ravel())
            counts.append(int((y == cls).sum()))
    else:
        X = check_array(X)
        sums = [X[y == cls].sum(axis=0) for cls in (0, 1)]
        sumsqs = [(X[y == cls] ** 2).sum(axis=0) for cls in (0, 1)]
        counts = [int((y == cls).sum()) for cls in (0, 1)]

    n0, n1 = counts
    m0, m1 = sums[0] / n0, sums[1] / n1
    grand = (sums[0] + sums[1]) / n
    ssb = n0 * (m0 - grand) ** 2 + n1 * (m1 - grand) ** 2
    ssw = (sumsqs[0] - n0 * m0**2) + (sumsqs[1] - n1 * m1**2)
    ssw = np.maximum(ssw, 0.0)
    msb = ssb / 1.0
    msw = ssw / (n - 2) if n > 2 else np.zeros_like(ssw)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = msb / msw
    f = np.where(msw > 0, f, np.where(msb > 1e-300, np.inf, 0.0))
    return f


def anova_f_select(X, y, k=1300):
    """Indices (sorted) of the top-k columns by F statistic; ties prefer the
    lower column index. Selects everything when k >= n_columns."""
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    d = X.shape[1]
    if k >= d:
        return np.arange(d)
    f = anova_f_statistics(X, y)
    ranked = np.lexsort((np.arange(d), -f))
    return np.sort(ranked[:k])


class AnovaFSelector(BaseEstimator):
    """Keep the k columns whose one-way F statistic is largest."""

    def __init__(self, k=1300):
        self.k = k

    def fit(self, X, y):
        self.scores_ = anova_f_statistics(X, y)
        self.selected_ = anova_f_select(X, y, self.k)
        return self

    def transform(self, X):
        X = X.tocsr() if sp.issparse(X) else np.asarray(X)
        return X[:, self.selected_]

    def fit_transform(self, X, y):
        return self.fit(X, y).transform(X)

    def state_dict(self):
        return {"selected": self.selected_}


class Standardizer(BaseEstimator):
    """Per-column z-scoring with train statistics; constant columns pass
    through unchanged (neither centered nor scaled)."""

    def fit(self, X, y=None):
        X = check_array(X)
        if X.shape[0] < 2:
            raise ValidationError("Standardizer needs at least 2 rows")
        self.mean_ = X.mean(axis=0)
        sd = X.std(axis=0)
        self.constant_ = sd == 0
        self.scale_ = np.where(self.constant_, 1.0, sd)
        return self

    def transform(self, X):
        X = check_array(X)
        shift = np.where(self.constant_, 0.0, self.mean_)
        return (X - shift) / self.scale_

    def fit_transform(self, X, y=None):
        return self.fit(X).transform(X)

    def state_dict(self):
        return {"mean": self.mean_, "scale": self.scale_, "constant": self.constant_}


def _per_sample_c(y01, C, class_weight):
    n = y01.shape[0]
    counts = np.bincount(y01, minlength=2)
    if class_weight == "balanced":
        weights = n / (2.0 * counts)
    elif class_weight is None:
        weights = np.ones(2)
    else:
        raise ValidationError(f"unsupported class_weight {class_weight!r}")
    return C * weights[y01]


# ---------------------------------------------------------------------------
# linear SVM with squared hinge loss (primal, full-batch GD + line search)


class LinearSquaredHingeSVM(BaseEstimator):
    """Minimizes 0.5*||w||^2 + sum_i C_i * max(0, 1 - y_i(w.x_i + b))^2.

    C_i = C * n / (2 * n_class(i)) under class_weight="balanced". The squared
    hinge is differentiable, so the primal is solved by full-batch gradient
    descent with Armijo backtracking; converged when the relative objective
    decrease drops below `tol`.
    """

    def __init__(self, C=1.0, class_weight="balanced", max_iter=5000, tol=1e-8):
        self.C = C
        self.class_weight = class_weight
        self.max_iter = max_iter
        self.tol = tol

    def _objective_grad(self, theta, X, s, c):
        w, b = theta[:-1], theta[-1]
        margins = 1.0 - s * (X @ w + b)
        active = margins > 0
        xi = margins[active]
        ca = c[active]
        obj = 0.5 * w @ w + ca @ (xi * xi)
        coef = 2.0 * ca * s[active] * xi
        gw = w - X[active].T @ coef
        gb = -coef.sum()
        return obj, np.concatenate([gw, [gb]])

    def fit(self, X, y):
        X = check_array(X)
        y01 = check_binary_labels(y)
        if X.shape[0] != y01.shape[0]:
            raise ValidationError("X and y have inconsistent lengths")
        s = np.where(y01 == 1, 1.0, -1.0)
        c = _per_sample_c(y01, self.C, self.class_weight)

        theta = np.zeros(X.shape[1] + 1)
        obj, grad = self._objective_grad(theta, X, s, c)
        step = 1.0
        self.converged_ = False
        for it in range(self.max_iter):
            gnorm2 = grad @ grad
            if gnorm2 < 1e-24:
                self.converged_ = True
                break
            step = min(step * 2.0, 1e12)
            for _ in range(80):
                candidate = theta - step * grad
                new_obj, new_grad = self._objective_grad(candidate, X, s, c)
                if new_obj <= obj - 1e-4 * step * gnorm2:
                    break
                step *= 0.5
            else:
                self.converged_ = True
                break
            theta = candidate
            decrease = (obj - new_obj) / max(1.0, abs(obj))
            obj, grad = new_obj, new_grad
            if decrease < self.tol:
                self.converged_ = True
                break
        self.n_iter_ = it + 1
        self.coef_ = theta[:-1]
        self.intercept_ = float(theta[-1])
        self.objective_ = float(obj)
        return self

    def decision_function(self, X):
        X = check_array(X)
        return X @ self.coef_ + self.intercept_

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(np.int64)

    def objective_value(self, X, y, w=None, b=None):
        """Primal objective at (w, b); defaults to the fitted parameters."""
        X = check_array(X)
        y01 = check_binary_labels(y)
        s = np.where(y01 == 1, 1.0, -1.0)
        c = _per_sample_c(y01, self.C, self.class_weight)
        w = self.coef_ if w is None else w
        b = self.intercept_ if b is None else b
        xi = np.maximum(0.0, 1.0 - s * (X @ w + b))
        return float(0.5 * w @ w + c @ (xi * xi))

    def state_dict(self):
        return {"w": self.coef_, "b": self.intercept_}


# ---------------------------------------------------------------------------
# RBF-kernel SVM trained by SMO


def rbf_kernel(A, B, gamma):
    sq = (
        np.sum(A * A, axis=1)[:, None]
        + np.sum(B * B, axis=1)[None, :]
        - 2.0 * (A @ B.T)
    )
    return np.exp(-gamma * np.maximum(sq, 0.0))


def resolve_gamma(gamma, X):
    if gamma == "scale":
        var = float(np.var(X))
        return 1.0 / (X.shape[1] * var) if var > 0 else 1.0 / X.shape[1]
    return float(gamma)


class RbfSVM(BaseEstimator):
    """Soft-margin SVM with the RBF kernel, solved in the dual by SMO.

    Each step picks the maximal-KKT-violating pair (first-order working-set
    selection), solves the two-variable subproblem analytically, and stops
    when the violation gap drops below `tol`. The box is class-weighted:
    0 <= alpha_i <= C_i with C_i = C * n / (2 * n_class(i)) when balanced.
    """

    def __init__(self, C=1.0, gamma="scale", class_weight="balanced", tol=1e-3, max_iter=None):
        self.C = C
        self.gamma = gamma
        self.class_weight = class_weight
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y, kernel=None):
        X = check_array(X)
        y01 = check_binary_labels(y)
        if X.shape[0] != y01.shape[0]:
            raise ValidationError("X and y have inconsistent lengths")
        n = X.shape[0]
        s = np.where(y01 == 1, 1.0, -1.0)
        c = _per_sample_c(y01, self.C, self.class_weight)
        gamma = resolve_gamma(self.gamma, X)
        K = rbf_kernel(X, X, gamma) if kernel is None else kernel
        Kd = np.diag(K)

        alpha = np.zeros(n)
        grad = -np.ones(n)  # gradient of 0.5 a'Qa - e'a at a = 0
        max_iter = self.max_iter or max(20000, 200 * n)
        tau = 1e-12
        pos = s > 0

        it = 0
        gap = np.inf
        for it in range(max_iter):
            neg_yg = -s * grad
            up = (pos & (alpha < c)) | (~pos & (alpha > 0))
            low = (~pos & (alpha < c)) | (pos & (alpha > 0))
            if not up.any() or not low.any():
                gap = 0.0
                break
            up_idx = np.flatnonzero(up)
            low_idx = np.flatnonzero(low)
            i = up_idx[np.argmax(neg_yg[up_idx])]
            j = low_idx[np.argmin(neg_yg[low_idx])]
            gap = neg_yg[i] - neg_yg[j]
            if gap < self.tol:
                break

            eta = Kd[i] + Kd[j] - 2.0 * K[i, j]
            d = gap / max(eta, tau)
            # clip to the box for alpha_i + y_i*d and alpha_j - y_j*d
            if s[i] > 0:
                d = min(d, c[i] - alpha[i])
            else:
                d = min(d, alpha[i])
            if s[j] > 0:
                d = min(d, alpha[j])
            else:
                d = min(d, c[j] - alpha[j])
            if d <= 0:
                break
            da_i = s[i] * d
            da_j = -s[j] * d
            alpha[i] += da_i
            alpha[j] += da_j
            grad += da_i * s[i] * (s * K[i]) + da_j * s[j] * (s * K[j])
        else:
            logger.warning("SMO hit max_iter=%d with KKT gap %.3g", max_iter, gap)

        self.converged_ = gap < self.tol
        self.kkt_gap_ = float(max(gap, 0.0))
        self.n_iter_ = it + 1
        self.gamma_ = gamma
        Qa = s * (K @ (alpha * s))
        self.dual_objective_ = float(0.5 * alpha @ Qa - alpha.sum())

        free = (alpha > 1e-9 * np.maximum(c, 1.0)) & (alpha < c * (1 - 1e-9))
        if free.any():
            b = float(np.mean(-s[free] * grad[free]))
        else:
            neg_yg = -s * grad
            up = (pos & (alpha < c)) | (~pos & (alpha > 0))
            low = (~pos & (alpha < c)) | (pos & (alpha > 0))
            hi = neg_yg[up].max() if up.any() else 0.0
            lo = neg_yg[low].min() if low.any() else 0.0
            b = float((hi + lo) / 2.0)
        self.intercept_ = b

        support = alpha > 1e-12
        self.support_ = np.flatnonzero(support)
        self.support_vectors_ = X[support]
        self.dual_coef_ = alpha[support] * s[support]
        self.alpha_ = alpha
        self.box_ = c
        self.y_sign_ = s
        return self

    def decision_function(self, X):
        X = check_array(X)
        if len(self.support_) == 0:
            return np.full(X.shape[0], self.intercept_)
        K = rbf_kernel(X, self.support_vectors_, self.gamma_)
        return K @ self.dual_coef_ + self.intercept_

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(np.int64)

    def state_dict(self):
        return {
            "support": self.support_,
            "dual_coef": self.dual_coef_,
            "b": self.intercept_,
            "gamma": self.gamma_,
        }


# ---------------------------------------------------------------------------
# Platt calibration


def _sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    posm = z >= 0
    out[posm] = 1.0 / (1.0 + np.exp(-z[posm]))
    ez = np.exp(z[~posm])
    out[~posm] = ez / (1.0 + ez)
    return out


class PlattCalibrator(BaseEstimator):
    """Sigmoid map from decision scores to probabilities.

    Fits p = sigmoid(A*s + B) by regularized maximum likelihood (Newton
    iterations) against Platt's smoothed targets. Scores must come from data
    the scored model was not fitted on. A single-class calibration set falls
    back to the smoothed prior with a warning.
    """

    def __init__(self, max_iter=100):
        self.max_iter = max_iter

    def fit(self, scores, y):
        scores = np.asarray(scores, dtype=np.float64).ravel()
        y = np.asarray(y).ravel()
        pos = y == 1
        n_pos, n_neg = int(pos.sum()), int((~pos).sum())
        if n_pos == 0 or n_neg == 0:
            prior = (n_pos + 1.0) / (n_pos + n_neg + 2.0)
            self.A_ = 0.0
            self.B_ = float(np.log(prior / (1.0 - prior)))
            logger.warning(
                "single-class calibration set (%d pos / %d neg); falling back to prior %.3f",
                n_pos,
                n_neg,
                prior,
            )
            return self

        t = np.where(pos, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))
        A, B = 0.0, float(np.log((n_pos + 1.0) / (n_neg + 1.0)))

        def nll(a, b):
            z = a * scores + b
            # -sum t*log(p) + (1-t)*log(1-p), stable form
            return float(np.sum(np.logaddexp(0.0, z) - t * z))

        current = nll(A, B)
        for _ in range(self.max_iter):
            p = _sigmoid(A * scores + B)
            g = p - t
            grad_a = float(g @ scores)
            grad_b = float(g.sum())
            if max(abs(grad_a), abs(grad_b)) < 1e-10:
                break
            w = p * (1.0 - p)
            haa = float(w @ (scores * scores)) + 1e-12
            hab = float(w @ scores)
            hbb = float(w.sum()) + 1e-12
            det = haa * hbb - hab * hab
            if det <= 0:
                break
            da = -(hbb * grad_a - hab * grad_b) / det
            db = -(haa * grad_b - hab * grad_a) / det
            step = 1.0
            for _ in range(40):
                trial = nll(A + step * da, B + step * db)
                if trial < current + 1e-12:
                    break
                step *= 0.5
            A += step * da
            B += step * db
            current = nll(A, B)
        self.A_ = float(A)
        self.B_ = float(B)
        return self

    def predict_proba(self, scores):
        scores = np.asarray(scores, dtype=np.float64).ravel()
        p = _sigmoid(self.A_ * scores + self.B_)
        return np.clip(p, 1e-15, 1.0 - 1e-15)

    def state_dict(self):
        return {"A": self.A_, "B": self.B_}


def stratified_kfold_indices(y, n_folds, rng):
    """Per-class round-robin fold assignment after a shuffle; returns an
    array of fold ids aligned with y."""
    y = np.asarray(y)
    folds = np.zeros(y.shape[0], dtype=np.int64)
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(idx.size)]
        folds[idx] = np.arange(idx.size) % n_folds
    return folds


def _clone(estimator):
    return type(estimator)(**estimator.get_params(deep=False))


class CalibratedClassifier(BaseEstimator):
    """Wrap a margin classifier with Platt probabilities.

    fit() trains the base estimator on all rows and fits the calibrator on
    out-of-fold decision scores from an internal stratified k-fold, so the
    sigmoid never sees scores produced by a model trained on the same rows.
    The out-of-fold probabilities are kept for stacking (`oof_proba_`).
    """

    def __init__(self, base, n_folds=3, seed=0):
        self.base = base
        self.n_folds = n_folds
        self.seed = seed

    def fit(self, X, y):
        y01 = check_binary_labels(y)
        n = y01.shape[0]
        rng = rng_from_seed(self.seed)
        min_class = int(np.bincount(y01, minlength=2).min())
        n_folds = min(self.n_folds, min_class)

        self.model_ = _clone(self.base).fit(X, y01)
        oof_scores = np.zeros(n)
        if n_folds >= 2:
            folds = stratified_kfold_indices(y01, n_folds, rng)
            for f in range(n_folds):
                train = folds != f
                held = ~train
                if np.unique(y01[train]).size < 2:
                    raise TrainingError("internal calibration fold lost a class")
                sub = _clone(self.base).fit(_rows(X, train), y01[train])
                oof_scores[held] = sub.decision_function(_rows(X, held))
            self.calibrator_ = PlattCalibrator().fit(oof_scores, y01)
        else:
            oof_scores = self.model_.decision_function(X)
            self.calibrator_ = PlattCalibrator().fit(oof_scores, y01)
        self.oof_scores_ = oof_scores
        self.oof_proba_ = self.calibrator_.predict_proba(oof_scores)
        return self

    def decision_function(self, X):
        return self.model_.decision_function(X)

    def predict_proba(self, X):
        return self.calibrator_.predict_proba(self.model_.decision_function(X))

    def predict(self, X):
        return (self.predict_proba(X) > 0.5).astype(np.int64)

    def state_dict(self):
        return {"model": self.model_.state_dict(), "calibrator": self.calibrator_.state_dict()}


def _rows(X, mask):
    return X[mask] if not sp.issparse(X) else X[np.flatnonzero(mask)]


# ---------------------------------------------------------------------------
# metrics


def classification_metrics(scores, preds, y):
    """Positive-class precision/recall/F1 plus rank-accumulation AP.

    Zero predicted positives give precision 0; zero actual positives make AP
    None (absent). Equal scores rank by stable input index.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    preds = np.asarray(preds).ravel().astype(np.int64)
    y = np.asarray(y).ravel().astype(np.int64)
    if not (scores.shape == preds.shape == y.shape):
        raise ValidationError("scores, preds, and y must have equal length")
    tp = int(np.sum((preds == 1) & (y == 1)))
    fp = int(np.sum((preds == 1) & (y == 0)))
    fn = int(np.sum((preds == 0) & (y == 1)))
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0

    n_pos = int((y == 1).sum())
    order = np.lexsort((np.arange(y.size), -scores))
    ap = ap_from_flags((y[order] == 1).tolist(), n_pos)
    return precision, recall, f1, ap
