"""Subject-level NPH prediction from compartment volumes.

An RBF support vector machine trained by SMO, the shared random forest, and
the Evans-ratio threshold rule, all evaluated with repeated stratified
train/test splits.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tissue_classifier import ForestParams, RandomForestModel, train_forest

log = logging.getLogger(__name__)

NON_NPH, NPH = 0, 1
EVANS_CUTOFF = 0.3
FEATURES = ("ventricle_ml", "subarachnoid_ml", "cerebral_ml", "total_ml")
COHORT_COLUMNS = ("subject_id",) + FEATURES + ("label", "evans_ratio")
_LABEL_NAMES = {"nph": NPH, "1": NPH, "non-nph": NON_NPH, "normal": NON_NPH, "0": NON_NPH}


@dataclass
class SubjectRecord:
    subject_id: str
    ventricle_ml: float
    subarachnoid_ml: float
    cerebral_ml: float
    total_ml: float | None = None
    label: int | None = None
    evans_ratio: float | None = None

    def __post_init__(self):
        parts = self.ventricle_ml + self.subarachnoid_ml + self.cerebral_ml
        if self.total_ml is None:
            self.total_ml = parts
        elif abs(self.total_ml - parts) > 1e-6:
            raise ValueError(f"{self.subject_id}: total_ml {self.total_ml} != compartment sum {parts}")
        if self.label not in (None, NPH, NON_NPH):
            raise ValueError(f"{self.subject_id}: label must be 0 (non-NPH) or 1 (NPH)")

    @property
    def features(self) -> np.ndarray:
        return np.array([self.ventricle_ml, self.subarachnoid_ml, self.cerebral_ml, self.total_ml])


def feature_matrix(records) -> np.ndarray:
    return np.array([r.features for r in records], dtype=np.float64).reshape(-1, len(FEATURES))


def label_vector(records) -> np.ndarray:
    if any(r.label is None for r in records):
        raise ValueError("every training record needs a label")
    return np.array([r.label for r in records], dtype=np.int64)


# ------------------------------------------------------------------- kernel


def rbf_kernel(x, y, gamma: float):
    """exp(-gamma * ||x - y||^2); also accepts row matrices and returns the Gram matrix."""
    if not gamma > 0:
        raise ValueError("gamma must be > 0")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[-1] != y.shape[-1]:
        raise ValueError(f"dimension mismatch: {x.shape[-1]} vs {y.shape[-1]}")
    if x.ndim == 1 and y.ndim == 1:
        return float(np.exp(-gamma * np.sum((x - y) ** 2)))
    x2 = np.atleast_2d(x)
    y2 = np.atleast_2d(y)
    d2 = (x2 ** 2).sum(1)[:, None] + (y2 ** 2).sum(1)[None, :] - 2.0 * x2 @ y2.T
    return np.exp(-gamma * np.maximum(d2, 0.0))


# ---------------------------------------------------------------------- SVM


class SvmConvergenceError(RuntimeError):
    def __init__(self, violation: float, iterations: int):
        self.violation = violation
        super().__init__(f"SMO did not converge after {iterations} iterations "
                         f"(max KKT violation {violation:.3g})")


@dataclass(frozen=True)
class SvmParams:
    C: float = 2.0
    gamma: float = 0.1
    tol: float = 1e-3
    max_iter: int = 100_000
    standardize: bool = True

    def __post_init__(self):
        if not (self.C > 0 and self.gamma > 0 and self.tol > 0):
            raise ValueError("C, gamma and tol must be > 0")


@dataclass
class SvmModel:
    support_vectors: np.ndarray  # standardized space
    dual_coef: np.ndarray  # alpha_i * y_i
    bias: float
    gamma: float
    C: float
    mean: np.ndarray
    std: np.ndarray
    alpha: np.ndarray = field(repr=False)  # all training multipliers
    y: np.ndarray = field(repr=False)  # training labels in {-1, +1}

    def _scale(self, X) -> np.ndarray:
        return (np.atleast_2d(np.asarray(X, dtype=np.float64)) - self.mean) / self.std

    def decision_function(self, X) -> np.ndarray:
        if len(self.support_vectors) == 0:
            return np.full(len(np.atleast_2d(X)), self.bias)
        K = rbf_kernel(self._scale(X), self.support_vectors, self.gamma)
        return K @ self.dual_coef + self.bias

    def predict(self, X) -> np.ndarray:
        # a decision value of exactly zero counts as NPH
        return np.where(self.decision_function(X) >= 0, NPH, NON_NPH)


def _smo(K: np.ndarray, y: np.ndarray, C: float, tol: float, max_iter: int):
    """Dual soft-margin SVM by SMO with maximal-violating-pair selection."""
    n = len(y)
    alpha = np.zeros(n)
    grad = -np.ones(n)  # gradient of 1/2 a'Qa - e'a
    diag = np.diag(K)
    for it in range(max_iter + 1):
        score = -y * grad
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        i = np.flatnonzero(up)[np.argmax(score[up])]
        j = np.flatnonzero(low)[np.argmin(score[low])]
        gap = score[i] - score[j]
        if gap < tol:
            break
        if it == max_iter:
            raise SvmConvergenceError(float(gap), max_iter)
        # move alpha_i by +y_i t and alpha_j by -y_j t
        eta = max(diag[i] + diag[j] - 2.0 * K[i, j], 1e-12)
        t = gap / eta
        t = min(t, C - alpha[i] if y[i] > 0 else alpha[i])
        t = min(t, alpha[j] if y[j] > 0 else C - alpha[j])
        alpha[i] += y[i] * t
        alpha[j] -= y[j] * t
        np.clip(alpha, 0.0, C, out=alpha)
        grad += t * y * (K[:, i] - K[:, j])
    score = -y * grad
    free = (alpha > 1e-8 * C) & (alpha < C * (1 - 1e-8))
    if free.any():
        b = float(score[free].mean())
    else:
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        b = 0.5 * (score[up].max() + score[low].min())
    return alpha, b


def train_svm(X, y, params: SvmParams = SvmParams()) -> SvmModel:
    """Fit an RBF SVM. ``y`` uses 1 for NPH and 0 for non-NPH.

    Features are standardized with the training rows' mean and std unless
    ``params.standardize`` is off.
    """
    X = np.asarray(X, dtype=np.float64)
    y01 = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y01):
        raise ValueError("X must be (n, d) with one label per row")
    if len(np.unique(y01)) < 2:
        raise ValueError("SVM training needs both classes")
    if params.standardize:
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        std[std == 0] = 1.0
    else:
        mean = np.zeros(X.shape[1])
        std = np.ones(X.shape[1])
    Z = (X - mean) / std
    ys = np.where(y01 == NPH, 1.0, -1.0)
    K = rbf_kernel(Z, Z, params.gamma)
    alpha, b = _smo(K, ys, params.C, params.tol, params.max_iter)
    sv = alpha > 0
    return SvmModel(Z[sv], alpha[sv] * ys[sv], b, params.gamma, params.C, mean, std, alpha, ys)


def predict_svm(model: SvmModel, features):
    """(labels, decision values) for rows of raw features."""
    dec = model.decision_function(features)
    return np.where(dec >= 0, NPH, NON_NPH), dec


# -------------------------------------------------------------- Evans ratio


def evans_threshold(evans_ratio):
    """NPH iff the Evans ratio is at least 0.3."""
    r = np.asarray(evans_ratio, dtype=np.float64)
    if np.any(~(r > 0) | ~(r < 1)):
        raise ValueError("Evans ratio must lie in (0, 1)")
    out = np.where(r >= EVANS_CUTOFF, NPH, NON_NPH)
    return int(out) if out.ndim == 0 else out


def synth_evans_ratios(labels, sensitivity: float, specificity: float, seed: int = 0) -> np.ndarray:
    """Evans ratios for which the threshold rule hits the requested rates.

    round(sensitivity * n_nph) NPH subjects and round(specificity * n_normal)
    normal subjects land on the correct side of 0.3.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    out = np.empty(len(labels))
    for cls, rate in ((NPH, sensitivity), (NON_NPH, specificity)):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        n_ok = int(round(rate * len(idx)))
        above = idx[:n_ok] if cls == NPH else idx[n_ok:]
        below = idx[n_ok:] if cls == NPH else idx[:n_ok]
        out[above] = rng.uniform(0.30, 0.42, size=len(above))
        out[below] = rng.uniform(0.20, 0.2999, size=len(below))
    return out


# ------------------------------------------------------------------ metrics


def confusion(y_true, y_pred, positive: int = NPH):
    """(tp, fn, tn, fp) with ``positive`` as the positive class."""
    t = np.asarray(y_true) == positive
    p = np.asarray(y_pred) == positive
    return int(np.sum(t & p)), int(np.sum(t & ~p)), int(np.sum(~t & ~p)), int(np.sum(~t & p))


def sensitivity(y_true, y_pred, positive: int = NPH) -> float:
    tp, fn, _, _ = confusion(y_true, y_pred, positive)
    return tp / (tp + fn) if tp + fn else math.nan


def specificity(y_true, y_pred, positive: int = NPH) -> float:
    _, _, tn, fp = confusion(y_true, y_pred, positive)
    return tn / (tn + fp) if tn + fp else math.nan


def balanced_accuracy(y_true, y_pred) -> float:
    return 0.5 * (sensitivity(y_true, y_pred) + specificity(y_true, y_pred))


# -------------------------------------------------------------- classifiers


class SvmClassifier:
    name = "svm"

    def __init__(self, params: SvmParams = SvmParams()):
        self.params = params

    def design(self, records) -> np.ndarray:
        return feature_matrix(records)

    def fit(self, X, y, seed: int):
        return train_svm(X, y, self.params)


class ForestClassifier:
    name = "rf"

    def __init__(self, params: ForestParams = ForestParams()):
        self.params = params

    def design(self, records) -> np.ndarray:
        return feature_matrix(records)

    def fit(self, X, y, seed: int):
        return train_rf_subject(X, y, self.params, seed)


class _Rule:
    def __init__(self, fn):
        self.predict = fn


class EvansClassifier:
    """Fixed threshold on the Evans ratio; ``fit`` learns nothing."""

    name = "evans"

    def design(self, records) -> np.ndarray:
        if any(r.evans_ratio is None for r in records):
            raise ValueError("Evans classifier needs evans_ratio on every record")
        return np.array([[r.evans_ratio] for r in records])

    def fit(self, X, y, seed: int):
        return _Rule(lambda Z: evans_threshold(np.asarray(Z)[:, 0]))


class ConstantClassifier:
    """Predicts one label for everyone."""

    def __init__(self, label: int = NPH):
        self.label = label
        self.name = f"constant-{label}"

    def design(self, records) -> np.ndarray:
        return feature_matrix(records)

    def fit(self, X, y, seed: int):
        return _Rule(lambda Z: np.full(len(Z), self.label))


CLASSIFIERS = {"svm": SvmClassifier, "rf": ForestClassifier, "evans": EvansClassifier}


def train_rf_subject(X, y, params: ForestParams = ForestParams(), seed: int = 0) -> RandomForestModel:
    """Binary forest over subject features (defaults: 200 trees, depth 4)."""
    return train_forest(X, y, params, seed, n_classes=2, feature_names=FEATURES[: np.shape(X)[1]])


# ------------------------------------------------------- cross-validation


@dataclass(frozen=True)
class CvPlan:
    n_repeats: int = 100
    test_size: int = 11  # of 61 subjects; scaled for other cohort sizes
    cohort_size: int = 61
    rng_seed: int = 0
    k_folds: int | None = None  # plain stratified k-fold instead of repeated splits
    max_redraws: int = 100

    def __post_init__(self):
        if self.n_repeats < 1:
            raise ValueError("n_repeats must be >= 1")
        if not 0 < self.test_size < self.cohort_size:
            raise ValueError("test_size must be between 0 and cohort_size")

    def test_fraction(self) -> float:
        return self.test_size / self.cohort_size


def stratified_split(y: np.ndarray, test_fraction: float, rng: np.random.Generator):
    """(train_idx, test_idx) keeping class proportions within one subject."""
    y = np.asarray(y)
    n_test = max(1, int(round(test_fraction * len(y))))
    classes = np.unique(y)
    counts = np.array([np.count_nonzero(y == c) for c in classes])
    want = counts * n_test / len(y)
    take = np.floor(want).astype(int)
    # hand out the remainder to the largest fractional parts
    for k in np.argsort(-(want - take), kind="stable")[: n_test - take.sum()]:
        take[k] += 1
    test = np.concatenate([rng.permutation(np.flatnonzero(y == c))[:t] for c, t in zip(classes, take)])
    mask = np.zeros(len(y), dtype=bool)
    mask[test] = True
    return np.flatnonzero(~mask), np.flatnonzero(mask)


def _kfold_splits(y: np.ndarray, k: int, rng: np.random.Generator):
    fold = np.empty(len(y), dtype=int)
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        fold[idx] = np.arange(len(idx)) % k
    return [(np.flatnonzero(fold != f), np.flatnonzero(fold == f)) for f in range(k)]


def _splits(y: np.ndarray, plan: CvPlan):
    """Yield (repeat, train, test); splits missing a class are redrawn."""
    for rep in range(plan.n_repeats):
        rng = np.random.default_rng([plan.rng_seed, rep])
        for attempt in range(plan.max_redraws):
            if plan.k_folds:
                pairs = _kfold_splits(y, plan.k_folds, rng)
            else:
                pairs = [stratified_split(y, plan.test_fraction(), rng)]
            if all(len(np.unique(y[tr])) == 2 and len(np.unique(y[te])) == 2 for tr, te in pairs):
                break
            log.info("repeat %d: split lacks a class, redrawing (attempt %d)", rep, attempt + 1)
        else:
            raise ValueError(f"repeat {rep}: no split with both classes after {plan.max_redraws} draws")
        for tr, te in pairs:
            yield rep, tr, te


def _mean_std(values) -> tuple:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())  # population std


@dataclass
class MetricsSummary:
    classifier: str
    train_sensitivity: tuple
    train_specificity: tuple
    test_sensitivity: tuple
    test_specificity: tuple
    per_repeat: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("per_repeat")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def per_repeat_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["repeat", "train_sensitivity", "train_specificity", "test_sensitivity", "test_specificity"])
        for row in self.per_repeat:
            w.writerow([row[0]] + [f"{v:.6f}" for v in row[1:]])
        return buf.getvalue()


def _check_cohort(y: np.ndarray):
    counts = np.bincount(y, minlength=2)
    if counts.min() < 2:
        raise ValueError(f"need at least 2 subjects per class, got {counts.tolist()}")


def run_cv(records, classifier, plan: CvPlan = CvPlan()) -> MetricsSummary:
    """Repeated stratified train/test evaluation of ``classifier``."""
    X = classifier.design(records)
    y = label_vector(records)
    _check_cohort(y)
    rows = []
    for rep, tr, te in _splits(y, plan):
        model = classifier.fit(X[tr], y[tr], plan.rng_seed + rep)
        p_tr = model.predict(X[tr])
        p_te = model.predict(X[te])
        rows.append((rep, sensitivity(y[tr], p_tr), specificity(y[tr], p_tr),
                     sensitivity(y[te], p_te), specificity(y[te], p_te)))
    cols = list(zip(*rows))
    return MetricsSummary(classifier.name, _mean_std(cols[1]), _mean_std(cols[2]),
                          _mean_std(cols[3]), _mean_std(cols[4]), rows)


def evaluate_all(records, classifier, seed: int = 0):
    """(sensitivity, specificity) from fitting and scoring on every record."""
    X = classifier.design(records)
    y = label_vector(records)
    pred = classifier.fit(X, y, seed).predict(X)
    return sensitivity(y, pred), specificity(y, pred)


def feature_importance(records, classifier, plan: CvPlan = CvPlan()) -> np.ndarray:
    """Permutation importance, shape (n_splits, n_features).

    Each entry is the drop in test balanced accuracy when that feature's test
    column is shuffled.
    """
    X = classifier.design(records)
    y = label_vector(records)
    _check_cohort(y)
    out = []
    for rep, tr, te in _splits(y, plan):
        model = classifier.fit(X[tr], y[tr], plan.rng_seed + rep)
        base = balanced_accuracy(y[te], model.predict(X[te]))
        rng = np.random.default_rng([plan.rng_seed, rep, 1])
        drops = []
        for f in range(X.shape[1]):
            Xp = X[te].copy()
            Xp[:, f] = rng.permutation(Xp[:, f])
            drops.append(base - balanced_accuracy(y[te], model.predict(Xp)))
        out.append(drops)
    return np.array(out)


def importance_boxplot(importance: np.ndarray, names, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.boxplot(importance, tick_labels=list(names))
    ax.axhline(0, color="grey", lw=0.5)
    ax.set_ylabel("balanced accuracy drop")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# --------------------------------------------------------------- cohort CSV


class CohortSchemaError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid cohort CSV:\n" + "\n".join(f"  row {r}: {m}" for r, m in self.problems))


def _parse_label(text: str):
    if text.strip() == "":
        return None
    key = text.strip().lower()
    if key not in _LABEL_NAMES:
        raise ValueError(f"unknown label {text!r}")
    return _LABEL_NAMES[key]


def parse_cohort(text: str) -> list:
    """Records from cohort CSV text; all schema problems are reported together."""
    reader = csv.DictReader(io.StringIO(text))
    header = reader.fieldnames or []
    missing = [c for c in COHORT_COLUMNS if c not in header and c not in ("total_ml", "label", "evans_ratio")]
    if missing:
        raise CohortSchemaError([(1, f"missing column(s): {', '.join(missing)}")])
    records, problems = [], []
    for rownum, row in enumerate(reader, start=2):
        try:
            vols = [float(row[c]) for c in FEATURES[:3]]
            if any(not math.isfinite(v) or v < 0 for v in vols):
                raise ValueError("volumes must be finite and >= 0")
            total = row.get("total_ml") or ""
            evans = row.get("evans_ratio") or ""
            records.append(SubjectRecord(
                row["subject_id"], *vols,
                total_ml=float(total) if total.strip() else None,
                label=_parse_label(row.get("label") or ""),
                evans_ratio=float(evans) if evans.strip() else None,
            ))
        except (KeyError, TypeError, ValueError) as exc:
            problems.append((rownum, str(exc)))
    if problems:
        raise CohortSchemaError(problems)
    return records


def read_cohort(path) -> list:
    return parse_cohort(Path(path).read_text())


def format_cohort(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COHORT_COLUMNS)
    for r in records:
        label = "" if r.label is None else ("NPH" if r.label == NPH else "non-NPH")
        evans = "" if r.evans_ratio is None else repr(float(r.evans_ratio))
        # full precision so total_ml still matches the compartment sum on reload
        vols = [repr(float(v)) for v in (r.ventricle_ml, r.subarachnoid_ml, r.cerebral_ml, r.total_ml)]
        w.writerow([r.subject_id, *vols, label, evans])
    return buf.getvalue()


def write_cohort(path, records) -> None:
    path = Path(path)
    tmp = path.with_name(f".tmp-{path.name}")
    tmp.write_text(format_cohort(records))
    tmp.replace(path)
