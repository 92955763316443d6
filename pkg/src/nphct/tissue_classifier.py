"""Random-forest voxel classifier (background / CSF / cerebral mass / skull).

The forest is written from scratch: bootstrap samples, Gini splits at
midpoints between consecutive distinct feature values, soft voting over the
normalised leaf histograms. The same machinery serves the subject-level
NPH classifier in :mod:`nphct.nph_predict`.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path

import numba
import numpy as np
from scipy import ndimage as ndi

from .volume_core import LabelVolume, ScalarVolume

log = logging.getLogger(__name__)

FORMAT = "nphct-random-forest"
FORMAT_VERSION = 1
FEATURE_NAMES = ("intensity", "smooth_sigma1", "smooth_sigma2", "gradient_magnitude")


class TissueClass(IntEnum):
    BACKGROUND = 0
    CSF = 1
    CEREBRAL_MASS = 2
    SKULL = 3


class TrainingError(ValueError):
    """Training data cannot produce a usable forest."""


@dataclass(frozen=True)
class ForestParams:
    n_estimators: int = 200
    max_depth: int | None = 4
    min_samples_split: int = 3
    max_features: int | None = 2
    criterion: str = "gini"

    def __post_init__(self):
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")
        if self.criterion != "gini":
            raise ValueError("only the gini criterion is supported")


# ------------------------------------------------------------------ features


def extract_features(volume: ScalarVolume, raw_only: bool = False) -> np.ndarray:
    """Per-voxel feature image of shape ``dims + (4,)`` (or ``(1,)`` if ``raw_only``).

    Channels: intensity, Gaussian smoothing at 1 and 2 voxels (reflect borders),
    and central-difference gradient magnitude in HU/mm.
    """
    data = volume.data.astype(np.float32)
    if raw_only:
        return data[..., None]
    s1 = ndi.gaussian_filter(data, sigma=1.0, mode="reflect")
    s2 = ndi.gaussian_filter(data, sigma=2.0, mode="reflect")
    grads = np.gradient(data, *volume.spacing)
    gmag = np.sqrt(sum(g.astype(np.float64) ** 2 for g in grads)).astype(np.float32)
    return np.stack([data, s1, s2, gmag], axis=-1)


# ----------------------------------------------------------------------- gini


def gini(counts) -> float:
    """Gini impurity ``1 - sum p_k^2`` of a class-count vector."""
    c = np.asarray(counts, dtype=np.float64)
    if np.any(c < 0):
        raise ValueError("class counts must be non-negative")
    total = c.sum()
    if total <= 0:
        raise ValueError("gini of an empty node is undefined")
    p = c / total
    return float(1.0 - np.dot(p, p))


# ----------------------------------------------------------------------- tree


@dataclass
class DecisionTree:
    """Flat binary tree; ``feature[i] == -1`` marks a leaf. Left branch is ``x <= threshold``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray  # (n_nodes, n_classes)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        def rec(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(rec(self.left[i]), rec(self.right[i]))
        return rec(0)

    def leaf_index(self, x: np.ndarray) -> int:
        i = 0
        while self.feature[i] >= 0:
            i = self.left[i] if x[self.feature[i]] <= self.threshold[i] else self.right[i]
        return i

    def to_dict(self, i: int = 0) -> dict:
        if self.feature[i] < 0:
            return {"counts": [float(c) for c in self.counts[i]]}
        return {
            "feature": int(self.feature[i]),
            "threshold": float(self.threshold[i]),
            "left": self.to_dict(int(self.left[i])),
            "right": self.to_dict(int(self.right[i])),
        }

    @classmethod
    def from_dict(cls, d: dict, n_classes: int) -> "DecisionTree":
        feat, thr, left, right, counts = [], [], [], [], []

        def rec(node):
            i = len(feat)
            feat.append(-1)
            thr.append(0.0)
            left.append(-1)
            right.append(-1)
            counts.append(np.zeros(n_classes))
            if "counts" in node:
                counts[i] = np.asarray(node["counts"], dtype=np.float64)
                return i
            feat[i] = int(node["feature"])
            thr[i] = float(node["threshold"])
            left[i] = rec(node["left"])
            right[i] = rec(node["right"])
            counts[i] = counts[left[i]] + counts[right[i]]
            return i

        rec(d)
        return cls(np.array(feat, np.int32), np.array(thr, np.float64), np.array(left, np.int32),
                   np.array(right, np.int32), np.array(counts, np.float64))


@numba.njit(cache=True)
def _scan_splits(xs, ys, n_classes, parent_gini):
    """Best split over sorted values: (decrease, position), or (-inf, -1) if constant."""
    n = xs.shape[0]
    total = np.zeros(n_classes)
    for i in range(n):
        total[ys[i]] += 1.0
    cum = np.zeros(n_classes)
    dec = np.full(n - 1, -np.inf)
    best = -np.inf
    for i in range(n - 1):
        cum[ys[i]] += 1.0
        if xs[i] < xs[i + 1]:
            nl = i + 1.0
            nr = n - nl
            sl = 0.0
            sr = 0.0
            for c in range(n_classes):
                r = total[c] - cum[c]
                sl += cum[c] * cum[c]
                sr += r * r
            dec[i] = parent_gini - (nl * (1.0 - sl / (nl * nl)) + nr * (1.0 - sr / (nr * nr))) / n
            best = max(best, dec[i])
    if best == -np.inf:
        return best, -1
    # ties: most balanced split, then lowest position
    pos, gap = -1, n + 1.0
    for i in range(n - 1):
        if dec[i] >= best - 1e-12 and abs(2.0 * (i + 1.0) - n) < gap:
            pos, gap = i, abs(2.0 * (i + 1.0) - n)
    return dec[pos], pos


@numba.njit(cache=True)
def _choose_split(Xn, yn, order, k, n_classes):
    """Scan features in ``order``; returns (feature, threshold) or (-1, 0.0).

    Only the first ``k`` features are examined, unless all of them are
    constant, in which case drawing continues until a usable one appears.
    Equal decreases go to the smaller feature index.
    """
    counts = np.zeros(n_classes)
    for i in range(yn.shape[0]):
        counts[yn[i]] += 1.0
    p = counts / yn.shape[0]
    parent_gini = 1.0 - np.dot(p, p)
    best_dec, best_f, best_t = -np.inf, -1, 0.0
    for j in range(order.shape[0]):
        if j >= k and best_f >= 0:
            break
        f = order[j]
        x = Xn[:, f]
        srt = np.argsort(x, kind="mergesort")
        xs = x[srt]
        dec, pos = _scan_splits(xs, yn[srt], n_classes, parent_gini)
        if pos < 0:
            continue
        if best_f < 0 or dec > best_dec + 1e-12 or (abs(dec - best_dec) <= 1e-12 and f < best_f):
            best_dec, best_f, best_t = dec, f, 0.5 * (xs[pos] + xs[pos + 1])
    return best_f, best_t


def build_tree(X: np.ndarray, y: np.ndarray, n_classes: int, params: ForestParams,
               rng: np.random.Generator) -> DecisionTree:
    n_features = X.shape[1]
    k = n_features if params.max_features is None else min(params.max_features, n_features)
    feat, thr, left, right, counts = [], [], [], [], []

    def new_node(c):
        feat.append(-1)
        thr.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(c)
        return len(feat) - 1

    stack = [(np.arange(len(y)), 0, new_node(np.bincount(y, minlength=n_classes).astype(float)))]
    while stack:
        idx, depth, node = stack.pop()
        c = counts[node]
        if ((params.max_depth is not None and depth >= params.max_depth)
                or len(idx) < params.min_samples_split or np.count_nonzero(c) <= 1):
            continue
        f, t = _choose_split(X[idx], y[idx], rng.permutation(n_features), k, n_classes)
        if f < 0:
            continue
        go_left = X[idx, f] <= t
        li, ri = idx[go_left], idx[~go_left]
        feat[node], thr[node] = f, t
        left[node] = new_node(np.bincount(y[li], minlength=n_classes).astype(float))
        right[node] = new_node(np.bincount(y[ri], minlength=n_classes).astype(float))
        stack.append((ri, depth + 1, right[node]))
        stack.append((li, depth + 1, left[node]))
    return DecisionTree(np.array(feat, np.int32), np.array(thr, np.float64), np.array(left, np.int32),
                        np.array(right, np.int32), np.array(counts, np.float64))


# --------------------------------------------------------------------- forest


@numba.njit(cache=True)
def _forest_proba(X, feature, threshold, left, right, leaf_value, roots):
    n = X.shape[0]
    k = leaf_value.shape[1]
    out = np.zeros((n, k))
    for s in range(n):
        for t in range(roots.shape[0]):
            i = roots[t]
            while feature[i] >= 0:
                if X[s, feature[i]] <= threshold[i]:
                    i = left[i]
                else:
                    i = right[i]
            for c in range(k):
                out[s, c] += leaf_value[i, c]
    return out


@dataclass
class RandomForestModel:
    trees: list
    n_classes: int
    n_features: int
    params: ForestParams = field(default_factory=ForestParams)
    rng_seed: int = 0
    feature_names: tuple = ()
    _packed: tuple | None = field(default=None, repr=False, compare=False)

    def _pack(self):
        if self._packed is None:
            offs = np.cumsum([0] + [t.n_nodes for t in self.trees])
            feature = np.concatenate([t.feature for t in self.trees]).astype(np.int64)
            threshold = np.concatenate([t.threshold for t in self.trees])
            left = np.concatenate([t.left + o for t, o in zip(self.trees, offs)]).astype(np.int64)
            right = np.concatenate([t.right + o for t, o in zip(self.trees, offs)]).astype(np.int64)
            counts = np.concatenate([t.counts for t in self.trees])
            sums = counts.sum(axis=1, keepdims=True)
            value = np.divide(counts, sums, out=np.zeros_like(counts), where=sums > 0)
            self._packed = (feature, threshold, left, right, value, offs[:-1].astype(np.int64))
        return self._packed

    def vote_sums(self, X) -> np.ndarray:
        """Sum over trees of normalised leaf histograms, shape (n, n_classes)."""
        X = np.ascontiguousarray(np.asarray(X, dtype=np.float64).reshape(-1, self.n_features))
        return _forest_proba(X, *self._pack())

    def predict_proba(self, X) -> np.ndarray:
        return self.vote_sums(X) / len(self.trees)

    def predict(self, X) -> np.ndarray:
        # argmax returns the first maximum: ties go to the lowest class ID
        return np.argmax(self.vote_sums(X), axis=1)

    def to_json(self) -> str:
        return json.dumps({
            "format": FORMAT,
            "version": FORMAT_VERSION,
            "n_classes": self.n_classes,
            "n_features": self.n_features,
            "feature_names": list(self.feature_names),
            "params": asdict(self.params),
            "rng_seed": self.rng_seed,
            "trees": [t.to_dict() for t in self.trees],
        })

    @classmethod
    def from_json(cls, text: str) -> "RandomForestModel":
        d = json.loads(text)
        if d.get("format") != FORMAT:
            raise ValueError("not a serialized random forest")
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported forest format version {d.get('version')}")
        trees = [DecisionTree.from_dict(t, d["n_classes"]) for t in d["trees"]]
        return cls(trees, d["n_classes"], d["n_features"], ForestParams(**d["params"]),
                   d["rng_seed"], tuple(d.get("feature_names", ())))

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(f".tmp-{path.name}")
        tmp.write_text(self.to_json())
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "RandomForestModel":
        return cls.from_json(Path(path).read_text())


def train_forest(X, y, params: ForestParams = ForestParams(), rng_seed: int = 0,
                 n_classes: int | None = None, feature_names=()) -> RandomForestModel:
    """Fit a forest; each tree sees a bootstrap sample of the rows."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
        raise TrainingError("training data must be a non-empty (n, d) matrix with n labels")
    if not np.all(np.isfinite(X)):
        raise TrainingError("training features must be finite")
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    present = np.bincount(y, minlength=n_classes)
    missing = [c for c in range(n_classes) if present[c] == 0]
    if missing:
        raise TrainingError(f"class(es) {missing} absent from training data")
    rng = np.random.default_rng(rng_seed)
    trees = []
    n = len(y)
    for _ in range(params.n_estimators):
        boot = rng.integers(0, n, size=n)
        trees.append(build_tree(X[boot], y[boot], n_classes, params, rng))
    return RandomForestModel(trees, n_classes, X.shape[1], params, rng_seed, tuple(feature_names))


# ----------------------------------------------------------- voxel training


def load_annotations(path, dims=None) -> np.ndarray:
    """Sparse annotations as an (n, 4) int array of ``x, y, z, class_id`` rows."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                rows.append([int(v) for v in row[:4]])
            except ValueError:
                if lineno == 1:
                    continue  # header
                raise ValueError(f"{path}:{lineno}: expected x,y,z,class_id integers, got {row}")
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    if dims is not None and len(arr):
        bad = np.any((arr[:, :3] < 0) | (arr[:, :3] >= np.asarray(dims)), axis=1)
        if bad.any():
            raise ValueError(f"{path}: annotation row {int(np.argmax(bad)) + 1} is outside the grid {tuple(dims)}")
    if len(arr) and (arr[:, 3].min() < 0 or arr[:, 3].max() >= len(TissueClass)):
        raise ValueError(f"{path}: class IDs must be in 0..{len(TissueClass) - 1}")
    return arr


def save_annotations(path, annotations: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z", "class_id"])
        w.writerows(np.asarray(annotations, dtype=np.int64).tolist())


def training_set(features: np.ndarray, annotations: np.ndarray):
    idx = tuple(annotations[:, :3].T)
    return features[idx].astype(np.float64), annotations[:, 3].astype(np.int64)


def train_tissue_model(volume: ScalarVolume, annotations: np.ndarray,
                       params: ForestParams = ForestParams(), rng_seed: int = 0,
                       raw_only: bool = False) -> RandomForestModel:
    feats = extract_features(volume, raw_only=raw_only)
    X, y = training_set(feats, annotations)
    names = FEATURE_NAMES[:1] if raw_only else FEATURE_NAMES
    try:
        return train_forest(X, y, params, rng_seed, n_classes=len(TissueClass), feature_names=names)
    except TrainingError as exc:
        present = set(np.unique(y).tolist())
        missing = [TissueClass(c).name for c in range(len(TissueClass)) if c not in present]
        if missing:
            raise TrainingError(f"annotations lack tissue class(es): {', '.join(missing)}") from exc
        raise


def predict_voxelwise(model: RandomForestModel, features: np.ndarray, like, mask=None) -> LabelVolume:
    """Label every voxel by forest vote. Voxels outside ``mask`` are background."""
    dims = features.shape[:-1]
    labels = np.zeros(dims, dtype=np.uint8)
    sel = np.ones(dims, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if sel.any():
        labels[sel] = model.predict(features[sel]).astype(np.uint8)
    return LabelVolume(labels, like.spacing, like.pose, n_labels=model.n_classes)
