"""Feature-based OOD scores: class-conditional Mahalanobis, relative and
multi-layer variants, and Gram-matrix range deviations.

Statistics are fitted on artefact-free training features only and are
immutable afterwards. Scores are negated distances (higher = more ID).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    ClassMissingInReference,
    ClassUnderpopulated,
    DimensionMismatch,
    EmptyClass,
    IoFailure,
    MissingLayer,
    SchemaMismatch,
    SingularCovariance,
)
from .tensor_io import read_array_file, write_array_file

DEFAULT_REG_SCALE = 1e-3
GRAM_EPS = 1e-12


def default_regulariser(cov: np.ndarray) -> float:
    """Ridge of 1e-3 times the mean variance."""
    return DEFAULT_REG_SCALE * float(np.trace(cov)) / cov.shape[0]


def _regularised_inverse(cov: np.ndarray, reg: float | None) -> tuple[np.ndarray, float]:
    lam = default_regulariser(cov) if reg is None else float(reg)
    m = cov.shape[0]
    a = cov + lam * np.eye(m)
    try:
        prec = np.linalg.inv(a)
    except np.linalg.LinAlgError:
        raise SingularCovariance("covariance is singular even after regularisation") from None
    if not np.all(np.isfinite(prec)) or np.abs(prec @ a - np.eye(m)).max() > 1e-6:
        raise SingularCovariance(f"covariance too ill-conditioned to invert (lambda={lam:g})")
    return (prec + prec.T) / 2, lam


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    precision: np.ndarray
    reg: float

    def distance(self, z: np.ndarray) -> np.ndarray:
        """Squared Mahalanobis distance of each row of ``z`` (or a single vector)."""
        d = np.asarray(z, dtype=np.float64) - self.mean
        q = np.einsum("...i,ij,...j->...", d, self.precision, d)
        if np.any(q < -1e-10):
            raise ArithmeticError("negative quadratic form; precision is not positive definite")
        return np.maximum(q, 0.0)


@dataclass
class ClassGaussianStats:
    """Per-class means and (regularised) precisions of pooled feature vectors."""

    classes: list[int]
    per_class: list[GaussianStats]
    shared: bool = False

    @property
    def dim(self) -> int:
        return self.per_class[0].mean.shape[0]

    def distances(self, z: np.ndarray) -> np.ndarray:
        """Distance to each class, class on the last axis."""
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.dim:
            raise DimensionMismatch(f"feature dimension {z.shape[-1]} != fitted dimension {self.dim}")
        return np.stack([g.distance(z) for g in self.per_class], axis=-1)

    def min_distance(self, z: np.ndarray) -> np.ndarray:
        return self.distances(z).min(axis=-1)


def _covariance(z: np.ndarray) -> np.ndarray:
    d = z - z.mean(axis=0)
    cov = d.T @ d / (len(z) - 1)
    return (cov + cov.T) / 2


def fit_gaussian(features: np.ndarray, reg: float | None = None) -> GaussianStats:
    z = np.asarray(features, dtype=np.float64)
    if z.ndim != 2 or len(z) < 2:
        raise ClassUnderpopulated("need at least two feature vectors")
    cov = _covariance(z)
    prec, lam = _regularised_inverse(cov, reg)
    return GaussianStats(z.mean(axis=0), cov, prec, lam)


def fit_class_gaussians(features, labels, reg: float | None = None, shared: bool = False) -> ClassGaussianStats:
    """Class means and covariances (divisor N_y - 1), inverted with a ridge.

    ``reg=None`` uses 1e-3 * trace(cov) / M. With ``shared=True`` every class
    uses the pooled within-class covariance instead of its own.
    """
    z = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or z.shape[1] < 1 or len(z) != len(y):
        raise DimensionMismatch(f"features {z.shape} and labels {y.shape} are inconsistent")
    classes = sorted(int(c) for c in np.unique(y))
    groups = {c: z[y == c] for c in classes}
    for c, g in groups.items():
        if len(g) < 2:
            raise ClassUnderpopulated(f"class {c} has {len(g)} sample(s); need two")
    if not shared:
        return ClassGaussianStats(classes, [fit_gaussian(groups[c], reg) for c in classes])
    centred = np.concatenate([g - g.mean(axis=0) for g in groups.values()])
    cov = centred.T @ centred / (len(z) - len(classes))
    cov = (cov + cov.T) / 2
    prec, lam = _regularised_inverse(cov, reg)
    return ClassGaussianStats(
        classes, [GaussianStats(groups[c].mean(axis=0), cov, prec, lam) for c in classes], shared=True
    )


def fit_background_gaussian(features, reg: float | None = None) -> GaussianStats:
    """A single Gaussian over all training features, ignoring labels."""
    return fit_gaussian(features, reg)


def _unwrap(x):
    return float(x) if np.ndim(x) == 0 else x


def score_mahalanobis(z, stats: ClassGaussianStats):
    """Negative distance to the closest class centroid."""
    return _unwrap(-stats.min_distance(z))


def score_rms(z, class_stats: ClassGaussianStats, background: GaussianStats):
    """Negative of (closest class distance minus background distance)."""
    return _unwrap(-(class_stats.min_distance(z) - background.distance(z)))


# ---------------------------------------------------------------------------
# multi-branch Mahalanobis
# ---------------------------------------------------------------------------


@dataclass
class LayerSelection:
    layers: list[int]
    normalizers: list[float]

    def __post_init__(self):
        if not self.layers or len(self.layers) != len(self.normalizers):
            raise ValueError("layer selection needs one normalizer per layer")
        if any(n <= 0 for n in self.normalizers):
            raise ValueError("normalizers must be positive")


def fit_layer_selection(layers: Sequence[int], stats_per_layer: dict, holdout_z_per_layer: dict) -> LayerSelection:
    """Normalise each layer by its mean closest-class distance on held-out ID features."""
    norms = []
    for l in layers:
        if l not in stats_per_layer or l not in holdout_z_per_layer:
            raise MissingLayer(l)
        norms.append(float(stats_per_layer[l].min_distance(holdout_z_per_layer[l]).mean()))
    return LayerSelection(list(layers), norms)


def score_mbm(z_per_layer: dict, selection: LayerSelection, stats_per_layer: dict):
    """Negative sum over layers of the normalised closest-class distance."""
    total = 0.0
    for l, n in zip(selection.layers, selection.normalizers):
        if l not in z_per_layer or l not in stats_per_layer:
            raise MissingLayer(l)
        total = total + stats_per_layer[l].min_distance(z_per_layer[l]) / n
    return _unwrap(-total)


# ---------------------------------------------------------------------------
# Gram matrices
# ---------------------------------------------------------------------------


def gram_matrices(fmap: np.ndarray, orders: int) -> np.ndarray:
    """Sign-preserving power Gram matrices of ``(J, J, M)`` maps.

    Returns ``(P, M, M)`` per map (``(N, P, M, M)`` for a batch), where entry
    ``p-1`` is ``F_p F_p^T`` and ``F_p`` holds each channel's flattened
    activations raised to the power ``p`` with their sign kept.
    """
    a = np.asarray(fmap, dtype=np.float64)
    single = a.ndim == 3
    if single:
        a = a[None]
    if a.ndim != 4:
        raise DimensionMismatch(f"expected (J, J, M) feature maps, got shape {np.shape(fmap)}")
    n, h, w, m = a.shape
    f = a.reshape(n, h * w, m).transpose(0, 2, 1)
    out = np.empty((n, orders, m, m))
    for p in range(1, orders + 1):
        fp = np.sign(f) * np.abs(f) ** p
        out[:, p - 1] = fp @ fp.transpose(0, 2, 1)
    return out[0] if single else out


def gram_deviation(g: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Relative exceedance of ``g`` beyond ``[lo, hi]``, zero inside the range."""
    below = g < lo
    above = g > hi
    bound = np.where(below, lo, hi)
    dev = np.abs(g - bound) / (np.abs(bound) + GRAM_EPS)
    return np.where(below | above, dev, 0.0)


@dataclass
class GramReference:
    layers: list[int]
    classes: list[int]
    orders: int
    mins: dict = field(default_factory=dict)  # (layer, class) -> (P, M, M)
    maxs: dict = field(default_factory=dict)
    expected: dict = field(default_factory=dict)  # layer -> E_l

    def layer_deviation(self, layer: int, grams: np.ndarray, classes: np.ndarray) -> np.ndarray:
        """Summed deviation per sample of batched grams ``(N, P, M, M)`` at one layer."""
        total = np.zeros(len(grams))
        for c in np.unique(classes):
            c = int(c)
            if (layer, c) not in self.mins:
                raise ClassMissingInReference(f"class {c} has no reference at layer {layer}")
            rows = classes == c
            dev = gram_deviation(grams[rows], self.mins[layer, c], self.maxs[layer, c])
            total[rows] = dev.reshape(rows.sum(), -1).sum(axis=1)
        return total


def fit_gram_reference(maps_per_layer: dict, labels, orders: int, holdout_maps_per_layer: dict | None = None, holdout_labels=None) -> GramReference:
    """Per-class elementwise min/max of the power Gram matrices of training maps.

    Each layer's expected deviation is the mean summed deviation of the
    held-out ID fold (scored against its own labels); without a fold it is 1.
    """
    if orders < 1:
        raise ValueError("need at least one Gram order")
    y = np.asarray(labels, dtype=np.int64)
    classes = sorted(int(c) for c in np.unique(y))
    ref = GramReference(sorted(maps_per_layer), classes, orders)
    for layer in ref.layers:
        grams = gram_matrices(maps_per_layer[layer], orders)
        if grams.ndim == 3:
            grams = grams[None]
        for c in classes:
            g = grams[y == c]
            if len(g) == 0:
                raise EmptyClass(f"class {c} has no maps at layer {layer}")
            ref.mins[layer, c] = g.min(axis=0)
            ref.maxs[layer, c] = g.max(axis=0)
        if holdout_maps_per_layer is None:
            ref.expected[layer] = 1.0
        else:
            hg = gram_matrices(holdout_maps_per_layer[layer], orders)
            dev = ref.layer_deviation(layer, hg, np.asarray(holdout_labels, dtype=np.int64))
            # a fold lying entirely inside the ranges would give E_l = 0
            ref.expected[layer] = max(float(dev.mean()), GRAM_EPS)
    return ref


def score_gram(maps_per_layer: dict, reference: GramReference, predicted_class):
    """Negative total deviation, each layer divided by its expected deviation."""
    single = np.ndim(predicted_class) == 0
    classes = np.atleast_1d(np.asarray(predicted_class, dtype=np.int64))
    total = np.zeros(len(classes))
    for layer in reference.layers:
        if layer not in maps_per_layer:
            raise MissingLayer(layer)
        grams = gram_matrices(maps_per_layer[layer], reference.orders)
        if grams.ndim == 3:
            grams = grams[None]
        total += reference.layer_deviation(layer, grams, classes) / reference.expected[layer]
    return float(-total[0]) if single else -total


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def _write_gaussian(g: GaussianStats, d: Path, stem: str) -> None:
    write_array_file(g.mean, d / f"{stem}.mean.npy")
    write_array_file(g.cov, d / f"{stem}.cov.npy")
    write_array_file(g.precision, d / f"{stem}.precision.npy")


def _read_gaussian(d: Path, stem: str, reg: float) -> GaussianStats:
    return GaussianStats(
        read_array_file(d / f"{stem}.mean.npy"),
        read_array_file(d / f"{stem}.cov.npy"),
        read_array_file(d / f"{stem}.precision.npy"),
        reg,
    )


def save_feature_stats(directory, class_stats: dict, background: dict | None = None,
                       selection: LayerSelection | None = None, gram: GramReference | None = None) -> None:
    """Write fitted statistics as array files plus an ``index.json``.

    ``class_stats`` and ``background`` map a layer index to fitted stats.
    """
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    index: dict = {"class_stats": {}, "background": {}}
    for layer, stats in sorted(class_stats.items()):
        index["class_stats"][str(layer)] = {
            "classes": stats.classes,
            "shared": stats.shared,
            "reg": [g.reg for g in stats.per_class],
        }
        for c, g in zip(stats.classes, stats.per_class):
            _write_gaussian(g, d, f"L{layer}.c{c}")
    for layer, g in sorted((background or {}).items()):
        index["background"][str(layer)] = {"reg": g.reg}
        _write_gaussian(g, d, f"L{layer}.bg")
    if selection is not None:
        index["mbm"] = {"layers": selection.layers, "normalizers": selection.normalizers}
    if gram is not None:
        index["gram"] = {
            "layers": gram.layers,
            "classes": gram.classes,
            "orders": gram.orders,
            "expected": [gram.expected[l] for l in gram.layers],
        }
        for (layer, c), arr in sorted(gram.mins.items()):
            write_array_file(arr, d / f"gram.L{layer}.c{c}.min.npy")
            write_array_file(gram.maxs[layer, c], d / f"gram.L{layer}.c{c}.max.npy")
    try:
        (d / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_feature_stats(directory: str | os.PathLike):
    """Inverse of :func:`save_feature_stats`: ``(class_stats, background, selection, gram)``."""
    d = Path(directory)
    try:
        index = json.loads((d / "index.json").read_text())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    except json.JSONDecodeError as exc:
        raise SchemaMismatch(str(exc)) from None
    class_stats = {}
    for key, meta in index["class_stats"].items():
        layer = int(key)
        per = [_read_gaussian(d, f"L{layer}.c{c}", r) for c, r in zip(meta["classes"], meta["reg"])]
        class_stats[layer] = ClassGaussianStats(list(meta["classes"]), per, meta["shared"])
    background = {int(k): _read_gaussian(d, f"L{k}.bg", v["reg"]) for k, v in index["background"].items()}
    selection = None
    if "mbm" in index:
        selection = LayerSelection(index["mbm"]["layers"], index["mbm"]["normalizers"])
    gram = None
    if "gram" in index:
        meta = index["gram"]
        gram = GramReference(meta["layers"], meta["classes"], meta["orders"])
        for layer, e in zip(meta["layers"], meta["expected"]):
            gram.expected[layer] = e
            for c in meta["classes"]:
                gram.mins[layer, c] = read_array_file(d / f"gram.L{layer}.c{c}.min.npy")
                gram.maxs[layer, c] = read_array_file(d / f"gram.L{layer}.c{c}.max.npy")
    return class_stats, background, selection, gram
