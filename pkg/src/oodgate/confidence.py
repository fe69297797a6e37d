"""Confidence-based OOD scores computed from a classifier's output layer.

Every score is oriented so that larger values mean "more in-distribution";
entropies and mutual information are therefore negated. Functions accept a
single logit vector ``(K,)`` or a batch ``(N, K)`` and return a float or an
``(N,)`` array.
"""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np
from scipy.special import entr, logsumexp

from .engine.model import forward, input_gradient, softmax
from .errors import EmptySamples, InvariantViolation, MissingFitStatistics

# hyperparameter grids for the tuned methods
ODIN_TEMPERATURES = (1.0, 10.0, 100.0, 1000.0)
ODIN_EPSILONS = (0.0, 5e-4, 1e-3, 2e-3, 5e-3)
REACT_PERCENTILES = (80, 85, 90, 95, 99)
DICE_KEEP = tuple(round(0.1 * i, 1) for i in range(1, 10))


@dataclass
class LogitRecord:
    """Output-layer quantities for one sample or a batch.

    ``features`` is the input of the final dense layer, ``weights``/``bias``
    its parameters, so ``logits == features @ weights.T + bias``.
    """

    logits: np.ndarray
    features: np.ndarray | None = None
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.shape[-1] < 2:
            raise InvariantViolation("need at least two classes")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            self.bias = np.zeros(self.weights.shape[0]) if self.bias is None else np.asarray(self.bias, dtype=np.float64)

    @property
    def softmax(self) -> np.ndarray:
        return softmax(self.logits)

    def relogit(self, features: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
        w = self.weights if weights is None else weights
        return features @ w.T + self.bias


def _logits(r) -> np.ndarray:
    return r.logits if isinstance(r, LogitRecord) else np.asarray(r, dtype=np.float64)


def _unwrap(x):
    return float(x) if np.ndim(x) == 0 else x


def entropy(p: np.ndarray) -> np.ndarray:
    """Shannon entropy in nats along the last axis, with 0 ln 0 = 0."""
    return entr(np.asarray(p, dtype=np.float64)).sum(axis=-1)


def score_mcp(r) -> float | np.ndarray:
    return _unwrap(softmax(_logits(r)).max(axis=-1))


def score_shannon_entropy(r) -> float | np.ndarray:
    return _unwrap(-entropy(softmax(_logits(r))))


def score_max_logit(r) -> float | np.ndarray:
    return _unwrap(_logits(r).max(axis=-1))


def score_energy(r, temperature: float = 1.0) -> float | np.ndarray:
    return _unwrap(temperature * logsumexp(_logits(r) / temperature, axis=-1))


def score_mcdp(samples, variant: str) -> float | np.ndarray:
    """Score from Monte-Carlo dropout softmaxes shaped ``(T, K)`` or ``(N, T, K)``.

    ``mcp`` is the top class of the mean prediction, ``pe`` its negated
    entropy, ``mi`` the negated mutual information (expected entropy minus
    entropy of the mean, sign flipped).
    """
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim < 2 or s.shape[-2] == 0:
        raise EmptySamples("need at least one Monte-Carlo sample")
    mean = s.mean(axis=-2)
    if variant == "mcp":
        out = mean.max(axis=-1)
    elif variant == "pe":
        out = -entropy(mean)
    elif variant == "mi":
        out = -(entropy(mean) - entropy(s).mean(axis=-1))
    else:
        raise ValueError(f"unknown MC-dropout variant {variant!r}")
    return _unwrap(out)


def score_de_mcp(member_softmaxes) -> float | np.ndarray:
    """Top class probability of the ensemble-averaged softmax; members on axis -2."""
    s = np.asarray(member_softmaxes, dtype=np.float64)
    if s.ndim < 2 or s.shape[-2] == 0:
        raise EmptySamples("need at least one ensemble member")
    return _unwrap(s.mean(axis=-2).max(axis=-1))


def score_gradnorm(r: LogitRecord) -> float | np.ndarray:
    """L1 norm of d CE(softmax, uniform) / d W for the last dense layer.

    The gradient is the outer product ``(softmax - 1/K) x features``, whose L1
    norm factorises into the product of the two vectors' L1 norms.
    """
    if r.features is None:
        raise MissingFitStatistics("GradNorm needs penultimate features")
    p = r.softmax
    k = p.shape[-1]
    return _unwrap(np.abs(p - 1.0 / k).sum(axis=-1) * np.abs(r.features).sum(axis=-1))


def odin_perturb(spec, params, x, temperature: float, epsilon: float) -> np.ndarray:
    """Input moved by ``epsilon`` along the sign of the gradient of the log top softmax."""
    g = input_gradient(spec, params, x, "log_max_softmax", temperature=temperature)
    # x' = x - eps * sign(-grad)
    return np.asarray(x, dtype=np.float64) - epsilon * np.sign(-g)


def score_odin(spec, params, x, temperature: float = 1000.0, epsilon: float = 1e-3) -> float | np.ndarray:
    if temperature <= 0:
        raise InvariantViolation("ODIN temperature must be positive")
    if epsilon < 0:
        raise InvariantViolation("ODIN epsilon must be non-negative")
    x2 = odin_perturb(spec, params, x, temperature, epsilon) if epsilon > 0 else x
    logits = forward(spec, params, x2).logits
    return _unwrap(softmax(logits, temperature).max(axis=-1))


def odin_grid(spec, params, x, temperatures=ODIN_TEMPERATURES, epsilons=ODIN_EPSILONS) -> np.ndarray:
    """ODIN scores for every (temperature, epsilon) pair: shape ``(N, nT, nE)``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty((len(x), len(temperatures), len(epsilons)))
    for a, t in enumerate(temperatures):
        g = input_gradient(spec, params, x, "log_max_softmax", temperature=t)
        for b, e in enumerate(epsilons):
            x2 = x - e * np.sign(-g) if e > 0 else x
            out[:, a, b] = softmax(forward(spec, params, x2).logits, t).max(axis=-1)
    return out


def _base_score(logits: np.ndarray, base: str):
    if base == "energy":
        return score_energy(logits)
    if base == "mls":
        return score_max_logit(logits)
    raise ValueError(f"unknown base score {base!r}")


def score_react(r: LogitRecord, clamp: float, base: str = "energy") -> float | np.ndarray:
    """Base score after clipping penultimate activations at ``clamp``."""
    if r.features is None or r.weights is None:
        raise MissingFitStatistics("ReAct needs penultimate features and last-layer weights")
    return _base_score(r.relogit(np.minimum(r.features, clamp)), base)


def react_threshold(train_features: np.ndarray, percentile: float) -> float:
    """Clip value taken as a percentile of all in-distribution penultimate activations."""
    return float(np.percentile(np.asarray(train_features, dtype=np.float64), percentile))


def dice_mask(weights: np.ndarray, mean_features: np.ndarray, keep: float) -> np.ndarray:
    """Keep the ``floor(keep * M)`` largest contributions ``mean_feature_i * W[y, i]`` in each row."""
    w = np.asarray(weights, dtype=np.float64)
    contrib = w * np.asarray(mean_features, dtype=np.float64)[None, :]
    m = w.shape[1]
    k = int(np.floor(keep * m + 1e-9))
    mask = np.zeros(w.shape, dtype=bool)
    if k > 0:
        # stable sort on the negated values: ties keep the lower index
        order = np.argsort(-contrib, axis=1, kind="stable")[:, :k]
        np.put_along_axis(mask, order, True, axis=1)
    return mask


def score_dice(r: LogitRecord, keep: float, mean_features: np.ndarray | None, base: str = "energy") -> float | np.ndarray:
    if mean_features is None:
        raise MissingFitStatistics("DICE needs the mean training penultimate features")
    if r.features is None or r.weights is None:
        raise MissingFitStatistics("DICE needs penultimate features and last-layer weights")
    if not 0.0 <= keep <= 1.0:
        raise ValueError("keep fraction must lie in [0, 1]")
    sparse = np.where(dice_mask(r.weights, mean_features, keep), r.weights, 0.0)
    return _base_score(r.relogit(r.features, sparse), base)

