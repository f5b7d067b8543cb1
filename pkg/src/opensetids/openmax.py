"""
Extreme-value calibration of classifier activations.

Per known class a Weibull model is fitted to the largest Euclidean distances
between its training activation vectors and their mean. At test time the
logits are attenuated according to how far the vector sits in each class's
tail, and the mass removed is collected into an extra "unknown" score at
index 0.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import CalibrationMissing, DegenerateTail, TooFewSamples

SHAPE_CAP = 1e4
TAIL_FRACTION = 0.05
TAIL_FLOOR = 10
DEFAULT_ATTENUATION = 0.5


@dataclass(frozen=True)
class WeibullModel:
    shift: float
    shape: float
    scale: float

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise ValueError(f"Weibull shape and scale must be positive: {self}")

    def cdf(self, d):
        return weibull_cdf(d, self)


@dataclass(frozen=True)
class ClassCalibration:
    index: int
    mean_vector: np.ndarray
    weibull: WeibullModel
    tail_size: int


@dataclass(frozen=True)
class OpenMaxConfig:
    attenuation: float = DEFAULT_ATTENUATION
    tail_fraction: float = TAIL_FRACTION
    tail_floor: int = TAIL_FLOOR

    def __post_init__(self):
        if not 0.0 <= self.attenuation <= 1.0:
            raise ValueError("attenuation rate must lie in [0, 1]")
        if not 0.0 < self.tail_fraction <= 1.0:
            raise ValueError("tail fraction must lie in (0, 1]")
        if self.tail_floor < 1:
            raise ValueError("tail floor must be at least 1")


def _shape_equation(k, log_x, x_scaled):
    """Profile MLE equation for the shape and its derivative (increasing in k)."""
    xk = x_scaled ** k
    s0 = xk.sum()
    s1 = (xk * log_x).sum()
    s2 = (xk * log_x * log_x).sum()
    f = s1 / s0 - 1.0 / k - log_x.mean()
    df = s2 / s0 - (s1 / s0) ** 2 + 1.0 / (k * k)
    return f, df


def fit_weibull_tail(tail: Sequence[float], shift: float = 0.0,
                     tol: float = 1e-8, max_iter: int = 200) -> WeibullModel:
    """Maximum-likelihood two-parameter Weibull fit to ``tail - shift``.

    The shape solves the profile likelihood equation by safeguarded Newton
    iteration; the scale then follows in closed form. Samples at or below the
    shift carry no likelihood and are dropped.
    """
    x = np.asarray(tail, dtype=np.float64).ravel()
    if x.size < 2:
        raise TooFewSamples(f"Weibull fit needs at least 2 samples, got {x.size}")
    x = x - shift
    if np.any(x < 0):
        raise ValueError("tail samples must not lie below the shift")
    positive = x[x > 0]
    if positive.size < 2 or positive.max() == positive.min():
        c = float(positive.max()) if positive.size else 0.0
        warnings.warn(f"degenerate Weibull tail (all distances {c:g}); shape capped",
                      DegenerateTail, stacklevel=2)
        return WeibullModel(shift, SHAPE_CAP, max(c, np.finfo(float).tiny))

    top = positive.max()
    x_scaled = positive / top
    log_x = np.log(x_scaled)
    # Menon's moment estimate as a starting point
    k = min(max(np.pi / np.sqrt(6.0) / log_x.std(), 1e-3), SHAPE_CAP)
    lo, hi = 0.0, SHAPE_CAP
    for _ in range(max_iter):
        f, df = _shape_equation(k, log_x, x_scaled)
        if f > 0:
            hi = k
        else:
            lo = k
        step = f / df
        k_new = k - step
        if not lo < k_new < hi:
            k_new = 0.5 * (lo + hi)
        if abs(k_new - k) <= tol * max(1.0, k):
            k = k_new
            break
        k = k_new
    k = min(k, SHAPE_CAP)
    scale = top * np.mean(x_scaled ** k) ** (1.0 / k)
    return WeibullModel(float(shift), float(k), float(scale))


def weibull_cdf(d, model: WeibullModel):
    d = np.asarray(d, dtype=np.float64)
    z = np.maximum(0.0, d - model.shift) / model.scale
    out = -np.expm1(-(z ** model.shape))
    return float(out) if out.ndim == 0 else out


def tail_length(n_samples: int, config: OpenMaxConfig = OpenMaxConfig()) -> int:
    return min(n_samples, max(math.ceil(config.tail_fraction * n_samples), config.tail_floor))


def fit_per_class(activations: Mapping[int, np.ndarray] | Sequence[np.ndarray],
                  config: OpenMaxConfig = OpenMaxConfig()) -> list[ClassCalibration]:
    """Mean activation vector and tail Weibull for each class.

    ``activations`` maps a 1-based class index to an (n_j, N) array; a plain
    sequence is indexed 1..N in order.
    """
    if not isinstance(activations, Mapping):
        activations = {j + 1: av for j, av in enumerate(activations)}
    calibrations = []
    for j in sorted(activations):
        av = np.asarray(activations[j], dtype=np.float64)
        if av.ndim != 2 or av.shape[0] < 2:
            raise TooFewSamples(f"class {j} needs at least 2 activation vectors")
        mu = av.mean(axis=0)
        dist = np.sort(np.linalg.norm(av - mu, axis=1))[::-1]
        eta = tail_length(av.shape[0], config)
        calibrations.append(ClassCalibration(j, mu, fit_weibull_tail(dist[:eta]), eta))
    return calibrations


def recalibrate_batch(V: np.ndarray, calibrations: Sequence[ClassCalibration],
                      config: OpenMaxConfig = OpenMaxConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized recalibration of an (n, N) logit array.

    Returns the (n, N+1) recalibrated scores (column 0 = unknown) and the
    predicted indices in [0, N].
    """
    V = np.atleast_2d(np.asarray(V, dtype=np.float64))
    n_classes = V.shape[1]
    by_index = {c.index: c for c in calibrations}
    missing = set(range(1, n_classes + 1)) - set(by_index)
    if missing:
        raise CalibrationMissing(f"no calibration for class index(es) {sorted(missing)}")

    omega = np.empty_like(V)
    for i in range(1, n_classes + 1):
        cal = by_index[i]
        omega[:, i - 1] = weibull_cdf(np.linalg.norm(V - cal.mean_vector, axis=1), cal.weibull)

    ranks = np.empty_like(V, dtype=np.int64)
    order = np.argsort(-V, axis=1, kind="stable")
    np.put_along_axis(ranks, order, np.arange(1, n_classes + 1)[None, :].repeat(len(V), 0), axis=1)
    factor = (n_classes - ranks - 1) / n_classes

    vhat = np.empty((V.shape[0], n_classes + 1))
    vhat[:, 1:] = V * (1.0 - omega * factor * config.attenuation)
    vhat[:, 0] = (V - vhat[:, 1:]).sum(axis=1)
    return vhat, np.argmax(vhat, axis=1)


def recalibrate(v, calibrations: Sequence[ClassCalibration],
                config: OpenMaxConfig = OpenMaxConfig()) -> tuple[np.ndarray, int]:
    vhat, pred = recalibrate_batch(np.asarray(v, dtype=np.float64)[None, :], calibrations, config)
    return vhat[0], int(pred[0])
