"""Discriminant information: closed forms, ridge dual, channel influence.

The discriminant information (DI) of a D x N feature matrix X against a
K x N one-hot label matrix Y is

    DI = trace((Kbar + rho*I)^-1 * Kb)

where Kbar = Xc Xc^T is the centered feature second moment ("noise") and
Kb = (Xc Yc^T)(Xc Yc^T)^T is the label-aligned feature energy ("signal"),
with Xc, Yc the row-mean-centered matrices.  DI equals the maximum feature
signal-to-noise ratio over linear subspaces, and complements the minimum
ridge least-square error of the closed-form ridge regressor:

    DI + MRLSE = ||Yc||_F^2

Per-channel importance is the drop in DI when a channel is removed; its
infinitesimal version has the closed form

    phi_j = 2 * rho * ((Kbar + rho*I)^-1 Kb (Kbar + rho*I)^-1)_jj

computed for all channels with two symmetric positive-definite solves.  The
regularized inverse is used deliberately: differentiating the masked trace
(with the ridge term outside the mask) produces (Kbar + rho*I)^-1, and the
finite-difference tests confirm that reading.

Everything here works on the D x D primal formulation; centering is done by
subtracting row means, never by materializing an N x N matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DegenerateInput, NumericalError

DEFAULT_RHO = 0.1


@dataclass
class FeatureMatrix:
    """D x N matrix of per-channel features (rows = channels)."""

    values: np.ndarray
    layer: str = ""
    stage: str = "post-activation"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DegenerateInput("feature matrix must be 2-d (channels x samples)")
        d, n = self.values.shape
        if d < 1:
            raise DegenerateInput("feature matrix needs at least one channel")
        if n < 2:
            raise DegenerateInput("centering needs at least 2 samples")


@dataclass
class LabelMatrix:
    """K x N one-hot class indicator matrix."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        v = self.values
        if v.ndim != 2:
            raise DegenerateInput("label matrix must be 2-d (classes x samples)")
        unit = (v == 1.0).sum(axis=0)
        zero = (v == 0.0).sum(axis=0)
        if not np.all(unit == 1) or not np.all(zero == v.shape[0] - 1):
            raise DegenerateInput("label matrix columns must be one-hot")

    @classmethod
    def from_labels(cls, labels: np.ndarray, num_classes: int) -> "LabelMatrix":
        labels = np.asarray(labels, dtype=np.int64)
        v = np.zeros((num_classes, len(labels)))
        v[labels, np.arange(len(labels))] = 1.0
        return cls(values=v)


@dataclass
class DiGrams:
    """Centered signal/noise gram matrices plus the ridge scalar."""

    kbar: np.ndarray
    kb: np.ndarray
    rho: float

    def __post_init__(self):
        self.kbar = np.asarray(self.kbar, dtype=np.float64)
        self.kb = np.asarray(self.kb, dtype=np.float64)
        if self.rho <= 0:
            raise DegenerateInput("rho must be positive")


@dataclass
class InfluenceVector:
    """Per-channel importance scores for one layer."""

    scores: np.ndarray
    method: str = "derivative"

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(self.scores)):
            raise NumericalError("influence scores are not finite")


@dataclass
class RidgeFit:
    """Closed-form ridge regressor and its literal objective value."""

    mrlse: float
    weights: np.ndarray
    bias: np.ndarray
    label_energy: float = field(default=0.0)


def _as_matrix(x) -> np.ndarray:
    if isinstance(x, FeatureMatrix):
        return x.values
    if isinstance(x, LabelMatrix):
        return x.values
    return np.asarray(x, dtype=np.float64)


def _center_rows(m: np.ndarray) -> np.ndarray:
    return m - m.mean(axis=1, keepdims=True)


def compute_grams(x, y, rho: float = DEFAULT_RHO) -> DiGrams:
    """Centered noise and signal gram matrices for a feature/label pair."""
    X = _as_matrix(x)
    Y = _as_matrix(y)
    if X.ndim != 2 or Y.ndim != 2:
        raise DegenerateInput("features and labels must be 2-d matrices")
    if X.shape[1] != Y.shape[1]:
        raise DegenerateInput(
            f"feature columns ({X.shape[1]}) != label columns ({Y.shape[1]})"
        )
    if X.shape[1] < 2:
        raise DegenerateInput("centering needs at least 2 samples")
    Xc = _center_rows(X)
    Yc = _center_rows(Y)
    cross = Xc @ Yc.T
    return DiGrams(kbar=Xc @ Xc.T, kb=cross @ cross.T, rho=float(rho))


def _spd_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        factor = scipy.linalg.cho_factor(a, lower=True, check_finite=False)
        return scipy.linalg.cho_solve(factor, b, check_finite=False)
    except (scipy.linalg.LinAlgError, ValueError) as e:
        raise NumericalError(f"SPD solve failed: {e}") from e


def di(g: DiGrams) -> float:
    """trace((kbar + rho*I)^-1 kb) via a symmetric positive-definite solve."""
    d = g.kbar.shape[0]
    a = g.kbar + g.rho * np.eye(d)
    return float(np.trace(_spd_solve(a, g.kb)))


def mrlse_oracle(x, y, rho: float = DEFAULT_RHO) -> RidgeFit:
    """Minimum ridge least-square error, evaluated literally.

    Builds the closed-form optimum (weights and bias) and plugs it into the
    regression objective term by term.  This path shares no trace algebra
    with di(), which is what makes the DI + MRLSE identity a real check.
    """
    X = _as_matrix(x)
    Y = _as_matrix(y)
    g = compute_grams(X, Y, rho)
    d, n = X.shape
    Xc = _center_rows(X)
    Yc = _center_rows(Y)
    a = g.kbar + rho * np.eye(d)
    f = _spd_solve(a, Xc @ Yc.T)
    bias = (Y.sum(axis=1) - f.T @ X.sum(axis=1)) / n
    residual = f.T @ X + bias[:, None] - Y
    mrlse = float(np.sum(residual**2) + rho * np.sum(f**2))
    return RidgeFit(
        mrlse=mrlse,
        weights=f,
        bias=bias,
        label_energy=float(np.sum(Yc**2)),
    )


def influence_exact(x, y, rho: float, j: int) -> float:
    """DI drop from removing channel j, via the (D-1)-row submatrix.

    Dropping the row is algebraically identical to masking the channel with
    a zeroed diagonal indicator; the submatrix form keeps the solve small.
    """
    X = _as_matrix(x)
    d = X.shape[0]
    if not 0 <= j < d:
        raise DegenerateInput(f"channel index {j} out of range for D={d}")
    full = di(compute_grams(X, y, rho))
    if d == 1:
        return full
    rest = np.delete(X, j, axis=0)
    return full - di(compute_grams(rest, y, rho))


def influence_derivative(g: DiGrams) -> InfluenceVector:
    """All per-channel derivative scores from two SPD solves.

    scores_j = 2 * rho * (A^-1 kb A^-1)_jj with A = kbar + rho*I.
    """
    d = g.kbar.shape[0]
    a = g.kbar + g.rho * np.eye(d)
    w = _spd_solve(a, g.kb)
    s = _spd_solve(a, w.T)
    return InfluenceVector(scores=2.0 * g.rho * np.diag(s).copy(), method="derivative")


def influence_exact_all(x, y, rho: float = DEFAULT_RHO) -> InfluenceVector:
    """Exact influence for every channel (D+1 solves; used at desk scale)."""
    X = _as_matrix(x)
    scores = np.array([influence_exact(X, y, rho, j) for j in range(X.shape[0])])
    return InfluenceVector(scores=scores, method="exact-difference")
