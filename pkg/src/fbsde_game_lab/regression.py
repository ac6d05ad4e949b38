"""Cross-sectional least squares used for conditional expectations."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np

from .errors import NumericalFailure

MAX_CONDITION = 1e10


def varying_columns(x: np.ndarray) -> np.ndarray:
    """Drop columns that are constant across rows."""
    std = x.std(axis=0)
    return x[:, std > 1e-12 * (1.0 + np.abs(x.mean(axis=0)))]


def independent_columns(x: np.ndarray, tol: float = 1e-7) -> np.ndarray:
    """Greedy subset of non-constant columns that are linearly independent (with the intercept)."""
    x = varying_columns(np.asarray(x, dtype=float))
    n = x.shape[0]
    basis = [np.full(n, 1.0 / np.sqrt(n))]
    keep = []
    for c in range(x.shape[1]):
        v = x[:, c] - x[:, c].mean()
        v = v / np.linalg.norm(v)
        for q in basis:
            v = v - (q @ v) * q
        norm = np.linalg.norm(v)
        if norm > tol:
            basis.append(v / norm)
            keep.append(c)
    return x[:, keep]


def poly_features(x: np.ndarray, degree: int = 2) -> np.ndarray:
    """All monomials of the non-constant columns of ``x`` up to ``degree``, constant first."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    x = varying_columns(x)
    cols = [np.ones(x.shape[0])]
    for d in range(1, degree + 1):
        for idx in combinations_with_replacement(range(x.shape[1]), d):
            cols.append(np.prod(x[:, list(idx)], axis=1))
    return np.column_stack(cols)


@dataclass
class Projection:
    """Least-squares projection onto the span of some features.

    Columns that are constant across the sample are folded into the
    intercept; the rest are standardised before solving.  Targets may be
    ``(n,)`` or ``(n, m)``; ``coef``, ``r2`` and ``resid_std`` follow suit.
    """

    keep: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    coef: np.ndarray
    condition: float
    r2: float
    resid_std: float
    Q: np.ndarray = field(repr=False)
    R: np.ndarray = field(repr=False)

    def design(self, X: np.ndarray) -> np.ndarray:
        Xs = (X[:, self.keep] - self.center) / self.scale
        return np.column_stack([np.ones(X.shape[0]), Xs])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.design(X) @ self.coef

    def project_sample(self, y: np.ndarray) -> np.ndarray:
        """Fitted values of another target on the sample the projection was built from."""
        return self.Q @ (self.Q.T @ y)

    def fitted_stderr(self, X: np.ndarray) -> np.ndarray:
        """Standard error of the fitted value at each row."""
        A = self.design(X)
        W = np.linalg.solve(self.R.T, A.T)
        lev = np.sqrt(np.sum(W * W, axis=0))
        return np.multiply.outer(lev, self.resid_std)

    @property
    def n_features(self) -> int:
        return len(self.coef)


def fit_projection(X: np.ndarray, y: np.ndarray) -> Projection:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    n = X.shape[0]
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    keep = std > 1e-12 * (1.0 + np.abs(mean))
    center, scale = mean[keep], std[keep]
    A = np.column_stack([np.ones(n), (X[:, keep] - center) / scale])
    Q, R = np.linalg.qr(A)
    sv = np.linalg.svd(R, compute_uv=False)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf
    if cond > MAX_CONDITION:
        raise NumericalFailure(
            "regression design is rank deficient", condition=cond, n_features=A.shape[1]
        )
    coef = np.linalg.solve(R, Q.T @ y)
    resid = y - A @ coef
    dof = max(n - A.shape[1], 1)
    rss = np.sum(resid**2, axis=0)
    resid_std = np.sqrt(rss / dof)
    tss = np.sum((y - y.mean(axis=0)) ** 2, axis=0)
    r2 = np.where(tss > 0, 1.0 - rss / np.where(tss > 0, tss, 1.0), 1.0)
    if y.ndim == 1:
        resid_std, r2 = float(resid_std), float(r2)
    return Projection(keep, center, scale, coef, cond, r2, resid_std, Q, R)


def project(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Fitted values of ``y`` on the span of ``X`` (intercept always included)."""
    return fit_projection(X, y).predict(X)
