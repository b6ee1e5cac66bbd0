"""Front-end feature chain: mean normalization, context splicing, LDA.

Sequences are passed as a frame matrix ``X`` of shape ``(n_frames, d)`` plus
an optional ``lengths`` array giving consecutive utterance lengths (the
same convention as hmmlearn).  Without ``lengths`` the whole matrix is one
sequence.  The order is fixed: normalize, splice, then project.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_frames, check_lengths
from .linalg import ShapeError

__all__ = [
    "mean_normalize",
    "splice",
    "LdaTransform",
    "generalized_eigh",
    "lda_fit",
    "lda_apply",
    "MeanNormalizer",
    "Splicer",
    "LDA",
    "FeaturePipeline",
]


def _segments(n, lengths):
    lengths = check_lengths(lengths, n)
    ends = np.cumsum(lengths)
    return zip(ends - lengths, ends)


def mean_normalize(X, lengths=None) -> np.ndarray:
    """Subtract each utterance's per-dimension mean."""
    X = check_frames(X)
    if X.shape[0] == 0:
        raise ValueError("mean_normalize: empty sequence")
    out = np.empty_like(X)
    for a, b in _segments(X.shape[0], lengths):
        out[a:b] = X[a:b] - X[a:b].mean(axis=0)
    return out


def splice(X, context: int, lengths=None) -> np.ndarray:
    """Stack frames ``t-K .. t+K`` into one vector, replicating edge frames.

    Output frame ``t`` is ``concat(x(t-K), ..., x(t+K))`` with dimension
    ``d * (2K+1)``; positions outside an utterance take its first or last
    frame.
    """
    if context < 0:
        raise ValueError(f"splice: context must be >= 0, got {context}")
    X = check_frames(X)
    n, d = X.shape
    out = np.empty((n, d * (2 * context + 1)))
    offsets = np.arange(-context, context + 1)
    for a, b in _segments(n, lengths):
        idx = np.clip(np.arange(a, b)[:, None] + offsets[None, :], a, b - 1)
        out[a:b] = X[idx].reshape(b - a, -1)
    return out


@dataclass(frozen=True)
class LdaTransform:
    """Fitted LDA projection.

    ``matrix`` rows are generalized eigenvectors of ``(between, within)``
    ordered by descending ``eigenvalues`` and scaled so that
    ``w @ within @ w = 1``.
    """

    matrix: np.ndarray
    eigenvalues: np.ndarray
    class_means: np.ndarray
    within: np.ndarray
    between: np.ndarray
    regularization: float = 0.0

    @property
    def out_dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def in_dim(self) -> int:
        return self.matrix.shape[1]


def _sign_fix(vectors: np.ndarray) -> np.ndarray:
    """Flip columns so the first nonzero coordinate is positive."""
    vectors = vectors.copy()
    for k in range(vectors.shape[1]):
        nz = np.flatnonzero(np.abs(vectors[:, k]) > 1e-300)
        if nz.size and vectors[nz[0], k] < 0:
            vectors[:, k] = -vectors[:, k]
    return vectors


def generalized_eigh(between, within, regularize: bool = True):
    """Solve ``between @ w = lam * within @ w`` for symmetric inputs.

    Whitens with the Cholesky factor of ``within`` and diagonalizes the
    whitened ``between``.  When ``within`` is not numerically positive
    definite and ``regularize`` is set, ``eps * I`` with
    ``eps = 1e-6 * trace(within) / d`` is added first.  Returns
    ``(eigenvalues, vectors, eps)`` with eigenvalues descending and
    eigenvectors as columns.
    """
    between = np.asarray(between, dtype=np.float64)
    within = np.asarray(within, dtype=np.float64)
    d = within.shape[0]
    if between.shape != (d, d) or within.shape != (d, d):
        raise ShapeError(f"scatter matrices must both be {d}x{d}")
    eps = 0.0
    try:
        chol = scipy.linalg.cholesky(within, lower=True)
        if np.min(np.abs(np.diag(chol))) ** 2 < 1e-12 * np.trace(within) / d:
            raise np.linalg.LinAlgError("ill-conditioned")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        if not regularize:
            raise
        eps = 1e-6 * np.trace(within) / d
        try:
            chol = scipy.linalg.cholesky(within + eps * np.eye(d), lower=True)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            variances = np.diag(within)
            bad = int(np.argmin(variances))
            raise np.linalg.LinAlgError(
                f"within-class scatter is singular after regularization; "
                f"dimension {bad} has within-class variance {variances[bad]:.3g}"
            ) from None
    whitened = scipy.linalg.solve_triangular(chol, between, lower=True)
    whitened = scipy.linalg.solve_triangular(chol, whitened.T, lower=True)
    whitened = 0.5 * (whitened + whitened.T)
    lam, U = np.linalg.eigh(whitened)
    order = np.argsort(-lam, kind="stable")
    lam, U = lam[order], U[:, order]
    vectors = scipy.linalg.solve_triangular(chol.T, U, lower=False)
    return lam, _sign_fix(vectors), eps


def scatter_matrices(X, y):
    """Count-weighted within- and between-class scatter, normalized by ``n``."""
    X = check_frames(X)
    y = np.asarray(y)
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("LDA needs at least two classes")
    n, d = X.shape
    mu = X.mean(axis=0)
    means = np.empty((classes.size, d))
    Sw = np.zeros((d, d))
    Sb = np.zeros((d, d))
    for k, c in enumerate(classes):
        Xc = X[y == c]
        means[k] = Xc.mean(axis=0)
        D = Xc - means[k]
        Sw += D.T @ D
        diff = means[k] - mu
        Sb += Xc.shape[0] * np.outer(diff, diff)
    return Sw / n, Sb / n, means


def lda_fit(X, y, out_dim: int | None = None) -> LdaTransform:
    """Fit LDA on labeled vectors; ``out_dim`` defaults to the input dim."""
    Sw, Sb, means = scatter_matrices(X, y)
    d = Sw.shape[0]
    out_dim = d if out_dim is None else int(out_dim)
    if not 1 <= out_dim <= d:
        raise ValueError(f"out_dim must lie in [1, {d}], got {out_dim}")
    lam, V, eps = generalized_eigh(Sb, Sw)
    return LdaTransform(V[:, :out_dim].T.copy(), lam[:out_dim], means, Sw, Sb, eps)


def lda_apply(t: LdaTransform, X) -> np.ndarray:
    X = check_frames(X)
    if X.shape[1] != t.in_dim:
        raise ShapeError(f"lda_apply: transform expects dim {t.in_dim}, got {X.shape[1]}")
    return X @ t.matrix.T


class MeanNormalizer(TransformerMixin, BaseEstimator):
    """Stateless per-utterance mean subtraction."""

    def fit(self, X, y=None, lengths=None):
        return self

    def transform(self, X, lengths=None):
        return mean_normalize(X, lengths)


class Splicer(TransformerMixin, BaseEstimator):
    """Stateless context splicing with edge replication."""

    def __init__(self, context=0):
        self.context = context

    def fit(self, X, y=None, lengths=None):
        return self

    def transform(self, X, lengths=None):
        return splice(X, self.context, lengths)


class LDA(TransformerMixin, BaseEstimator):
    """Linear discriminant projection without dimensionality reduction by default.

    Parameters
    ----------
    n_components : int or None
        Rows kept; ``None`` keeps all (an invertible map).

    Attributes
    ----------
    transform_ : LdaTransform
        Fitted projection and class statistics.
    """

    def __init__(self, n_components=None):
        self.n_components = n_components

    def fit(self, X, y):
        self.transform_ = lda_fit(X, y, self.n_components)
        self.n_features_in_ = self.transform_.in_dim
        return self

    def transform(self, X):
        check_is_fitted(self, "transform_")
        return lda_apply(self.transform_, X)


class FeaturePipeline(TransformerMixin, BaseEstimator):
    """Mean normalization, ``+-context`` splicing and (optionally) full LDA.

    Parameters
    ----------
    context : int
        Splicing radius.
    use_lda : bool
        Fit and apply a full-dimension LDA on the spliced frames.
    """

    def __init__(self, context=1, use_lda=True):
        self.context = context
        self.use_lda = use_lda

    def _front(self, X, lengths):
        return splice(mean_normalize(X, lengths), self.context, lengths)

    def fit(self, X, y=None, lengths=None):
        X = check_frames(X)
        self.n_features_in_ = X.shape[1]
        Z = self._front(X, lengths)
        if self.use_lda:
            if y is None:
                raise ValueError("FeaturePipeline with use_lda=True needs labels")
            self.lda_ = lda_fit(Z, y)
        else:
            self.lda_ = None
        self.n_features_out_ = Z.shape[1]
        return self

    def transform(self, X, lengths=None):
        check_is_fitted(self, "n_features_out_")
        X = check_frames(X)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        Z = self._front(X, lengths)
        return Z if self.lda_ is None else lda_apply(self.lda_, Z)

    def fit_transform(self, X, y=None, lengths=None):
        return self.fit(X, y, lengths).transform(X, lengths)
