"""Class-separation measurements on labeled vector sets."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from ._validation import check_frames

__all__ = [
    "fisher_ratio",
    "bhattacharyya_table",
    "SeparationReport",
    "separation_report",
    "tap_layer",
    "pca_project",
    "scatter_csv",
]


def _class_stats(X, y):
    X = check_frames(X)
    y = np.asarray(y)
    if y.shape != (X.shape[0],):
        raise ValueError(f"expected {X.shape[0]} labels, got shape {y.shape}")
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        raise ValueError("separation needs at least two classes")
    if counts.min() < 2:
        raise ValueError(f"class {classes[np.argmin(counts)]} has fewer than two points")
    means = np.stack([X[y == c].mean(axis=0) for c in classes])
    covs = np.stack([np.cov(X[y == c], rowvar=False, bias=True).reshape(X.shape[1], X.shape[1])
                     for c in classes])
    return classes, means, covs


def fisher_ratio(X, y) -> float:
    """``trace(pinv(S_w) @ S_b)`` with every class weighted equally.

    ``S_w`` averages the per-class covariances; ``S_b`` is the covariance of
    the class means around their average.
    """
    _, means, covs = _class_stats(X, y)
    Sw = covs.mean(axis=0)
    D = means - means.mean(axis=0)
    Sb = D.T @ D / means.shape[0]
    return float(max(np.trace(np.linalg.pinv(Sw, hermitian=True) @ Sb), 0.0))


def bhattacharyya_table(X, y, ridge=1e-9):
    """Symmetric table of Gaussian Bhattacharyya distances between classes."""
    classes, means, covs = _class_stats(X, y)
    d = means.shape[1]
    scale = max(np.trace(covs.mean(axis=0)) / d, 1e-300)
    covs = covs + ridge * scale * np.eye(d)
    logdets = np.array([np.linalg.slogdet(c)[1] for c in covs])
    k = classes.size
    table = np.zeros((k, k))
    for a in range(k):
        for b in range(a + 1, k):
            S = 0.5 * (covs[a] + covs[b])
            diff = means[a] - means[b]
            maha = diff @ np.linalg.solve(S, diff)
            val = maha / 8 + 0.5 * (np.linalg.slogdet(S)[1] - 0.5 * (logdets[a] + logdets[b]))
            table[a, b] = table[b, a] = val
    return classes, table


@dataclass
class SeparationReport:
    fisher_ratio: float
    classes: list
    pair_distances: list
    n_points: int

    def to_json(self) -> str:
        # json writes floats with repr, which round-trips exactly
        return json.dumps({
            "fisher_ratio": self.fisher_ratio,
            "classes": self.classes,
            "pair_distances": self.pair_distances,
            "n_points": self.n_points,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SeparationReport":
        d = json.loads(text)
        return cls(d["fisher_ratio"], d["classes"], d["pair_distances"], d["n_points"])


def separation_report(X, y) -> SeparationReport:
    classes, table = bhattacharyya_table(X, y)
    return SeparationReport(fisher_ratio(X, y), [int(c) for c in classes],
                            table.tolist(), int(np.asarray(X).shape[0]))


def tap_layer(model, dataset, index: int):
    """Activations after layer ``index`` of the acoustic stack.

    Index 0 is the per-frame feature vector ``x(t)`` fed to the network,
    index ``i`` the output of the ``i``-th layer (1 is the first MoE for
    MixNet).  Returns ``(vectors, broad_labels, subclass_labels)``.
    """
    from .training import model_inputs

    n_layers = len(model.stack.layers)
    if not 0 <= index <= n_layers:
        raise IndexError(f"layer index {index} outside [0, {n_layers}]")
    X, gate, x = model_inputs(model, dataset)
    if index == 0:
        out = X if x is None else x
    else:
        h = X
        for layer in model.stack.layers[:index]:
            h, _ = layer.forward(h, gate if layer.needs_gate else None)
        out = h
    return out, dataset.broad, dataset.subclass


def pca_project(X, dims: int = 2):
    """Project onto the top ``dims`` principal components.

    Returns ``(points, explained_variance_ratio, components)`` with
    components as rows, each signed so its first nonzero coordinate is
    positive.  Constant input gives zero points and zero explained variance.
    """
    X = check_frames(X)
    n, d = X.shape
    if n < dims:
        raise ValueError(f"need at least {dims} points, got {n}")
    if dims > d:
        raise ValueError(f"cannot keep {dims} components of {d}-dim data")
    C = X - X.mean(axis=0)
    cov = C.T @ C / n
    lam, V = np.linalg.eigh(0.5 * (cov + cov.T))
    order = np.argsort(-lam, kind="stable")
    lam, V = np.clip(lam[order], 0.0, None), V[:, order]
    total = lam.sum()
    if total <= 0:
        return np.zeros((n, dims)), np.zeros(dims), np.eye(d)[:dims]
    comps = V[:, :dims].T.copy()
    for k in range(dims):
        nz = np.flatnonzero(np.abs(comps[k]) > 1e-12)
        if nz.size and comps[k, nz[0]] < 0:
            comps[k] = -comps[k]
    return C @ comps.T, lam[:dims] / total, comps


def scatter_csv(points, broad, subclass) -> str:
    """CSV with header ``x,y,broad_label,subclass_label``."""
    points = np.asarray(points)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "broad_label", "subclass_label"])
    for (px, py), b, s in zip(points[:, :2], broad, subclass):
        w.writerow([repr(float(px)), repr(float(py)), int(b), int(s)])
    return buf.getvalue()
