"""Feature and sample dimensionality (how exclusively a vector owns its direction)."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .network import ModelState, forward

DEFAULT_ZERO_TOL = 1e-3


@dataclass(frozen=True)
class DimensionalityReport:
    layer: int
    feature_dims: np.ndarray
    sample_dims: np.ndarray
    edges: np.ndarray
    counts: np.ndarray
    zero_fraction: float
    tol: float


def dimensionality(vectors) -> np.ndarray:
    """``||v_i||^2 / sum_j (v_i_hat . v_j)^2`` for every row ``v_i``; zero rows give 0.

    Written through the Gram ``G = V V^T`` as ``G_ii^2 / sum_j G_ij^2``.
    """
    V = np.asarray(vectors, dtype=np.float64)
    if V.ndim != 2 or V.size == 0:
        raise ValueError("need a non-empty 2-D array of vectors")
    G = V @ V.T
    diag = np.diag(G).copy()
    denom = np.einsum("ij,ij->i", G, G)
    out = np.zeros(V.shape[0])
    nz = diag > 0
    out[nz] = diag[nz] ** 2 / denom[nz]
    return out


def feature_dimensionality(W, axis: str = "columns") -> np.ndarray:
    """Dimensionality of each feature vector of a weight matrix.

    ``axis="columns"`` treats each input direction ``W[:, i]`` as a feature;
    ``axis="rows"`` uses the neuron weight vectors ``W[i, :]``.
    """
    W = np.asarray(W, dtype=np.float64)
    if axis == "columns":
        return dimensionality(W.T)
    if axis == "rows":
        return dimensionality(W)
    raise ValueError(f"axis must be 'columns' or 'rows', got {axis!r}")


def sample_dimensionality(features) -> np.ndarray:
    return dimensionality(features)


def dim_histogram(values, n_bins: int = 20) -> tuple[np.ndarray, np.ndarray]:
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    counts, edges = np.histogram(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0),
                                 bins=n_bins, range=(0.0, 1.0))
    return edges, counts


def zero_fraction(values, tol: float = DEFAULT_ZERO_TOL) -> float:
    if tol < 0:
        raise ValueError("tol must be non-negative")
    v = np.asarray(values, dtype=np.float64)
    return float(np.mean(v <= tol)) if v.size else 0.0


def layer_report(state: ModelState, X, layer: int, n_bins: int = 20, axis: str = "columns",
                 tol: float = DEFAULT_ZERO_TOL) -> DimensionalityReport:
    """Feature dims of ``W^layer`` and sample dims of ``relu(h^layer)`` over ``X`` (1-based layer)."""
    if not 1 <= layer <= state.config.depth - 1:
        raise ValueError(f"layer must be a hidden layer in [1, {state.config.depth - 1}]")
    fd = feature_dimensionality(state.weights[layer - 1], axis)
    _, trace = forward(state, X)
    sd = sample_dimensionality(trace.post[layer])
    edges, counts = dim_histogram(fd, n_bins)
    return DimensionalityReport(layer, fd, sd, edges, counts, zero_fraction(fd, tol), tol)


def write_dims_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "index", "kind", "D"])
        for r in reports:
            for i, v in enumerate(r.feature_dims):
                w.writerow([r.layer, i, "feature", repr(float(v))])
            for i, v in enumerate(r.sample_dims):
                w.writerow([r.layer, i, "sample", repr(float(v))])


def write_hist_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "bin_lo", "bin_hi", "count"])
        for r in reports:
            for lo, hi, c in zip(r.edges[:-1], r.edges[1:], r.counts):
                w.writerow([r.layer, repr(float(lo)), repr(float(hi)), int(c)])
