"""Conjugate-kernel spectra, eigen-utilities and the cumulative power distribution.

Eigenvectors are those of the finite Gram matrix over an evaluation set and
inner products are plain Euclidean sums over that set.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .network import ModelState, feature_map, readout_features
from .numerics import Spectrum, sym_eig

DEFAULT_EPS = 0.95


class DegenerateProfile(ValueError):
    """The function has no component in the span of the selected eigenvectors."""


@dataclass(frozen=True)
class UtilityProfile:
    utilities: np.ndarray
    cumulative: np.ndarray
    eps: float
    strength: int
    captured_fraction: float  # sum of raw projections over ||f||^2


@dataclass(frozen=True)
class CumulativePower:
    eigenvalues: np.ndarray
    coefficients: np.ndarray
    curve: np.ndarray


def ck_matrix(state: ModelState, X, layer: int, activated: bool = False) -> np.ndarray:
    phi = feature_map(state, X, layer, activated)
    K = phi @ phi.T
    return 0.5 * (K + K.T)


def readout_ck(state: ModelState, X) -> np.ndarray:
    """Gram of the representation the readout consumes (the last-layer CK)."""
    phi = readout_features(state, X)
    K = phi @ phi.T
    return 0.5 * (K + K.T)


def _order_ties(eigenvalues: np.ndarray, proj: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    # within runs of equal eigenvalues, larger |projection| first, then index
    scale = max(float(np.max(np.abs(eigenvalues))) if eigenvalues.size else 0.0, 1e-300)
    n = len(eigenvalues)
    order = np.arange(n)
    start = 0
    while start < n:
        stop = start + 1
        while stop < n and abs(eigenvalues[stop] - eigenvalues[start]) <= rtol * scale:
            stop += 1
        if stop - start > 1:
            idx = np.arange(start, stop)
            order[start:stop] = idx[np.lexsort((idx, -np.abs(proj[idx])))]
        start = stop
    return order


def _profile(spectrum: Spectrum, values, n_features: int | None, eps: float) -> UtilityProfile:
    f = np.asarray(values, dtype=np.float64).ravel()
    if f.shape[0] != spectrum.eigenvectors.shape[0]:
        raise ValueError("function values and Gram are sampled on different point sets")
    proj = spectrum.eigenvectors.T @ f
    proj = proj[_order_ties(spectrum.eigenvalues, proj)]
    n = len(proj) if n_features is None else min(int(n_features), len(proj))
    q = proj[:n] ** 2
    cum = np.cumsum(q)
    total = cum[-1] if n else 0.0
    ff = float(f @ f)
    # projections at rounding level of ||f|| count as orthogonal
    if not total > _ORTHO_RTOL * ff:
        raise DegenerateProfile("function is orthogonal to the selected eigenvectors")
    utilities = q / total
    cumulative = cum / total
    return UtilityProfile(utilities, cumulative, eps, _first_above(cumulative, eps),
                          float(total / ff) if ff > 0 else 0.0)


_ORTHO_RTOL = 1e-24
_CUM_ATOL = 1e-12  # summation error in the running total must not cross the threshold


def _first_above(cumulative: np.ndarray, eps: float) -> int:
    hits = np.nonzero(cumulative > eps + _CUM_ATOL)[0]
    return int(hits[0]) + 1 if hits.size else len(cumulative)


def feature_utilities(spectrum: Spectrum, f_values, n_features: int | None = None,
                      eps: float = DEFAULT_EPS) -> UtilityProfile:
    """Normalized squared projections of the network function onto the top eigenvectors.

    ``n_features`` is the number of CK features (the readout width); the utilities
    are normalized over those so the last cumulative value is exactly 1.
    """
    return _profile(spectrum, f_values, n_features, eps)


def target_utilities(spectrum: Spectrum, target_values, n_features: int | None = None,
                     eps: float = DEFAULT_EPS) -> UtilityProfile:
    return _profile(spectrum, target_values, n_features, eps)


def fl_strength_ck(profile: UtilityProfile, eps: float | None = None) -> int:
    """Smallest k with cumulative utility above ``eps`` (defaults to the profile's threshold)."""
    return _first_above(profile.cumulative, profile.eps if eps is None else eps)


def cumulative_power(spectrum: Spectrum, target_values, rtol: float = 1e-12) -> CumulativePower:
    """Fraction of the kernel-weighted target power in the top rho modes."""
    f = np.asarray(target_values, dtype=np.float64).ravel()
    lam = spectrum.eigenvalues
    keep = lam > rtol * float(np.sum(np.clip(lam, 0.0, None)))
    eta = lam[keep]
    w = spectrum.eigenvectors[:, keep].T @ f
    power = eta * w ** 2
    cum = np.cumsum(power)
    if cum.size == 0 or not cum[-1] > 0:
        raise DegenerateProfile("target has no power on the retained modes")
    return CumulativePower(eta, w, cum / cum[-1])


def layer_spectra(state: ModelState, X, activated: bool = True) -> list[Spectrum]:
    """CK spectra for every hidden layer 1..L-1."""
    return [sym_eig(ck_matrix(state, X, l, activated)) for l in range(1, state.config.depth)]


# --- exports ----------------------------------------------------------------


def write_spectra_csv(path, spectra: dict) -> None:
    """``spectra`` maps layer index to a Spectrum; eigenvalues are also written trace-normalized."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "mode", "eigenvalue", "normalized_eigenvalue"])
        for layer in sorted(spectra):
            lam = spectra[layer].eigenvalues
            tr = float(np.sum(lam))
            for k, v in enumerate(lam, start=1):
                w.writerow([layer, k, repr(float(v)), repr(float(v / tr)) if tr else "nan"])


def write_utilities_csv(path, profile: UtilityProfile) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "utility", "cumulative"])
        for k, (q, c) in enumerate(zip(profile.utilities, profile.cumulative), start=1):
            w.writerow([k, repr(float(q)), repr(float(c))])


def write_cumpower_csv(path, cp: CumulativePower) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "eigenvalue", "coefficient_sq", "cumulative"])
        for k, (e, c, cc) in enumerate(zip(cp.eigenvalues, cp.coefficients, cp.curve), start=1):
            w.writerow([k, repr(float(e)), repr(float(c * c)), repr(float(cc))])
