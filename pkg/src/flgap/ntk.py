"""Empirical NTK, kernel regression predictor, CKA and the feature-learning gap.

For a fully connected network the parameter gradient of layer ``l`` factorises as
``delta^l (x) a^{l-1}``, so the NTK is assembled layer by layer as

    K(x, x') = sum_l (delta^l(x) . delta^l(x')) * (a^{l-1}(x) . a^{l-1}(x') + 1)

without ever forming the m x P Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tomli_w

from . import _accel
from .datasets import Dataset
from .network import ModelState, backward, forward, jvp, layer_deltas, predict
from .numerics import NumericsError, solve_spd, write_matrix

BLOCK = 256


@dataclass(frozen=True)
class FlGapResult:
    m: int | None
    nn_error: float
    ntk_error: float
    gap: float


def _block_features(state: ModelState, X: np.ndarray):
    """Per-layer (activations, deltas) for one block of inputs, in float64."""
    st = state if state.weights[0].dtype == np.float64 else state.astype(np.float64)
    _, trace = forward(st, X)
    acts = [np.ascontiguousarray(a) for a in trace.post]
    deltas = [layer_deltas(st, trace, k) for k in range(st.config.output_dim)]
    return acts, deltas


def _gram_block(fa, fb) -> np.ndarray:
    acts_a, deltas_a = fa
    acts_b, deltas_b = fb
    out = np.zeros((acts_a[0].shape[0], acts_b[0].shape[0]))
    for l in range(len(acts_a)):
        aa = acts_a[l] @ acts_b[l].T
        dd = sum(da[l] @ db[l].T for da, db in zip(deltas_a, deltas_b))
        _accel.hadamard_accumulate(out, np.ascontiguousarray(dd), aa, 1.0)
    return out


def empirical_ntk(state: ModelState, Xa, Xb=None, block: int = BLOCK,
                  memory_budget: int = 2 << 30) -> np.ndarray:
    """NTK Gram between ``Xa`` and ``Xb`` (``Xb=None`` gives the symmetric train Gram).

    Inputs are processed in blocks of at most ``block`` rows.  Per-block layer
    features are cached when they fit within ``memory_budget`` bytes and
    recomputed otherwise.
    """
    Xa = np.asarray(Xa, dtype=np.float64)
    symmetric = Xb is None
    Xb = Xa if symmetric else np.asarray(Xb, dtype=np.float64)
    d = state.config.input_dim
    if Xa.shape[1] != d or Xb.shape[1] != d:
        raise ValueError(f"inputs must have {d} columns")
    ma, mb = Xa.shape[0], Xb.shape[0]
    if 8 * ma * mb > memory_budget:
        raise MemoryError(f"a {ma}x{mb} kernel does not fit in {memory_budget} bytes")
    block = max(1, int(block))
    widths = sum(state.config.dims[:-1]) + state.config.output_dim * sum(state.config.dims[1:])
    cache_ok = 8 * widths * (ma + (0 if symmetric else mb)) + 8 * ma * mb <= memory_budget
    starts_a = list(range(0, ma, block))
    starts_b = list(range(0, mb, block))
    cache_a = {}
    cache_b = cache_a if symmetric else {}

    def feats(cache, X, s):
        if s in cache:
            return cache[s]
        f = _block_features(state, X[s:s + block])
        if cache_ok:
            cache[s] = f
        return f

    K = np.empty((ma, mb))
    for i in starts_a:
        fa = feats(cache_a, Xa, i)
        for j in starts_b:
            if symmetric and j < i:
                continue
            g = _gram_block(fa, feats(cache_b, Xb, j))
            K[i:i + block, j:j + block] = g
            if symmetric and j != i:
                K[j:j + block, i:i + block] = g.T
    if symmetric:
        K = 0.5 * (K + K.T)
    return K


def default_ridge(K_train: np.ndarray) -> float:
    m = K_train.shape[0]
    return 1e-6 * float(np.trace(K_train)) / m


def ntk_predict(K_train, Y, K_test_train, ridge: float | None = None) -> np.ndarray:
    """Kernel regression mean ``K(x, X) (K(X, X) + ridge I)^{-1} Y``.

    ``ridge=None`` selects ``1e-6 * tr(K) / m``.
    """
    K_train = np.asarray(K_train, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    K_test_train = np.asarray(K_test_train, dtype=np.float64)
    if K_test_train.shape[1] != K_train.shape[0]:
        raise ValueError("test/train kernel does not match the training Gram")
    lam = default_ridge(K_train) if ridge is None else float(ridge)
    try:
        alpha = solve_spd(K_train, Y, lam)
    except NumericsError as exc:
        raise NumericsError(f"kernel solve failed with ridge {lam:g}: {exc}") from exc
    return K_test_train @ alpha


class NtkPredictor:
    """The NTK mean predictor of a fixed network, evaluable on new inputs.

    With ``centered=True`` the kernel regresses the residual ``Y - f0(X)`` and the
    initial network output is added back.
    """

    def __init__(self, state: ModelState, ds: Dataset, ridge: float | None = None,
                 centered: bool = False, K_train: np.ndarray | None = None):
        self.state = state
        self.X = ds.X
        self.centered = centered
        K = empirical_ntk(state, ds.X) if K_train is None else K_train
        self.ridge = default_ridge(K) if ridge is None else ridge
        target = ds.Y - predict(state, ds.X) if centered else ds.Y
        self.alpha = solve_spd(K, target, self.ridge)

    def __call__(self, X) -> np.ndarray:
        out = empirical_ntk(self.state, X, self.X) @ self.alpha
        if self.centered:
            out = out + predict(self.state, X)
        return out


class LinearizedModel:
    """``f0(x) + J0(x) @ delta`` for a fixed initial state."""

    def __init__(self, state0: ModelState, delta: np.ndarray | None = None):
        self.state0 = state0
        self.delta = np.zeros(state0.parameter_count) if delta is None else delta

    def __call__(self, X) -> np.ndarray:
        return predict(self.state0, X) + jvp(self.state0, X, self.delta)


def linearize_and_train(state0: ModelState, ds: Dataset, steps: int = 1000, lr: float | None = None,
                        tol: float = 0.0) -> LinearizedModel:
    """Full-batch gradient descent on the MSE of the linearized network.

    Only the offset ``theta - theta0`` is trained; the Jacobian stays the one at
    ``theta0``.  ``lr=None`` uses ``1 / L`` with ``L`` the smoothness constant of the
    loss, from a few power iterations.  Stops early once the gradient norm drops below
    ``tol``.
    """
    m = len(ds)
    k = ds.Y.size
    resid0 = ds.Y - predict(state0, ds.X)
    _, trace = forward(state0, ds.X)

    def jt(r):
        gw, gb = backward(state0, None, r, trace)
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(gw, gb)])

    def jv(v):
        return jvp(state0, ds.X, v)

    if lr is None:
        v = np.random.default_rng(0).standard_normal(state0.parameter_count)
        lam = 0.0
        for _ in range(50):
            v /= np.linalg.norm(v)
            w = jt(jv(v))
            lam = float(np.linalg.norm(w))
            v = w
        lr = k / (2.0 * lam * 1.01) if lam > 0 else 1.0
    delta = np.zeros(state0.parameter_count)
    for _ in range(steps):
        g = (2.0 / k) * jt(jv(delta) - resid0)
        if tol and np.linalg.norm(g) < tol:
            break
        delta -= lr * g
        if not np.all(np.isfinite(delta)):
            raise FloatingPointError("linearized training diverged")
    _ = m
    return LinearizedModel(state0, delta)


def kernel_gradient_flow(K, Y, t: float, spectrum=None) -> np.ndarray:
    """Eigenmode projections of the residual ``f_t - Y`` under ``df/dt = -K (f - Y)`` from ``f_0 = 0``.

    Row ``rho`` of the result pairs with the ``rho``-th eigenvector (descending order).
    """
    from .numerics import sym_eig

    if t < 0:
        raise ValueError("t must be non-negative")
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    spec = sym_eig(K) if spectrum is None else spectrum
    r0 = spec.eigenvectors.T @ (-Y)
    return np.exp(-np.clip(spec.eigenvalues, 0.0, None) * t)[:, None] * r0


def center_gram(K: np.ndarray) -> np.ndarray:
    K = np.asarray(K, dtype=np.float64)
    return K - K.mean(axis=0, keepdims=True) - K.mean(axis=1, keepdims=True) + K.mean()


def cka(K1, K2) -> float:
    """Linear centered kernel alignment of two Gram matrices, in [0, 1]."""
    K1 = np.asarray(K1, dtype=np.float64)
    K2 = np.asarray(K2, dtype=np.float64)
    if K1.shape != K2.shape or K1.shape[0] != K1.shape[1]:
        raise ValueError(f"CKA needs equal square Grams, got {K1.shape} and {K2.shape}")
    a = center_gram(K1)
    b = center_gram(K2)
    na = np.sqrt(np.sum(a * a))
    nb = np.sqrt(np.sum(b * b))
    if na == 0 or nb == 0:
        return 0.0
    return float(min(1.0, max(0.0, np.sum(a * b) / (na * nb))))


def fl_strength_ntk(state0: ModelState, state_t: ModelState, X_probe) -> float:
    if state0.config.dims != state_t.config.dims:
        raise ValueError("states have different architectures")
    return 1.0 - cka(empirical_ntk(state0, X_probe), empirical_ntk(state_t, X_probe))


def learns_features(s_nt: float, threshold: float) -> bool:
    """Rich/lazy call from an NTK strength value; the threshold is the caller's choice."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    return s_nt > threshold


def fl_gap(nn_error: float, ntk_error: float, m: int | None = None) -> FlGapResult:
    if nn_error < 0 or ntk_error < 0:
        raise ValueError("errors must be non-negative")
    return FlGapResult(m, float(nn_error), float(ntk_error), float(ntk_error) - float(nn_error))


def critical_m(curve_nn, curve_ntk, eps: float = 0.1):
    """Smallest grid size from which the NN error stays below ``eps`` times the NTK error.

    Curves are sequences of ``(m, error)`` pairs on a common grid.  Returns ``None``
    when no such size exists.  Non-finite errors never satisfy the condition.
    """
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    nn = sorted((int(m), float(e)) for m, e in curve_nn)
    kt = sorted((int(m), float(e)) for m, e in curve_ntk)
    if [m for m, _ in nn] != [m for m, _ in kt]:
        raise ValueError("curves are sampled on different grids")
    best = None
    for (m, e_nn), (_, e_ntk) in zip(reversed(nn), reversed(kt)):
        if np.isfinite(e_nn) and np.isfinite(e_ntk) and e_nn < eps * e_ntk:
            best = m
        else:
            break
    return best


def save_kernel(K: np.ndarray, directory, meta: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_matrix(d / "K.bin", K)
    (d / "meta.toml").write_text(tomli_w.dumps(meta or {}))
    return d
