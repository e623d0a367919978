"""Independent reference computations shared by the unit and acceptance tests."""

import itertools

import numpy as np

from flgap import datasets as ds
from flgap import network as nw
from flgap import ntk
from flgap.numerics import make_rng, sym_eig


def random_state(dims, seed=0, gamma=1.0, bias_scale=0.1, readout_activation=True):
    cfg = nw.NetworkConfig(dims[0], dims[1], len(dims) - 1, dims[-1], gamma=gamma,
                           readout_activation=readout_activation)
    s = nw.init(cfg, seed)
    rng = make_rng(seed + 7919)
    return nw.ModelState(s.weights, [rng.standard_normal(b.shape) * bias_scale for b in s.biases],
                         cfg, seed)


def explicit_ntk(state, X):
    """J J^T summed over output units, with J built row by row."""
    J = np.stack([nw.param_jacobian(state, x) for x in X])  # (n, out, P)
    return np.einsum("ikp,jkp->ij", J, J)


def central_difference(state, X, G, h=1e-5):
    """Finite-difference gradient of sum(G * f(X)) with respect to the flat parameters."""
    theta = state.flat()
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        fp = nw.forward(nw.with_params(state, theta + e), X)[0]
        fm = nw.forward(nw.with_params(state, theta - e), X)[0]
        grad[i] = np.sum(G * (fp - fm)) / (2 * h)
    return grad


def backward_fd_error(seed=5, gamma=0.7) -> float:
    s = random_state((3, 4, 2), seed=0, gamma=gamma)
    X = make_rng(seed).standard_normal((6, 3))
    G = make_rng(seed + 1).standard_normal((6, 2))
    gw, gb = nw.backward(s, X, G)
    analytic = nw.flatten_params(gw, gb)
    fd = central_difference(s, X, G, h=1e-4)
    return float(np.linalg.norm(analytic - fd) / np.linalg.norm(fd))


def brute_force_msp(sets) -> bool:
    for order in itertools.permutations(range(len(sets))):
        seen: set = set()
        for i in order:
            if not set(sets[i]) - seen:
                break
            seen |= set(sets[i])
        else:
            return True
    return False


def random_msp_instance(rng, max_sets=8, max_dim=8):
    n = int(rng.integers(1, max_sets + 1))
    d = int(rng.integers(1, max_dim + 1))
    out = []
    for _ in range(n):
        s = tuple(int(i) for i in np.nonzero(rng.integers(0, 2, size=d))[0])
        out.append(s or (int(rng.integers(d)),))
    return out


def euler_flow_projections(seed=0, n=5, t=1.0, h=1e-4, lam_max=0.1) -> float:
    """Max deviation between the closed-form mode projections and explicit Euler steps."""
    rng = make_rng(seed)
    G = rng.standard_normal((n, n))
    K = G @ G.T
    K *= lam_max / np.linalg.eigvalsh(K).max()
    Y = rng.standard_normal((n, 1))
    # unit target: Euler's own truncation error is then below h*t*lam_max**2/2
    Y /= np.linalg.norm(Y)
    f = np.zeros_like(Y)
    for _ in range(int(round(t / h))):
        f = f - h * K @ (f - Y)
    spec = sym_eig(K)
    euler = spec.eigenvectors.T @ (f - Y)
    closed = ntk.kernel_gradient_flow(K, Y, t, spec)
    return float(np.abs(euler - closed).max())


def linearized_oracle_error(n=50, seed=0) -> float:
    """Relative gap between converged linearized GD and ridgeless NTK regression on residuals."""
    state = random_state((6, 48, 48, 1), seed=seed, bias_scale=0.1)
    rng = make_rng(seed + 1)
    X = rng.standard_normal((n + 20, 6))
    y = np.sin(X[:, 0]) + X[:, 1] * X[:, 2]
    train = ds.Dataset(X[:n], y[:n])
    test = ds.Dataset(X[n:], y[n:])
    lin = ntk.linearize_and_train(state, train, steps=20000, tol=1e-12)
    K = ntk.empirical_ntk(state, train.X)
    Kx = ntk.empirical_ntk(state, test.X, train.X)
    resid = train.Y - nw.predict(state, train.X)
    ref = ntk.ntk_predict(K, resid, Kx, ridge=0.0) + nw.predict(state, test.X)
    got = lin(test.X)
    return float(np.linalg.norm(got - ref) / np.linalg.norm(ref))
