"""Fully connected ReLU networks with an output scale.

Layer ``l`` (1-based) maps ``a^{l-1}`` to ``h^l = a^{l-1} W^l.T + b^l``.  The input
is used as-is (``a^0 = x``), hidden layers use ``a^l = relu(h^l)``, and the network
output is ``h^L / gamma``.  With ``readout_activation=False`` the last hidden layer
feeds the readout without the nonlinearity.

Flattened parameters are laid out as ``(W^1, b^1, ..., W^L, b^L)``, each weight
row-major.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from . import _accel
from .numerics import RNG_ALGORITHM, make_rng, read_matrix, write_matrix

PARAMETERIZATIONS = ("mup", "standard")


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int
    width: int
    depth: int  # number of weight layers L (hidden layers + readout)
    output_dim: int = 1
    activation: str = "relu"
    gamma: float = 1.0
    parameterization: str = "mup"
    readout_activation: bool = True

    def __post_init__(self):
        if self.depth < 1 or self.width < 1 or self.input_dim < 1 or self.output_dim < 1:
            raise NetworkError("depth, width and dimensions must be >= 1")
        if not self.gamma > 0:
            raise NetworkError("gamma must be positive")
        if self.parameterization not in PARAMETERIZATIONS:
            raise NetworkError(f"unknown parameterization {self.parameterization!r}")
        if self.activation != "relu":
            raise NetworkError("only relu is supported")

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [self.width] * (self.depth - 1) + [self.output_dim]

    def with_gamma(self, gamma: float) -> "NetworkConfig":
        return NetworkConfig(**{**asdict(self), "gamma": float(gamma)})


@dataclass
class ModelState:
    weights: list
    biases: list
    config: NetworkConfig
    seed: int | None = None

    def __post_init__(self):
        dims = self.config.dims
        if len(self.weights) != self.config.depth or len(self.biases) != self.config.depth:
            raise NetworkError("one weight and one bias per layer required")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[l + 1], dims[l]) or b.shape != (dims[l + 1],):
                raise NetworkError(f"layer {l + 1} has shapes {w.shape}, {b.shape}")

    @property
    def parameter_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "ModelState":
        return ModelState([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                          self.config, self.seed)

    def astype(self, dtype) -> "ModelState":
        return ModelState([w.astype(dtype) for w in self.weights],
                          [b.astype(dtype) for b in self.biases], self.config, self.seed)

    def flat(self) -> np.ndarray:
        return flatten_params(self.weights, self.biases)


@dataclass
class ForwardTrace:
    pre: list = field(default_factory=list)  # h^0 .. h^L (h^L unscaled)
    post: list = field(default_factory=list)  # a^0 .. a^{L-1}, the inputs to each layer


def init(config: NetworkConfig, seed: int) -> ModelState:
    """Gaussian weights with variance ``c / fan_in`` (c=1 muP, c=2 He), zero biases."""
    rng = make_rng(seed)
    scale = 1.0 if config.parameterization == "mup" else 2.0
    dims = config.dims
    weights = [rng.standard_normal((dims[l + 1], dims[l])) * np.sqrt(scale / dims[l])
               for l in range(config.depth)]
    biases = [np.zeros(dims[l + 1]) for l in range(config.depth)]
    return ModelState(weights, biases, config, seed)


def _activate(state: ModelState, h: np.ndarray, layer: int) -> np.ndarray:
    # layer is the 1-based index of h; h^{L-1} skips relu under the literal readout
    if layer == state.config.depth - 1 and not state.config.readout_activation:
        return h
    return np.maximum(h, 0)


def forward(state: ModelState, X) -> tuple[np.ndarray, ForwardTrace]:
    dtype = state.weights[0].dtype
    X = np.asarray(X, dtype=dtype)
    if X.ndim != 2 or X.shape[1] != state.config.input_dim:
        raise NetworkError(f"expected inputs of width {state.config.input_dim}, got {X.shape}")
    trace = ForwardTrace([X], [X])
    a = X
    L = state.config.depth
    # overflow is reported through the finiteness check below
    with np.errstate(over="ignore", invalid="ignore"):
        for l in range(L):
            h = a @ state.weights[l].T
            h += state.biases[l]
            trace.pre.append(h)
            if l < L - 1:
                a = _activate(state, h, l + 1)
                trace.post.append(a)
        out = trace.pre[-1] / dtype.type(state.config.gamma)
    if not np.all(np.isfinite(out)):
        raise NetworkError("non-finite network output")
    return out, trace


def predict(state: ModelState, X, batch: int = 4096) -> np.ndarray:
    X = np.asarray(X)
    outs = [forward(state, X[i:i + batch])[0] for i in range(0, X.shape[0], batch)]
    return np.concatenate(outs, axis=0) if outs else np.zeros((0, state.config.output_dim))


def backward(state: ModelState, X, upstream_grad, trace: ForwardTrace | None = None):
    """Gradients of ``<upstream_grad, f(X)>`` with respect to every weight and bias.

    Returns ``(weight_grads, bias_grads)`` in layer order.
    """
    if trace is None:
        _, trace = forward(state, X)
    dtype = state.weights[0].dtype
    m = trace.pre[0].shape[0]
    G = np.asarray(upstream_grad, dtype=dtype)
    if G.shape != (m, state.config.output_dim):
        raise NetworkError(f"upstream gradient shape {G.shape} does not match outputs")
    L = state.config.depth
    gw = [None] * L
    gb = [None] * L
    delta = G / dtype.type(state.config.gamma)
    for l in range(L - 1, -1, -1):
        gw[l] = delta.T @ trace.post[l]
        gb[l] = delta.sum(axis=0)
        if l > 0:
            delta = delta @ state.weights[l]
            if not (l == L - 1 and not state.config.readout_activation):
                _accel.relu_mask(delta, np.ascontiguousarray(trace.pre[l]))
    return gw, gb


def layer_deltas(state: ModelState, trace: ForwardTrace, output_index: int = 0) -> list[np.ndarray]:
    """Per-sample backprop signals d f_k / d h^l for one output unit, one array per layer."""
    L = state.config.depth
    m = trace.pre[0].shape[0]
    dtype = state.weights[0].dtype
    delta = np.zeros((m, state.config.output_dim), dtype=dtype)
    delta[:, output_index] = 1.0 / state.config.gamma
    out = [None] * L
    for l in range(L - 1, -1, -1):
        out[l] = delta
        if l > 0:
            delta = delta @ state.weights[l]
            if not (l == L - 1 and not state.config.readout_activation):
                _accel.relu_mask(delta, np.ascontiguousarray(trace.pre[l]))
    return out


def feature_map(state: ModelState, X, layer: int, activated: bool = False) -> np.ndarray:
    """Rows of ``h^layer`` (or ``relu(h^layer)``) for every input; layer 0 is the input itself."""
    if not 0 <= layer < state.config.depth:
        raise NetworkError(f"layer must be in [0, {state.config.depth}), got {layer}")
    X = np.asarray(X, dtype=np.float64)
    if layer == 0:
        return X.copy()
    _, trace = forward(state, X)
    if activated:
        return trace.post[layer]
    return trace.pre[layer]


def readout_features(state: ModelState, X) -> np.ndarray:
    """The representation consumed by the readout layer (``a^{L-1}``)."""
    _, trace = forward(state, X)
    return trace.post[-1]


def flatten_params(weights, biases) -> np.ndarray:
    parts = []
    for w, b in zip(weights, biases):
        parts.append(np.ravel(w))
        parts.append(np.ravel(b))
    return np.concatenate(parts)


def unflatten_params(flat: np.ndarray, config: NetworkConfig):
    dims = config.dims
    weights, biases = [], []
    pos = 0
    for l in range(config.depth):
        n_out, n_in = dims[l + 1], dims[l]
        weights.append(flat[pos:pos + n_out * n_in].reshape(n_out, n_in).copy())
        pos += n_out * n_in
        biases.append(flat[pos:pos + n_out].copy())
        pos += n_out
    if pos != flat.size:
        raise NetworkError(f"expected {pos} parameters, got {flat.size}")
    return weights, biases


def param_jacobian(state: ModelState, x) -> np.ndarray:
    """``d f_k(x) / d theta`` for one input, shape (output_dim, P)."""
    x = np.asarray(x, dtype=state.weights[0].dtype).reshape(1, -1)
    _, trace = forward(state, x)
    rows = []
    for k in range(state.config.output_dim):
        G = np.zeros((1, state.config.output_dim))
        G[0, k] = 1.0
        gw, gb = backward(state, x, G, trace)
        rows.append(flatten_params(gw, gb))
    return np.stack(rows)


def jvp(state: ModelState, X, tangent: np.ndarray) -> np.ndarray:
    """Forward-mode product ``J(X) @ tangent`` with J the parameter Jacobian of the outputs."""
    tw, tb = unflatten_params(np.asarray(tangent, dtype=np.float64), state.config)
    _, trace = forward(state, X)
    L = state.config.depth
    da = np.zeros_like(trace.post[0])
    for l in range(L):
        dh = trace.post[l] @ tw[l].T + tb[l]
        if l > 0:
            dh += da @ state.weights[l].T
        if l < L - 1:
            if l + 1 == L - 1 and not state.config.readout_activation:
                da = dh
            else:
                da = dh * (trace.pre[l + 1] > 0)
    return dh / state.config.gamma


def with_params(state: ModelState, flat: np.ndarray) -> ModelState:
    w, b = unflatten_params(np.asarray(flat, dtype=np.float64), state.config)
    return ModelState(w, b, state.config, state.seed)


# --- checkpoints ------------------------------------------------------------


def save_checkpoint(state: ModelState, directory, extra: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"config": asdict(state.config), "rng": RNG_ALGORITHM,
            "parameter_order": "W1,b1,...,WL,bL row-major"}
    if state.seed is not None:
        meta["seed"] = int(state.seed)
    if extra:
        meta.update(extra)
    (d / "meta.toml").write_text(tomli_w.dumps(meta))
    for l, (w, b) in enumerate(zip(state.weights, state.biases), start=1):
        write_matrix(d / f"w{l}.bin", w)
        write_matrix(d / f"b{l}.bin", b)
    return d


def load_checkpoint(directory) -> ModelState:
    d = Path(directory)
    meta = tomli.loads((d / "meta.toml").read_text())
    config = NetworkConfig(**meta["config"])
    weights = [read_matrix(d / f"w{l}.bin") for l in range(1, config.depth + 1)]
    biases = [read_matrix(d / f"b{l}.bin").ravel() for l in range(1, config.depth + 1)]
    return ModelState(weights, biases, config, meta.get("seed"))
