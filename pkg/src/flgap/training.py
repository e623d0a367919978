"""Mini-batch Adam/AdamW training with per-layer (muP) learning rates."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _accel
from .datasets import Dataset
from .network import ModelState, NetworkConfig, NetworkError, backward, forward, predict
from .numerics import child_seed, make_rng

_BATCH_STREAM = 11


class TrainingDiverged(RuntimeError):
    """Raised when the loss or the parameters stop being finite."""

    def __init__(self, epoch: int, step: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch}, step {step} (loss={loss})")
        self.record = {"status": "diverged", "epoch": epoch, "step": step, "loss": loss}


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.05
    weight_decay: float = 1e-4
    batch_size: int = 64
    epochs: int = 5000
    grad_clip: float = 1.0
    loss: str = "mse"
    schedule: str = "cosine"
    optimizer: str = "adamw"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dtype: str = "float64"

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive")
        if self.loss not in ("mse", "cross_entropy"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)
    final_train_loss: float = float("nan")
    final_test_loss: float | None = None
    wall_clock: float = 0.0
    steps: int = 0
    initial: ModelState | None = None
    final: ModelState | None = None
    config: dict = field(default_factory=dict)


def per_layer_lrs(config: NetworkConfig, train: TrainConfig) -> list[float]:
    """Layer learning rates: muP uses ``base / fan_in`` beyond the first layer."""
    if config.parameterization != "mup":
        return [train.base_lr] * config.depth
    dims = config.dims
    return [train.base_lr] + [train.base_lr / dims[l] for l in range(1, config.depth)]


def cosine_lr(step: int, total_steps: int, lr: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError("step must lie in [0, total_steps]")
    if total_steps == 0:
        return lr
    return lr * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def global_norm(grads) -> float:
    total = 0.0
    for g in grads:
        x = np.ravel(g).astype(np.float64, copy=False)
        total += float(np.dot(x, x))
    return math.sqrt(total)


def clip_gradients(grads, max_norm: float):
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return [g.copy() for g in grads]
    s = max_norm / norm
    return [g * s for g in grads]


def loss_and_grad(out: np.ndarray, Y: np.ndarray, loss: str) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient w.r.t. the outputs."""
    n = out.shape[0]
    if loss == "mse":
        r = out - Y
        k = r.size
        return float(np.dot(r.ravel(), r.ravel()) / k), (2.0 / k) * r
    z = out - out.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-(Y * logp).sum() / n), (np.exp(logp) - Y) / n


def loss_value(pred: np.ndarray, Y: np.ndarray, loss: str = "mse") -> float:
    return loss_and_grad(np.asarray(pred, dtype=np.float64), np.asarray(Y, dtype=np.float64), loss)[0]


class Adam:
    """Adam/AdamW over a list of parameter arrays, one learning rate per array."""

    def __init__(self, params, lrs, cfg: TrainConfig):
        self.params = params
        self.lrs = lrs
        self.cfg = cfg
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads, lr_factor: float = 1.0, grad_scale: float = 1.0) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        coupled = c.optimizer == "adam"
        l2 = c.weight_decay if coupled else 0.0
        # decoupled decay follows the base schedule, not the per-layer rates
        decay = 0.0 if coupled else c.base_lr * lr_factor * c.weight_decay
        for p, g, m, v, lr in zip(self.params, grads, self.m, self.v, self.lrs):
            _accel.adam_step(p.reshape(-1), np.ascontiguousarray(g, dtype=p.dtype).reshape(-1),
                             m.reshape(-1), v.reshape(-1), lr * lr_factor, c.beta1, c.beta2,
                             c.eps, bc1, bc2, grad_scale, l2, decay)


def train(model: ModelState, ds: Dataset, cfg: TrainConfig, test: Dataset | None = None,
          max_steps: int | None = None) -> tuple[ModelState, TrainReport]:
    """Train a copy of ``model`` on ``ds``; the input state is left untouched.

    ``max_steps`` caps the total number of optimizer steps (the cosine schedule is
    laid out over the capped count).
    """
    if ds.X.shape[1] != model.config.input_dim or ds.Y.shape[1] != model.config.output_dim:
        raise ValueError("dataset and model dimensions disagree")
    t0 = time.perf_counter()
    dtype = np.dtype(cfg.dtype)
    state = model.astype(dtype)
    X = ds.X.astype(dtype)
    Y = ds.Y.astype(dtype)
    m = len(ds)
    per_epoch = math.ceil(m / cfg.batch_size)
    total = cfg.epochs * per_epoch
    if max_steps is not None:
        total = min(total, max_steps)
    L = model.config.depth
    params, lrs = [], []
    for l, lr in enumerate(per_layer_lrs(model.config, cfg)):
        params += [state.weights[l], state.biases[l]]
        lrs += [lr, lr]
    opt = Adam(params, lrs, cfg)
    rng = make_rng(child_seed(cfg.seed, _BATCH_STREAM))
    report = TrainReport(initial=model.copy(), config=asdict(cfg))
    step = 0
    epoch = 0
    while step < total:
        perm = rng.permutation(m)
        acc, count = 0.0, 0
        for start in range(0, m, cfg.batch_size):
            if step >= total:
                break
            idx = perm[start:start + cfg.batch_size]
            try:
                out, trace = forward(state, X[idx])
            except NetworkError:
                raise TrainingDiverged(epoch, step, float("nan")) from None
            loss, G = loss_and_grad(out, Y[idx], cfg.loss)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, step, loss)
            gw, gb = backward(state, None, G, trace)
            grads = [g for pair in zip(gw, gb) for g in pair]
            norm = global_norm(grads)
            if not math.isfinite(norm):
                raise TrainingDiverged(epoch, step, loss)
            scale = cfg.grad_clip / norm if norm > cfg.grad_clip else 1.0
            factor = cosine_lr(step, total, 1.0) if cfg.schedule == "cosine" else 1.0
            opt.step(grads, factor, scale)
            step += 1
            acc += loss * len(idx)
            count += len(idx)
        epoch += 1
        report.epoch_losses.append(acc / max(count, 1))
    final = state.astype(np.float64)
    if not all(np.all(np.isfinite(w)) for w in final.weights):
        raise TrainingDiverged(epoch, step, float("nan"))
    report.steps = step
    report.final = final
    report.final_train_loss = gen_error(final, ds, cfg.loss)
    if test is not None:
        report.final_test_loss = gen_error(final, test, cfg.loss)
    report.wall_clock = time.perf_counter() - t0
    return final, report


def gen_error(predictor, test: Dataset, loss: str = "mse") -> float:
    """Average loss over a finite test set.

    ``predictor`` may be a ``ModelState``, a callable mapping inputs to outputs, or
    an array of precomputed predictions.
    """
    if len(test) == 0:
        raise ValueError("empty test set")
    if isinstance(predictor, ModelState):
        pred = predict(predictor, test.X)
    elif callable(predictor):
        pred = predictor(test.X)
    else:
        pred = predictor
    pred = np.asarray(pred, dtype=np.float64).reshape(test.Y.shape)
    return loss_value(pred, test.Y, loss)


def save_report(report: TrainReport, directory) -> None:
    import csv
    from pathlib import Path

    import tomli_w

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    summary = {
        "final_train_loss": report.final_train_loss,
        "wall_clock": report.wall_clock,
        "steps": report.steps,
        "train_config": report.config,
        "adam": {"beta1": report.config.get("beta1"), "beta2": report.config.get("beta2"),
                 "eps": report.config.get("eps")},
    }
    if report.final_test_loss is not None:
        summary["final_test_loss"] = report.final_test_loss
    (d / "report.toml").write_text(tomli_w.dumps(summary))
    with open(d / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss"])
        for i, v in enumerate(report.epoch_losses, start=1):
            w.writerow([i, repr(float(v))])
