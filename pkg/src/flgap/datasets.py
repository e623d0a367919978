"""Synthetic targets: merged-staircase boolean functions and multi-index polynomials."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .numerics import (
    RNG_ALGORITHM,
    child_seed,
    gaussian,
    make_rng,
    qr_orthonormal,
    read_matrix,
    write_matrix,
    write_matrix_csv,
)

# Fourier support of the staircase target used throughout the experiments (d = 30).
DEFAULT_MSP_SETS = ((7,), (2, 7), (0, 2, 7), (5, 7, 4), (1,), (0, 4), (3, 7), (0, 1, 2, 3, 4, 6, 7))

TRAIN_STREAM = 0
TEST_STREAM = 1
_TASK_STREAM = 2


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class MspSpec:
    input_dim: int = 30
    sets: tuple = DEFAULT_MSP_SETS
    coefficients: tuple | None = None

    def __post_init__(self):
        sets = tuple(tuple(sorted(int(i) for i in s)) for s in self.sets)
        object.__setattr__(self, "sets", sets)
        for s in sets:
            if not s:
                raise DatasetError("MSP sets must be non-empty")
            if any(i < 0 or i >= self.input_dim for i in s):
                raise DatasetError(f"set {s} has an index outside [0, {self.input_dim})")
        if len(set(sets)) != len(sets):
            raise DatasetError("MSP sets must be distinct")
        if self.coefficients is None:
            object.__setattr__(self, "coefficients", (1.0,) * len(sets))
        elif len(self.coefficients) != len(sets):
            raise DatasetError("one coefficient per set is required")
        else:
            object.__setattr__(self, "coefficients", tuple(float(c) for c in self.coefficients))

    def to_dict(self) -> dict:
        return {
            "task": "msp",
            "input_dim": self.input_dim,
            "sets": [list(s) for s in self.sets],
            "coefficients": list(self.coefficients),
        }


@dataclass(frozen=True)
class MultiIndexSpec:
    input_dim: int = 20
    latent_dim: int = 3
    max_degree: int = 5
    noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim > self.input_dim:
            raise DatasetError("latent_dim must not exceed input_dim")
        if self.max_degree < 1:
            raise DatasetError("max_degree must be >= 1")
        if self.noise_std < 0:
            raise DatasetError("noise_std must be >= 0")

    def to_dict(self) -> dict:
        return {
            "task": "multi_index",
            "input_dim": self.input_dim,
            "latent_dim": self.latent_dim,
            "max_degree": self.max_degree,
            "noise_std": self.noise_std,
            "seed": self.seed,
            "constant_term": False,
        }


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    meta: dict = field(default_factory=dict)
    permutation: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.Y.ndim == 1:
            self.Y = self.Y[:, None]
        if self.X.shape[0] != self.Y.shape[0]:
            raise DatasetError(f"X has {self.X.shape[0]} rows but Y has {self.Y.shape[0]}")
        if not np.all(np.isfinite(self.Y)):
            raise DatasetError("labels must be finite")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def shuffled(self) -> bool:
        return bool(self.meta.get("shuffled", False))

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.Y[idx], dict(self.meta))


# --- merged staircase -------------------------------------------------------


def msp_check(sets) -> bool:
    """True iff some ordering of ``sets`` adds at least one new index with every set."""
    sets = [frozenset(s) for s in sets]
    if not sets:
        raise DatasetError("need at least one set")
    if any(not s for s in sets):
        raise DatasetError("empty set in MSP structure")
    n = len(sets)
    full = (1 << n) - 1
    dead: set[int] = set()

    def covered(mask: int) -> frozenset:
        out: set = set()
        for i in range(n):
            if mask >> i & 1:
                out |= sets[i]
        return frozenset(out)

    def search(mask: int) -> bool:
        if mask == full:
            return True
        if mask in dead:
            return False
        cov = covered(mask)
        for i in range(n):
            if not mask >> i & 1 and sets[i] - cov and search(mask | 1 << i):
                return True
        dead.add(mask)
        return False

    return search(0)


def msp_eval(spec: MspSpec, z) -> float:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (spec.input_dim,):
        raise DatasetError(f"expected a length-{spec.input_dim} vector")
    if not np.all(np.abs(z) == 1.0):
        raise DatasetError("inputs must be +1 or -1")
    return float(msp_eval_batch(spec, z[None, :])[0])


def msp_eval_batch(spec: MspSpec, Z: np.ndarray) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    out = np.zeros(Z.shape[0])
    for s, c in zip(spec.sets, spec.coefficients):
        out += c * np.prod(Z[:, list(s)], axis=1)
    return out


def gen_msp(spec: MspSpec, m: int, seed: int, split: str = "train") -> Dataset:
    if m < 1:
        raise DatasetError("m must be >= 1")
    stream = TRAIN_STREAM if split == "train" else TEST_STREAM
    rng = make_rng(child_seed(seed, stream))
    X = 2.0 * rng.integers(0, 2, size=(m, spec.input_dim)).astype(np.float64) - 1.0
    Y = msp_eval_batch(spec, X)[:, None]
    meta = {
        "generator": spec.to_dict(),
        "seed": int(seed),
        "split": split,
        "shuffled": False,
        "rng": RNG_ALGORITHM,
        "label_mean": 0.0,
        "label_std": 1.0,
    }
    return Dataset(X, Y, meta)


# --- multi-index ------------------------------------------------------------


def multi_indices(r: int, p: int) -> list[tuple[int, ...]]:
    """All alpha in N^r with 1 <= |alpha| <= p, in graded lexicographic order."""
    out = []
    for deg in range(1, p + 1):
        for combo in itertools.combinations_with_replacement(range(r), deg):
            alpha = [0] * r
            for i in combo:
                alpha[i] += 1
            out.append(tuple(alpha))
    return out


def multi_index_task(spec: MultiIndexSpec):
    """The projection U (d x r) and one coefficient per multi-index."""
    rng = make_rng(child_seed(spec.seed, _TASK_STREAM))
    U = qr_orthonormal(gaussian(rng, spec.input_dim, spec.latent_dim, 1.0))
    alphas = multi_indices(spec.latent_dim, spec.max_degree)
    coef = rng.standard_normal(len(alphas))
    return U, alphas, coef


def multi_index_eval(X: np.ndarray, U: np.ndarray, alphas, coef) -> np.ndarray:
    Z = X @ U
    out = np.zeros(X.shape[0])
    for a, c in zip(alphas, coef):
        out += c * np.prod(Z ** np.asarray(a, dtype=np.float64), axis=1)
    return out


def gen_multi_index(spec: MultiIndexSpec, m: int, seed: int, split: str = "train",
                    normalization: tuple[float, float] | None = None) -> Dataset:
    """Draw ``m`` labelled points.

    Training draws normalize labels with their own mean/std; any other split must be
    handed the training ``normalization`` so test labels share the same affine map.
    """
    if m < 1:
        raise DatasetError("m must be >= 1")
    U, alphas, coef = multi_index_task(spec)
    stream = TRAIN_STREAM if split == "train" else TEST_STREAM
    rng = make_rng(child_seed(seed, stream))
    X = rng.standard_normal((m, spec.input_dim))
    y = multi_index_eval(X, U, alphas, coef)
    if spec.noise_std > 0:
        y = y + spec.noise_std * (2.0 * rng.integers(0, 2, size=m) - 1.0)
    if normalization is None:
        if split != "train":
            raise DatasetError("non-training splits need the training normalization")
        mean = float(y.mean())
        std = float(y.std())
        std = std if std > 0 else 1.0
    else:
        mean, std = normalization
    meta = {
        "generator": spec.to_dict(),
        "seed": int(seed),
        "split": split,
        "shuffled": False,
        "rng": RNG_ALGORITHM,
        "label_mean": mean,
        "label_std": std,
    }
    return Dataset(X, ((y - mean) / std)[:, None], meta)


def make_train_test(spec, m_train: int, m_test: int, seed: int) -> tuple[Dataset, Dataset]:
    if isinstance(spec, MspSpec):
        return gen_msp(spec, m_train, seed, "train"), gen_msp(spec, m_test, seed, "test")
    train = gen_multi_index(spec, m_train, seed, "train")
    norm = (train.meta["label_mean"], train.meta["label_std"])
    return train, gen_multi_index(spec, m_test, seed, "test", normalization=norm)


def spec_from_dict(d: dict):
    d = dict(d)
    task = d.pop("task", "msp")
    d.pop("constant_term", None)
    if task == "msp":
        return MspSpec(int(d["input_dim"]), tuple(tuple(s) for s in d["sets"]),
                       tuple(d.get("coefficients") or ()) or None)
    if task == "multi_index":
        return MultiIndexSpec(**d)
    raise DatasetError(f"unknown task {task!r}")


def regenerate(ds: Dataset) -> Dataset:
    """Rebuild a dataset from its own metadata (before any shuffling)."""
    spec = spec_from_dict(ds.meta["generator"])
    m, split, seed = len(ds), ds.meta["split"], ds.meta["seed"]
    if isinstance(spec, MspSpec):
        return gen_msp(spec, m, seed, split)
    norm = None if split == "train" else (ds.meta["label_mean"], ds.meta["label_std"])
    return gen_multi_index(spec, m, seed, split, normalization=norm)


# --- shuffling --------------------------------------------------------------


def shuffle_labels(ds: Dataset, seed: int) -> Dataset:
    """Permute label rows across samples; ``result.permutation[i]`` is the source row of label i."""
    if len(ds) == 0:
        raise DatasetError("cannot shuffle an empty dataset")
    perm = make_rng(seed).permutation(len(ds))
    meta = dict(ds.meta, shuffled=True, shuffle_seed=int(seed))
    return replace(ds, Y=ds.Y[perm].copy(), meta=meta, permutation=perm)


def unshuffle_labels(ds: Dataset) -> np.ndarray:
    if ds.permutation is None:
        return ds.Y.copy()
    Y = np.empty_like(ds.Y)
    Y[ds.permutation] = ds.Y
    return Y


# --- persistence ------------------------------------------------------------


def save_dataset(ds: Dataset, directory, csv_export: bool = False) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "meta.toml").write_text(tomli_w.dumps(ds.meta))
    write_matrix(d / "X.bin", ds.X)
    write_matrix(d / "Y.bin", ds.Y)
    if ds.permutation is not None:
        write_matrix(d / "perm.bin", ds.permutation.astype(np.float64))
    if csv_export:
        write_matrix_csv(d / "X.csv", ds.X)
        write_matrix_csv(d / "Y.csv", ds.Y)
    return d


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    meta = tomli.loads((d / "meta.toml").read_text())
    perm = None
    if (d / "perm.bin").exists():
        perm = read_matrix(d / "perm.bin").ravel().astype(np.int64)
    return Dataset(read_matrix(d / "X.bin"), read_matrix(d / "Y.bin"), meta, perm)
