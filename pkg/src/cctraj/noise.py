"""Noise distributions, seeded disturbance datasets and Gaussian MLE fits."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from cctraj import ConfigurationError


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator keyed by ``(seed, *keys)``.

    Streams for different keys do not depend on generation order, so parallel
    and serial consumers see identical draws.
    """
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)))


def _chol(S: np.ndarray) -> np.ndarray:
    if not np.allclose(S, S.T, atol=1e-12):
        raise ConfigurationError("covariance must be symmetric")
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise ConfigurationError("covariance must be positive definite") from None


@dataclass(frozen=True)
class UniformBox:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ConfigurationError("box bounds must be vectors of equal length")
        if np.any(lo > hi):
            raise ConfigurationError("box requires lo <= hi componentwise")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self) -> int:
        return self.lo.size

    def sample_n(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * rng.random((n, self.dim))

    def describe(self) -> dict:
        return {"type": "uniform_box", "lo": self.lo.tolist(), "hi": self.hi.tolist()}


@dataclass(frozen=True)
class Gaussian:
    mean: np.ndarray
    cov: np.ndarray
    _L: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ConfigurationError("covariance shape does not match mean")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_L", _chol(cov))

    @property
    def dim(self) -> int:
        return self.mean.size

    def sample_n(self, rng: np.random.Generator, n: int) -> np.ndarray:
        z = rng.standard_normal((n, self.dim))
        return self.mean + z @ self._L.T

    def describe(self) -> dict:
        return {"type": "gaussian", "mean": self.mean.tolist(), "cov": self.cov.tolist()}


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    _Ls: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        S = np.asarray(self.covs, dtype=float)
        if w.ndim != 1 or mu.shape[0] != w.size or S.shape != (w.size, mu.shape[1], mu.shape[1]):
            raise ConfigurationError("mixture weights/means/covariances have inconsistent shapes")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigurationError("mixture weights must be positive and sum to 1")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covs", S)
        object.__setattr__(self, "_Ls", np.stack([_chol(s) for s in S]))

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def sample_n(self, rng: np.random.Generator, n: int) -> np.ndarray:
        idx = rng.choice(self.weights.size, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[idx] + np.einsum("nij,nj->ni", self._Ls[idx], z)

    def describe(self) -> dict:
        return {
            "type": "gaussian_mixture",
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
        }


NoiseDistribution = Union[UniformBox, Gaussian, GaussianMixture]


def sample(dist: NoiseDistribution, rng: np.random.Generator) -> np.ndarray:
    return dist.sample_n(rng, 1)[0]


def distribution_from_dict(d: dict) -> NoiseDistribution:
    """Build a distribution from its descriptor (inverse of ``describe``).

    Besides the raw forms, two shorthands are accepted:
    ``{"type": "uniform_box", "sigma": s, "scale": [...]}`` gives the box
    ``[-s * scale, s * scale]``; a Gaussian or mixture may give ``std``
    (isotropic) instead of full covariances.
    """
    kind = d.get("type")
    if kind == "uniform_box":
        if "sigma" in d:
            half = float(d["sigma"]) * np.asarray(d["scale"], dtype=float)
            return UniformBox(-half, half)
        return UniformBox(d["lo"], d["hi"])
    if kind == "gaussian":
        mean = np.asarray(d["mean"], dtype=float)
        cov = d["cov"] if "cov" in d else float(d["std"]) ** 2 * np.eye(mean.size)
        return Gaussian(mean, cov)
    if kind == "gaussian_mixture":
        means = np.atleast_2d(np.asarray(d["means"], dtype=float))
        if "covs" in d:
            covs = d["covs"]
        else:
            stds = np.broadcast_to(np.asarray(d["std"], dtype=float), (means.shape[0],))
            covs = np.stack([s**2 * np.eye(means.shape[1]) for s in stds])
        return GaussianMixture(d["weights"], means, covs)
    raise ConfigurationError(f"unknown noise distribution type {kind!r}")


@dataclass
class DisturbanceDataset:
    samples: np.ndarray  # (K, N, n_w)
    seed: int
    distribution: dict

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 3 or self.samples.shape[0] < 1 or self.samples.shape[1] < 1:
            raise ConfigurationError("dataset samples must have shape (K>=1, N>=1, n_w)")

    @property
    def K(self) -> int:
        return self.samples.shape[0]

    @property
    def N(self) -> int:
        return self.samples.shape[1]

    @property
    def n_w(self) -> int:
        return self.samples.shape[2]

    def header(self) -> dict:
        return {"K": self.K, "N": self.N, "n_w": self.n_w, "seed": self.seed,
                "distribution": self.distribution}


def build_dataset(dist: NoiseDistribution, K: int, N: int, seed: int) -> DisturbanceDataset:
    """``K`` noise sequences of length ``N``; sequence j uses substream (seed, j)."""
    if K < 1 or N < 1:
        raise ConfigurationError("K and N must be at least 1")
    samples = np.stack([dist.sample_n(substream(seed, j), N) for j in range(K)])
    return DisturbanceDataset(samples, int(seed), dist.describe())


def fit_gaussian_mle(samples, regularize: float = 1e-9) -> Gaussian:
    """Sample mean and 1/n-normalized covariance.

    A singular estimate is regularized with ``regularize * I`` so that the
    result is a valid (positive definite) Gaussian.
    """
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, d = X.shape
    if n < 2:
        raise ConfigurationError("need at least two samples for an MLE fit")
    mu = X.mean(axis=0)
    E = X - mu
    S = E.T @ E / n
    S = 0.5 * (S + S.T)
    if np.linalg.eigvalsh(S).min() <= regularize:
        S = S + regularize * np.eye(d)
    return Gaussian(mu, S)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_dataset(ds: DisturbanceDataset, path) -> None:
    """One JSON header line, then CSV rows ``j,k,w_1..w_nw``."""
    buf = io.StringIO()
    buf.write(json.dumps(ds.header()) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["j", "k"] + [f"w_{i + 1}" for i in range(ds.n_w)])
    for j in range(ds.K):
        for k in range(ds.N):
            writer.writerow([j, k] + [_fmt(v) for v in ds.samples[j, k]])
    Path(path).write_text(buf.getvalue())


def load_dataset(path) -> DisturbanceDataset:
    lines = Path(path).read_text().splitlines()
    head = json.loads(lines[0])
    samples = np.empty((head["K"], head["N"], head["n_w"]))
    for row in csv.DictReader(lines[1:]):
        j, k = int(row["j"]), int(row["k"])
        samples[j, k] = [float(row[f"w_{i + 1}"]) for i in range(head["n_w"])]
    return DisturbanceDataset(samples, head["seed"], head["distribution"])


# Noise cases of the Dubins experiments.

def dubins_uniform_case(sigma: float = 0.15) -> UniformBox:
    half = sigma * np.array([0.2, 0.2, 1.0, 1.0])
    return UniformBox(-half, half)


def dubins_mixture_case() -> GaussianMixture:
    ones = np.ones(4)
    return GaussianMixture(
        [0.1, 0.8, 0.1],
        [-0.5 * ones, 0 * ones, 0.5 * ones],
        np.stack([0.05**2 * np.eye(4)] * 3),
    )
