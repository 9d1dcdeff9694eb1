"""Samplers for input measures, file-backed datasets and moment estimates."""

from __future__ import annotations

import csv
import functools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .groundtruth import COV_FLOOR, GaussianMoments, inv_sqrtm_spd, sqrtm_psd

SQRT3 = np.sqrt(3.0)


class DataFormatError(ValueError):
    """Malformed CSV or image input; carries the offending line when known."""

    def __init__(self, message: str, path=None, line: int | None = None):
        self.path = str(path) if path is not None else None
        self.line = line
        where = ""
        if self.path:
            where += f"{self.path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class Sampler:
    """Sample access to a probability measure on R^D."""

    dim: int
    moments: GaussianMoments | None = None

    def draw(self, rng: np.random.Generator, k: int) -> np.ndarray:
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}(dim={self.dim})"


class StandardGaussian(Sampler):
    def __init__(self, dim: int):
        self.dim = dim
        self.moments = GaussianMoments(np.zeros(dim), np.eye(dim))

    def draw(self, rng, k):
        return rng.standard_normal((k, self.dim))


class GaussianSampler(Sampler):
    def __init__(self, mean, cov):
        self.moments = GaussianMoments(mean, cov)
        self.dim = self.moments.dim
        self._root = sqrtm_psd(self.moments.cov)

    def draw(self, rng, k):
        return rng.standard_normal((k, self.dim)) @ self._root + self.moments.mean


class UniformCube(Sampler):
    """Uniform on [-sqrt 3, sqrt 3]^D: zero mean, identity covariance."""

    def __init__(self, dim: int):
        self.dim = dim
        self.moments = GaussianMoments(np.zeros(dim), np.eye(dim))

    def draw(self, rng, k):
        return rng.uniform(-SQRT3, SQRT3, size=(k, self.dim))


T_RANGE = (1.5 * np.pi, 4.5 * np.pi)
ROLL_JITTER = 0.05 * T_RANGE[1]
ROLL_REFERENCE_SEED = 20210101
ROLL_REFERENCE_DRAWS = 1_000_000


def _raw_roll(rng, k):
    t = rng.uniform(*T_RANGE, size=k)
    pts = np.stack([t * np.cos(t), t * np.sin(t)], axis=1)
    return pts + ROLL_JITTER * rng.standard_normal((k, 2))


@functools.lru_cache(maxsize=1)
def _roll_whitening():
    ref = _raw_roll(np.random.default_rng(ROLL_REFERENCE_SEED), ROLL_REFERENCE_DRAWS)
    mean = ref.mean(axis=0)
    cov = np.cov(ref, rowvar=False)
    return mean, inv_sqrtm_spd(cov)


class SwissRoll(Sampler):
    """Planar Swiss roll, whitened to zero mean and identity covariance."""

    def __init__(self):
        self.dim = 2
        self.moments = GaussianMoments(np.zeros(2), np.eye(2))

    def draw(self, rng, k):
        mean, W = _roll_whitening()
        return (_raw_roll(rng, k) - mean) @ W


def swiss_roll_sampler() -> SwissRoll:
    return SwissRoll()


BASES = {"gaussian": StandardGaussian, "uniform_cube": UniformCube, "swiss_roll": lambda d: SwissRoll()}


def make_base(name: str, dim: int) -> Sampler:
    if name not in BASES:
        raise ValueError(f"unknown base distribution {name!r}; choose from {sorted(BASES)}")
    if name == "swiss_roll" and dim != 2:
        raise ValueError("the swiss_roll base exists only for D=2")
    return BASES[name](dim)


@dataclass
class LocationScatterSpec(Sampler):
    """Law of ``S z + u`` for ``z`` drawn from a whitened base."""

    base: Sampler
    S: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.S = np.asarray(self.S, dtype=np.float64)
        self.u = np.asarray(self.u, dtype=np.float64)
        self.dim = self.base.dim
        if self.S.shape != (self.dim, self.dim) or self.u.shape != (self.dim,):
            raise ValueError("S must be DxD and u a D-vector")
        if np.max(np.abs(self.S - self.S.T)) > 1e-12:
            raise ValueError("S must be symmetric")
        self.moments = GaussianMoments(self.u, self.S @ self.S)

    def draw(self, rng, k):
        return self.base.draw(rng, k) @ self.S.T + self.u


def random_rotation(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed rotation (det = +1)."""
    Q, R = np.linalg.qr(rng.standard_normal((dim, dim)))
    Q = Q * np.sign(np.diag(R))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


def scatter_spectrum(dim: int) -> np.ndarray:
    """Geometric sequence from 1/2 to 2 with ``dim`` terms."""
    if dim == 1:
        return np.array([1.0])
    b = 4.0 ** (1.0 / (dim - 1))
    return 0.5 * b ** np.arange(dim)


def make_ls_family(dim: int, n: int, base: str = "gaussian", seed: int = 0) -> list[LocationScatterSpec]:
    if n < 1 or dim < 1:
        raise ValueError("need dim >= 1 and n >= 1")
    base_sampler = make_base(base, dim)
    rng = np.random.default_rng(seed)
    lam = scatter_spectrum(dim)
    family = []
    for _ in range(n):
        R = random_rotation(dim, rng)
        S = R.T @ np.diag(lam) @ R
        family.append(LocationScatterSpec(base_sampler, 0.5 * (S + S.T), np.zeros(dim)))
    return family


class MixtureSampler(Sampler):
    """Finite mixture; component counts are multinomial given the weights."""

    def __init__(self, components: Sequence[Sampler], weights):
        self.components = list(components)
        self.weights = np.asarray(weights, dtype=np.float64)
        if len(self.components) != self.weights.size or self.weights.size == 0:
            raise ValueError("need one weight per component")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1) > 1e-12:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        dims = {c.dim for c in self.components}
        if len(dims) != 1:
            raise ValueError(f"components disagree on dimension: {sorted(dims)}")
        self.dim = dims.pop()

    def draw_labeled(self, rng, k):
        labels = rng.choice(self.weights.size, size=k, p=self.weights)
        out = np.empty((k, self.dim))
        for i, comp in enumerate(self.components):
            idx = np.flatnonzero(labels == i)
            if idx.size:
                out[idx] = comp.draw(rng, idx.size)
        return out, labels

    def draw(self, rng, k):
        return self.draw_labeled(rng, k)[0]


def gaussian_mixture(means, stds, weights=None) -> MixtureSampler:
    """Isotropic Gaussian mixture; ``stds`` may be scalar or per component."""
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    stds = np.broadcast_to(np.asarray(stds, dtype=np.float64), (len(means),))
    if weights is None:
        weights = np.full(len(means), 1.0 / len(means))
    comps = [GaussianSampler(m, (s**2) * np.eye(means.shape[1])) for m, s in zip(means, stds)]
    return MixtureSampler(comps, weights)


# ------------------------------------------------------------- file inputs


@dataclass
class EmpiricalDataset(Sampler):
    """Uniform distribution over the rows of a table."""

    values: np.ndarray
    source: str | None = None
    image_shape: tuple[int, int] | None = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise DataFormatError("dataset needs at least one row", self.source)
        if not np.all(np.isfinite(self.values)):
            raise DataFormatError("dataset contains non-finite values", self.source)
        self.dim = self.values.shape[1]
        self.moments = None

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def draw(self, rng, k):
        return self.values[rng.integers(0, self.size, size=k)]


def _parse_float(cell: str) -> float:
    return float(cell.strip())


def load_empirical(path) -> EmpiricalDataset:
    """Read a rectangular numeric CSV; a non-numeric first row is a header."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    rows = []
    width = None
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = [_parse_float(c) for c in row]
            except ValueError:
                if lineno == 1:
                    width = len(row)
                    continue
                raise DataFormatError(f"non-numeric cell in row {row!r}", path, lineno) from None
            if width is None:
                width = len(vals)
            if len(vals) != width:
                raise DataFormatError(f"expected {width} columns, found {len(vals)}", path, lineno)
            if not all(np.isfinite(vals)):
                raise DataFormatError("non-finite value", path, lineno)
            rows.append(vals)
    if not rows:
        raise DataFormatError("file contains no data rows", path, None)
    return EmpiricalDataset(np.array(rows), str(path))


def _ppm_header(data: bytes, path):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataFormatError("truncated PPM header", path)
        tokens.append(data[start:pos])
    # a single whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_ppm(path) -> tuple[np.ndarray, int, int]:
    """Binary P6 image as an ``(height, width, 3)`` uint8 array."""
    path = Path(path)
    data = path.read_bytes()
    if data[:2] != b"P6":
        raise DataFormatError(f"unsupported image magic {data[:2]!r}; only binary P6 is read", path)
    tokens, offset = _ppm_header(data, path)
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise DataFormatError("malformed PPM header", path) from None
    if maxval != 255:
        raise DataFormatError(f"maxval {maxval} unsupported; expected 255", path)
    need = width * height * 3
    raster = data[offset : offset + need]
    if len(raster) < need:
        raise DataFormatError(f"truncated payload: {len(raster)} of {need} bytes", path)
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3), width, height


def load_palette(path) -> EmpiricalDataset:
    """Pixels of a P6 image as rows in [0, 1]^3."""
    img, width, height = read_ppm(path)
    return EmpiricalDataset(img.reshape(-1, 3) / 255.0, str(path), (width, height))


# ------------------------------------------------------------ standardizing


class AffineSampler(Sampler):
    """Draws ``(base - shift) / scale``."""

    def __init__(self, base: Sampler, shift, scale: float):
        self.base = base
        self.shift = np.asarray(shift, dtype=np.float64)
        self.scale = float(scale)
        self.dim = base.dim
        m = base.moments
        self.moments = None if m is None else GaussianMoments((m.mean - self.shift) / self.scale, m.cov / self.scale**2)

    def draw(self, rng, k):
        return (self.base.draw(rng, k) - self.shift) / self.scale


@dataclass(frozen=True)
class Standardizer:
    """Common shift and isotropic scale applied to every input measure.

    A shared translation plus a scalar dilation commutes with quadratic-cost
    transport, so maps learned on standardized data carry back exactly.
    """

    shift: np.ndarray
    scale: float

    @classmethod
    def fit(cls, samplers: Sequence[Sampler], weights, k: int = 10_000, rng=None) -> "Standardizer":
        rng = rng if rng is not None else np.random.default_rng(0)
        ms = [s.moments if s.moments is not None else estimate_moments(s, k, rng) for s in samplers]
        w = np.asarray(weights, dtype=np.float64)
        shift = sum(a * m.mean for a, m in zip(w, ms))
        # pooled second moment about the common shift, averaged over coordinates
        spread = sum(a * (np.trace(m.cov) + np.sum((m.mean - shift) ** 2)) for a, m in zip(w, ms))
        scale = float(np.sqrt(spread / ms[0].dim))
        if not scale > 0:
            raise ValueError("inputs have zero spread; nothing to standardize")
        return cls(np.asarray(shift, dtype=np.float64), scale)

    def to_std(self, x):
        return (np.asarray(x, dtype=np.float64) - self.shift) / self.scale

    def from_std(self, y):
        return np.asarray(y, dtype=np.float64) * self.scale + self.shift

    def wrap(self, sampler: Sampler) -> Sampler:
        if isinstance(sampler, EmpiricalDataset):
            return EmpiricalDataset(self.to_std(sampler.values), sampler.source, sampler.image_shape)
        return AffineSampler(sampler, self.shift, self.scale)

    def to_dict(self) -> dict:
        return {"shift": self.shift.tolist(), "scale": self.scale}


# ------------------------------------------------------------------ moments


def estimate_moments(source, k: int | None = None, rng: np.random.Generator | None = None) -> GaussianMoments:
    """Sample mean and unbiased covariance, symmetrized, plus ``1e-9 I``.

    Datasets use every row; samplers are drawn ``k`` times.
    """
    if isinstance(source, EmpiricalDataset):
        X = source.values
    elif isinstance(source, Sampler):
        if k is None or k < 2:
            raise ValueError("need k >= 2 draws to estimate moments")
        X = source.draw(rng if rng is not None else np.random.default_rng(0), k)
    else:
        X = np.asarray(source, dtype=np.float64)
    return moments_of(X)


def moments_of(X: np.ndarray) -> GaussianMoments:
    X = np.asarray(X, dtype=np.float64)
    m = X.shape[0]
    mean = X.mean(axis=0)
    C = X - mean
    cov = (C.T @ C) / max(m - 1, 1)
    cov = 0.5 * (cov + cov.T) + COV_FLOOR * np.eye(X.shape[1])
    return GaussianMoments(mean, cov)
