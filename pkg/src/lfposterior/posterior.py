"""Disparity posterior representations and the shared K-bin discretization.

Scalar posteriors (:class:`Dirac`, :class:`Laplace`, :class:`Mixture`,
:class:`Discrete`) describe a single pixel.  The ``*Map`` classes hold the
same representations for a whole image and carry the vectorized
implementations; the scalar functions delegate to them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

_SUM_TOL = 1e-6


@dataclass(frozen=True)
class BinGrid:
    y_min: float = -3.5
    y_max: float = 3.5
    K: int = 108

    def __post_init__(self) -> None:
        if self.K < 1:
            raise ValueError("grid needs at least one bin")
        if not self.y_max > self.y_min:
            raise ValueError("grid range must be non-empty")

    @property
    def h(self) -> float:
        return (self.y_max - self.y_min) / self.K

    @property
    def centers(self) -> np.ndarray:
        return self.y_min + (np.arange(self.K) + 0.5) * self.h

    @property
    def edges(self) -> np.ndarray:
        return self.y_min + np.arange(self.K + 1) * self.h

    def position(self, y) -> np.ndarray:
        """Continuous bin coordinate: 0 at ``y_min``, ``K`` at ``y_max``."""
        return (np.asarray(y, dtype=np.float64) - self.y_min) * self.K / (self.y_max - self.y_min)

    def containing_bin(self, y) -> np.ndarray:
        """Bin whose half-open interval ``[edge_k, edge_k+1)`` holds ``y``, clamped to the grid."""
        return np.clip(np.floor(self.position(y)), 0, self.K - 1).astype(np.int64)

    def nearest_bin(self, y) -> np.ndarray:
        """Bin with the nearest center; exact midpoints go to the lower bin, clamped to the grid."""
        return np.clip(np.ceil(self.position(y)) - 1, 0, self.K - 1).astype(np.int64)

    def contains(self, y) -> np.ndarray:
        y = np.asarray(y)
        return (y >= self.y_min) & (y <= self.y_max)

    def same_as(self, other: "BinGrid") -> bool:
        return (
            self.K == other.K
            and math.isclose(self.y_min, other.y_min, abs_tol=1e-9)
            and math.isclose(self.y_max, other.y_max, abs_tol=1e-9)
        )

    def to_list(self) -> list:
        return [self.K, self.y_min, self.y_max]


DEFAULT_GRID = BinGrid(-3.5, 3.5, 108)


# --------------------------------------------------------------------------
# scalar posteriors


@dataclass(frozen=True)
class Dirac:
    y: float


@dataclass(frozen=True)
class Laplace:
    mu: float
    b: float

    def __post_init__(self) -> None:
        if not self.b > 0:
            raise ValueError(f"Laplace scale must be positive, got {self.b}")


@dataclass(frozen=True)
class Mixture:
    components: tuple[tuple[float, Laplace], ...]

    def __post_init__(self) -> None:
        comps = tuple((float(w), lap) for w, lap in self.components)
        if not comps:
            raise ValueError("mixture needs at least one component")
        weights = np.array([w for w, _ in comps])
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > _SUM_TOL:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        object.__setattr__(self, "components", comps)


@dataclass(frozen=True)
class Discrete:
    grid: BinGrid
    probs: np.ndarray = field(compare=False)

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=np.float64)
        if p.shape != (self.grid.K,):
            raise ValueError(f"expected {self.grid.K} probabilities, got shape {p.shape}")
        if np.any(p < 0) or abs(p.sum() - 1.0) > _SUM_TOL:
            raise ValueError("discrete probabilities must be nonnegative and sum to 1")
        object.__setattr__(self, "probs", p)


DisparityPosterior = Union[Dirac, Laplace, Mixture, Discrete]


# --------------------------------------------------------------------------
# per-image maps


def laplace_cdf(x: np.ndarray, mu: np.ndarray, b: np.ndarray) -> np.ndarray:
    z = (x - mu) / b
    tail = 0.5 * np.exp(-np.abs(z))
    return np.where(z < 0, tail, 1.0 - tail)


def _laplace_bins(mu: np.ndarray, b: np.ndarray, grid: BinGrid) -> np.ndarray:
    """Bin masses ``(K, ...)`` with the outer tails folded into the boundary bins."""
    edges = grid.edges.astype(np.float64)
    edges[0], edges[-1] = -np.inf, np.inf
    shape = (grid.K + 1,) + (1,) * np.ndim(mu)
    cdf = laplace_cdf(edges.reshape(shape), np.asarray(mu, np.float64)[None], np.asarray(b, np.float64)[None])
    return np.diff(cdf, axis=0)


@dataclass
class DiracMap:
    y: np.ndarray
    valid_margin: int = 0

    def discretize(self, grid: BinGrid) -> np.ndarray:
        idx = grid.containing_bin(self.y)
        out = np.zeros((grid.K,) + self.y.shape)
        np.put_along_axis(out, idx[None], 1.0, axis=0)
        return out

    def variance(self) -> np.ndarray:
        return np.zeros(self.y.shape)

    def point_estimate(self) -> np.ndarray:
        return np.asarray(self.y, dtype=np.float64)

    def at(self, t: int, s: int) -> Dirac:
        return Dirac(float(self.y[t, s]))


@dataclass
class LaplaceMap:
    mu: np.ndarray
    b: np.ndarray
    valid_margin: int = 0

    def discretize(self, grid: BinGrid) -> np.ndarray:
        return _laplace_bins(self.mu, self.b, grid)

    def variance(self) -> np.ndarray:
        b = np.asarray(self.b, dtype=np.float64)
        return 2.0 * b * b

    def point_estimate(self) -> np.ndarray:
        return np.asarray(self.mu, dtype=np.float64)

    def at(self, t: int, s: int) -> Laplace:
        return Laplace(float(self.mu[t, s]), float(self.b[t, s]))


@dataclass
class MixtureMap:
    """Laplace mixture per pixel; ``weights``, ``mu`` and ``b`` are ``(M, H, W)``."""

    weights: np.ndarray
    mu: np.ndarray
    b: np.ndarray
    valid_margin: int = 0

    def discretize(self, grid: BinGrid, chunk: int = 8) -> np.ndarray:
        out = np.zeros((grid.K,) + self.mu.shape[1:])
        for start in range(0, self.mu.shape[0], chunk):
            sl = slice(start, start + chunk)
            masses = _laplace_bins(self.mu[sl], self.b[sl], grid)  # (K, m, H, W)
            out += np.einsum("kmhw,mhw->khw", masses, np.asarray(self.weights[sl], np.float64))
        return out

    def variance(self) -> np.ndarray:
        w = np.asarray(self.weights, np.float64)
        mu = np.asarray(self.mu, np.float64)
        b = np.asarray(self.b, np.float64)
        mean = (w * mu).sum(axis=0)
        # equals sum w (2 b^2 + mu^2) - mean^2, written to be exact for one component
        return (w * (2.0 * b * b + (mu - mean) ** 2)).sum(axis=0)

    def point_estimate(self) -> np.ndarray:
        k = np.argmin(self.b, axis=0)
        return np.take_along_axis(np.asarray(self.mu, np.float64), k[None], axis=0)[0]

    def at(self, t: int, s: int) -> Mixture:
        return Mixture(
            tuple(
                (float(self.weights[m, t, s]), Laplace(float(self.mu[m, t, s]), float(self.b[m, t, s])))
                for m in range(self.mu.shape[0])
            )
        )


@dataclass
class DiscreteMap:
    grid: BinGrid
    probs: np.ndarray  # (K, H, W)
    valid_margin: int = 0

    def discretize(self, grid: BinGrid) -> np.ndarray:
        p = np.asarray(self.probs, np.float64)
        if grid.same_as(self.grid):
            return p
        # re-bin each source bin's mass at its center
        idx = grid.containing_bin(self.grid.centers)
        out = np.zeros((grid.K,) + p.shape[1:])
        np.add.at(out, idx, p)
        return out

    def variance(self) -> np.ndarray:
        p = np.asarray(self.probs, np.float64)
        c = self.grid.centers.reshape((-1,) + (1,) * (p.ndim - 1))
        mean = (p * c).sum(axis=0)
        return (p * (c - mean) ** 2).sum(axis=0)

    def point_estimate(self) -> np.ndarray:
        return self.grid.centers[np.argmax(self.probs, axis=0)]

    def at(self, t: int, s: int) -> Discrete:
        return Discrete(self.grid, self.probs[:, t, s])


PosteriorMap = Union[DiracMap, LaplaceMap, MixtureMap, DiscreteMap]


def as_map(p: DisparityPosterior) -> PosteriorMap:
    """Wrap a scalar posterior as a 1x1 map."""
    if isinstance(p, Dirac):
        return DiracMap(np.array([[p.y]]))
    if isinstance(p, Laplace):
        return LaplaceMap(np.array([[p.mu]]), np.array([[p.b]]))
    if isinstance(p, Mixture):
        w = np.array([c[0] for c in p.components])[:, None, None]
        mu = np.array([c[1].mu for c in p.components])[:, None, None]
        b = np.array([c[1].b for c in p.components])[:, None, None]
        return MixtureMap(w, mu, b)
    if isinstance(p, Discrete):
        return DiscreteMap(p.grid, p.probs[:, None, None])
    raise TypeError(f"not a disparity posterior: {type(p).__name__}")


def discretize_posterior(p: DisparityPosterior, grid: BinGrid) -> Discrete:
    """Integrate ``p`` over each bin; tail mass outside the grid goes to the boundary bins."""
    probs = as_map(p).discretize(grid)[:, 0, 0]
    return Discrete(grid, probs)


def variance(p: DisparityPosterior) -> float:
    return float(as_map(p).variance()[0, 0])


def point_estimate(p: DisparityPosterior) -> float:
    """Dirac/Laplace location, argmax bin center, or the sharpest mixture member's mean."""
    return float(as_map(p).point_estimate()[0, 0])


# --------------------------------------------------------------------------
# ground truth


def discretize_ground_truth(modes: Sequence[tuple[float, float]], grid: BinGrid) -> tuple[Discrete, int]:
    """Histogram of GT modes by nearest bin center.

    Returns the distribution and the number of modes that fell outside the
    grid (those are clamped into the boundary bins).
    """
    if not modes:
        raise ValueError("ground truth needs at least one mode")
    ys = np.array([m[0] for m in modes], dtype=np.float64)
    etas = np.array([m[1] for m in modes], dtype=np.float64)
    if abs(etas.sum() - 1.0) > _SUM_TOL:
        raise ValueError(f"mode probabilities sum to {etas.sum()}, expected 1")
    probs = np.zeros(grid.K)
    np.add.at(probs, grid.nearest_bin(ys), etas)
    clamped = int((~grid.contains(ys)).sum())
    return Discrete(grid, probs), clamped


def discretize_ground_truth_map(disparity: np.ndarray, eta: np.ndarray, grid: BinGrid) -> tuple[np.ndarray, int]:
    """Vectorized :func:`discretize_ground_truth` over ``(J, H, W)`` mode arrays."""
    out = np.zeros((grid.K,) + eta.shape[1:])
    present = eta > 0
    idx = grid.nearest_bin(disparity)
    hh, ww = np.indices(eta.shape[1:])
    for j in range(eta.shape[0]):
        out[idx[j], hh, ww] += np.asarray(eta[j], np.float64)
    clamped = int((present & ~grid.contains(disparity)).sum())
    return out, clamped


# --------------------------------------------------------------------------
# dumps


def save_posterior_dump(path, maps: dict[str, PosteriorMap]) -> None:
    """Store per-scene posterior maps in one ``.npz`` archive keyed by scene name."""
    arrays: dict[str, np.ndarray] = {}
    for name, m in maps.items():
        if "/" in name:
            raise ValueError(f"scene name {name!r} may not contain '/'")
        arrays[f"{name}/margin"] = np.array(m.valid_margin)
        if isinstance(m, DiracMap):
            arrays[f"{name}/kind"] = np.array("dirac")
            arrays[f"{name}/y"] = np.asarray(m.y)
        elif isinstance(m, LaplaceMap):
            arrays[f"{name}/kind"] = np.array("laplace")
            arrays[f"{name}/mu"], arrays[f"{name}/b"] = np.asarray(m.mu), np.asarray(m.b)
        elif isinstance(m, MixtureMap):
            arrays[f"{name}/kind"] = np.array("mixture")
            arrays[f"{name}/weights"] = np.asarray(m.weights)
            arrays[f"{name}/mu"], arrays[f"{name}/b"] = np.asarray(m.mu), np.asarray(m.b)
        elif isinstance(m, DiscreteMap):
            arrays[f"{name}/kind"] = np.array("discrete")
            arrays[f"{name}/grid"] = np.array([m.grid.K, m.grid.y_min, m.grid.y_max], np.float64)
            arrays[f"{name}/probs"] = np.asarray(m.probs)
        else:
            raise TypeError(f"not a posterior map: {type(m).__name__}")
    with open(path, "wb") as fh:
        np.savez_compressed(fh, **arrays)


def load_posterior_dump(path) -> dict[str, PosteriorMap]:
    out: dict[str, PosteriorMap] = {}
    with np.load(path, allow_pickle=False) as z:
        names = sorted({k.split("/", 1)[0] for k in z.files})
        for name in names:
            kind = str(z[f"{name}/kind"])
            margin = int(z[f"{name}/margin"])
            if kind == "dirac":
                out[name] = DiracMap(z[f"{name}/y"], margin)
            elif kind == "laplace":
                out[name] = LaplaceMap(z[f"{name}/mu"], z[f"{name}/b"], margin)
            elif kind == "mixture":
                out[name] = MixtureMap(z[f"{name}/weights"], z[f"{name}/mu"], z[f"{name}/b"], margin)
            elif kind == "discrete":
                k, lo, hi = z[f"{name}/grid"]
                out[name] = DiscreteMap(BinGrid(float(lo), float(hi), int(k)), z[f"{name}/probs"], margin)
            else:
                raise ValueError(f"{name}: unknown posterior kind {kind!r}")
    return out
