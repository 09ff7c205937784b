"""Evaluation: point-estimate errors, discretized KL divergence and sparsification."""

from __future__ import annotations

import io
import json
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .posterior import (
    DEFAULT_GRID,
    BinGrid,
    DiracMap,
    DiscreteMap,
    PosteriorMap,
    discretize_ground_truth_map,
)

KLD_EPS = 1e-9
BADPIX_TAU = 0.07
MULTIMODAL_THRESHOLD = 0.3
REPORT_KEYS = (
    "mse",
    "badpix",
    "kld_unimodal",
    "kld_multimodal",
    "kld_overall",
    "ause",
    "time_sec",
    "n_pixels",
    "n_multimodal",
)
CURVE_HEADER = "fraction,metric,oracle,sparsification_error"


def _pair(preds, gts) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64).ravel()
    g = np.asarray(gts, dtype=np.float64).ravel()
    if p.shape != g.shape:
        raise ValueError(f"prediction/GT size mismatch: {p.size} vs {g.size}")
    if p.size == 0:
        raise ValueError("no pixels to evaluate")
    return p, g


def mse(preds, gts) -> float:
    p, g = _pair(preds, gts)
    return float(np.mean((p - g) ** 2))


def badpix(preds, gts, tau: float = BADPIX_TAU) -> float:
    """Fraction of pixels with ``|error| > tau`` (strict)."""
    p, g = _pair(preds, gts)
    return float(np.mean(np.abs(p - g) > tau))


# --------------------------------------------------------------------------
# KL divergence


def kld_per_pixel(gt_probs: np.ndarray, pred_probs: np.ndarray, eps: float = KLD_EPS) -> np.ndarray:
    """``sum_k p log(p / max(q, eps))`` over the leading (bin) axis; ``0 log 0 = 0``."""
    p = np.asarray(gt_probs, dtype=np.float64)
    q = np.asarray(pred_probs, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"histogram shapes differ: {p.shape} vs {q.shape}")
    pos = p > 0
    ratio = np.where(pos, p, 1.0) / np.maximum(q, eps)
    return np.where(pos, p * np.log(ratio), 0.0).sum(axis=0)


@dataclass(frozen=True)
class KLDResult:
    unimodal: float | None
    multimodal: float | None
    overall: float

    def __iter__(self):
        return iter((self.unimodal, self.multimodal, self.overall))


def kld(
    gt_probs: np.ndarray,
    pred_probs: np.ndarray,
    multimodal: np.ndarray,
    grid: BinGrid | None = None,
    pred_grid: BinGrid | None = None,
    per_pixel: bool = False,
) -> KLDResult:
    """Class-split discrete KLD for ``(K, ...)`` histograms.

    Aggregates with ``1 / (N K)`` per class; ``per_pixel=True`` switches to
    ``1 / N``.  A class without pixels reports ``None``.
    """
    if grid is not None and pred_grid is not None and not grid.same_as(pred_grid):
        raise ValueError(f"grid mismatch: {grid.to_list()} vs {pred_grid.to_list()}")
    terms = kld_per_pixel(gt_probs, pred_probs).ravel()
    multi = np.asarray(multimodal, dtype=bool).ravel()
    if multi.shape != terms.shape:
        raise ValueError("multimodal mask does not match the histograms")
    if terms.size == 0:
        raise ValueError("no pixels to evaluate")
    K = np.shape(gt_probs)[0]
    norm = 1 if per_pixel else K

    def agg(sel: np.ndarray) -> float | None:
        n = int(sel.sum())
        return float(terms[sel].sum() / (n * norm)) if n else None

    overall = agg(np.ones_like(multi))
    return KLDResult(agg(~multi), agg(multi), overall)


# --------------------------------------------------------------------------
# sparsification


@dataclass
class SparsificationCurve:
    fractions: np.ndarray
    metric: np.ndarray
    oracle: np.ndarray

    @property
    def sparsification_error(self) -> np.ndarray:
        return self.metric - self.oracle

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(CURVE_HEADER + "\n")
        for row in zip(self.fractions, self.metric, self.oracle, self.sparsification_error):
            buf.write(",".join(f"{v:.9g}" for v in row) + "\n")
        return buf.getvalue()


def _removal_curve(order: np.ndarray, values: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Mean of ``values`` after dropping the first ``n`` entries of ``order``, for each ``n``."""
    v = values[order]
    tail = np.concatenate([np.cumsum(v[::-1])[::-1], [0.0]])
    return tail[counts] / (v.size - counts)


def _pixel_values(errors: np.ndarray, metric: str, tau: float) -> np.ndarray:
    if metric == "badpix":
        return (errors > tau).astype(np.float64)
    if metric == "mse":
        return errors ** 2
    raise ValueError(f"unknown sparsification metric {metric!r}")


def sparsification(
    uncertainties,
    errors,
    S: int = 100,
    metric: str = "badpix",
    tau: float = BADPIX_TAU,
) -> SparsificationCurve:
    """Metric of the retained pixels as the most uncertain ``s`` fraction is removed.

    Fractions are ``0, 1/S, ..., 1 - 1/S``; ``floor(s N)`` pixels are removed,
    ties broken by the lower pixel index first.  Both curves are normalized by
    the full-set value (left unscaled when that value is 0).
    """
    u = np.asarray(uncertainties, dtype=np.float64).ravel()
    e = np.abs(np.asarray(errors, dtype=np.float64).ravel())
    if u.shape != e.shape:
        raise ValueError("uncertainty and error sizes differ")
    if u.size == 0:
        raise ValueError("no pixels to evaluate")
    if S < 1:
        raise ValueError("S must be positive")
    fractions = np.arange(S) / S
    counts = np.minimum(np.arange(S, dtype=np.int64) * u.size // S, u.size - 1)
    values = _pixel_values(e, metric, tau)
    curve = _removal_curve(np.argsort(-u, kind="stable"), values, counts)
    oracle = _removal_curve(np.argsort(-e, kind="stable"), values, counts)
    base = values.mean()
    if base > 0:
        curve, oracle = curve / base, oracle / base
    return SparsificationCurve(fractions, curve, oracle)


def ause(curve: SparsificationCurve) -> float:
    """Trapezoidal area under the sparsification error over ``[0, 1]``.

    The last sample is held constant up to ``s = 1``.
    """
    se = np.asarray(curve.sparsification_error, dtype=np.float64)
    s = np.asarray(curve.fractions, dtype=np.float64)
    area = float(np.sum(0.5 * (se[1:] + se[:-1]) * np.diff(s))) if se.size > 1 else 0.0
    return area + float(se[-1] * (1.0 - s[-1]))


# --------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    mse: float
    badpix: float
    kld_unimodal: float | None
    kld_multimodal: float | None
    kld_overall: float
    ause: float | None
    time_sec: float
    n_pixels: int
    n_multimodal: int
    curve: SparsificationCurve | None = field(default=None, repr=False)

    @property
    def n_unimodal(self) -> int:
        return self.n_pixels - self.n_multimodal

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_KEYS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def summary_lines(self) -> list[str]:
        def fmt(v):
            return "null" if v is None else f"{v:.6g}"

        return [f"{k}: {fmt(getattr(self, k))}" for k in REPORT_KEYS]


PosteriorSource = Callable[[object], PosteriorMap]


def ground_truth_replay(record, grid: BinGrid = DEFAULT_GRID) -> DiscreteMap:
    """Posterior equal to the discretized ground truth (a perfect oracle)."""
    gt = record.ground_truth
    hist, _ = discretize_ground_truth_map(gt.disparity, gt.eta, grid)
    return DiscreteMap(grid, hist, record.lightfield.valid_margin)


def evaluate(
    source: PosteriorSource,
    records: Iterable,
    grid: BinGrid = DEFAULT_GRID,
    S: int = 100,
    per_pixel_kld: bool = False,
) -> MetricsReport:
    """Run ``source`` on every record and aggregate metrics over all valid interior pixels.

    ``source`` maps a scene record to a posterior map; ``time_sec`` is the mean
    wall-clock time of that call per scene.
    """
    records = list(records)
    if not records:
        raise ValueError("cannot evaluate an empty dataset")
    preds, gts, uncert, multi, klds = [], [], [], [], []
    elapsed = 0.0
    dirac = True
    for rec in records:
        start = time.perf_counter()
        post = source(rec)
        elapsed += time.perf_counter() - start
        if isinstance(post, DiscreteMap) and not post.grid.same_as(grid):
            raise ValueError(f"posterior grid {post.grid.to_list()} does not match evaluation grid {grid.to_list()}")
        dirac &= isinstance(post, DiracMap)
        gt = rec.ground_truth
        m = max(post.valid_margin, rec.lightfield.valid_margin)
        h, w = gt.shape
        if 2 * m >= min(h, w):
            raise ValueError(f"{rec.name}: no valid interior pixels")
        sl = (slice(m, h - m), slice(m, w - m))
        preds.append(post.point_estimate()[sl].ravel())
        gts.append(gt.closest()[sl].ravel())
        uncert.append(post.variance()[sl].ravel())
        mm = gt.multimodal_mask(MULTIMODAL_THRESHOLD)[sl]
        multi.append(mm.ravel())
        gt_hist, _ = discretize_ground_truth_map(gt.disparity, gt.eta, grid)
        q = post.discretize(grid)
        klds.append((gt_hist[(slice(None),) + sl].reshape(grid.K, -1), q[(slice(None),) + sl].reshape(grid.K, -1)))
    pred = np.concatenate(preds)
    gtv = np.concatenate(gts)
    u = np.concatenate(uncert)
    mm = np.concatenate(multi)
    p_hist = np.concatenate([k[0] for k in klds], axis=1)
    q_hist = np.concatenate([k[1] for k in klds], axis=1)
    kl = kld(p_hist, q_hist, mm, per_pixel=per_pixel_kld)
    curve = sparsification(u, pred - gtv, S=S)
    undefined = dirac or not np.any(u != u[0])
    return MetricsReport(
        mse=mse(pred, gtv),
        badpix=badpix(pred, gtv),
        kld_unimodal=kl.unimodal,
        kld_multimodal=kl.multimodal,
        kld_overall=kl.overall,
        ause=None if undefined else ause(curve),
        time_sec=elapsed / len(records),
        n_pixels=int(pred.size),
        n_multimodal=int(mm.sum()),
        curve=curve,
    )
