"""Training objectives for the four posterior heads.

Every loss averages a per-pixel term over the valid pixels of a batch and
is recorded on the active tape with an analytic gradient for the network
outputs.  Unimodal variants supervise the closest (largest-disparity) mode;
the ``_mm`` variants weight every mode by its probability.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import ShapeError, Tensor, custom_op
from .posterior import BinGrid

log = logging.getLogger(__name__)


@dataclass
class PixelTarget:
    modes: list[tuple[float, float]]
    closest_disparity: float
    valid: bool = True


@dataclass
class TargetBatch:
    """Dense per-pixel supervision; mode arrays are ``(B, J, H, W)``, ``valid`` is ``(B, H, W)``.

    Unused mode slots carry zero probability.
    """

    modes_y: np.ndarray
    modes_p: np.ndarray
    valid: np.ndarray

    def __post_init__(self) -> None:
        self.modes_y = np.asarray(self.modes_y, dtype=np.float32)
        self.modes_p = np.asarray(self.modes_p, dtype=np.float32)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.modes_y.shape != self.modes_p.shape or self.modes_y.ndim != 4:
            raise ShapeError("mode arrays must share a (B, J, H, W) shape")
        b, _, h, w = self.modes_y.shape
        if self.valid.shape != (b, h, w):
            raise ShapeError(f"valid mask must be {(b, h, w)}, got {self.valid.shape}")

    @classmethod
    def from_pixels(cls, pixels: Sequence[Sequence[Sequence[tuple[float, float]]]]) -> "TargetBatch":
        """Build a single-image batch from an ``H x W`` nested list of mode lists."""
        h, w = len(pixels), len(pixels[0])
        j = max(len(m) for row in pixels for m in row)
        y = np.zeros((1, j, h, w), np.float32)
        p = np.zeros((1, j, h, w), np.float32)
        for t, row in enumerate(pixels):
            for s, modes in enumerate(row):
                for k, (yy, pp) in enumerate(modes):
                    y[0, k, t, s], p[0, k, t, s] = yy, pp
        return cls(y, p, np.ones((1, h, w), bool))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.valid.shape

    def closest(self) -> np.ndarray:
        """Largest disparity among present modes (the nearest surface)."""
        return np.where(self.modes_p > 0, self.modes_y, -np.inf).max(axis=1)

    def shifted(self, offsets: Sequence[float] | np.ndarray) -> "TargetBatch":
        """Add a per-sample disparity offset (the effect of an EPI shift)."""
        off = np.asarray(offsets, dtype=np.float32).reshape(-1, 1, 1, 1)
        return TargetBatch(self.modes_y + off, self.modes_p, self.valid)

    def pixel(self, b: int, t: int, s: int) -> PixelTarget:
        modes = [
            (float(y), float(p))
            for y, p in zip(self.modes_y[b, :, t, s], self.modes_p[b, :, t, s])
            if p > 0
        ]
        return PixelTarget(modes, float(self.closest()[b, t, s]), bool(self.valid[b, t, s]))


def _check_head(x: Tensor, targets: TargetBatch, channels: int | None = 1) -> None:
    b, h, w = targets.shape
    if x.data.ndim != 4 or x.shape[0] != b or x.shape[2:] != (h, w):
        raise ShapeError(f"prediction shape {x.shape} does not match targets {(b, h, w)}")
    if channels is not None and x.shape[1] != channels:
        raise ShapeError(f"expected {channels} prediction channel(s), got {x.shape[1]}")


def _count(mask: np.ndarray, name: str) -> int:
    n = int(mask.sum())
    if n == 0:
        raise ValueError(f"{name}: no valid pixels in batch")
    return n


def _unimodal(targets: TargetBatch) -> tuple[np.ndarray, np.ndarray]:
    y = targets.closest()[:, None]
    return y, np.ones_like(y)


def _weighted_l1(pred: Tensor, ys: np.ndarray, ws: np.ndarray, valid: np.ndarray, name: str) -> Tensor:
    n = _count(valid, name)
    p = pred.data[:, 0]
    diff = p[:, None] - ys.astype(p.dtype)
    w = ws.astype(p.dtype)
    term = (w * np.abs(diff)).sum(axis=1)
    value = np.asarray(term[valid].sum() / n, dtype=p.dtype)

    def grad_fn(g):
        gp = (w * np.sign(diff)).sum(axis=1) * valid / n
        return ((g * gp)[:, None].astype(p.dtype),)

    return custom_op(value, (pred,), grad_fn)


def loss_l1(pred_y: Tensor, targets: TargetBatch) -> Tensor:
    """Mean absolute error to the closest disparity."""
    _check_head(pred_y, targets)
    ys, ws = _unimodal(targets)
    return _weighted_l1(pred_y, ys, ws, targets.valid, "loss_l1")


def loss_l1_mm(pred_y: Tensor, targets: TargetBatch) -> Tensor:
    """Probability-weighted absolute error over all modes."""
    _check_head(pred_y, targets)
    return _weighted_l1(pred_y, targets.modes_y, targets.modes_p, targets.valid, "loss_l1_mm")


def _laplace_nll(
    mu: Tensor,
    logb: Tensor,
    ys: np.ndarray,
    ws: np.ndarray,
    log_weight: np.ndarray | None,
    pixels: np.ndarray,
    name: str,
    allow_empty: bool = False,
) -> Tensor:
    """Mean over ``pixels`` of ``sum_j w_j |y_j - mu| / b + c * log b`` with ``b = exp(logb)``.

    ``c`` is 1 unless ``log_weight`` is given (the masked ensemble losses).
    """
    m = mu.data[:, 0]
    s = logb.data[:, 0]
    n = int(pixels.sum())
    if n == 0:
        if not allow_empty:
            raise ValueError(f"{name}: no valid pixels in batch")
        log.info("%s: no pixels inside the shift window, loss is zero", name)
        zero = np.zeros_like(m)[:, None]
        return custom_op(np.asarray(0.0, dtype=m.dtype), (mu, logb), lambda g: (zero, zero))
    diff = m[:, None] - ys.astype(m.dtype)
    w = ws.astype(m.dtype)
    a = (w * np.abs(diff)).sum(axis=1)
    inv_b = np.exp(-s)
    c = np.ones_like(s) if log_weight is None else log_weight.astype(m.dtype)
    term = a * inv_b + c * s
    value = np.asarray(term[pixels].sum() / n, dtype=m.dtype)

    def grad_fn(g):
        gmu = (w * np.sign(diff)).sum(axis=1) * inv_b * pixels / n
        gs = (c - a * inv_b) * pixels / n
        return (g * gmu)[:, None].astype(m.dtype), (g * gs)[:, None].astype(m.dtype)

    return custom_op(value, (mu, logb), grad_fn)


def loss_upr(pred_mu: Tensor, pred_logb: Tensor, targets: TargetBatch) -> Tensor:
    """Laplace negative log-likelihood (up to log 2) of the closest disparity."""
    _check_head(pred_mu, targets)
    _check_head(pred_logb, targets)
    ys, ws = _unimodal(targets)
    return _laplace_nll(pred_mu, pred_logb, ys, ws, None, targets.valid, "loss_upr")


def loss_upr_mm(pred_mu: Tensor, pred_logb: Tensor, targets: TargetBatch) -> Tensor:
    """Expected Laplace negative log-likelihood over the GT modes (scale ``b`` in the denominator)."""
    _check_head(pred_mu, targets)
    _check_head(pred_logb, targets)
    return _laplace_nll(pred_mu, pred_logb, targets.modes_y, targets.modes_p, None, targets.valid, "loss_upr_mm")


def in_window(y: np.ndarray, delta_y: float) -> np.ndarray:
    """Strict shift-window test ``|y| < delta_y / 2``."""
    return np.abs(y) < delta_y / 2.0


def loss_ese(pred_mu: Tensor, pred_logb: Tensor, shifted_targets: TargetBatch, delta_y: float) -> Tensor:
    """Laplace loss restricted to pixels whose (already shifted) closest disparity lies in the window.

    Averages over the masked-in pixels; an empty window yields a zero loss.
    """
    _check_head(pred_mu, shifted_targets)
    _check_head(pred_logb, shifted_targets)
    ys, ws = _unimodal(shifted_targets)
    mask = in_window(ys, delta_y)
    ws = ws * mask
    pixels = shifted_targets.valid & mask.any(axis=1)
    return _laplace_nll(pred_mu, pred_logb, ys, ws, ws.sum(axis=1), pixels, "loss_ese", allow_empty=True)


def loss_ese_mm(pred_mu: Tensor, pred_logb: Tensor, shifted_targets: TargetBatch, delta_y: float) -> Tensor:
    """Multimodal windowed loss: each mode is masked on its own and weighted by its probability."""
    _check_head(pred_mu, shifted_targets)
    _check_head(pred_logb, shifted_targets)
    ys = shifted_targets.modes_y
    mask = in_window(ys, delta_y) & (shifted_targets.modes_p > 0)
    ws = shifted_targets.modes_p * mask
    pixels = shifted_targets.valid & mask.any(axis=1)
    return _laplace_nll(pred_mu, pred_logb, ys, ws, ws.sum(axis=1), pixels, "loss_ese_mm", allow_empty=True)


def _log_softmax(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    return logp, np.exp(logp)


def _cross_entropy(logits: Tensor, target: np.ndarray, pixels: np.ndarray, name: str) -> Tensor:
    n = _count(pixels, name)
    logp, prob = _log_softmax(logits.data)
    t = target.astype(logits.data.dtype)
    term = -(t * logp).sum(axis=1)
    value = np.asarray(term[pixels].sum() / n, dtype=logits.data.dtype)

    def grad_fn(g):
        gl = (prob * t.sum(axis=1, keepdims=True) - t) * (pixels[:, None] / n)
        return ((g * gl).astype(logits.data.dtype),)

    return custom_op(value, (logits,), grad_fn)


def gt_histogram(targets: TargetBatch, grid: BinGrid) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel GT distribution ``(B, K, H, W)`` and a mask of pixels whose modes all lie on the grid."""
    b, j, h, w = targets.modes_y.shape
    hist = np.zeros((b, grid.K, h, w), np.float32)
    idx = grid.nearest_bin(targets.modes_y)
    bb, hh, ww = np.indices((b, h, w))
    for k in range(j):
        hist[bb, idx[:, k], hh, ww] += targets.modes_p[:, k]
    present = targets.modes_p > 0
    on_grid = ~(present & ~grid.contains(targets.modes_y)).any(axis=1)
    return hist, on_grid


def loss_ce(logits: Tensor, targets: TargetBatch, grid: BinGrid) -> Tensor:
    """Cross-entropy against the bin of the closest disparity; off-grid pixels are skipped."""
    _check_head(logits, targets, channels=grid.K)
    y = targets.closest()
    onehot = np.zeros(logits.shape, np.float32)
    np.put_along_axis(onehot, grid.nearest_bin(y)[:, None], 1.0, axis=1)
    pixels = targets.valid & grid.contains(y)
    return _cross_entropy(logits, onehot, pixels, "loss_ce")


def loss_ce_mm(logits: Tensor, targets: TargetBatch, grid: BinGrid) -> Tensor:
    """Cross-entropy against the discretized multimodal GT; pixels with off-grid modes are skipped."""
    _check_head(logits, targets, channels=grid.K)
    hist, on_grid = gt_histogram(targets, grid)
    return _cross_entropy(logits, hist, targets.valid & on_grid, "loss_ce_mm")
