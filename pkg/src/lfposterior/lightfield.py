"""4D light-field container, view-stack extraction and EPI-shift shearing.

Views are indexed by signed offsets from the center view: ``u' = u - U // 2``
and ``v' = v - V // 2``.  A scene point at disparity ``d`` appears at
``s + d * u'`` in view ``u'`` (content moves right with increasing ``u'``)
and at ``t + d * v'`` in view ``v'`` (content moves down).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._binio import read_f32, read_header, read_struct, write_f32, write_header

LF_MAGIC = b"LFMM"
LF_VERSION = 1
_RANGE_TOL = 1e-5


@dataclass(frozen=True)
class LightField:
    """Dense view grid; ``data`` is float32 indexed ``[u][v][c][t][s]``."""

    data: np.ndarray
    valid_margin: int = 0

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 5:
            raise ValueError(f"light field data must be 5D [U,V,C,H,W], got shape {data.shape}")
        U, V, _, H, W = data.shape
        if U % 2 == 0 or V % 2 == 0:
            raise ValueError(f"view grid must have odd size, got {U}x{V}")
        if data.size and (data.min() < -_RANGE_TOL or data.max() > 1.0 + _RANGE_TOL):
            raise ValueError("light field samples must lie in [0, 1]")
        if not 0 <= self.valid_margin <= min(H, W) // 2:
            raise ValueError(f"valid_margin {self.valid_margin} outside [0, {min(H, W) // 2}]")
        object.__setattr__(self, "data", data)

    @property
    def views_u(self) -> int:
        return self.data.shape[0]

    @property
    def views_v(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def height(self) -> int:
        return self.data.shape[3]

    @property
    def width(self) -> int:
        return self.data.shape[4]

    @property
    def max_offset(self) -> int:
        return max(self.views_u, self.views_v) // 2

    def center_view(self) -> np.ndarray:
        return self.data[self.views_u // 2, self.views_v // 2]

    def interior(self) -> tuple[slice, slice]:
        """(row, column) slices of the region not affected by border handling."""
        m = self.valid_margin
        return slice(m, self.height - m), slice(m, self.width - m)

    def crop(self, top: int, left: int, height: int, width: int) -> "LightField":
        if top < 0 or left < 0 or top + height > self.height or left + width > self.width:
            raise ValueError("crop window outside the light field")
        dist = min(top, left, self.height - top - height, self.width - left - width)
        margin = max(0, self.valid_margin - dist)
        margin = min(margin, min(height, width) // 2)
        data = self.data[:, :, :, top:top + height, left:left + width]
        return LightField(np.ascontiguousarray(data), margin)


@dataclass(frozen=True)
class ViewStacks:
    """The four view stacks fed to the network, each ``(N * C, H, W)``."""

    horizontal: np.ndarray
    vertical: np.ndarray
    diag_main: np.ndarray
    diag_anti: np.ndarray

    def as_tuple(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return self.horizontal, self.vertical, self.diag_main, self.diag_anti


def extract_stacks(lf: LightField) -> ViewStacks:
    """Horizontal, vertical and both diagonal view stacks, views in increasing index order.

    The anti-diagonal runs through ``(u, U - 1 - u)`` for increasing ``u``.
    """
    U, V, C, H, W = lf.data.shape
    if U != V:
        raise ValueError(f"view stacks need a square view grid, got {U}x{V}")
    c = U // 2
    idx = np.arange(U)
    d = lf.data

    def flat(views: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(views.reshape(U * C, H, W))

    return ViewStacks(
        horizontal=flat(d[:, c]),
        vertical=flat(d[c, :]),
        diag_main=flat(d[idx, idx]),
        diag_anti=flat(d[idx, U - 1 - idx]),
    )


def shift_axis(x: np.ndarray, amount: float, axis: int) -> np.ndarray:
    """Translate ``x`` by ``amount`` samples along ``axis``: ``out[s] = x(s - amount)``.

    Fractional positions are linearly interpolated between the floor and ceil
    samples; indices are clamped to the edge (edge replication).  Integer
    amounts reduce to an exact gather.
    """
    n = x.shape[axis]
    pos = -float(amount)
    base = math.floor(pos)
    frac = pos - base
    idx0 = np.clip(np.arange(n) + base, 0, n - 1)
    lo = np.take(x, idx0, axis=axis)
    if frac == 0.0:
        return lo
    idx1 = np.clip(np.arange(n) + base + 1, 0, n - 1)
    hi = np.take(x, idx1, axis=axis)
    w = x.dtype.type(frac)
    return (x.dtype.type(1.0) - w) * lo + w * hi


def shear_views(data: np.ndarray, delta_y: float) -> np.ndarray:
    """Apply the per-view shear to raw ``[U,V,...,H,W]`` data (horizontal then vertical)."""
    U, V = data.shape[:2]
    out = np.empty_like(data)
    for ui in range(U):
        col = shift_axis(data[ui], delta_y * (ui - U // 2), axis=-1)
        for vi in range(V):
            out[ui, vi] = shift_axis(col[vi], delta_y * (vi - V // 2), axis=-2)
    return out


def epi_shift(lf: LightField, delta_y: float) -> LightField:
    """Shear the light field so every scene disparity ``d`` becomes ``d + delta_y``.

    View ``(u', v')`` is resampled at ``(s - delta_y * u', t - delta_y * v')``;
    the center view is untouched.  The valid margin grows by
    ``ceil(|delta_y| * max_offset)`` to account for edge replication.
    """
    limit = min(lf.height, lf.width) / 2
    reach = abs(delta_y) * lf.max_offset
    if reach >= limit:
        raise ValueError(f"shift {delta_y} moves outer views by {reach:.3f}px, limit is < {limit}")
    margin = lf.valid_margin + math.ceil(reach)
    if margin > min(lf.height, lf.width) // 2:
        raise ValueError(f"accumulated valid margin {margin} exceeds half the image size")
    if delta_y == 0:
        return LightField(lf.data.copy(), lf.valid_margin)
    return LightField(shear_views(lf.data, delta_y), margin)


def disparity_offset_of_shift(delta_y: float) -> float:
    """Disparity offset that :func:`epi_shift` adds to every scene point."""
    return float(delta_y)


def rotate_lightfield(lf: LightField, quarter_turns: int) -> LightField:
    """Rotate images and the view grid together by ``quarter_turns`` * 90 degrees (counter-clockwise).

    Rotating both keeps each point's disparity unchanged; the horizontal
    stack of the result is the rotated vertical stack of the input.
    """
    k = quarter_turns % 4
    if k == 0:
        return LightField(lf.data.copy(), lf.valid_margin)
    if lf.views_u != lf.views_v:
        raise ValueError("rotation needs a square view grid")
    data = np.rot90(lf.data, k, axes=(3, 4))
    # the view grid is laid out with rows = v (axis 1) and columns = u (axis 0)
    data = np.rot90(data, k, axes=(1, 0))
    return LightField(np.ascontiguousarray(data), lf.valid_margin)


def write_lightfield(path: str | Path, lf: LightField) -> None:
    with open(path, "wb") as fh:
        write_header(fh, LF_MAGIC, LF_VERSION)
        fh.write(struct.pack("<5I", *lf.data.shape))
        fh.write(struct.pack("<I", lf.valid_margin))
        write_f32(fh, lf.data)


def read_lightfield(path: str | Path) -> LightField:
    with open(path, "rb") as fh:
        read_header(fh, LF_MAGIC, (LF_VERSION,))
        shape = read_struct(fh, "<5I")
        (margin,) = read_struct(fh, "<I")
        data = read_f32(fh, int(np.prod(shape))).reshape(shape)
    return LightField(data, margin)
