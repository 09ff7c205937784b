"""Minimal dense-tensor engine with tape-based reverse-mode differentiation.

Only the layer set used by the multi-stream network is provided: 2x2
convolution with alternating padding, ReLU, batch normalization, quarter-turn
rotation, channel concatenation/slicing and a channel softmax, plus a few
reductions used by tests and the loss functions.

Operations record themselves on the innermost active :class:`Tape`::

    with Tape() as tape:
        y = relu(conv2x2(x, w, b, PadPhase.LEADING))
        loss = sum_all(y)
    backward(loss, tape, store)
"""

from __future__ import annotations

import contextlib
import enum
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from ._binio import FormatError, read_f32, read_header, read_struct, write_f32, write_header

_DTYPE = [np.float32]
_TAPES: list["Tape"] = []

CHECKPOINT_MAGIC = b"LFCP"
CHECKPOINT_VERSION = 1
BUFFER_SUFFIXES = (".running_mean", ".running_var")


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for newly created tensors.

    Training always runs in float32; float64 exists for finite-difference oracles.
    """
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_from_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_DTYPE[-1])
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._from_op = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def custom_op(out_data: np.ndarray, inputs: Sequence[Tensor], grad_fn) -> Tensor:
    """Wrap ``out_data`` as a tensor and record ``grad_fn`` on the active tape.

    ``grad_fn`` maps the upstream gradient to one gradient (or None) per input.
    """
    out = Tensor(out_data)
    out._from_op = True
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].nodes.append(_Node(out, tuple(inputs), grad_fn))
    return out


def backward(loss: Tensor, tape: Tape, params: "ParamStore | None" = None) -> None:
    """Accumulate d(loss)/d(leaf) into the ``grad`` slot of every leaf tensor.

    Intermediate gradients live only for the duration of the call; leaf
    gradients accumulate across calls until zeroed.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    if params is not None:
        for p in params.parameters():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._from_op:
                key = id(t)
                pending[key] = pending[key] + gi if key in pending else gi
            elif t.grad is None:
                t.grad = np.array(gi, dtype=t.data.dtype)
            else:
                t.grad += gi


# --------------------------------------------------------------------------
# layers


class PadPhase(enum.Enum):
    LEADING = "leading"  # pad one row/column before the image
    TRAILING = "trailing"  # pad one row/column after the image


def conv2x2(x: Tensor, weight: Tensor, bias: Tensor, pad_phase: PadPhase) -> Tensor:
    """2x2 cross-correlation, stride one, padded by a single row and column.

    ``LEADING`` pads top/left, ``TRAILING`` pads bottom/right; either way the
    spatial size is preserved.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2x2 input must be 4D [B,C,H,W], got rank {x.data.ndim}")
    if weight.data.ndim != 4 or weight.shape[2:] != (2, 2):
        raise ShapeError(f"conv2x2 weight must be [Cout,Cin,2,2], got {weight.shape}")
    b, cin, h, w = x.shape
    cout = weight.shape[0]
    if weight.shape[1] != cin:
        raise ShapeError(f"conv2x2 input channel mismatch: input Cin={cin}, weight Cin={weight.shape[1]}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2x2 bias must have shape ({cout},), got {bias.shape}")

    pad = ((0, 0), (1, 0), (1, 0), (0, 0)) if pad_phase is PadPhase.LEADING else ((0, 0), (0, 1), (0, 1), (0, 0))
    xp = np.pad(x.data.transpose(0, 2, 3, 1), pad)
    taps = [(0, 0), (0, 1), (1, 0), (1, 1)]
    cols = np.concatenate([xp[:, i:i + h, j:j + w, :] for i, j in taps], axis=3).reshape(-1, 4 * cin)
    # rows of wmat follow the tap-major layout of cols
    wmat = weight.data.transpose(2, 3, 1, 0).reshape(4 * cin, cout)
    out = cols @ wmat
    out += bias.data
    out_data = np.ascontiguousarray(out.reshape(b, h, w, cout).transpose(0, 3, 1, 2))

    def grad_fn(g: np.ndarray):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (cols.T @ gm).reshape(2, 2, cin, cout).transpose(3, 2, 0, 1)
        gb = gm.sum(axis=0)
        gx = None
        if x.requires_grad:
            gcols = (gm @ wmat.T).reshape(b, h, w, 4, cin)
            gxp = np.zeros_like(xp)
            for t, (i, j) in enumerate(taps):
                gxp[:, i:i + h, j:j + w, :] += gcols[:, :, :, t, :]
            if pad_phase is PadPhase.LEADING:
                gxp = gxp[:, 1:, 1:, :]
            else:
                gxp = gxp[:, :h, :w, :]
            gx = np.ascontiguousarray(gxp.transpose(0, 3, 1, 2))
        return gx, np.ascontiguousarray(gw), gb

    return custom_op(out_data, (x, weight, bias), grad_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return custom_op(x.data * mask, (x,), lambda g: (g * mask,))


def batchnorm(
    x: Tensor,
    scale: Tensor,
    offset: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization over (B, H, W).

    In train mode the batch statistics are used and the running statistics
    are updated in place (unbiased variance, as is conventional).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batchnorm input must be 4D, got rank {x.data.ndim}")
    c = x.shape[1]
    if scale.shape != (c,) or offset.shape != (c,):
        raise ShapeError(f"batchnorm parameters must have shape ({c},)")
    bc = (1, c, 1, 1)
    if not train:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean.reshape(bc)) * inv_std.reshape(bc)
        out = xhat * scale.data.reshape(bc) + offset.data.reshape(bc)

        def eval_grad(g: np.ndarray):
            gx = g * (scale.data * inv_std).reshape(bc)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return custom_op(out.astype(x.data.dtype), (x, scale, offset), eval_grad)

    n = x.shape[0] * x.shape[2] * x.shape[3]
    if n < 2:
        raise ShapeError("batchnorm in train mode needs at least two elements per channel")
    mean = x.data.mean(axis=(0, 2, 3))
    centered = x.data - mean.reshape(bc)
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std.reshape(bc)
    out = xhat * scale.data.reshape(bc) + offset.data.reshape(bc)
    running_mean *= 1.0 - momentum
    running_mean += momentum * mean
    running_var *= 1.0 - momentum
    running_var += momentum * var * (n / (n - 1))

    def grad_fn(g: np.ndarray):
        gxhat = g * scale.data.reshape(bc)
        s1 = gxhat.sum(axis=(0, 2, 3)).reshape(bc)
        s2 = (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(bc)
        gx = (inv_std.reshape(bc) / n) * (n * gxhat - s1 - xhat * s2)
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return custom_op(out, (x, scale, offset), grad_fn)


def rotate90(x: Tensor, quarter_turns: int) -> Tensor:
    """Rotate the spatial axes counter-clockwise by ``quarter_turns`` * 90 degrees."""
    k = quarter_turns % 4
    if k == 0:
        out = x.data.copy()
    else:
        out = np.ascontiguousarray(np.rot90(x.data, k, axes=(2, 3)))
    return custom_op(out, (x,), lambda g: (np.ascontiguousarray(np.rot90(g, -k, axes=(2, 3))),))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels needs at least one input")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.data.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: shape {t.shape} incompatible with {ref}")
    sizes = [t.shape[1] for t in xs]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in xs], axis=1)

    def grad_fn(g: np.ndarray):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs))]

    return custom_op(out, tuple(xs), grad_fn)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    out = x.data[:, start:stop].copy()

    def grad_fn(g: np.ndarray):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return custom_op(out, (x,), grad_fn)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1, stabilized by subtracting the per-pixel maximum."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g: np.ndarray):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return custom_op(y, (x,), grad_fn)


def sum_all(x: Tensor) -> Tensor:
    return custom_op(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), lambda g: (np.full_like(x.data, g),))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    return custom_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, factor: float) -> Tensor:
    return custom_op(x.data * factor, (x,), lambda g: (g * factor,))


# --------------------------------------------------------------------------
# parameters, optimizer, checkpoints


class ParamStore:
    """Named trainable parameters, non-trainable buffers and Adam state."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params or name in self._buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        if name.endswith(BUFFER_SUFFIXES):
            raise KeyError(f"{name!r} uses a reserved buffer suffix")
        t = Tensor(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)
        t.grad = np.zeros_like(t.data)
        self._params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        return t

    def add_buffer(self, name: str, data: np.ndarray) -> np.ndarray:
        if not name.endswith(BUFFER_SUFFIXES):
            raise KeyError(f"buffer {name!r} must end with one of {BUFFER_SUFFIXES}")
        if name in self._params or name in self._buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(data, dtype=np.float32)
        self._buffers[name] = arr
        return arr

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def buffer(self, name: str) -> np.ndarray:
        return self._buffers[name]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self._params.values()))

    def zero_grad(self) -> None:
        for p in self._params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            else:
                p.grad.fill(0.0)

    def state(self) -> dict[str, np.ndarray]:
        """Parameters followed by buffers, in insertion order."""
        out = {k: p.data for k, p in self._params.items()}
        out.update(self._buffers)
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        expected = set(self._params) | set(self._buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for k, arr in state.items():
            target = self._params[k].data if k in self._params else self._buffers[k]
            if target.shape != arr.shape:
                raise ShapeError(f"{k}: shape {arr.shape} != {target.shape}")
            target[...] = arr


def adam_step(
    params: ParamStore,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update; gradients are zeroed afterwards."""
    b1, b2 = betas
    params.step += 1
    c1 = 1.0 - b1 ** params.step
    c2 = 1.0 - b2 ** params.step
    for name, p in params._params.items():
        g = p.grad
        if g is None:
            continue
        m = params._m[name]
        v = params._v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)
        g.fill(0.0)


def save_checkpoint(path: str | Path, params: ParamStore) -> None:
    state = params.state()
    with open(path, "wb") as fh:
        write_header(fh, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
        fh.write(struct.pack("<I", len(state)))
        for name, arr in state.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            write_f32(fh, arr)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        read_header(fh, CHECKPOINT_MAGIC, (CHECKPOINT_VERSION,))
        (count,) = read_struct(fh, "<I")
        for _ in range(count):
            (nlen,) = read_struct(fh, "<H")
            raw = fh.read(nlen)
            if len(raw) != nlen:
                raise FormatError("unexpected end of file in parameter name")
            (rank,) = read_struct(fh, "<B")
            dims = read_struct(fh, f"<{rank}I") if rank else ()
            size = int(np.prod(dims)) if dims else 1
            out[raw.decode("utf-8")] = read_f32(fh, size).reshape(dims)
        if fh.read(1):
            raise FormatError("trailing bytes after checkpoint payload")
    return out
