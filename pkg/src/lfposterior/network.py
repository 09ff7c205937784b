"""Multi-stream EPI network with BASE / UPR / ESE / DPP heads.

Four view stacks (horizontal, vertical, two diagonals) pass through input
streams; the vertical stack reuses the horizontal stream's weights via a
quarter-turn rotation, and the anti-diagonal reuses the main-diagonal
stream the same way.  Stream features are concatenated and refined by a
trunk whose last block emits the method-specific head.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import losses
from ._rng import derive_rng
from .autodiff import (
    PadPhase,
    ParamStore,
    Tape,
    Tensor,
    adam_step,
    backward,
    batchnorm,
    channel_slice,
    concat_channels,
    conv2x2,
    load_checkpoint,
    relu,
    rotate90,
    save_checkpoint,
    softmax_channels,
)
from .lightfield import LightField, epi_shift, extract_stacks, rotate_lightfield
from .posterior import DEFAULT_GRID, BinGrid, DiracMap, DiscreteMap, LaplaceMap, MixtureMap, PosteriorMap
from .scenegen import Dataset, MultimodalGroundTruth

log = logging.getLogger(__name__)

METHODS = ("base", "upr", "ese", "dpp")


class NumericError(RuntimeError):
    """Raised when training produces a non-finite loss."""


@dataclass
class NetConfig:
    method: str = "dpp"
    stream_channels: int = 16
    input_blocks: int = 2
    trunk_blocks: int = 3
    views: int = 9
    colors: int = 3
    grid: BinGrid = field(default_factory=lambda: DEFAULT_GRID)
    delta_y: float = 0.1
    ensemble_size: int = 70

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if isinstance(self.grid, (list, tuple)):
            self.grid = BinGrid(float(self.grid[1]), float(self.grid[2]), int(self.grid[0]))
        if self.input_blocks < 1 or self.trunk_blocks < 1:
            raise ValueError("need at least one input block and one trunk block")
        if self.views % 2 == 0:
            raise ValueError("views must be odd")

    @property
    def trunk_channels(self) -> int:
        return 4 * self.stream_channels

    @property
    def c_out(self) -> int:
        return {"base": 1, "upr": 2, "ese": 2, "dpp": self.grid.K}[self.method]

    @property
    def stack_channels(self) -> int:
        return self.views * self.colors

    @classmethod
    def paper_scale(cls, method: str, **kw) -> "NetConfig":
        return cls(method=method, stream_channels=70, input_blocks=3, trunk_blocks=8, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_list()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


def ensemble_offsets(M: int) -> np.ndarray:
    """Member indices ``k`` of the shift ensemble, symmetric about zero.

    For even ``M`` this is ``-M/2 .. M/2`` (``M + 1`` members, the range that
    covers the full disparity interval); for odd ``M`` it is ``M`` members.
    """
    if M < 1:
        raise ValueError("ensemble size must be >= 1")
    return np.arange(-(M // 2), M // 2 + 1)


# --------------------------------------------------------------------------
# model


class Model:
    def __init__(self, config: NetConfig, params: ParamStore):
        self.config = config
        self.params = params

    def block_names(self) -> list[tuple[str, int, int, bool]]:
        """``(prefix, c_in, c_out, has_bn)`` for every basic block, in parameter order."""
        cfg = self.config
        out = []
        for stream in ("hv", "diag"):
            cin = cfg.stack_channels
            for i in range(cfg.input_blocks):
                out.append((f"{stream}.{i}", cin, cfg.stream_channels, True))
                cin = cfg.stream_channels
        for i in range(cfg.trunk_blocks - 1):
            out.append((f"trunk.{i}", cfg.trunk_channels, cfg.trunk_channels, True))
        out.append(("head", cfg.trunk_channels, cfg.c_out, False))
        return out

    def _block(self, prefix: str, x: Tensor, train: bool, has_bn: bool) -> Tensor:
        p = self.params
        x = conv2x2(x, p[f"{prefix}.conv1.weight"], p[f"{prefix}.conv1.bias"], PadPhase.LEADING)
        x = relu(x)
        x = conv2x2(x, p[f"{prefix}.conv2.weight"], p[f"{prefix}.conv2.bias"], PadPhase.TRAILING)
        if has_bn:
            x = batchnorm(
                x,
                p[f"{prefix}.bn.weight"],
                p[f"{prefix}.bn.bias"],
                p.buffer(f"{prefix}.bn.running_mean"),
                p.buffer(f"{prefix}.bn.running_var"),
                train,
            )
            x = relu(x)
        return x

    def stream(self, name: str, x: Tensor, train: bool) -> Tensor:
        for i in range(self.config.input_blocks):
            x = self._block(f"{name}.{i}", x, train, True)
        return x

    def stream_features(self, stacks, train: bool = False) -> list[Tensor]:
        """Per-stream features in concatenation order (horizontal, vertical, main, anti)."""
        # inputs are in [0, 1]; centering them speeds up early training
        hs, vs, ds, as_ = (Tensor(s - 0.5) for s in stacks)
        h = self.stream("hv", hs, train)
        v = rotate90(self.stream("hv", rotate90(vs, 1), train), -1)
        d = self.stream("diag", ds, train)
        a = rotate90(self.stream("diag", rotate90(as_, -1), train), 1)
        return [h, v, d, a]

    def forward_stacks(self, stacks, train: bool = False) -> Tensor:
        """Head output ``(B, c_out, H, W)`` for batched stacks ``(B, views * colors, H, W)``."""
        for s in stacks:
            if s.ndim != 4 or s.shape[1] != self.config.stack_channels:
                raise ValueError(f"stack shape {s.shape} does not match {self.config.stack_channels} channels")
        x = concat_channels(self.stream_features(stacks, train))
        for i in range(self.config.trunk_blocks - 1):
            x = self._block(f"trunk.{i}", x, train, True)
        x = self._block("head", x, train, False)
        if self.config.method == "dpp":
            x = relu(x)
        return x

    def forward(self, lf: LightField) -> Tensor:
        return forward(self, lf)


def build(method: str, config: NetConfig | None = None, seed: int = 0) -> Model:
    """Deterministic He-initialized model for ``method``."""
    config = NetConfig(method=method) if config is None else config
    if config.method != method:
        raise ValueError(f"config is for {config.method!r}, not {method!r}")
    store = ParamStore()
    model = Model(config, store)
    rng = derive_rng(seed, "init", method)
    for prefix, cin, cout, has_bn in model.block_names():
        for conv, c_in in (("conv1", cin), ("conv2", cout)):
            std = math.sqrt(2.0 / (4 * c_in))
            store.add(f"{prefix}.{conv}.weight", rng.normal(0.0, std, (cout, c_in, 2, 2)))
            store.add(f"{prefix}.{conv}.bias", np.zeros(cout))
        if has_bn:
            store.add(f"{prefix}.bn.weight", np.ones(cout))
            store.add(f"{prefix}.bn.bias", np.zeros(cout))
            store.add_buffer(f"{prefix}.bn.running_mean", np.zeros(cout))
            store.add_buffer(f"{prefix}.bn.running_var", np.ones(cout))
    return model


def parameter_count(config: NetConfig) -> dict[str, int]:
    """Closed-form trainable parameter count, per part and in total."""

    def conv(cin, cout):
        return 4 * cin * cout + cout

    parts = {}
    s, t = config.stream_channels, config.trunk_channels
    per_stream = conv(config.stack_channels, s) + conv(s, s) + 2 * s
    per_stream += (config.input_blocks - 1) * (2 * conv(s, s) + 2 * s)
    parts["streams"] = 2 * per_stream
    parts["trunk"] = (config.trunk_blocks - 1) * (2 * conv(t, t) + 2 * t)
    parts["head"] = conv(t, config.c_out) + conv(config.c_out, config.c_out)
    parts["total"] = parts["streams"] + parts["trunk"] + parts["head"]
    return parts


# --------------------------------------------------------------------------
# inference


def _stacks_batch(lfs: list[LightField]) -> tuple[np.ndarray, ...]:
    per = [extract_stacks(lf).as_tuple() for lf in lfs]
    return tuple(np.stack([p[i] for p in per]) for i in range(4))


def forward(model: Model, lf: LightField) -> Tensor:
    """Eval-mode head output ``(1, c_out, H, W)`` for one light field."""
    if lf.views_u != model.config.views or lf.views_v != model.config.views:
        raise ValueError(f"model expects {model.config.views}x{model.config.views} views, got {lf.views_u}x{lf.views_v}")
    if 2 * lf.valid_margin >= min(lf.height, lf.width) or min(lf.height, lf.width) < 2:
        raise ValueError("light field has no valid interior")
    return model.forward_stacks(_stacks_batch([lf]), train=False)


def infer_posterior(model: Model, lf: LightField) -> PosteriorMap:
    cfg = model.config
    if cfg.method == "ese":
        return ese_infer(model, lf, cfg.delta_y, cfg.ensemble_size)
    out = forward(model, lf).data[0].astype(np.float64)
    if cfg.method == "base":
        return DiracMap(out[0], lf.valid_margin)
    if cfg.method == "upr":
        return LaplaceMap(out[0], np.exp(out[1]), lf.valid_margin)
    z = out - out.max(axis=0, keepdims=True)
    p = np.exp(z)
    return DiscreteMap(cfg.grid, p / p.sum(axis=0, keepdims=True), lf.valid_margin)


def ese_infer(model: Model, lf: LightField, delta_y: float, M: int) -> MixtureMap:
    """Equal-weight Laplace mixture from forward passes on shifted copies of ``lf``.

    Member ``k`` sees the light field with every disparity lowered by
    ``k * delta_y`` and its mean is moved back up by the same amount.
    """
    ks = ensemble_offsets(M)
    mus, bs, margin = [], [], lf.valid_margin
    for k in ks:
        shifted = epi_shift(lf, -k * delta_y)
        margin = max(margin, shifted.valid_margin)
        out = forward(model, shifted).data[0].astype(np.float64)
        mus.append(out[0] + k * delta_y)
        bs.append(np.exp(out[1]))
    mu = np.stack(mus)
    weights = np.full(mu.shape, 1.0 / len(ks))
    return MixtureMap(weights, mu, np.stack(bs), margin)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    steps: int = 200
    batch: int = 8
    patch: int = 32
    lr: float = 1e-3
    seed: int = 0
    multimodal: bool = True
    max_shift: float = 2.0


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0

    def to_csv(self) -> str:
        return "step,loss\n" + "".join(f"{i + 1},{v:.9g}\n" for i, v in enumerate(self.losses))


def method_loss(model: Model, head: Tensor, targets: losses.TargetBatch, multimodal: bool) -> Tensor:
    cfg = model.config
    if cfg.method == "base":
        return (losses.loss_l1_mm if multimodal else losses.loss_l1)(head, targets)
    if cfg.method == "dpp":
        return (losses.loss_ce_mm if multimodal else losses.loss_ce)(head, targets, cfg.grid)
    mu, logb = channel_slice(head, 0, 1), channel_slice(head, 1, 2)
    if cfg.method == "upr":
        return (losses.loss_upr_mm if multimodal else losses.loss_upr)(mu, logb, targets)
    return (losses.loss_ese_mm if multimodal else losses.loss_ese)(mu, logb, targets, cfg.delta_y)


def _pick_shift(rng, gt: MultimodalGroundTruth, model: Model, hyper: TrainConfig) -> tuple[float, tuple[int, int] | None]:
    """Augmentation shift, plus the pixel it was aimed at for the ensemble head."""
    if model.config.method != "ese":
        return float(rng.uniform(-hyper.max_shift, hyper.max_shift)), None
    # move a random GT mode into the +-delta_y/2 window so the masked loss sees data
    h, w = gt.shape
    t, s = int(rng.integers(h)), int(rng.integers(w))
    modes = gt.modes(t, s)
    probs = np.array([m[1] for m in modes])
    y0 = modes[int(rng.choice(len(modes), p=probs / probs.sum()))][0]
    half = model.config.delta_y / 2
    return float(-y0 + rng.uniform(-half, half)), (t, s)


def sample_patch(rng, record, model: Model, hyper: TrainConfig):
    """One augmented training patch: stacks and ``(modes_y, modes_p)`` of shape ``(J, P, P)``."""
    lf, gt = record.lightfield, record.ground_truth
    P = hyper.patch
    shift, aim = _pick_shift(rng, gt, model, hyper)
    m = math.ceil(abs(shift) * lf.max_offset)
    lo_t, hi_t = m + lf.valid_margin, lf.height - m - lf.valid_margin - P
    lo_s, hi_s = m + lf.valid_margin, lf.width - m - lf.valid_margin - P
    if hi_t < lo_t or hi_s < lo_s:
        raise ValueError(f"scene {record.name} too small for a {P}px patch with shift {shift:.2f}")
    if aim is not None:
        t0, s0 = aim
        a, b = max(lo_t, t0 - P + 1), min(hi_t, t0)
        lo_t, hi_t = (a, b) if a <= b else (lo_t, hi_t)
        a, b = max(lo_s, s0 - P + 1), min(hi_s, s0)
        lo_s, hi_s = (a, b) if a <= b else (lo_s, hi_s)
    top = int(rng.integers(lo_t, hi_t + 1))
    left = int(rng.integers(lo_s, hi_s + 1))
    # shift a context window, then keep its exact interior
    ctx = lf.crop(top - m, left - m, P + 2 * m, P + 2 * m)
    ctx = LightField(ctx.data, 0)
    patch = epi_shift(ctx, shift).crop(m, m, P, P)
    g = gt.crop(top, left, P, P)
    modes_y = g.disparity + np.float32(shift) * (g.eta > 0)
    modes_p = g.eta

    k = int(rng.integers(4))
    patch = rotate_lightfield(LightField(patch.data, 0), k)
    modes_y = np.ascontiguousarray(np.rot90(modes_y, k, axes=(1, 2)))
    modes_p = np.ascontiguousarray(np.rot90(modes_p, k, axes=(1, 2)))

    data = np.roll(patch.data, int(rng.integers(patch.channels)), axis=2)
    contrast = rng.uniform(0.9, 1.1)
    brightness = rng.uniform(-0.05, 0.05)
    data = np.clip((data - 0.5) * contrast + 0.5 + brightness, 0.0, 1.0).astype(np.float32)
    return extract_stacks(LightField(data, 0)).as_tuple(), modes_y, modes_p


def _targets_from(samples) -> losses.TargetBatch:
    J = max(s[1].shape[0] for s in samples)
    B = len(samples)
    _, P, Q = samples[0][1].shape
    ys = np.zeros((B, J, P, Q), np.float32)
    ps = np.zeros((B, J, P, Q), np.float32)
    for i, (_, my, mp) in enumerate(samples):
        ys[i, : my.shape[0]] = my
        ps[i, : mp.shape[0]] = mp
    return losses.TargetBatch(ys, ps, np.ones((B, P, Q), bool))


def train(
    model: Model,
    dataset: Dataset,
    hyper: TrainConfig,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainLog:
    """Adam training on random augmented patches; bit-reproducible for a fixed seed."""
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    rng = derive_rng(hyper.seed, "train", model.config.method)
    out = TrainLog()
    start = time.perf_counter()
    model.params.zero_grad()
    for step in range(hyper.steps):
        samples = [
            sample_patch(rng, dataset.records[int(rng.integers(len(dataset)))], model, hyper)
            for _ in range(hyper.batch)
        ]
        stacks = tuple(np.stack([s[0][i] for s in samples]) for i in range(4))
        targets = _targets_from(samples)
        with Tape() as tape:
            head = model.forward_stacks(stacks, train=True)
            loss = method_loss(model, head, targets, hyper.multimodal)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss {value} at step {step + 1}")
        backward(loss, tape, model.params)
        adam_step(model.params, hyper.lr)
        out.losses.append(value)
        if on_step is not None:
            on_step(step + 1, value)
    out.seconds = time.perf_counter() - start
    return out


# --------------------------------------------------------------------------
# persistence


def save_model(model: Model, path: str | Path, train_info: dict | None = None) -> None:
    path = Path(path)
    save_checkpoint(path, model.params)
    sidecar = {
        "method": model.config.method,
        "config": model.config.to_dict(),
        "grid": model.config.grid.to_list(),
        "train": train_info or {},
    }
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_model(path: str | Path) -> Model:
    meta = json.loads(sidecar_path(path).read_text())
    config = NetConfig.from_dict(meta["config"])
    model = build(config.method, config, seed=0)
    model.params.load_state(load_checkpoint(path))
    return model
