"""Procedural layered scenes with exact multimodal disparity ground truth.

A scene is a stack of fronto-parallel textured planes, each with its own
opacity map.  Views are rendered by translating every layer according to its
disparity and compositing front to back with the over operator; the center
view's per-pixel opacity chain yields the ground-truth mode probabilities.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._binio import FormatError, read_f32, read_header, read_struct, write_f32, write_header
from ._rng import derive_rng
from .lightfield import LightField, read_lightfield, shift_axis, write_lightfield

GT_MAGIC = b"LFGT"
GT_VERSION = 1
ETA_FLOOR = 1e-4

ALPHA_FAMILIES = ("full", "halfplane", "disc", "constant")
TEXTURE_FAMILIES = ("noise", "checker", "grating")


@dataclass
class SceneConfig:
    num_layers: tuple[int, int] = (2, 4)
    disparity_range: tuple[float, float] = (-3.5, 3.5)
    min_separation: float = 0.3
    alpha_weights: dict[str, float] = field(
        default_factory=lambda: {"full": 0.05, "halfplane": 0.3, "disc": 0.35, "constant": 0.3}
    )
    texture_weights: dict[str, float] = field(
        default_factory=lambda: {"noise": 0.4, "checker": 0.3, "grating": 0.3}
    )
    height: int = 64
    width: int = 64
    views: int = 9
    channels: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        self.num_layers = tuple(int(n) for n in self.num_layers)
        self.disparity_range = tuple(float(d) for d in self.disparity_range)
        lo, hi = self.disparity_range
        if not math.isclose(lo, -hi) or hi <= 0:
            raise ValueError(f"disparity range must be symmetric and non-empty, got {self.disparity_range}")
        if self.min_separation < 0:
            raise ValueError("min_separation must be >= 0")
        if self.num_layers[0] < 1 or self.num_layers[1] < self.num_layers[0]:
            raise ValueError(f"bad layer count range {self.num_layers}")
        if self.views < 1 or self.views % 2 == 0:
            raise ValueError("views must be odd")
        for name, table, allowed in (
            ("alpha", self.alpha_weights, ALPHA_FAMILIES),
            ("texture", self.texture_weights, TEXTURE_FAMILIES),
        ):
            unknown = set(table) - set(allowed)
            if unknown:
                raise ValueError(f"unknown {name} families {sorted(unknown)}")
            if sum(table.values()) <= 0:
                raise ValueError(f"{name} weights must have positive total")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**d)


@dataclass
class Layer:
    """Fronto-parallel plane; ``texture`` is ``(C, Hc, Wc)`` and ``alpha`` ``(Hc, Wc)`` on the padded canvas."""

    texture: np.ndarray
    alpha: np.ndarray
    disparity: float


@dataclass
class LayeredScene:
    """Layers ordered front to back; the last layer is fully opaque.

    Layer maps live on a canvas padded by ``pad`` pixels on every side so that
    translated views sample real texture instead of replicated borders.
    """

    layers: list[Layer]
    height: int
    width: int
    pad: int

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValueError("scene needs at least one layer")
        if not np.all(self.layers[-1].alpha == 1.0):
            raise ValueError("the back layer must be fully opaque")

    def visible(self, arr: np.ndarray) -> np.ndarray:
        p = self.pad
        return arr[..., p:p + self.height, p:p + self.width]


@dataclass
class MultimodalGroundTruth:
    """Per-pixel disparity modes, front to back, compacted along axis 0.

    ``disparity`` and ``eta`` are ``(J, H, W)``; slots beyond a pixel's mode
    count hold ``eta == 0``.
    """

    disparity: np.ndarray
    eta: np.ndarray

    def __post_init__(self) -> None:
        self.disparity = np.asarray(self.disparity, dtype=np.float32)
        self.eta = np.asarray(self.eta, dtype=np.float32)
        if self.disparity.shape != self.eta.shape or self.eta.ndim != 3:
            raise ValueError("disparity and eta must share a (J, H, W) shape")

    @property
    def shape(self) -> tuple[int, int]:
        return self.eta.shape[1], self.eta.shape[2]

    def counts(self) -> np.ndarray:
        return (self.eta > 0).sum(axis=0)

    def modes(self, t: int, s: int) -> list[tuple[float, float]]:
        n = int((self.eta[:, t, s] > 0).sum())
        return [(float(self.disparity[j, t, s]), float(self.eta[j, t, s])) for j in range(n)]

    def closest(self) -> np.ndarray:
        """Largest-disparity (nearest) mode per pixel."""
        return np.where(self.eta > 0, self.disparity, -np.inf).max(axis=0)

    def multimodal_mask(self, threshold: float = 0.3) -> np.ndarray:
        """Pixels with at least two modes of probability above ``threshold``."""
        return (self.eta > threshold).sum(axis=0) >= 2

    def crop(self, top: int, left: int, height: int, width: int) -> "MultimodalGroundTruth":
        sl = (slice(None), slice(top, top + height), slice(left, left + width))
        return MultimodalGroundTruth(self.disparity[sl].copy(), self.eta[sl].copy())


# --------------------------------------------------------------------------
# compositing


def composite_over(front_color, front_alpha, back_color, back_alpha):
    """Over operator; returns ``(color, alpha)``.

    Colors may carry a leading channel axis relative to the alphas.  Where the
    combined alpha is zero the color is zero.
    """
    c1 = np.asarray(front_color, dtype=np.float64)
    c2 = np.asarray(back_color, dtype=np.float64)
    a1 = np.asarray(front_alpha, dtype=np.float64)
    a2 = np.asarray(back_alpha, dtype=np.float64)
    a0 = a1 + a2 * (1.0 - a1)
    ea1, ea2, ea0 = a1, a2, a0
    if c1.ndim > a1.ndim:
        ea1, ea2, ea0 = a1[None], a2[None], a0[None]
    num = c1 * ea1 + c2 * ea2 * (1.0 - ea1)
    with np.errstate(invalid="ignore", divide="ignore"):
        c0 = np.where(ea0 > 0, num / np.where(ea0 > 0, ea0, 1.0), 0.0)
    return c0, a0


def mode_contributions(alphas_front_to_back: Sequence[float] | np.ndarray) -> np.ndarray:
    """Visible fraction of each layer: ``alpha_j * prod_{k<j} (1 - alpha_k)``.

    Works on a 1D chain or along axis 0 of a stacked per-pixel chain.
    """
    a = np.asarray(alphas_front_to_back, dtype=np.float64)
    if a.shape[0] == 0:
        raise ValueError("alpha chain must be non-empty")
    if np.any(a < 0) or np.any(a > 1):
        raise ValueError("alphas must lie in [0, 1]")
    transmittance = np.cumprod(1.0 - a, axis=0)
    before = np.concatenate([np.ones_like(a[:1]), transmittance[:-1]], axis=0)
    return a * before


# --------------------------------------------------------------------------
# procedural content


def _pick(rng: np.random.Generator, weights: dict[str, float]) -> str:
    names = sorted(weights)
    p = np.array([weights[n] for n in names], dtype=np.float64)
    return names[int(rng.choice(len(names), p=p / p.sum()))]


def _two_colors(rng: np.random.Generator, channels: int) -> tuple[np.ndarray, np.ndarray]:
    c1 = rng.uniform(0.0, 1.0, channels)
    c2 = rng.uniform(0.0, 1.0, channels)
    # keep some contrast so that every texture carries a disparity cue
    if np.abs(c1 - c2).max() < 0.3:
        c2 = 1.0 - c1
    return c1, c2


def make_texture(rng: np.random.Generator, family: str, channels: int, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if family == "noise":
        sigma = rng.uniform(0.8, 2.5)
        white = rng.standard_normal((channels, h, w))
        fy = np.fft.fftfreq(h)[:, None]
        fx = np.fft.fftfreq(w)[None, :]
        kernel = np.exp(-2.0 * (np.pi * sigma) ** 2 * (fx ** 2 + fy ** 2))
        tex = np.real(np.fft.ifft2(np.fft.fft2(white) * kernel))
        lo = tex.min(axis=(1, 2), keepdims=True)
        hi = tex.max(axis=(1, 2), keepdims=True)
        tex = (tex - lo) / np.maximum(hi - lo, 1e-12)
        mix = rng.uniform(0.0, 1.0, (channels, channels))
        mix /= mix.sum(axis=1, keepdims=True)
        return np.einsum("ij,jhw->ihw", mix, tex)
    c1, c2 = _two_colors(rng, channels)
    if family == "checker":
        period = rng.uniform(3.0, 10.0)
        theta = rng.uniform(0.0, np.pi)
        px = xx * np.cos(theta) + yy * np.sin(theta) + rng.uniform(0, period)
        py = -xx * np.sin(theta) + yy * np.cos(theta) + rng.uniform(0, period)
        m = (np.floor(px / period) + np.floor(py / period)) % 2
    elif family == "grating":
        period = rng.uniform(3.0, 14.0)
        theta = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2 * np.pi)
        m = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    else:
        raise ValueError(f"unknown texture family {family!r}")
    return c1[:, None, None] + (c2 - c1)[:, None, None] * m[None]


def make_alpha(rng: np.random.Generator, family: str, h: int, w: int, pad: int) -> np.ndarray:
    """Opacity map on a ``(h + 2 pad, w + 2 pad)`` canvas; shapes are placed over the visible region."""
    hc, wc = h + 2 * pad, w + 2 * pad
    yy, xx = np.mgrid[0:hc, 0:wc].astype(np.float64)
    cy = pad + rng.uniform(0.2, 0.8) * h
    cx = pad + rng.uniform(0.2, 0.8) * w
    if family == "full":
        return np.ones((hc, wc))
    if family == "constant":
        return np.full((hc, wc), rng.uniform(0.2, 0.8))
    if family == "halfplane":
        theta = rng.uniform(0.0, 2 * np.pi)
        signed = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        # pixel-area style coverage across a one pixel wide edge
        return np.clip(0.5 + signed, 0.0, 1.0)
    if family == "disc":
        radius = rng.uniform(0.1, 0.4) * min(h, w)
        softness = rng.uniform(0.5, 3.0)
        dist = np.hypot(xx - cx, yy - cy)
        return np.clip(0.5 + (radius - dist) / softness, 0.0, 1.0)
    raise ValueError(f"unknown alpha family {family!r}")


def _sample_disparities(rng: np.random.Generator, n: int, lo: float, hi: float, sep: float) -> np.ndarray:
    span = hi - lo - (n - 1) * sep
    if span < 0:
        raise ValueError(f"cannot place {n} layers {sep} apart inside [{lo}, {hi}]")
    base = np.sort(rng.uniform(0.0, span, n))
    return lo + base + sep * np.arange(n)


def canvas_pad(disparity_range: tuple[float, float], views: int) -> int:
    return int(math.ceil(max(abs(d) for d in disparity_range) * (views // 2))) + 1


def generate_scene(config: SceneConfig, seed: int) -> LayeredScene:
    """Random layered scene; a pure function of ``(config, seed)``."""
    rng = derive_rng(seed, "scene")
    n = int(rng.integers(config.num_layers[0], config.num_layers[1] + 1))
    lo, hi = config.disparity_range
    disparities = _sample_disparities(rng, n, lo, hi, config.min_separation)[::-1]
    h, w, pad = config.height, config.width, canvas_pad(config.disparity_range, config.views)
    layers = []
    for j, d in enumerate(disparities):
        tex = make_texture(rng, _pick(rng, config.texture_weights), config.channels, h + 2 * pad, w + 2 * pad)
        if j == n - 1:
            alpha = np.ones((h + 2 * pad, w + 2 * pad))
        else:
            alpha = make_alpha(rng, _pick(rng, config.alpha_weights), h, w, pad)
        layers.append(Layer(tex, alpha, float(d)))
    return LayeredScene(layers, h, w, pad)


def bimodal_scene(
    front_disparity: float,
    back_disparity: float,
    front_alpha: float = 0.5,
    size: int = 64,
    views: int = 9,
    channels: int = 3,
    seed: int = 0,
) -> LayeredScene:
    """Semi-transparent textured plane over an opaque textured background."""
    rng = derive_rng(seed, "bimodal")
    pad = canvas_pad((front_disparity, back_disparity), views)
    hc = size + 2 * pad
    front = Layer(make_texture(rng, "noise", channels, hc, hc), np.full((hc, hc), front_alpha), front_disparity)
    back = Layer(make_texture(rng, "grating", channels, hc, hc), np.ones((hc, hc)), back_disparity)
    return LayeredScene([front, back], size, size, pad)


# --------------------------------------------------------------------------
# rendering and ground truth


def render_lightfield(scene: LayeredScene, views: tuple[int, int] = (9, 9)) -> LightField:
    """Render a ``U x V`` view grid by translating and compositing every layer."""
    U, V = views
    if U % 2 == 0 or V % 2 == 0:
        raise ValueError("view counts must be odd")
    C = scene.layers[0].texture.shape[0]
    out = np.empty((U, V, C, scene.height, scene.width), dtype=np.float32)
    for ui in range(U):
        du = ui - U // 2
        shifted = []
        for layer in scene.layers:
            shifted.append(
                (
                    shift_axis(layer.texture, layer.disparity * du, axis=-1),
                    shift_axis(layer.alpha, layer.disparity * du, axis=-1),
                    layer.disparity,
                )
            )
        for vi in range(V):
            dv = vi - V // 2
            color = acc = None
            for tex, alpha, d in shifted:
                t = scene.visible(shift_axis(tex, d * dv, axis=-2))
                a = scene.visible(shift_axis(alpha, d * dv, axis=-2))
                if color is None:
                    color, acc = t, a
                else:
                    color, acc = composite_over(color, acc, t, a)
            out[ui, vi] = np.clip(color, 0.0, 1.0)
    return LightField(out, 0)


def ground_truth(scene: LayeredScene, eta_floor: float = ETA_FLOOR) -> MultimodalGroundTruth:
    """Center-view modes: layer disparities weighted by their visible fraction.

    Contributions at or below ``eta_floor`` are dropped and the rest renormalized.
    """
    alphas = np.stack([scene.visible(layer.alpha) for layer in scene.layers])
    eta = mode_contributions(alphas)
    eta = np.where(eta > eta_floor, eta, 0.0)
    eta /= eta.sum(axis=0, keepdims=True)
    disp = np.broadcast_to(np.array([layer.disparity for layer in scene.layers])[:, None, None], eta.shape)
    return _compact(disp, eta)


def _compact(disp: np.ndarray, eta: np.ndarray) -> MultimodalGroundTruth:
    present = eta > 0
    order = np.argsort(~present, axis=0, kind="stable")
    disp = np.take_along_axis(disp, order, axis=0)
    eta = np.take_along_axis(eta, order, axis=0)
    j = max(int(present.sum(axis=0).max()), 1)
    d = np.where(eta[:j] > 0, disp[:j], 0.0)
    return MultimodalGroundTruth(d, eta[:j])


# --------------------------------------------------------------------------
# persistence


def write_ground_truth(path: str | Path, gt: MultimodalGroundTruth) -> None:
    J, H, W = gt.eta.shape
    counts = gt.counts()
    if counts.max(initial=0) > 255:
        raise ValueError("at most 255 modes per pixel can be stored")
    with open(path, "wb") as fh:
        write_header(fh, GT_MAGIC, GT_VERSION)
        fh.write(struct.pack("<2I", H, W))
        pairs = np.stack([gt.disparity, gt.eta], axis=-1).astype("<f4")  # (J, H, W, 2)
        for t in range(H):
            for s in range(W):
                n = int(counts[t, s])
                fh.write(struct.pack("<B", n))
                fh.write(pairs[:n, t, s].tobytes())


def read_ground_truth(path: str | Path) -> MultimodalGroundTruth:
    with open(path, "rb") as fh:
        read_header(fh, GT_MAGIC, (GT_VERSION,))
        H, W = read_struct(fh, "<2I")
        per_pixel = []
        for _ in range(H * W):
            (n,) = read_struct(fh, "<B")
            per_pixel.append(read_f32(fh, 2 * n).reshape(n, 2))
        if fh.read(1):
            raise FormatError("trailing bytes after ground-truth payload")
    J = max([len(p) for p in per_pixel] + [1])
    disp = np.zeros((J, H * W), dtype=np.float32)
    eta = np.zeros((J, H * W), dtype=np.float32)
    for i, p in enumerate(per_pixel):
        disp[: len(p), i] = p[:, 0]
        eta[: len(p), i] = p[:, 1]
    return MultimodalGroundTruth(disp.reshape(J, H, W), eta.reshape(J, H, W))


@dataclass
class SceneRecord:
    name: str
    lightfield: LightField
    ground_truth: MultimodalGroundTruth
    seed: int | None = None


@dataclass
class Dataset:
    records: list[SceneRecord]
    manifest: dict

    def __len__(self) -> int:
        return len(self.records)


def make_record(name: str, scene: LayeredScene, views: int, seed: int | None = None) -> SceneRecord:
    return SceneRecord(name, render_lightfield(scene, (views, views)), ground_truth(scene), seed)


def generate_dataset(config: SceneConfig, count: int, seed: int, split: str = "train") -> Dataset:
    records = []
    for i in range(count):
        scene_seed = int(derive_rng(seed, split, i).integers(0, 2**31 - 1))
        scene = generate_scene(config, scene_seed)
        records.append(make_record(f"scene_{i:04d}", scene, config.views, scene_seed))
    manifest = {"format": 1, "split": split, "seed": seed, "config": config.to_dict()}
    return Dataset(records, manifest)


def write_dataset(dataset: Dataset, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = dict(dataset.manifest)
    manifest["scenes"] = [{"name": r.name, "seed": r.seed} for r in dataset.records]
    for r in dataset.records:
        write_lightfield(directory / f"{r.name}.lf", r.lightfield)
        write_ground_truth(directory / f"{r.name}.gt", r.ground_truth)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != 1:
        raise FormatError(f"unsupported dataset format {manifest.get('format')!r}")
    records = []
    for entry in manifest["scenes"]:
        name = entry["name"]
        lf = read_lightfield(directory / f"{name}.lf")
        gt = read_ground_truth(directory / f"{name}.gt")
        if gt.shape != (lf.height, lf.width):
            raise FormatError(f"{name}: ground truth {gt.shape} does not match light field")
        records.append(SceneRecord(name, lf, gt, entry.get("seed")))
    return Dataset(records, manifest)
