"""int8 weight quantization, batch-norm threshold folding and the DF2P
parameter file."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .netspec import BEAT_LANES, TRANSDUCTION, LayerGeometry, NetworkSpec, infer_geometry

QMAX = 127
INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1

MAGIC = b"DF2P"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHH")
_LAYER_HEADER = struct.Struct("<HIIHd")


class QuantizationError(ValueError):
    pass


class ParamFormatError(ValueError):
    pass


class TruncatedStream(ParamFormatError):
    pass


class BadMagic(ParamFormatError):
    pass


class VersionMismatch(ParamFormatError):
    pass


@dataclass(frozen=True, eq=False)
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        for name in ("gamma", "beta", "mean", "sigma"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64))
            if not np.all(np.isfinite(arr)):
                raise QuantizationError(f"batch-norm {name} has non-finite values")
            object.__setattr__(self, name, arr)
        if np.any(self.sigma <= 0):
            raise QuantizationError("batch-norm sigma must be strictly positive")
        if len({len(self.gamma), len(self.beta), len(self.mean), len(self.sigma)}) != 1:
            raise QuantizationError("batch-norm vectors differ in length")

    @classmethod
    def identity(cls, channels: int) -> "BatchNorm":
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels))

    def float_threshold(self) -> np.ndarray:
        """Activation level above which BN(a) > 0, for gamma > 0 channels."""
        return self.mean - self.beta * self.sigma / self.gamma


@dataclass(frozen=True, eq=False)
class FloatLayerParams:
    """Float weights laid out (out_ch, kernel_h, kernel_w, in_ch) plus per-channel BN."""

    weights: np.ndarray
    bn: BatchNorm

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 4:
            raise QuantizationError(f"weights must be 4-d (out, kh, kw, in), got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise QuantizationError("weights have non-finite values")
        if len(self.bn.gamma) != w.shape[0]:
            raise QuantizationError(f"{w.shape[0]} output channels but {len(self.bn.gamma)} BN entries")
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_flat(cls, weights, bn: BatchNorm, kernel_h: int, kernel_w: int) -> "FloatLayerParams":
        """Build from a [out_ch][fan_in] matrix whose fan-in runs row, column, channel."""
        w = np.asarray(weights, dtype=np.float64)
        return cls(w.reshape(w.shape[0], kernel_h, kernel_w, -1), bn)

    @property
    def flat(self) -> np.ndarray:
        return self.weights.reshape(self.weights.shape[0], -1)


@dataclass(frozen=True, eq=False)
class QuantizedLayer:
    scale: float
    weights: np.ndarray  # int8 (out_ch, beats, 8)
    thresholds: np.ndarray  # int32 (out_ch,)

    def __post_init__(self):
        w = np.asarray(self.weights)
        t = np.asarray(self.thresholds)
        if w.ndim != 3 or w.shape[2] != BEAT_LANES:
            raise QuantizationError(f"weights must be (out_ch, beats, 8), got {w.shape}")
        if t.shape != (w.shape[0],):
            raise QuantizationError(f"{w.shape[0]} neurons but thresholds shaped {t.shape}")
        if w.size and (w.min() < -QMAX or w.max() > QMAX):
            raise QuantizationError("weights outside [-127, 127]")
        object.__setattr__(self, "weights", w.astype(np.int8, copy=False))
        object.__setattr__(self, "thresholds", t.astype(np.int32, copy=False))

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def beats(self) -> int:
        return self.weights.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuantizedLayer):
            return NotImplemented
        return (
            self.scale == other.scale
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.thresholds, other.thresholds)
        )


@dataclass(frozen=True, eq=True)
class QuantizedModel:
    layers: tuple[QuantizedLayer, ...]

    def check_against(self, spec: NetworkSpec, geoms: Sequence[LayerGeometry] | None = None) -> None:
        """Raise if layer shapes disagree with the network or padding lanes are nonzero."""
        geoms = geoms if geoms is not None else infer_geometry(spec)
        if len(self.layers) != len(spec.layers):
            raise QuantizationError(f"model has {len(self.layers)} layers, network has {len(spec.layers)}")
        for i, (q, layer, g) in enumerate(zip(self.layers, spec.layers, geoms)):
            if q.weights.shape != (layer.out_channels, g.beats_per_neuron, BEAT_LANES):
                raise QuantizationError(
                    f"layer {i}: weights shaped {q.weights.shape}, expected "
                    f"{(layer.out_channels, g.beats_per_neuron, BEAT_LANES)}"
                )
            pad = lane_padding_mask(g)
            if np.any(q.weights[:, pad]):
                raise QuantizationError(f"layer {i}: nonzero weight in a padding lane")


def lane_padding_mask(geom: LayerGeometry) -> np.ndarray:
    """(beats, 8) boolean mask of lanes that carry no channel."""
    groups = geom.in_groups
    channel = np.arange(groups * BEAT_LANES).reshape(groups, BEAT_LANES)
    pad = channel >= geom.in_dims[2]
    return np.tile(pad, (geom.kernel_h * geom.kernel_w, 1))


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def to_beats(w: np.ndarray) -> np.ndarray:
    """(out, kh, kw, in) -> (out, kh*kw*groups, 8): kernel position major, channel group minor."""
    out, kh, kw, cin = w.shape
    groups = -(-cin // BEAT_LANES)
    padded = np.zeros((out, kh, kw, groups * BEAT_LANES), dtype=w.dtype)
    padded[..., :cin] = w
    return padded.reshape(out, kh * kw * groups, BEAT_LANES)


def from_beats(beats: np.ndarray, kernel_h: int, kernel_w: int, in_channels: int) -> np.ndarray:
    out = beats.shape[0]
    return beats.reshape(out, kernel_h, kernel_w, -1)[..., :in_channels]


def quantize_weights(params: FloatLayerParams) -> tuple[float, np.ndarray]:
    """Per-layer symmetric int8: returns (scale, weights in beat layout)."""
    peak = float(np.max(np.abs(params.weights))) if params.weights.size else 0.0
    if peak == 0.0:
        raise QuantizationError("degenerate layer scale: all weights are zero")
    scale = QMAX / peak
    q = np.clip(round_half_away(params.weights * scale), -QMAX, QMAX).astype(np.int8)
    return scale, to_beats(q)


def fold_threshold(bn: BatchNorm, scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Integer thresholds plus a per-channel flag marking channels whose weights must be negated.

    The integer datapath fires iff acc > t. Since acc is an integer,
    acc > x holds exactly when acc > floor(x), so the folded threshold is the
    floor of the scaled float threshold. A negative gain flips the comparison;
    negating that channel's weights and threshold restores the strict
    greater-than form.
    """
    if np.any(bn.gamma == 0):
        raise QuantizationError("degenerate batch-norm gain: gamma is zero")
    flip = bn.gamma < 0
    level = bn.float_threshold()
    level = np.where(flip, -level, level)
    t = np.floor(level * scale)
    return np.clip(t, INT32_MIN, INT32_MAX).astype(np.int32), flip


def quantize_layer(params: FloatLayerParams) -> QuantizedLayer:
    scale, w = quantize_weights(params)
    t, flip = fold_threshold(params.bn, scale)
    w = np.where(flip[:, None, None], -w, w).astype(np.int8)
    return QuantizedLayer(scale, w, t)


def quantize_model(params: Sequence[FloatLayerParams]) -> QuantizedModel:
    return QuantizedModel(tuple(quantize_layer(p) for p in params))


# -- float parameter files ------------------------------------------------------


def load_float_params(path: str | Path, spec: NetworkSpec | None = None) -> list[FloatLayerParams]:
    """Read the JSON float format.

    ``{"layers": [{"weights": [...], "bn": {"gamma": [...], "beta": [...],
    "mean": [...], "sigma": [...]}}]}`` where weights are either 4-d
    (out, kh, kw, in) or a flat [out][fan_in] matrix (the network is then
    needed for the kernel shape). A missing "bn" means identity.
    """
    with open(path) as f:
        data = json.load(f)
    return float_params_from_dict(data, spec)


def float_params_from_dict(data: dict, spec: NetworkSpec | None = None) -> list[FloatLayerParams]:
    geoms = infer_geometry(spec) if spec is not None else None
    out = []
    for i, entry in enumerate(data["layers"]):
        w = np.asarray(entry["weights"], dtype=np.float64)
        bn_data = entry.get("bn")
        bn = BatchNorm.identity(w.shape[0]) if bn_data is None else BatchNorm(
            bn_data["gamma"], bn_data["beta"], bn_data["mean"], bn_data["sigma"]
        )
        if w.ndim == 2:
            if geoms is None:
                raise QuantizationError(f"layer {i}: flat weights need the network for the kernel shape")
            out.append(FloatLayerParams.from_flat(w, bn, geoms[i].kernel_h, geoms[i].kernel_w))
        else:
            out.append(FloatLayerParams(w, bn))
    return out


def float_params_to_dict(params: Sequence[FloatLayerParams]) -> dict:
    return {
        "layers": [
            {
                "weights": p.weights.tolist(),
                "bn": {k: getattr(p.bn, k).tolist() for k in ("gamma", "beta", "mean", "sigma")},
            }
            for p in params
        ]
    }


def random_float_params(spec: NetworkSpec, rng: np.random.Generator) -> list[FloatLayerParams]:
    """Random weights and BN statistics that leave roughly half the neurons firing."""
    out = []
    for layer, g in zip(spec.layers, infer_geometry(spec)):
        w = rng.normal(0.0, 1.0, size=(layer.out_channels, g.kernel_h, g.kernel_w, g.in_dims[2]))
        # spread of the pre-activation: spikes are 0/1 with p=1/2, pixels uniform in [0, 255]
        second_moment = 255.0**2 / 3 if layer.kind == TRANSDUCTION else 0.5
        spread = np.sqrt(g.fan_in * second_moment)
        n = layer.out_channels
        bn = BatchNorm(
            gamma=rng.uniform(0.5, 2.0, n) * rng.choice([-1.0, 1.0], n, p=[0.1, 0.9]),
            beta=rng.normal(0.0, 0.5, n),
            mean=rng.normal(0.0, 0.5 * spread, n),
            sigma=rng.uniform(0.5, 2.0, n) * spread,
        )
        out.append(FloatLayerParams(w, bn))
    return out


def random_model(spec: NetworkSpec, rng: np.random.Generator) -> QuantizedModel:
    return quantize_model(random_float_params(spec, rng))


# -- DF2P binary ------------------------------------------------------------------


def _omegas(plan, n_layers: int) -> list[int]:
    if plan is None:
        return [1] * n_layers
    if hasattr(plan, "layers"):
        return [m.omega for m in plan.layers]
    return [int(w) for w in plan]


def serialize_params(model: QuantizedModel, plan=None) -> bytes:
    """Encode the model in the order the weight memories are loaded.

    Per layer, each weight unit's neurons (a contiguous block of the neuron
    index space) are written beat by beat, followed by that unit's
    thresholds. ``plan`` is a MappingPlan or a list of omegas; omitted means
    one unit per layer.
    """
    omegas = _omegas(plan, len(model.layers))
    if len(omegas) != len(model.layers):
        raise ParamFormatError(f"plan covers {len(omegas)} layers, model has {len(model.layers)}")
    chunks = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(model.layers))]
    for idx, (layer, omega) in enumerate(zip(model.layers, omegas)):
        if layer.out_channels % omega:
            raise ParamFormatError(f"layer {idx}: {layer.out_channels} neurons not divisible by omega {omega}")
        chunks.append(_LAYER_HEADER.pack(idx, layer.out_channels, layer.beats, omega, layer.scale))
        npu = layer.out_channels // omega
        for u in range(omega):
            block = slice(u * npu, (u + 1) * npu)
            chunks.append(np.ascontiguousarray(layer.weights[block]).tobytes())
            chunks.append(layer.thresholds[block].astype("<i4").tobytes())
    return b"".join(chunks)


def _take(data: memoryview, pos: int, n: int, what: str) -> tuple[memoryview, int]:
    if pos + n > len(data):
        raise TruncatedStream(f"truncated stream: {what} needs {n} bytes at offset {pos}, {len(data) - pos} left")
    return data[pos : pos + n], pos + n


def deserialize_params(data: bytes, with_omega: bool = False):
    """Inverse of serialize_params. With ``with_omega`` also returns the stored unit counts."""
    view = memoryview(data)
    raw, pos = _take(view, 0, _HEADER.size, "header")
    magic, version, count = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {bytes(magic)!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"format version {version}, this reader understands {FORMAT_VERSION}")
    layers, omegas = [], []
    for i in range(count):
        raw, pos = _take(view, pos, _LAYER_HEADER.size, f"layer {i} header")
        idx, out_ch, beats, omega, scale = _LAYER_HEADER.unpack(raw)
        if idx != i:
            raise ParamFormatError(f"layer header {i} carries index {idx}")
        if omega == 0 or out_ch % omega:
            raise ParamFormatError(f"layer {i}: omega {omega} does not divide {out_ch} neurons")
        npu = out_ch // omega
        weights = np.empty((out_ch, beats, BEAT_LANES), dtype=np.int8)
        thresholds = np.empty(out_ch, dtype=np.int32)
        for u in range(omega):
            raw, pos = _take(view, pos, npu * beats * BEAT_LANES, f"layer {i} unit {u} weights")
            weights[u * npu : (u + 1) * npu] = np.frombuffer(raw, dtype=np.int8).reshape(npu, beats, BEAT_LANES)
            raw, pos = _take(view, pos, 4 * npu, f"layer {i} unit {u} thresholds")
            thresholds[u * npu : (u + 1) * npu] = np.frombuffer(raw, dtype="<i4")
        layers.append(QuantizedLayer(scale, weights, thresholds))
        omegas.append(omega)
    if pos != len(view):
        raise ParamFormatError(f"{len(view) - pos} trailing bytes after the last layer")
    model = QuantizedModel(tuple(layers))
    return (model, omegas) if with_omega else model


def write_params(path: str | Path, model: QuantizedModel, plan=None) -> None:
    Path(path).write_bytes(serialize_params(model, plan))


def read_params(path: str | Path) -> QuantizedModel:
    return deserialize_params(Path(path).read_bytes())
