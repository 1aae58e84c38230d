"""Random small networks, models and plans shared by the tests."""
from __future__ import annotations

import numpy as np

from snnmap.mapper import build_plan, valid_omega_set
from snnmap.netspec import BRAM, CONV, FC, SAME, TRANSDUCTION, VALID, InputShape, LayerSpec, NetworkSpec, infer_geometry
from snnmap.quantizer import QuantizedLayer, QuantizedModel, lane_padding_mask

# (kernel, stride, padding) combinations that are legal
CONV_SHAPES = [(3, 1, SAME), (3, 1, VALID), (3, 2, SAME), (3, 2, VALID), (2, 2, VALID)]


def _out(n: int, k: int, s: int, padding: str) -> int:
    return -(-n // s) if padding == SAME else (n - k) // s + 1


def random_network(rng: np.random.Generator, max_layers: int = 4, max_dim: int = 16, max_ch: int = 32) -> NetworkSpec:
    h = int(rng.integers(3, max_dim + 1))
    w = int(rng.integers(3, max_dim + 1))
    c = int(rng.integers(1, 4))
    n_layers = int(rng.integers(2, max_layers + 1))
    layers = []
    rows, cols = h, w
    for i in range(n_layers - 1):
        options = [s for s in CONV_SHAPES if _out(rows, s[0], s[1], s[2]) >= 1 and _out(cols, s[0], s[1], s[2]) >= 1]
        k, s, pad = options[rng.integers(len(options))]
        kind = TRANSDUCTION if i == 0 else CONV
        layers.append(LayerSpec(kind, int(rng.integers(1, max_ch + 1)), BRAM, 1, k, s, pad))
        rows, cols = _out(rows, k, s, pad), _out(cols, k, s, pad)
    layers.append(LayerSpec(FC, int(rng.integers(2, 17)), BRAM, 1))
    return NetworkSpec("random", InputShape(h, w, c), 100.0, tuple(layers))


def random_qmodel(spec: NetworkSpec, rng: np.random.Generator) -> QuantizedModel:
    """Uniform int8 weights with zeroed padding lanes and thresholds near the typical potential."""
    layers = []
    for i, (layer, g) in enumerate(zip(spec.layers, infer_geometry(spec))):
        w = rng.integers(-127, 128, size=(layer.out_channels, g.beats_per_neuron, 8))
        w[:, lane_padding_mask(g)] = 0
        spread = 60 * np.sqrt(g.fan_in) * (128 if i == 0 else 0.7)
        t = rng.integers(-int(spread) - 1, int(spread) + 1, size=layer.out_channels)
        layers.append(QuantizedLayer(float(rng.uniform(1, 500)), w.astype(np.int8), t.astype(np.int32)))
    return QuantizedModel(tuple(layers))


def random_split(omega: int, rng: np.random.Generator, max_sources: int = 3) -> tuple[tuple[int, int], ...]:
    parts = int(rng.integers(1, min(max_sources, omega) + 1))
    cuts = np.sort(rng.choice(np.arange(1, omega), size=parts - 1, replace=False)) if parts > 1 else []
    shares = np.diff(np.concatenate([[0], cuts, [omega]])).astype(int)
    slrs = rng.permutation(3)[:parts]
    return tuple((int(s), int(n)) for s, n in zip(slrs, shares))


def random_plan(spec: NetworkSpec, rng: np.random.Generator, split: bool = True):
    omegas, splits = [], []
    for layer in spec.layers:
        legal = [w for w in valid_omega_set(layer.out_channels) if layer.out_channels % w == 0]
        w = int(legal[rng.integers(len(legal))])
        omegas.append(w)
        splits.append(random_split(w, rng) if split else ((0, w),))
    return build_plan(spec, omegas, splits, slr_span=3)


def random_image(spec: NetworkSpec, rng: np.random.Generator) -> np.ndarray:
    shape = (spec.input.height, spec.input.width, spec.input.channels)
    return rng.integers(0, 256, size=shape, dtype=np.uint8)
