"""Slow, direct reference inference and operation counting.

Nothing here is shared with the simulator datapath: weights are unpacked
lane by lane and every output position is computed from its own window.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netspec import NetworkSpec, infer_geometry
from .quantizer import QuantizedModel


class ShapeMismatch(ValueError):
    pass


@dataclass
class ReferenceActivations:
    potentials: list[np.ndarray]  # int32 (rows, cols, channels) per layer
    spikes: list[np.ndarray]  # uint8 0/1, same shapes

    @property
    def final_potentials(self) -> np.ndarray:
        return self.potentials[-1].reshape(-1)

    def predicted_class(self) -> int:
        p = self.final_potentials
        return int(np.flatnonzero(p == p.max())[0])


def _dense_weights(beats: np.ndarray, kh: int, kw: int, cin: int) -> np.ndarray:
    """Rebuild (out, kh, kw, cin) int64 weights from the beat layout."""
    groups = -(-cin // 8)
    out = np.zeros((beats.shape[0], kh, kw, cin), dtype=np.int64)
    for ky in range(kh):
        for kx in range(kw):
            for c in range(cin):
                beat = (ky * kw + kx) * groups + c // 8
                out[:, ky, kx, c] = beats[:, beat, c % 8]
    return out


def reference_inference(spec: NetworkSpec, model: QuantizedModel, image: np.ndarray) -> ReferenceActivations:
    geoms = infer_geometry(spec)
    image = np.asarray(image)
    expected = (spec.input.height, spec.input.width, spec.input.channels)
    if image.shape != expected:
        raise ShapeMismatch(f"image shaped {image.shape}, network expects {expected}")
    if len(model.layers) != len(spec.layers):
        raise ShapeMismatch(f"model has {len(model.layers)} layers, network has {len(spec.layers)}")

    x = image.astype(np.int64)
    potentials, spikes = [], []
    for i, (g, q) in enumerate(zip(geoms, model.layers)):
        rows, cols, cin = g.in_dims
        if x.shape != (rows, cols, cin):
            raise ShapeMismatch(f"layer {i}: input shaped {x.shape}, expected {g.in_dims}")
        if q.weights.shape[:2] != (g.out_dims[2], g.beats_per_neuron):
            raise ShapeMismatch(f"layer {i}: weights shaped {q.weights.shape}")
        w = _dense_weights(q.weights, g.kernel_h, g.kernel_w, cin)
        out_r, out_c, out_ch = g.out_dims
        pot = np.zeros((out_r, out_c, out_ch), dtype=np.int64)
        for r in range(out_r):
            for c in range(out_c):
                acc = np.zeros(out_ch, dtype=np.int64)
                for ky in range(g.kernel_h):
                    y = r * g.stride - g.pad_top + ky
                    if not 0 <= y < rows:
                        continue  # zero padding contributes nothing
                    for kx in range(g.kernel_w):
                        xx = c * g.stride - g.pad_left + kx
                        if not 0 <= xx < cols:
                            continue
                        acc += w[:, ky, kx, :] @ x[y, xx, :]
                pot[r, c] = acc
        fired = (pot > q.thresholds.astype(np.int64)).astype(np.uint8)
        potentials.append(pot.astype(np.int32))
        spikes.append(fired)
        x = fired.astype(np.int64)
    return ReferenceActivations(potentials, spikes)


def count_macs(spec: NetworkSpec) -> int:
    if not spec.layers:
        return 0
    total = 0
    for layer, g in zip(spec.layers, infer_geometry(spec)):
        if layer.is_fc:
            total += g.in_dims[0] * g.in_dims[1] * g.in_dims[2] * layer.out_channels
        else:
            r, c, ch = g.out_dims
            total += r * c * ch * g.kernel_h * g.kernel_w * g.in_dims[2]
    return total


def count_ops(spec: NetworkSpec) -> int:
    """ANN-equivalent operations per inference: a multiply and an add per MAC."""
    return 2 * count_macs(spec)
