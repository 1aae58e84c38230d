"""Spiking pipeline simulator.

Spike values are computed exactly from bit-packed beats; timing is an
event-driven model at column granularity with two-stage feature buffers and
controller backpressure. The two halves are independent: timing never looks
at data.
"""
from __future__ import annotations

import csv
import hashlib
import heapq
import io
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .mapper import GROUP_SIZE, HANDSHAKE_CYCLES, MappingPlan, column_cycles, retiming_hops, window_capacity
from .netspec import BEAT_LANES, LayerGeometry, NetworkSpec, infer_geometry
from .oracle import count_ops
from .quantizer import QuantizedLayer, QuantizedModel

BRIDGE_LATENCY = 4
BRIDGE_LATENCY_CAP = 10
MERGE_CYCLES_PER_SOURCE = 1
# AND register, three adder stages, accumulate & fire
CORE_PIPELINE_STAGES = 5
TIMING_IMAGES = 8

IDLE, BUSY, STALLED = "idle", "busy", "stalled"


class SimulationError(RuntimeError):
    pass


class SimulationDeadlock(SimulationError):
    pass


class ConfigurationError(ValueError):
    pass


# -- spike tensors and the neuron core ------------------------------------------


@dataclass(frozen=True, eq=False)
class SpikeTensor:
    dims: tuple[int, int, int]
    payload: np.ndarray  # uint8 (rows, cols, groups), bit l of byte g is channel 8g + l

    def __post_init__(self):
        rows, cols, ch = self.dims
        groups = -(-ch // BEAT_LANES)
        p = np.asarray(self.payload, dtype=np.uint8)
        if p.shape != (rows, cols, groups):
            raise ValueError(f"payload shaped {p.shape}, expected {(rows, cols, groups)}")
        object.__setattr__(self, "payload", p)

    @classmethod
    def from_bits(cls, bits: np.ndarray) -> "SpikeTensor":
        bits = np.asarray(bits, dtype=np.uint8)
        rows, cols, ch = bits.shape
        groups = -(-ch // BEAT_LANES)
        lanes = np.zeros((rows, cols, groups * BEAT_LANES), dtype=np.uint8)
        lanes[..., :ch] = bits != 0
        return cls((rows, cols, ch), np.packbits(lanes, axis=-1, bitorder="little"))

    def lanes(self) -> np.ndarray:
        """(rows, cols, groups*8) 0/1 including the zero padding lanes."""
        return np.unpackbits(self.payload, axis=-1, bitorder="little")

    def to_bits(self) -> np.ndarray:
        return self.lanes()[..., : self.dims[2]]

    def tobytes(self) -> bytes:
        return self.payload.tobytes()

    def count(self) -> int:
        return int(np.unpackbits(self.payload).sum())

    def digest(self) -> str:
        return hashlib.sha256(self.tobytes()).hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, SpikeTensor):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.payload, other.payload)


def core_beat(spikes: int, weights: Sequence[int], acc: int) -> int:
    """One beat: lane l contributes weights[l] when bit l of ``spikes`` is set."""
    for lane in range(BEAT_LANES):
        if (spikes >> lane) & 1:
            acc += int(weights[lane])
    return acc


def fire(acc: int, t: int) -> int:
    return 1 if acc > t else 0


@dataclass
class NeuronCoreState:
    threshold: int
    acc: int = 0
    pipe_en: bool = True

    def beat(self, spikes: int, weights: Sequence[int]) -> None:
        if self.pipe_en:
            self.acc = core_beat(spikes, weights, self.acc)

    def output(self) -> int:
        return fire(self.acc, self.threshold)


def classify(potentials: Sequence[int] | np.ndarray) -> int:
    """Argmax of the final potentials; ties go to the lowest class index."""
    p = np.asarray(potentials).reshape(-1)
    return int(np.argmax(p))


# -- functional datapath ----------------------------------------------------------


def _windows(lanes: np.ndarray, geom: LayerGeometry, r0: int, r1: int) -> np.ndarray:
    """Rows r0..r1 of the im2col matrix: (rows, out_cols, kh*kw*lanes) in beat order."""
    rows, cols, depth = lanes.shape
    kh, kw, s = geom.kernel_h, geom.kernel_w, geom.stride
    out_r, out_c = geom.out_dims[0], geom.out_dims[1]
    pad_b = max(0, (out_r - 1) * s + kh - rows - geom.pad_top)
    pad_r = max(0, (out_c - 1) * s + kw - cols - geom.pad_left)
    lo = r0 * s
    hi = (r1 - 1) * s + kh
    padded = np.zeros((rows + geom.pad_top + pad_b, cols + geom.pad_left + pad_r, depth), dtype=lanes.dtype)
    padded[geom.pad_top : geom.pad_top + rows, geom.pad_left : geom.pad_left + cols] = lanes
    view = np.lib.stride_tricks.sliding_window_view(padded[lo:hi], (kh, kw), axis=(0, 1))
    view = view[::s, ::s][: r1 - r0, :out_c]  # (r, c, depth, kh, kw)
    return view.transpose(0, 1, 3, 4, 2).reshape(r1 - r0, out_c, kh * kw * depth)


def _input_lanes(x, geom: LayerGeometry) -> np.ndarray:
    if isinstance(x, SpikeTensor):
        return x.lanes()
    # 8-bit pixels, channel-padded into beat lanes
    rows, cols, ch = x.shape
    lanes = np.zeros((rows, cols, geom.in_groups * BEAT_LANES), dtype=np.uint8)
    lanes[..., :ch] = x
    return lanes


# float32 sums of integers stay exact below 2**24; every in-scope layer is far below
_EXACT_LIMIT = 2**24
_CHUNK_ELEMENTS = 1 << 22


def neuron_potentials(x, geom: LayerGeometry, layer: QuantizedLayer, first: int, last: int) -> np.ndarray:
    """int64 potentials (out_rows, out_cols, last-first) for neurons first..last-1."""
    lanes = _input_lanes(x, geom)
    w = layer.weights[first:last].reshape(last - first, -1)
    peak = int(lanes.max(initial=0)) * int(np.abs(w).sum(axis=1).max(initial=0))
    dtype = np.float32 if peak < _EXACT_LIMIT else np.float64
    wt = w.T.astype(dtype)
    out_r, out_c = geom.out_dims[0], geom.out_dims[1]
    per_row = max(1, out_c * wt.shape[0])
    step = max(1, _CHUNK_ELEMENTS // per_row)
    out = np.empty((out_r, out_c, last - first), dtype=np.int64)
    for r0 in range(0, out_r, step):
        r1 = min(out_r, r0 + step)
        cols = _windows(lanes, geom, r0, r1).astype(dtype)
        out[r0:r1] = np.rint(cols @ wt).astype(np.int64)
    return out


@dataclass
class MergedStream:
    ids: np.ndarray
    values: np.ndarray
    schedule: list[int]


def merge_round_robin(streams: Sequence[tuple[np.ndarray, np.ndarray]]) -> MergedStream:
    """Interleave split-layer outputs back into global neuron order.

    Each stream is (neuron_ids, values) with neurons on the last axis of
    values. The schedule lists the source served in each merge slot: one slot
    per source per output column, sources visited in turn.
    """
    if not streams:
        raise ConfigurationError("nothing to merge")
    ids = [np.asarray(s[0], dtype=np.int64).reshape(-1) for s in streams]
    seen: set[int] = set()
    for k, chunk in enumerate(ids):
        overlap = seen.intersection(chunk.tolist())
        if overlap or len(set(chunk.tolist())) != len(chunk):
            raise ConfigurationError(f"stream {k} overlaps neuron ids {sorted(overlap)[:4]}")
        seen.update(chunk.tolist())
    values = [np.asarray(s[1]) for s in streams]
    columns = values[0].shape[-2] if values[0].ndim >= 2 else 1
    order = sorted(range(len(streams)), key=lambda k: int(ids[k].min()) if ids[k].size else 0)
    schedule = order * columns
    if len(streams) == 1:
        return MergedStream(ids[0], values[0], schedule)
    all_ids = np.concatenate(ids)
    perm = np.argsort(all_ids, kind="stable")
    merged = np.concatenate(values, axis=-1)[..., perm]
    return MergedStream(all_ids[perm], merged, schedule)


def layer_forward(x, geom: LayerGeometry, layer: QuantizedLayer, unit_ranges=None) -> tuple[np.ndarray, SpikeTensor]:
    """Potentials and output spikes of one layer.

    ``unit_ranges`` lists (first_unit, last_unit) per source SLR for a split
    layer; each source computes its neurons and fires them, and the outputs
    are merged back into neuron order.
    """
    n = layer.out_channels
    if not unit_ranges or len(unit_ranges) == 1:
        pot = neuron_potentials(x, geom, layer, 0, n)
        spikes = pot > layer.thresholds.astype(np.int64)
    else:
        omega = unit_ranges[-1][1]
        npu = n // omega
        pot_streams, spike_streams = [], []
        for first, last in unit_ranges:
            ids = np.arange(first * npu, last * npu)
            p = neuron_potentials(x, geom, layer, first * npu, last * npu)
            pot_streams.append((ids, p))
            spike_streams.append((ids, p > layer.thresholds[ids].astype(np.int64)))
        pot = merge_round_robin(pot_streams).values
        spikes = merge_round_robin(spike_streams).values
    return pot.astype(np.int32), SpikeTensor.from_bits(spikes)


def transduce(image: np.ndarray, geom: LayerGeometry, layer: QuantizedLayer, unit_ranges=None) -> SpikeTensor:
    image = np.asarray(image)
    if image.shape != geom.in_dims:
        raise ValueError(f"image shaped {image.shape}, transduction layer expects {geom.in_dims}")
    return layer_forward(image.astype(np.uint8), geom, layer, unit_ranges)[1]


# -- timing model -------------------------------------------------------------------


@dataclass
class SimOptions:
    handshake_cycles: int = HANDSHAKE_CYCLES
    bridge_latency: int = BRIDGE_LATENCY
    merge_cycles_per_source: int = MERGE_CYCLES_PER_SOURCE
    group_size: int = GROUP_SIZE
    timing_images: int = TIMING_IMAGES
    trace: bool = False
    record_activations: bool = True

    def __post_init__(self):
        if not 0 <= self.bridge_latency <= BRIDGE_LATENCY_CAP:
            raise ConfigurationError(f"bridge latency must be within [0, {BRIDGE_LATENCY_CAP}] cycles")
        if self.timing_images < TIMING_IMAGES:
            raise ConfigurationError(f"at least {TIMING_IMAGES} timing images are needed for a steady state")


@dataclass
class LayerSimState:
    """Feature buffer and controller of one layer during timing simulation."""

    index: int
    duration: int
    in_cols: int
    window: list[tuple[int, int]]  # first/last input column each output column needs
    capacity: int
    stage1: tuple[int, int] | str | None = None  # loaded (image, col), "reserved", or empty
    stage2: deque = field(default_factory=deque)
    next_op: tuple[int, int] = (0, 0)
    busy_until: int | None = None
    busy: int = 0
    stalled: int = 0
    idle: int = 0
    ops: int = 0

    @property
    def last_needed(self) -> int:
        return self.window[-1][1]

    def ready(self) -> bool:
        img, j = self.next_op
        lo, hi = self.window[j]
        present = {col for i, col in self.stage2 if i == img}
        return all(c in present for c in range(lo, hi + 1))

    def dump(self) -> str:
        return (
            f"layer {self.index}: next op image {self.next_op[0]} column {self.next_op[1]}, "
            f"busy_until={self.busy_until}, stage1={self.stage1}, stage2={list(self.stage2)}"
        )


def _windows_needed(geom: LayerGeometry) -> list[tuple[int, int]]:
    cols = geom.in_dims[1]
    out = []
    for j in range(geom.out_cols):
        start = j * geom.stride - geom.pad_left
        out.append((max(0, start), min(cols - 1, start + geom.kernel_w - 1)))
    return out


@dataclass
class TimingResult:
    completions: list[int]
    layers: list[LayerSimState]
    trace: list[tuple[int, int, str]]


def simulate_timing(durations: Sequence[int], geoms: Sequence[LayerGeometry], images: int, trace: bool = False) -> TimingResult:
    """Column-level event simulation with latency-free handshakes.

    A controller starts an output column when its input window is in the
    window FIFO and the next layer's column store is empty; the store is
    reserved from that moment until the column lands. The first layer is fed
    by an ideal source and the last layer drains into an ideal sink.
    """
    states = [
        LayerSimState(i, int(d), g.in_dims[1], _windows_needed(g), window_capacity(g))
        for i, (d, g) in enumerate(zip(durations, geoms))
    ]
    n = len(states)
    source = [0, 0]  # next (image, column) the source delivers
    completions: list[int] = []
    events: list[tuple[int, int]] = []
    rows: list[tuple[int, int, str]] = []
    last_state = [None] * n
    now = 0

    def finished(s: LayerSimState) -> bool:
        return s.next_op[0] >= images

    def settle() -> None:
        changed = True
        while changed:
            changed = False
            if states[0].stage1 is None and source[0] < images:
                states[0].stage1 = (source[0], source[1])
                source[1] += 1
                if source[1] == states[0].in_cols:
                    source[0], source[1] = source[0] + 1, 0
                changed = True
            for s in reversed(states):
                if isinstance(s.stage1, tuple):
                    _, col = s.stage1
                    if col > s.last_needed:
                        s.stage1 = None
                        changed = True
                    elif len(s.stage2) < s.capacity:
                        s.stage2.append(s.stage1)
                        s.stage1 = None
                        changed = True
                if s.busy_until is None and not finished(s) and s.ready():
                    down = states[s.index + 1] if s.index + 1 < n else None
                    if down is None or down.stage1 is None:
                        if down is not None:
                            down.stage1 = "reserved"
                        s.busy_until = now + s.duration
                        heapq.heappush(events, (s.busy_until, s.index))
                        changed = True

    def account(until: int) -> None:
        for i, s in enumerate(states):
            if s.busy_until is not None:
                state = BUSY
            elif not finished(s) and s.ready():
                state = STALLED
            else:
                state = IDLE
            dt = until - now
            if state == BUSY:
                s.busy += dt
            elif state == STALLED:
                s.stalled += dt
            else:
                s.idle += dt
            if trace and state != last_state[i]:
                rows.append((now, i, state))
            last_state[i] = state

    settle()
    while len(completions) < images:
        if not events:
            dump = "\n".join(s.dump() for s in states)
            raise SimulationDeadlock(f"no progress at cycle {now}\n{dump}")
        t = events[0][0]
        account(t)
        now = t
        while events and events[0][0] == now:
            _, i = heapq.heappop(events)
            s = states[i]
            img, j = s.next_op
            s.busy_until = None
            s.ops += 1
            if i + 1 < n:
                states[i + 1].stage1 = (img, j)
            elif j == len(s.window) - 1:
                completions.append(now)
            if j + 1 < len(s.window):
                keep = s.window[j + 1][0]
                while s.stage2 and s.stage2[0][0] == img and s.stage2[0][1] < keep:
                    s.stage2.popleft()
                s.next_op = (img, j + 1)
            else:
                while s.stage2 and s.stage2[0][0] == img:
                    s.stage2.popleft()
                s.next_op = (img + 1, 0)
        settle()
    if trace:
        for i in range(n):
            rows.append((now, i, IDLE if finished(states[i]) else last_state[i]))
    return TimingResult(completions, states, rows)


def layer_latency(kappa: int, omega: int, sources: int, options: SimOptions) -> int:
    """Fixed pipeline delay a layer adds on top of its column service time."""
    lat = CORE_PIPELINE_STAGES + retiming_hops(kappa * omega - 1, options.group_size)
    if sources > 1:
        lat += options.bridge_latency + options.merge_cycles_per_source * sources
    return lat


# -- full simulation ---------------------------------------------------------------


@dataclass
class LayerStats:
    busy: int
    stalled: int
    idle: int
    service_cycles: int
    ops: int


@dataclass
class SimReport:
    network: str
    clock_mhz: float
    steady_state_cycles_per_image: int
    fill_latency_cycles: int
    layers: list[LayerStats]
    fps_at_clock: float
    gops: float
    bottleneck_layer: int
    predictions: list[int]
    final_potentials: list[np.ndarray]
    spikes: list[list[SpikeTensor]] = field(default_factory=list)
    potentials: list[list[np.ndarray]] = field(default_factory=list)
    trace: list[tuple[int, int, str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "network": self.network,
            "clock_mhz": self.clock_mhz,
            "steady_state_cycles_per_image": self.steady_state_cycles_per_image,
            "fill_latency_cycles": self.fill_latency_cycles,
            "fps_at_clock": self.fps_at_clock,
            "gops": self.gops,
            "bottleneck_layer": self.bottleneck_layer,
            "layers": [
                {"index": i, "busy": s.busy, "stalled": s.stalled, "idle": s.idle,
                 "service_cycles": s.service_cycles, "ops": s.ops}
                for i, s in enumerate(self.layers)
            ],
            "predictions": list(self.predictions),
            "final_potentials": [p.astype(int).tolist() for p in self.final_potentials],
            "spike_digests": [[t.digest() for t in per_image] for per_image in self.spikes],
        }

    def trace_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["cycle", "layer", "state"])
        writer.writerows(self.trace)
        return buf.getvalue()


def check_inputs(spec: NetworkSpec, plan: MappingPlan, model: QuantizedModel, geoms) -> None:
    if len(plan.layers) != len(spec.layers):
        raise ConfigurationError(f"plan has {len(plan.layers)} layers, network has {len(spec.layers)}")
    for i, (layer, m) in enumerate(zip(spec.layers, plan.layers)):
        if layer.out_channels % m.omega:
            raise ConfigurationError(f"layer {i}: plan omega {m.omega} does not divide {layer.out_channels}")
        if sum(share for _, share in m.splits) != m.omega:
            raise ConfigurationError(f"layer {i}: split shares do not sum to omega {m.omega}")
    model.check_against(spec, geoms)


def run_functional(spec: NetworkSpec, plan: MappingPlan | None, model: QuantizedModel, image: np.ndarray, geoms=None):
    """Spikes and potentials of every layer for one image."""
    geoms = geoms if geoms is not None else infer_geometry(spec)
    image = np.asarray(image)
    expected = (spec.input.height, spec.input.width, spec.input.channels)
    if image.shape != expected:
        raise ValueError(f"image shaped {image.shape}, network expects {expected}")
    x = image.astype(np.uint8)
    spikes, pots = [], []
    for i, (g, q) in enumerate(zip(geoms, model.layers)):
        ranges = None
        if plan is not None:
            ranges = [(lo, hi) for _, lo, hi in plan.layers[i].unit_ranges()]
        pot, out = layer_forward(x, g, q, ranges)
        spikes.append(out)
        pots.append(pot)
        x = out
    return spikes, pots


def simulate(
    spec: NetworkSpec,
    plan: MappingPlan,
    model: QuantizedModel,
    images: Sequence[np.ndarray] | np.ndarray = (),
    options: SimOptions | None = None,
) -> SimReport:
    options = options or SimOptions()
    geoms = infer_geometry(spec)
    check_inputs(spec, plan, model, geoms)

    durations = [
        column_cycles(g, m.omega, layer.out_channels, options.handshake_cycles)
        for layer, g, m in zip(spec.layers, geoms, plan.layers)
    ]
    k = options.timing_images
    timing = simulate_timing(durations, geoms, k, trace=options.trace)
    c = timing.completions
    half = k // 2
    steady = int(round((c[-1] - c[half - 1]) / (k - half)))
    latency = sum(
        layer_latency(g.kappa, m.omega, len(m.splits), options) for g, m in zip(geoms, plan.layers)
    )
    stats = [
        LayerStats(s.busy, s.stalled, s.idle, g.out_cols * d, s.ops)
        for s, g, d in zip(timing.layers, geoms, durations)
    ]
    bottleneck = max(range(len(stats)), key=lambda i: (stats[i].busy, -i))
    fps = spec.clock_mhz * 1e6 / steady

    predictions, finals, all_spikes, all_pots = [], [], [], []
    for image in images:
        spikes, pots = run_functional(spec, plan, model, image, geoms)
        finals.append(pots[-1].reshape(-1))
        predictions.append(classify(finals[-1]))
        if options.record_activations:
            all_spikes.append(spikes)
            all_pots.append(pots)

    return SimReport(
        network=spec.name,
        clock_mhz=spec.clock_mhz,
        steady_state_cycles_per_image=steady,
        fill_latency_cycles=c[0] + latency,
        layers=stats,
        fps_at_clock=fps,
        gops=count_ops(spec) * fps / 1e9,
        bottleneck_layer=bottleneck,
        predictions=predictions,
        final_potentials=finals,
        spikes=all_spikes,
        potentials=all_pots,
        trace=timing.trace,
    )
