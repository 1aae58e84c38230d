"""Resource mapping: weight-unit counts, memory cascades, DSP/LUT estimates
and layer-to-SLR assignment with split-kernel balancing."""
from __future__ import annotations

import itertools
import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

from .netspec import BRAM, TRANSDUCTION, LayerGeometry, LayerSpec, NetworkSpec, infer_geometry

BRAM_BYTES = 4096
URAM_BYTES = 8 * BRAM_BYTES
THRESHOLD_BYTES = 4
HANDSHAKE_CYCLES = 2
GROUP_SIZE = 8

RESOURCES = ("bram", "uram", "dsp", "lut")
# LUTs are reported but take no part in packing or in the imbalance score
BALANCED_RESOURCES = ("bram", "uram", "dsp")



class MappingError(RuntimeError):
    pass


class UnmappableLayer(MappingError):
    pass


class DeviceExhausted(MappingError):
    def __init__(self, shortfall: dict[str, float], detail: str = ""):
        self.shortfall = shortfall
        parts = [f"{k} short by {v:g}" for k, v in shortfall.items()]
        if detail:
            parts.append(detail)
        super().__init__("device exhausted: " + ", ".join(parts))


def valid_omega_set(limit: int) -> list[int]:
    """Legal weight-unit counts up to ``limit``: 1, 2, 4, then multiples of 8."""
    out = [w for w in (1, 2, 4) if w <= limit]
    out.extend(range(8, limit + 1, 8))
    return out


def is_valid_omega(w: int) -> bool:
    return w in (1, 2, 4) or (w >= 8 and w % 8 == 0)


def block_capacity(mem_kind: str) -> int:
    return BRAM_BYTES if mem_kind == BRAM else URAM_BYTES


def neuron_footprint(geom: LayerGeometry) -> int:
    """Bytes one neuron occupies in its weight unit: padded weights plus threshold."""
    return geom.beats_per_neuron * 8 + THRESHOLD_BYTES


def memory_blocks_for_layer(
    geom: LayerGeometry, out_channels: int, omega: int, mem_kind: str, max_cascade: int | None = None
) -> tuple[int, int, float]:
    """Returns (blocks, cascade, utilization_per_block) for one layer."""
    if out_channels % omega:
        raise ValueError(f"{out_channels} outputs not divisible by omega {omega}")
    cap = block_capacity(mem_kind)
    bytes_per_unit = (out_channels // omega) * neuron_footprint(geom)
    cascade = -(-bytes_per_unit // cap)
    if max_cascade is not None and cascade > max_cascade:
        raise UnmappableLayer(
            f"layer unmappable: {bytes_per_unit} B per weight unit needs a {cascade}x {mem_kind} "
            f"cascade, device allows {max_cascade}"
        )
    return omega * cascade, cascade, bytes_per_unit / (cascade * cap)


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    slr_count: int
    bram_blocks: int
    uram_blocks: int
    dsp_slices: int
    luts: int
    # one DSP runs the four first-stage adds of a core in SIMD mode
    dsp_per_core: int = 1
    dsp_per_transduction_core: int = 8
    lut_per_core: int = 60
    lut_per_buffer_column: int = 40
    lut_per_layer: int = 600
    # deepest cascade the planner picks on its own; explicit overrides may go deeper
    auto_cascade_limit: int = 16
    # fraction of each per-SLR budget the packer may fill
    fill_limit: float = 1.0

    def __post_init__(self):
        if not 1 <= self.slr_count <= 4:
            raise ValueError(f"slr_count must be in [1, 4], got {self.slr_count}")
        for name in ("bram_blocks", "uram_blocks", "dsp_slices", "luts"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def budget(self, resource: str) -> int:
        return {"bram": self.bram_blocks, "uram": self.uram_blocks, "dsp": self.dsp_slices, "lut": self.luts}[resource]

    def max_cascade(self, mem_kind: str) -> int:
        # a weight unit never straddles two SLRs
        return self.bram_blocks if mem_kind == BRAM else self.uram_blocks

    def to_dict(self) -> dict:
        return asdict(self)


VU9P_3SLR = DeviceProfile("vu9p-3slr", 3, bram_blocks=720, uram_blocks=320, dsp_slices=2280, luts=394_000)
BUILTIN_PROFILES = {VU9P_3SLR.name: VU9P_3SLR}
PROFILE_DIR = Path(__file__).parent / "profiles"


def load_profile(ref: str | dict | DeviceProfile | None) -> DeviceProfile:
    """Resolve a profile name, JSON path, or explicit budget dict.

    Names are looked up in $DF2_PROFILE_DIR first, then among the built-ins
    and the packaged profile directory.
    """
    if ref is None:
        return VU9P_3SLR
    if isinstance(ref, DeviceProfile):
        return ref
    if isinstance(ref, dict):
        data = dict(ref)
        data.setdefault("name", "custom")
        return DeviceProfile(**data)
    key = ref.lower()
    candidates = [Path(ref)]
    for d in filter(None, [os.environ.get("DF2_PROFILE_DIR")]):
        candidates += [Path(d) / f"{ref}.json", Path(d) / f"{key}.json"]
    for path in candidates:
        if path.is_file():
            with open(path) as f:
                return load_profile(json.load(f))
    if key in BUILTIN_PROFILES:
        return BUILTIN_PROFILES[key]
    path = PROFILE_DIR / f"{key}.json"
    if path.is_file():
        with open(path) as f:
            return load_profile(json.load(f))
    raise FileNotFoundError(f"no device profile named {ref!r}")


def cores(geom: LayerGeometry, omega: int) -> int:
    return geom.kappa * omega


def dsp_estimate(geom: LayerGeometry, omega: int, kind: str, device: DeviceProfile = VU9P_3SLR) -> int:
    per_core = device.dsp_per_transduction_core if kind == TRANSDUCTION else device.dsp_per_core
    return cores(geom, omega) * per_core


def window_capacity(geom: LayerGeometry) -> int:
    """Columns the second buffer stage holds: the window plus room for the next stride."""
    step = geom.kernel_w if geom.out_cols == 1 else geom.stride
    return geom.kernel_w + step - 1


def buffer_columns(geom: LayerGeometry) -> int:
    """Columns held by a layer's two-stage input buffer (column store + window FIFO)."""
    return 1 + window_capacity(geom)


def lut_estimate(geom: LayerGeometry, omega: int, device: DeviceProfile = VU9P_3SLR) -> int:
    return cores(geom, omega) * device.lut_per_core + fixed_lut(geom, device)


def fixed_lut(geom: LayerGeometry, device: DeviceProfile = VU9P_3SLR) -> int:
    """Controller and feature buffer; always on the layer's primary SLR."""
    return device.lut_per_layer + buffer_columns(geom) * device.lut_per_buffer_column


def column_cycles(geom: LayerGeometry, omega: int, out_channels: int, handshake: int = HANDSHAKE_CYCLES) -> int:
    """Cycles for one kernel operation: each unit streams its neurons beat by beat."""
    return (out_channels // omega) * geom.beats_per_neuron + handshake


def service_cycles(geom: LayerGeometry, omega: int, out_channels: int, handshake: int = HANDSHAKE_CYCLES) -> int:
    """Cycles a layer needs per image."""
    return geom.out_cols * column_cycles(geom, omega, out_channels, handshake)


def retiming_hops(core_position: int, group_size: int = GROUP_SIZE) -> int:
    return -(-core_position // group_size)


# -- plans -------------------------------------------------------------------


@dataclass(frozen=True)
class LayerMapping:
    index: int
    notation: str
    kind: str
    kappa: int
    omega: int
    neurons_per_unit: int
    mem_blocks: int
    mem_kind: str
    cascade_used: int
    utilization_per_block: float
    dsp_est: int
    lut_est: int
    splits: tuple[tuple[int, int], ...]
    primary_slr: int
    service_cycles: int
    group_size: int = GROUP_SIZE

    @property
    def is_split(self) -> bool:
        return len(self.splits) > 1

    def unit_ranges(self) -> list[tuple[int, int, int]]:
        """(slr, first_unit, last_unit_exclusive) for each split share, in unit order."""
        out, start = [], 0
        for slr, share in self.splits:
            out.append((slr, start, start + share))
            start += share
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["splits"] = [list(s) for s in self.splits]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerMapping":
        d = dict(d)
        d["splits"] = tuple(tuple(s) for s in d["splits"])
        return cls(**d)


@dataclass(frozen=True)
class MappingPlan:
    network: str
    device: DeviceProfile
    layers: tuple[LayerMapping, ...]
    slr_usage: tuple[dict, ...]
    throughput_target: int

    @property
    def slrs_used(self) -> list[int]:
        return sorted({slr for m in self.layers for slr, _ in m.splits})

    @property
    def omegas(self) -> list[int]:
        return [m.omega for m in self.layers]

    def utilization(self) -> list[dict[str, float]]:
        return [{r: 100.0 * u[r] / self.device.budget(r) for r in RESOURCES} for u in self.slr_usage]

    def to_dict(self) -> dict:
        return {
            "network": self.network,
            "device": self.device.to_dict(),
            "throughput_target": self.throughput_target,
            "layers": [m.to_dict() for m in self.layers],
            "slr_usage": [dict(u) for u in self.slr_usage],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MappingPlan":
        return cls(
            network=d["network"],
            device=DeviceProfile(**d["device"]),
            layers=tuple(LayerMapping.from_dict(m) for m in d["layers"]),
            slr_usage=tuple(dict(u) for u in d["slr_usage"]),
            throughput_target=int(d["throughput_target"]),
        )


def dump_plan(plan: MappingPlan) -> str:
    return json.dumps(plan.to_dict(), indent=2, sort_keys=True) + "\n"


def load_plan(path: str | Path) -> MappingPlan:
    with open(path) as f:
        return MappingPlan.from_dict(json.load(f))


# -- weight-unit selection -----------------------------------------------------


def notated_omega(layer: LayerSpec, geom: LayerGeometry) -> int | None:
    """Smallest legal omega whose weight unit fits the cascade written in the notation."""
    limit = layer.cascade * block_capacity(layer.mem_kind)
    foot = neuron_footprint(geom)
    for w in valid_omega_set(layer.out_channels):
        if layer.out_channels % w == 0 and (layer.out_channels // w) * foot <= limit:
            return w
    return None


def default_throughput_target(spec: NetworkSpec, geoms: Sequence[LayerGeometry]) -> int:
    """Pipeline period implied by the notation.

    The transduction layer runs at its minimum parallelism; every other layer
    at the omega its notated memory depth allows. The slowest of these sets
    the period all layers are then sized against.
    """
    first = spec.layers[0]
    periods = [service_cycles(geoms[0], 1, first.out_channels)]
    for layer, geom in zip(spec.layers[1:], geoms[1:]):
        w = notated_omega(layer, geom)
        if w is None:
            w = layer.out_channels if is_valid_omega(layer.out_channels) else 1
        periods.append(service_cycles(geom, w, layer.out_channels))
    return max(periods)


def _unit_cost(layer: LayerSpec, geom: LayerGeometry, omega: int, device: DeviceProfile) -> float:
    blocks, _, _ = memory_blocks_for_layer(geom, layer.out_channels, omega, layer.mem_kind)
    mem_budget = device.bram_blocks if layer.mem_kind == BRAM else device.uram_blocks
    return blocks / mem_budget + dsp_estimate(geom, omega, layer.kind, device) / device.dsp_slices


def choose_omega(layer: LayerSpec, geom: LayerGeometry, target: int, device: DeviceProfile) -> int:
    """Cheapest legal omega that meets the target period.

    Cost is memory plus DSP, each as a fraction of one SLR; ties go to the
    smaller omega. Falls back to the fastest mappable omega when nothing
    meets the target.
    """
    depth = {}
    for w in valid_omega_set(layer.out_channels):
        if layer.out_channels % w == 0:
            depth[w] = memory_blocks_for_layer(geom, layer.out_channels, w, layer.mem_kind)[1]
    # stay within the planner's own cascade limit when possible, else anything the device can hold
    legal = [w for w, c in depth.items() if c <= device.auto_cascade_limit]
    if not legal:
        legal = [w for w, c in depth.items() if c <= device.max_cascade(layer.mem_kind)]
    if not legal:
        raise UnmappableLayer(
            f"layer {layer.notation()}: layer unmappable, every legal omega needs a cascade deeper than "
            f"{device.max_cascade(layer.mem_kind)} {layer.mem_kind} blocks"
        )
    fast = [w for w in legal if service_cycles(geom, w, layer.out_channels) <= target]
    if not fast:
        return legal[-1]
    return min(fast, key=lambda w: (round(_unit_cost(layer, geom, w, device), 12), w))


# -- SLR packing ----------------------------------------------------------------


@dataclass
class _Demand:
    unit: dict[str, float]  # per weight unit
    fixed: dict[str, float]  # on the primary SLR only
    omega: int

    def piece(self, share: int, primary: bool) -> dict[str, float]:
        out = {r: self.unit[r] * share for r in RESOURCES}
        if primary:
            for r in RESOURCES:
                out[r] += self.fixed[r]
        return out


def _layer_demand(layer: LayerSpec, geom: LayerGeometry, omega: int, device: DeviceProfile) -> _Demand:
    _, cascade, _ = memory_blocks_for_layer(geom, layer.out_channels, omega, layer.mem_kind)
    mem = "bram" if layer.mem_kind == BRAM else "uram"
    per_core_dsp = device.dsp_per_transduction_core if layer.kind == TRANSDUCTION else device.dsp_per_core
    unit = {r: 0.0 for r in RESOURCES}
    unit[mem] = cascade
    unit["dsp"] = geom.kappa * per_core_dsp
    unit["lut"] = geom.kappa * device.lut_per_core
    fixed = {r: 0.0 for r in RESOURCES}
    fixed["lut"] = fixed_lut(geom, device)
    return _Demand(unit, fixed, omega)


def _compositions(omega: int, parts: int, step: int):
    """Ways to cut omega units into ``parts`` positive shares on a grid of ``step``."""
    if parts == 1:
        yield (omega,)
        return
    for first in range(step, omega - (parts - 1) + 1, step):
        if omega - first < parts - 1:
            break
        for rest in _compositions(omega - first, parts - 1, step):
            yield (first,) + rest


def _imbalance(usage: Sequence[dict], device: DeviceProfile) -> float:
    if len(usage) < 2:
        return 0.0
    worst = 0.0
    for r in BALANCED_RESOURCES:
        pct = [100.0 * u[r] / device.budget(r) for u in usage]
        worst = max(worst, max(pct) - min(pct))
    return worst


def _fits(u: dict, device: DeviceProfile) -> bool:
    return all(u[r] <= device.budget(r) * device.fill_limit + 1e-9 for r in BALANCED_RESOURCES)


# a split must buy at least this much balance (percentage points) over keeping a layer whole
SPLIT_PENALTY = 2.0


# shares of a split layer are searched on a grid of omega / SPLIT_GRID units
SPLIT_GRID = 12


def _options(demand: _Demand, n: int):
    """Candidate placements as lists of (slr, share); whole layers first."""
    for j in range(n):
        yield [(j, demand.omega)]
    step = max(1, demand.omega // SPLIT_GRID)
    for parts in range(2, n + 1):
        for slrs in itertools.combinations(range(n), parts):
            for shares in _compositions(demand.omega, parts, step):
                yield list(zip(slrs, shares))


def _add(usage: list[dict], demand: _Demand, option, primary: int, sign: float = 1.0) -> None:
    for slr, share in option:
        piece = demand.piece(share, slr == primary)
        for r in RESOURCES:
            usage[slr][r] += sign * piece[r]


def _primary(option) -> int:
    return max(option, key=lambda s: (s[1], -s[0]))[0]


def _best_option(demand: _Demand, usage: list[dict], n: int, device: DeviceProfile, extra_pieces: int = 0):
    """Placement of one layer that minimizes imbalance plus split penalty, given the rest."""
    best = None
    for rank, option in enumerate(_options(demand, n)):
        primary = _primary(option)
        trial = [dict(u) for u in usage]
        _add(trial, demand, option, primary)
        if not all(_fits(trial[slr], device) for slr, _ in option):
            continue
        penalty = SPLIT_PENALTY * (len(option) - 1 + extra_pieces)
        peak = max(100.0 * trial[s][r] / device.budget(r) for s in range(n) for r in BALANCED_RESOURCES)
        key = (round(_imbalance(trial, device) + penalty, 9), round(peak, 9), rank)
        if best is None or key < best[0]:
            best = (key, tuple(option), primary, trial)
    return best


def _pack(demands: Sequence[_Demand], n: int, device: DeviceProfile, order: Sequence[int]):
    """Greedy placement in ``order`` followed by single-layer re-placement passes."""
    usage = [{r: 0.0 for r in RESOURCES} for _ in range(n)]
    placements: list = [None] * len(demands)
    for idx in order:
        best = _best_option(demands[idx], usage, n, device)
        if best is None:
            return None, idx
        _, option, primary, usage = best
        placements[idx] = (option, primary)

    def score() -> float:
        pieces = sum(len(opt) - 1 for opt, _ in placements)
        return round(_imbalance(usage, device) + SPLIT_PENALTY * pieces, 9)

    current = score()
    for _ in range(32):
        improved = False
        # single re-placements first, then pairs, which can trade space between two layers
        moves = [(i,) for i in range(len(demands))]
        moves += [(i, j) for i in range(len(demands)) for j in range(len(demands)) if i != j]
        for move in moves:
            saved = [placements[i] for i in move]
            for i in move:
                _add(usage, demands[i], *placements[i], -1.0)
            trial_usage, trial = usage, {}
            for i in move:
                others = sum(len(opt) - 1 for j, (opt, _) in enumerate(placements) if j not in move)
                others += sum(len(opt) - 1 for opt, _ in trial.values())
                best = _best_option(demands[i], trial_usage, n, device, others)
                if best is None:
                    break
                _, option, primary, trial_usage = best
                trial[i] = (option, primary)
            if len(trial) == len(move) and best[0][0] < current - 1e-6:
                usage = trial_usage
                for i, v in trial.items():
                    placements[i] = v
                current = score()
                improved = True
            else:
                for i, v in zip(move, saved):
                    _add(usage, demands[i], *v)
        if not improved:
            break
    return (placements, usage), None


def _size(d: _Demand, device: DeviceProfile) -> float:
    return max(d.unit[r] * d.omega / device.budget(r) for r in BALANCED_RESOURCES)


def _shortfall(demands: Sequence[_Demand], device: DeviceProfile) -> dict[str, float]:
    total = {r: sum(d.piece(d.omega, True)[r] for d in demands) for r in BALANCED_RESOURCES}
    return {
        r: total[r] - device.budget(r) * device.slr_count * device.fill_limit
        for r in BALANCED_RESOURCES
        if total[r] > device.budget(r) * device.slr_count * device.fill_limit
    }


def assign_slrs(
    spec: NetworkSpec,
    geoms: Sequence[LayerGeometry] | None = None,
    device: DeviceProfile | str | None = None,
    throughput_hint: int | None = None,
) -> MappingPlan:
    """Pick omega per layer and place layers (whole or split) on the fewest SLRs.

    ``throughput_hint`` is the target period in cycles per image; by default
    it is derived from the notated memory depths. Omega overrides on the network
    win over the automatic choice.
    """
    device = load_profile(device if device is not None else spec.device)
    geoms = list(geoms) if geoms is not None else infer_geometry(spec)
    target = throughput_hint or default_throughput_target(spec, geoms)

    omegas = []
    for i, (layer, geom) in enumerate(zip(spec.layers, geoms)):
        if i in spec.omega:
            w = spec.omega[i]
            if not is_valid_omega(w) or layer.out_channels % w:
                raise UnmappableLayer(f"layer {i}: omega {w} is not legal for {layer.out_channels} outputs")
            memory_blocks_for_layer(geom, layer.out_channels, w, layer.mem_kind, device.max_cascade(layer.mem_kind))
        else:
            w = choose_omega(layer, geom, target, device)
        omegas.append(w)

    demands = [_layer_demand(l, g, w, device) for l, g, w in zip(spec.layers, geoms, omegas)]
    short = _shortfall(demands, device)
    if short:
        raise DeviceExhausted(short)
    total = {r: sum(d.piece(d.omega, True)[r] for d in demands) for r in BALANCED_RESOURCES}
    n_min = max(1, *(int(-(-total[r] // (device.budget(r) * device.fill_limit))) for r in BALANCED_RESOURCES))
    result, failed, n = None, None, n_min
    for n in range(n_min, device.slr_count + 1):
        # layer order keeps neighbours together; largest-first rescues tight fits
        for order in (range(len(demands)), sorted(range(len(demands)), key=lambda i: -_size(demands[i], device))):
            result, fail = _pack(demands, n, device, list(order))
            failed = fail if failed is None else failed
            if result is not None:
                break
        if result is not None:
            break
    if result is None:
        raise DeviceExhausted({}, f"layer {failed} ({spec.layers[failed].notation()}) does not fit any placement")
    placements, _ = result
    return build_plan(spec, omegas, [opt for opt, _ in placements], device, target, slr_span=n, geoms=geoms)


def build_plan(
    spec: NetworkSpec,
    omegas: Sequence[int],
    splits: Sequence[Sequence[tuple[int, int]]] | None = None,
    device: DeviceProfile | str | None = None,
    throughput_target: int | None = None,
    slr_span: int | None = None,
    geoms: Sequence[LayerGeometry] | None = None,
    check_budget: bool = False,
) -> MappingPlan:
    """Assemble a plan from explicit omegas and placements.

    ``splits`` gives (slr, share) pairs per layer; omitted layers sit whole
    on SLR 0. The primary SLR of a layer is the one holding the largest
    share (lowest SLR on ties).
    """
    device = load_profile(device if device is not None else spec.device)
    geoms = list(geoms) if geoms is not None else infer_geometry(spec)
    if len(omegas) != len(spec.layers):
        raise MappingError(f"{len(omegas)} omegas for {len(spec.layers)} layers")
    splits = list(splits) if splits is not None else [((0, w),) for w in omegas]
    span = slr_span or 1 + max(slr for opt in splits for slr, _ in opt)

    usage = [{r: 0.0 for r in RESOURCES} for _ in range(span)]
    mappings = []
    for i, (layer, geom, w, option) in enumerate(zip(spec.layers, geoms, omegas, splits)):
        option = tuple((int(slr), int(share)) for slr, share in option)
        if not is_valid_omega(w) or layer.out_channels % w:
            raise UnmappableLayer(f"layer {i}: omega {w} is not legal for {layer.out_channels} outputs")
        if not option or any(share <= 0 for _, share in option) or sum(sh for _, sh in option) != w:
            raise MappingError(f"layer {i}: split shares {option} do not partition omega {w}")
        if len({slr for slr, _ in option}) != len(option) or any(not 0 <= slr < span for slr, _ in option):
            raise MappingError(f"layer {i}: bad SLR ids in {option}")
        primary = _primary(option)
        _add(usage, _layer_demand(layer, geom, w, device), option, primary)
        blocks, cascade, util = memory_blocks_for_layer(geom, layer.out_channels, w, layer.mem_kind)
        mappings.append(
            LayerMapping(
                index=i,
                notation=layer.notation(),
                kind=layer.kind,
                kappa=geom.kappa,
                omega=w,
                neurons_per_unit=layer.out_channels // w,
                mem_blocks=blocks,
                mem_kind=layer.mem_kind,
                cascade_used=cascade,
                utilization_per_block=util,
                dsp_est=dsp_estimate(geom, w, layer.kind, device),
                lut_est=lut_estimate(geom, w, device),
                splits=option,
                primary_slr=primary,
                service_cycles=service_cycles(geom, w, layer.out_channels),
            )
        )
    if check_budget:
        over = {
            f"slr{s} {r}": u[r] - device.budget(r)
            for s, u in enumerate(usage)
            for r in BALANCED_RESOURCES
            if u[r] > device.budget(r)
        }
        if over:
            raise DeviceExhausted(over)
    target = throughput_target or max(m.service_cycles for m in mappings)
    rounded = tuple({r: int(round(u[r])) for r in RESOURCES} for u in usage)
    return MappingPlan(spec.name, device, tuple(mappings), rounded, int(target))


def layerwise_only_plan(spec: NetworkSpec, device: DeviceProfile | str | None = None, slrs: int | None = None):
    """Best plan without split-kernel mapping, for comparison against assign_slrs.

    Every whole-layer assignment onto ``slrs`` SLRs is enumerated (networks of
    up to 12 layers) and the feasible one with the lowest imbalance wins.
    Returns (imbalance, assignment, usage), or None when nothing fits.
    """
    device = load_profile(device if device is not None else spec.device)
    base = assign_slrs(spec, device=device)
    geoms = infer_geometry(spec)
    demands = [_layer_demand(l, g, m.omega, device) for l, g, m in zip(spec.layers, geoms, base.layers)]
    n = slrs or len(base.slrs_used)
    best = None
    for assignment in itertools.product(range(n), repeat=len(demands)) if len(demands) <= 12 else []:
        if set(assignment) != set(range(n)):
            continue
        usage = [{r: 0.0 for r in RESOURCES} for _ in range(n)]
        for d, slr in zip(demands, assignment):
            for r in RESOURCES:
                usage[slr][r] += d.piece(d.omega, True)[r]
        if not all(_fits(u, device) for u in usage):
            continue
        score = _imbalance(usage, device)
        if best is None or score < best[0]:
            best = (score, assignment, usage)
    return best


# -- reporting ------------------------------------------------------------------


def balance_report(plan: MappingPlan) -> dict:
    """Per-SLR utilization (percent) and the imbalance score.

    The score spans every SLR the plan was packed onto, so an empty SLR in a
    two-SLR plan counts as 0% rather than being skipped.
    """
    util = plan.utilization()
    table = [{"slr": s, **{r: round(util[s][r], 3) for r in RESOURCES}} for s in range(len(util))]
    imbalance = _imbalance(plan.slr_usage, plan.device)
    return {"slrs": table, "occupied": list(range(len(util))), "imbalance": imbalance}


def format_balance(report: dict) -> str:
    lines = [f"{'SLR':>4} {'BRAM%':>8} {'URAM%':>8} {'DSP%':>8} {'LUT%':>8}"]
    for row in report["slrs"]:
        lines.append(f"{row['slr']:>4} {row['bram']:8.1f} {row['uram']:8.1f} {row['dsp']:8.1f} {row['lut']:8.1f}")
    lines.append(f"imbalance: {report['imbalance']:.1f} pp")
    return "\n".join(lines)
