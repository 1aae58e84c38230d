"""Network description: layer notation, config loading and shape inference.

Layers are written in the compact notation used by the accelerator configs::

    pConv3-1-64/b2   3x3 conv, stride 1, same padding, 64 outputs, 2x BRAM cascade
    Conv2-2-16/b1    2x2 conv, stride 2, valid padding (the pooling replacement)
    Fc-1200/u4       fully-connected, 1200 outputs, 4x URAM cascade

The first layer of a network always becomes the transduction layer, which
consumes 8-bit pixels instead of spikes.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable

TRANSDUCTION = "transduction-conv"
CONV = "conv"
FC = "fully-connected"

SAME = "same"
VALID = "valid"

BRAM = "BRAM"
URAM = "URAM"

LEGAL_KERNELS = (2, 3)
LEGAL_STRIDES = (1, 2)
BEAT_LANES = 8


class NotationError(ValueError):
    """Raised when a layer string does not follow the notation grammar."""


class ValidationError(ValueError):
    """Raised when a parsed layer carries illegal attribute values."""


class GeometryError(ValueError):
    """Raised when shape inference yields an empty feature map."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int
    mem_kind: str
    cascade: int
    kernel: int | None = None  # None for fully-connected: the full input extent
    stride: int = 1
    padding: str = VALID

    @property
    def is_fc(self) -> bool:
        return self.kind == FC

    def problems(self) -> list[str]:
        """Attribute-level legality checks; empty when the layer is legal."""
        out = []
        if self.kind not in (TRANSDUCTION, CONV, FC):
            out.append(f"unknown layer kind {self.kind!r}")
        if not self.is_fc:
            if self.kernel not in LEGAL_KERNELS:
                out.append(f"illegal kernel {self.kernel}")
            if self.stride not in LEGAL_STRIDES:
                out.append(f"illegal stride {self.stride}")
        elif self.padding != VALID:
            out.append("fully-connected layers must use valid padding")
        if self.padding not in (SAME, VALID):
            out.append(f"illegal padding {self.padding!r}")
        if self.out_channels < 1:
            out.append(f"illegal channel count {self.out_channels}")
        if self.mem_kind not in (BRAM, URAM):
            out.append(f"illegal memory kind {self.mem_kind!r}")
        if self.cascade < 1:
            out.append(f"illegal cascade {self.cascade}")
        return out

    def notation(self) -> str:
        mem = ("b" if self.mem_kind == BRAM else "u") + str(self.cascade)
        if self.is_fc:
            return f"Fc-{self.out_channels}/{mem}"
        prefix = "p" if self.padding == SAME else ""
        return f"{prefix}Conv{self.kernel}-{self.stride}-{self.out_channels}/{mem}"


_INT = re.compile(r"[0-9]+")


def _int_token(tok: str, text: str, what: str) -> int:
    if not _INT.fullmatch(tok):
        raise NotationError(f"bad {what} token {tok!r} in {text!r}")
    return int(tok)


def parse_layer_notation(text: str) -> LayerSpec:
    """Parse one layer string; the result is always a conv or fc layer."""
    s = "".join(text.split())
    if s.count("/") != 1:
        raise NotationError(f"missing memory token after '/' in {text!r}")
    head, mem = s.split("/")
    if not mem or mem[0] not in "bu":
        raise NotationError(f"bad memory token {mem!r} in {text!r}")
    mem_kind = BRAM if mem[0] == "b" else URAM
    cascade = _int_token(mem[1:], text, "cascade")

    parts = head.split("-")
    op = parts[0]
    if op == "Fc":
        if len(parts) != 2:
            raise NotationError(f"Fc layer takes one field, got {head!r}")
        spec = LayerSpec(FC, _int_token(parts[1], text, "channel"), mem_kind, cascade)
    else:
        m = re.fullmatch(r"(p?)Conv([0-9]+)", op)
        if m is None:
            raise NotationError(f"bad layer token {op!r} in {text!r}")
        if len(parts) != 3:
            raise NotationError(f"Conv layer takes stride and channel fields, got {head!r}")
        spec = LayerSpec(
            CONV,
            _int_token(parts[2], text, "channel"),
            mem_kind,
            cascade,
            kernel=int(m.group(2)),
            stride=_int_token(parts[1], text, "stride"),
            padding=SAME if m.group(1) else VALID,
        )
    problems = spec.problems()
    if problems:
        raise ValidationError(f"{text!r}: " + "; ".join(problems))
    return spec


@dataclass(frozen=True)
class InputShape:
    height: int
    width: int
    channels: int
    bit_depth: int = 8


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    input: InputShape
    clock_mhz: float
    layers: tuple[LayerSpec, ...]
    omega: dict[int, int] = field(default_factory=dict, compare=False)
    device: Any = None

    def with_omega(self, overrides: dict[int, int]) -> "NetworkSpec":
        merged = dict(self.omega)
        merged.update(overrides)
        return replace(self, omega=merged)


@dataclass(frozen=True)
class LayerGeometry:
    in_dims: tuple[int, int, int]
    out_dims: tuple[int, int, int]
    kernel_h: int
    kernel_w: int
    stride: int
    pad_top: int
    pad_left: int

    @property
    def in_groups(self) -> int:
        return math.ceil(self.in_dims[2] / BEAT_LANES)

    @property
    def fan_in(self) -> int:
        return self.kernel_h * self.kernel_w * self.in_dims[2]

    @property
    def beats_per_neuron(self) -> int:
        return self.kernel_h * self.kernel_w * self.in_groups

    @property
    def kappa(self) -> int:
        return self.out_dims[0]

    @property
    def out_cols(self) -> int:
        return self.out_dims[1]


def _out_extent(n: int, k: int, s: int, padding: str) -> tuple[int, int]:
    """Output length and leading pad for one spatial axis."""
    if padding == SAME:
        out = -(-n // s)
        total = max((out - 1) * s + k - n, 0)
        return out, total // 2
    return (n - k) // s + 1 if n >= k else 0, 0


def infer_geometry(spec: NetworkSpec) -> list[LayerGeometry]:
    dims = (spec.input.height, spec.input.width, spec.input.channels)
    geoms = []
    for idx, layer in enumerate(spec.layers):
        if layer.is_fc:
            g = LayerGeometry(dims, (1, 1, layer.out_channels), dims[0], dims[1], 1, 0, 0)
        else:
            k, s = layer.kernel, layer.stride
            rows, top = _out_extent(dims[0], k, s, layer.padding)
            cols, left = _out_extent(dims[1], k, s, layer.padding)
            if rows < 1 or cols < 1:
                raise GeometryError(
                    f"layer {idx} ({layer.notation()}): kernel {k} exceeds input {dims[0]}x{dims[1]}"
                )
            g = LayerGeometry(dims, (rows, cols, layer.out_channels), k, k, s, top, left)
        geoms.append(g)
        dims = g.out_dims
    return geoms


@dataclass(frozen=True)
class Diagnostic:
    layer: int | None
    message: str

    def __str__(self) -> str:
        where = "network" if self.layer is None else f"layer {self.layer}"
        return f"{where}: {self.message}"


def validate_network(spec: NetworkSpec | dict) -> list[Diagnostic]:
    """Collect every legality problem instead of stopping at the first one.

    Accepts an already-built NetworkSpec or a raw config dict, in which case
    notation strings that fail to parse are reported too.
    """
    if isinstance(spec, dict):
        diags: list[Diagnostic] = []
        layers = []
        for i, entry in enumerate(spec.get("layers") or []):
            text = entry["notation"] if isinstance(entry, dict) else entry
            try:
                layers.append(parse_layer_notation(text))
            except ValueError as exc:
                diags.append(Diagnostic(i, str(exc)))
        if diags:
            return diags
        spec = network_from_dict(spec, validate=False)

    diags = []
    if not spec.layers:
        return [Diagnostic(None, "empty network")]
    if spec.input.bit_depth != 8:
        diags.append(Diagnostic(None, f"input bit depth must be 8, got {spec.input.bit_depth}"))
    for i, layer in enumerate(spec.layers):
        for p in layer.problems():
            diags.append(Diagnostic(i, p))
        if i == 0 and layer.kind != TRANSDUCTION:
            diags.append(Diagnostic(i, "first layer must be the transduction layer"))
        if i > 0 and layer.kind == TRANSDUCTION:
            diags.append(Diagnostic(i, "only the first layer may be a transduction layer"))
        # pooling is replaced by a 2x2 stride-2 valid conv; nothing else uses kernel 2
        if layer.kernel == 2 and (layer.stride != 2 or layer.padding != VALID):
            diags.append(Diagnostic(i, "2x2 layers must be stride-2 valid (pooling convention)"))
    if not spec.layers[-1].is_fc:
        diags.append(Diagnostic(len(spec.layers) - 1, "last layer must be fully-connected"))
    for i, w in spec.omega.items():
        if not 0 <= i < len(spec.layers):
            diags.append(Diagnostic(None, f"omega override for missing layer {i}"))
            continue
        from .mapper import is_valid_omega

        if not is_valid_omega(w):
            diags.append(Diagnostic(i, f"omega override {w} is not a legal weight-unit count"))
        elif spec.layers[i].out_channels % w:
            diags.append(Diagnostic(i, f"out_channels {spec.layers[i].out_channels} not divisible by omega {w}"))
    if any(d.message.startswith("illegal") for d in diags):
        return diags
    try:
        infer_geometry(spec)
    except GeometryError as exc:
        diags.append(Diagnostic(None, str(exc)))
    return diags


def network_from_dict(cfg: dict, validate: bool = True) -> NetworkSpec:
    inp = cfg["input"]
    layers = []
    omega = {}
    for i, entry in enumerate(cfg["layers"]):
        if isinstance(entry, str):
            entry = {"notation": entry}
        layer = parse_layer_notation(entry["notation"])
        if i == 0 and layer.kind == CONV:
            layer = replace(layer, kind=TRANSDUCTION)
        layers.append(layer)
        if entry.get("omega") is not None:
            omega[i] = int(entry["omega"])
    spec = NetworkSpec(
        name=cfg.get("name", "network"),
        input=InputShape(int(inp["height"]), int(inp["width"]), int(inp["channels"]), int(inp.get("bit_depth", 8))),
        clock_mhz=float(cfg.get("clock_mhz", 100.0)),
        layers=tuple(layers),
        omega=omega,
        device=cfg.get("device"),
    )
    if validate:
        diags = validate_network(spec)
        if diags:
            raise ValidationError("; ".join(str(d) for d in diags))
    return spec


def network_to_dict(spec: NetworkSpec) -> dict:
    layers = []
    for i, layer in enumerate(spec.layers):
        entry: dict[str, Any] = {"notation": layer.notation()}
        if i in spec.omega:
            entry["omega"] = spec.omega[i]
        layers.append(entry)
    out = {
        "name": spec.name,
        "input": {"height": spec.input.height, "width": spec.input.width, "channels": spec.input.channels},
        "clock_mhz": spec.clock_mhz,
        "layers": layers,
    }
    if spec.device is not None:
        out["device"] = spec.device
    return out


def load_network(path: str | Path, validate: bool = True) -> NetworkSpec:
    with open(path) as f:
        return network_from_dict(json.load(f), validate=validate)


CONFIG_DIR = Path(__file__).parent / "configs"
SHIPPED = ("mnist", "cifar10", "cifar100", "tinyimagenet", "imagenet")


def shipped_config(name: str) -> NetworkSpec:
    return load_network(CONFIG_DIR / f"{name}.json")


def iter_shipped() -> Iterable[tuple[str, NetworkSpec]]:
    for name in SHIPPED:
        yield name, shipped_config(name)
