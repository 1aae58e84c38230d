"""Command-line driver: check, map, quantize, sim and report."""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .mapper import MappingError, MappingPlan, assign_slrs, balance_report, format_balance, load_plan, load_profile
from .netspec import CONFIG_DIR, NetworkSpec, network_from_dict, validate_network
from .oracle import count_macs, count_ops, reference_inference
from .pipesim import SimOptions, SimReport, SimulationError, simulate
from .quantizer import (
    ParamFormatError,
    QuantizationError,
    deserialize_params,
    load_float_params,
    quantize_model,
    random_float_params,
    random_model,
    serialize_params,
)


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 2):
        super().__init__(message)
        self.kind = kind
        self.code = code


@dataclass
class AnalyticThroughput:
    service_cycles: list[int]
    bottleneck_layer: int
    cycles_per_image: int
    fps: float
    backpressure_risk: list[int]

    def to_dict(self) -> dict:
        return asdict(self)


def throughput_analytic(spec: NetworkSpec, plan: MappingPlan, clock_mhz: float | None = None) -> AnalyticThroughput:
    """Per-layer service time and the fps the slowest layer allows.

    A layer slower than the one feeding it is flagged: its upstream will have
    to stall.
    """
    services = [m.service_cycles for m in plan.layers]
    period = max(services)
    bottleneck = services.index(period)
    risk = [i for i in range(1, len(services)) if services[i] > services[i - 1]]
    clock = clock_mhz if clock_mhz is not None else spec.clock_mhz
    return AnalyticThroughput(services, bottleneck, period, clock * 1e6 / period, risk)


@dataclass
class RunManifest:
    command: str
    tool_version: str
    config: str
    device: str
    params: str | None = None
    plan: str | None = None
    images: str | None = None
    options: dict = field(default_factory=dict)
    hashes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_atomic(path: str | Path, data: str | bytes) -> None:
    """Write to a sibling temp file and rename, so readers never see partial output."""
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _emit(args, text: str | bytes) -> None:
    if getattr(args, "output", None):
        write_atomic(args.output, text)
    elif isinstance(text, bytes):
        sys.stdout.buffer.write(text)
    else:
        sys.stdout.write(text)


# -- input resolution -----------------------------------------------------------------


def resolve_config(ref: str) -> Path:
    """A path, or the name of a shipped config ("mnist", "cifar10.json", ...)."""
    path = Path(ref)
    if path.is_file():
        return path
    shipped = CONFIG_DIR / (path.name if path.suffix == ".json" else f"{path.name}.json")
    if shipped.is_file():
        return shipped
    raise CliError("input", f"no such config: {ref}")


def _omega_overrides(items: list[str] | None) -> dict[int, int]:
    out = {}
    for item in items or []:
        try:
            layer, value = item.split("=")
            out[int(layer)] = int(value)
        except ValueError:
            raise CliError("usage", f"--omega expects LAYER=N, got {item!r}") from None
    return out


def load_spec(args, validate: bool = True) -> tuple[NetworkSpec, Path]:
    path = resolve_config(args.config)
    with open(path) as f:
        cfg = json.load(f)
    try:
        spec = network_from_dict(cfg, validate=False)
    except ValueError as exc:
        raise CliError("validation", str(exc)) from None
    overrides = _omega_overrides(getattr(args, "omega", None))
    if overrides:
        spec = spec.with_omega(overrides)
    if getattr(args, "clock_mhz", None):
        spec = replace(spec, clock_mhz=float(args.clock_mhz))
    if getattr(args, "device", None):
        spec = replace(spec, device=args.device)
    if validate:
        diags = validate_network(spec)
        if diags:
            raise CliError("validation", "; ".join(str(d) for d in diags))
    return spec, path


def _device_name(spec: NetworkSpec) -> str:
    return load_profile(spec.device).name


def make_plan(args, spec: NetworkSpec) -> MappingPlan:
    if getattr(args, "plan", None):
        plan = load_plan(args.plan)
        if len(plan.layers) != len(spec.layers):
            raise CliError("input", f"plan {args.plan} has {len(plan.layers)} layers, network has {len(spec.layers)}")
        return plan
    try:
        return assign_slrs(spec, throughput_hint=getattr(args, "throughput_hint", None))
    except (MappingError, FileNotFoundError) as exc:
        raise CliError("mapping", str(exc)) from None


def make_model(args, spec: NetworkSpec):
    if getattr(args, "params", None):
        try:
            model = deserialize_params(Path(args.params).read_bytes())
            model.check_against(spec)
        except (OSError, ParamFormatError, QuantizationError) as exc:
            raise CliError("params", str(exc)) from None
        return model
    return random_model(spec, np.random.default_rng(args.seed))


def load_images(path: str | None, spec: NetworkSpec, limit: int | None) -> np.ndarray:
    """Raw unsigned bytes (N*H*W*C) or an .npy array of uint8 images."""
    shape = (spec.input.height, spec.input.width, spec.input.channels)
    if path is None:
        return np.zeros((0, *shape), dtype=np.uint8)
    try:
        if path.endswith(".npy"):
            arr = np.load(path, allow_pickle=False)
            if arr.dtype != np.uint8:
                raise CliError("input", f"{path}: expected uint8 images, got {arr.dtype}")
            if arr.shape == shape:
                arr = arr[None]
            elif arr.ndim == 3 and shape[2] == 1 and arr.shape[1:] == shape[:2]:
                arr = arr[..., None]
        else:
            raw = np.fromfile(path, dtype=np.uint8)
            per = int(np.prod(shape))
            if raw.size % per:
                raise CliError("input", f"{path}: {raw.size} bytes is not a whole number of {shape} images")
            arr = raw.reshape(-1, *shape)
    except OSError as exc:
        raise CliError("input", str(exc)) from None
    if arr.shape[1:] != shape:
        raise CliError("input", f"{path}: images shaped {arr.shape[1:]}, network expects {shape}")
    return arr[:limit] if limit is not None else arr


def manifest_for(args, spec: NetworkSpec, config_path: Path) -> RunManifest:
    hashes = {"config": _sha256(config_path)}
    for key in ("params", "plan", "images", "float_params"):
        value = getattr(args, key, None)
        if value:
            hashes[key] = _sha256(value)
    options = {
        "clock_mhz": spec.clock_mhz,
        "omega": {str(k): v for k, v in sorted(spec.omega.items())},
    }
    for key in ("seed", "limit", "throughput_hint"):
        if getattr(args, key, None) is not None:
            options[key] = getattr(args, key)
    params = getattr(args, "params", None) or getattr(args, "float_params", None)
    if params is None and getattr(args, "seed", None) is not None:
        params = f"random(seed={args.seed})"
    return RunManifest(
        command=args.command,
        tool_version=__version__,
        config=config_path.name,
        device=_device_name(spec),
        params=params,
        plan=getattr(args, "plan", None),
        images=getattr(args, "images", None),
        options=options,
        hashes=hashes,
    )


# -- subcommands ------------------------------------------------------------------------


def cmd_check(args) -> int:
    path = resolve_config(args.config)
    with open(path) as f:
        cfg = json.load(f)
    overrides = _omega_overrides(args.omega)
    if overrides:
        layers = list(cfg.get("layers", []))
        for i, w in overrides.items():
            if 0 <= i < len(layers):
                entry = layers[i] if isinstance(layers[i], dict) else {"notation": layers[i]}
                layers[i] = {**entry, "omega": w}
        cfg = {**cfg, "layers": layers}
    diags = validate_network(cfg)
    if args.format == "json":
        _emit(args, _dumps({"config": path.name, "diagnostics": [str(d) for d in diags]}))
    else:
        _emit(args, "".join(f"{d}\n" for d in diags) or "ok\n")
    return 1 if diags else 0


def _plan_csv(plan: MappingPlan) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "notation", "kappa", "omega", "neurons_per_unit", "mem_kind", "mem_blocks",
                "cascade", "utilization", "dsp", "lut", "service_cycles", "splits", "primary_slr"])
    for m in plan.layers:
        w.writerow([m.index, m.notation, m.kappa, m.omega, m.neurons_per_unit, m.mem_kind, m.mem_blocks,
                    m.cascade_used, f"{m.utilization_per_block:.4f}", m.dsp_est, m.lut_est, m.service_cycles,
                    " ".join(f"{s}:{n}" for s, n in m.splits), m.primary_slr])
    return buf.getvalue()


def cmd_map(args) -> int:
    spec, path = load_spec(args)
    plan = make_plan(args, spec)
    balance = balance_report(plan)
    if args.format == "json":
        doc = plan.to_dict()
        doc["balance"] = balance
        doc["manifest"] = manifest_for(args, spec, path).to_dict()
        _emit(args, _dumps(doc))
    elif args.format == "csv":
        _emit(args, _plan_csv(plan))
    else:
        lines = [f"{m.index:>3} {m.notation:<20} omega={m.omega:<4} {m.mem_blocks:>4} {m.mem_kind} "
                 f"dsp={m.dsp_est:<5} splits={list(m.splits)}" for m in plan.layers]
        _emit(args, "\n".join(lines) + "\n" + format_balance(balance) + "\n")
    return 0


def cmd_quantize(args) -> int:
    spec, path = load_spec(args)
    plan = make_plan(args, spec)
    try:
        if args.float_params:
            params = load_float_params(args.float_params, spec)
        else:
            params = random_float_params(spec, np.random.default_rng(args.seed))
        model = quantize_model(params)
        model.check_against(spec)
    except (OSError, QuantizationError, KeyError) as exc:
        raise CliError("quantize", str(exc)) from None
    if not args.output:
        raise CliError("usage", "quantize needs -o/--output for the parameter file")
    write_atomic(args.output, serialize_params(model, plan))
    return 0


def run_sim(args) -> tuple[NetworkSpec, Path, MappingPlan, SimReport]:
    spec, path = load_spec(args)
    plan = make_plan(args, spec)
    model = make_model(args, spec)
    images = load_images(args.images, spec, args.limit)
    options = SimOptions(trace=bool(args.trace), record_activations=False)
    try:
        report = simulate(spec, plan, model, images, options)
    except (SimulationError, ValueError) as exc:
        raise CliError("simulation", str(exc)) from None
    if args.trace:
        write_atomic(args.trace, report.trace_csv())
    return spec, path, plan, report


def cmd_sim(args) -> int:
    spec, path, plan, report = run_sim(args)
    doc = report.to_dict()
    doc["manifest"] = manifest_for(args, spec, path).to_dict()
    if args.format == "json":
        _emit(args, _dumps(doc))
    elif args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "busy", "stalled", "idle", "service_cycles"])
        for row in doc["layers"]:
            w.writerow([row["index"], row["busy"], row["stalled"], row["idle"], row["service_cycles"]])
        _emit(args, buf.getvalue())
    else:
        _emit(args, f"steady state {report.steady_state_cycles_per_image} cycles/image, "
                    f"{report.fps_at_clock:.1f} fps at {report.clock_mhz:g} MHz, "
                    f"bottleneck layer {report.bottleneck_layer}, predictions {report.predictions}\n")
    return 0


def build_report(spec: NetworkSpec, plan: MappingPlan, sim: SimReport) -> dict:
    analytic = throughput_analytic(spec, plan)
    return {
        "network": spec.name,
        "clock_mhz": spec.clock_mhz,
        "kfps": sim.fps_at_clock / 1e3,
        "fps": sim.fps_at_clock,
        "analytic_fps": analytic.fps,
        "analytic_vs_sim": analytic.fps / sim.fps_at_clock - 1.0,
        "macs_per_image": count_macs(spec),
        "ops_per_image": count_ops(spec),
        "gops": sim.gops,
        "steady_state_cycles_per_image": sim.steady_state_cycles_per_image,
        "fill_latency_cycles": sim.fill_latency_cycles,
        "bottleneck_layer": sim.bottleneck_layer,
        "analytic_bottleneck_layer": analytic.bottleneck_layer,
        "backpressure_risk": analytic.backpressure_risk,
        "slrs_used": len(plan.slrs_used),
        "balance": balance_report(plan),
        "layers": [
            {"index": m.index, "notation": m.notation, "omega": m.omega, "service_cycles": m.service_cycles,
             "busy": s.busy, "stalled": s.stalled, "idle": s.idle}
            for m, s in zip(plan.layers, sim.layers)
        ],
        "predictions": sim.predictions,
    }


def cmd_report(args) -> int:
    spec, path, plan, sim = run_sim(args)
    doc = build_report(spec, plan, sim)
    doc["manifest"] = manifest_for(args, spec, path).to_dict()
    if args.format == "json":
        _emit(args, _dumps(doc))
    elif args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "notation", "omega", "service_cycles", "busy", "stalled", "idle"])
        for row in doc["layers"]:
            w.writerow([row[k] for k in ("index", "notation", "omega", "service_cycles", "busy", "stalled", "idle")])
        _emit(args, buf.getvalue())
    else:
        lines = [
            f"{doc['network']} @ {doc['clock_mhz']:g} MHz",
            f"  throughput  {doc['kfps']:.2f} kFPS simulated, {doc['analytic_fps'] / 1e3:.2f} kFPS analytic",
            f"  GOPS        {doc['gops']:.1f} ({doc['ops_per_image']} ops/image)",
            f"  cycles      {doc['steady_state_cycles_per_image']} per image, fill latency {doc['fill_latency_cycles']}",
            f"  bottleneck  layer {doc['bottleneck_layer']}, backpressure risk at {doc['backpressure_risk']}",
            f"  SLRs        {doc['slrs_used']}",
            format_balance(doc["balance"]),
        ]
        _emit(args, "\n".join(lines) + "\n")
    return 0


def cmd_oracle(args) -> int:
    spec, _ = load_spec(args)
    model = make_model(args, spec)
    images = load_images(args.images, spec, args.limit)
    out = []
    for image in images:
        ref = reference_inference(spec, model, image)
        out.append({
            "prediction": ref.predicted_class(),
            "final_potentials": ref.final_potentials.astype(int).tolist(),
            "spike_counts": [int(s.sum()) for s in ref.spikes],
        })
    _emit(args, _dumps({"images": out}))
    return 0


# -- parser ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snnmap", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="{check,map,quantize,sim,report}")

    def common(p, fmt=True):
        p.add_argument("config", help="network config path or shipped name")
        p.add_argument("--omega", action="append", metavar="LAYER=N", help="force a layer's weight-unit count")
        if fmt:
            p.add_argument("--format", choices=("json", "csv", "text"), default="json")
        p.add_argument("-o", "--output", help="write here instead of stdout")

    def mapping(p):
        p.add_argument("--device", help="device profile name or JSON path")
        p.add_argument("--clock-mhz", type=float)
        p.add_argument("--plan", help="use this plan instead of mapping")
        p.add_argument("--throughput-hint", type=int, metavar="CYCLES", help="target cycles per image")

    def running(p):
        p.add_argument("--params", help="DF2P parameter file")
        p.add_argument("--seed", type=int, default=0, help="seed for random parameters when --params is absent")
        p.add_argument("--images", help="raw u8 or .npy image file")
        p.add_argument("--limit", type=int, help="simulate at most N images")
        p.add_argument("--trace", metavar="CSV", help="write layer state changes here")

    p = sub.add_parser("check", help="parse and validate a config")
    common(p)
    p.set_defaults(func=cmd_check, format="text")

    p = sub.add_parser("map", help="emit a mapping plan and balance table")
    common(p)
    mapping(p)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("quantize", help="quantize float parameters into a DF2P file")
    common(p, fmt=False)
    mapping(p)
    p.add_argument("--float-params", help="JSON float weights and batch-norm parameters")
    p.add_argument("--seed", type=int, default=0, help="seed for random float parameters")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("sim", help="simulate the pipeline over an image set")
    common(p)
    mapping(p)
    running(p)
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("report", help="throughput, GOPS, utilization and bottleneck summary")
    common(p)
    mapping(p)
    running(p)
    p.set_defaults(func=cmd_report, format="text")

    p = sub.add_parser("oracle")
    common(p, fmt=False)
    p.add_argument("--device")
    p.add_argument("--clock-mhz", type=float)
    p.add_argument("--params")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--images")
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_oracle)
    # keep the debugging command out of the help listing
    sub._choices_actions = [a for a in sub._choices_actions if a.dest != "oracle"]
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        err = {"error": {"type": exc.kind, "message": str(exc)}}
        sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
        return exc.code
    except (ValueError, MappingError, SimulationError, OSError) as exc:
        err = {"error": {"type": type(exc).__name__, "message": str(exc)}}
        sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
        return 1
