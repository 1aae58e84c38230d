import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netgen import random_image, random_network, random_plan, random_qmodel
from snnmap import pipesim
from snnmap.mapper import assign_slrs, build_plan, column_cycles
from snnmap.netspec import (
    BRAM, CONV, FC, SAME, TRANSDUCTION, VALID, InputShape, LayerSpec, NetworkSpec, infer_geometry, shipped_config,
)
from snnmap.oracle import reference_inference
from snnmap.pipesim import (
    ConfigurationError,
    NeuronCoreState,
    SimOptions,
    SimulationDeadlock,
    SpikeTensor,
    classify,
    core_beat,
    fire,
    merge_round_robin,
    run_functional,
    simulate,
    simulate_timing,
    transduce,
)
from snnmap.quantizer import QuantizedLayer


def test_core_beat_examples():
    w = [3, -2, 5, 7, -1, 4, 0, 6]
    assert core_beat(0x00, w, 7) == 7
    assert core_beat(0xFF, [1] * 8, 0) == 8
    assert core_beat(0b10100001, w, 0) == 3 + 4 + 6


def test_fire_is_strict():
    assert fire(5, 4) == 1
    assert fire(4, 4) == 0
    assert fire(-3, -4) == 1


def test_core_state_holds_when_disabled():
    core = NeuronCoreState(threshold=2)
    core.beat(0b11, [1, 1, 0, 0, 0, 0, 0, 0])
    core.pipe_en = False
    core.beat(0b11, [5, 5, 0, 0, 0, 0, 0, 0])
    assert core.acc == 2 and core.output() == 0


def test_transduce_single_pixel():
    spec = NetworkSpec("t", InputShape(1, 1, 1), 100.0, (LayerSpec(FC, 1, BRAM, 1),))
    g = infer_geometry(spec)[0]
    w = np.zeros((1, 1, 8), np.int8)
    w[0, 0, 0] = 3
    layer = QuantizedLayer(1.0, w, np.array([29], np.int32))
    assert transduce(np.array([[[10]]], np.uint8), g, layer).to_bits().tolist() == [[[1]]]
    layer = QuantizedLayer(1.0, w, np.array([30], np.int32))
    assert transduce(np.array([[[10]]], np.uint8), g, layer).to_bits().tolist() == [[[0]]]


def test_classify_ties_go_low():
    assert classify([3, 9, 1]) == 1
    assert classify([5, 5]) == 0


def test_spike_tensor_packing():
    bits = np.zeros((2, 3, 10), np.uint8)
    bits[1, 2, 9] = 1
    bits[0, 0, 0] = 1
    t = SpikeTensor.from_bits(bits)
    assert t.payload.shape == (2, 3, 2)
    assert t.payload[0, 0, 0] == 1 and t.payload[1, 2, 1] == 0b10
    assert not t.lanes()[..., 10:].any()
    assert np.array_equal(t.to_bits(), bits) and t.count() == 2


def test_merge_two_contiguous_streams():
    a = (np.arange(32), np.arange(32)[None, :] * np.ones((4, 1), int))
    b = (np.arange(32, 64), np.arange(32, 64)[None, :] * np.ones((4, 1), int))
    merged = merge_round_robin([b, a])
    assert merged.ids.tolist() == list(range(64))
    assert np.array_equal(merged.values[0], np.arange(64))
    assert merged.schedule == [1, 0] * 4


def test_merge_single_stream_is_passthrough():
    values = np.arange(12).reshape(3, 4)
    merged = merge_round_robin([(np.arange(4), values)])
    assert merged.values is values and merged.schedule == [0, 0, 0]


def test_merge_three_sources_schedule():
    streams = [(np.arange(k * 4, k * 4 + 4), np.zeros((8, 4))) for k in range(3)]
    assert merge_round_robin(streams).schedule == [0, 1, 2] * 8


def test_merge_rejects_overlap():
    with pytest.raises(ConfigurationError):
        merge_round_robin([(np.arange(4), np.zeros(4)), (np.arange(3, 7), np.zeros(4))])


def test_bridge_latency_cap():
    with pytest.raises(ConfigurationError):
        SimOptions(bridge_latency=11)
    SimOptions(bridge_latency=10)


def _toy(omega0=1, omega1=1, out1=16):
    spec = NetworkSpec("toy", InputShape(8, 8, 1), 200.0, (
        LayerSpec(TRANSDUCTION, 16, BRAM, 1, 3, 1, SAME),
        LayerSpec(CONV, out1, BRAM, 1, 3, 1, SAME),
        LayerSpec(FC, 4, BRAM, 1),
    ))
    return spec, build_plan(spec, [omega0, omega1, 1])


def _services(spec, plan):
    geoms = infer_geometry(spec)
    return [g.out_cols * column_cycles(g, m.omega, layer.out_channels)
            for layer, g, m in zip(spec.layers, geoms, plan.layers)]


def test_steady_state_matches_bottleneck_service():
    spec, plan = _toy()
    rng = np.random.default_rng(0)
    report = simulate(spec, plan, random_qmodel(spec, rng))
    bound = max(_services(spec, plan))
    assert report.steady_state_cycles_per_image >= bound
    assert report.steady_state_cycles_per_image <= 1.05 * bound
    assert report.fps_at_clock == pytest.approx(200e6 / report.steady_state_cycles_per_image)


def test_doubling_bottleneck_omega_raises_fps():
    spec, slow = _toy(omega0=4, omega1=1)
    _, fast = _toy(omega0=4, omega1=2)
    model = random_qmodel(spec, np.random.default_rng(1))
    a = simulate(spec, slow, model)
    b = simulate(spec, fast, model)
    assert a.bottleneck_layer == 1
    assert b.fps_at_clock > a.fps_at_clock


def test_no_stalls_behind_faster_layers():
    # the first layer is slowest, everything downstream keeps up
    spec, plan = _toy(omega0=1, omega1=16)
    report = simulate(spec, plan, random_qmodel(spec, np.random.default_rng(2)))
    assert report.bottleneck_layer == 0
    assert all(s.stalled == 0 for s in report.layers)


def test_busy_is_ops_times_duration():
    spec, plan = _toy(omega0=2, omega1=1)
    report = simulate(spec, plan, random_qmodel(spec, np.random.default_rng(3)))
    geoms = infer_geometry(spec)
    for s, g, m, layer in zip(report.layers, geoms, plan.layers, spec.layers):
        assert s.busy == s.ops * column_cycles(g, m.omega, layer.out_channels)
        assert s.ops == SimOptions().timing_images * g.out_cols


def test_simulation_is_deterministic():
    spec = shipped_config("mnist")
    plan = assign_slrs(spec)
    rng = np.random.default_rng(4)
    model = random_qmodel(spec, rng)
    images = [random_image(spec, rng) for _ in range(2)]
    assert simulate(spec, plan, model, images).to_dict() == simulate(spec, plan, model, images).to_dict()


def test_trace_records_state_changes():
    spec, plan = _toy()
    report = simulate(spec, plan, random_qmodel(spec, np.random.default_rng(5)), options=SimOptions(trace=True))
    lines = report.trace_csv().splitlines()
    assert lines[0] == "cycle,layer,state"
    cycles = [int(line.split(",")[0]) for line in lines[1:]]
    assert cycles == sorted(cycles)
    assert {line.split(",")[2] for line in lines[1:]} <= {"busy", "stalled", "idle"}


def test_deadlock_names_every_layer(monkeypatch):
    spec, _ = _toy()
    geoms = infer_geometry(spec)
    monkeypatch.setattr(pipesim, "window_capacity", lambda g: 1)
    with pytest.raises(SimulationDeadlock) as info:
        simulate_timing([10, 10, 10], geoms, 8)
    assert all(f"layer {i}" in str(info.value) for i in range(3))


def test_split_latency_includes_bridge():
    spec, _ = _toy()
    whole = build_plan(spec, [4, 1, 1])
    split = build_plan(spec, [4, 1, 1], [((0, 2), (1, 2)), ((0, 1),), ((0, 1),)], slr_span=2)
    model = random_qmodel(spec, np.random.default_rng(6))
    a = simulate(spec, whole, model).fill_latency_cycles
    b = simulate(spec, split, model, options=SimOptions(bridge_latency=7)).fill_latency_cycles
    assert b - a == 7 + 2


def test_mismatched_plan_is_rejected():
    spec, plan = _toy()
    other, _ = _toy(out1=8)
    with pytest.raises(ConfigurationError):
        simulate(other, build_plan(spec, [1, 16, 1]), random_qmodel(other, np.random.default_rng(0)))


def test_wrong_image_shape():
    spec, plan = _toy()
    with pytest.raises(ValueError):
        run_functional(spec, plan, random_qmodel(spec, np.random.default_rng(0)), np.zeros((4, 4, 1), np.uint8))


def _assert_matches_oracle(spec, plan, model, image):
    spikes, pots = run_functional(spec, plan, model, image)
    ref = reference_inference(spec, model, image)
    for got, want in zip(spikes, ref.spikes):
        assert np.array_equal(got.to_bits(), want)
    for got, want in zip(pots, ref.potentials):
        assert np.array_equal(got, want)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_bit_exact_against_oracle(seed, split):
    rng = np.random.default_rng(seed)
    spec = random_network(rng, max_ch=40)
    _assert_matches_oracle(spec, random_plan(spec, rng, split), random_qmodel(spec, rng), random_image(spec, rng))


def test_valid_padding_and_pooling_bit_exact():
    spec = NetworkSpec("t", InputShape(11, 9, 3), 100.0, (
        LayerSpec(TRANSDUCTION, 12, BRAM, 1, 3, 2, VALID),
        LayerSpec(CONV, 9, BRAM, 1, 2, 2, VALID),
        LayerSpec(FC, 5, BRAM, 1),
    ))
    rng = np.random.default_rng(7)
    _assert_matches_oracle(spec, random_plan(spec, rng), random_qmodel(spec, rng), random_image(spec, rng))


def test_predictions_come_from_final_potentials():
    spec = shipped_config("mnist")
    rng = np.random.default_rng(8)
    model = random_qmodel(spec, rng)
    image = random_image(spec, rng)
    report = simulate(spec, assign_slrs(spec), model, [image])
    ref = reference_inference(spec, model, image)
    assert report.predictions == [ref.predicted_class()]
