import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from netgen import random_network
from snnmap.mapper import (
    VU9P_3SLR,
    DeviceExhausted,
    DeviceProfile,
    MappingPlan,
    UnmappableLayer,
    assign_slrs,
    balance_report,
    block_capacity,
    build_plan,
    dsp_estimate,
    dump_plan,
    is_valid_omega,
    layerwise_only_plan,
    load_profile,
    memory_blocks_for_layer,
    neuron_footprint,
    service_cycles,
    valid_omega_set,
)
from snnmap.netspec import BRAM, CONV, TRANSDUCTION, URAM, LayerGeometry, infer_geometry, shipped_config

FANIN_2x2x64 = LayerGeometry((2, 2, 64), (1, 1, 1), 2, 2, 1, 0, 0)


def test_valid_omega_set_branches():
    assert valid_omega_set(4) == [1, 2, 4]
    assert valid_omega_set(24)[5] == 24
    assert valid_omega_set(20) == [1, 2, 4, 8, 16]


@given(st.integers(1, 5000))
def test_valid_omega_set_matches_predicate(limit):
    values = valid_omega_set(limit)
    assert values == sorted(values)
    assert values == [w for w in range(1, limit + 1) if is_valid_omega(w)]


def test_utilization_112_neurons():
    blocks, cascade, util = memory_blocks_for_layer(FANIN_2x2x64, 112, 8, BRAM)
    assert neuron_footprint(FANIN_2x2x64) == 260
    assert (blocks, cascade) == (8, 1)
    assert util == pytest.approx(3640 / 4096)


def test_utilization_128_neurons():
    blocks, cascade, util = memory_blocks_for_layer(FANIN_2x2x64, 128, 16, BRAM)
    assert (blocks, cascade) == (16, 1)
    assert util == pytest.approx(2080 / 4096)


def test_utilization_smallest_case():
    g = LayerGeometry((1, 1, 1), (1, 1, 1), 1, 1, 1, 0, 0)
    assert memory_blocks_for_layer(g, 1, 1, BRAM) == (1, 1, 12 / 4096)


def test_uram_is_eight_brams():
    assert block_capacity(URAM) == 8 * block_capacity(BRAM)


def test_cascade_beyond_device_is_unmappable():
    with pytest.raises(UnmappableLayer, match="unmappable"):
        memory_blocks_for_layer(FANIN_2x2x64, 4096, 1, BRAM, max_cascade=16)


@given(
    rows=st.integers(1, 8), chans=st.integers(1, 600), k=st.sampled_from([1, 2, 3]),
    out=st.integers(1, 2048), mem=st.sampled_from([BRAM, URAM]),
)
def test_memory_conservation_and_monotonic_cascade(rows, chans, k, out, mem):
    g = LayerGeometry((rows, rows, chans), (rows, rows, out), k, k, 1, 0, 0)
    prev_cascade, prev_service = None, None
    for w in valid_omega_set(out):
        if out % w:
            continue
        blocks, cascade, util = memory_blocks_for_layer(g, out, w, mem)
        assert round(blocks * block_capacity(mem) * util) == out * neuron_footprint(g)
        assert 0 < util <= 1
        service = service_cycles(g, w, out)
        if prev_cascade is not None:
            assert cascade <= prev_cascade and service <= prev_service
        prev_cascade, prev_service = cascade, service


def test_dsp_formula():
    g = LayerGeometry((3, 3, 8), (3, 3, 8), 3, 3, 1, 1, 1)
    dual = DeviceProfile("d", 1, 100, 100, 100, 100, dsp_per_core=2)
    assert dsp_estimate(g, 2, CONV, dual) == 12
    unit = LayerGeometry((1, 1, 8), (1, 1, 8), 1, 1, 1, 0, 0)
    assert dsp_estimate(unit, 1, CONV, dual) == 2
    first = LayerGeometry((28, 28, 1), (28, 28, 16), 3, 3, 1, 1, 1)
    assert dsp_estimate(first, 1, TRANSDUCTION) == 224


def test_device_profile_invariants():
    with pytest.raises(ValueError):
        DeviceProfile("x", 5, 1, 1, 1, 1)
    with pytest.raises(ValueError):
        DeviceProfile("x", 2, 0, 1, 1, 1)


def test_profile_lookup(tmp_path, monkeypatch):
    assert load_profile("vu9p-3slr") == VU9P_3SLR
    custom = {"name": "tiny", "slr_count": 2, "bram_blocks": 10, "uram_blocks": 2, "dsp_slices": 50, "luts": 1000}
    (tmp_path / "tiny.json").write_text(json.dumps(custom))
    monkeypatch.setenv("DF2_PROFILE_DIR", str(tmp_path))
    assert load_profile("tiny").bram_blocks == 10
    with pytest.raises(FileNotFoundError):
        load_profile("no-such-device")


@pytest.mark.parametrize("name,slrs", [("mnist", 1), ("cifar10", 1), ("cifar100", 2), ("tinyimagenet", 2),
                                       ("imagenet", 3)])
def test_shipped_slr_counts(name, slrs):
    plan = assign_slrs(shipped_config(name))
    assert len(plan.slrs_used) == slrs


def test_fc1200_is_split():
    plan = assign_slrs(shipped_config("tinyimagenet"))
    fc = next(m for m in plan.layers if m.notation == "Fc-1200/u4")
    assert fc.is_split


def test_plan_invariants_for_shipped():
    for name in ("mnist", "cifar10", "cifar100", "tinyimagenet", "imagenet"):
        spec = shipped_config(name)
        plan = assign_slrs(spec)
        for layer, m in zip(spec.layers, plan.layers):
            assert is_valid_omega(m.omega) and layer.out_channels % m.omega == 0
            assert sum(s for _, s in m.splits) == m.omega and all(s > 0 for _, s in m.splits)
            assert m.primary_slr in [slr for slr, _ in m.splits]
        for usage in plan.slr_usage:
            for r in ("bram", "uram", "dsp", "lut"):
                assert usage[r] <= plan.device.budget(r)


def test_split_beats_layerwise_on_cifar100():
    spec = shipped_config("cifar100")
    split = balance_report(assign_slrs(spec))["imbalance"]
    layerwise = layerwise_only_plan(spec)
    assert layerwise is not None and split < layerwise[0]


def test_single_slr_plan_has_no_imbalance():
    assert balance_report(assign_slrs(shipped_config("cifar10")))["imbalance"] == 0


def test_all_on_first_of_two_slrs():
    spec = shipped_config("mnist")
    plan = build_plan(spec, [1] * len(spec.layers), slr_span=2)
    report = balance_report(plan)
    first = report["slrs"][0]
    assert report["imbalance"] == pytest.approx(max(first[r] for r in ("bram", "uram", "dsp")), abs=1e-3)


def test_split_memory_sums_to_whole():
    spec = shipped_config("cifar100")
    omegas = [m.omega for m in assign_slrs(spec).layers]
    whole = build_plan(spec, omegas, slr_span=2)
    splits = [((0, w),) for w in omegas]
    splits[10] = ((0, omegas[10] * 2 // 3), (1, omegas[10] - omegas[10] * 2 // 3))
    split = build_plan(spec, omegas, splits, slr_span=2)
    for r in ("bram", "uram", "dsp"):
        assert sum(u[r] for u in split.slr_usage) == sum(u[r] for u in whole.slr_usage)
    assert split.layers[10].primary_slr == 0


def test_device_exhausted_reports_shortfall():
    small = DeviceProfile("small", 1, bram_blocks=10, uram_blocks=2, dsp_slices=100, luts=10_000)
    with pytest.raises(DeviceExhausted) as info:
        assign_slrs(shipped_config("cifar10"), device=small)
    assert "bram" in info.value.shortfall and info.value.shortfall["bram"] > 0


def test_omega_override_is_respected():
    spec = shipped_config("cifar10").with_omega({8: 1})
    assert assign_slrs(spec).layers[8].omega == 1


def test_plan_json_round_trip():
    plan = assign_slrs(shipped_config("imagenet"))
    again = MappingPlan.from_dict(json.loads(dump_plan(plan)))
    assert again == plan


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_networks_map_within_budget(seed):
    spec = random_network(np.random.default_rng(seed), max_ch=256)
    plan = assign_slrs(spec)
    for m, layer in zip(plan.layers, spec.layers):
        assert is_valid_omega(m.omega) and layer.out_channels % m.omega == 0
    for usage in plan.slr_usage:
        assert all(usage[r] <= plan.device.budget(r) for r in ("bram", "uram", "dsp"))


def test_mapping_is_deterministic():
    spec = shipped_config("tinyimagenet")
    assert dump_plan(assign_slrs(spec)) == dump_plan(assign_slrs(spec))


def test_geometry_inputs_are_optional():
    spec = shipped_config("mnist")
    assert assign_slrs(spec, infer_geometry(spec)) == assign_slrs(spec)
