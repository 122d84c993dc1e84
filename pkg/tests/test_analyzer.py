import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fprog.analyzer import (
    TABLE_COLUMNS,
    AllocationError,
    LayerStats,
    allocate_workers,
    delay_proxy,
    footnotes,
    layer_stats,
    one_to_one_plan,
    round_half_away,
    simulation_plan,
    table_rows,
)
from fprog.cli import data_path
from fprog.model import load_model

from golden import CONV13_PARAMS, TOTAL_ACTIVATIONS, TOTAL_LOAD, VGG16_ROWS


@pytest.fixture(scope="module")
def vgg():
    stats = layer_stats(load_model(data_path("vgg16.json")))
    return stats, allocate_workers(stats, 100_000)


def fake_stats(loads, counts=None):
    counts = counts or [100] * len(loads)
    return [
        LayerStats(f"L{i}", "Conv", "ReLU", (10, 10, 1), (10, 10, 1), n, 0, load, 100)
        for i, (load, n) in enumerate(zip(loads, counts))
    ]


def test_vgg16_golden_rows(vgg):
    stats, plan = vgg
    assert len(stats) == len(VGG16_ROWS)
    for s, a, row in zip(stats, plan.layers, VGG16_ROWS):
        label, count, params, load, workers, area, npw, ppw = row
        assert s.label == label
        assert s.activation_count == count
        if label == "Conv13":
            assert s.parameter_count in CONV13_PARAMS
        else:
            assert s.parameter_count == params
        assert s.computational_load == load
        if workers is None:
            assert a.workers == 0
            continue
        assert a.workers == workers
        assert f"{a.area_percent:.2f}" == area
        assert a.nodes_per_worker == npw
        assert f"{a.pixels_per_worker:.2f}" == ppw


def test_vgg16_totals(vgg):
    stats, plan = vgg
    assert sum(s.activation_count for s in stats) == TOTAL_ACTIVATIONS
    assert plan.total_load == TOTAL_LOAD
    assert abs(sum(a.area_percent for a in plan.layers) - 100.0) <= 0.05
    # rounding leaves a handful of workers idle rather than forcing the sum
    assert plan.total_workers == 100_000
    assert plan.assigned_workers + plan.idle_workers == 100_000
    assert 0 <= plan.idle_workers <= 10


def test_conv13_footnote(vgg):
    _, plan = vgg
    notes = footnotes(plan)
    assert any("Conv13" in n and "2,359,296" in n for n in notes)
    labels = [r[0] for r in table_rows(plan)]
    assert "17 Conv13 *" in labels


def test_layer_examples(vgg):
    stats, _ = vgg
    by = {s.label: s for s in stats}
    assert (by["Conv1"].computational_load, by["Conv1"].parameter_count) == (86_704_128, 1_792)
    assert by["Conv5"].computational_load == 924_844_032
    assert (by["FC14"].computational_load, by["FC14"].parameter_count) == (102_760_448, 102_760_449)


def test_standard_params():
    stats = layer_stats(load_model(data_path("vgg16.json")), standard_params=True)
    by = {s.label: s for s in stats}
    assert by["FC14"].parameter_count == (25088 + 1) * 4096
    assert by["Conv1"].parameter_count == 1_792


def test_rounding_rule():
    assert [round_half_away(x) for x in (560.45, 11956.4, 26.48, 2.5, 3.5, -2.5, 0.49)] == [560, 11956, 26, 3, 4, -3, 0]


def test_delay_proxy_vgg16(vgg):
    _, plan = vgg
    proxy = delay_proxy(plan)
    assert proxy.target == pytest.approx(154_702.6432)
    # layers holding >= 100 workers sit within 1% of the target; the 26-worker
    # output row carries a 1.8% rounding error
    for a, v in zip(plan.layers, proxy.per_layer):
        if v is not None and a.workers >= 100:
            assert abs(v / proxy.target - 1) <= 0.01
    assert proxy.spread < 1.02


def test_single_layer_takes_everything():
    plan = allocate_workers(fake_stats([12345]), 777)
    assert plan.layers[0].workers == 777


def test_equal_loads_equal_proxies():
    plan = allocate_workers(fake_stats([500, 500, 500]), 30)
    assert len(set(delay_proxy(plan).per_layer)) == 1


def test_tenfold_load_proxy_ratio():
    plan = allocate_workers(fake_stats([1000, 10000]), 110)
    p = delay_proxy(plan).per_layer
    assert [a.workers for a in plan.layers] == [10, 100]
    assert p[0] / p[1] == pytest.approx(1.0)


def test_zero_worker_error():
    with pytest.raises(AllocationError, match="raise total_workers"):
        allocate_workers(fake_stats([1, 10_000]), 100)
    with pytest.raises(AllocationError):
        allocate_workers(fake_stats([0, 0]), 100)


def test_random_five_layer_brute_force():
    rng = np.random.default_rng(7)
    loads = [int(v) for v in rng.integers(1_000, 1_000_000, 5)]
    plan = allocate_workers(fake_stats(loads), 1_000)
    total = sum(loads)
    for load, a in zip(loads, plan.layers):
        exact = 1_000 * load / total
        assert abs(a.workers - exact) <= 0.5
        assert a.workers == int(exact + 0.5)


def test_table_header_order():
    assert TABLE_COLUMNS[0] == "Layer"
    assert TABLE_COLUMNS[3:7] == ("Activation Count", "Parameters to learn", "Computational Load", "# workers")


def test_one_to_one_and_simulation_plans():
    stats = layer_stats(load_model(data_path("mlp_400_25_10.json")))
    plan = one_to_one_plan(stats)
    assert [a.workers for a in plan.layers] == [400, 25, 10]
    sim = simulation_plan(stats, 100)
    assert sim.layers[0].workers == 1 and all(a.workers >= 1 for a in sim.layers)


loads_st = st.lists(st.integers(1, 10**9), min_size=1, max_size=8)


@settings(max_examples=100, deadline=None)
@given(loads=loads_st, total=st.integers(1_000, 200_000), scale=st.integers(2, 50))
def test_allocation_properties(loads, total, scale):
    stats = fake_stats(loads)
    try:
        plan = allocate_workers(stats, total)
    except AllocationError:
        return
    tl = sum(loads)
    for load, a in zip(loads, plan.layers):
        assert a.exact_share == pytest.approx(total * load / tl)
        assert a.workers == round_half_away(a.exact_share)
    assert abs(sum(a.area_percent for a in plan.layers) - 100.0) <= 0.05
    # scale invariance of exact shares
    scaled = allocate_workers(fake_stats([l * scale for l in loads]), total)
    for a, b in zip(plan.layers, scaled.layers):
        assert a.exact_share == pytest.approx(b.exact_share, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(loads=st.lists(st.integers(1, 10**6), min_size=2, max_size=6), k=st.integers(0, 5), bump=st.integers(1, 10**6))
def test_monotone_in_own_load(loads, k, bump):
    k %= len(loads)
    try:
        before = allocate_workers(fake_stats(loads), 100_000)
        more = list(loads)
        more[k] += bump
        after = allocate_workers(fake_stats(more), 100_000)
    except AllocationError:
        return
    assert after.layers[k].workers >= before.layers[k].workers
