import numpy as np
import pytest

from fpgaplace.arch import InfeasibleError, InstKind, parse_device
from fpgaplace.clockplan import (
    apply_plan,
    brute_force_mapping,
    clock_demand,
    clock_penalty,
    plan_mapping,
    update_eta,
)
from toys import build_netlist, positions_of

DEV_8X8 = parse_device("device 8 8 2 2 24 12\n")


def brute_demand(netlist, positions, device):
    """Independent recount: rectangle intersection per net per region."""
    demand = np.zeros((device.cr_rows, device.cr_cols), dtype=int)
    for net in netlist.nets:
        if not net.is_clock or not net.pins:
            continue
        pts = [(positions[i][0] + ox, positions[i][1] + oy) for i, ox, oy in net.pins]
        for row in range(device.cr_rows):
            for col in range(device.cr_cols):
                x0, x1, y0, y1 = device.region_bounds(row, col)
                hit = False
                lo_x = min(p[0] for p in pts)
                hi_x = max(p[0] for p in pts)
                lo_y = min(p[1] for p in pts)
                hi_y = max(p[1] for p in pts)
                if hi_x >= x0 and lo_x < x1 and hi_y >= y0 and lo_y < y1:
                    hit = True
                if hit:
                    demand[row, col] += 1
    return demand


def test_clock_demand_spanning_block():
    nl = build_netlist(
        [("a", InstKind.FF, 1, 1), ("b", InstKind.FF, 7, 7)],
        [("ck", True, ["a", "b"])],
    )
    demand = clock_demand(nl, positions_of(nl), DEV_8X8)
    assert np.all(demand == 1)


def test_clock_demand_single_region():
    nl = build_netlist(
        [("a", InstKind.FF, 1, 1), ("b", InstKind.FF, 2, 3)],
        [("ck", True, ["a", "b"])],
    )
    demand = clock_demand(nl, positions_of(nl), DEV_8X8)
    assert demand[0, 0] == 1 and demand.sum() == 1


def test_clock_demand_matches_brute_force():
    rng = np.random.default_rng(12)
    dev = parse_device("device 12 12 3 3 24 12\n")
    for _ in range(5):
        specs = [(f"f{i}", InstKind.FF, rng.uniform(0, 12), rng.uniform(0, 12))
                 for i in range(24)]
        nets = []
        for k in range(20):
            members = rng.choice(24, size=rng.integers(2, 5), replace=False)
            nets.append((f"ck{k}", True, [f"f{m}" for m in members]))
        nl = build_netlist(specs, nets)
        pos = positions_of(nl)
        assert np.array_equal(clock_demand(nl, pos, dev), brute_demand(nl, pos, dev))


def test_plan_no_clock_nets_keeps_enclosing_region():
    nl = build_netlist([
        ("a", InstKind.LUT, 1.5, 1.5),
        ("b", InstKind.LUT, 6.5, 6.5),
        ("c", InstKind.FF, 6.5, 1.5),
    ])
    plan = plan_mapping(nl, positions_of(nl), DEV_8X8)
    assert plan.cost == 0.0
    assert plan.mapping[0] == DEV_8X8.region_index(0, 0)
    assert plan.mapping[1] == DEV_8X8.region_index(1, 1)
    assert plan.mapping[2] == DEV_8X8.region_index(0, 1)


def test_plan_separable_nets_with_limit_one():
    # two clock nets, two regions, pin sets that separate naturally
    dev = parse_device("device 8 4 1 2 24 12\n")
    nl = build_netlist(
        [
            ("a1", InstKind.FF, 1.0, 1.0),
            ("a2", InstKind.FF, 2.0, 2.0),
            ("b1", InstKind.FF, 6.0, 1.0),
            ("b2", InstKind.FF, 7.0, 2.0),
        ],
        [("ck0", True, ["a1", "a2"]), ("ck1", True, ["b1", "b2"])],
    )
    pos = positions_of(nl)
    plan = plan_mapping(nl, pos, dev, limit=1)
    assert plan.mapping[0] == plan.mapping[1]
    assert plan.mapping[2] == plan.mapping[3]
    assert plan.mapping[0] != plan.mapping[2]
    bf_cost, _ = brute_force_mapping(nl, pos, dev, limit=1)
    assert plan.cost == pytest.approx(bf_cost, abs=1e-9)


def _random_case(rng):
    dev = parse_device(
        "device 4 4 2 2 24 12\n"
        "cap SLICEL 2 1 2 1 0 0\n"
    )
    n = int(rng.integers(2, 9))
    kinds = [InstKind.LUT, InstKind.FF, InstKind.DRAM]
    specs = []
    for i in range(n):
        kind = kinds[int(rng.integers(0, len(kinds)))]
        specs.append((f"i{i}", kind, rng.uniform(0, 4), rng.uniform(0, 4)))
    nets = []
    for k in range(int(rng.integers(0, 4))):
        size = int(rng.integers(1, min(n, 4) + 1))
        members = rng.choice(n, size=size, replace=False)
        nets.append((f"ck{k}", True, [f"i{m}" for m in members]))
    nl = build_netlist(specs, nets)
    limit = int(rng.integers(1, 3))
    return dev, nl, limit


def test_plan_matches_exhaustive_enumeration():
    rng = np.random.default_rng(77)
    checked = 0
    for _ in range(40):
        dev, nl, limit = _random_case(rng)
        pos = positions_of(nl)
        bf_cost, _ = brute_force_mapping(nl, pos, dev, limit=limit)
        try:
            plan = plan_mapping(nl, pos, dev, limit=limit)
        except InfeasibleError:
            assert bf_cost is None
            continue
        assert bf_cost is not None
        assert plan.cost == pytest.approx(bf_cost, abs=1e-9)
        checked += 1
        # capacity feasibility of the winning mapping
        use = np.zeros((dev.num_regions, 6))
        for i, r in enumerate(plan.mapping):
            if r >= 0:
                use[r] += nl.instances[i].demand
        for r in range(dev.num_regions):
            row, col = divmod(r, dev.cr_cols)
            assert np.all(use[r] <= dev.region_capacity(row, col) + 1e-9)
    assert checked >= 10


def test_post_planning_teleport_meets_limit():
    rng = np.random.default_rng(5)
    for _ in range(10):
        dev, nl, limit = _random_case(rng)
        pos = positions_of(nl)
        try:
            plan = plan_mapping(nl, pos, dev, limit=limit)
        except InfeasibleError:
            continue
        teleported = apply_plan(pos, plan, nl.movable_mask())
        demand = clock_demand(nl, teleported, dev)
        assert demand.max(initial=0) <= limit


def test_infeasible_carries_bound():
    # two clock nets forced into one tiny region cannot satisfy limit 1
    dev = parse_device("device 2 2 1 1 24 12\n")
    nl = build_netlist(
        [("a", InstKind.FF, 0.5, 0.5), ("b", InstKind.FF, 1.5, 1.5)],
        [("ck0", True, ["a"]), ("ck1", True, ["b"])],
    )
    with pytest.raises(InfeasibleError) as err:
        plan_mapping(nl, positions_of(nl), dev, limit=1)
    assert hasattr(err.value, "bound")


def test_penalty_zero_inside():
    nl = build_netlist([("a", InstKind.LUT, 1.0, 1.0)])
    plan = plan_mapping(nl, positions_of(nl), DEV_8X8)
    value, grad = clock_penalty(positions_of(nl), plan)
    assert value == 0.0 and np.allclose(grad, 0.0)


def test_penalty_quadratic_outside():
    nl = build_netlist([("a", InstKind.LUT, 1.0, 1.0)])
    plan = plan_mapping(nl, positions_of(nl), DEV_8X8)
    # region (0, 0) spans x in [0, 4); push the instance 2 left of lo_x
    pos = np.array([[-2.0, 1.0]])
    value, grad = clock_penalty(pos, plan)
    assert value == pytest.approx(4.0)
    assert grad[0, 0] == pytest.approx(-4.0)
    assert grad[0, 1] == 0.0


def test_penalty_gradient_matches_fd():
    rng = np.random.default_rng(31)
    nl = build_netlist([(f"i{k}", InstKind.LUT, rng.uniform(1, 7), rng.uniform(1, 7))
                        for k in range(5)])
    plan = plan_mapping(nl, positions_of(nl), DEV_8X8)
    pos = positions_of(nl) + rng.uniform(-3, 3, size=(5, 2))
    value, grad = clock_penalty(pos, plan)
    h = 1e-6
    for i in range(5):
        for axis in range(2):
            dp = pos.copy()
            dp[i, axis] += h
            vp, _ = clock_penalty(dp, plan)
            dp[i, axis] -= 2 * h
            vm, _ = clock_penalty(dp, plan)
            fd = (vp - vm) / (2 * h)
            assert grad[i, axis] == pytest.approx(fd, rel=1e-6, abs=1e-6)


def test_penalty_zero_set_iff_all_inside():
    nl = build_netlist([("a", InstKind.LUT, 1.0, 1.0), ("b", InstKind.LUT, 6.0, 6.0)])
    plan = plan_mapping(nl, positions_of(nl), DEV_8X8)
    inside = positions_of(nl)
    value, _ = clock_penalty(inside, plan)
    assert value == 0.0
    outside = inside.copy()
    outside[1, 0] = 1.0  # region (1,1) spans x in [4, 8)
    value, _ = clock_penalty(outside, plan)
    assert value > 0.0


def test_update_eta():
    assert update_eta(0.0, 5.0) == 0.0
    assert update_eta(10.0, 0.0) == pytest.approx(1e-4 * 10.0 / 1e-2)
    assert update_eta(10.0, 5.0) == pytest.approx(1e-4 * 10.0 / (5.0 + 1e-2))


def test_plan_json_dump():
    nl = build_netlist(
        [("a", InstKind.FF, 1, 1), ("b", InstKind.FF, 7, 7)],
        [("ck", True, ["a", "b"])],
    )
    plan = plan_mapping(nl, positions_of(nl), DEV_8X8)
    blob = plan.to_json(nl, DEV_8X8)
    assert set(blob) == {"cost", "eta", "mapping", "region_demand", "mask"}
    assert "a" in blob["mapping"] and "ck" in blob["mask"]
