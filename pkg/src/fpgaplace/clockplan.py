"""Clock network planning.

Computes per-region clock demand, searches instance-to-clock-region
mappings by branch and bound over net/region masks, and provides the
smooth bowl-shaped penalty that pulls instances into their mapped regions
during optimization.

A mapping is feasible when every region respects its per-field capacity
and, for every clock net, the rectangle hull of the regions hosting its
instances keeps every region's demand within the limit. The hull
convention guarantees that teleporting all instances into their mapped
regions cannot create a new bounding-box violation.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field

import numpy as np

from .arch import Device, InfeasibleError, Netlist, NUM_FIELDS, FieldKind


@dataclass
class ClockPlan:
    mapping: np.ndarray            # instance -> region index, -1 unplanned
    bounds: np.ndarray             # (n, 4): lo_x, hi_x, lo_y, hi_y
    mask: dict                     # clock net index -> allowed regions (R,) bool
    region_demand: np.ndarray      # induced demand per region
    cost: float
    eta: float = 0.0

    def to_json(self, netlist, device):
        return {
            "cost": self.cost,
            "eta": self.eta,
            "mapping": {
                netlist.instances[i].name: int(r)
                for i, r in enumerate(self.mapping) if r >= 0
            },
            "region_demand": [int(d) for d in self.region_demand],
            "mask": {
                netlist.nets[e].name: [bool(b) for b in allowed]
                for e, allowed in sorted(self.mask.items())
            },
        }


def clock_demand(netlist: Netlist, positions, device: Device):
    """Count, per clock region, the clock nets whose pin bbox intersects it."""
    positions = np.asarray(positions, dtype=float)
    demand = np.zeros((device.cr_rows, device.cr_cols), dtype=int)
    for net in netlist.nets:
        if not net.is_clock or not net.pins:
            continue
        px = [positions[i][0] + ox for i, ox, _ in net.pins]
        py = [positions[i][1] + oy for i, _, oy in net.pins]
        xmin, xmax = min(px), max(px)
        ymin, ymax = min(py), max(py)
        for row in range(device.cr_rows):
            for col in range(device.cr_cols):
                x0, x1, y0, y1 = device.region_bounds(row, col)
                if xmax >= x0 and xmin < x1 and ymax >= y0 and ymin < y1:
                    demand[row, col] += 1
    return demand


def clock_penalty(positions, plan: ClockPlan, movable_mask=None):
    """Bowl penalty: zero inside the mapped region, squared distance outside."""
    pos = np.asarray(positions, dtype=float)
    n = len(pos)
    grad = np.zeros((n, 2))
    if plan is None:
        return 0.0, grad
    active = plan.mapping >= 0
    if movable_mask is not None:
        active = active & np.asarray(movable_mask, dtype=bool)
    value = 0.0
    for axis, (lo_col, hi_col) in enumerate(((0, 1), (2, 3))):
        lo = plan.bounds[:, lo_col]
        hi = plan.bounds[:, hi_col]
        c = pos[:, axis]
        below = active & (c < lo)
        above = active & (c > hi)
        value += float(np.sum((c[below] - lo[below]) ** 2))
        value += float(np.sum((c[above] - hi[above]) ** 2))
        grad[below, axis] = 2.0 * (c[below] - lo[below])
        grad[above, axis] = 2.0 * (c[above] - hi[above])
    return value, grad


def update_eta(wl_grad_norm, clock_grad_norm, iota=1e-4, eps=1e-2):
    """Clock multiplier from the wirelength/penalty gradient norm ratio."""
    return float(iota * wl_grad_norm / (clock_grad_norm + eps))


def apply_plan(positions, plan: ClockPlan, movable_mask=None, inset=1e-9):
    """Teleport mapped instances to the nearest interior point of their region."""
    pos = np.array(positions, dtype=float, copy=True)
    active = plan.mapping >= 0
    if movable_mask is not None:
        active = active & np.asarray(movable_mask, dtype=bool)
    idx = np.flatnonzero(active)
    pos[idx, 0] = np.clip(pos[idx, 0], plan.bounds[idx, 0] + inset, plan.bounds[idx, 1] - inset)
    pos[idx, 1] = np.clip(pos[idx, 1], plan.bounds[idx, 2] + inset, plan.bounds[idx, 3] - inset)
    return pos


# --- min-cost assignment ---------------------------------------------------


class _MinCostFlow:
    """Successive shortest path min-cost flow with Dijkstra potentials."""

    def __init__(self, n):
        self.n = n
        self.adj = [[] for _ in range(n)]

    def add(self, u, v, cap, cost):
        self.adj[u].append([v, cap, float(cost), len(self.adj[v])])
        self.adj[v].append([u, 0, -float(cost), len(self.adj[u]) - 1])

    def solve(self, s, t, want):
        flow = 0
        cost = 0.0
        pot = [0.0] * self.n
        inf = float("inf")
        while flow < want:
            dist = [inf] * self.n
            dist[s] = 0.0
            prev = [(-1, -1)] * self.n
            pq = [(0.0, s)]
            while pq:
                d, u = heapq.heappop(pq)
                if d > dist[u] + 1e-12:
                    continue
                for i, (v, cap, c, _) in enumerate(self.adj[u]):
                    if cap > 0:
                        nd = d + c + pot[u] - pot[v]
                        if nd < dist[v] - 1e-12:
                            dist[v] = nd
                            prev[v] = (u, i)
                            heapq.heappush(pq, (nd, v))
            if dist[t] == inf:
                break
            for v in range(self.n):
                if dist[v] < inf:
                    pot[v] += dist[v]
            push = want - flow
            v = t
            while v != s:
                u, i = prev[v]
                push = min(push, self.adj[u][i][1])
                v = u
            v = t
            while v != s:
                u, i = prev[v]
                arc = self.adj[u][i]
                arc[1] -= push
                self.adj[v][arc[3]][1] += push
                cost += push * arc[2]
                v = u
            flow += push
        return flow, cost


# --- branch and bound ------------------------------------------------------


class _Planner:
    def __init__(self, netlist, positions, device, limit):
        self.netlist = netlist
        self.device = device
        self.limit = limit
        self.pos = np.asarray(positions, dtype=float)
        self.R = device.num_regions
        self.rows = device.cr_rows
        self.cols = device.cr_cols

        self.planned = [i.index for i in netlist.instances
                        if not i.fixed and i.demand.sum() > 0]
        self.pin_count = np.array([len(i.pins) for i in netlist.instances])

        # region rectangles and per-region capacities, net of fixed demand
        self.rects = []
        self.cap = np.zeros((self.R, NUM_FIELDS))
        for row in range(self.rows):
            for col in range(self.cols):
                self.rects.append(device.region_bounds(row, col))
                self.cap[device.region_index(row, col)] = device.region_capacity(row, col)
        for inst in netlist.instances:
            if inst.fixed and inst.demand.sum() > 0:
                r = self._region_at(inst.x, inst.y)
                self.cap[r] = np.maximum(self.cap[r] - inst.demand, 0.0)

        # displacement cost: pins times Manhattan distance to the region rect;
        # pinless instances still prefer their enclosing region
        self.cost = np.zeros((len(self.planned), self.R))
        for k, i in enumerate(self.planned):
            x, y = self.pos[i]
            pc = max(1, self.pin_count[i])
            for r, (x0, x1, y0, y1) in enumerate(self.rects):
                dx = max(x0 - x, 0.0, x - x1)
                dy = max(y0 - y, 0.0, y - y1)
                self.cost[k, r] = pc * (dx + dy)

        # clock net membership (movable slots + immutable fixed regions)
        self.clock_nets = []
        self.net_movable = {}
        self.net_fixed_regions = {}
        for net in netlist.nets:
            if not net.is_clock:
                continue
            self.clock_nets.append(net.index)
            movers, fixed_regions = [], set()
            for i, _, _ in net.pins:
                inst = netlist.instances[i]
                if inst.fixed or inst.demand.sum() == 0:
                    fixed_regions.add(self._region_at(inst.x, inst.y))
                else:
                    movers.append(i)
            self.net_movable[net.index] = sorted(set(movers))
            self.net_fixed_regions[net.index] = fixed_regions
        self.inst_clock_nets = {i: [] for i in self.planned}
        for e in self.clock_nets:
            for i in self.net_movable[e]:
                if i in self.inst_clock_nets:
                    self.inst_clock_nets[i].append(e)

        self.best = None
        self.best_cost = float("inf")
        self.visited = set()
        self.root_bound = None
        self.nodes = 0
        self.node_cap = 200000

    def _region_at(self, x, y):
        row, col = self.device.region_of(x, y)
        return self.device.region_index(row, col)

    def _allowed(self, mask):
        """Per planned instance, the boolean region set its clock nets allow."""
        allowed = np.ones((len(self.planned), self.R), dtype=bool)
        for k, i in enumerate(self.planned):
            for e in self.inst_clock_nets[i]:
                allowed[k] &= mask[e]
        return allowed

    def _assign(self, allowed):
        """Exact min-cost capacity-feasible assignment, or None.

        Greedy nearest-allowed-region is optimal whenever it fits; otherwise
        fall back to a min-cost flow where DRAM/SHIFT units pass through the
        region's LUTM-AL arc into the shared LUTL arc.
        """
        n = len(self.planned)
        if n == 0:
            return np.zeros(0, dtype=int), 0.0
        if not np.all(allowed.any(axis=1)):
            return None
        masked_cost = np.where(allowed, self.cost, np.inf)
        greedy = np.argmin(masked_cost, axis=1)
        use = np.zeros((self.R, NUM_FIELDS))
        for k, i in enumerate(self.planned):
            use[greedy[k]] += self.netlist.instances[i].demand
        if np.all(use <= self.cap + 1e-9):
            return greedy.astype(int), float(masked_cost[np.arange(n), greedy].sum())

        src, snk = 0, 1
        inst_base = 2
        fr_base = inst_base + n
        node_count = fr_base + NUM_FIELDS * self.R
        flow = _MinCostFlow(node_count)

        def fr(fk, r):
            return fr_base + int(fk) * self.R + r

        for r in range(self.R):
            flow.add(fr(FieldKind.LUTM_AL, r), fr(FieldKind.LUTL, r),
                     int(self.cap[r, FieldKind.LUTM_AL]), 0.0)
            for fk in (FieldKind.LUTL, FieldKind.FF, FieldKind.CARRY,
                       FieldKind.DSP, FieldKind.BRAM):
                flow.add(fr(fk, r), snk, int(self.cap[r, fk]), 0.0)
        for k, i in enumerate(self.planned):
            flow.add(src, inst_base + k, 1, 0.0)
            inst = self.netlist.instances[i]
            if inst.demand[FieldKind.LUTM_AL] > 0:
                entry = FieldKind.LUTM_AL
            else:
                entry = FieldKind(int(np.argmax(inst.demand)))
            for r in range(self.R):
                if allowed[k, r]:
                    flow.add(inst_base + k, fr(entry, r), 1, self.cost[k, r])
        got, total = flow.solve(src, snk, n)
        if got < n:
            return None
        assign = np.zeros(n, dtype=int)
        for k in range(n):
            for v, cap, _, _ in flow.adj[inst_base + k]:
                if v >= fr_base and cap == 0:
                    assign[k] = (v - fr_base) % self.R
                    break
        return assign, float(total)

    def _hulls_and_demand(self, assign):
        region_of_planned = {i: int(assign[k]) for k, i in enumerate(self.planned)}
        demand = np.zeros((self.rows, self.cols), dtype=int)
        hulls = {}
        for e in self.clock_nets:
            regions = set(self.net_fixed_regions[e])
            regions.update(region_of_planned[i] for i in self.net_movable[e]
                           if i in region_of_planned)
            if not regions:
                continue
            rr = [r // self.cols for r in regions]
            cc = [r % self.cols for r in regions]
            hull = (min(rr), max(rr), min(cc), max(cc))
            hulls[e] = hull
            demand[hull[0]:hull[1] + 1, hull[2]:hull[3] + 1] += 1
        return hulls, demand

    def _half_plane_children(self, mask, e, row_star, col_star):
        """Mask restrictions forcing net e's hull off region (row*, col*)."""
        fixed = self.net_fixed_regions[e]
        frr = [r // self.cols for r in fixed]
        fcc = [r % self.cols for r in fixed]
        out = []
        conds = [
            ("col<", lambda r, c: c < col_star, all(c < col_star for c in fcc)),
            ("col>", lambda r, c: c > col_star, all(c > col_star for c in fcc)),
            ("row<", lambda r, c: r < row_star, all(r < row_star for r in frr)),
            ("row>", lambda r, c: r > row_star, all(r > row_star for r in frr)),
        ]
        for _, keep, fixed_ok in conds:
            if not fixed_ok:
                continue
            new = mask[e].copy()
            removed = False
            for r in range(self.R):
                if new[r] and not keep(r // self.cols, r % self.cols):
                    new[r] = False
                    removed = True
            if removed and new.any():
                child = dict(mask)
                child[e] = new
                out.append(child)
        return out

    def _mask_key(self, mask):
        return b"".join(np.packbits(mask[e]).tobytes() for e in self.clock_nets)

    def _lower_bound(self, allowed):
        masked = np.where(allowed, self.cost, np.inf)
        mins = masked.min(axis=1) if len(masked) else np.zeros(0)
        return float(mins.sum()) if np.all(np.isfinite(mins)) else float("inf")

    def _search(self, root_mask):
        stack = [root_mask]
        while stack:
            mask = stack.pop()
            self.nodes += 1
            if self.nodes > self.node_cap:
                return
            key = self._mask_key(mask)
            if key in self.visited:
                continue
            self.visited.add(key)
            allowed = self._allowed(mask)
            bound = self._lower_bound(allowed)
            if self.root_bound is None:
                self.root_bound = bound
            if bound >= self.best_cost - 1e-12:
                continue
            solved = self._assign(allowed)
            if solved is None:
                continue
            assign, cost = solved
            if cost >= self.best_cost - 1e-12:
                continue
            hulls, demand = self._hulls_and_demand(assign)
            flat = demand.reshape(-1)
            worst = int(np.argmax(flat))
            if flat[worst] <= self.limit:
                self.best_cost = cost
                self.best = (assign, dict(mask), demand)
                continue
            row_star, col_star = worst // self.cols, worst % self.cols
            offenders = sorted(
                e for e, (r0, r1, c0, c1) in hulls.items()
                if r0 <= row_star <= r1 and c0 <= col_star <= c1
            )
            children = []
            for e in offenders:
                children.extend(self._half_plane_children(mask, e, row_star, col_star))
            stack.extend(reversed(children))

    def run(self):
        total_demand = np.zeros(NUM_FIELDS)
        for i in self.planned:
            total_demand += self.netlist.instances[i].demand
        if np.any(total_demand > self.cap.sum(axis=0) + 1e-9):
            raise InfeasibleError("total demand exceeds total clock-region capacity")
        root = {e: np.ones(self.R, dtype=bool) for e in self.clock_nets}
        self._search(root)
        if self.best is None:
            err = InfeasibleError("no instance-to-clock-region mapping satisfies the limits")
            err.bound = self.root_bound
            raise err
        assign, mask, demand = self.best
        n = len(self.netlist.instances)
        mapping = np.full(n, -1, dtype=int)
        bounds = np.zeros((n, 4))
        bounds[:, 1] = self.device.width
        bounds[:, 3] = self.device.height
        for k, i in enumerate(self.planned):
            r = int(assign[k])
            mapping[i] = r
            x0, x1, y0, y1 = self.rects[r]
            bounds[i] = (x0, x1, y0, y1)
        return ClockPlan(mapping=mapping, bounds=bounds, mask=mask,
                         region_demand=demand.reshape(-1), cost=self.best_cost)


def plan_mapping(netlist: Netlist, positions, device: Device, limit=None) -> ClockPlan:
    """Search for the cheapest capacity- and clock-feasible region mapping."""
    if limit is None:
        limit = device.cr_limit
    return _Planner(netlist, positions, device, limit).run()


def brute_force_mapping(netlist: Netlist, positions, device: Device, limit=None):
    """Exhaustive reference search over all region assignments (tests only)."""
    if limit is None:
        limit = device.cr_limit
    planner = _Planner(netlist, positions, device, limit)
    n = len(planner.planned)
    best_cost = None
    best_assign = None
    for assign in itertools.product(range(planner.R), repeat=n):
        use = np.zeros((planner.R, NUM_FIELDS))
        cost = 0.0
        for k, i in enumerate(planner.planned):
            use[assign[k]] += netlist.instances[i].demand
            cost += planner.cost[k, assign[k]]
        if np.any(use > planner.cap + 1e-9):
            continue
        _, demand = planner._hulls_and_demand(np.array(assign))
        if demand.max(initial=0) > limit:
            continue
        if best_cost is None or cost < best_cost:
            best_cost = cost
            best_assign = assign
    return best_cost, best_assign
