"""Static timing analysis with a linear Manhattan delay model.

Delays are integer femtoseconds so forward/backward propagation is exact
and order independent. Register and IO pins cut the graph: they launch
paths at time zero and terminate paths against the clock period minus the
setup time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .arch import InstKind, Netlist

FS_PER_PS = 1000
INF = 1 << 62

DEFAULT_CELL_DELAYS = {InstKind.LUT: 0.1, InstKind.FF: 0.1}


class StructuralError(ValueError):
    """Combinational cycle or otherwise un-analyzable graph."""


@dataclass
class TimingConfig:
    clock_period: float = 10.0       # ps
    setup: float = 1.0               # ps, register setup time
    per_unit: float = 0.1            # ps per site unit of Manhattan distance
    cell_delays: dict = field(default_factory=lambda: dict(DEFAULT_CELL_DELAYS))

    def cell_delay_fs(self, kind):
        return round(self.cell_delays.get(kind, 0.0) * FS_PER_PS)

    @property
    def period_fs(self):
        return round(self.clock_period * FS_PER_PS)

    @property
    def setup_fs(self):
        return round(self.setup * FS_PER_PS)


def linear_delay(src_pos, sink_pos, per_unit, cell_delay=0.0):
    """Edge delay in femtoseconds: distance plus the driver's cell delay."""
    if per_unit <= 0:
        raise ValueError("per_unit must be positive")
    dist = abs(src_pos[0] - sink_pos[0]) + abs(src_pos[1] - sink_pos[1])
    return round(dist * per_unit * FS_PER_PS) + round(cell_delay * FS_PER_PS)


class TimingGraph:
    """Instance-level timing graph.

    Edges carry integer femtosecond delays and remember their driving net
    so slacks can be folded back onto nets. is_source marks launch points
    (register outputs, input pads), is_sink marks capture points.
    """

    def __init__(self, names, is_source, is_sink, setup_fs, edges, period_fs):
        self.names = list(names)
        self.n = len(self.names)
        self.is_source = list(is_source)
        self.is_sink = list(is_sink)
        self.setup_fs = list(setup_fs)
        self.edges = [(int(u), int(v), int(d), int(net)) for u, v, d, net in edges]
        self.period_fs = int(period_fs)
        self.fanin = [[] for _ in range(self.n)]
        self.fanout = [[] for _ in range(self.n)]
        for idx, (u, v, _, _) in enumerate(self.edges):
            self.fanin[v].append(idx)
            self.fanout[u].append(idx)


def build_timing_graph(netlist: Netlist, positions, cfg: TimingConfig) -> TimingGraph:
    """One node per instance; one edge per driver-to-sink net connection.

    Clock nets are excluded, the first pin of a net drives it. Connections
    from an instance to itself carry no placement-dependent delay and are
    skipped.
    """
    positions = np.asarray(positions, dtype=float)
    names = [inst.name for inst in netlist.instances]
    is_source = [inst.kind in (InstKind.FF, InstKind.IO) for inst in netlist.instances]
    is_sink = [inst.kind in (InstKind.FF, InstKind.IO) for inst in netlist.instances]
    setup_fs = [cfg.setup_fs if inst.kind == InstKind.FF else 0 for inst in netlist.instances]
    edges = []
    for net in netlist.nets:
        if net.is_clock or len(net.pins) < 2:
            continue
        src, sox, soy = net.pins[0]
        cell = cfg.cell_delay_fs(netlist.instances[src].kind)
        spos = (positions[src][0] + sox, positions[src][1] + soy)
        for dst, ox, oy in net.pins[1:]:
            if dst == src:
                continue
            dpos = (positions[dst][0] + ox, positions[dst][1] + oy)
            dist = abs(spos[0] - dpos[0]) + abs(spos[1] - dpos[1])
            delay = round(dist * cfg.per_unit * FS_PER_PS) + cell
            edges.append((src, dst, delay, net.index))
    return TimingGraph(names, is_source, is_sink, setup_fs, edges, cfg.period_fs)


@dataclass
class TimingResult:
    aat_out: list          # launch-side arrival per node (fs)
    rat_in: list           # capture-side requirement per node (fs)
    edge_slack: list       # per edge (fs), INF when unconstrained
    endpoint_slack: dict   # sink node -> slack (fs)
    pred_edge: list        # worst-arrival predecessor edge per node


def _comb_topo_order(graph: TimingGraph):
    """Topological order of combinational nodes; cycles are fatal."""
    comb = [v for v in range(graph.n) if not (graph.is_source[v] or graph.is_sink[v])]
    comb_set = set(comb)
    indeg = {v: 0 for v in comb}
    for u, v, _, _ in graph.edges:
        if v in comb_set and u in comb_set:
            indeg[v] += 1
    ready = sorted(v for v in comb if indeg[v] == 0)
    order = []
    queue = list(ready)
    while queue:
        v = queue.pop(0)
        order.append(v)
        for eidx in graph.fanout[v]:
            w = graph.edges[eidx][1]
            if w in comb_set:
                indeg[w] -= 1
                if indeg[w] == 0:
                    queue.append(w)
    if len(order) != len(comb):
        remaining = comb_set - set(order)
        for eidx, (u, v, _, _) in enumerate(graph.edges):
            if u in remaining and v in remaining:
                raise StructuralError(
                    f"combinational cycle through edge {graph.names[u]} -> {graph.names[v]}")
        raise StructuralError("combinational cycle detected")
    return order


def propagate(graph: TimingGraph) -> TimingResult:
    """Forward max-plus arrival and backward min-minus requirement sweep."""
    order = _comb_topo_order(graph)
    aat = [0] * graph.n          # launch-side arrival
    pred = [-1] * graph.n
    for v in range(graph.n):
        if graph.is_source[v]:
            aat[v] = 0
    # arrival seen at a node's inputs (for endpoints and propagation)
    arrive = [None] * graph.n

    def settle(v):
        best = None
        best_edge = -1
        for eidx in graph.fanin[v]:
            u, _, d, _ = graph.edges[eidx]
            t = aat[u] + d
            if best is None or t > best:
                best = t
                best_edge = eidx
        return best, best_edge

    for v in order:
        best, best_edge = settle(v)
        aat[v] = 0 if best is None else best
        arrive[v] = aat[v] if best is not None else None
        pred[v] = best_edge
    for v in range(graph.n):
        if graph.is_sink[v]:
            best, best_edge = settle(v)
            arrive[v] = best
            if pred[v] == -1:
                pred[v] = best_edge

    rat = [INF] * graph.n
    for v in range(graph.n):
        if graph.is_sink[v]:
            rat[v] = graph.period_fs - graph.setup_fs[v]
    for v in reversed(order):
        best = INF
        for eidx in graph.fanout[v]:
            _, w, d, _ = graph.edges[eidx]
            r = rat[w]
            if r < INF:
                r = r - d
                if r < best:
                    best = r
        rat[v] = best

    edge_slack = []
    for u, v, d, _ in graph.edges:
        r = rat[v]
        edge_slack.append(INF if r >= INF else r - aat[u] - d)

    endpoint_slack = {}
    for v in range(graph.n):
        if graph.is_sink[v] and arrive[v] is not None:
            endpoint_slack[v] = graph.period_fs - graph.setup_fs[v] - arrive[v]
    return TimingResult(aat, rat, edge_slack, endpoint_slack, pred)


def wns_tns(result: TimingResult):
    """Worst and total negative slack over sink endpoints, in femtoseconds."""
    wns = 0
    tns = 0
    for slack in result.endpoint_slack.values():
        neg = min(0, slack)
        tns += neg
        wns = min(wns, neg)
    return wns, tns


def net_slacks(graph: TimingGraph, result: TimingResult, num_nets):
    """Per-net slack: the minimum slack across the net's timing edges."""
    slacks = [INF] * num_nets
    for (u, v, d, net), s in zip(graph.edges, result.edge_slack):
        if net >= 0 and s < slacks[net]:
            slacks[net] = s
    return slacks


def net_criticality(net_slack_fs, wns_fs, period_fs):
    """Normalized negative slack in [0, 1); zero for non-violating nets."""
    if period_fs <= 0:
        raise ValueError("clock period must be positive")
    crit = []
    denom = min(0, wns_fs) - period_fs
    for s in net_slack_fs:
        num = min(0, s) if s < INF else 0
        crit.append(num / denom)
    return np.array(crit)


def reweight(weights, criticality, alpha=1.0, cap=1e6):
    """Multiplicative net reweighting; returns (new_weights, capped_count)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    beta = alpha * np.maximum(1.0, np.exp(np.asarray(criticality, dtype=float)))
    new = np.asarray(weights, dtype=float) * beta
    capped = int(np.sum(new > cap))
    return np.minimum(new, cap), capped


def extract_path(graph: TimingGraph, result: TimingResult, endpoint):
    """Worst arrival path into an endpoint, as instance names."""
    names = []
    v = endpoint
    names.append(graph.names[v])
    eidx = result.pred_edge[v]
    while eidx >= 0:
        u = graph.edges[eidx][0]
        names.append(graph.names[u])
        eidx = result.pred_edge[u] if not graph.is_source[u] else -1
    return list(reversed(names))


def timing_report(graph: TimingGraph, result: TimingResult, top_k=5):
    """JSON-ready summary: WNS/TNS in ps and the worst endpoint paths."""
    wns, tns = wns_tns(result)
    worst = sorted(result.endpoint_slack.items(), key=lambda kv: (kv[1], kv[0]))[:top_k]
    paths = [
        {
            "endpoint": graph.names[v],
            "slack_ps": s / FS_PER_PS,
            "path": extract_path(graph, result, v),
        }
        for v, s in worst
    ]
    return {"wns_ps": wns / FS_PER_PS, "tns_ps": tns / FS_PER_PS, "paths": paths}
