"""Smooth differentiable wirelength and exact half-perimeter evaluation.

The smooth model is the weighted-average approximation per axis: a softmax
and softmin of the pin coordinates whose gap approaches the bounding-box
span as the smoothing parameter shrinks. Exponents are max-shifted before
exponentiation so large coordinates cannot overflow.
"""

from __future__ import annotations

import numpy as np

from .arch import Netlist


class NetArrays:
    """Flat pin arrays for vectorized net evaluation.

    Nets with fewer than two pins carry no wirelength and are dropped here;
    net_index maps each kept net back to its position in the netlist so
    external weight vectors stay full length.
    """

    def __init__(self, netlist: Netlist):
        pin_inst = []
        pin_off = []
        start = [0]
        net_index = []
        for net in netlist.nets:
            if len(net.pins) < 2:
                continue
            for inst_idx, ox, oy in net.pins:
                pin_inst.append(inst_idx)
                pin_off.append((ox, oy))
            start.append(len(pin_inst))
            net_index.append(net.index)
        self.pin_inst = np.array(pin_inst, dtype=np.int64)
        self.pin_off = np.array(pin_off, dtype=float).reshape(-1, 2)
        self.start = np.array(start, dtype=np.int64)
        self.net_index = np.array(net_index, dtype=np.int64)
        self.num_nets = len(net_index)
        self.num_instances = len(netlist.instances)
        sizes = np.diff(self.start)
        self.pin_net = np.repeat(np.arange(self.num_nets), sizes)
        self.sizes = sizes
        # deduplicated (instance, net) incidence for preconditioning
        if len(self.pin_inst):
            pairs = np.unique(np.stack([self.pin_inst, self.pin_net], axis=1), axis=0)
            self.inc_inst = pairs[:, 0]
            self.inc_net = pairs[:, 1]
        else:
            self.inc_inst = np.zeros(0, dtype=np.int64)
            self.inc_net = np.zeros(0, dtype=np.int64)

    def pin_positions(self, inst_pos):
        return inst_pos[self.pin_inst] + self.pin_off


def _as_arrays(netlist):
    return netlist if isinstance(netlist, NetArrays) else NetArrays(netlist)


def hpwl(netlist, inst_pos) -> float:
    """Total half-perimeter wirelength, weight free."""
    arrays = _as_arrays(netlist)
    if arrays.num_nets == 0:
        return 0.0
    pins = arrays.pin_positions(np.asarray(inst_pos, dtype=float))
    total = 0.0
    seg = arrays.start[:-1]
    for axis in (0, 1):
        coord = pins[:, axis]
        total += float(np.sum(np.maximum.reduceat(coord, seg) - np.minimum.reduceat(coord, seg)))
    return total


def smooth_wl(netlist, inst_pos, weights, gamma):
    """Weighted smooth wirelength and its gradient per instance.

    weights is indexed by original net index. Returns (value, grad) with
    grad shaped (num_instances, 2); the gradient of a pin accumulates onto
    its owning instance, offsets are rigid.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    arrays = _as_arrays(netlist)
    inst_pos = np.asarray(inst_pos, dtype=float)
    grad = np.zeros((arrays.num_instances, 2))
    if arrays.num_nets == 0:
        return 0.0, grad
    weights = np.asarray(weights, dtype=float)[arrays.net_index]
    pins = arrays.pin_positions(inst_pos)
    seg = arrays.start[:-1]
    pin_net = arrays.pin_net
    value = 0.0
    for axis in (0, 1):
        x = pins[:, axis]
        xmax = np.maximum.reduceat(x, seg)[pin_net]
        xmin = np.minimum.reduceat(x, seg)[pin_net]
        a = np.exp((x - xmax) / gamma)
        b = np.exp((xmin - x) / gamma)
        sa = np.add.reduceat(a, seg)
        sb = np.add.reduceat(b, seg)
        sxa = np.add.reduceat(x * a, seg)
        sxb = np.add.reduceat(x * b, seg)
        wa_max = sxa / sa
        wa_min = sxb / sb
        value += float(np.sum(weights * (wa_max - wa_min)))
        gmax = (a / sa[pin_net]) * (1.0 + (x - wa_max[pin_net]) / gamma)
        gmin = (b / sb[pin_net]) * (1.0 - (x - wa_min[pin_net]) / gamma)
        pin_grad = weights[pin_net] * (gmax - gmin)
        np.add.at(grad[:, axis], arrays.pin_inst, pin_grad)
    return value, grad


def gamma_schedule(overflow_ratio, base=4.0, k=1.0, lo=0.1, hi=4.0):
    """Smoothing parameter as a function of density overflow.

    Starts coarse while the design is fully clustered and tightens as the
    overflow drains, clamped to [lo, hi] site units.
    """
    return float(np.clip(base * 10.0 ** (k * (overflow_ratio - 1.0)), lo, hi))
