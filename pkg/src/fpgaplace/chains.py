"""Carry chain alignment correction.

Chain members must end up stacked in one column in cascade order. During
optimization the members move as a rigid group (averaged gradient) and the
end of every iteration snaps each chain onto its area-weighted centroid:
shared x, consecutive y slots, cascade order preserved, centroid unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ChainError(ValueError):
    """Chain cannot be placed, for example taller than the die."""


@dataclass
class CarryChain:
    id: int
    members: list               # instance indices, lowest bit first


def chains_from_netlist(netlist):
    return [CarryChain(cid, list(members)) for cid, members in sorted(netlist.chains.items())]


def align_chains(chains, positions, weights=None, pitch=1.0, layout_height=None):
    """Snap every chain into a column around its weighted centroid.

    weights, when given, holds one mass per instance index (carry resource
    area); members default to uniform mass. Returns a corrected copy.
    """
    pos = np.array(positions, dtype=float, copy=True)
    for chain in chains:
        idx = np.asarray(chain.members, dtype=np.int64)
        n = len(idx)
        if n == 0:
            continue
        if layout_height is not None and n * pitch > layout_height + 1e-9:
            raise ChainError(
                f"chain {chain.id} needs {n * pitch:g} rows, die has {layout_height:g}")
        w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)[idx]
        if w.sum() <= 0:
            w = np.ones(n)
        w = w / w.sum()
        x_star = float(np.dot(w, pos[idx, 0]))
        y_bar = float(np.dot(w, pos[idx, 1]))
        slots = np.arange(n, dtype=float) * pitch
        base = y_bar - float(np.dot(w, slots))
        pos[idx, 0] = x_star
        pos[idx, 1] = base + slots
    return pos


def average_chain_gradients(chains, grad):
    """Give every chain member the mean gradient of its chain (rigid motion)."""
    out = np.array(grad, dtype=float, copy=True)
    for chain in chains:
        idx = np.asarray(chain.members, dtype=np.int64)
        if len(idx) == 0:
            continue
        out[idx] = out[idx].mean(axis=0)
    return out
