"""Nested Lagrangian placement engine.

The objective is timing-weighted smooth wirelength plus, per resource
field, a first- and second-order density penalty scaled by a multiplier,
plus the clock-region attraction term. Five nested loops drive it: the
innermost performs a fixed number of preconditioned gradient steps, the
wirelength loop grows the density multipliers until overflow drains, the
routability loop inflates areas on pin-dense spots, the clock loop plans
instance-to-region mappings when demand violates the limit, and the
outermost loop reweights nets by timing criticality.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

log = logging.getLogger(__name__)

from . import chains as chains_mod
from . import clockplan as cp
from . import fields as fl
from . import timing as tm
from . import wirelen as wl
from .arch import Device, FieldKind, InfeasibleError, InstKind, Netlist, NUM_FIELDS

LUT_FF_FIELDS = (FieldKind.LUTL, FieldKind.LUTM_AL, FieldKind.FF)
TINY = 1e-12


@dataclass
class EngineConfig:
    seed: int = 1
    threads: int = 1
    nbins: int = 0                    # 0: derive from instance count
    # smoothing schedule
    gamma_base: float = 4.0
    gamma_k: float = 1.0
    gamma_lo: float = 0.1
    gamma_hi: float = 4.0
    # density multiplier schedule
    zeta: float = 8e-5
    zeta_reset: float = 0.1
    alm_beta: float = 1.0
    mu_lo: float = 1.05
    mu_hi: float = 1.06
    mu_tau: float = 1e3
    lambda_cap: float = 1e3
    # preconditioning
    dynamic_precond: bool = True
    # loop controls
    l5_iters: int = 1
    max_l5_total: int = 3000
    l4_min_iters: int = 50
    overflow_lut_ff: float = 0.10
    overflow_other: float = 0.15
    l3_rounds: int = 1
    pin_density_target: float = 2.0
    l2_rounds: int = 3
    l1_rounds: int = 3
    l1_improve_tol: float = 0.005
    l1_window: int = 2
    # timing
    timing_enabled: bool = True
    timing_alpha: float = 1.0
    clock_period: float = 10.0
    setup_time: float = 1.0
    delay_per_unit: float = 0.1
    weight_cap: float = 1e6
    # clock penalty
    iota: float = 1e-4
    eps_clock: float = 1e-2
    # chains
    chain_align: bool = True
    chain_align_every: int = 1
    # stepper
    step_init_frac: float = 0.25
    min_disp_bins: float = 0.05
    max_disp_bins: float = 2.0
    backtrack_max: int = 5

    @classmethod
    def from_text(cls, text):
        """key=value overlay, one per line."""
        cfg = cls()
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad config line {line!r}, want key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            cfg.set(key, val)
        return cfg

    def set(self, key, val):
        for f in dc_fields(self):
            if f.name == key:
                if f.type == "bool" or isinstance(getattr(self, key), bool):
                    parsed = str(val).lower() in ("1", "true", "yes", "on")
                elif isinstance(getattr(self, key), int):
                    parsed = int(val)
                else:
                    parsed = float(val)
                setattr(self, key, parsed)
                return
        raise KeyError(f"unknown config key {key!r}")

    def timing_config(self):
        return tm.TimingConfig(clock_period=self.clock_period, setup=self.setup_time,
                               per_unit=self.delay_per_unit)

    def overflow_threshold(self, fk):
        return self.overflow_lut_ff if fk in LUT_FF_FIELDS else self.overflow_other


def wl_preconditioner(netlist, weights):
    """Per-instance second-order wirelength estimate: sum of w_e/(pins-1)."""
    arrays = netlist if isinstance(netlist, wl.NetArrays) else wl.NetArrays(netlist)
    weights = np.asarray(weights, dtype=float)
    contrib = weights[arrays.net_index[arrays.inc_net]] / (arrays.sizes[arrays.inc_net] - 1)
    return np.bincount(arrays.inc_inst, weights=contrib,
                       minlength=arrays.num_instances).astype(float)


def dynamic_alpha(density_norms, wl_norms, pw_means):
    """Per-field gradient-ratio weights: theta clamped at one, alpha scaled.

    density_norms/wl_norms/pw_means map field -> scalar over the instances
    that demand the field. A zero wirelength norm falls back to theta = 1.
    """
    alpha = {}
    theta = {}
    for fk, dn in density_norms.items():
        wn = wl_norms.get(fk, 0.0)
        th = max(1.0, dn / wn) if wn > TINY else 1.0
        theta[fk] = th
        alpha[fk] = th * pw_means.get(fk, 0.0)
    return alpha, theta


def precondition(grad, pw, lam_alpha_areas):
    """Jacobi-style gradient scaling by 1 / max(1, P^W + sum alpha*lambda*A).

    Heavier instances (more pins, larger weighted area) move slower; the
    denominator clamp keeps light instances at raw gradient speed and the
    scale strictly positive, so no gradient component ever flips sign.
    Returns (scaled, P).
    """
    denom = np.asarray(pw, dtype=float) + np.asarray(lam_alpha_areas, dtype=float)
    p = 1.0 / np.maximum(denom, 1.0)
    return np.asarray(grad, dtype=float) * p[:, None], p


@dataclass
class Eval:
    value: float = 0.0
    wl_value: float = 0.0
    wl_grad: np.ndarray | None = None
    clock_value: float = 0.0
    clock_grad: np.ndarray | None = None
    energy: dict = field(default_factory=dict)
    overflow: dict = field(default_factory=dict)
    dgrad_inst: dict = field(default_factory=dict)   # dPhi/dpos for field members
    dgrad_fill: dict = field(default_factory=dict)
    grad_inst: np.ndarray | None = None              # assembled objective grad
    grad_fill: dict = field(default_factory=dict)
    pw: np.ndarray | None = None


class PlacerState:
    """Positions, fillers, multipliers, and bookkeeping for one run."""

    def __init__(self, netlist: Netlist, device: Device, cfg: EngineConfig):
        self.netlist = netlist
        self.device = device
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.narrays = wl.NetArrays(netlist)
        n = len(netlist.instances)
        self.pos = netlist.positions()
        self.movable = netlist.movable_mask()
        self.areas = np.array([inst.area for inst in netlist.instances], dtype=float).reshape(n, NUM_FIELDS)
        self.weights = np.array([net.weight for net in netlist.nets], dtype=float)
        self.chains = chains_mod.chains_from_netlist(netlist)
        nbins = cfg.nbins if cfg.nbins else fl.default_bins(n)
        self.grids = fl.make_field_grids(device, nbins=nbins)
        self.fstate = {}
        self.members = {}
        self.active_fields = []
        for fk in FieldKind:
            grid = self.grids[fk]
            state = fl.FieldState(grid=grid)
            movers = [i for i in range(n) if self.movable[i] and netlist.instances[i].demand[fk] > 0]
            self.members[fk] = np.array(movers, dtype=np.int64)
            fixed = [i for i in range(n) if not self.movable[i] and netlist.instances[i].demand[fk] > 0]
            if fixed and grid.unit_area > 0:
                fq = self.areas[fixed, fk] * grid.unit_area
                rho_fixed, _ = fl.accumulate_density(grid, self.pos[fixed], fq)
                grid.static = grid.static + rho_fixed
            self.fstate[fk] = state
            if len(movers):
                if grid.unit_area <= 0:
                    raise InfeasibleError(f"field {fk.name} has demand but no capacity")
                self.active_fields.append(fk)
        self._seed_positions()
        self._make_fillers()
        # multiplier machinery
        self.initialized = False
        self.phi0 = {}
        self.mu = 0.0
        self.gamma = cfg.gamma_base
        self.eta = 0.0
        self.plan = None
        self.alpha = {fk: 1.0 for fk in FieldKind}
        self.theta = {fk: 1.0 for fk in FieldKind}
        # stepper memory
        self.prev_vec = None
        self.prev_dir = None
        self.step = None
        self.step_shrunk = False
        # counters and logs
        self.total_iters = 0
        self.metrics = []
        self.clamp_count = 0
        self.wns_ps = None
        self.tns_ps = None
        self.weight_cap_hits = 0

    # --- setup ---------------------------------------------------------

    def _seed_positions(self):
        w, h = self.device.width, self.device.height
        center = np.array([w / 2.0, h / 2.0])
        jitter = 0.02 * min(w, h)
        for i in np.flatnonzero(self.movable):
            self.pos[i] = center + self.rng.uniform(-jitter, jitter, size=2)
        # column-bound resources start near their provider columns; the
        # long-range field force alone is too shallow to ferry them across
        # the die once the logic fields stiffen
        for fk in (FieldKind.DSP, FieldKind.BRAM):
            cols = self.grids[fk].avail_cols
            members = [i for i in np.flatnonzero(self.movable)
                       if self.netlist.instances[i].demand[fk] > 0]
            if len(cols) and members:
                for i in members:
                    col = cols[self.rng.integers(0, len(cols))]
                    self.pos[i, 0] = col + 0.5 + self.rng.uniform(-0.25, 0.25)
                    self.pos[i, 1] = center[1] + self.rng.uniform(-jitter, jitter)
        if self.chains:
            self.pos = chains_mod.align_chains(
                self.chains, self.pos, weights=self.areas[:, FieldKind.CARRY],
                layout_height=float(h))

    def _make_fillers(self):
        for fk in FieldKind:
            grid = self.grids[fk]
            st = self.fstate[fk]
            if fk not in self.active_fields:
                st.filler_pos = np.zeros((0, 2))
                st.filler_charge = np.zeros(0)
                continue
            free = grid.avail_area - float(np.sum(self.charges(fk))) - self._fixed_charge(fk)
            if -1e-9 < free < 0:
                free = 0.0
            st.filler_pos, st.filler_charge = fl.insert_fillers(grid, free, self.rng)

    def _fixed_charge(self, fk):
        grid = self.grids[fk]
        total = 0.0
        for inst in self.netlist.instances:
            if not self.movable[inst.index] and inst.demand[fk] > 0:
                total += self.areas[inst.index, fk] * grid.unit_area
        return total

    def charges(self, fk):
        grid = self.grids[fk]
        return self.areas[self.members[fk], fk] * grid.unit_area

    # --- movable coordinate vector --------------------------------------

    def gather_vec(self):
        parts = [self.pos[self.movable]]
        for fk in self.active_fields:
            parts.append(self.fstate[fk].filler_pos)
        return np.concatenate(parts, axis=0) if parts else np.zeros((0, 2))

    def scatter_vec(self, vec):
        k = int(self.movable.sum())
        self.pos[self.movable] = vec[:k]
        ofs = k
        for fk in self.active_fields:
            m = len(self.fstate[fk].filler_pos)
            self.fstate[fk].filler_pos = vec[ofs:ofs + m].copy()
            ofs += m

    def gather_grad(self, ev: Eval):
        parts = [ev.grad_inst[self.movable]]
        for fk in self.active_fields:
            parts.append(ev.grad_fill[fk])
        return np.concatenate(parts, axis=0) if parts else np.zeros((0, 2))


def evaluate(state: PlacerState, need_grad=True) -> Eval:
    """Objective value, per-term pieces, and the assembled gradient.

    With need_grad=False this is a value-only forward pass for line
    searches: one combined splat per field, no gradient sampling, no
    overflow bookkeeping.
    """
    cfg = state.cfg
    ev = Eval()
    clamp = 0
    if need_grad:
        ev.wl_value, ev.wl_grad = wl.smooth_wl(state.narrays, state.pos, state.weights, state.gamma)
        ev.pw = wl_preconditioner(state.narrays, state.weights)
        grad_inst = ev.wl_grad.copy()
    else:
        ev.wl_value, _ = wl.smooth_wl(state.narrays, state.pos, state.weights, state.gamma)
        grad_inst = None
    value = ev.wl_value
    for fk in state.active_fields:
        grid = state.grids[fk]
        st = state.fstate[fk]
        members = state.members[fk]
        q_inst = state.charges(fk)
        lam = st.multiplier
        coeff = st.alm_coeff
        if need_grad:
            rho_inst, c1 = fl.accumulate_density(grid, state.pos[members], q_inst)
            rho_fill, c2 = fl.accumulate_density(grid, st.filler_pos, st.filler_charge)
            clamp += c1 + c2
            density = grid.static + rho_inst + rho_fill
            potential, _, energy = fl.solve_field(density, grid.hx, grid.hy, want_force=False)
            st.density = density
            st.density_inst = grid.static + rho_inst
            st.potential = potential
            st.energy = energy
            ev.overflow[fk] = fl.overflow(grid, st.density_inst, float(q_inst.sum()))
            gx_i, gy_i = fl.sample_energy_gradient(grid, potential, state.pos[members], q_inst)
            gx_f, gy_f = fl.sample_energy_gradient(grid, potential, st.filler_pos, st.filler_charge)
            ev.dgrad_inst[fk] = np.stack([gx_i, gy_i], axis=1)
            ev.dgrad_fill[fk] = np.stack([gx_f, gy_f], axis=1)
            scale = lam * (1.0 + coeff * energy)
            np.add.at(grad_inst, members, scale * ev.dgrad_inst[fk])
            ev.grad_fill[fk] = scale * ev.dgrad_fill[fk]
        else:
            pos = np.concatenate([state.pos[members], st.filler_pos], axis=0)
            q = np.concatenate([q_inst, st.filler_charge])
            rho, c1 = fl.accumulate_density(grid, pos, q)
            clamp += c1
            _, _, energy = fl.solve_field(grid.static + rho, grid.hx, grid.hy, want_force=False)
        ev.energy[fk] = energy
        value += lam * (energy + 0.5 * coeff * energy * energy)
    state.clamp_count += clamp
    if state.plan is not None and state.eta > 0:
        ev.clock_value, ev.clock_grad = cp.clock_penalty(state.pos, state.plan, state.movable)
        value += state.eta * ev.clock_value
        if need_grad:
            grad_inst += state.eta * ev.clock_grad
    if need_grad:
        grad_inst[~state.movable] = 0.0
        ev.grad_inst = grad_inst
        if cfg.dynamic_precond:
            _update_alpha(state, ev)
    ev.value = value
    return ev


def _update_alpha(state: PlacerState, ev: Eval):
    density_norms, wl_norms, pw_means = {}, {}, {}
    for fk in state.active_fields:
        members = state.members[fk]
        st = state.fstate[fk]
        scale = 1.0 + st.alm_coeff * st.energy
        density_norms[fk] = float(np.abs(scale * ev.dgrad_inst[fk]).sum())
        wl_norms[fk] = float(np.abs(ev.wl_grad[members]).sum())
        pw_means[fk] = float(ev.pw[members].mean()) if len(members) else 0.0
    alpha, theta = dynamic_alpha(density_norms, wl_norms, pw_means)
    state.alpha.update(alpha)
    state.theta.update(theta)


# --- multiplier schedule -----------------------------------------------


def _grad_norm_wl(state, ev):
    return float(np.abs(ev.wl_grad[state.movable]).sum())


def _grad_norm_density(state, ev, fk):
    st = state.fstate[fk]
    scale = 1.0 + st.alm_coeff * st.energy
    total = float(np.abs(scale * ev.dgrad_inst[fk]).sum())
    total += float(np.abs(scale * ev.dgrad_fill[fk]).sum())
    return total


def init_multipliers(state: PlacerState, ev: Eval):
    cfg = state.cfg
    wln = _grad_norm_wl(state, ev)
    if wln <= TINY:
        wln = 1.0  # netless designs still need density pressure
    lams = []
    for fk in state.active_fields:
        st = state.fstate[fk]
        phi0 = max(ev.energy[fk], TINY)
        state.phi0[fk] = phi0
        st.alm_coeff = cfg.alm_beta / phi0
        dn = _grad_norm_density(state, ev, fk)
        lam = cfg.zeta * wln / dn if dn > TINY else 0.0
        st.multiplier = lam
        lams.append(lam)
    state.mu = float(np.linalg.norm(lams)) if lams else 0.0
    state.initialized = True


def reset_multipliers(state: PlacerState, ev: Eval):
    """Phase change (clock or routability): re-seed multipliers and energy scale."""
    cfg = state.cfg
    wln = max(_grad_norm_wl(state, ev), TINY)
    lams = []
    for fk in state.active_fields:
        st = state.fstate[fk]
        phi0 = max(ev.energy[fk], TINY)
        state.phi0[fk] = phi0
        st.alm_coeff = cfg.alm_beta / phi0
        dn = _grad_norm_density(state, ev, fk)
        if dn > TINY:
            st.multiplier = cfg.zeta_reset * wln / dn
        else:
            log.warning("field %s: zero density gradient at reset, multiplier kept", fk.name)
        lams.append(st.multiplier)
    state.mu = float(np.linalg.norm(lams)) if lams else 0.0
    state.prev_vec = None
    state.prev_dir = None
    state.step = None


def update_multipliers(state: PlacerState, ev: Eval):
    """Normalized subgradient ascent with multiplicative step growth."""
    cfg = state.cfg
    if not state.active_fields:
        return
    phihat = np.array([ev.energy[fk] / state.phi0[fk] for fk in state.active_fields])
    sub = phihat + 0.5 * cfg.alm_beta * phihat ** 2
    norm = float(np.linalg.norm(sub))
    if norm <= TINY:
        return
    for fk, s in zip(state.active_fields, sub):
        st = state.fstate[fk]
        cap = cfg.lambda_cap / max(state.theta.get(fk, 1.0), 1.0)
        st.multiplier = min(st.multiplier + state.mu * s / norm, max(st.multiplier, cap))
    m = max(0.0, math.log(cfg.mu_tau * float(np.linalg.norm(phihat))))
    state.mu *= cfg.mu_lo + (cfg.mu_hi - cfg.mu_lo) * m / (m + 1.0)


# --- stepping -----------------------------------------------------------


def _direction(state: PlacerState, ev: Eval):
    """Preconditioned, chain-averaged descent direction in vector layout."""
    lam_alpha = np.zeros(len(state.netlist.instances))
    for fk in state.active_fields:
        st = state.fstate[fk]
        lam_alpha += state.alpha[fk] * st.multiplier * state.areas[:, fk] * state.grids[fk].unit_area
    inst_dir, _ = precondition(ev.grad_inst, ev.pw, lam_alpha)
    if state.cfg.chain_align and state.chains:
        inst_dir = chains_mod.average_chain_gradients(state.chains, inst_dir)
    inst_dir[~state.movable] = 0.0
    parts = [inst_dir[state.movable]]
    for fk in state.active_fields:
        st = state.fstate[fk]
        qa = st.filler_charge
        fill_dir, _ = precondition(ev.grad_fill[fk], np.zeros(len(qa)),
                                   state.alpha[fk] * st.multiplier * qa)
        parts.append(fill_dir)
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, 2))


def _initial_step(state: PlacerState, direction):
    grid = state.grids[FieldKind.LUTL]
    bin_size = min(grid.hx, grid.hy)
    dmax = float(np.abs(direction).max(initial=0.0))
    return state.cfg.step_init_frac * bin_size / max(dmax, TINY)


def run_l5(state: PlacerState, ev: Eval, iters=None) -> Eval:
    """Fixed number of preconditioned gradient steps with a monotone guard.

    Line-search trials are value-only forward passes compared against the
    current point under the same multipliers. Returns the accepted trial's
    evaluation (its energies feed the multiplier update).
    """
    cfg = state.cfg
    iters = cfg.l5_iters if iters is None else iters
    grid = state.grids[FieldKind.LUTL]
    bin_size = min(grid.hx, grid.hy)
    accepted = ev
    for k in range(iters):
        if k > 0:
            ev = evaluate(state)
        direction = _direction(state, ev)
        if not len(direction):
            return ev
        vec = state.gather_vec()
        dmax = float(np.abs(direction).max(initial=0.0))
        if dmax <= TINY:
            return ev
        # trust window in units of dominant-coordinate displacement: never
        # freeze below min_disp_bins, never jump past max_disp_bins
        lo = cfg.min_disp_bins * bin_size / dmax
        hi = cfg.max_disp_bins * bin_size / dmax
        if state.prev_vec is not None and state.step is not None:
            s = vec - state.prev_vec
            y = direction - state.prev_dir
            sy = float(np.sum(s * y))
            step = float(np.sum(s * s)) / sy if sy > TINY else _initial_step(state, direction)
        else:
            step = _initial_step(state, direction)
        step = float(np.clip(step, lo, hi))
        state.prev_vec = vec
        state.prev_dir = direction

        f0 = ev.value
        tol = 1e-9 * abs(f0) + 1e-12
        state.step_shrunk = False
        trial_ev = None
        for _ in range(cfg.backtrack_max + 1):
            trial = vec - step * direction
            state.scatter_vec(trial)
            if cfg.chain_align and state.chains and cfg.chain_align_every > 0:
                state.pos = chains_mod.align_chains(
                    state.chains, state.pos, weights=state.areas[:, FieldKind.CARRY],
                    layout_height=float(state.device.height))
            trial_ev = evaluate(state, need_grad=False)
            if not np.isfinite(trial_ev.value):
                err = FloatingPointError("objective diverged to a non-finite value")
                err.snapshot = vec  # last finite positions
                raise err
            if trial_ev.value <= f0 + tol or step <= lo:
                break
            step = max(step * 0.5, lo)
            state.step_shrunk = True
        state.step = step
        accepted = trial_ev
        state.total_iters += 1
    return accepted


# --- routability hook ----------------------------------------------------


def pin_density_grid(state: PlacerState):
    grid = state.grids[FieldKind.LUTL]
    counts = np.zeros((grid.nx, grid.ny))
    pins = state.narrays.pin_positions(state.pos)
    if len(pins):
        cx = np.clip((pins[:, 0] / grid.hx).astype(int), 0, grid.nx - 1)
        cy = np.clip((pins[:, 1] / grid.hy).astype(int), 0, grid.ny - 1)
        np.add.at(counts, (cx, cy), 1.0)
    return counts / grid.bin_area


def inflate_areas(state: PlacerState, proxy=None):
    """Grow instance areas where pin density runs hot, capacity permitting."""
    grid = state.grids[FieldKind.LUTL]
    if proxy is None:
        proxy = pin_density_grid(state)
    mean = float(proxy.mean())
    if mean <= TINY:
        return np.ones(len(state.netlist.instances))
    target = state.cfg.pin_density_target * mean
    cx = np.clip((state.pos[:, 0] / grid.hx).astype(int), 0, grid.nx - 1)
    cy = np.clip((state.pos[:, 1] / grid.hy).astype(int), 0, grid.ny - 1)
    factor = np.clip(proxy[cx, cy] / target, 1.0, 2.0)
    factor[~state.movable] = 1.0
    new_areas = state.areas * factor[:, None]
    # scale growth back per field when it would exceed the free capacity
    for fk in state.active_fields:
        g = state.grids[fk]
        members = state.members[fk]
        if not len(members):
            continue
        budget = g.avail_area - state._fixed_charge(fk)
        grown = float(np.sum(new_areas[members, fk])) * g.unit_area
        base = float(np.sum(state.areas[members, fk])) * g.unit_area
        if grown > budget and grown > base:
            shrink = max(0.0, (budget * 0.999 - base) / (grown - base))
            new_areas[members, fk] = (state.areas[members, fk]
                                      + shrink * (new_areas[members, fk] - state.areas[members, fk]))
    state.areas = new_areas
    for inst in state.netlist.instances:
        inst.area = state.areas[inst.index].copy()
    state._make_fillers()
    return factor


# --- timing glue ----------------------------------------------------------


def run_sta(state: PlacerState):
    cfg = state.cfg.timing_config()
    graph = tm.build_timing_graph(state.netlist, state.pos, cfg)
    result = tm.propagate(graph)
    wns, tns = tm.wns_tns(result)
    state.wns_ps = wns / tm.FS_PER_PS
    state.tns_ps = tns / tm.FS_PER_PS
    return graph, result


def reweight_nets(state: PlacerState, graph, result):
    slacks = tm.net_slacks(graph, result, len(state.netlist.nets))
    wns_fs = round((state.wns_ps or 0.0) * tm.FS_PER_PS)
    crit = tm.net_criticality(slacks, wns_fs, state.cfg.timing_config().period_fs)
    state.weights, capped = tm.reweight(state.weights, crit, state.cfg.timing_alpha,
                                        state.cfg.weight_cap)
    state.weight_cap_hits += capped
    for net, w in zip(state.netlist.nets, state.weights):
        net.weight = float(w)
    return crit


# --- outer loops ------------------------------------------------------------


@dataclass
class PlaceResult:
    positions: np.ndarray
    converged: bool
    metrics: list
    hpwl: float
    wns_ps: float | None
    tns_ps: float | None
    plan: object
    state: PlacerState
    sta_report: dict | None = None


def _emit_metrics(state: PlacerState, ev: Eval, stage):
    state.metrics.append({
        "iter": state.total_iters,
        "stage": stage,
        "hpwl": wl.hpwl(state.narrays, state.pos),
        "overflow": {fk.name: ev.overflow.get(fk, 0.0) for fk in FieldKind},
        "wns": state.wns_ps,
        "tns": state.tns_ps,
        "eta": state.eta,
        "lambda": {fk.name: state.fstate[fk].multiplier for fk in FieldKind},
        "gamma": state.gamma,
    })


def _l4_converged(state: PlacerState, ev: Eval):
    return all(ev.overflow[fk] <= state.cfg.overflow_threshold(fk)
               for fk in state.active_fields)


def _run_l4(state: PlacerState, min_iters=0):
    """Grow density pressure until every active field's overflow drains.

    Each pass re-evaluates under the multipliers set at the end of the
    previous pass so the step's line search compares consistent values.
    """
    cfg = state.cfg
    done = 0
    while True:
        ev = evaluate(state)
        if not state.initialized:
            init_multipliers(state, ev)
        _emit_metrics(state, ev, "L4")
        if done >= min_iters and _l4_converged(state, ev):
            return ev, True
        if state.total_iters >= cfg.max_l5_total:
            return ev, _l4_converged(state, ev)
        accepted = run_l5(state, ev)
        done += cfg.l5_iters
        update_multipliers(state, accepted)
        # smoothing tracks the logic fabric; sparse special fields would pin
        # the schedule coarse while they migrate to their columns
        logic = [ev.overflow[fk] for fk in state.active_fields if fk in LUT_FF_FIELDS]
        worst = max(logic) if logic else max(
            (ev.overflow[fk] for fk in state.active_fields), default=0.0)
        state.gamma = wl.gamma_schedule(worst, cfg.gamma_base, cfg.gamma_k,
                                        cfg.gamma_lo, cfg.gamma_hi)


def run_nested(netlist: Netlist, device: Device, cfg: EngineConfig | None = None) -> PlaceResult:
    """Full nested optimization; returns best-so-far with a convergence flag."""
    cfg = cfg or EngineConfig()
    state = PlacerState(netlist, device, cfg)
    if not len(netlist.instances) or not state.movable.any():
        return PlaceResult(state.pos, True, [], wl.hpwl(state.narrays, state.pos),
                           None, None, None, state)
    run_sta(state)
    converged = True
    tns_history = []
    last_ev = None
    l1_rounds = cfg.l1_rounds if cfg.timing_enabled else 1
    for l1 in range(l1_rounds):
        l4_floor = cfg.l4_min_iters if l1 > 0 else 0
        for l2 in range(max(cfg.l2_rounds, 1)):
            for l3 in range(cfg.l3_rounds + 1):
                last_ev, ok = _run_l4(state, min_iters=l4_floor)
                l4_floor = 0
                if not ok:
                    converged = False
                    break
                if l3 >= cfg.l3_rounds:
                    break
                proxy = pin_density_grid(state)
                if proxy.max(initial=0.0) <= cfg.pin_density_target * max(proxy.mean(), TINY):
                    break
                inflate_areas(state, proxy)
                reset_multipliers(state, evaluate(state))
            if not converged:
                break
            demand = cp.clock_demand(netlist, state.pos, device)
            if demand.max(initial=0) <= device.cr_limit or l2 == max(cfg.l2_rounds, 1) - 1:
                break
            state.plan = cp.plan_mapping(netlist, state.pos, device)
            ev = evaluate(state)
            _, cgrad = cp.clock_penalty(state.pos, state.plan, state.movable)
            state.eta = cp.update_eta(_grad_norm_wl(state, ev),
                                      float(np.abs(cgrad).sum()),
                                      cfg.iota, cfg.eps_clock)
            state.plan.eta = state.eta
            reset_multipliers(state, ev)
        if not converged:
            break
        graph, result = run_sta(state)
        _emit_metrics(state, last_ev, "L1")
        tns_history.append(state.tns_ps)
        if not cfg.timing_enabled or l1 == l1_rounds - 1:
            break
        if len(tns_history) > cfg.l1_window:
            old = tns_history[-1 - cfg.l1_window]
            now = tns_history[-1]
            improvement = (now - old) / abs(old) if old < 0 else 0.0
            if improvement < cfg.l1_improve_tol:
                break
        if state.tns_ps is not None and state.tns_ps >= 0 and state.wns_ps >= 0:
            break
        reweight_nets(state, graph, result)
    graph, result = run_sta(state)
    report = tm.timing_report(graph, result)
    return PlaceResult(
        positions=state.pos.copy(),
        converged=converged,
        metrics=state.metrics,
        hpwl=wl.hpwl(state.narrays, state.pos),
        wns_ps=state.wns_ps,
        tns_ps=state.tns_ps,
        plan=state.plan,
        state=state,
        sta_report=report,
    )
