"""Device and netlist data model, text parsers, and synthetic design generation."""

from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass, field

import numpy as np


class SiteKind(enum.Enum):
    SLICEL = "SLICEL"
    SLICEM = "SLICEM"
    DSPCOL = "DSPCOL"
    BRAMCOL = "BRAMCOL"
    IOCOL = "IOCOL"


class FieldKind(enum.IntEnum):
    """Resource field types. LUTM_AL covers the extra SLICEM-only logic modes."""

    LUTL = 0
    LUTM_AL = 1
    FF = 2
    CARRY = 3
    DSP = 4
    BRAM = 5


NUM_FIELDS = len(FieldKind)

FIELD_NAMES = [f.name for f in FieldKind]


class InstKind(enum.Enum):
    LUT = "LUT"
    FF = "FF"
    DSP = "DSP"
    BRAM = "BRAM"
    DRAM = "DRAM"
    SHIFT = "SHIFT"
    CARRY = "CARRY"
    IO = "IO"


# Per-site resource units by site kind, overridable by `cap` lines in the
# device file. Order follows FieldKind.
DEFAULT_SITE_CAPS = {
    SiteKind.SLICEL: np.array([8.0, 0.0, 16.0, 1.0, 0.0, 0.0]),
    SiteKind.SLICEM: np.array([8.0, 8.0, 16.0, 1.0, 0.0, 0.0]),
    SiteKind.DSPCOL: np.array([0.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
    SiteKind.BRAMCOL: np.array([0.0, 0.0, 0.0, 0.0, 0.0, 1.0]),
    SiteKind.IOCOL: np.zeros(6),
}


class ParseError(ValueError):
    """Malformed input file; carries the offending 1-based line number."""

    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class BoundsError(ValueError):
    pass


class InfeasibleError(RuntimeError):
    """Design demand cannot fit the device (or a sub-problem has no solution)."""


def demand_for_kind(kind: InstKind) -> np.ndarray:
    """Resource demand vector of one instance of the given kind.

    LUTs use plain LUT fabric only; distributed RAM and SHIFT additionally
    consume the SLICEM-only mode resource, so they demand both LUTL and
    LUTM_AL units. IO pads demand nothing.
    """
    d = np.zeros(NUM_FIELDS)
    if kind == InstKind.LUT:
        d[FieldKind.LUTL] = 1.0
    elif kind in (InstKind.DRAM, InstKind.SHIFT):
        d[FieldKind.LUTL] = 1.0
        d[FieldKind.LUTM_AL] = 1.0
    elif kind == InstKind.FF:
        d[FieldKind.FF] = 1.0
    elif kind == InstKind.CARRY:
        d[FieldKind.CARRY] = 1.0
    elif kind == InstKind.DSP:
        d[FieldKind.DSP] = 1.0
    elif kind == InstKind.BRAM:
        d[FieldKind.BRAM] = 1.0
    return d


@dataclass
class Device:
    """Site grid with clock regions and half columns.

    Columns are uniform: every site in column x has kind col_kinds[x].
    Clock region boundaries partition the grid; a half column is two site
    columns wide and half a clock-region tall.
    """

    width: int
    height: int
    cr_rows: int
    cr_cols: int
    cr_limit: int = 24
    hc_limit: int = 12
    col_kinds: list = field(default_factory=list)
    site_caps: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.col_kinds:
            self.col_kinds = [SiteKind.SLICEL] * self.width
        if not self.site_caps:
            self.site_caps = {k: v.copy() for k, v in DEFAULT_SITE_CAPS.items()}
        self._cr_xbounds = [(j * self.width) // self.cr_cols for j in range(self.cr_cols)] + [self.width]
        self._cr_ybounds = [(i * self.height) // self.cr_rows for i in range(self.cr_rows)] + [self.height]

    # --- geometry -----------------------------------------------------

    @property
    def num_regions(self):
        return self.cr_rows * self.cr_cols

    def region_index(self, row, col):
        return row * self.cr_cols + col

    def region_of(self, x, y):
        """Clock region (row, col) containing the continuous point (x, y)."""
        col = bisect.bisect_right(self._cr_xbounds, x) - 1
        row = bisect.bisect_right(self._cr_ybounds, y) - 1
        col = min(max(col, 0), self.cr_cols - 1)
        row = min(max(row, 0), self.cr_rows - 1)
        return row, col

    def region_bounds(self, row, col):
        """(x0, x1, y0, y1) of a clock region in site units."""
        return (
            float(self._cr_xbounds[col]),
            float(self._cr_xbounds[col + 1]),
            float(self._cr_ybounds[row]),
            float(self._cr_ybounds[row + 1]),
        )

    def half_column_of(self, x, y):
        """Half-column key (pair of site columns, half-region row band)."""
        row, _ = self.region_of(x, y)
        y0 = self._cr_ybounds[row]
        y1 = self._cr_ybounds[row + 1]
        mid = (y0 + y1) / 2.0
        band = 2 * row + (0 if y < mid else 1)
        return int(x) // 2, band

    def col_cap(self, x):
        return self.site_caps[self.col_kinds[x]]

    def region_capacity(self, row, col):
        """Per-field resource units provided by all sites of one region."""
        x0, x1, y0, y1 = self.region_bounds(row, col)
        cap = np.zeros(NUM_FIELDS)
        for x in range(int(x0), int(x1)):
            cap += self.col_cap(x)
        return cap * (y1 - y0)

    def total_capacity(self):
        cap = np.zeros(NUM_FIELDS)
        for x in range(self.width):
            cap += self.col_cap(x)
        return cap * self.height

    def columns_for_field(self, fk):
        """Site columns providing resource units for the given field."""
        return [x for x in range(self.width) if self.col_cap(x)[fk] > 0]


@dataclass
class Instance:
    name: str
    kind: InstKind
    index: int
    demand: np.ndarray
    area: np.ndarray            # inflated demand, same units as demand
    x: float = 0.0
    y: float = 0.0
    fixed: bool = False
    chain_id: int | None = None
    chain_index: int | None = None
    pins: list = field(default_factory=list)   # (net_index, off_x, off_y)


@dataclass
class Net:
    name: str
    index: int
    pins: list                  # (inst_index, off_x, off_y), pin 0 drives
    is_clock: bool = False
    weight: float = 1.0


class Netlist:
    """Instances, nets, and carry-chain groups of one design."""

    def __init__(self, instances, nets, chains=None):
        self.instances = instances
        self.nets = nets
        # chain id -> member instance indices in cascade order (low bit first)
        self.chains = chains or {}
        self._by_name = {inst.name: inst for inst in instances}

    def __len__(self):
        return len(self.instances)

    def instance(self, name):
        return self._by_name[name]

    def total_demand(self):
        if not self.instances:
            return np.zeros(NUM_FIELDS)
        return np.sum([inst.demand for inst in self.instances], axis=0)

    def positions(self):
        return np.array([[inst.x, inst.y] for inst in self.instances], dtype=float).reshape(len(self.instances), 2)

    def set_positions(self, pos):
        for inst, (x, y) in zip(self.instances, pos):
            inst.x = float(x)
            inst.y = float(y)

    def movable_mask(self):
        return np.array([not inst.fixed for inst in self.instances], dtype=bool)


# --- parsing ------------------------------------------------------------


def _tokens(text):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line.split()


def parse_device(text) -> Device:
    """Parse the line-oriented device description.

    Format:
        device W H CRrows CRcols crLimit hcLimit
        col <x> <sitekind>            one per site column
        cap <sitekind> <lutl> <lutm_al> <ff> <carry> <dsp> <bram>
    """
    header = None
    col_kinds = None
    site_caps = {k: v.copy() for k, v in DEFAULT_SITE_CAPS.items()}
    for lineno, toks in _tokens(text):
        tag = toks[0]
        if tag == "device":
            if len(toks) != 7:
                raise ParseError(lineno, "device header needs 6 values")
            try:
                w, h, crr, crc, crl, hcl = (int(t) for t in toks[1:])
            except ValueError:
                raise ParseError(lineno, "device header values must be integers")
            if w <= 0 or h <= 0 or crr <= 0 or crc <= 0:
                raise ParseError(lineno, "device dimensions must be positive")
            header = (w, h, crr, crc, crl, hcl)
            col_kinds = [SiteKind.SLICEL] * w
        elif tag == "col":
            if header is None:
                raise ParseError(lineno, "col before device header")
            if len(toks) != 3:
                raise ParseError(lineno, "col needs <x> <kind>")
            try:
                x = int(toks[1])
            except ValueError:
                raise ParseError(lineno, f"bad column index {toks[1]!r}")
            if not 0 <= x < header[0]:
                raise BoundsError(f"line {lineno}: column {x} outside grid width {header[0]}")
            try:
                col_kinds[x] = SiteKind(toks[2])
            except ValueError:
                raise ParseError(lineno, f"unknown site kind {toks[2]!r}")
        elif tag == "cap":
            if len(toks) != 2 + NUM_FIELDS:
                raise ParseError(lineno, f"cap needs <kind> and {NUM_FIELDS} unit counts")
            try:
                kind = SiteKind(toks[1])
            except ValueError:
                raise ParseError(lineno, f"unknown site kind {toks[1]!r}")
            try:
                site_caps[kind] = np.array([float(t) for t in toks[2:]])
            except ValueError:
                raise ParseError(lineno, "cap unit counts must be numbers")
        else:
            raise ParseError(lineno, f"unknown directive {tag!r}")
    if header is None:
        raise ParseError(0, "missing device header")
    w, h, crr, crc, crl, hcl = header
    return Device(w, h, crr, crc, crl, hcl, col_kinds, site_caps)


def serialize_device(dev: Device) -> str:
    lines = [f"device {dev.width} {dev.height} {dev.cr_rows} {dev.cr_cols} {dev.cr_limit} {dev.hc_limit}"]
    for x, kind in enumerate(dev.col_kinds):
        lines.append(f"col {x} {kind.value}")
    for kind in SiteKind:
        caps = dev.site_caps[kind]
        lines.append("cap " + kind.value + " " + " ".join(f"{c:g}" for c in caps))
    return "\n".join(lines) + "\n"


def parse_netlist(text, device: Device) -> Netlist:
    """Parse the line-oriented netlist.

    Format:
        inst <name> <kind> [chain <id> <idx>]
        net <name> [clock] <inst:offx:offy>...
        fix <name> <x> <y>

    IO instances are fixed as soon as they are declared; a later fix line
    sets their pad location.
    """
    instances = []
    nets = []
    by_name = {}
    chain_members = {}
    for lineno, toks in _tokens(text):
        tag = toks[0]
        if tag == "inst":
            if len(toks) not in (3, 6):
                raise ParseError(lineno, "inst needs <name> <kind> [chain <id> <idx>]")
            name = toks[1]
            if name in by_name:
                raise ParseError(lineno, f"duplicate instance {name!r}")
            try:
                kind = InstKind(toks[2])
            except ValueError:
                raise ParseError(lineno, f"unknown instance kind {toks[2]!r}")
            chain_id = chain_idx = None
            if len(toks) == 6:
                if toks[3] != "chain" or kind != InstKind.CARRY:
                    raise ParseError(lineno, "chain membership only applies to CARRY instances")
                try:
                    chain_id, chain_idx = int(toks[4]), int(toks[5])
                except ValueError:
                    raise ParseError(lineno, "chain id/index must be integers")
            demand = demand_for_kind(kind)
            inst = Instance(
                name=name, kind=kind, index=len(instances),
                demand=demand, area=demand.copy(),
                fixed=(kind == InstKind.IO),
                chain_id=chain_id, chain_index=chain_idx,
            )
            instances.append(inst)
            by_name[name] = inst
            if chain_id is not None:
                chain_members.setdefault(chain_id, []).append((chain_idx, inst.index))
        elif tag == "net":
            if len(toks) < 2:
                raise ParseError(lineno, "net needs a name")
            name = toks[1]
            rest = toks[2:]
            is_clock = False
            if rest and rest[0] == "clock":
                is_clock = True
                rest = rest[1:]
            pins = []
            for tok in rest:
                parts = tok.split(":")
                if len(parts) != 3:
                    raise ParseError(lineno, f"bad pin {tok!r}, want inst:offx:offy")
                iname = parts[0]
                if iname not in by_name:
                    raise ParseError(lineno, f"pin references unknown instance {iname!r}")
                try:
                    ox, oy = float(parts[1]), float(parts[2])
                except ValueError:
                    raise ParseError(lineno, f"bad pin offsets in {tok!r}")
                pins.append((by_name[iname].index, ox, oy))
            nets.append(Net(name=name, index=len(nets), pins=pins, is_clock=is_clock))
        elif tag == "fix":
            if len(toks) != 4:
                raise ParseError(lineno, "fix needs <name> <x> <y>")
            if toks[1] not in by_name:
                raise ParseError(lineno, f"fix references unknown instance {toks[1]!r}")
            inst = by_name[toks[1]]
            try:
                inst.x, inst.y = float(toks[2]), float(toks[3])
            except ValueError:
                raise ParseError(lineno, "fix coordinates must be numbers")
            inst.fixed = True
        else:
            raise ParseError(lineno, f"unknown directive {tag!r}")

    chains = {}
    for cid, members in sorted(chain_members.items()):
        members.sort()
        idxs = [m[0] for m in members]
        if idxs != list(range(len(idxs))):
            raise ParseError(0, f"chain {cid} indices not consecutive from 0: {idxs}")
        chains[cid] = [m[1] for m in members]

    netlist = Netlist(instances, nets, chains)
    for net in nets:
        for inst_idx, ox, oy in net.pins:
            instances[inst_idx].pins.append((net.index, ox, oy))
    return netlist


def serialize_netlist(netlist: Netlist) -> str:
    lines = []
    for inst in netlist.instances:
        if inst.chain_id is not None:
            lines.append(f"inst {inst.name} {inst.kind.value} chain {inst.chain_id} {inst.chain_index}")
        else:
            lines.append(f"inst {inst.name} {inst.kind.value}")
    for net in netlist.nets:
        pins = " ".join(
            f"{netlist.instances[i].name}:{ox:g}:{oy:g}" for i, ox, oy in net.pins
        )
        clock = "clock " if net.is_clock else ""
        lines.append(f"net {net.name} {clock}{pins}".rstrip())
    for inst in netlist.instances:
        if inst.fixed:
            lines.append(f"fix {inst.name} {inst.x:g} {inst.y:g}")
    return "\n".join(lines) + "\n"


# --- synthetic generation -------------------------------------------------


@dataclass
class GenSpec:
    """Knobs for synthetic benchmark generation."""

    width: int = 40
    height: int = 40
    cr_rows: int = 2
    cr_cols: int = 2
    cr_limit: int = 24
    hc_limit: int = 12
    slicem_every: int = 4       # every n-th logic column is a SLICEM
    dsp_cols: int = 1
    bram_cols: int = 1
    luts: int = 100
    ffs: int = 100
    dsps: int = 4
    brams: int = 4
    drams: int = 0
    shifts: int = 0
    carry_chains: int = 0
    chain_len: int = 4
    ios: int = 8
    nets: int = 150
    degree_min: int = 2
    degree_max: int = 6
    clocks: int = 1

    @classmethod
    def from_text(cls, text):
        spec = cls()
        for lineno, toks in _tokens(text):
            if len(toks) == 1 and "=" in toks[0]:
                key, val = toks[0].split("=", 1)
            elif len(toks) == 2:
                key, val = toks
            else:
                raise ParseError(lineno, "want key=value")
            if not hasattr(spec, key):
                raise ParseError(lineno, f"unknown generator key {key!r}")
            setattr(spec, key, int(val))
        return spec


def _build_device(spec: GenSpec) -> Device:
    cols = [SiteKind.SLICEL] * spec.width
    if spec.ios > 0:
        cols[0] = SiteKind.IOCOL
        cols[-1] = SiteKind.IOCOL
    logic = [x for x in range(spec.width) if cols[x] == SiteKind.SLICEL]
    special = []
    step = max(1, len(logic) // (spec.dsp_cols + spec.bram_cols + 1)) if (spec.dsp_cols + spec.bram_cols) else 0
    for i in range(spec.dsp_cols):
        special.append((logic[(i + 1) * step % len(logic)], SiteKind.DSPCOL))
    for i in range(spec.bram_cols):
        special.append((logic[(spec.dsp_cols + i + 1) * step % len(logic)], SiteKind.BRAMCOL))
    for x, kind in special:
        cols[x] = kind
    if spec.slicem_every > 0:
        count = 0
        for x in range(spec.width):
            if cols[x] == SiteKind.SLICEL:
                count += 1
                if count % spec.slicem_every == 0:
                    cols[x] = SiteKind.SLICEM
    return Device(spec.width, spec.height, spec.cr_rows, spec.cr_cols,
                  spec.cr_limit, spec.hc_limit, cols)


def generate_synthetic(spec: GenSpec, seed: int):
    """Deterministically generate a (Device, Netlist) pair from a spec.

    Raises InfeasibleError when the per-field demand exceeds the device
    capacity.
    """
    rng = np.random.default_rng(seed)
    device = _build_device(spec)

    instances = []
    chains = {}

    def add(name, kind, chain_id=None, chain_index=None):
        demand = demand_for_kind(kind)
        inst = Instance(name=name, kind=kind, index=len(instances),
                        demand=demand, area=demand.copy(),
                        fixed=(kind == InstKind.IO),
                        chain_id=chain_id, chain_index=chain_index)
        instances.append(inst)
        return inst

    for i in range(spec.luts):
        add(f"l{i}", InstKind.LUT)
    for i in range(spec.ffs):
        add(f"f{i}", InstKind.FF)
    for i in range(spec.dsps):
        add(f"d{i}", InstKind.DSP)
    for i in range(spec.brams):
        add(f"b{i}", InstKind.BRAM)
    for i in range(spec.drams):
        add(f"m{i}", InstKind.DRAM)
    for i in range(spec.shifts):
        add(f"s{i}", InstKind.SHIFT)
    for c in range(spec.carry_chains):
        members = []
        for k in range(spec.chain_len):
            inst = add(f"cc{c}_{k}", InstKind.CARRY, chain_id=c, chain_index=k)
            members.append(inst.index)
        chains[c] = members
    io_insts = []
    io_cols = [x for x in range(spec.width) if device.col_kinds[x] == SiteKind.IOCOL] or [0]
    for i in range(spec.ios):
        inst = add(f"io{i}", InstKind.IO)
        inst.x = float(io_cols[i % len(io_cols)]) + 0.5
        inst.y = float(rng.integers(0, spec.height)) + 0.5
        io_insts.append(inst)

    netlist = Netlist(instances, [], chains)
    demand = netlist.total_demand()
    cap = device.total_capacity()
    for fk in FieldKind:
        if demand[fk] > cap[fk]:
            raise InfeasibleError(
                f"demand {demand[fk]:g} exceeds capacity {cap[fk]:g} for field {fk.name}")

    nets = []
    n_inst = len(instances)
    placeable = [i.index for i in instances]
    # acyclic data paths: combinational edges only go up a fixed random rank,
    # so the lowest-ranked pin of each net drives it
    rank = rng.permutation(n_inst)
    for n in range(spec.nets):
        deg = int(rng.integers(spec.degree_min, spec.degree_max + 1))
        deg = min(deg, n_inst)
        if deg < 2:
            continue
        picks = rng.choice(placeable, size=deg, replace=False)
        picks = sorted((int(p) for p in picks), key=lambda p: rank[p])
        pins = [(p, 0.0, 0.0) for p in picks]
        nets.append(Net(name=f"n{n}", index=len(nets), pins=pins))

    ff_ids = [i.index for i in instances if i.kind == InstKind.FF]
    if spec.clocks > 0 and ff_ids:
        domains = [[] for _ in range(spec.clocks)]
        for k, ff in enumerate(ff_ids):
            domains[k % spec.clocks].append(ff)
        for c, dom in enumerate(domains):
            if not dom:
                continue
            pins = []
            if io_insts:
                pins.append((io_insts[c % len(io_insts)].index, 0.0, 0.0))
            pins.extend((ff, 0.0, 0.0) for ff in dom)
            if len(pins) >= 2:
                nets.append(Net(name=f"clk{c}", index=len(nets), pins=pins, is_clock=True))

    netlist.nets = nets
    for net in nets:
        for inst_idx, ox, oy in net.pins:
            instances[inst_idx].pins.append((net.index, ox, oy))
    return device, netlist
