"""Per-resource electrostatic density engine.

Every resource field gets its own charge system over the die. Site columns
that do not provide the resource are pre-filled with static charge, movable
instances splat their footprint area onto the bin grid, and fillers absorb
unused capacity so only genuine crowding raises the potential energy. The
potential solves a Poisson problem with Neumann boundaries on the bin grid;
minimizing the resulting energy spreads the instances.

Density grids are normalized: 1.0 means a bin is exactly as full as its own
area allows. Charges are measured in site-area units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dctn, idctn

from .arch import Device, FieldKind, InfeasibleError, NUM_FIELDS


@dataclass
class FieldGrid:
    """Immutable per-field bin geometry and static occupancy."""

    kind: FieldKind
    nx: int
    ny: int
    width: float
    height: float
    hx: float
    hy: float
    bin_area: float
    static: np.ndarray          # (nx, ny) normalized pre-occupied density
    avail_area: float           # total site area providing this resource
    unit_area: float            # site area consumed by one demand unit
    avail_cols: np.ndarray      # site columns providing the resource


@dataclass
class FieldState:
    """Mutable per-iteration field data."""

    grid: FieldGrid
    density: np.ndarray | None = None       # static + instances + fillers
    density_inst: np.ndarray | None = None  # static + instances only
    potential: np.ndarray | None = None
    force_x: np.ndarray | None = None
    force_y: np.ndarray | None = None
    energy: float = 0.0
    multiplier: float = 0.0                 # density multiplier
    alm_coeff: float = 0.0                  # quadratic penalty coefficient
    filler_pos: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    filler_charge: np.ndarray = field(default_factory=lambda: np.zeros(0))
    clamped: int = 0                        # out-of-layout splat diagnostics


def default_bins(n_instances, minimum=32):
    """Nearest power of two at or above sqrt(#instances), floored at 32."""
    n = max(minimum, int(np.ceil(np.sqrt(max(n_instances, 1)))))
    return 1 << int(np.ceil(np.log2(n)))


def make_field_grids(device: Device, nbins=None, n_instances=0):
    """Build one FieldGrid per resource kind for the given device."""
    if nbins is None:
        nbins = default_bins(n_instances)
    if np.isscalar(nbins):
        nx = ny = int(nbins)
    else:
        nx, ny = (int(v) for v in nbins)
    w, h = float(device.width), float(device.height)
    hx, hy = w / nx, h / ny
    caps = np.array([device.col_cap(x) for x in range(device.width)])  # (W, 6)
    grids = {}
    for fk in FieldKind:
        avail = caps[:, fk] > 0
        # fraction of each bin column covered by providing site columns
        frac = np.zeros(nx)
        for c in np.flatnonzero(avail):
            b0 = int(c // hx)
            b1 = min(int((c + 1) / hx - 1e-12), nx - 1)
            for b in range(b0, b1 + 1):
                frac[b] += max(0.0, min(c + 1.0, (b + 1) * hx) - max(float(c), b * hx))
        frac /= hx
        static = np.repeat((1.0 - frac)[:, None], ny, axis=1)
        avail_area = float(avail.sum()) * h
        total_units = float(caps[avail, fk].sum()) * h
        unit_area = avail_area / total_units if total_units > 0 else 0.0
        grids[fk] = FieldGrid(
            kind=fk, nx=nx, ny=ny, width=w, height=h, hx=hx, hy=hy,
            bin_area=hx * hy, static=static, avail_area=avail_area,
            unit_area=unit_area, avail_cols=np.flatnonzero(avail),
        )
    return grids


def _clamp_centers(grid, pos, sizes):
    """Keep every footprint fully inside the die; report how many moved."""
    lo = sizes / 2.0
    hi = np.array([grid.width, grid.height]) - sizes / 2.0
    hi = np.maximum(hi, lo)  # footprints wider than the die sit centered
    clamped = np.minimum(np.maximum(pos, lo), hi)
    moved = int(np.any(np.abs(clamped - pos) > 1e-12, axis=1).sum())
    return clamped, moved


def _axis_overlaps(edge_lo, edge_hi, h, nbins):
    """Per-particle bin spans and overlap lengths along one axis.

    Returns the first covered bin, the per-offset bin indices and overlap
    lengths (list over span offsets), ready for outer-product splatting.
    """
    b0 = np.floor(edge_lo / h).astype(np.int64)
    np.minimum(b0, nbins - 1, out=b0)
    np.maximum(b0, 0, out=b0)
    b1 = np.floor(edge_hi / h - 1e-12).astype(np.int64)
    np.minimum(b1, nbins - 1, out=b1)
    np.maximum(b1, b0, out=b1)
    span = int((b1 - b0).max()) + 1 if len(b0) else 0
    cols, lens = [], []
    for k in range(span):
        b = b0 + k
        ok = b <= b1
        bc = np.minimum(b, nbins - 1)
        ov = np.minimum(edge_hi, (bc + 1) * h) - np.maximum(edge_lo, bc * h)
        ov = np.where(ok, np.maximum(ov, 0.0), 0.0)
        cols.append(bc)
        lens.append(ov)
    return cols, lens


def footprint_sizes(grid: FieldGrid, charge):
    """Splat footprint per particle: square of side sqrt(charge), floored
    at one bin per axis so a particle never disappears inside a single bin
    (its density, and hence its force, would be locally constant)."""
    side = np.sqrt(np.asarray(charge, dtype=float))
    return np.stack([np.maximum(side, grid.hx), np.maximum(side, grid.hy)], axis=1)


def accumulate_density(grid: FieldGrid, pos, charge, sizes=None):
    """Splat particle footprints onto the bin grid, area proportional.

    pos is (n, 2) footprint centers, charge (n,) in site-area units. The
    footprint defaults to a square of side sqrt(charge), floored at the bin
    dimensions. Out-of-layout particles are clamped inside (no exception)
    and counted.

    Returns (density_above_static, clamped_count); add grid.static for the
    full field density.
    """
    rho = np.zeros((grid.nx, grid.ny))
    pos = np.asarray(pos, dtype=float).reshape(-1, 2)
    charge = np.asarray(charge, dtype=float)
    if len(pos) == 0:
        return rho, 0
    if sizes is None:
        sizes = footprint_sizes(grid, charge)
    pos, clamped = _clamp_centers(grid, pos, sizes)
    sx, sy = sizes[:, 0], sizes[:, 1]
    xc, yc = _axis_overlaps(pos[:, 0] - sx / 2, pos[:, 0] + sx / 2, grid.hx, grid.nx)
    yr, yl = _axis_overlaps(pos[:, 1] - sy / 2, pos[:, 1] + sy / 2, grid.hy, grid.ny)
    scale = charge / (sx * sy * grid.bin_area)
    for cb, cov in zip(xc, yc):
        for rb, rov in zip(yr, yl):
            np.add.at(rho, (cb, rb), scale * cov * rov)
    return rho, clamped


def solve_field(density, hx=1.0, hy=1.0, want_force=True):
    """Solve the field for a density grid.

    The mean density is subtracted as a neutralizing background, the
    potential solves the Poisson equation with Neumann boundaries via a
    cosine-basis spectral expansion, the per-bin force is the negative
    potential gradient, and the energy is half the charge-potential inner
    product (non-negative up to roundoff).
    """
    density = np.asarray(density, dtype=float)
    if not np.all(np.isfinite(density)):
        raise FloatingPointError("non-finite field density")
    nx, ny = density.shape
    resid = density - density.mean()
    coeff = dctn(resid, type=2, norm="ortho")
    lamx = (2.0 - 2.0 * np.cos(np.pi * np.arange(nx) / nx)) / hx ** 2
    lamy = (2.0 - 2.0 * np.cos(np.pi * np.arange(ny) / ny)) / hy ** 2
    eig = lamx[:, None] + lamy[None, :]
    eig[0, 0] = 1.0
    coeff /= eig
    coeff[0, 0] = 0.0
    potential = idctn(coeff, type=2, norm="ortho")
    energy = 0.5 * float(np.sum(resid * potential))
    if not want_force:
        return potential, None, energy
    fx = -np.gradient(potential, hx, axis=0)
    fy = -np.gradient(potential, hy, axis=1)
    return potential, (fx, fy), energy


def sample_energy_gradient(grid: FieldGrid, potential, pos, charge, sizes=None):
    """Exact derivative of the field energy w.r.t. particle centers.

    The derivative of the splatted energy reduces to potential differences
    between the bins holding the right/left (top/bottom) footprint edges,
    weighted by the orthogonal overlap profile.
    """
    pos = np.asarray(pos, dtype=float).reshape(-1, 2)
    charge = np.asarray(charge, dtype=float)
    n = len(pos)
    gx = np.zeros(n)
    gy = np.zeros(n)
    if n == 0:
        return gx, gy
    if sizes is None:
        sizes = footprint_sizes(grid, charge)
    pos, _ = _clamp_centers(grid, pos, sizes)
    sx, sy = sizes[:, 0], sizes[:, 1]
    scale = charge / (sx * sy * grid.bin_area)

    def edge_bin(coord, h, n):
        b = np.floor(coord / h).astype(np.int64)
        np.minimum(b, n - 1, out=b)
        np.maximum(b, 0, out=b)
        return b

    cl = edge_bin(pos[:, 0] - sx / 2, grid.hx, grid.nx)
    cr = edge_bin(pos[:, 0] + sx / 2, grid.hx, grid.nx)
    rb = edge_bin(pos[:, 1] - sy / 2, grid.hy, grid.ny)
    rt = edge_bin(pos[:, 1] + sy / 2, grid.hy, grid.ny)

    ycols, yovs = _axis_overlaps(pos[:, 1] - sy / 2, pos[:, 1] + sy / 2, grid.hy, grid.ny)
    for rbins, rov in zip(ycols, yovs):
        gx += rov * (potential[cr, rbins] - potential[cl, rbins])
    xcols, xovs = _axis_overlaps(pos[:, 0] - sx / 2, pos[:, 0] + sx / 2, grid.hx, grid.nx)
    for cbins, cov in zip(xcols, xovs):
        gy += cov * (potential[cbins, rt] - potential[cbins, rb])
    return gx * scale, gy * scale


def insert_fillers(grid: FieldGrid, free_capacity, rng):
    """Create filler particles totalling exactly free_capacity site area.

    Fillers are sized near one bin area each and seeded uniformly inside the
    columns that provide the resource. Negative free capacity means the
    design does not fit the field.
    """
    if free_capacity < -1e-9:
        raise InfeasibleError(
            f"field {grid.kind.name}: demand exceeds capacity by {-free_capacity:g} site areas")
    if free_capacity <= 1e-12 or len(grid.avail_cols) == 0:
        return np.zeros((0, 2)), np.zeros(0)
    count = max(1, int(round(free_capacity / grid.bin_area)))
    charge = np.full(count, free_capacity / count)
    cols = grid.avail_cols[rng.integers(0, len(grid.avail_cols), size=count)]
    x = cols + rng.random(count)
    y = rng.random(count) * grid.height
    return np.stack([x, y], axis=1), charge


def overflow(grid: FieldGrid, density_inst, movable_charge):
    """Normalized density excess over bin capacity.

    density_inst must exclude fillers so the ratio stays comparable across
    the run; zero movable charge reads as zero overflow.
    """
    if movable_charge <= 0:
        return 0.0
    excess = np.maximum(0.0, density_inst - 1.0).sum() * grid.bin_area
    return float(excess / movable_charge)
