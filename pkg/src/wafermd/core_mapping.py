"""Atom-to-core mapping on the logical 2D mesh.

Atoms are projected onto the xy plane and binned into square 2D cells. Each
cell owns an nx x ny rectangle of *slots*; slot (i, j) lives on core

    col = i * p + ((-j) mod p),   row = j,      p = max(h + 1, k)

so occupied cores sit on anti-diagonals (col + row = 0 mod p) with p - 1
empty diagonals between them. An atom's k group cores are the contiguous run
of k cores inside its own p-wide block that contains the owner.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .system_builder import AtomSystem

logger = logging.getLogger(__name__)

Core = Tuple[int, int]


class PlacementError(ValueError):
    """Raised when atoms cannot be placed on the core grid."""


class ConfigurationError(ValueError):
    """Raised when mapping parameters cannot work on the given grid."""


class LocalityError(RuntimeError):
    """Raised when two atoms within reach sit farther apart on the mesh than the locality bound."""


@dataclass(frozen=True)
class CoreGrid:
    width: int = 920
    height: int = 920
    cores_per_atom: int = 1
    diagonal_spacing: int = 0

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ConfigurationError(f"grid must be at least 1x1, got {self.width}x{self.height}")
        if self.cores_per_atom < 1:
            raise ConfigurationError(f"cores per atom must be >= 1, got {self.cores_per_atom}")
        if self.diagonal_spacing < 0:
            raise ConfigurationError(f"diagonal spacing must be >= 0, got {self.diagonal_spacing}")
        if self.period > self.width:
            raise ConfigurationError(f"diagonal period {self.period} exceeds grid width {self.width}")

    @property
    def period(self) -> int:
        """Column period of the occupied diagonals; widened to k when h + 1 < k."""
        return max(self.diagonal_spacing + 1, self.cores_per_atom)

    @property
    def slot_columns(self) -> int:
        return self.width // self.period

    @property
    def capacity(self) -> int:
        """Atoms the diagonal layout can hold."""
        return self.slot_columns * self.height

    @property
    def nominal_capacity(self) -> int:
        return (self.width * self.height) // self.cores_per_atom

    def linear(self, cores: np.ndarray) -> np.ndarray:
        cores = np.asarray(cores, dtype=np.int64)
        return cores[..., 1] * self.width + cores[..., 0]

    def contains(self, cores: np.ndarray) -> np.ndarray:
        cores = np.asarray(cores, dtype=np.int64)
        return (cores[..., 0] >= 0) & (cores[..., 0] < self.width) & (cores[..., 1] >= 0) & (cores[..., 1] < self.height)

    def diagonal_offset(self, rows: np.ndarray) -> np.ndarray:
        return np.mod(-np.asarray(rows, dtype=np.int64), self.period)

    def owner_cores(self, slots: np.ndarray) -> np.ndarray:
        slots = np.asarray(slots, dtype=np.int64).reshape(-1, 2)
        cols = slots[:, 0] * self.period + self.diagonal_offset(slots[:, 1])
        return np.stack([cols, slots[:, 1]], axis=1)

    def group_cores(self, slots: np.ndarray) -> np.ndarray:
        """(n, k, 2) group cores, ascending column, owner included."""
        slots = np.asarray(slots, dtype=np.int64).reshape(-1, 2)
        k = self.cores_per_atom
        start = np.minimum(self.diagonal_offset(slots[:, 1]), self.period - k)
        cols = slots[:, 0, None] * self.period + start[:, None] + np.arange(k)[None, :]
        rows = np.broadcast_to(slots[:, 1, None], cols.shape)
        return np.stack([cols, rows], axis=2)


@dataclass(frozen=True)
class CellLayout:
    """Square 2D cells of the projected plane and their slot rectangles."""

    origin: Tuple[float, float]
    cell_width: float
    nx: int
    ny: int
    cells_x: int
    cells_y: int

    @property
    def slot_extent(self) -> Tuple[int, int]:
        return self.cells_x * self.nx, self.cells_y * self.ny

    def cell_of_points(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        return np.floor((xy - np.asarray(self.origin)) / self.cell_width).astype(np.int64)

    def cell_of_slots(self, slots: np.ndarray) -> np.ndarray:
        slots = np.asarray(slots, dtype=np.int64).reshape(-1, 2)
        return slots // np.array([self.nx, self.ny])

    def centers(self, cells: np.ndarray) -> np.ndarray:
        cells = np.asarray(cells, dtype=np.float64).reshape(-1, 2)
        return np.asarray(self.origin) + (cells + 0.5) * self.cell_width

    def bounds(self, cells: np.ndarray) -> np.ndarray:
        """(n, 4) rectangles xmin, ymin, xmax, ymax."""
        cells = np.asarray(cells, dtype=np.float64).reshape(-1, 2)
        low = np.asarray(self.origin) + cells * self.cell_width
        return np.concatenate([low, low + self.cell_width], axis=1)


@dataclass
class Placement:
    grid: CoreGrid
    layout: CellLayout
    slots: np.ndarray
    owner_core: np.ndarray = field(init=False, repr=False)
    group_cores: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.slots = np.asarray(self.slots, dtype=np.int64).reshape(-1, 2)
        self.owner_core = self.grid.owner_cores(self.slots)
        self.group_cores = self.grid.group_cores(self.slots)

    @property
    def count(self) -> int:
        return int(self.slots.shape[0])

    @property
    def owner_linear(self) -> np.ndarray:
        return self.grid.linear(self.owner_core)

    def nominal_centers(self) -> np.ndarray:
        return self.layout.centers(self.layout.cell_of_slots(self.slots))

    def cell_of_core(self, core: Core) -> Tuple[float, float, float, float]:
        """Nominal 2D region (xmin, ymin, xmax, ymax) of an occupied slot's core."""
        col, row = int(core[0]), int(core[1])
        p = self.grid.period
        offset = (-row) % p
        if (col - offset) % p != 0:
            raise PlacementError(f"core ({col}, {row}) is not an owner slot for period {p}")
        slot = np.array([[(col - offset) // p, row]])
        return tuple(float(v) for v in self.layout.bounds(self.layout.cell_of_slots(slot))[0])

    def excursion(self, system: AtomSystem) -> float:
        """Largest distance, per axis, of any atom outside its nominal cell."""
        if self.count == 0:
            return 0.0
        box = self.layout.bounds(self.layout.cell_of_slots(self.slots))
        xy = system.positions[:, :2].astype(np.float64)
        below = box[:, :2] - xy
        above = xy - box[:, 2:]
        return float(max(0.0, below.max(), above.max()))

    def with_slots(self, slots: np.ndarray) -> "Placement":
        return Placement(grid=self.grid, layout=self.layout, slots=slots)

    def validate(self) -> "Placement":
        if self.count:
            linear = self.grid.linear(self.owner_core)
            if np.unique(linear).size != self.count:
                raise PlacementError("two atoms share an owner core")
            if not np.all(self.grid.contains(self.group_cores)):
                raise PlacementError("group cores fall outside the grid")
        return self


@dataclass(frozen=True)
class RemapOutcome:
    swaps: List[Tuple[Core, Core]]
    cost_before: float
    cost_after: float
    placement: Placement


@dataclass(frozen=True)
class LocalityBound:
    cells: int
    horizontal: int
    vertical: int
    excursion: float


def choose_rectangle(max_occupancy: int, period: int) -> Tuple[int, int]:
    """nx x ny slots per cell minimizing the cell's core extent max(nx * p, ny)."""
    m = max(int(max_occupancy), 1)
    best = None
    for nx in range(1, m + 1):
        ny = -(-m // nx)
        key = (max(nx * period, ny), nx * ny, nx)
        if best is None or key < best[0]:
            best = (key, (nx, ny))
    return best[1]


def project_and_place(
    system: AtomSystem,
    grid: CoreGrid,
    cell_width: float,
    rect: Optional[Tuple[int, int]] = None,
) -> Placement:
    """Project atoms onto xy, bin into cells and fill each cell's slot rectangle by ascending z."""
    n = system.count
    if not cell_width > 0:
        raise ConfigurationError(f"cell width must be positive, got {cell_width}")
    if n > grid.capacity:
        raise PlacementError(
            f"{n} atoms exceed grid capacity: max atoms = {grid.capacity} on the diagonal layout, "
            f"{grid.nominal_capacity} at one atom per k cores "
            f"(k={grid.cores_per_atom}, h={grid.diagonal_spacing}, {grid.width}x{grid.height})"
        )
    if n == 0:
        layout = CellLayout((0.0, 0.0), float(cell_width), 1, 1, 0, 0)
        return Placement(grid=grid, layout=layout, slots=np.zeros((0, 2), dtype=np.int64))

    positions = system.positions.astype(np.float64)
    xy = positions[:, :2]
    origin = xy.min(axis=0) - 0.25 * cell_width
    cells = np.floor((xy - origin) / cell_width).astype(np.int64)
    cells_x, cells_y = (int(v) for v in cells.max(axis=0) + 1)
    cell_linear = cells[:, 1] * cells_x + cells[:, 0]
    occupancy = np.bincount(cell_linear, minlength=cells_x * cells_y)
    nx, ny = rect if rect is not None else choose_rectangle(int(occupancy.max()), grid.period)
    if nx * ny < occupancy.max():
        raise PlacementError(f"{nx}x{ny} rectangle cannot hold {int(occupancy.max())} atoms of the fullest cell")
    layout = CellLayout((float(origin[0]), float(origin[1])), float(cell_width), int(nx), int(ny), cells_x, cells_y)
    need_cols, need_rows = layout.slot_extent
    if need_cols > grid.slot_columns or need_rows > grid.height:
        raise PlacementError(
            f"projected extent needs {need_cols}x{need_rows} slots, grid offers "
            f"{grid.slot_columns}x{grid.height}: max atoms = {grid.capacity}"
        )

    index = np.arange(n)
    order = np.lexsort((index, xy[:, 1], xy[:, 0], positions[:, 2], cell_linear))
    sorted_cells = cell_linear[order]
    first = np.searchsorted(sorted_cells, sorted_cells, side="left")
    rank = np.arange(n) - first
    slots = np.empty((n, 2), dtype=np.int64)
    slots[order, 0] = cells[order, 0] * nx + rank % nx
    slots[order, 1] = cells[order, 1] * ny + rank // nx
    placement = Placement(grid=grid, layout=layout, slots=slots).validate()
    logger.info(
        "Placed %d atoms: %dx%d cells of %.3f A, %dx%d slots per cell, period %d",
        n, cells_x, cells_y, cell_width, nx, ny, grid.period,
    )
    return placement


def assignment_cost(placement: Placement, system: AtomSystem) -> float:
    """Sum of squared projected distances (A^2) from atoms to their nominal cell centers."""
    if placement.count == 0:
        return 0.0
    delta = system.positions[:, :2].astype(np.float64) - placement.nominal_centers()
    return float(np.sum(delta * delta))


def locality_bound(placement: Placement, system: Optional[AtomSystem], reach: float) -> LocalityBound:
    """Mesh distance that any two atoms within ``reach`` can be apart, per axis.

    Without a system the atoms are taken to sit inside their nominal cells.
    """
    excursion = placement.excursion(system) if system is not None else 0.0
    layout = placement.layout
    cells = int(math.floor((reach + 2.0 * excursion) / layout.cell_width)) + 1
    p = placement.grid.period
    horizontal = (cells + 1) * layout.nx * p - 1
    vertical = (cells + 1) * layout.ny - 1
    return LocalityBound(cells=cells, horizontal=horizontal, vertical=vertical, excursion=excursion)


def check_locality(placement: Placement, system: AtomSystem, bound: LocalityBound, pairs: Tuple[np.ndarray, np.ndarray]) -> None:
    """Raise LocalityError if a listed pair's owner cores break the bound."""
    i, j = pairs
    if len(i) == 0:
        return
    delta = np.abs(placement.owner_core[i] - placement.owner_core[j])
    bad = np.flatnonzero((delta[:, 0] > bound.horizontal) | (delta[:, 1] > bound.vertical))
    if bad.size:
        first = int(bad[0])
        raise LocalityError(
            f"atoms {int(i[first])} and {int(j[first])} are {delta[first].tolist()} cores apart, "
            f"bound is ({bound.horizontal}, {bound.vertical})"
        )


def _slot_universe(placement: Placement) -> Tuple[np.ndarray, np.ndarray]:
    """All slots inside the cell region and the atom on each (-1 when empty)."""
    extent_x, extent_y = placement.layout.slot_extent
    ii, jj = np.meshgrid(np.arange(extent_x), np.arange(extent_y), indexing="ij")
    slots = np.stack([ii.ravel(), jj.ravel()], axis=1)
    occupant = np.full(slots.shape[0], -1, dtype=np.int64)
    if placement.count:
        flat = placement.slots[:, 0] * extent_y + placement.slots[:, 1]
        occupant[flat] = np.arange(placement.count)
    return slots, occupant


def _move_delta(atom_xy: np.ndarray, from_center: np.ndarray, to_center: np.ndarray) -> np.ndarray:
    d_to = atom_xy - to_center
    d_from = atom_xy - from_center
    return np.sum(d_to * d_to, axis=1) - np.sum(d_from * d_from, axis=1)


def greedy_remap(placement: Placement, system: AtomSystem, radius: int) -> RemapOutcome:
    """One round of the two-phase mutual-best-swap protocol.

    Phase 1: every slot evaluates the cost change of trading atoms (or moving
    its atom into an empty slot) with each slot whose core is within ``radius``
    (Chebyshev). Phase 2: each slot nominates its most negative change, ties to
    the lowest linear core index; a swap commits only on mutual nomination.
    """
    if radius < 1:
        raise ValueError(f"remap radius must be >= 1, got {radius}")
    cost_before = assignment_cost(placement, system)
    if placement.count == 0:
        return RemapOutcome([], cost_before, cost_before, placement)

    grid = placement.grid
    layout = placement.layout
    slots, occupant = _slot_universe(placement)
    extent_x, extent_y = layout.slot_extent
    cores = grid.owner_cores(slots)
    core_linear = grid.linear(cores)
    centers = layout.centers(layout.cell_of_slots(slots))
    xy = system.positions[:, :2].astype(np.float64)

    p = grid.period
    reach_i = radius // p + 1
    firsts: List[np.ndarray] = []
    seconds: List[np.ndarray] = []
    index = np.arange(slots.shape[0])
    for di in range(0, reach_i + 1):
        for dj in range(-radius, radius + 1):
            if di == 0 and dj <= 0:
                continue
            other = slots + np.array([di, dj])
            inside = (other[:, 0] < extent_x) & (other[:, 1] >= 0) & (other[:, 1] < extent_y)
            a = index[inside]
            b = other[inside, 0] * extent_y + other[inside, 1]
            near = np.max(np.abs(cores[a] - cores[b]), axis=1) <= radius
            busy = (occupant[a] >= 0) | (occupant[b] >= 0)
            keep = near & busy
            firsts.append(a[keep])
            seconds.append(b[keep])
    # negative slot-column offsets are the same undirected candidates seen from the other end
    a = np.concatenate(firsts) if firsts else np.zeros(0, dtype=np.int64)
    b = np.concatenate(seconds) if seconds else np.zeros(0, dtype=np.int64)

    # phase 1: both endpoints see the same delta for an undirected candidate
    delta = np.zeros(a.size)
    both = (occupant[a] >= 0) & (occupant[b] >= 0)
    only_a = (occupant[a] >= 0) & (occupant[b] < 0)
    only_b = (occupant[a] < 0) & (occupant[b] >= 0)
    if np.any(both):
        xa = xy[occupant[a[both]]]
        xb = xy[occupant[b[both]]]
        delta[both] = 2.0 * np.sum((xa - xb) * (centers[a[both]] - centers[b[both]]), axis=1)
    if np.any(only_a):
        delta[only_a] = _move_delta(xy[occupant[a[only_a]]], centers[a[only_a]], centers[b[only_a]])
    if np.any(only_b):
        delta[only_b] = _move_delta(xy[occupant[b[only_b]]], centers[b[only_b]], centers[a[only_b]])

    # phase 2: nominations
    beneficial = delta < 0
    src = np.concatenate([a[beneficial], b[beneficial]])
    dst = np.concatenate([b[beneficial], a[beneficial]])
    gain = np.concatenate([delta[beneficial], delta[beneficial]])
    nominee = np.full(slots.shape[0], -1, dtype=np.int64)
    if src.size:
        order = np.lexsort((core_linear[dst], gain, src))
        src_sorted = src[order]
        head = np.ones(src_sorted.size, dtype=bool)
        head[1:] = src_sorted[1:] != src_sorted[:-1]
        nominee[src_sorted[head]] = dst[order][head]
    chosen = np.flatnonzero(nominee >= 0)
    mutual = chosen[(nominee[nominee[chosen]] == chosen) & (chosen < nominee[chosen])]

    new_occupant = occupant.copy()
    partners = nominee[mutual]
    new_occupant[mutual] = occupant[partners]
    new_occupant[partners] = occupant[mutual]
    new_slots = placement.slots.copy()
    filled = np.flatnonzero(new_occupant >= 0)
    new_slots[new_occupant[filled]] = slots[filled]
    updated = placement.with_slots(new_slots)
    swaps = [
        (tuple(int(v) for v in cores[s]), tuple(int(v) for v in cores[t]))
        for s, t in zip(mutual.tolist(), partners.tolist())
    ]
    cost_after = assignment_cost(updated, system)
    if swaps:
        logger.info("Remap committed %d swaps: cost %.4f -> %.4f A^2", len(swaps), cost_before, cost_after)
    return RemapOutcome(swaps=swaps, cost_before=cost_before, cost_after=cost_after, placement=updated)


def remap_until_stable(
    placement: Placement, system: AtomSystem, radius: int, max_rounds: int = 1000
) -> List[RemapOutcome]:
    outcomes: List[RemapOutcome] = []
    for _ in range(max_rounds):
        outcome = greedy_remap(placement, system, radius)
        outcomes.append(outcome)
        placement = outcome.placement
        if not outcome.swaps:
            break
    return outcomes


def dump_placement(placement: Placement) -> str:
    """One line per atom: id, owner col/row, group cores as col:row."""
    lines = [f"# grid {placement.grid.width}x{placement.grid.height} k={placement.grid.cores_per_atom} "
             f"h={placement.grid.diagonal_spacing} period={placement.grid.period}"]
    for atom in range(placement.count):
        col, row = placement.owner_core[atom]
        group = " ".join(f"{int(c)}:{int(r)}" for c, r in placement.group_cores[atom])
        lines.append(f"{atom} {int(col)} {int(row)} {group}")
    return "\n".join(lines) + "\n"
