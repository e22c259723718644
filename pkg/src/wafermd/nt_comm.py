"""Neutral-territory communication: T-shaped multicast routes, pair workers and neighbor lists.

Every emitting core multicasts its atom along a T: a horizontal segment
spanning ``horizontal`` cores east and west of the source and a vertical
segment running ``vertical`` cores toward increasing row. The worker for a
pair sits where one T's horizontal bar meets the other's vertical stem:

    same core    -> that core
    same row     -> the westernmost of the two
    otherwise    -> (col of the smaller-row core, row of the larger-row core)

A worker therefore receives the smaller-row atom down its vertical stem and
the larger-row atom along its own row. Arrivals at a worker are ordered by
ascending linear source-core index, which is exactly the window order
(0, -V) ... (0, -1), (-H, 0) ... (H, 0).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from .core_mapping import ConfigurationError, CoreGrid, Core, LocalityBound, Placement, locality_bound
from .reference_engine import cell_list_pairs
from .system_builder import AtomSystem

logger = logging.getLogger(__name__)


class AssignmentError(RuntimeError):
    """Raised when two cores are not within each other's T reach."""


class CoverageError(RuntimeError):
    """Raised when a pair within reach has no worker that receives both atoms."""


@dataclass(frozen=True)
class ArmLengths:
    horizontal: int
    vertical: int

    @classmethod
    def from_bound(cls, bound: LocalityBound) -> "ArmLengths":
        return cls(horizontal=bound.horizontal, vertical=bound.vertical)

    def shrink(self, amount: int) -> "ArmLengths":
        return ArmLengths(max(self.horizontal - amount, 0), max(self.vertical - amount, 0))


@dataclass(frozen=True)
class TShape:
    origin: Core
    arm_west: int
    arm_east: int
    arm_down: int
    clipped: bool = False

    def covers(self, core: Core) -> bool:
        col, row = core
        ocol, orow = self.origin
        if row == orow:
            return -self.arm_west <= col - ocol <= self.arm_east
        return col == ocol and 0 < row - orow <= self.arm_down

    def cores(self) -> List[Core]:
        ocol, orow = self.origin
        bar = [(ocol + d, orow) for d in range(-self.arm_west, self.arm_east + 1)]
        stem = [(ocol, orow + d) for d in range(1, self.arm_down + 1)]
        return bar + stem

    def links(self) -> List[Tuple[Core, Core]]:
        """Directed mesh links the multicast uses, one per hop."""
        ocol, orow = self.origin
        west = [((ocol - d + 1, orow), (ocol - d, orow)) for d in range(1, self.arm_west + 1)]
        east = [((ocol + d - 1, orow), (ocol + d, orow)) for d in range(1, self.arm_east + 1)]
        down = [((ocol, orow + d - 1), (ocol, orow + d)) for d in range(1, self.arm_down + 1)]
        return west + east + down

    @property
    def cardinality(self) -> int:
        return self.arm_west + self.arm_east + self.arm_down


def arm_lengths(
    placement: Placement,
    reach: float,
    system: Optional[AtomSystem] = None,
    arms: Optional[ArmLengths] = None,
) -> ArmLengths:
    """Arms from the locality bound unless given explicitly; rejected if they span the grid."""
    if arms is None:
        arms = ArmLengths.from_bound(locality_bound(placement, system, reach))
    grid = placement.grid
    if arms.horizontal >= grid.width or arms.vertical >= grid.height:
        raise ConfigurationError(
            f"T arms ({arms.horizontal}, {arms.vertical}) do not fit a {grid.width}x{grid.height} grid"
        )
    return arms


def build_tshape(
    placement: Placement,
    grid: CoreGrid,
    reach: float,
    *,
    system: Optional[AtomSystem] = None,
    arms: Optional[ArmLengths] = None,
) -> Dict[Core, TShape]:
    """T route for every emitting core (all group cores of all atoms), clipped at the grid edge."""
    if placement.grid != grid:
        raise ConfigurationError("placement was made for a different core grid")
    arms = arm_lengths(placement, reach, system, arms)
    sources = np.unique(grid.linear(placement.group_cores.reshape(-1, 2)))
    cols = sources % grid.width
    rows = sources // grid.width
    west = np.minimum(arms.horizontal, cols)
    east = np.minimum(arms.horizontal, grid.width - 1 - cols)
    down = np.minimum(arms.vertical, grid.height - 1 - rows)
    clipped = (west < arms.horizontal) | (east < arms.horizontal) | (down < arms.vertical)
    if np.any(clipped):
        logger.warning("%d of %d T routes clipped at the grid edge", int(clipped.sum()), sources.size)
    return {
        (int(c), int(r)): TShape((int(c), int(r)), int(w), int(e), int(d), bool(f))
        for c, r, w, e, d, f in zip(cols, rows, west, east, down, clipped)
    }


def assign_pair(a_core: Core, b_core: Core, arms: Optional[ArmLengths] = None) -> Core:
    a_col, a_row = int(a_core[0]), int(a_core[1])
    b_col, b_row = int(b_core[0]), int(b_core[1])
    if arms is not None:
        if a_row == b_row:
            reachable = abs(a_col - b_col) <= arms.horizontal
        else:
            reachable = abs(a_col - b_col) <= arms.horizontal and abs(a_row - b_row) <= arms.vertical
        if not reachable:
            raise AssignmentError(f"cores {a_core} and {b_core} are outside each other's T reach {arms}")
    if a_row == b_row:
        return (min(a_col, b_col), a_row)
    if a_row < b_row:
        return (a_col, b_row)
    return (b_col, a_row)


def assign_workers(a_cores: np.ndarray, b_cores: np.ndarray) -> np.ndarray:
    """Element-wise ``assign_pair`` over (n, 2) core arrays."""
    a = np.asarray(a_cores, dtype=np.int64).reshape(-1, 2)
    b = np.asarray(b_cores, dtype=np.int64).reshape(-1, 2)
    a_upper = (a[:, 1] < b[:, 1])[:, None]
    upper = np.where(a_upper, a, b)
    lower = np.where(a_upper, b, a)
    worker = np.stack([upper[:, 0], lower[:, 1]], axis=1)
    west = np.where((a[:, 0] <= b[:, 0])[:, None], a, b)
    same_row = a[:, 1] == b[:, 1]
    worker[same_row] = west[same_row]
    return worker


def covered(sources: np.ndarray, targets: np.ndarray, arms: ArmLengths) -> np.ndarray:
    """Whether T(source) reaches target, element-wise."""
    delta = np.asarray(targets, dtype=np.int64) - np.asarray(sources, dtype=np.int64)
    bar = (delta[:, 1] == 0) & (np.abs(delta[:, 0]) <= arms.horizontal)
    stem = (delta[:, 0] == 0) & (delta[:, 1] > 0) & (delta[:, 1] <= arms.vertical)
    return bar | stem


@dataclass(frozen=True)
class PairAssignment:
    worker: Core
    atom_a: int
    atom_b: int


@dataclass(frozen=True)
class PairRouting:
    """Per-pair split: the splitter's group core ``group`` talks to the partner's owner."""

    splitter: np.ndarray
    partner: np.ndarray
    group: np.ndarray
    source_a: np.ndarray
    source_b: np.ndarray
    worker: np.ndarray


def route_pairs(placement: Placement, i: np.ndarray, j: np.ndarray) -> PairRouting:
    """Workers for pairs under the k-way split.

    The splitter is the atom whose owner has the smaller linear index; it
    handles the pair on group core t = lin(partner owner) mod k.
    """
    i = np.asarray(i, dtype=np.int64)
    j = np.asarray(j, dtype=np.int64)
    owner_lin = placement.owner_linear
    i_splits = owner_lin[i] < owner_lin[j]
    splitter = np.where(i_splits, i, j)
    partner = np.where(i_splits, j, i)
    group = owner_lin[partner] % placement.grid.cores_per_atom
    source_a = placement.group_cores[splitter, group]
    source_b = placement.owner_core[partner]
    worker = assign_workers(source_a, source_b)
    return PairRouting(splitter, partner, group, source_a, source_b, worker)


def arrival_window(arms: ArmLengths) -> np.ndarray:
    """Offsets (source - receiver) a receiver can hear from, in ascending linear source order."""
    stem = [(0, d) for d in range(-arms.vertical, 0)]
    bar = [(d, 0) for d in range(-arms.horizontal, arms.horizontal + 1)]
    return np.array(stem + bar, dtype=np.int64).reshape(-1, 2)


def window_column(offsets: np.ndarray, arms: ArmLengths) -> np.ndarray:
    """Index into ``arrival_window`` for each (source - receiver) offset; -1 when outside."""
    offsets = np.asarray(offsets, dtype=np.int64).reshape(-1, 2)
    dc, dr = offsets[:, 0], offsets[:, 1]
    column = np.full(offsets.shape[0], -1, dtype=np.int64)
    stem = (dc == 0) & (dr < 0) & (dr >= -arms.vertical)
    bar = (dr == 0) & (np.abs(dc) <= arms.horizontal)
    column[stem] = arms.vertical + dr[stem]
    column[bar] = arms.vertical + arms.horizontal + dc[bar]
    return column


@dataclass(frozen=True)
class Emitters:
    """Every multicast source: one entry per (atom, group core), sorted by source core."""

    core: np.ndarray
    linear: np.ndarray
    atom: np.ndarray
    group: np.ndarray

    @classmethod
    def of(cls, placement: Placement) -> "Emitters":
        k = placement.grid.cores_per_atom
        cores = placement.group_cores.reshape(-1, 2)
        linear = placement.grid.linear(cores)
        order = np.argsort(linear, kind="stable")
        atoms = np.repeat(np.arange(placement.count, dtype=np.int64), k)
        groups = np.tile(np.arange(k, dtype=np.int64), placement.count)
        return cls(core=cores[order], linear=linear[order], atom=atoms[order], group=groups[order])


@dataclass(frozen=True)
class WorkerStream:
    """Arrivals at one worker in delivery order."""

    worker: Core
    atoms: np.ndarray
    sources: np.ndarray
    groups: np.ndarray
    owners: np.ndarray

    def __len__(self) -> int:
        return int(self.atoms.size)


@dataclass(frozen=True)
class ArrivalStreams:
    """Packed arrival buffers (CSR) for a set of receiving cores sorted by linear index."""

    receivers: np.ndarray
    start: np.ndarray
    atom: np.ndarray
    source: np.ndarray
    group: np.ndarray
    owner: np.ndarray

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.start)

    def __len__(self) -> int:
        return int(self.receivers.shape[0])

    def stream(self, index: int) -> WorkerStream:
        lo, hi = int(self.start[index]), int(self.start[index + 1])
        return WorkerStream(
            worker=(int(self.receivers[index, 0]), int(self.receivers[index, 1])),
            atoms=self.atom[lo:hi],
            sources=self.source[lo:hi],
            groups=self.group[lo:hi],
            owners=self.owner[lo:hi],
        )


def arrival_ordinals(
    placement: Placement, arms: ArmLengths, receivers: np.ndarray, emitters: Optional[Emitters] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """(M, window) emitter index heard by each receiver per window offset (-1 if silent) and the ordinals."""
    grid = placement.grid
    emitters = emitters or Emitters.of(placement)
    receivers = np.asarray(receivers, dtype=np.int64).reshape(-1, 2)
    window = arrival_window(arms)
    candidate = receivers[:, None, :] + window[None, :, :]
    inside = grid.contains(candidate)
    linear = np.where(inside, grid.linear(candidate), -1)
    if emitters.linear.size == 0:
        entry = np.full(linear.shape, -1, dtype=np.int64)
    else:
        # group cores never overlap, so each source core emits at most once
        pos = np.clip(np.searchsorted(emitters.linear, linear), 0, emitters.linear.size - 1)
        hit = inside & (emitters.linear[pos] == linear)
        entry = np.where(hit, pos, -1)
    heard = entry >= 0
    ordinals = np.where(heard, np.cumsum(heard, axis=1) - 1, -1)
    return entry, ordinals


def build_arrival_streams(
    placement: Placement, arms: ArmLengths, receivers: np.ndarray
) -> Tuple[ArrivalStreams, np.ndarray]:
    emitters = Emitters.of(placement)
    receivers = np.asarray(receivers, dtype=np.int64).reshape(-1, 2)
    entry, ordinals = arrival_ordinals(placement, arms, receivers, emitters)
    heard = entry >= 0
    packed = entry[heard]
    start = np.concatenate([[0], np.cumsum(heard.sum(axis=1))]).astype(np.int64)
    atoms = emitters.atom[packed]
    streams = ArrivalStreams(
        receivers=receivers,
        start=start,
        atom=atoms,
        source=emitters.core[packed],
        group=emitters.group[packed],
        owner=placement.owner_core[atoms] if atoms.size else np.zeros((0, 2), dtype=np.int64),
    )
    return streams, ordinals


def multicast_counts(placement: Placement, arms: ArmLengths) -> Tuple[np.ndarray, np.ndarray]:
    """Sender-side view: every core some T reaches and how many messages it gets."""
    grid = placement.grid
    emitters = Emitters.of(placement)
    if emitters.linear.size == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
    reach = -arrival_window(arms)
    targets = (emitters.core[:, None, :] + reach[None, :, :]).reshape(-1, 2)
    targets = targets[grid.contains(targets)]
    linear, counts = np.unique(grid.linear(targets), return_counts=True)
    cores = np.stack([linear % grid.width, linear // grid.width], axis=1)
    return cores, counts


@dataclass
class NeighborList:
    """Pairs held by each worker as ordinals into its arrival stream."""

    streams: ArrivalStreams
    pair_worker: np.ndarray
    ordinal_a: np.ndarray
    ordinal_b: np.ndarray
    arms: ArmLengths
    skin: float
    reach: float
    build_positions: np.ndarray
    stale_counter: int = 0
    _index: Dict[Core, int] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self) -> None:
        self._index = {(int(c), int(r)): m for m, (c, r) in enumerate(self.streams.receivers)}

    @property
    def pair_count(self) -> int:
        return int(self.pair_worker.size)

    def atoms(self) -> Tuple[np.ndarray, np.ndarray]:
        """Splitter and partner atom ids for every listed pair."""
        base = self.streams.start[self.pair_worker]
        return self.streams.atom[base + self.ordinal_a], self.streams.atom[base + self.ordinal_b]

    def workers(self) -> np.ndarray:
        return self.streams.receivers[self.pair_worker]

    def pairs_for(self, core: Core) -> List[Tuple[int, int]]:
        m = self._index.get((int(core[0]), int(core[1])))
        if m is None:
            return []
        mask = self.pair_worker == m
        return list(zip(self.ordinal_a[mask].tolist(), self.ordinal_b[mask].tolist()))

    def assignments(self) -> Iterator[PairAssignment]:
        a, b = self.atoms()
        for worker, x, y in zip(self.workers(), a, b):
            yield PairAssignment((int(worker[0]), int(worker[1])), int(x), int(y))

    def pairs_per_worker(self) -> np.ndarray:
        return np.bincount(self.pair_worker, minlength=len(self.streams))

    def max_pairs_per_worker(self) -> int:
        counts = self.pairs_per_worker()
        return int(counts.max()) if counts.size else 0


def build_neighbor_list(
    placement: Placement,
    positions: np.ndarray,
    reach: float,
    skin: float,
    arms: ArmLengths,
) -> NeighborList:
    """Candidate pairs within ``reach`` routed to their workers, as stream ordinals.

    Produces exactly what ``screen_candidates`` finds worker by worker.
    """
    grid = placement.grid
    positions = np.asarray(positions, dtype=np.float64)
    i, j = cell_list_pairs(positions, reach)
    routing = route_pairs(placement, i, j)
    ok = covered(routing.source_a, routing.worker, arms) & covered(routing.source_b, routing.worker, arms)
    if not np.all(ok):
        bad = int(np.flatnonzero(~ok)[0])
        raise CoverageError(
            f"pair ({int(i[bad])}, {int(j[bad])}) within {reach:.3f} A is not covered: sources "
            f"{routing.source_a[bad].tolist()} and {routing.source_b[bad].tolist()}, worker "
            f"{routing.worker[bad].tolist()}, arms ({arms.horizontal}, {arms.vertical})"
        )
    worker_lin = grid.linear(routing.worker)
    receiver_lin, pair_worker = np.unique(worker_lin, return_inverse=True)
    receivers = np.stack([receiver_lin % grid.width, receiver_lin // grid.width], axis=1)
    streams, ordinals = build_arrival_streams(placement, arms, receivers)
    col_a = window_column(routing.source_a - routing.worker, arms)
    col_b = window_column(routing.source_b - routing.worker, arms)
    ord_a = ordinals[pair_worker, col_a] if pair_worker.size else np.zeros(0, dtype=np.int64)
    ord_b = ordinals[pair_worker, col_b] if pair_worker.size else np.zeros(0, dtype=np.int64)
    order = np.lexsort((ord_b, ord_a, pair_worker))
    logger.debug("Neighbor list: %d pairs on %d workers", i.size, receivers.shape[0])
    return NeighborList(
        streams=streams,
        pair_worker=pair_worker[order].astype(np.int64),
        ordinal_a=ord_a[order].astype(np.int64),
        ordinal_b=ord_b[order].astype(np.int64),
        arms=arms,
        skin=float(skin),
        reach=float(reach),
        build_positions=positions.copy(),
    )


def screen_candidates(
    stream: WorkerStream, positions: np.ndarray, reach: float, grid: CoreGrid
) -> List[Tuple[int, int]]:
    """Ordinal pairs this worker is responsible for and that lie within ``reach``."""
    m = len(stream)
    if m < 2:
        return []
    positions = np.asarray(positions, dtype=np.float64)
    k = grid.cores_per_atom
    source_lin = grid.linear(stream.sources)
    owner_lin = grid.linear(stream.owners)
    x, y = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    x, y = x.ravel(), y.ravel()
    keep = (
        (source_lin[y] == owner_lin[y])
        & (owner_lin[x] < owner_lin[y])
        & (stream.groups[x] == owner_lin[y] % k)
    )
    x, y = x[keep], y[keep]
    workers = assign_workers(stream.sources[x], stream.sources[y])
    mine = (workers[:, 0] == stream.worker[0]) & (workers[:, 1] == stream.worker[1])
    x, y = x[mine], y[mine]
    d = positions[stream.atoms[y]] - positions[stream.atoms[x]]
    close = np.einsum("ij,ij->i", d, d) <= reach * reach
    return list(zip(x[close].tolist(), y[close].tolist()))


def needs_rebuild(
    system: Union[AtomSystem, np.ndarray], last_build_positions: np.ndarray, skin: float
) -> bool:
    """True iff any atom moved more than half the skin since the last build."""
    if skin <= 0:
        raise ValueError(f"skin must be positive, got {skin}")
    positions = system.positions if isinstance(system, AtomSystem) else np.asarray(system)
    if positions.shape[0] == 0:
        return False
    moved = positions.astype(np.float64) - np.asarray(last_build_positions, dtype=np.float64)
    return bool(np.max(np.einsum("ij,ij->i", moved, moved)) > (0.5 * skin) ** 2)


def dump_routes(shapes: Dict[Core, TShape], neighbors: Optional[NeighborList] = None) -> str:
    """``T col row west east down clipped`` per emitting core, then ``P a b col row`` per pair."""
    lines = []
    for core in sorted(shapes, key=lambda c: (c[1], c[0])):
        t = shapes[core]
        lines.append(f"T {core[0]} {core[1]} {t.arm_west} {t.arm_east} {t.arm_down} {int(t.clipped)}")
    if neighbors is not None:
        a, b = neighbors.atoms()
        for x, y, worker in zip(a.tolist(), b.tolist(), neighbors.workers()):
            lo, hi = min(x, y), max(x, y)
            lines.append(f"P {lo} {hi} {int(worker[0])} {int(worker[1])}")
    return "\n".join(lines) + ("\n" if lines else "")
