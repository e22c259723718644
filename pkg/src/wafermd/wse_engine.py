"""Wafer-scale timestep on the logical core grid, plus the fabric cycle model.

A step performs two exchanges over the same T routes:

1. positions go out; each worker computes pair densities for its pairs and
   sends them back to both owners, which sum them and evaluate F'(rho);
2. F' goes out; each worker computes the pair force and returns equal and
   opposite contributions, which the owners sum before the Verlet update.

Each worker first sums its pair ends per atom. Those worker partials go back
along the T routes to the atom's group cores (ascending source core), and the
owner adds its group cores in ascending group index. The sums run in fixed
point, so forces are bit-identical for every k and placement.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from .core_mapping import (
    ConfigurationError,
    Core,
    CoreGrid,
    LocalityError,
    Placement,
    check_locality,
    greedy_remap,
    locality_bound,
    project_and_place,
)
from .eam_potential import EamTables, embedding, resolve_dtype
from .nt_comm import (
    ArmLengths,
    CoverageError,
    NeighborList,
    TShape,
    arm_lengths,
    arrival_ordinals,
    build_neighbor_list,
    build_tshape,
    covered,
    multicast_counts,
    needs_rebuild,
)
from .reference_engine import (
    EnergyRecord,
    ForceResult,
    canonicalize,
    cell_list_pairs,
    pair_forces,
    pair_values,
    verlet_step,
)
from .system_builder import AtomSystem, SlabSpec, build_bcc_slab, prepare_slab

logger = logging.getLogger(__name__)

# benchmark patches for the throughput sweep, in lattice cells (x, y, z)
REPRESENTATIVE_CELLS: Dict[str, Tuple[int, int, int]] = {
    "Ta": (8, 8, 6),
    "W": (10, 10, 6),
}
ANCHOR_CYCLES = 743
# fixed-point fraction bits for tree sums; the rest of int64 is headroom for partials
FIXED_POINT_BITS = 50


class ConsistencyError(RuntimeError):
    """Raised when the arrivals a core expects differ from what the senders route to it."""


class CalibrationError(ValueError):
    """Raised when the cost model cannot be fitted to the anchor configuration."""


@dataclass(frozen=True)
class FabricModel:
    hop_latency: int = 1
    cost_per_hop: int = 32
    cost_per_interaction: int = 13
    cost_per_arrival: int = 1
    cost_fixed: int = 350
    cost_per_screen: int = 1
    clock_hz: float = 850e6
    exchanges: int = 2

    def __post_init__(self) -> None:
        for name in (
            "hop_latency", "cost_per_hop", "cost_per_interaction", "cost_per_arrival", "cost_fixed", "cost_per_screen"
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not self.clock_hz > 0:
            raise ValueError(f"clock_hz must be positive, got {self.clock_hz}")


@dataclass(frozen=True)
class StepCostReport:
    comm_cycles: int
    compute_cycles: int
    fixed_cycles: int
    total_cycles: int
    steps_per_second: float
    rebuild_cycles_amortized: float = 0.0


@dataclass(frozen=True)
class NeighborStats:
    """Per-step critical-path quantities of a plan."""

    longest_arm: int = 0
    t_length: int = 0
    max_pairs_per_atom: int = 0
    cores_per_atom: int = 1
    max_arrivals: int = 0
    max_candidates: int = 0
    rebuild_interval: float = 1.0

    @property
    def pairs_per_core(self) -> int:
        """Share of the busiest atom's pair list on each of its group cores."""
        return -(-self.max_pairs_per_atom // max(self.cores_per_atom, 1))


def fixed_point_scale(values: np.ndarray) -> int:
    """Power of two that maps the largest |value| just below 2**FIXED_POINT_BITS."""
    peak = float(np.max(np.abs(values))) if np.size(values) else 0.0
    if not np.isfinite(peak):
        raise FloatingPointError(f"non-finite pair contribution {peak!r}")
    if peak == 0.0:
        return 0
    return FIXED_POINT_BITS - int(np.frexp(peak)[1])


def _segment_starts(*keys: np.ndarray) -> np.ndarray:
    """Positions where any of the (already sorted) keys changes."""
    size = keys[0].size
    change = np.zeros(size, dtype=bool)
    if size:
        change[0] = True
    for key in keys:
        change[1:] |= key[1:] != key[:-1]
    return np.flatnonzero(change)


@dataclass(frozen=True)
class ReductionTree:
    """How per-worker partials travel back to each atom's owner.

    Every pair has two ends. An end is delivered to ``atom`` on its group
    core ``group`` by worker core ``source`` (linear index). In ``order`` the
    ends run by atom, then ascending group index, then ascending source core:
    a worker's ends for one atom form a worker partial, the worker partials
    reaching one group core form a group partial, and the owner adds its
    group partials last.
    """

    group_cores: np.ndarray
    atom: np.ndarray
    group: np.ndarray
    source: np.ndarray
    order: np.ndarray
    worker_starts: np.ndarray
    group_starts: np.ndarray
    atom_starts: np.ndarray
    atoms: np.ndarray

    @classmethod
    def of(cls, placement: Placement, neighbors: NeighborList) -> "ReductionTree":
        streams = neighbors.streams
        base = streams.start[neighbors.pair_worker]
        ends = (base + neighbors.ordinal_a, base + neighbors.ordinal_b)
        atom = np.concatenate([streams.atom[e] for e in ends]).astype(np.int64)
        group = np.concatenate([streams.group[e] for e in ends]).astype(np.int64)
        worker = placement.grid.linear(streams.receivers)[neighbors.pair_worker]
        source = np.concatenate([worker, worker]).astype(np.int64)
        order = np.lexsort((source, group, atom))
        a, g, s = atom[order], group[order], source[order]
        worker_starts = _segment_starts(a, g, s)
        group_pos = _segment_starts(a, g)
        atom_pos = _segment_starts(a)
        return cls(
            group_cores=placement.group_cores,
            atom=atom,
            group=group,
            source=source,
            order=order,
            worker_starts=worker_starts,
            group_starts=np.searchsorted(worker_starts, group_pos),
            atom_starts=np.searchsorted(group_pos, atom_pos),
            atoms=a[atom_pos],
        )

    @property
    def worker_partials(self) -> int:
        return int(self.worker_starts.size)

    def reduce(self, count: int, values: np.ndarray, dtype=np.float64) -> np.ndarray:
        """Per-atom totals of per-end ``values`` summed through the tree.

        Sums are taken on int64 at one scale per call, so the result does
        not depend on how the ends are split among workers or group cores.
        """
        values = np.asarray(values)
        total = np.zeros((count,) + values.shape[1:], dtype=np.int64)
        if values.shape[0] == 0:
            return total.astype(dtype)
        scale = fixed_point_scale(values)
        quanta = np.rint(np.ldexp(values.astype(np.float64), scale)).astype(np.int64)[self.order]
        worker = np.add.reduceat(quanta, self.worker_starts, axis=0)
        group = np.add.reduceat(worker, self.group_starts, axis=0)
        total[self.atoms] = np.add.reduceat(group, self.atom_starts, axis=0)
        return np.ldexp(total.astype(np.float64), -scale).astype(dtype, copy=False)


@dataclass
class ExchangePlan:
    """Send schedule (T routes), expected arrivals per core, worker neighbor lists and the reduction tree."""

    placement: Placement
    arms: ArmLengths
    shapes: Dict[Core, TShape]
    receivers: np.ndarray
    expected_arrivals: np.ndarray
    neighbors: NeighborList
    reduction: ReductionTree

    def verify(self) -> "ExchangePlan":
        """Check the receivers' window counts against what the senders multicast."""
        entry, _ = arrival_ordinals(self.placement, self.arms, self.receivers)
        heard = (entry >= 0).sum(axis=1)
        if np.any(heard != self.expected_arrivals):
            bad = int(np.flatnonzero(heard != self.expected_arrivals)[0])
            raise ConsistencyError(
                f"core {self.receivers[bad].tolist()} expects {int(heard[bad])} arrivals, "
                f"senders route {int(self.expected_arrivals[bad])}"
            )
        streams = self.neighbors.streams
        if len(streams):
            grid = self.placement.grid
            index = np.searchsorted(grid.linear(self.receivers), grid.linear(streams.receivers))
            if np.any(streams.counts != self.expected_arrivals[index]):
                raise ConsistencyError("worker arrival buffers disagree with the send schedule")
        tree = self.reduction
        if tree.atom.size != 2 * self.neighbors.pair_count:
            raise ConsistencyError(
                f"reduction tree holds {tree.atom.size} pair ends for {self.neighbors.pair_count} pairs"
            )
        width = self.placement.grid.width
        workers = np.stack([tree.source % width, tree.source // width], axis=1)
        home = tree.group_cores[tree.atom, tree.group]
        off_route = ~covered(home, workers, self.arms)
        if np.any(off_route):
            bad = int(np.flatnonzero(off_route)[0])
            raise ConsistencyError(
                f"partial for atom {int(tree.atom[bad])} returns from {workers[bad].tolist()}, "
                f"off the T route of group core {home[bad].tolist()}"
            )
        return self

    def stats(self, rebuild_interval: float = 1.0) -> NeighborStats:
        grid = self.placement.grid
        longest = max(self.arms.horizontal, self.arms.vertical) if self.placement.count else 0
        arrivals = int(self.expected_arrivals.max()) if self.expected_arrivals.size else 0
        counts = self.neighbors.streams.counts
        candidates = int(np.max(counts * (counts - 1) // 2)) if counts.size else 0
        a, b = self.neighbors.atoms()
        per_atom = np.bincount(np.concatenate([a, b]), minlength=self.placement.count)
        return NeighborStats(
            longest_arm=longest,
            t_length=math.ceil(longest / grid.period),
            max_pairs_per_atom=int(per_atom.max()) if per_atom.size else 0,
            cores_per_atom=grid.cores_per_atom,
            max_arrivals=arrivals,
            max_candidates=candidates,
            rebuild_interval=max(float(rebuild_interval), 1.0),
        )


def build_exchange_plan(
    placement: Placement,
    system: AtomSystem,
    reach: float,
    skin: float,
    arms: Optional[ArmLengths] = None,
) -> ExchangePlan:
    if arms is None:
        bound = locality_bound(placement, system, reach)
        check_locality(placement, system, bound, cell_list_pairs(system.positions, reach))
    arms = arm_lengths(placement, reach, system, arms)
    shapes = build_tshape(placement, placement.grid, reach, system=system, arms=arms)
    receivers, expected = multicast_counts(placement, arms)
    neighbors = build_neighbor_list(placement, system.positions, reach, skin, arms)
    tree = ReductionTree.of(placement, neighbors)
    plan = ExchangePlan(placement, arms, shapes, receivers, expected, neighbors, tree).verify()
    logger.info(
        "Exchange plan: arms (%d, %d), %d routes, %d pairs on %d workers, %d worker partials",
        arms.horizontal, arms.vertical, len(shapes), neighbors.pair_count, len(neighbors.streams), tree.worker_partials,
    )
    return plan


def compute_forces_wafer(system: AtomSystem, plan: ExchangePlan, tables: EamTables, precision: str = "double") -> ForceResult:
    """Forces from the two exchanges over the plan's worker neighbor lists."""
    dtype = resolve_dtype(precision)
    n = system.count
    positions = system.positions.astype(dtype)
    tree = plan.reduction
    splitter, partner = plan.neighbors.atoms()
    i, j = canonicalize(splitter, partner)
    # +1 where the splitter end is the first atom of the canonical pair
    sign = np.where(splitter == i, 1.0, -1.0).astype(dtype)

    # exchange 1: worker pair densities, reduced to the owners
    values = pair_values(positions[i], positions[j], tables, dtype)
    density = tree.reduce(n, np.concatenate([values["rho"], values["rho"]]), dtype)
    value, slope = embedding(tables, density) if n else (np.zeros(0), np.zeros(0))
    embed_energy = np.asarray(value).astype(dtype, copy=False)
    slope = np.asarray(slope).astype(dtype, copy=False)

    # exchange 2: F' rides the same routes; equal and opposite pair forces come back
    fvec = pair_forces(values, slope[i], slope[j]) * sign[:, None]
    forces = tree.reduce(n, np.concatenate([fvec, -fvec]), dtype)
    pair_energy = tree.reduce(n, np.concatenate([values["phi"], values["phi"]]), dtype)
    per_atom_energy = (0.5 * pair_energy + embed_energy).astype(dtype, copy=False)
    return ForceResult(
        forces=forces,
        potential_energy=float(np.sum(per_atom_energy)),
        per_atom_density=density,
        per_atom_energy=per_atom_energy,
        embedding_slope=slope,
    )


def estimate_cost(placement: Placement, stats: NeighborStats, fabric: FabricModel) -> StepCostReport:
    """Synchronous-round cycle estimate: the slowest core sets the pace.

    comm    = exchanges * hop_latency * longest arm
              + cost_per_hop * occupied diagonals crossed
              + cost_per_arrival * arrivals at the busiest receiver
    compute = cost_per_interaction * ceil(busiest atom's pairs / k)
    """
    if placement.count == 0:
        stats = NeighborStats()
    comm = (
        fabric.exchanges * fabric.hop_latency * stats.longest_arm
        + fabric.cost_per_hop * stats.t_length
        + fabric.cost_per_arrival * stats.max_arrivals
    )
    compute = fabric.cost_per_interaction * stats.pairs_per_core
    fixed = fabric.cost_fixed
    total = int(comm + compute + fixed)
    return StepCostReport(
        comm_cycles=int(comm),
        compute_cycles=int(compute),
        fixed_cycles=int(fixed),
        total_cycles=total,
        steps_per_second=fabric.clock_hz / total if total else math.inf,
        rebuild_cycles_amortized=fabric.cost_per_screen * stats.max_candidates / stats.rebuild_interval,
    )


def calibrate(
    fabric: FabricModel, stats: NeighborStats, placement: Placement, target_cycles: int = ANCHOR_CYCLES
) -> FabricModel:
    """Solve cost_fixed so the given configuration costs ``target_cycles`` per step."""
    variable = estimate_cost(placement, stats, replace(fabric, cost_fixed=0)).total_cycles
    fixed = target_cycles - variable
    if fixed < 0:
        raise CalibrationError(
            f"communication and compute already take {variable} cycles, above the {target_cycles}-cycle anchor"
        )
    logger.info("Calibrated cost_fixed = %d cycles (variable part %d)", fixed, variable)
    return replace(fabric, cost_fixed=int(fixed))


def representative_stats(
    tables: EamTables,
    grid: CoreGrid,
    cells: Optional[Tuple[int, int, int]] = None,
    skin: float = 0.5,
) -> Tuple[Placement, NeighborStats]:
    """Plan statistics for a 0 K benchmark patch mapped with ``grid``'s (h, k)."""
    cells = cells or REPRESENTATIVE_CELLS.get(tables.element, REPRESENTATIVE_CELLS["Ta"])
    spec = SlabSpec(
        cells_x=cells[0],
        cells_y=cells[1],
        cells_z=cells[2],
        lattice_constant=tables.lattice_constant,
        mass=tables.species_mass,
        species=tables.element,
    )
    system = build_bcc_slab(spec)
    placement = project_and_place(system, grid, tables.lattice_constant)
    plan = build_exchange_plan(placement, system, tables.cutoff + skin, skin)
    return placement, plan.stats()


@dataclass(frozen=True)
class WaferOptions:
    dt: float = 1.0
    skin: float = 0.5
    remap_every: int = 0
    remap_radius: int = 4
    precision: str = "double"
    cell_width: Optional[float] = None
    rect: Optional[Tuple[int, int]] = None
    arms: Optional[ArmLengths] = None

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.skin < 0:
            raise ValueError(f"skin must be non-negative, got {self.skin}")
        if self.remap_every < 0:
            raise ValueError(f"remap_every must be non-negative, got {self.remap_every}")
        resolve_dtype(self.precision)


@dataclass
class WaferState:
    system: AtomSystem
    grid: CoreGrid
    placement: Placement
    plan: ExchangePlan
    forces: ForceResult
    step: int = 0
    rebuilds: int = 0

    @property
    def rebuild_interval(self) -> float:
        return self.step / self.rebuilds if self.rebuilds else float(max(self.step, 1))


def _cell_width(tables: EamTables, options: WaferOptions) -> float:
    return options.cell_width or tables.lattice_constant


def _plan_for(
    system: AtomSystem, placement: Placement, tables: EamTables, options: WaferOptions
) -> Tuple[Placement, ExchangePlan]:
    """Plan for the current placement, re-placing from scratch if the atoms have drifted too far."""
    reach = tables.cutoff + options.skin
    try:
        return placement, build_exchange_plan(placement, system, reach, options.skin, options.arms)
    except (ConfigurationError, CoverageError, LocalityError) as exc:
        if options.arms is not None:
            raise
        logger.warning("Placement no longer local (%s); re-placing atoms", exc)
    fresh = project_and_place(system, placement.grid, _cell_width(tables, options), options.rect)
    return fresh, build_exchange_plan(fresh, system, reach, options.skin)


def initialize_state(
    system: AtomSystem, grid: CoreGrid, tables: EamTables, options: WaferOptions = WaferOptions()
) -> WaferState:
    system = system.astype(resolve_dtype(options.precision))
    placement = project_and_place(system, grid, _cell_width(tables, options), options.rect)
    placement, plan = _plan_for(system, placement, tables, options)
    forces = compute_forces_wafer(system, plan, tables, options.precision)
    return WaferState(system=replace(system, forces=forces.forces), grid=grid, placement=placement, plan=plan, forces=forces)


def run_step(
    state: WaferState,
    tables: EamTables,
    fabric: FabricModel,
    options: WaferOptions = WaferOptions(),
) -> Tuple[WaferState, StepCostReport]:
    """One velocity Verlet step; the neighbor lists are rebuilt first when stale."""
    placement, plan = state.placement, state.plan
    rebuilt = 0

    def evaluate(moved: AtomSystem) -> ForceResult:
        nonlocal placement, plan, rebuilt
        stale = options.skin == 0 or needs_rebuild(moved, plan.neighbors.build_positions, options.skin)
        if stale:
            placement, plan = _plan_for(moved, placement, tables, options)
            rebuilt = 1
        else:
            plan.neighbors.stale_counter += 1
        return compute_forces_wafer(moved, plan, tables, options.precision)

    system, forces = verlet_step(state.system, state.forces, options.dt, evaluate)
    updated = WaferState(
        system=system,
        grid=state.grid,
        placement=placement,
        plan=plan,
        forces=forces,
        step=state.step + 1,
        rebuilds=state.rebuilds + rebuilt,
    )
    report = estimate_cost(placement, plan.stats(updated.rebuild_interval), fabric)
    logger.debug(
        "step %d: comm %d, compute %d, fixed %d cycles",
        updated.step, report.comm_cycles, report.compute_cycles, report.fixed_cycles,
    )
    return updated, report


@dataclass(frozen=True)
class TrajectoryPoint:
    energy: EnergyRecord
    cost: StepCostReport


@dataclass(frozen=True)
class RemapEvent:
    step: int
    swaps: int
    cost_before: float
    cost_after: float


@dataclass
class TrajectorySummary:
    points: List[TrajectoryPoint]
    remaps: List[RemapEvent]
    final: WaferState
    rebuilds: int = 0


def remap_state(state: WaferState, tables: EamTables, options: WaferOptions) -> Tuple[WaferState, RemapEvent]:
    """One greedy remap round, then a fresh plan for the new placement."""
    outcome = greedy_remap(state.placement, state.system, options.remap_radius)
    placement, plan = state.placement, state.plan
    if outcome.swaps:
        placement, plan = _plan_for(state.system, outcome.placement, tables, options)
    event = RemapEvent(state.step, len(outcome.swaps), outcome.cost_before, outcome.cost_after)
    return replace(state, placement=placement, plan=plan), event


def run_trajectory(
    source: Union[SlabSpec, AtomSystem],
    steps: int,
    remap_every: int,
    *,
    tables: EamTables,
    grid: CoreGrid,
    fabric: FabricModel = FabricModel(),
    options: WaferOptions = WaferOptions(),
    callback: Optional[Callable[[WaferState], None]] = None,
) -> TrajectorySummary:
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if remap_every < 0:
        raise ValueError(f"remap_every must be non-negative, got {remap_every}")
    system = prepare_slab(source) if isinstance(source, SlabSpec) else source
    state = initialize_state(system, grid, tables, options)
    start = estimate_cost(state.placement, state.plan.stats(), fabric)
    points = [TrajectoryPoint(EnergyRecord(0, state.system.kinetic_energy(), state.forces.potential_energy), start)]
    remaps: List[RemapEvent] = []
    for _ in range(steps):
        state, report = run_step(state, tables, fabric, options)
        points.append(TrajectoryPoint(EnergyRecord(state.step, state.system.kinetic_energy(), state.forces.potential_energy), report))
        if remap_every and state.step % remap_every == 0:
            state, event = remap_state(state, tables, options)
            remaps.append(event)
        if callback is not None:
            callback(state)
    logger.info(
        "Trajectory done: %d steps, %d rebuilds, %d remap events", steps, state.rebuilds, len(remaps)
    )
    return TrajectorySummary(points=points, remaps=remaps, final=state, rebuilds=state.rebuilds)
