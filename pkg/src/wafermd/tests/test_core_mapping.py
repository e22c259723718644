import numpy as np
import pytest

from wafermd.core_mapping import (
    ConfigurationError,
    CoreGrid,
    LocalityBound,
    LocalityError,
    PlacementError,
    assignment_cost,
    check_locality,
    choose_rectangle,
    dump_placement,
    greedy_remap,
    locality_bound,
    project_and_place,
    remap_until_stable,
)
from wafermd.reference_engine import cell_list_pairs
from wafermd.system_builder import AtomSystem, SlabSpec, build_bcc_slab


@pytest.mark.parametrize(
    "k, expected",
    [(1, 800_000), (2, 400_000), (3, 266_666), (4, 200_000), (5, 160_000), (6, 133_333)],
)
def test_capacity_matches_program_region(k, expected):
    grid = CoreGrid(width=920, height=870, cores_per_atom=k)
    assert grid.capacity == pytest.approx(expected, rel=0.01)


def test_full_grid_capacity():
    assert CoreGrid(920, 920).capacity == 846_400
    assert CoreGrid(920, 920, cores_per_atom=4).nominal_capacity == 211_600


@pytest.mark.parametrize("h, k, period", [(0, 1, 1), (1, 1, 2), (0, 4, 4), (2, 2, 3), (1, 3, 3)])
def test_period(h, k, period):
    assert CoreGrid(64, 64, cores_per_atom=k, diagonal_spacing=h).period == period


@pytest.mark.parametrize("h, k", [(0, 1), (1, 1), (2, 2), (0, 3), (1, 4)])
def test_owners_on_diagonals_and_groups_contiguous(h, k):
    grid = CoreGrid(48, 20, cores_per_atom=k, diagonal_spacing=h)
    ii, jj = np.meshgrid(np.arange(grid.slot_columns), np.arange(grid.height), indexing="ij")
    slots = np.stack([ii.ravel(), jj.ravel()], axis=1)
    owners = grid.owner_cores(slots)
    groups = grid.group_cores(slots)
    assert np.all((owners[:, 0] + owners[:, 1]) % grid.period == 0)
    assert np.unique(grid.linear(groups.reshape(-1, 2))).size == slots.shape[0] * k
    assert np.all(np.diff(groups[:, :, 0], axis=1) == 1)
    assert np.all(groups[:, :, 0] // grid.period == slots[:, :1])
    assert np.all(np.any(np.all(groups == owners[:, None, :], axis=2), axis=1))


def test_period_wider_than_grid():
    with pytest.raises(ConfigurationError):
        CoreGrid(3, 10, cores_per_atom=4)


def test_choose_rectangle():
    assert choose_rectangle(12, 1) == (3, 4)
    assert choose_rectangle(12, 2) == (2, 6)
    assert choose_rectangle(12, 4) == (2, 6)
    assert choose_rectangle(12, 6) == (1, 12)
    assert choose_rectangle(1, 1) == (1, 1)


def test_placement_of_default_slab():
    system = build_bcc_slab(SlabSpec(6, 6, 6))
    placement = project_and_place(system, CoreGrid(920, 920), cell_width=3.3026)
    assert placement.count == 432
    assert (placement.layout.nx, placement.layout.ny) == (3, 4)
    assert np.unique(placement.owner_linear).size == 432
    # every atom sits in its nominal cell
    assert placement.excursion(system) == 0.0
    cells = placement.layout.cell_of_points(system.positions[:, :2])
    np.testing.assert_array_equal(placement.layout.cell_of_slots(placement.slots), cells)


def test_cell_of_core_is_the_nominal_region():
    system = _square_layer(3)
    placement = project_and_place(system, CoreGrid(16, 16, diagonal_spacing=1), cell_width=4.0)
    for atom in range(system.count):
        xmin, ymin, xmax, ymax = placement.cell_of_core(tuple(placement.owner_core[atom]))
        x, y = system.positions[atom, :2]
        assert xmin <= x < xmax and ymin <= y < ymax
    with pytest.raises(PlacementError):
        placement.cell_of_core((1, 0))


def test_slots_filled_by_ascending_z():
    positions = [[0.0, 0.0, 2.0], [0.1, 0.1, 0.0], [0.2, 0.0, 1.0]]
    placement = project_and_place(AtomSystem(positions=positions), CoreGrid(16, 16), cell_width=4.0, rect=(2, 2))
    assert placement.slots.tolist() == [[0, 1], [0, 0], [1, 0]]


def test_capacity_error_names_max_atoms():
    system = build_bcc_slab(SlabSpec(4, 4, 4))
    with pytest.raises(PlacementError, match="max atoms = 64"):
        project_and_place(system, CoreGrid(8, 8), cell_width=3.3026)
    with pytest.raises(PlacementError, match=r"max atoms = 32 on the diagonal layout, 36 at one atom per k cores"):
        project_and_place(system, CoreGrid(9, 8, cores_per_atom=2), cell_width=3.3026)


def _square_layer(n=5, spacing=4.0):
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    xy = np.stack([ii.ravel(), jj.ravel()], axis=1) * spacing
    return AtomSystem(positions=np.column_stack([xy, np.zeros(len(xy))]))


def test_short_reach_gives_unit_bound():
    system = _square_layer()
    placement = project_and_place(system, CoreGrid(32, 32), cell_width=4.0)
    bound = locality_bound(placement, system, reach=3.0)
    assert (bound.cells, bound.horizontal, bound.vertical) == (1, 1, 1)


def test_empty_diagonals_widen_horizontal_bound():
    system = _square_layer()
    dense = locality_bound(project_and_place(system, CoreGrid(32, 32), 4.0), system, 3.0)
    sparse = locality_bound(project_and_place(system, CoreGrid(32, 32, diagonal_spacing=1), 4.0), system, 3.0)
    assert sparse.horizontal >= 2 * dense.horizontal
    assert sparse.vertical == dense.vertical


def test_bound_holds_for_slab_pairs(ta_tables):
    system = build_bcc_slab(SlabSpec(4, 4, 3))
    reach = ta_tables.cutoff + 0.5
    for k, h in [(1, 0), (4, 0), (2, 1)]:
        placement = project_and_place(system, CoreGrid(200, 200, k, h), 3.3026)
        bound = locality_bound(placement, system, reach)
        check_locality(placement, system, bound, cell_list_pairs(system.positions, reach))


def test_check_locality_flags_far_pair():
    system = _square_layer(3)
    placement = project_and_place(system, CoreGrid(16, 16), 4.0)
    with pytest.raises(LocalityError, match="cores apart"):
        check_locality(placement, system, LocalityBound(0, 0, 0, 0.0), (np.array([0]), np.array([8])))


def test_two_atom_swap():
    system = AtomSystem(positions=[[1.0, 1.0, 0.0], [5.0, 1.0, 0.0]])
    placement = project_and_place(system, CoreGrid(8, 8), cell_width=4.0)
    swapped = AtomSystem(positions=system.positions[::-1].copy())
    outcome = greedy_remap(placement, swapped, radius=1)
    assert outcome.swaps == [((0, 0), (1, 0))]
    assert outcome.cost_before == pytest.approx(36.0)
    assert outcome.cost_after == pytest.approx(4.0)
    assert outcome.cost_after == pytest.approx(assignment_cost(placement, system))


def _best_remaining_delta(placement, system, radius):
    """Exhaustive cost change of every single trade or move within ``radius``."""
    extent_x, extent_y = placement.layout.slot_extent
    occupant = {tuple(s): atom for atom, s in enumerate(placement.slots.tolist())}
    universe = [(i, j) for i in range(extent_x) for j in range(extent_y)]
    cores = {s: placement.grid.owner_cores(np.array([s]))[0] for s in universe}
    base = assignment_cost(placement, system)
    best = 0.0
    for index, a in enumerate(universe):
        for b in universe[index + 1:]:
            if a not in occupant and b not in occupant:
                continue
            if np.max(np.abs(cores[a] - cores[b])) > radius:
                continue
            slots = placement.slots.copy()
            if a in occupant:
                slots[occupant[a]] = b
            if b in occupant:
                slots[occupant[b]] = a
            best = min(best, assignment_cost(placement.with_slots(slots), system) - base)
    return best


@pytest.mark.parametrize("seed, h", [(0, 0), (1, 0), (2, 1), (3, 0)])
def test_remap_never_raises_cost_and_stops_at_fixed_point(seed, h):
    rng = np.random.Generator(np.random.PCG64(seed))
    system = build_bcc_slab(SlabSpec(4, 4, 1))
    placement = project_and_place(system, CoreGrid(64, 64, diagonal_spacing=h), 3.3026)
    drifted = AtomSystem(positions=system.positions + rng.normal(scale=1.0, size=system.positions.shape))
    outcomes = remap_until_stable(placement, drifted, radius=3)
    for outcome in outcomes:
        assert outcome.cost_after <= outcome.cost_before + 1e-12
    assert outcomes[-1].swaps == []
    final = outcomes[-1].placement.validate()
    assert _best_remaining_delta(final, drifted, radius=3) > -1e-9


def test_fresh_placement_of_small_lattice_admits_no_improving_swap():
    system = build_bcc_slab(SlabSpec(2, 2, 2))
    placement = project_and_place(system, CoreGrid(32, 32), cell_width=3.3026)
    assert placement.count == 16
    layout = placement.layout
    xy = system.positions[:, :2]
    offsets = xy - layout.centers(layout.cell_of_points(xy))
    assert assignment_cost(placement, system) == pytest.approx(float(np.sum(offsets * offsets)))
    assert _best_remaining_delta(placement, system, radius=64) >= -1e-12

    cells = layout.cell_of_slots(placement.slots)
    a = 0
    b = int(np.flatnonzero(np.any(cells != cells[a], axis=1))[0])
    slots = placement.slots.copy()
    slots[[a, b]] = slots[[b, a]]
    assert assignment_cost(placement.with_slots(slots), system) > assignment_cost(placement, system)


@pytest.mark.slow
def test_thousand_remap_events_never_raise_cost():
    rng = np.random.Generator(np.random.PCG64(2024))
    lattice = build_bcc_slab(SlabSpec(4, 4, 1))
    events = 0
    for trial in range(50):
        placement = project_and_place(lattice, CoreGrid(64, 64, diagonal_spacing=trial % 2), 3.3026)
        positions = lattice.positions.copy()
        for _ in range(20):
            positions = positions + rng.normal(scale=0.2, size=positions.shape)
            drifted = AtomSystem(positions=positions)
            outcome = greedy_remap(placement, drifted, radius=3)
            assert outcome.cost_after <= outcome.cost_before + 1e-12
            assert outcome.cost_after == pytest.approx(assignment_cost(outcome.placement, drifted))
            placement = outcome.placement.validate()
            events += 1
    assert events == 1000


def test_dump_placement_lists_every_atom():
    system = _square_layer(2)
    text = dump_placement(project_and_place(system, CoreGrid(8, 8, cores_per_atom=2), 4.0))
    lines = text.splitlines()
    assert lines[0].startswith("# grid 8x8 k=2")
    assert len(lines) == 1 + system.count
    assert len(lines[1].split()) == 3 + 2
