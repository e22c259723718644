import numpy as np
import pytest

from wafermd.core_mapping import ConfigurationError, CoreGrid, locality_bound, project_and_place
from wafermd.nt_comm import (
    ArmLengths,
    AssignmentError,
    CoverageError,
    TShape,
    assign_pair,
    assign_workers,
    build_neighbor_list,
    build_tshape,
    dump_routes,
    needs_rebuild,
    screen_candidates,
)
from wafermd.system_builder import AtomSystem, SlabSpec, build_bcc_slab

SKIN = 0.5


def test_assign_pair_examples():
    assert assign_pair((3, 5), (3, 5)) == (3, 5)
    assert assign_pair((3, 5), (7, 2), ArmLengths(4, 4)) == (7, 5)
    assert assign_pair((7, 2), (3, 5), ArmLengths(4, 4)) == (7, 5)
    assert assign_pair((3, 5), (6, 5)) == (3, 5)
    assert assign_pair((6, 5), (3, 5)) == (3, 5)


def test_worker_is_the_only_shared_core():
    a = TShape((3, 5), 4, 4, 4)
    b = TShape((7, 2), 4, 4, 4)
    shared = set(a.cores()) & set(b.cores())
    assert shared == {(7, 5)}
    assert a.covers((7, 5)) and b.covers((7, 5))


def test_out_of_reach_pair_rejected():
    with pytest.raises(AssignmentError):
        assign_pair((0, 0), (9, 1), ArmLengths(4, 4))


def test_vectorized_assignment_matches_scalar():
    rng = np.random.Generator(np.random.PCG64(9))
    a = rng.integers(0, 12, size=(400, 2))
    b = rng.integers(0, 12, size=(400, 2))
    expected = [assign_pair(tuple(x), tuple(y)) for x, y in zip(a.tolist(), b.tolist())]
    assert [tuple(w) for w in assign_workers(a, b).tolist()] == expected


def test_multicast_links_are_three_segments():
    shape = TShape((10, 4), 3, 2, 5)
    links = shape.links()
    assert len(links) == len(set(links)) == shape.cardinality == 10
    assert len(shape.cores()) == shape.cardinality + 1


def _layer(n=5, spacing=4.0):
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    xy = np.stack([ii.ravel(), jj.ravel()], axis=1) * spacing
    return AtomSystem(positions=np.column_stack([xy, np.zeros(len(xy))]))


def test_unit_arms_for_short_reach():
    system = _layer()
    grid = CoreGrid(32, 32)
    placement = project_and_place(system, grid, 4.0)
    shapes = build_tshape(placement, grid, 3.0, system=system)
    middle = shapes[(2, 2)]
    assert (middle.arm_west, middle.arm_east, middle.arm_down, middle.clipped) == (1, 1, 1, False)
    corner = shapes[(0, 0)]
    assert corner.arm_west == 0 and corner.clipped


def test_arms_longer_than_grid_rejected():
    system = _layer(3)
    grid = CoreGrid(16, 16)
    placement = project_and_place(system, grid, 4.0)
    with pytest.raises(ConfigurationError):
        build_tshape(placement, grid, 3.0, arms=ArmLengths(16, 1))


def _jittered(seed, cells=(3, 3, 3), scale=0.15):
    rng = np.random.Generator(np.random.PCG64(seed))
    system = build_bcc_slab(SlabSpec(*cells))
    return AtomSystem(positions=system.positions + rng.normal(scale=scale, size=system.positions.shape))


def _plan(system, tables, k, h, skin=SKIN):
    grid = CoreGrid(96, 96, cores_per_atom=k, diagonal_spacing=h)
    placement = project_and_place(system, grid, tables.lattice_constant)
    reach = tables.cutoff + skin
    arms = ArmLengths.from_bound(locality_bound(placement, system, reach))
    return placement, arms, build_neighbor_list(placement, system.positions, reach, skin, arms)


def _assert_one_covering_worker(system, tables, k, h):
    placement, arms, neighbors = _plan(system, tables, k, h)
    shapes = build_tshape(placement, placement.grid, tables.cutoff + SKIN, arms=arms)

    a, b = neighbors.atoms()
    listed = sorted(zip(np.minimum(a, b).tolist(), np.maximum(a, b).tolist()))
    assert len(listed) == len(set(listed))

    d = np.linalg.norm(system.positions[:, None, :] - system.positions[None, :, :], axis=2)
    within = {(int(i), int(j)) for i, j in zip(*np.nonzero(np.triu(d < tables.cutoff, k=1)))}
    assert within <= set(listed)

    streams = neighbors.streams
    base = streams.start[neighbors.pair_worker]
    source_a = streams.source[base + neighbors.ordinal_a]
    source_b = streams.source[base + neighbors.ordinal_b]
    for worker, sa, sb in zip(neighbors.workers().tolist(), source_a.tolist(), source_b.tolist()):
        assert shapes[tuple(sa)].covers(tuple(worker))
        assert shapes[tuple(sb)].covers(tuple(worker))


@pytest.mark.parametrize("h", [0, 1, 2])
@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_every_pair_has_exactly_one_covering_worker(ta_tables, h, k):
    _assert_one_covering_worker(_jittered(seed=10 * h + k), ta_tables, k, h)


@pytest.mark.slow
@pytest.mark.parametrize("seed", range(50))
def test_single_covering_worker_over_many_placements(ta_tables, seed):
    h, k = seed % 3, 1 + seed % 4
    _assert_one_covering_worker(_jittered(seed=1000 + seed, cells=(4, 4, 3), scale=0.2), ta_tables, k, h)


@pytest.mark.parametrize("k, h", [(1, 0), (2, 1), (4, 0), (3, 2)])
def test_screening_matches_vectorized_builder(ta_tables, k, h):
    system = _jittered(seed=k + h)
    placement, _, neighbors = _plan(system, ta_tables, k, h)
    for index in range(len(neighbors.streams)):
        stream = neighbors.streams.stream(index)
        found = screen_candidates(stream, system.positions, neighbors.reach, placement.grid)
        assert found == neighbors.pairs_for(stream.worker)


def test_assignments_match_routing_rule(ta_tables):
    system = _jittered(seed=3)
    placement, arms, neighbors = _plan(system, ta_tables, 3, 0)
    seen = set()
    for pair in neighbors.assignments():
        a, b = sorted((pair.atom_a, pair.atom_b))
        assert (a, b) not in seen
        seen.add((a, b))
        owners = placement.owner_linear
        splitter, partner = (a, b) if owners[a] < owners[b] else (b, a)
        source = placement.group_cores[splitter, owners[partner] % 3]
        assert pair.worker == assign_pair(tuple(source), tuple(placement.owner_core[partner]), arms)
    assert len(seen) == neighbors.pair_count


def test_arrivals_sorted_by_source_core(ta_tables):
    system = _jittered(seed=4)
    placement, _, neighbors = _plan(system, ta_tables, 2, 0)
    for index in range(len(neighbors.streams)):
        stream = neighbors.streams.stream(index)
        linear = placement.grid.linear(stream.sources)
        assert np.all(np.diff(linear) > 0)


def test_far_apart_atoms_give_empty_lists(ta_tables):
    system = AtomSystem(positions=[[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]])
    _, _, neighbors = _plan(system, ta_tables, 1, 0)
    assert neighbors.pair_count == 0
    assert neighbors.max_pairs_per_worker() == 0


def test_perfect_lattice_pair_count(ta_tables):
    system = build_bcc_slab(SlabSpec(4, 4, 4))
    _, _, exact = _plan(system, ta_tables, 1, 0, skin=0.0)
    d = np.linalg.norm(system.positions[:, None, :] - system.positions[None, :, :], axis=2)
    assert exact.pair_count == int(np.triu(d <= ta_tables.cutoff, k=1).sum())


def test_skin_list_contains_exact_list(ta_tables):
    system = _jittered(seed=5)
    _, _, exact = _plan(system, ta_tables, 1, 0, skin=0.0)
    _, _, padded = _plan(system, ta_tables, 1, 0, skin=0.5)

    def pairs(nl):
        a, b = nl.atoms()
        return set(zip(np.minimum(a, b).tolist(), np.maximum(a, b).tolist()))

    assert pairs(exact) <= pairs(padded)
    assert len(pairs(padded)) > len(pairs(exact))


def test_short_arms_raise_coverage_error(ta_tables):
    system = _jittered(seed=6)
    grid = CoreGrid(96, 96)
    placement = project_and_place(system, grid, ta_tables.lattice_constant)
    with pytest.raises(CoverageError, match="not covered"):
        build_neighbor_list(placement, system.positions, ta_tables.cutoff + SKIN, SKIN, ArmLengths(1, 1))


def test_needs_rebuild_half_skin_rule():
    positions = np.zeros((4, 3))
    assert not needs_rebuild(positions, positions, SKIN)
    moved = positions.copy()
    moved[2, 0] = SKIN
    assert needs_rebuild(moved, positions, SKIN)
    assert not needs_rebuild(positions + SKIN / 4, positions, SKIN)
    assert needs_rebuild(AtomSystem(positions=moved), positions, SKIN)


def test_route_dump(ta_tables):
    system = _jittered(seed=8, cells=(2, 2, 2))
    placement, arms, neighbors = _plan(system, ta_tables, 1, 0)
    shapes = build_tshape(placement, placement.grid, ta_tables.cutoff + SKIN, arms=arms)
    text = dump_routes(shapes, neighbors)
    lines = text.splitlines()
    assert sum(line.startswith("T ") for line in lines) == len(shapes)
    assert sum(line.startswith("P ") for line in lines) == neighbors.pair_count
