import numpy as np
import pytest

from wafermd.reference_engine import cell_list_pairs
from wafermd.system_builder import (
    KB_EV,
    AtomSystem,
    SlabSpec,
    SystemBuildError,
    build_bcc_slab,
    init_velocities,
    prepare_slab,
    read_xyz,
    surface_dominated,
    write_xyz,
)


def test_default_slab_has_432_atoms():
    system = build_bcc_slab(SlabSpec(6, 6, 6))
    assert system.count == 432
    np.testing.assert_allclose(system.box, [6 * 3.3026] * 3)
    assert system.min_separation() == pytest.approx(np.sqrt(3) / 2 * 3.3026)


def test_single_cell_slab():
    system = build_bcc_slab(SlabSpec(1, 1, 1))
    assert system.count == 2
    np.testing.assert_allclose(system.positions[1], [3.3026 / 2] * 3)


def test_invalid_slab_spec():
    with pytest.raises(SystemBuildError):
        SlabSpec(0, 4, 4)
    with pytest.raises(SystemBuildError):
        SlabSpec(4, 4, 4, temperature=-1.0)


def test_surface_dominated_flag():
    assert surface_dominated(SlabSpec(1, 1, 1), cutoff=4.2)
    assert not surface_dominated(SlabSpec(6, 6, 2), cutoff=4.2)


def test_velocities_hit_target_temperature_with_zero_momentum():
    system = prepare_slab(SlabSpec(6, 6, 6, temperature=300.0, seed=11))
    assert system.temperature() == pytest.approx(300.0, rel=1e-12)
    assert np.all(np.abs(system.momentum()) < 1e-9)
    expected = 0.5 * (3 * system.count - 3) * KB_EV * 300.0
    assert system.kinetic_energy() == pytest.approx(expected, rel=1e-12)


def test_velocities_reproducible_per_seed():
    base = build_bcc_slab(SlabSpec(3, 3, 3))
    first = init_velocities(base, 300.0, seed=5)
    again = init_velocities(base, 300.0, seed=5)
    other = init_velocities(base, 300.0, seed=6)
    np.testing.assert_array_equal(first.velocities, again.velocities)
    assert not np.array_equal(first.velocities, other.velocities)


def test_zero_temperature_and_tiny_systems():
    base = build_bcc_slab(SlabSpec(2, 2, 2))
    assert not np.any(init_velocities(base, 0.0, seed=1).velocities)
    lonely = AtomSystem(positions=[[0.0, 0.0, 0.0]], mass=180.9479)
    assert not np.any(init_velocities(lonely, 0.0, seed=1).velocities)
    with pytest.raises(SystemBuildError, match="at least 2 atoms"):
        init_velocities(lonely, 300.0, seed=1)


def test_validate_rejects_coincident_atoms():
    system = AtomSystem(positions=[[0.0, 0.0, 0.0], [0.05, 0.0, 0.0]])
    with pytest.raises(SystemBuildError, match="closer than"):
        system.validate()


def _interior_counts(system, cutoff):
    i, j = cell_list_pairs(system.positions, cutoff)
    counts = np.bincount(np.concatenate([i, j]), minlength=system.count)
    low = system.positions.min(axis=0) + cutoff
    high = system.positions.max(axis=0) - cutoff
    interior = np.all((system.positions >= low) & (system.positions <= high), axis=1)
    assert interior.any()
    return counts[interior]


def test_interior_ta_atoms_have_14_neighbors(ta_tables):
    system = build_bcc_slab(SlabSpec(6, 6, 6, lattice_constant=ta_tables.lattice_constant))
    assert set(_interior_counts(system, ta_tables.cutoff).tolist()) == {14}


def test_interior_w_atoms_have_58_partners(w_tables):
    # the first five BCC shells (8 + 6 + 12 + 24 + 8) lie inside 6 A; 59 counts the atom itself
    system = build_bcc_slab(SlabSpec(8, 8, 8, lattice_constant=w_tables.lattice_constant))
    assert set(_interior_counts(system, w_tables.cutoff).tolist()) == {58}


def test_xyz_round_trip_keeps_box_and_mass(tmp_path):
    system = prepare_slab(SlabSpec(2, 2, 2, temperature=100.0, seed=3))
    path = write_xyz(tmp_path / "slab.xyz", system, comment="step=0")
    loaded = read_xyz(path)
    np.testing.assert_allclose(loaded.positions, system.positions, atol=1e-9)
    np.testing.assert_allclose(loaded.box, system.box, atol=1e-6)
    assert loaded.mass == system.mass
    assert loaded.species == "Ta"


def test_xyz_append_writes_frames(tmp_path):
    system = build_bcc_slab(SlabSpec(1, 1, 1))
    path = tmp_path / "frames.xyz"
    write_xyz(path, system, comment="step=0")
    write_xyz(path, system, comment="step=1", append=True)
    assert path.read_text().count("step=") == 2


def test_read_xyz_reports_bad_line(tmp_path):
    path = tmp_path / "bad.xyz"
    path.write_text("2\ncomment\nTa 0 0 0\nTa 1.0 oops 0\n")
    with pytest.raises(SystemBuildError, match=":4:"):
        read_xyz(path)
