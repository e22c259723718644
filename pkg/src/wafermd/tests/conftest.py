from pathlib import Path

import numpy as np
import pytest

from wafermd.eam_potential import EamTables, load_setfl, write_setfl
from wafermd.potentials import tabulate_builtin
from wafermd.system_builder import AtomSystem, SlabSpec, build_bcc_slab


@pytest.fixture(scope="session")
def ta_path(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("potentials") / "Ta.eam.alloy"
    return write_setfl(path, tabulate_builtin("ta"))


@pytest.fixture(scope="session")
def w_path(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("potentials") / "W.eam.alloy"
    return write_setfl(path, tabulate_builtin("w"))


@pytest.fixture(scope="session")
def ta_tables(ta_path) -> EamTables:
    return load_setfl(ta_path)


@pytest.fixture(scope="session")
def w_tables(w_path) -> EamTables:
    return load_setfl(w_path)


def ta_slab(cells=(3, 3, 3), jitter=0.0, seed=7) -> AtomSystem:
    spec = SlabSpec(cells_x=cells[0], cells_y=cells[1], cells_z=cells[2])
    system = build_bcc_slab(spec)
    if jitter:
        rng = np.random.Generator(np.random.PCG64(seed))
        system.positions += rng.normal(scale=jitter, size=system.positions.shape)
    return system


@pytest.fixture
def make_slab():
    return ta_slab


def random_cluster(seed, low=20, high=500, jitter=0.1) -> AtomSystem:
    """Jittered subset of a bcc block with a random size in [low, high]."""
    rng = np.random.Generator(np.random.PCG64(seed))
    n = int(rng.integers(low, high + 1))
    block = build_bcc_slab(SlabSpec(cells_x=6, cells_y=6, cells_z=7))
    picked = np.sort(rng.choice(block.count, size=n, replace=False))
    positions = block.positions[picked] + rng.normal(scale=jitter, size=(n, 3))
    return AtomSystem(positions=positions, mass=block.mass)


@pytest.fixture
def make_cluster():
    return random_cluster
