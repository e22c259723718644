"""Atomistic systems: BCC slabs, Maxwell-Boltzmann velocities and XYZ interchange."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

# Boltzmann constant in eV/K
KB_EV = 8.617333262e-5
# one amu * (A/fs)^2 expressed in eV
MVV2E = 1.0364269e2
MIN_SEPARATION = 0.1


class SystemBuildError(ValueError):
    """Raised when an atomistic system or slab specification is invalid."""


@dataclass
class AtomSystem:
    """Single-species atoms in an open (non-periodic) box."""

    positions: np.ndarray
    velocities: Optional[np.ndarray] = None
    forces: Optional[np.ndarray] = None
    mass: float = 1.0
    box: Optional[np.ndarray] = None
    species: str = "X"

    def __post_init__(self) -> None:
        positions = np.array(self.positions, copy=True)
        if positions.dtype.kind != "f":
            positions = positions.astype(np.float64)
        positions = positions.reshape(-1, 3)
        n = positions.shape[0]
        dtype = positions.dtype
        velocities = np.zeros((n, 3), dtype=dtype) if self.velocities is None else np.array(self.velocities, dtype=dtype, copy=True)
        forces = np.zeros((n, 3), dtype=dtype) if self.forces is None else np.array(self.forces, dtype=dtype, copy=True)
        if velocities.shape != (n, 3) or forces.shape != (n, 3):
            raise SystemBuildError(f"velocity/force arrays must have shape ({n}, 3)")
        if self.box is None:
            extent = np.ptp(positions, axis=0) if n else np.zeros(3)
            box = np.maximum(extent, 1.0)
        else:
            box = np.asarray(self.box, dtype=np.float64).reshape(3)
        if np.any(box <= 0):
            raise SystemBuildError(f"box extents must be positive, got {box.tolist()}")
        if not self.mass > 0:
            raise SystemBuildError(f"mass must be positive, got {self.mass}")
        self.positions = positions
        self.velocities = velocities
        self.forces = forces
        self.box = box

    @property
    def count(self) -> int:
        return int(self.positions.shape[0])

    @property
    def dtype(self) -> np.dtype:
        return self.positions.dtype

    def copy(self) -> "AtomSystem":
        return replace(self)

    def astype(self, dtype) -> "AtomSystem":
        return replace(
            self,
            positions=self.positions.astype(dtype),
            velocities=self.velocities.astype(dtype),
            forces=self.forces.astype(dtype),
        )

    def kinetic_energy(self) -> float:
        v = self.velocities.astype(np.float64)
        return float(0.5 * self.mass * MVV2E * np.sum(v * v))

    def momentum(self) -> np.ndarray:
        return self.mass * self.velocities.astype(np.float64).sum(axis=0)

    def temperature(self) -> float:
        dof = 3 * self.count - 3
        if dof <= 0:
            return 0.0
        return 2.0 * self.kinetic_energy() / (dof * KB_EV)

    def min_separation(self) -> float:
        if self.count < 2:
            return float("inf")
        distances, _ = cKDTree(self.positions.astype(np.float64)).query(self.positions.astype(np.float64), k=2)
        return float(distances[:, 1].min())

    def validate(self) -> "AtomSystem":
        separation = self.min_separation()
        if separation <= MIN_SEPARATION:
            raise SystemBuildError(f"atoms closer than {MIN_SEPARATION} A (min separation {separation:.4f} A)")
        return self


@dataclass(frozen=True)
class SlabSpec:
    cells_x: int
    cells_y: int
    cells_z: int = 6
    lattice_constant: float = 3.3026
    temperature: float = 0.0
    seed: int = 0
    mass: float = 180.9479
    species: str = "Ta"

    def __post_init__(self) -> None:
        if min(self.cells_x, self.cells_y, self.cells_z) < 1:
            raise SystemBuildError("slab cell counts must be positive")
        if not self.lattice_constant > 0:
            raise SystemBuildError("lattice constant must be positive")
        if self.temperature < 0:
            raise SystemBuildError("temperature must be non-negative")

    @property
    def atom_count(self) -> int:
        return 2 * self.cells_x * self.cells_y * self.cells_z


def build_bcc_slab(spec: SlabSpec) -> AtomSystem:
    """Perfect BCC slab, corner + body-center per cell, open boundaries."""
    ix, iy, iz = np.meshgrid(
        np.arange(spec.cells_x), np.arange(spec.cells_y), np.arange(spec.cells_z), indexing="ij"
    )
    corners = np.stack([ix, iy, iz], axis=-1).reshape(-1, 3).astype(np.float64)
    basis = np.array([[0.0, 0.0, 0.0], [0.5, 0.5, 0.5]])
    positions = (corners[:, None, :] + basis[None, :, :]).reshape(-1, 3) * spec.lattice_constant
    box = np.array([spec.cells_x, spec.cells_y, spec.cells_z], dtype=np.float64) * spec.lattice_constant
    logger.debug("Built %d-atom BCC slab %dx%dx%d", positions.shape[0], spec.cells_x, spec.cells_y, spec.cells_z)
    return AtomSystem(positions=positions, mass=spec.mass, box=box, species=spec.species)


def surface_dominated(spec: SlabSpec, cutoff: float) -> bool:
    """True when the slab is thinner than two cutoffs in x or y."""
    return min(spec.cells_x, spec.cells_y) * spec.lattice_constant < 2.0 * cutoff


def init_velocities(system: AtomSystem, temperature: float, seed: int) -> AtomSystem:
    """Maxwell-Boltzmann draw, zero net momentum, kinetic energy rescaled to (3N-3) kT / 2."""
    if temperature < 0:
        raise SystemBuildError(f"temperature must be non-negative, got {temperature}")
    n = system.count
    if temperature == 0:
        return replace(system, velocities=np.zeros((n, 3), dtype=system.dtype))
    if n < 2:
        raise SystemBuildError("need at least 2 atoms to remove momentum and keep a temperature")
    rng = np.random.Generator(np.random.PCG64(seed))
    sigma = np.sqrt(KB_EV * temperature / (system.mass * MVV2E))
    velocities = rng.standard_normal((n, 3)) * sigma
    velocities -= velocities.mean(axis=0)
    target = 0.5 * (3 * n - 3) * KB_EV * temperature
    current = 0.5 * system.mass * MVV2E * np.sum(velocities * velocities)
    velocities *= np.sqrt(target / current)
    return replace(system, velocities=velocities.astype(system.dtype))


def prepare_slab(spec: SlabSpec) -> AtomSystem:
    system = build_bcc_slab(spec)
    return init_velocities(system, spec.temperature, spec.seed)


def write_xyz(path: Union[str, Path], system: AtomSystem, comment: str = "", append: bool = False) -> Path:
    path = Path(path)
    box = " ".join(f"{value:.6f}" for value in system.box)
    header = f"{system.count}\n{comment} box={box} mass={system.mass!r}".rstrip() + "\n"
    rows = [f"{system.species} {x:.10f} {y:.10f} {z:.10f}" for x, y, z in system.positions.astype(np.float64)]
    with path.open("a" if append else "w") as handle:
        handle.write(header)
        if rows:
            handle.write("\n".join(rows) + "\n")
    return path


def read_xyz(path: Union[str, Path], mass: Optional[float] = None) -> AtomSystem:
    """Read the first frame of an XYZ file."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise SystemBuildError(f"cannot read {path}: {exc}") from exc
    try:
        count = int(lines[0].split()[0])
    except (IndexError, ValueError) as exc:
        raise SystemBuildError(f"{path}:1: missing atom count") from exc
    comment = lines[1] if len(lines) > 1 else ""
    box = None
    file_mass = None
    for token in comment.split():
        if token.startswith("mass="):
            file_mass = float(token.split("=", 1)[1])
    if "box=" in comment:
        tail = comment.split("box=", 1)[1].split()
        box = np.array([float(value) for value in tail[:3]])
    species = "X"
    positions = np.zeros((count, 3))
    for index in range(count):
        line_no = index + 3
        try:
            fields = lines[index + 2].split()
            species = fields[0]
            positions[index] = [float(value) for value in fields[1:4]]
        except (IndexError, ValueError) as exc:
            raise SystemBuildError(f"{path}:{line_no}: malformed atom line") from exc
    return AtomSystem(
        positions=positions,
        mass=mass or file_mass or 1.0,
        box=box,
        species=species,
    )
