"""Serial EAM oracle: brute-force and cell-list forces plus velocity Verlet.

Every engine in the package funnels pair values through ``evaluate_pairs`` /
``reduce_by_target``: contributions are summed per target atom in ascending
partner order, so the result does not depend on where or in which order the
pairs were produced.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, replace
from typing import Callable, List, Optional, Tuple

import numpy as np

from .eam_potential import EamTables, embedding, pair_terms, resolve_dtype
from .system_builder import MVV2E, AtomSystem

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ForceResult:
    forces: np.ndarray
    potential_energy: float
    per_atom_density: np.ndarray
    per_atom_energy: np.ndarray
    embedding_slope: np.ndarray

    @property
    def net_force(self) -> np.ndarray:
        return self.forces.astype(np.float64).sum(axis=0)


@dataclass(frozen=True)
class EnergyRecord:
    step: int
    kinetic: float
    potential: float

    @property
    def total(self) -> float:
        return self.kinetic + self.potential


def reduce_by_target(count: int, target: np.ndarray, partner: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Sum ``values`` into ``count`` slots, per target in ascending partner order."""
    out = np.zeros((count,) + values.shape[1:], dtype=values.dtype)
    if target.size == 0:
        return out
    order = np.lexsort((partner, target))
    np.add.at(out, target[order], values[order])
    return out


def pair_geometry(xi: np.ndarray, xj: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Separation vector x_j - x_i and its length, evaluated the same way everywhere."""
    dx = xj - xi
    r = np.sqrt(dx[:, 0] * dx[:, 0] + dx[:, 1] * dx[:, 1] + dx[:, 2] * dx[:, 2])
    return dx, r


def canonicalize(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Order each pair so the first index is the smaller one."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    return np.minimum(a, b), np.maximum(a, b)


def evaluate_pairs(
    positions: np.ndarray,
    pair_i: np.ndarray,
    pair_j: np.ndarray,
    tables: EamTables,
    dtype=np.float64,
) -> ForceResult:
    """EAM energy, densities and forces from an explicit list of unordered pairs.

    Pairs must satisfy i < j and include every pair closer than the cutoff;
    extra pairs beyond the cutoff contribute exact zeros.
    """
    dtype = np.dtype(dtype)
    positions = np.asarray(positions, dtype=dtype)
    n = positions.shape[0]
    i = np.asarray(pair_i, dtype=np.int64)
    j = np.asarray(pair_j, dtype=np.int64)
    values = pair_values(positions[i], positions[j], tables, dtype)
    return assemble(n, i, j, values, tables, dtype)


def pair_values(xi: np.ndarray, xj: np.ndarray, tables: EamTables, dtype) -> dict:
    """Per-pair kernel outputs for canonical pairs (first atom has the smaller id)."""
    dx, r = pair_geometry(xi, xj)
    if r.size:
        phi, dphi, rho, drho = pair_terms(tables, r)
    else:
        phi = dphi = rho = drho = np.zeros(0)
    return {
        "dx": dx,
        "r": r,
        "phi": np.asarray(phi).astype(dtype, copy=False),
        "dphi": np.asarray(dphi).astype(dtype, copy=False),
        "rho": np.asarray(rho).astype(dtype, copy=False),
        "drho": np.asarray(drho).astype(dtype, copy=False),
    }


def embed_densities(count: int, i: np.ndarray, j: np.ndarray, rho: np.ndarray, tables: EamTables, dtype):
    """Host densities from per-pair contributions, then F and F' per atom."""
    target = np.concatenate([i, j])
    partner = np.concatenate([j, i])
    density = reduce_by_target(count, target, partner, np.concatenate([rho, rho]))
    value, slope = embedding(tables, density) if count else (np.zeros(0), np.zeros(0))
    return density, np.asarray(value).astype(dtype, copy=False), np.asarray(slope).astype(dtype, copy=False)


def pair_forces(values: dict, slope_i: np.ndarray, slope_j: np.ndarray) -> np.ndarray:
    """Force on the first atom of each pair: [phi' + (F'_i + F'_j) rho'] * dx / r."""
    coef = values["dphi"] + (slope_i + slope_j) * values["drho"]
    return (coef / values["r"])[:, None] * values["dx"]


def assemble(count: int, i: np.ndarray, j: np.ndarray, values: dict, tables: EamTables, dtype) -> ForceResult:
    density, embed_energy, slope = embed_densities(count, i, j, values["rho"], tables, dtype)
    target = np.concatenate([i, j])
    partner = np.concatenate([j, i])
    pair_energy = reduce_by_target(count, target, partner, np.concatenate([values["phi"], values["phi"]]))
    per_atom_energy = (0.5 * pair_energy + embed_energy).astype(dtype, copy=False)
    fvec = pair_forces(values, slope[i], slope[j])
    forces = reduce_by_target(count, target, partner, np.concatenate([fvec, -fvec]).astype(dtype, copy=False))
    if count == 0:
        forces = np.zeros((0, 3), dtype=dtype)
    return ForceResult(
        forces=forces,
        potential_energy=float(np.sum(per_atom_energy)),
        per_atom_density=density,
        per_atom_energy=per_atom_energy,
        embedding_slope=slope,
    )


def all_pairs(count: int) -> Tuple[np.ndarray, np.ndarray]:
    i, j = np.triu_indices(count, k=1)
    return i.astype(np.int64), j.astype(np.int64)


_CELL_OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)


def cell_list_pairs(positions: np.ndarray, reach: float) -> Tuple[np.ndarray, np.ndarray]:
    """All pairs (i < j) closer than or at ``reach``, found through a binned cell list."""
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    if n < 2:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    if not reach > 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    origin = positions.min(axis=0)
    bins = np.floor((positions - origin) / reach).astype(np.int64)
    dims = bins.max(axis=0) + 1
    linear = (bins[:, 0] * dims[1] + bins[:, 1]) * dims[2] + bins[:, 2]
    order = np.argsort(linear, kind="stable")
    sorted_cells = linear[order]
    firsts: List[np.ndarray] = []
    seconds: List[np.ndarray] = []
    atoms = np.arange(n, dtype=np.int64)
    for offset in _CELL_OFFSETS:
        neighbor = bins + offset
        valid = np.all((neighbor >= 0) & (neighbor < dims), axis=1)
        if not np.any(valid):
            continue
        cell = (neighbor[valid, 0] * dims[1] + neighbor[valid, 1]) * dims[2] + neighbor[valid, 2]
        start = np.searchsorted(sorted_cells, cell, side="left")
        stop = np.searchsorted(sorted_cells, cell, side="right")
        counts = stop - start
        total = int(counts.sum())
        if total == 0:
            continue
        first = np.repeat(atoms[valid], counts)
        base = np.repeat(start - np.cumsum(counts) + counts, counts)
        second = order[np.arange(total) + base]
        keep = first < second
        firsts.append(first[keep])
        seconds.append(second[keep])
    if not firsts:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    i = np.concatenate(firsts)
    j = np.concatenate(seconds)
    d = positions[j] - positions[i]
    close = np.einsum("ij,ij->i", d, d) <= reach * reach
    i, j = i[close], j[close]
    rank = np.lexsort((j, i))
    return i[rank], j[rank]


def compute_forces_bruteforce(system: AtomSystem, tables: EamTables, precision: str = "double") -> ForceResult:
    """Direct double loop over all pairs."""
    i, j = all_pairs(system.count)
    return evaluate_pairs(system.positions, i, j, tables, resolve_dtype(precision))


def compute_forces_celllist(
    system: AtomSystem, tables: EamTables, skin: float = 0.0, precision: str = "double"
) -> ForceResult:
    if skin < 0:
        raise ValueError(f"skin must be non-negative, got {skin}")
    i, j = cell_list_pairs(system.positions, tables.cutoff + skin)
    return evaluate_pairs(system.positions, i, j, tables, resolve_dtype(precision))


def acceleration(system: AtomSystem, forces: np.ndarray) -> np.ndarray:
    """Force (eV/A) to acceleration (A/fs^2)."""
    return forces / (system.mass * MVV2E)


def half_kick(system: AtomSystem, forces: np.ndarray, dt: float) -> AtomSystem:
    velocities = system.velocities + (0.5 * dt) * acceleration(system, forces).astype(system.dtype)
    return replace(system, velocities=velocities)


def drift(system: AtomSystem, dt: float) -> AtomSystem:
    return replace(system, positions=system.positions + dt * system.velocities)


def verlet_step(
    system: AtomSystem,
    forces: ForceResult,
    dt: float,
    evaluate: Callable[[AtomSystem], ForceResult],
) -> Tuple[AtomSystem, ForceResult]:
    """Velocity Verlet: half kick, drift, new forces, half kick."""
    if dt < 0:
        raise ValueError(f"dt must be non-negative, got {dt}")
    moved = drift(half_kick(system, forces.forces, dt), dt)
    fresh = evaluate(moved)
    done = half_kick(moved, fresh.forces, dt)
    return replace(done, forces=fresh.forces), fresh


def integrate_nve(
    system: AtomSystem,
    tables: EamTables,
    dt: float,
    steps: int,
    skin: float = 0.0,
    precision: str = "double",
    callback: Optional[Callable[[int, AtomSystem, ForceResult], None]] = None,
) -> Tuple[AtomSystem, List[EnergyRecord]]:
    """Plain NVE loop on cell-list forces rebuilt every step."""

    def evaluate(state: AtomSystem) -> ForceResult:
        return compute_forces_celllist(state, tables, skin, precision)

    result = evaluate(system)
    system = replace(system, forces=result.forces)
    records = [EnergyRecord(0, system.kinetic_energy(), result.potential_energy)]
    for step in range(1, steps + 1):
        system, result = verlet_step(system, result, dt, evaluate)
        records.append(EnergyRecord(step, system.kinetic_energy(), result.potential_energy))
        if callback is not None:
            callback(step, system, result)
    return system, records
