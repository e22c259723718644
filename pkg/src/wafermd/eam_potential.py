"""Tabulated embedded-atom potentials: setfl files, spline evaluation and pair kernels.

The energy of N atoms is

    U = sum_i [ 1/2 sum_{j != i} phi(r_ij) + F( sum_{j != i} rho(r_ij) ) ]

with phi and rho short-ranged. All three functions come from a single-element
DYNAMO setfl table; phi is stored as r*phi(r) following that format.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.interpolate import CubicSpline

logger = logging.getLogger(__name__)

# separations at or below this are treated as coincident atoms
COINCIDENT_TOLERANCE = 0.1
# summed densities may undershoot zero by spline ringing near the density cutoff
DENSITY_TOLERANCE = 1e-9

Scalar = Union[float, np.ndarray]


class PotentialError(ValueError):
    """Raised when a potential is evaluated outside its domain."""


class SetflParseError(PotentialError):
    """Raised when a setfl file does not follow the single-element layout."""

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[Path] = None):
        where = ""
        if path is not None:
            where = f"{path}"
        if line is not None:
            where = f"{where}:{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line = line
        self.path = path


class TableRole(str, Enum):
    PAIR = "pair"
    DENSITY = "density"
    EMBED = "embed"


def resolve_dtype(precision: str) -> np.dtype:
    if precision == "double":
        return np.dtype(np.float64)
    if precision == "single":
        return np.dtype(np.float32)
    raise ValueError(f"Unknown precision mode: {precision}")


@dataclass(frozen=True)
class TabulatedFunction:
    """Samples on the uniform grid x_i = i * spacing with a natural cubic interpolant.

    ``support`` ends pair and density tables early (at the potential cutoff);
    past it, and past the last knot, they evaluate to zero. Embedding tables clamp.
    """

    samples: np.ndarray
    spacing: float
    role: TableRole
    support: Optional[float] = None
    _spline: CubicSpline = field(init=False, repr=False, compare=False)
    _slope: object = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        samples = np.array(self.samples, dtype=np.float64).reshape(-1)
        if samples.size < 2:
            raise PotentialError(f"{self.role.value} table needs at least 2 samples, got {samples.size}")
        if not self.spacing > 0:
            raise PotentialError(f"{self.role.value} table spacing must be positive, got {self.spacing}")
        if not np.all(np.isfinite(samples)):
            raise PotentialError(f"{self.role.value} table contains non-finite samples")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "spacing", float(self.spacing))
        knots = np.arange(samples.size, dtype=np.float64) * self.spacing
        spline = CubicSpline(knots, samples, bc_type="natural")
        object.__setattr__(self, "_spline", spline)
        object.__setattr__(self, "_slope", spline.derivative())

    @property
    def count(self) -> int:
        return int(self.samples.size)

    @property
    def upper(self) -> float:
        """Abscissa of the last knot."""
        return (self.count - 1) * self.spacing

    @property
    def end(self) -> float:
        if self.support is None:
            return self.upper
        return min(self.upper, self.support)


def eval_spline(f: TabulatedFunction, x: Scalar) -> Tuple[Scalar, Scalar]:
    """Return (value, derivative) of the interpolant at x."""
    xs = np.asarray(x, dtype=np.float64)
    if xs.size and np.min(xs) < 0:
        raise PotentialError(f"negative abscissa {float(np.min(xs))!r} for {f.role.value} table")
    clipped = np.minimum(xs, f.upper)
    value = np.asarray(f._spline(clipped), dtype=np.float64)
    slope = np.asarray(f._slope(clipped), dtype=np.float64)
    if f.role is not TableRole.EMBED:
        inside = xs <= f.end
        value = np.where(inside, value, 0.0)
        slope = np.where(inside, slope, 0.0)
    if np.ndim(x) == 0:
        return float(value), float(slope)
    return value, slope


@dataclass(frozen=True)
class EamTables:
    phi: TabulatedFunction
    rho: TabulatedFunction
    embed: TabulatedFunction
    cutoff: float
    lattice_constant: float
    species_mass: float
    element: str = "X"
    atomic_number: int = 0
    lattice_type: str = "bcc"
    comments: Tuple[str, str, str] = ("", "", "")

    def __post_init__(self) -> None:
        if not self.cutoff > 0:
            raise PotentialError(f"cutoff must be positive, got {self.cutoff}")
        if self.cutoff > self.rho.count * self.rho.spacing:
            raise PotentialError(
                f"cutoff {self.cutoff} exceeds tabulated range {self.rho.count * self.rho.spacing}"
            )
        if self.phi.role is not TableRole.PAIR or self.rho.role is not TableRole.DENSITY:
            raise PotentialError("phi and rho tables have the wrong roles")
        if self.embed.role is not TableRole.EMBED:
            raise PotentialError("embedding table has the wrong role")
        # pair and density tables vanish at the cutoff, not at the end of the r grid
        if self.phi.support != self.cutoff:
            object.__setattr__(self, "phi", _with_support(self.phi, self.cutoff))
        if self.rho.support != self.cutoff:
            object.__setattr__(self, "rho", _with_support(self.rho, self.cutoff))

    @property
    def nr(self) -> int:
        return self.rho.count

    @property
    def dr(self) -> float:
        return self.rho.spacing

    @property
    def nrho(self) -> int:
        return self.embed.count

    @property
    def drho(self) -> float:
        return self.embed.spacing


def _with_support(f: TabulatedFunction, support: float) -> TabulatedFunction:
    return TabulatedFunction(samples=f.samples, spacing=f.spacing, role=f.role, support=support)


def pair_terms(tables: EamTables, r: Scalar) -> Tuple[Scalar, Scalar, Scalar, Scalar]:
    """Return (phi, dphi/dr, rho, drho/dr) at separation r; all zero for r >= cutoff."""
    rs = np.asarray(r, dtype=np.float64)
    if rs.size and np.min(rs) <= COINCIDENT_TOLERANCE:
        raise PotentialError(
            f"coincident atoms: separation {float(np.min(rs))!r} A is within {COINCIDENT_TOLERANCE} A"
        )
    within = rs < tables.cutoff
    rphi, drphi = eval_spline(tables.phi, rs)
    rho, drho = eval_spline(tables.rho, rs)
    phi = np.asarray(rphi) / rs
    dphi = (np.asarray(drphi) - phi) / rs
    phi = np.where(within, phi, 0.0)
    dphi = np.where(within, dphi, 0.0)
    # the interpolant can undershoot zero just past the density's own range
    positive = within & (np.asarray(rho) > 0.0)
    rho = np.where(positive, rho, 0.0)
    drho = np.where(positive, drho, 0.0)
    if np.ndim(r) == 0:
        return float(phi), float(dphi), float(rho), float(drho)
    return phi, dphi, rho, drho


def embedding(tables: EamTables, rho_total: Scalar) -> Tuple[Scalar, Scalar]:
    """Return (F, dF/drho) at the summed host density."""
    rho = np.asarray(rho_total, dtype=np.float64)
    if rho.size and np.min(rho) < -DENSITY_TOLERANCE:
        raise PotentialError(f"negative host density {float(np.min(rho))!r}")
    rho = np.maximum(rho, 0.0)
    value, slope = eval_spline(tables.embed, rho)
    if np.ndim(rho_total) == 0:
        return float(value), float(slope)
    return value, slope


def _read_blocks(lines: Sequence[str], start: int, sizes: Sequence[Tuple[str, int]], path: Optional[Path]) -> List[np.ndarray]:
    """Read consecutive numeric blocks; rows may straddle block boundaries."""
    total = sum(size for _, size in sizes)
    flat: List[float] = []
    owners: List[int] = []
    index = start
    while len(flat) < total and index < len(lines):
        for token in lines[index].split():
            if len(flat) == total:
                break
            try:
                flat.append(float(token))
            except ValueError as exc:
                raise SetflParseError(f"bad number {token!r}", line=index + 1, path=path) from exc
            owners.append(index + 1)
        index += 1
    if len(flat) < total:
        consumed = 0
        for name, size in sizes:
            if len(flat) < consumed + size:
                found = len(flat) - consumed
                raise SetflParseError(
                    f"{name} block truncated: expected {size} values, found {max(found, 0)}",
                    line=len(lines),
                    path=path,
                )
            consumed += size
    blocks: List[np.ndarray] = []
    offset = 0
    for _, size in sizes:
        blocks.append(np.asarray(flat[offset:offset + size], dtype=np.float64))
        offset += size
    return blocks


def load_setfl(path: Union[str, Path]) -> EamTables:
    """Parse a single-element DYNAMO setfl file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise SetflParseError(f"cannot read potential file: {exc}", path=path) from exc
    lines = text.splitlines()
    if len(lines) < 6:
        raise SetflParseError("file too short for a setfl header", line=len(lines), path=path)

    comments = (lines[0].strip(), lines[1].strip(), lines[2].strip())
    elements = lines[3].split()
    try:
        n_elements = int(elements[0])
    except (IndexError, ValueError) as exc:
        raise SetflParseError("malformed element-count line", line=4, path=path) from exc
    if n_elements != 1:
        raise SetflParseError(f"multi-element unsupported ({n_elements} elements)", line=4, path=path)
    element = elements[1] if len(elements) > 1 else "X"

    grid = lines[4].split()
    try:
        nrho, drho, nr, dr, cutoff = int(grid[0]), float(grid[1]), int(grid[2]), float(grid[3]), float(grid[4])
    except (IndexError, ValueError) as exc:
        raise SetflParseError("malformed grid line (Nrho drho Nr dr cutoff)", line=5, path=path) from exc

    species = lines[5].split()
    try:
        atomic_number, mass, lattice_constant = int(species[0]), float(species[1]), float(species[2])
        lattice_type = species[3] if len(species) > 3 else "bcc"
    except (IndexError, ValueError) as exc:
        raise SetflParseError("malformed element line (Z mass a lattice)", line=6, path=path) from exc

    embed, rho, rphi = _read_blocks(lines, 6, (("F", nrho), ("rho", nr), ("r*phi", nr)), path)
    try:
        tables = EamTables(
            phi=TabulatedFunction(rphi, dr, TableRole.PAIR),
            rho=TabulatedFunction(rho, dr, TableRole.DENSITY),
            embed=TabulatedFunction(embed, drho, TableRole.EMBED),
            cutoff=cutoff,
            lattice_constant=lattice_constant,
            species_mass=mass,
            element=element,
            atomic_number=atomic_number,
            lattice_type=lattice_type,
            comments=comments,
        )
    except PotentialError as exc:
        raise SetflParseError(str(exc), line=5, path=path) from exc
    logger.info("Loaded %s potential from %s (cutoff %.3f A, Nr=%d, Nrho=%d)", element, path, cutoff, nr, nrho)
    return tables


def _format_block(values: Iterable[float]) -> str:
    out = []
    row = []
    for value in values:
        row.append("% 20.16e" % value)
        if len(row) == 5:
            out.append("  ".join(row))
            row = []
    if row:
        out.append("  ".join(row))
    return "\n".join(out)


def write_setfl(path: Union[str, Path], tables: EamTables, comments: Optional[Sequence[str]] = None) -> Path:
    """Write tables back out in setfl layout."""
    path = Path(path)
    header = list(comments or tables.comments)
    header = (header + ["", "", ""])[:3]
    lines = [line or "-" for line in header]
    lines.append(f"1 {tables.element}")
    lines.append(f"{tables.nrho} {tables.drho!r} {tables.nr} {tables.dr!r} {tables.cutoff!r}")
    lines.append(f"{tables.atomic_number} {tables.species_mass!r} {tables.lattice_constant!r} {tables.lattice_type}")
    lines.append(_format_block(tables.embed.samples))
    lines.append(_format_block(tables.rho.samples))
    lines.append(_format_block(tables.phi.samples))
    path.write_text("\n".join(lines) + "\n")
    return path
