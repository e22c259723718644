"""Built-in Ta and W parameter sets tabulated onto setfl grids."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict

import numpy as np

from .eam_potential import EamTables, TableRole, TabulatedFunction

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FinnisSinclairParameters:
    """Finnis-Sinclair BCC form: rho = (r-d)^2, phi = (r-c)^2 (c0 + c1 r + c2 r^2), F = -A sqrt(rho)."""

    d: float
    A: float
    c: float
    c0: float
    c1: float
    c2: float
    lattice_constant: float
    mass: float
    atomic_number: int
    element: str

    def density(self, r: np.ndarray) -> np.ndarray:
        return np.where(r < self.d, (r - self.d) ** 2, 0.0)

    def pair(self, r: np.ndarray) -> np.ndarray:
        poly = self.c0 + self.c1 * r + self.c2 * r * r
        return np.where(r < self.c, (r - self.c) ** 2 * poly, 0.0)

    def embed(self, rho: np.ndarray) -> np.ndarray:
        return -self.A * np.sqrt(np.maximum(rho, 0.0))


@dataclass(frozen=True)
class ZhouParameters:
    """Zhou-Johnson-Wadley single-element form."""

    re: float
    fe: float
    rho_e: float
    rho_s: float
    alpha: float
    beta: float
    A: float
    B: float
    kappa: float
    lam: float
    Fn: tuple
    F: tuple
    eta: float
    Fe: float
    lattice_constant: float
    mass: float
    atomic_number: int
    element: str

    def density(self, r: np.ndarray) -> np.ndarray:
        x = r / self.re
        return self.fe * np.exp(-self.beta * (x - 1.0)) / (1.0 + (x - self.lam) ** 20)

    def pair(self, r: np.ndarray) -> np.ndarray:
        x = r / self.re
        repulsive = self.A * np.exp(-self.alpha * (x - 1.0)) / (1.0 + (x - self.kappa) ** 20)
        attractive = self.B * np.exp(-self.beta * (x - 1.0)) / (1.0 + (x - self.lam) ** 20)
        return repulsive - attractive

    def embed(self, rho: np.ndarray) -> np.ndarray:
        rho_n = 0.85 * self.rho_e
        rho_o = 1.15 * self.rho_e
        low = sum(coef * (rho / rho_n - 1.0) ** i for i, coef in enumerate(self.Fn))
        mid = sum(coef * (rho / self.rho_e - 1.0) ** i for i, coef in enumerate(self.F))
        ratio = np.maximum(rho, 1e-300) / self.rho_s
        high = self.Fe * (1.0 - self.eta * np.log(ratio)) * ratio ** self.eta
        return np.where(rho < rho_n, low, np.where(rho < rho_o, mid, high))


TANTALUM = FinnisSinclairParameters(
    d=4.076980,
    A=2.591061,
    c=4.2,
    c0=1.2157373,
    c1=0.0271471,
    c2=-0.1217350,
    lattice_constant=3.3026,
    mass=180.9479,
    atomic_number=73,
    element="Ta",
)

TUNGSTEN = ZhouParameters(
    re=2.740840,
    fe=3.487340,
    rho_e=37.234847,
    rho_s=37.234847,
    alpha=8.900114,
    beta=4.746728,
    A=0.882435,
    B=1.394592,
    kappa=0.139209,
    lam=0.278417,
    Fn=(-4.946281, -0.148818, 0.365057, -4.432406),
    F=(-4.96, 0.0, 0.661935, 0.348147),
    eta=-0.582714,
    Fe=-4.961306,
    lattice_constant=3.1652,
    mass=183.84,
    atomic_number=74,
    element="W",
)

# cutoff (A) and largest tabulated host density for each built-in
BUILTINS: Dict[str, tuple] = {
    "ta": (TANTALUM, 4.2, 60.0),
    "w": (TUNGSTEN, 6.0, 120.0),
}


def tabulate(
    params,
    cutoff: float,
    rho_max: float,
    nr: int = 5000,
    nrho: int = 5000,
) -> EamTables:
    """Sample an analytic parameter set onto uniform r and rho grids."""
    dr = cutoff * 1.05 / (nr - 1)
    drho = rho_max / (nrho - 1)
    r = np.arange(nr) * dr
    rho = np.arange(nrho) * drho
    rphi = r * params.pair(r)
    density = params.density(r)
    # keep the stored tables short-ranged past the cutoff
    rphi[r >= cutoff] = 0.0
    density[r >= cutoff] = 0.0
    return EamTables(
        phi=TabulatedFunction(rphi, dr, TableRole.PAIR),
        rho=TabulatedFunction(density, dr, TableRole.DENSITY),
        embed=TabulatedFunction(params.embed(rho), drho, TableRole.EMBED),
        cutoff=cutoff,
        lattice_constant=params.lattice_constant,
        species_mass=params.mass,
        element=params.element,
        atomic_number=params.atomic_number,
        lattice_type="bcc",
        comments=(
            f"{params.element} {type(params).__name__}",
            "tabulated by wafermd",
            f"Nr={nr} Nrho={nrho}",
        ),
    )


def tabulate_builtin(name: str, nr: int = 5000, nrho: int = 5000) -> EamTables:
    try:
        params, cutoff, rho_max = BUILTINS[name.lower()]
    except KeyError as exc:
        raise ValueError(f"Unknown built-in potential {name!r}; choose from {sorted(BUILTINS)}") from exc
    logger.info("Tabulating built-in %s potential (cutoff %.2f A)", params.element, cutoff)
    return tabulate(params, cutoff, rho_max, nr=nr, nrho=nrho)
