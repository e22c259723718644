"""Runtime configuration helpers."""

from __future__ import annotations

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class PotentialSettings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="WAFERMD_", extra="ignore")

    potential: Optional[Path] = None
    precision: Literal["double", "single"] = "double"


class FabricSettings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="WAFERMD_FABRIC_", extra="ignore")

    width: int = 920
    height: int = 920
    # Program region of the MD kernel: 920 x 870 = 800,400 cores, the 50 remaining
    # rows of the 920 x 920 fabric carry host I/O. At k cores per atom it holds
    # about 800,000/k atoms, the largest measured slab for each k.
    region_height: int = 870
    hop_latency: int = 1
    cost_per_hop: int = 32
    cost_per_interaction: int = 13
    cost_per_arrival: int = 1
    cost_fixed: int = 350
    cost_per_screen: int = 1
    clock_hz: float = 850e6
    anchor_cycles: int = 743


class MappingSettings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="WAFERMD_MAPPING_", extra="ignore")

    cell_width: Optional[float] = None
    rect_nx: Optional[int] = None
    rect_ny: Optional[int] = None
    skin: float = 0.5
    remap_every: int = 100
    remap_radius: int = 4


class RunSettings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="WAFERMD_RUN_", extra="ignore")

    cells_x: int = 6
    cells_y: int = 6
    cells_z: int = 6
    temperature: float = 300.0
    dt: float = 1.0
    steps: int = 100
    seed: int = 20240101
    snapshot_stride: int = 0
    log_level: str = "INFO"


class Settings(BaseModel):
    potential: PotentialSettings = Field(default_factory=PotentialSettings)
    fabric: FabricSettings = Field(default_factory=FabricSettings)
    mapping: MappingSettings = Field(default_factory=MappingSettings)
    run: RunSettings = Field(default_factory=RunSettings)


@lru_cache(maxsize=1)
def load_settings() -> Settings:
    """Return cached settings."""
    return Settings()


class RunConfig(BaseModel):
    """Everything one CLI invocation needs, validated up front."""

    potential: Optional[Path] = None
    cells: Tuple[int, int, int] = (6, 6, 6)
    lattice_constant: Optional[float] = None
    temperature: float = 300.0
    engine: Literal["reference", "wafer"] = "wafer"
    grid_width: int = 920
    grid_height: int = 920
    diagonal_spacing: int = 0
    cores_per_atom: int = 1
    skin: float = 0.5
    dt: float = 1.0
    steps: int = 100
    remap_every: int = 100
    remap_radius: int = 4
    cell_width: Optional[float] = None
    rect: Optional[Tuple[int, int]] = None
    hop_latency: int = 1
    cost_per_hop: int = 32
    cost_per_interaction: int = 13
    cost_per_arrival: int = 1
    cost_fixed: int = 350
    cost_per_screen: int = 1
    clock_hz: float = 850e6
    seed: int = 20240101
    precision: Literal["double", "single"] = "double"
    snapshot_stride: int = 0
    output: Optional[Path] = None
    snapshots: Optional[Path] = None

    @field_validator("cells")
    @classmethod
    def positive_cells(cls, value: Tuple[int, int, int]) -> Tuple[int, int, int]:
        if min(value) < 1:
            raise ValueError("cell counts must be positive")
        return value

    @field_validator("rect")
    @classmethod
    def positive_rect(cls, value: Optional[Tuple[int, int]]) -> Optional[Tuple[int, int]]:
        if value is not None and min(value) < 1:
            raise ValueError("rectangle dimensions must be positive")
        return value

    @field_validator("grid_width", "grid_height", "cores_per_atom", "remap_radius")
    @classmethod
    def at_least_one(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be at least 1")
        return value

    @field_validator(
        "diagonal_spacing",
        "steps",
        "remap_every",
        "snapshot_stride",
        "hop_latency",
        "cost_per_hop",
        "cost_per_interaction",
        "cost_per_arrival",
        "cost_fixed",
        "cost_per_screen",
    )
    @classmethod
    def non_negative_int(cls, value: int) -> int:
        if value < 0:
            raise ValueError("must be non-negative")
        return value

    @field_validator("skin", "temperature")
    @classmethod
    def non_negative_float(cls, value: float) -> float:
        if value < 0:
            raise ValueError("must be non-negative")
        return value

    @field_validator("dt", "clock_hz")
    @classmethod
    def positive_float(cls, value: float) -> float:
        if not value > 0:
            raise ValueError("must be positive")
        return value

    @field_validator("lattice_constant", "cell_width")
    @classmethod
    def positive_length(cls, value: Optional[float]) -> Optional[float]:
        if value is not None and not value > 0:
            raise ValueError("lengths must be positive")
        return value

    @model_validator(mode="after")
    def check_grid(self) -> "RunConfig":
        period = max(self.diagonal_spacing + 1, self.cores_per_atom)
        if period > self.grid_width:
            raise ValueError(f"diagonal period {period} exceeds grid width {self.grid_width}")
        return self


def defaults_from_settings(settings: Settings) -> Dict[str, Any]:
    """Flatten grouped settings into RunConfig field values."""
    rect = None
    if settings.mapping.rect_nx and settings.mapping.rect_ny:
        rect = (settings.mapping.rect_nx, settings.mapping.rect_ny)
    run = settings.run
    fabric = settings.fabric
    return {
        "potential": settings.potential.potential,
        "precision": settings.potential.precision,
        "cells": (run.cells_x, run.cells_y, run.cells_z),
        "temperature": run.temperature,
        "dt": run.dt,
        "steps": run.steps,
        "seed": run.seed,
        "snapshot_stride": run.snapshot_stride,
        "grid_width": fabric.width,
        "grid_height": fabric.height,
        "hop_latency": fabric.hop_latency,
        "cost_per_hop": fabric.cost_per_hop,
        "cost_per_interaction": fabric.cost_per_interaction,
        "cost_per_arrival": fabric.cost_per_arrival,
        "cost_fixed": fabric.cost_fixed,
        "cost_per_screen": fabric.cost_per_screen,
        "clock_hz": fabric.clock_hz,
        "skin": settings.mapping.skin,
        "remap_every": settings.mapping.remap_every,
        "remap_radius": settings.mapping.remap_radius,
        "cell_width": settings.mapping.cell_width,
        "rect": rect,
    }


def read_config_file(path: Path) -> Dict[str, Any]:
    """Parse a TOML run configuration into a flat dict."""
    try:
        with Path(path).open("rb") as handle:
            data = tomllib.load(handle)
    except FileNotFoundError as exc:
        raise ValueError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ValueError(f"config file {path} is not valid TOML: {exc}") from exc
    # a [run] table is accepted as well as top-level keys
    flat: Dict[str, Any] = {key: value for key, value in data.items() if not isinstance(value, dict)}
    for table in data.values():
        if isinstance(table, dict):
            flat.update(table)
    return flat


def build_run_config(
    settings: Optional[Settings] = None,
    config_path: Optional[Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """Merge settings, config file and flag overrides (flags win)."""
    settings = settings or load_settings()
    values = defaults_from_settings(settings)
    if config_path is not None:
        values.update(read_config_file(config_path))
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    try:
        return RunConfig.model_validate(values)
    except ValidationError as exc:
        raise ValueError(f"Invalid run configuration: {exc}") from exc


def parse_int_list(text: Optional[str]) -> List[int]:
    if text is None or not text.strip():
        return []
    return [int(item) for item in text.split(",") if item.strip()]
