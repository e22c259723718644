"""Command-line entry point for the wafermd simulator."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from dotenv import load_dotenv

from .config import RunConfig, build_run_config, load_settings, parse_int_list
from .core_mapping import (
    ConfigurationError,
    CoreGrid,
    LocalityError,
    PlacementError,
    dump_placement,
    locality_bound,
    project_and_place,
    remap_until_stable,
)
from .eam_potential import EamTables, load_setfl, write_setfl
from .nt_comm import ArmLengths, CoverageError, dump_routes
from .potentials import BUILTINS, tabulate_builtin
from .reference_engine import compute_forces_bruteforce, integrate_nve
from .report_formatter import (
    RemapRecord,
    StepRecord,
    format_verify,
    render_json_lines,
    render_sweep_csv,
    validate_sweep_rows,
)
from .system_builder import AtomSystem, SlabSpec, prepare_slab, surface_dominated, write_xyz
from .wse_engine import (
    ConsistencyError,
    FabricModel,
    WaferOptions,
    WaferState,
    build_exchange_plan,
    calibrate,
    compute_forces_wafer,
    estimate_cost,
    initialize_state,
    representative_stats,
    run_trajectory,
)

logger = logging.getLogger("wafermd")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2

TOLERANCES = {"double": 1e-9, "single": 1e-4}


class UsageError(ValueError):
    """Raised when the command line or its inputs cannot be used."""


def _pair(text: Optional[str], name: str) -> Optional[Tuple[int, int]]:
    if text is None:
        return None
    values = parse_int_list(text)
    if len(values) != 2:
        raise UsageError(f"{name} needs two comma-separated integers, got {text!r}")
    return values[0], values[1]


def _triple(text: Optional[str]) -> Optional[Tuple[int, int, int]]:
    if text is None:
        return None
    values = parse_int_list(text)
    if len(values) != 3:
        raise UsageError(f"--cells needs three comma-separated integers, got {text!r}")
    return values[0], values[1], values[2]


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="TOML run configuration")
    parser.add_argument("--potential", type=Path, help="single-element setfl file")
    parser.add_argument("--cells", help="slab size in lattice cells, X,Y,Z")
    parser.add_argument("--lattice-constant", type=float)
    parser.add_argument("--temperature", type=float)
    parser.add_argument("--engine", choices=("reference", "wafer"))
    parser.add_argument("--grid", help="core grid WIDTH,HEIGHT")
    parser.add_argument("--diagonal-spacing", type=int, help="empty diagonals between occupied ones (h)")
    parser.add_argument("-k", "--cores-per-atom", type=int)
    parser.add_argument("--skin", type=float)
    parser.add_argument("--dt", type=float, help="timestep in fs")
    parser.add_argument("--steps", type=int)
    parser.add_argument("--remap-every", type=int)
    parser.add_argument("--remap-radius", type=int)
    parser.add_argument("--cell-width", type=float)
    parser.add_argument("--rect", help="slots per cell NX,NY")
    parser.add_argument("--hop-latency", type=int)
    parser.add_argument("--cost-per-hop", type=int)
    parser.add_argument("--cost-per-interaction", type=int)
    parser.add_argument("--cost-per-arrival", type=int)
    parser.add_argument("--cost-fixed", type=int)
    parser.add_argument("--cost-per-screen", type=int)
    parser.add_argument("--clock-hz", type=float)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--precision", choices=("double", "single"))
    parser.add_argument("--snapshot-stride", type=int)
    parser.add_argument("-o", "--output", type=Path)
    parser.add_argument("--snapshots", type=Path)
    parser.add_argument("--log-level", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Desk-scale wafer-scale EAM molecular dynamics simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    verify = sub.add_parser("verify", help="compare wafer-engine forces against the brute-force oracle")
    _add_run_flags(verify)
    verify.add_argument("--tolerance", type=float)
    verify.add_argument("--arm-shrink", type=int, default=0, help="shorten T arms by N cores (failure injection)")
    verify.add_argument("--dump-placement", type=Path)
    verify.add_argument("--dump-routes", type=Path)

    run = sub.add_parser("run", help="NVE trajectory with the reference or wafer engine")
    _add_run_flags(run)

    sweep = sub.add_parser("sweep", help="estimate steps/s over (k, h) combinations")
    _add_run_flags(sweep)
    sweep.add_argument("--k-list", default="1,2,3,4,5,6")
    sweep.add_argument("--h-list", default="0")
    sweep.add_argument("--region-height", type=int, help="grid rows available to the kernel")
    sweep.add_argument("--calibrate-with", type=Path, help="Ta setfl used to fit cost_fixed at k=4")

    remap = sub.add_parser("remap-demo", help="drift a hot slab, then remap to a fixed point")
    _add_run_flags(remap)

    tabulate = sub.add_parser("tabulate", help="write a built-in potential as a setfl file")
    tabulate.add_argument("name", choices=sorted(BUILTINS))
    tabulate.add_argument("-o", "--output", type=Path, required=True)
    tabulate.add_argument("--nr", type=int, default=5000)
    tabulate.add_argument("--nrho", type=int, default=5000)
    tabulate.add_argument("--log-level", default=None)
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    grid = _pair(getattr(args, "grid", None), "--grid")
    return {
        "potential": args.potential,
        "cells": _triple(args.cells),
        "lattice_constant": args.lattice_constant,
        "temperature": args.temperature,
        "engine": args.engine,
        "grid_width": grid[0] if grid else None,
        "grid_height": grid[1] if grid else None,
        "diagonal_spacing": args.diagonal_spacing,
        "cores_per_atom": args.cores_per_atom,
        "skin": args.skin,
        "dt": args.dt,
        "steps": args.steps,
        "remap_every": args.remap_every,
        "remap_radius": args.remap_radius,
        "cell_width": args.cell_width,
        "rect": _pair(args.rect, "--rect"),
        "hop_latency": args.hop_latency,
        "cost_per_hop": args.cost_per_hop,
        "cost_per_interaction": args.cost_per_interaction,
        "cost_per_arrival": args.cost_per_arrival,
        "cost_fixed": args.cost_fixed,
        "cost_per_screen": args.cost_per_screen,
        "clock_hz": args.clock_hz,
        "seed": args.seed,
        "precision": args.precision,
        "snapshot_stride": args.snapshot_stride,
        "output": args.output,
        "snapshots": args.snapshots,
    }


def _load_tables(path: Optional[Path]) -> EamTables:
    if path is None:
        raise UsageError("no potential given (use --potential or WAFERMD_POTENTIAL)")
    if not Path(path).is_file():
        raise UsageError(f"potential file not found: {path}")
    return load_setfl(path)


def _slab(config: RunConfig, tables: EamTables) -> Tuple[SlabSpec, AtomSystem]:
    spec = SlabSpec(
        cells_x=config.cells[0],
        cells_y=config.cells[1],
        cells_z=config.cells[2],
        lattice_constant=config.lattice_constant or tables.lattice_constant,
        temperature=config.temperature,
        seed=config.seed,
        mass=tables.species_mass,
        species=tables.element,
    )
    if surface_dominated(spec, tables.cutoff):
        logger.warning("slab %s is thinner than two cutoffs; surface atoms dominate", config.cells)
    return spec, prepare_slab(spec)


def _grid(config: RunConfig) -> CoreGrid:
    return CoreGrid(
        width=config.grid_width,
        height=config.grid_height,
        cores_per_atom=config.cores_per_atom,
        diagonal_spacing=config.diagonal_spacing,
    )


def _fabric(config: RunConfig) -> FabricModel:
    return FabricModel(
        hop_latency=config.hop_latency,
        cost_per_hop=config.cost_per_hop,
        cost_per_interaction=config.cost_per_interaction,
        cost_per_arrival=config.cost_per_arrival,
        cost_fixed=config.cost_fixed,
        cost_per_screen=config.cost_per_screen,
        clock_hz=config.clock_hz,
    )


def _options(config: RunConfig) -> WaferOptions:
    return WaferOptions(
        dt=config.dt,
        skin=config.skin,
        remap_every=config.remap_every,
        remap_radius=config.remap_radius,
        precision=config.precision,
        cell_width=config.cell_width,
        rect=config.rect,
    )


def _emit(text: str, path: Optional[Path]) -> None:
    if path is None:
        sys.stdout.write(text)
        return
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc}") from exc


def cmd_verify(config: RunConfig, args: argparse.Namespace) -> int:
    tables = _load_tables(config.potential)
    _, system = _slab(config, tables)
    system = system.astype(np.float64 if config.precision == "double" else np.float32)
    tolerance = args.tolerance if args.tolerance is not None else TOLERANCES[config.precision]
    reference = compute_forces_bruteforce(system, tables, config.precision)
    grid = _grid(config)
    cell_width = config.cell_width or tables.lattice_constant
    placement = project_and_place(system, grid, cell_width, config.rect)
    reach = tables.cutoff + config.skin
    arms = None
    if args.arm_shrink:
        arms = ArmLengths.from_bound(locality_bound(placement, system, reach)).shrink(args.arm_shrink)
    if args.dump_placement is not None:
        _emit(dump_placement(placement), args.dump_placement)

    payload: Dict[str, Any] = {
        "atoms": system.count,
        "cores_per_atom": grid.cores_per_atom,
        "diagonal_spacing": grid.diagonal_spacing,
        "precision": config.precision,
        "tolerance": tolerance,
        "potential_energy_reference": reference.potential_energy,
    }
    try:
        plan = build_exchange_plan(placement, system, reach, config.skin, arms)
    except (CoverageError, ConsistencyError, LocalityError) as exc:
        payload.update(
            max_abs_deviation=float("nan"),
            max_relative_deviation=float("nan"),
            potential_energy_wafer=float("nan"),
            passed=False,
            error=str(exc),
        )
        _, text = format_verify(payload)
        print(text)
        return EXIT_FAILED
    if args.dump_routes is not None:
        _emit(dump_routes(plan.shapes, plan.neighbors), args.dump_routes)

    wafer = compute_forces_wafer(system, plan, tables, config.precision)
    f_ref = reference.forces.astype(np.float64)
    deviation = np.abs(wafer.forces.astype(np.float64) - f_ref)
    scale = float(np.max(np.abs(f_ref))) if f_ref.size else 0.0
    max_dev = float(deviation.max()) if deviation.size else 0.0
    relative = max_dev / scale if scale > 0 else max_dev
    failing = np.flatnonzero(np.any(deviation > tolerance * max(scale, 1.0), axis=1))
    payload.update(
        max_abs_deviation=max_dev,
        max_relative_deviation=relative,
        potential_energy_wafer=wafer.potential_energy,
        passed=bool(relative <= tolerance),
        first_failing_atom=int(failing[0]) if failing.size else None,
        pairs=plan.neighbors.pair_count,
        workers=len(plan.neighbors.streams),
    )
    report, text = format_verify(payload)
    print(text)
    return EXIT_OK if report.passed else EXIT_FAILED


def _snapshot_path(config: RunConfig) -> Optional[Path]:
    if config.snapshot_stride <= 0:
        return None
    if config.snapshots is not None:
        return config.snapshots
    if config.output is not None:
        return config.output.with_suffix(".xyz")
    return Path("snapshots.xyz")


def cmd_run(config: RunConfig) -> int:
    tables = _load_tables(config.potential)
    spec, system = _slab(config, tables)
    snapshots = _snapshot_path(config)
    stride = config.snapshot_stride
    if snapshots is not None and snapshots.exists():
        snapshots.unlink()

    def snapshot(step: int, state: AtomSystem) -> None:
        if snapshots is not None and step % stride == 0:
            try:
                write_xyz(snapshots, state, comment=f"step={step}", append=True)
            except OSError as exc:
                raise UsageError(f"cannot write {snapshots}: {exc}") from exc

    records: List[StepRecord] = []
    remaps: List[RemapRecord] = []
    if config.engine == "reference":
        system = system.astype(np.float64 if config.precision == "double" else np.float32)
        snapshot(0, system)
        _, energies = integrate_nve(
            system,
            tables,
            config.dt,
            config.steps,
            skin=config.skin,
            precision=config.precision,
            callback=lambda step, state, _: snapshot(step, state),
        )
        records = [
            StepRecord(step=e.step, total_energy=e.total, kinetic=e.kinetic, potential=e.potential)
            for e in energies
        ]
    else:
        grid = _grid(config)
        fabric = _fabric(config)
        options = _options(config)
        if config.steps == 0:
            state = initialize_state(system, grid, tables, options)
            cost = estimate_cost(state.placement, state.plan.stats(), fabric)
            snapshot(0, state.system)
            kinetic = state.system.kinetic_energy()
            potential = state.forces.potential_energy
            records = [
                StepRecord(
                    step=0,
                    total_energy=kinetic + potential,
                    kinetic=kinetic,
                    potential=potential,
                    total_cycles=cost.total_cycles,
                    steps_per_second=cost.steps_per_second,
                )
            ]
        else:
            snapshot(0, system)

            def on_step(state: WaferState) -> None:
                snapshot(state.step, state.system)

            summary = run_trajectory(
                system,
                config.steps,
                config.remap_every,
                tables=tables,
                grid=grid,
                fabric=fabric,
                options=options,
                callback=on_step,
            )
            records = [
                StepRecord(
                    step=point.energy.step,
                    total_energy=point.energy.total,
                    kinetic=point.energy.kinetic,
                    potential=point.energy.potential,
                    total_cycles=point.cost.total_cycles,
                    steps_per_second=point.cost.steps_per_second,
                )
                for point in summary.points
            ]
            remaps = [
                RemapRecord(step=e.step, swaps=e.swaps, cost_before=e.cost_before, cost_after=e.cost_after)
                for e in summary.remaps
            ]
    _emit(render_json_lines(records), config.output)
    if remaps and config.output is not None:
        _emit(render_json_lines(remaps), config.output.with_suffix(".remaps.jsonl"))
    logger.info("Run finished: %d records, %d remap events", len(records), len(remaps))
    return EXIT_OK


def cmd_sweep(config: RunConfig, args: argparse.Namespace, region_height: int) -> int:
    tables = _load_tables(config.potential)
    fabric = _fabric(config)
    height = min(region_height, config.grid_height)
    if args.calibrate_with is not None:
        anchor_tables = _load_tables(args.calibrate_with)
        anchor_grid = CoreGrid(width=config.grid_width, height=height, cores_per_atom=4, diagonal_spacing=0)
        placement, stats = representative_stats(anchor_tables, anchor_grid, skin=config.skin)
        fabric = calibrate(fabric, stats, placement, load_settings().fabric.anchor_cycles)

    rows: List[dict] = []
    for h in parse_int_list(args.h_list):
        baseline: Optional[float] = None
        for k in parse_int_list(args.k_list):
            try:
                grid = CoreGrid(width=config.grid_width, height=height, cores_per_atom=k, diagonal_spacing=h)
            except ConfigurationError as exc:
                rows.append(dict(k=k, h=h, n_max=0, status="infeasible", reason=str(exc)))
                continue
            try:
                placement, stats = representative_stats(tables, grid, skin=config.skin)
            except (ConfigurationError, PlacementError, CoverageError, LocalityError) as exc:
                rows.append(dict(k=k, h=h, n_max=grid.capacity, status="infeasible", reason=str(exc)))
                continue
            cost = estimate_cost(placement, stats, fabric)
            if k == 1:
                baseline = cost.steps_per_second
            rows.append(
                dict(
                    k=k,
                    h=h,
                    n_max=grid.capacity,
                    total_cycles=cost.total_cycles,
                    steps_per_second=cost.steps_per_second,
                    speedup=cost.steps_per_second / baseline if baseline else None,
                )
            )
    _emit(render_sweep_csv(validate_sweep_rows(rows)), config.output)
    return EXIT_OK


def cmd_remap_demo(config: RunConfig) -> int:
    tables = _load_tables(config.potential)
    _, system = _slab(config, tables)
    placement = project_and_place(system, _grid(config), config.cell_width or tables.lattice_constant, config.rect)
    drifted, _ = integrate_nve(system, tables, config.dt, config.steps, skin=config.skin, precision=config.precision)
    outcomes = remap_until_stable(placement, drifted, config.remap_radius)
    records = [
        RemapRecord(step=index, swaps=len(o.swaps), cost_before=o.cost_before, cost_after=o.cost_after)
        for index, o in enumerate(outcomes)
    ]
    _emit(render_json_lines(records), config.output)
    return EXIT_OK


def cmd_tabulate(args: argparse.Namespace) -> int:
    tables = tabulate_builtin(args.name, nr=args.nr, nrho=args.nrho)
    try:
        write_setfl(args.output, tables)
    except OSError as exc:
        raise UsageError(f"cannot write {args.output}: {exc}") from exc
    logger.info("Wrote %s", args.output)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)
    settings = load_settings()
    logging.basicConfig(
        level=(args.log_level or settings.run.log_level).upper(),
        format="[%(levelname)s] %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    try:
        if args.command == "tabulate":
            return cmd_tabulate(args)
        config = build_run_config(settings, args.config, _overrides(args))
        if args.command == "verify":
            return cmd_verify(config, args)
        if args.command == "run":
            return cmd_run(config)
        if args.command == "sweep":
            return cmd_sweep(config, args, args.region_height or settings.fabric.region_height)
        return cmd_remap_demo(config)
    except ValueError as exc:
        # usage, potential, slab, placement and calibration errors all derive from ValueError
        logger.error("%s", exc)
        return EXIT_USAGE
    except (CoverageError, ConsistencyError, LocalityError) as exc:
        logger.error("%s", exc)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
