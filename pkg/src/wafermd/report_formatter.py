"""Schema validation and rendering of run, verify and sweep reports."""

from __future__ import annotations

import csv
import io
from typing import Iterable, List, Literal, Optional, Tuple

from pydantic import BaseModel, ValidationError, field_validator, model_validator

SWEEP_COLUMNS = (
    "k",
    "h",
    "n_max",
    "total_cycles",
    "steps_per_second",
    "speedup",
    "status",
    "reason",
)


class StepRecord(BaseModel):
    step: int
    total_energy: float
    kinetic: float
    potential: float
    total_cycles: Optional[int] = None
    steps_per_second: Optional[float] = None

    @field_validator("step")
    @classmethod
    def non_negative_step(cls, value: int) -> int:
        if value < 0:
            raise ValueError("step must be non-negative")
        return value


class RemapRecord(BaseModel):
    step: int
    swaps: int
    cost_before: float
    cost_after: float

    @model_validator(mode="after")
    def cost_never_rises(self) -> "RemapRecord":
        if self.cost_after > self.cost_before + 1e-9 * max(1.0, abs(self.cost_before)):
            raise ValueError("remap increased the assignment cost")
        return self


class VerifyReport(BaseModel):
    atoms: int
    cores_per_atom: int
    diagonal_spacing: int
    precision: Literal["double", "single"] = "double"
    tolerance: float
    max_abs_deviation: float
    max_relative_deviation: float
    potential_energy_reference: float
    potential_energy_wafer: float
    passed: bool
    first_failing_atom: Optional[int] = None
    pairs: int = 0
    workers: int = 0
    error: Optional[str] = None


class SweepRow(BaseModel):
    k: int
    h: int
    n_max: int
    total_cycles: Optional[int] = None
    steps_per_second: Optional[float] = None
    speedup: Optional[float] = None
    status: Literal["ok", "infeasible"] = "ok"
    reason: str = ""

    @field_validator("k")
    @classmethod
    def positive_k(cls, value: int) -> int:
        if value < 1:
            raise ValueError("k must be at least 1")
        return value

    @model_validator(mode="after")
    def status_matches_fields(self) -> "SweepRow":
        if self.status == "ok" and self.total_cycles is None:
            raise ValueError("ok row without total cycles")
        if self.status == "infeasible" and not self.reason:
            raise ValueError("infeasible row must give a reason")
        return self


def validate_verify_payload(payload: dict) -> VerifyReport:
    """Validate dict payload into strongly typed object."""
    try:
        return VerifyReport.model_validate(payload)
    except ValidationError as exc:
        raise ValueError(f"Invalid verify payload: {exc}") from exc


def validate_sweep_rows(rows: Iterable[dict]) -> List[SweepRow]:
    try:
        return [SweepRow.model_validate(row) for row in rows]
    except ValidationError as exc:
        raise ValueError(f"Invalid sweep row: {exc}") from exc


def render_verify_text(report: VerifyReport) -> str:
    verdict = "PASS" if report.passed else "FAIL"
    lines = [
        f"verify: {verdict}",
        f"- atoms: {report.atoms} (k={report.cores_per_atom}, h={report.diagonal_spacing}, {report.precision})",
        f"- max |dF|: {report.max_abs_deviation:.3e} eV/A",
        f"- max relative deviation: {report.max_relative_deviation:.3e} (tolerance {report.tolerance:.1e})",
        f"- potential energy: reference {report.potential_energy_reference:.10f} eV, "
        f"wafer {report.potential_energy_wafer:.10f} eV",
        f"- pairs: {report.pairs} on {report.workers} workers",
    ]
    if report.first_failing_atom is not None:
        lines.append(f"- first failing atom: {report.first_failing_atom}")
    if report.error:
        lines.append(f"- error: {report.error}")
    return "\n".join(lines)


def format_verify(payload: dict) -> Tuple[VerifyReport, str]:
    """Return validated model and text report."""
    model = validate_verify_payload(payload)
    return model, render_verify_text(model)


def render_sweep_csv(rows: Iterable[SweepRow]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for row in rows:
        writer.writerow(
            [
                row.k,
                row.h,
                row.n_max,
                "" if row.total_cycles is None else row.total_cycles,
                "" if row.steps_per_second is None else f"{row.steps_per_second:.1f}",
                "" if row.speedup is None else f"{row.speedup:.4f}",
                row.status,
                row.reason,
            ]
        )
    return buffer.getvalue()


def render_json_lines(records: Iterable[BaseModel]) -> str:
    """One JSON object per record."""
    return "".join(record.model_dump_json() + "\n" for record in records)
