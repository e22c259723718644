import csv
import io
import json

import pytest

from wafermd.eam_potential import load_setfl
from wafermd.main import EXIT_FAILED, EXIT_OK, EXIT_USAGE, main


def test_tabulate_writes_loadable_setfl(tmp_path):
    path = tmp_path / "W.eam.alloy"
    assert main(["tabulate", "w", "-o", str(path), "--nr", "800", "--nrho", "600"]) == EXIT_OK
    tables = load_setfl(path)
    assert tables.element == "W"
    assert tables.rho.count == 800
    assert tables.embed.count == 600


def test_verify_default_slab_passes(ta_path, capsys):
    assert main(["verify", "--potential", str(ta_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "verify: PASS" in out
    assert "atoms: 432" in out


def test_verify_with_cores_per_atom_and_dumps(ta_path, tmp_path, capsys):
    routes = tmp_path / "routes.txt"
    placement = tmp_path / "placement.txt"
    argv = [
        "verify", "--potential", str(ta_path), "--cells", "3,3,3", "-k", "4", "--diagonal-spacing", "1",
        "--dump-routes", str(routes), "--dump-placement", str(placement),
    ]
    assert main(argv) == EXIT_OK
    assert "verify: PASS" in capsys.readouterr().out
    assert routes.read_text().startswith("T ")
    assert len(placement.read_text().splitlines()) == 1 + 54


def test_verify_with_shortened_arms_fails(ta_path, capsys):
    assert main(["verify", "--potential", str(ta_path), "--arm-shrink", "6"]) == EXIT_FAILED
    out = capsys.readouterr().out
    assert "verify: FAIL" in out
    assert "not covered" in out


def test_missing_potential_is_usage_error(tmp_path):
    assert main(["verify", "--potential", str(tmp_path / "nope.eam.alloy")]) == EXIT_USAGE


def test_bad_flag_values_are_usage_errors(ta_path):
    assert main(["run", "--potential", str(ta_path), "--cells", "3,3"]) == EXIT_USAGE
    assert main(["run", "--potential", str(ta_path), "--dt", "0"]) == EXIT_USAGE
    assert main(["run", "--potential", str(ta_path), "--grid", "3,10", "-k", "4"]) == EXIT_USAGE


def test_capacity_exceeded_is_usage_error(ta_path):
    assert main(["verify", "--potential", str(ta_path), "--grid", "8,8"]) == EXIT_USAGE


def _sweep(capsys, argv):
    assert main(argv) == EXIT_OK
    return list(csv.DictReader(io.StringIO(capsys.readouterr().out)))


def test_sweep_capacity_and_speedup(ta_path, capsys):
    rows = _sweep(capsys, ["sweep", "--potential", str(ta_path), "--calibrate-with", str(ta_path)])
    assert [int(row["n_max"]) for row in rows] == [800_400, 400_200, 266_220, 200_100, 160_080, 133_110]
    assert all(row["status"] == "ok" for row in rows)
    assert int(rows[3]["total_cycles"]) == 743
    assert 1.4 <= float(rows[3]["speedup"]) <= 1.9


def test_sweep_reports_infeasible_combinations(ta_path, capsys):
    rows = _sweep(capsys, ["sweep", "--potential", str(ta_path), "--grid", "16,16", "--k-list", "1,20"])
    assert rows[1]["status"] == "infeasible"
    assert rows[1]["reason"]


def test_empty_k_list_gives_header_only(ta_path, capsys):
    assert main(["sweep", "--potential", str(ta_path), "--k-list", ""]) == EXIT_OK
    assert capsys.readouterr().out.splitlines() == ["k,h,n_max,total_cycles,steps_per_second,speedup,status,reason"]


def test_reference_run_writes_one_record_per_step(ta_path, tmp_path):
    out = tmp_path / "run.jsonl"
    argv = ["run", "--potential", str(ta_path), "--engine", "reference", "--cells", "2,2,2", "--steps", "5", "-o", str(out)]
    assert main(argv) == EXIT_OK
    records = [json.loads(line) for line in out.read_text().splitlines()]
    assert [record["step"] for record in records] == list(range(6))
    assert records[0]["total_cycles"] is None


def test_wafer_run_with_zero_steps(ta_path, tmp_path):
    out = tmp_path / "run.jsonl"
    argv = ["run", "--potential", str(ta_path), "--cells", "2,2,2", "--steps", "0", "-o", str(out)]
    assert main(argv) == EXIT_OK
    lines = out.read_text().splitlines()
    assert len(lines) == 1
    assert json.loads(lines[0])["total_cycles"] > 0


def test_wafer_run_snapshots_and_remaps(ta_path, tmp_path):
    out = tmp_path / "run.jsonl"
    argv = [
        "run", "--potential", str(ta_path), "--cells", "3,3,2", "--steps", "4", "--snapshot-stride", "2",
        "--remap-every", "2", "-o", str(out),
    ]
    assert main(argv) == EXIT_OK
    assert len(out.read_text().splitlines()) == 5
    assert out.with_suffix(".xyz").read_text().count("step=") == 3
    remaps = out.with_suffix(".remaps.jsonl").read_text().splitlines()
    assert [json.loads(line)["step"] for line in remaps] == [2, 4]


def test_remap_demo_reaches_fixed_point(ta_path, tmp_path):
    out = tmp_path / "remap.jsonl"
    argv = [
        "remap-demo", "--potential", str(ta_path), "--cells", "3,3,2", "--temperature", "1200",
        "--steps", "30", "-o", str(out),
    ]
    assert main(argv) == EXIT_OK
    records = [json.loads(line) for line in out.read_text().splitlines()]
    assert records[-1]["swaps"] == 0
    for record in records:
        assert record["cost_after"] <= record["cost_before"] + 1e-9


@pytest.mark.parametrize("command", ["verify", "run", "sweep", "remap-demo"])
def test_help_exits_cleanly(command):
    with pytest.raises(SystemExit) as info:
        main([command, "--help"])
    assert info.value.code == 0
