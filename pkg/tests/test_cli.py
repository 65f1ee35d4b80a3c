import csv
import io

import pytest

from thc.cli import NMSE_COLUMNS, main
from thc.harness import TRACE_COLUMNS


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_table_gen_identity(capsys):
    code, out, _ = run(capsys, "table", "gen", "--bits", "2", "--granularity", "3", "--p", "1/32")
    assert code == 0 and out.split() == ["0", "1", "2", "3"]


def test_table_gen_writes_cache_and_show_lists_it(capsys, tmp_path):
    path = tmp_path / "tables.txt"
    assert run(capsys, "table", "gen", "-b", "2", "-g", "6", "--out", str(path))[0] == 0
    code, out, _ = run(capsys, "table", "show", str(path))
    assert code == 0 and "0 " in out


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["nmse", "--frobnicate"])
    assert exc.value.code == 2


def test_bad_fraction_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["table", "gen", "--p", "3/2"])
    assert exc.value.code == 2
    assert "p must lie in" in capsys.readouterr().err


def test_invalid_table_reports_error(capsys):
    code, _, err = run(capsys, "table", "gen", "-b", "3", "-g", "4")
    assert code == 1 and err.startswith("thc: error:")


def test_nmse_csv(capsys):
    code, out, _ = run(capsys, "nmse", "-b", "2", "-g", "6", "--workers", "2", "4",
                       "--dim", "256", "--trials", "2")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert list(rows[0]) == NMSE_COLUMNS
    assert [r["workers"] for r in rows] == ["2", "4"]
    assert all(float(r["nmse_mean"]) > 0 for r in rows)


def test_simulate_one_row_per_round(capsys, tmp_path):
    path = tmp_path / "trace.csv"
    code, _, _ = run(capsys, "simulate", "--rounds", "5", "--dim", "32", "--loss", "0.01",
                     "--sync", "1", "--csv", str(path))
    assert code == 0
    rows = list(csv.DictReader(path.open()))
    assert list(rows[0]) == TRACE_COLUMNS
    assert [int(r["round"]) for r in rows] == list(range(5))
    assert all(r["synced"] == "1" for r in rows)


def test_selftest(capsys):
    code, out, _ = run(capsys, "selftest")
    assert code == 0 and "FAIL" not in out
