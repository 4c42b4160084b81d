"""Entry-point behavior: parsing, exit codes, stream discipline."""

import csv
import io
import json

import numpy as np
import pytest

from helpers import asg_raw_text, laser_raw_text
from paveharvest.cli import build_parser, main
from paveharvest.timeutil import format_rfc3339
from paveharvest.tsstore import Sample, Store


def run_cli(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


# --- argument parsing -----------------------------------------------------


def test_store_query_args_parse():
    args = build_parser().parse_args(
        [
            "store", "query",
            "--from", "2020-01-01T00:00:00Z",
            "--to", "2020-01-02T00:00:00Z",
            "--sensor", "65/1/epc3",
        ]
    )
    assert args.subcommand == "query"
    assert args.sensor == "65/1/epc3"


def test_no_subcommand_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_unknown_flag_is_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["store", "query", "--nope"])
    assert exc.value.code == 2


def test_from_after_to_is_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(
            [
                "store", "query", "--store", str(tmp_path / "db"),
                "--sensor", "x",
                "--from", "2021-01-01T00:00:00Z",
                "--to", "2020-01-01T00:00:00Z",
            ]
        )
    assert exc.value.code == 2


# --- store query ------------------------------------------------------------


def make_store(root):
    base = 1_600_000_000_000_000
    with Store(root) as store:
        store.insert(
            [Sample("65/1/epc3", base + i * 1_000_000, float(i)) for i in range(10)]
        )
    return base


def test_store_query_csv_output(tmp_path, capsys):
    root = tmp_path / "db"
    base = make_store(root)
    code, out, err = run_cli(
        [
            "store", "query", "--store", str(root), "--sensor", "65/1/epc3",
            "--from", format_rfc3339(base),
            "--to", format_rfc3339(base + 10_000_000),
        ],
        capsys,
    )
    assert code == 0
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0] == ["ts_rfc3339", "value"]
    assert len(rows) == 11
    assert rows[1][1] == "0.0"
    # data on stdout only; any logging stays on stderr
    assert "ts_rfc3339" not in err


def test_store_query_downsample(tmp_path, capsys):
    root = tmp_path / "db"
    base = make_store(root)
    code, out, _ = run_cli(
        [
            "store", "query", "--store", str(root), "--sensor", "65/1/epc3",
            "--from", format_rfc3339(base),
            "--to", format_rfc3339(base + 10_000_000),
            "--bucket", "5s", "--agg", "count",
        ],
        capsys,
    )
    assert code == 0
    rows = list(csv.reader(io.StringIO(out)))[1:]
    assert sum(int(r[1]) for r in rows) == 10


def test_store_check_clean_and_corrupt(tmp_path, capsys):
    root = tmp_path / "db"
    make_store(root)
    code, _, _ = run_cli(["store", "check", "--store", str(root)], capsys)
    assert code == 0
    seg = next(root.glob("*/*.seg"))
    raw = bytearray(seg.read_bytes())
    raw[:4] = b"XXXX"
    seg.write_bytes(bytes(raw))
    code, _, err = run_cli(["store", "check", "--store", str(root)], capsys)
    assert code == 4


def test_store_query_env_var_config(tmp_path, capsys, monkeypatch):
    root = tmp_path / "db"
    base = make_store(root)
    monkeypatch.setenv("PAVEH_STORE", str(root))
    code, out, _ = run_cli(
        [
            "store", "query", "--sensor", "65/1/epc3",
            "--from", format_rfc3339(base), "--to", format_rfc3339(base + 1),
        ],
        capsys,
    )
    assert code == 0


def test_config_file_lowest_precedence(tmp_path, capsys, monkeypatch):
    root = tmp_path / "db"
    base = make_store(root)
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"store": str(root)}))
    monkeypatch.delenv("PAVEH_STORE", raising=False)
    code, out, _ = run_cli(
        [
            "--config", str(cfg),
            "store", "query", "--sensor", "65/1/epc3",
            "--from", format_rfc3339(base), "--to", format_rfc3339(base + 1),
        ],
        capsys,
    )
    assert code == 0
    # env var beats the config file: point env at a missing store, expect empty
    monkeypatch.setenv("PAVEH_STORE", str(tmp_path / "other"))
    code, out, _ = run_cli(
        [
            "--config", str(cfg),
            "store", "query", "--sensor", "65/1/epc3",
            "--from", format_rfc3339(base), "--to", format_rfc3339(base + 10**7),
        ],
        capsys,
    )
    assert code == 0
    assert out.strip() == "ts_rfc3339,value"  # the env-selected store is empty


# --- etl subcommands -----------------------------------------------------------


def test_etl_process_and_join(tmp_path, capsys):
    in_dir = tmp_path / "raw"
    out_dir = tmp_path / "out"
    in_dir.mkdir()
    (in_dir / "Traffic D1 F20 07-07-22.txt").write_text(asg_raw_text(n_pass=42))
    code, _, _ = run_cli(
        ["etl", "process", "--in", str(in_dir), "--out", str(out_dir)], capsys
    )
    assert code == 0
    data = (out_dir / "data.csv").read_text()
    info = (out_dir / "file_info.csv").read_text()
    assert data.splitlines()[0].startswith("filename_id,")
    joined_path = tmp_path / "joined.csv"
    code, _, _ = run_cli(
        [
            "etl", "join",
            "--data", str(out_dir / "data.csv"),
            "--fileinfo", str(out_dir / "file_info.csv"),
            "--out", str(joined_path),
        ],
        capsys,
    )
    assert code == 0
    assert joined_path.read_text().splitlines()[0].startswith("filename,")


def test_etl_process_laser(tmp_path, capsys):
    in_dir = tmp_path / "raw"
    out_dir = tmp_path / "out"
    in_dir.mkdir()
    (in_dir / "scan.txt").write_text(laser_raw_text(n_samples=1100))
    code, _, _ = run_cli(
        ["etl", "process", "--in", str(in_dir), "--kind", "laser", "--out", str(out_dir)],
        capsys,
    )
    assert code == 0
    assert (out_dir / "laser.csv").exists()
    assert not (out_dir / "data.csv").exists()


def test_etl_join_dangling_reference_exit_code(tmp_path, capsys):
    data = tmp_path / "data.csv"
    info = tmp_path / "file_info.csv"
    data.write_text(
        "filename_id,captured_instance,gage_id,placement,cal_coeff,rated_output,"
        "extrema,seconds_elapsed,processed_datapoint,unit\r\n"
        "7,first20,7,36,1,1,maxima,1,1,microstrain\r\n"
    )
    info.write_text(
        "id,filename,project_name,test_section,sensor_type,location,gage_id,"
        "survey_date,description\r\n1,a.txt,,,,,,,\r\n"
    )
    code, _, _ = run_cli(
        ["etl", "join", "--data", str(data), "--fileinfo", str(info)], capsys
    )
    assert code == 4


def test_etl_process_missing_dir_is_runtime_error(tmp_path, capsys):
    code, _, _ = run_cli(
        ["etl", "process", "--in", str(tmp_path / "nope"), "--out", str(tmp_path)],
        capsys,
    )
    assert code == 3


# --- dsp inspect ------------------------------------------------------------


def test_dsp_inspect_smooths_csv(tmp_path, capsys):
    t = np.arange(200) * 0.1
    y = t * 2.0
    src = tmp_path / "in.csv"
    src.write_text("t,y\n" + "\n".join(f"{a},{b}" for a, b in zip(t, y)))
    code, out, _ = run_cli(
        ["dsp", "inspect", "--in", str(src), "--window", "11", "--order", "2"],
        capsys,
    )
    assert code == 0
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0] == ["t", "y", "y_smoothed"]
    sample = rows[100]
    assert float(sample[2]) == pytest.approx(float(sample[1]), abs=1e-9)


# --- e2e ------------------------------------------------------------


def write_scenario(path, sensors=3, duration=5):
    path.write_text(
        json.dumps(
            {
                "site": "65",
                "daq": "1",
                "seed": 7,
                "duration_s": duration,
                "sensors": [
                    {"id": f"epc{i}", "kind": "EPC", "rate_hz": 1,
                     "baseline": 100.0, "pulse_amplitude": 40.0}
                    for i in range(sensors)
                ],
            }
        )
    )


def test_e2e_small_run(tmp_path, capsys):
    scenario = tmp_path / "scen.json"
    write_scenario(scenario, sensors=2, duration=4)
    code, out, err = run_cli(
        [
            "e2e", "run", "--scenario", str(scenario),
            "--store", str(tmp_path / "db"), "--speedup", "50",
        ],
        capsys,
    )
    assert code == 0
    report = json.loads(out)
    assert report["published"] == 8
    assert report["stored"] == 8
    assert report["seq_gaps"] == 0
    assert report["ok"] is True


def test_e2e_simulated_day_one_sensor(tmp_path, capsys):
    """One 1 Hz sensor for a simulated day, fully time-compressed."""
    scenario = tmp_path / "scen.json"
    scenario.write_text(
        json.dumps(
            {
                "site": "65", "daq": "1", "duration_s": 86_400,
                "sensors": [{"id": "epc1", "kind": "EPC", "rate_hz": 1,
                             "baseline": 100.0, "pulse_amplitude": 40.0}],
            }
        )
    )
    code, out, _ = run_cli(
        [
            "e2e", "run", "--scenario", str(scenario),
            "--store", str(tmp_path / "db"), "--speedup", "1000000",
        ],
        capsys,
    )
    assert code == 0
    report = json.loads(out)
    assert report["published"] == 86_400
    assert report["stored"] >= 86_400
    assert report["seq_gaps"] == 0


def test_e2e_empty_scenario_has_zero_counts(tmp_path, capsys):
    scenario = tmp_path / "scen.json"
    scenario.write_text(
        json.dumps({"site": "65", "daq": "1", "duration_s": 5, "sensors": []})
    )
    code, out, _ = run_cli(
        ["e2e", "run", "--scenario", str(scenario), "--store", str(tmp_path / "db")],
        capsys,
    )
    assert code == 0
    report = json.loads(out)
    assert report["published"] == 0
    assert report["stored"] == 0
