import json

import pytest

from forest_coreg.analysis import read_csv
from forest_coreg.cli import main
from forest_coreg.pipeline import THREADS_ENV, worker_count


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--n-trees", "50", "--extent", "55", "--drift", "2", "--seed", "1",
                 "--out", str(root / "data")]) == 0
    return root


@pytest.fixture(scope="module")
def run_out(dataset):
    out = dataset / "out"
    code = main(["run", "--als", str(dataset / "data" / "als.ply"), "--mission", str(dataset / "data" / "mission.txt"),
                 "--out", str(out), "--workers", "1"])
    return code, out


def test_synth_writes_dataset(dataset):
    for name in ("als.ply", "mission.txt", "truth.txt", "trees.csv"):
        assert (dataset / "data" / name).is_file()


def test_run_improves_alignment(run_out):
    code, out = run_out
    assert code == 0
    rows = {r["cloud_id"]: r for r in read_csv(out / "errors.csv")}
    assert float(rows["all"]["post_mean"]) < float(rows["all"]["pre_mean"])
    report = json.loads((out / "report.json").read_text())
    assert report["final_cost"] <= report["initial_cost"]
    for name in ("registration.json", "fused.ply", "occupancy.csv", "traits.csv"):
        assert (out / name).is_file()
    assert (out / "optimized").is_dir()


def test_missing_als_is_input_error(tmp_path, dataset, capsys):
    code = main(["run", "--als", str(tmp_path / "nope.ply"), "--mission", str(dataset / "data" / "mission.txt"),
                 "--out", str(tmp_path / "o")])
    assert code == 1
    assert "ALS cloud not found" in capsys.readouterr().err


def test_bad_config_is_input_error(tmp_path, dataset):
    (tmp_path / "bad.toml").write_text("this is = = not toml\n")
    code = main(["run", "--als", str(dataset / "data" / "als.ply"), "--mission", str(dataset / "data" / "mission.txt"),
                 "--config", str(tmp_path / "bad.toml"), "--out", str(tmp_path / "o")])
    assert code == 1


def test_unreachable_fitness_refuses_optimization(tmp_path, dataset, run_out, capsys):
    (tmp_path / "strict.toml").write_text("[fine]\nmin_fitness = 1.01\n")
    args = ["--mission", str(dataset / "data" / "mission.txt"), "--config", str(tmp_path / "strict.toml")]
    assert main(["run", "--als", str(dataset / "data" / "als.ply"), *args, "--out", str(tmp_path / "run")]) == 2
    assert "refused" in capsys.readouterr().err
    # the staged command reaches the same verdict from a saved registration file
    reg = str(run_out[1] / "registration.json")
    assert main(["optimize", *args, "--registration", reg, "--out", str(tmp_path / "opt")]) == 2


def test_staged_optimize_and_analyze(tmp_path, dataset, run_out):
    data = dataset / "data"
    reg = str(run_out[1] / "registration.json")
    assert main(["optimize", "--mission", str(data / "mission.txt"),
                 "--registration", reg, "--out", str(tmp_path / "opt")]) == 0
    optimized = tmp_path / "opt" / "optimized" / "mission.txt"
    assert optimized.is_file()
    assert main(["analyze", "--als", str(data / "als.ply"), "--mission", str(data / "mission.txt"),
                 "--optimized", str(optimized), "--out", str(tmp_path / "an")]) == 0
    assert (tmp_path / "an" / "errors.csv").is_file()


def test_thread_cap(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "1")
    assert worker_count(8) == 1
    monkeypatch.delenv(THREADS_ENV)
    assert worker_count(0) == 1
