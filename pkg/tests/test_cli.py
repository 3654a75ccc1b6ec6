import csv

import pytest

from doublecox import example_dataset_path
from doublecox.cli import (
    EXIT_BAD_INPUT,
    EXIT_CALIBRATION,
    EXIT_CONFIG,
    EXIT_OK,
    build_parser,
    main,
)

DESIGN_SIM = """\
family = weibull
n = {n}
n_clusters = {ncl}
a = 20
b = 1.5
beta_scale = -0.5, -1
beta_shape = -0.05, -0.1
sigma2 = {sigma2}
p_cens = {p_cens}
seed = 11
mc_n = 50000
"""

SMALL_STUDY = """\
families = weibull, gompertz
sample_sizes = 200
cluster_counts = 20
censoring_rates = 0.3
sigma2_values = 0, 0.5
replications = 3
interval_methods = SE
mc_n = 20000
"""


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_fit_packaged_example(capsys, tmp_path):
    out = tmp_path / "est.csv"
    code = main(["fit", str(example_dataset_path()), "--shape-cov", "Success,Score", "--out", str(out)])
    assert code == EXIT_OK
    text = capsys.readouterr().out
    assert "converged: yes" in text and "log-likelihood:" in text
    rows = {r["parameter"]: r for r in csv.DictReader(out.open())}
    assert float(rows["sigma2"]["estimate"]) > 0
    assert float(rows["sigma2"]["se_lower"]) <= float(rows["sigma2"]["estimate"]) <= float(rows["sigma2"]["se_upper"])


def test_fit_single_cox_with_profile(capsys):
    code = main(["fit", str(example_dataset_path()), "--profile", "scale[Score]"])
    assert code == EXIT_OK
    text = capsys.readouterr().out
    assert "shape[" not in text and "PL 95% lower" in text


def test_fit_missing_event_column(tmp_path, capsys):
    bad = write(tmp_path, "bad.csv", "time,cluster,Success\n1.0,1,0\n2.0,1,1\n")
    assert main(["fit", str(bad)]) == EXIT_BAD_INPUT
    assert "event" in capsys.readouterr().err


def test_fit_unknown_covariate(capsys):
    assert main(["fit", str(example_dataset_path()), "--shape-cov", "Age"]) == EXIT_BAD_INPUT
    assert "Age" in capsys.readouterr().err


def test_simulate_deterministic_and_rate(tmp_path, capsys):
    cfg = write(tmp_path, "sim.conf", DESIGN_SIM.format(n=10_000, ncl=5_000, sigma2=2, p_cens=0.4))
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["simulate", str(cfg), str(a)]) == EXIT_OK
    assert main(["simulate", str(cfg), str(b)]) == EXIT_OK
    assert a.read_bytes() == b.read_bytes()
    rows = list(csv.DictReader(a.open()))
    cens = sum(r["event"] == "0" for r in rows) / len(rows)
    assert abs(cens - 0.4) <= 0.02
    assert "theta:" in capsys.readouterr().out


def test_simulate_no_censoring(tmp_path):
    cfg = write(tmp_path, "sim.conf", DESIGN_SIM.format(n=500, ncl=50, sigma2=0, p_cens=0))
    out = tmp_path / "d.csv"
    assert main(["simulate", str(cfg), str(out)]) == EXIT_OK
    assert all(r["event"] == "1" for r in csv.DictReader(out.open()))


def test_simulate_and_calibrate_failure(tmp_path):
    cfg = write(tmp_path, "sim.conf", DESIGN_SIM.format(n=500, ncl=50, sigma2=0, p_cens=0.999999999999))
    assert main(["simulate", str(cfg), str(tmp_path / "d.csv")]) == EXIT_CALIBRATION
    assert main(["calibrate", str(cfg)]) == EXIT_CALIBRATION


def test_calibrate_prints_theta(tmp_path, capsys):
    cfg = write(tmp_path, "sim.conf", DESIGN_SIM.format(n=500, ncl=50, sigma2=0.5, p_cens=0.3))
    assert main(["calibrate", str(cfg)]) == EXIT_OK
    assert "theta:" in capsys.readouterr().out


def test_bad_sim_config_names_key(tmp_path, capsys):
    cfg = write(tmp_path, "sim.conf", DESIGN_SIM.format(n=500, ncl=50, sigma2=0, p_cens=0) + "sigma = 1\n")
    assert main(["simulate", str(cfg), str(tmp_path / "d.csv")]) == EXIT_CONFIG
    assert "'sigma'" in capsys.readouterr().err


def test_study_invalid_key(tmp_path, capsys):
    cfg = write(tmp_path, "study.conf", SMALL_STUDY + "replication = 4\n")
    assert main(["study", str(cfg), str(tmp_path / "out")]) == EXIT_CONFIG
    assert "'replication'" in capsys.readouterr().err


def test_study_workers_identical_bytes(tmp_path):
    cfg = write(tmp_path, "study.conf", SMALL_STUDY)
    assert main(["study", str(cfg), str(tmp_path / "w1"), "--workers", "1"]) == EXIT_OK
    assert main(["study", str(cfg), str(tmp_path / "w8"), "--workers", "8"]) == EXIT_OK
    r1 = (tmp_path / "w1" / "report.csv").read_bytes()
    assert r1 == (tmp_path / "w8" / "report.csv").read_bytes()
    assert len(r1.decode().splitlines()) == 1 + 4 * 7


def test_study_resume_and_markdown(tmp_path, monkeypatch):
    cfg = write(tmp_path, "study.conf", SMALL_STUDY.replace("replications = 3", "replications = 2"))
    out = tmp_path / "out"
    assert main(["study", str(cfg), str(out)]) == EXIT_OK
    first = (out / "report.csv").read_bytes()

    def boom(*args, **kwargs):
        raise AssertionError("resume recomputed a finished cell")

    monkeypatch.setattr("doublecox.study.run_cell", boom)
    assert main(["study", str(cfg), str(out), "--resume"]) == EXIT_OK
    assert (out / "report.csv").read_bytes() == first
    assert main(["study", str(cfg), str(out), "--resume", "--format", "markdown"]) == EXIT_OK
    md = (out / "report.md").read_text()
    assert md.count("## ") == 2


def test_study_all_cells_failing(tmp_path):
    cfg = write(tmp_path, "study.conf", SMALL_STUDY.replace("censoring_rates = 0.3", "censoring_rates = 0.999999999999"))
    assert main(["study", str(cfg), str(tmp_path / "out")]) == EXIT_CALIBRATION


@pytest.mark.slow
def test_study_paper_desk_preset(tmp_path):
    assert main(["study", "paper-desk", str(tmp_path), "--replications", "1", "--workers", "2"]) == EXIT_OK
    rows = list(csv.DictReader((tmp_path / "report.csv").open()))
    cells = {(r["family"], r["N_cl"], r["sigma2_true"]) for r in rows}
    assert len(cells) == 12


@pytest.mark.parametrize(
    "command,flags",
    [
        ("fit", ["--family", "--scale-cov", "--shape-cov", "--no-frailty", "--level", "--out", "--profile", "--seed", "--multistart"]),
        ("simulate", []),
        ("calibrate", []),
        ("study", ["--workers", "--format", "--resume", "--replications"]),
    ],
)
def test_help_lists_flags(command, flags, capsys):
    with pytest.raises(SystemExit) as info:
        build_parser().parse_args([command, "--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    for flag in flags:
        assert flag in text


def test_workers_env_default(monkeypatch):
    monkeypatch.setenv("DOUBLECOX_WORKERS", "3")
    args = build_parser().parse_args(["study", "x", "y"])
    assert args.workers == 3
