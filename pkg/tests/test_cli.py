import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from disentangle.checks import run_suite
from disentangle.cli import UsageError, main, parse_grid, parse_seeds, read_config_file


def test_parse_grid_forms():
    assert parse_grid("1") == [1.0]
    assert parse_grid("0.5, 1,2") == [0.5, 1.0, 2.0]
    g = parse_grid("0.1:10:41:log")
    assert len(g) == 41 and g[20] == pytest.approx(1.0)
    assert parse_grid("1:3:3:lin") == [1.0, 2.0, 3.0]
    for bad in ("2,1", "1,1", "-1,2", "", "a,b", "1:2:3", "1:2:3:cubic"):
        with pytest.raises(UsageError):
            parse_grid(bad)


@given(st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=8, unique=True))
def test_parse_grid_comma_list(values):
    values = sorted(values)
    assert parse_grid(",".join(repr(v) for v in values)) == values


def test_parse_seeds():
    assert parse_seeds("1..5") == [1, 2, 3, 4, 5]
    assert parse_seeds("7") == [7]
    assert parse_seeds("1,3") == [1, 3]
    with pytest.raises(UsageError):
        parse_seeds("x")


def test_config_file(tmp_path):
    path = tmp_path / "c.conf"
    path.write_text("# comment\nrestarts = 3  # trailing\n\ngrid = 1\n")
    assert read_config_file(path) == {"restarts": "3", "grid": "1"}
    path.write_text("just words\n")
    with pytest.raises(UsageError):
        read_config_file(path)


def test_scalar_sweep(tmp_path, capsys):
    assert main(["sweep", "--n", "1", "--k", "1", "--a", "1", "--grid", "1", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert len(lines) == 2
    row = dict(zip(lines[0].split(","), lines[1].split(",")))
    assert abs(float(row["mie"])) < 1e-12 and abs(float(row["tie"])) < 1e-12
    assert (tmp_path / "elbo.png").exists() and (tmp_path / "report.txt").exists()


def test_config_resolved_round_trip(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["sweep", "--n", "2", "--k", "1", "--grid", "0.7:1.2:7:log", "--set", "restarts=2", "--out", str(a)]) == 0
    assert main(["sweep", "--config", str(a / "config.resolved"), "--out", str(b)]) == 0
    assert (a / "sweep.csv").read_bytes() == (b / "sweep.csv").read_bytes()
    assert (a / "config.resolved").read_bytes() == (b / "config.resolved").read_bytes()


def test_env_output_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("DISENTANGLE_OUT", str(tmp_path / "env"))
    assert main(["sweep", "--n", "1", "--k", "1", "--grid", "1"]) == 0
    assert (tmp_path / "env" / "sweep.csv").exists()


def test_usage_errors(tmp_path, capsys):
    assert main(["sweep", "--grid", "2,1", "--out", str(tmp_path)]) == 2
    assert main(["sweep", "--set", "bogus=1", "--out", str(tmp_path)]) == 2
    assert main(["sweep", "--set", "restarts=many", "--out", str(tmp_path)]) == 2
    cfg = tmp_path / "bad.conf"
    cfg.write_text("epochs = 3\n")
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert main(["train-deep", "--dataset", str(tmp_path / "none"), "--no-generate", "--out", str(tmp_path)]) == 2
    assert main(["gen-data", "--out", "/proc/definitely/not/here"]) == 2
    assert main(["check", "--only", "nothing", "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["sweep", "--preset", "desk"])
    assert exc.value.code == 2
    assert "error" in capsys.readouterr().err


def test_gen_data_default_and_deterministic(tmp_path, capsys):
    assert main(["gen-data", "--n", "10", "--seed", "7", "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-data", "--n", "10", "--seed", "7", "--out", str(tmp_path / "b")]) == 0
    for name in ("dataset.csv", "images.bin", "meta.txt", "config.resolved"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    out = capsys.readouterr().out
    assert "n=10 seed=7" in out and "2.73" in out and "0.73" in out
    assert main(["gen-data", "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "dataset.csv").read_text().count("\n") == 1001


def test_train_deep_smoke(tmp_path):
    args = ["train-deep", "--realizations", "1", "--epochs", "1", "--n", "120",
            "--set", "mc_samples_eval=5", "--set", "heldout=20", "--out"]
    assert main(args + [str(tmp_path / "a")]) == 0
    assert main(args + [str(tmp_path / "b")]) == 0
    for name in ("deep_sweep.csv", "loss_trace.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    lines = (tmp_path / "a" / "deep_sweep.csv").read_text().splitlines()
    assert lines[0] == "beta,realization,elbo,recon,ci_loss,tie,recon_se" and len(lines) == 4
    assert len(list((tmp_path / "a" / "models").glob("*.bvae"))) == 3
    assert (tmp_path / "a" / "reconstructions.png").exists()


def test_train_deep_with_dataset_dir(tmp_path):
    data = tmp_path / "data"
    assert main(["gen-data", "--n", "60", "--out", str(data)]) == 0
    assert main(["train-deep", "--dataset", str(data), "--no-generate", "--betas", "1", "--realizations", "1",
                 "--epochs", "1", "--set", "mc_samples_eval=3", "--set", "heldout=10",
                 "--out", str(tmp_path / "run")]) == 0


def test_check_only_gradients(tmp_path, capsys):
    assert main(["check", "--only", "gradients", "--seed", "1..2", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "loss_gradient" in out and "oracle" not in out and "4/4 checks passed" in out


def test_check_suite_all_pass():
    rows = run_suite([0])
    failed = [r.name for _, r in rows if not r.passed]
    assert not failed
    assert {"posterior", "Woodbury", "planted"} <= {w for _, r in rows for w in r.name.split()}
