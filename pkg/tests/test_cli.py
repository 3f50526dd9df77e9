"""Command line workflow: subcommands, printed output, exit codes."""

import pytest

from nsatp import cli


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A simulated dataset plus a trained run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    sim_toml = root / "sim.toml"
    sim_toml.write_text(
        "[sim]\nn_stops = 12\nn_days = 5\nn_past = 4\nn_future = 2\nseed = 3\n"
        "first_departure_s = 21600.0\nlast_departure_s = 32400.0\n"
    )
    dataset = root / "data.jsonl"
    assert cli.main(["simulate", "--config", str(sim_toml), "--out", str(dataset)]) == 0
    exp_toml = root / "exp.toml"
    exp_toml.write_text(
        "[experiment]\n"
        'model = "nsatp_cnn"\n'
        f'dataset = "{dataset}"\n'
        "epochs = 2\nbatch_size = 64\nlr = 1e-3\nseed = 0\n"
        "\n[model]\nd_model = 4\nn_blocks = 1\nn_periods = 1\nn_kernels = 1\nmlp_hidden = 4\n"
    )
    run = root / "run"
    assert cli.main(["train", "--config", str(exp_toml), "--out", str(run)]) == 0
    return {"root": root, "sim": sim_toml, "exp": exp_toml, "dataset": dataset, "run": run}


def test_simulate_output(workspace, capsys, tmp_path):
    out = tmp_path / "d.jsonl"
    code = cli.main(["simulate", "--config", str(workspace["sim"]),
                     "--seed", "9", "--out", str(out)])
    captured = capsys.readouterr()
    assert code == 0
    assert "wrote" in captured.out and "splits:" in captured.out
    assert out.exists()


def test_train_prints_table(workspace, capsys, tmp_path):
    code = cli.main(["train", "--config", str(workspace["exp"]),
                     "--out", str(tmp_path / "r")])
    captured = capsys.readouterr()
    assert code == 0
    assert "RMSE" in captured.out
    assert "total" in captured.out
    assert "unit-root ratio" in captured.out


def test_evaluate_roundtrip(workspace, capsys, tmp_path):
    ckpt = workspace["run"] / "checkpoint.json"
    code = cli.main(["evaluate", "--checkpoint", str(ckpt),
                     "--dataset", str(workspace["dataset"]),
                     "--horizon", "2", "--out", str(tmp_path / "eval")])
    assert code == 0
    assert (tmp_path / "eval" / "report.json").exists()
    assert "RMSE" in capsys.readouterr().out


def test_evaluate_horizon_mismatch_is_config_error(workspace, capsys):
    ckpt = workspace["run"] / "checkpoint.json"
    code = cli.main(["evaluate", "--checkpoint", str(ckpt),
                     "--dataset", str(workspace["dataset"]), "--horizon", "7"])
    assert code == cli.EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_missing_files_are_io_errors(workspace, capsys):
    code = cli.main(["evaluate", "--checkpoint", "/nonexistent/c.json",
                     "--dataset", str(workspace["dataset"])])
    assert code == cli.EXIT_IO
    assert "i/o error" in capsys.readouterr().err
    code = cli.main(["train", "--config", "/nonexistent/exp.toml", "--out", "/tmp/x"])
    assert code == cli.EXIT_IO


def test_bad_config_exit_code(workspace, capsys, tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text('[experiment]\nmodel = "bogus"\ndataset = "d"\n')
    code = cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "r")])
    assert code == cli.EXIT_CONFIG
    assert "unknown model" in capsys.readouterr().err


def test_adf_study_output(capsys, tmp_path):
    # the study needs full-length delay sequences, so use a longer route
    sim_toml = tmp_path / "sim.toml"
    sim_toml.write_text(
        "[sim]\nn_stops = 25\nn_days = 2\nn_past = 4\nn_future = 2\nseed = 1\n"
        "first_departure_s = 21600.0\nlast_departure_s = 32400.0\n"
    )
    code = cli.main(["adf", "--config", str(sim_toml),
                     "--windows", "25", "--window-len", "20", "--stride", "5"])
    captured = capsys.readouterr()
    assert code == 0
    assert "raw windows" in captured.out
    assert "standardized windows" in captured.out


def test_adf_study_too_short_for_windows(capsys, workspace):
    # a 12-stop route cannot fill the default 30-step windows
    code = cli.main(["adf", "--config", str(workspace["sim"])])
    captured = capsys.readouterr()
    assert code == cli.EXIT_CONFIG
    assert "configuration error" in captured.err


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["--version"])
    assert info.value.code == 0
    assert "nsatp" in capsys.readouterr().out
