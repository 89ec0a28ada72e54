import subprocess
import sys

import pytest

from fedsel.cli import main


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.ini"
    path.write_text(
        "[population]\nnum_clients = 40\nsamples_per_client = 30\n"
        "[training]\nrounds = 5\n[experiment]\nreplications = 1\n"
    )
    return path


def test_run_writes_csvs(small_config, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--panel", "a", "--config", str(small_config), "--out", str(out)]) == 0
    assert (out / "panel_a_metrics.csv").exists()
    assert "panel_a_metrics.csv" in capsys.readouterr().out


def test_verify_exit_codes(small_config, tmp_path, monkeypatch):
    assert main(["verify", "--config", str(small_config), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "verification.csv").exists()
    from fedsel import theory

    monkeypatch.setattr(theory, "two_client_gap", lambda inst: 0.0)
    assert main(["verify"]) == 1


def test_configuration_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[training]\nfoo = 1\n")
    assert main(["run", "--panel", "a", "--config", str(bad)]) == 2
    assert "foo" in capsys.readouterr().err
    assert main(["run", "--panel", "z"]) == 2
    assert main(["sweep", "--param", "selection.bias_scale", "--values", "a,b"]) == 2
    assert main(["sweep", "--param", "nope.x", "--values", "1", "--config", str(bad)]) == 2


def test_sweep_command(small_config, tmp_path):
    out = tmp_path / "s"
    rc = main(["sweep", "--param", "selection.bias_scale", "--values", "0,1", "--config", str(small_config), "--out", str(out)])
    assert rc == 0
    assert (out / "sweep_selection_bias_scale_metrics.csv").exists()


def test_env_seed_changes_output(small_config, tmp_path, monkeypatch):
    main(["run", "--panel", "c", "--config", str(small_config), "--out", str(tmp_path / "a")])
    monkeypatch.setenv("FEDSEL_SEED", "123")
    main(["run", "--panel", "c", "--config", str(small_config), "--out", str(tmp_path / "b")])
    assert (tmp_path / "a/panel_c_metrics.csv").read_bytes() != (tmp_path / "b/panel_c_metrics.csv").read_bytes()


def test_module_entry_point(small_config):
    proc = subprocess.run([sys.executable, "-m", "fedsel", "verify", "--config", str(small_config)], capture_output=True, text=True)
    assert proc.returncode == 0 and "checks passed" in proc.stdout
