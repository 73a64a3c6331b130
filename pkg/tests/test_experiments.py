import json

import numpy as np
import pytest

from spinprep import cli
from spinprep.experiments import (
    ConfigError,
    emit_plot_data,
    expand_tasks,
    load_config,
    parse_config,
    preset_names,
    read_results,
    run_experiment,
    scale_up,
    verify,
)


def small(kind, **over):
    cfg = {
        "kind": kind,
        "target": {"model": "heisenberg", "n_sites": 4},
        "evolution": {"model": "xy", "n_sites": 4},
        "grids": {},
        "protocols": [{"protocol": "fgto", "total_time": 2.0, "n_slices": 2, "epochs": 5}],
        "seeds": [0, 1],
    }
    cfg.update(over)
    return cfg


def write(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


def test_unknown_key_names_offender():
    with pytest.raises(ConfigError, match="protocols\\[0\\].epoch"):
        parse_config(small("single_run", protocols=[{"protocol": "gto", "epoch": 3}]))
    with pytest.raises(ConfigError, match="colour"):
        parse_config({**small("single_run"), "colour": 1})
    with pytest.raises(ConfigError, match="grids.K"):
        parse_config(small("fidelity_vs_K"))
    with pytest.raises(ConfigError, match="target"):
        parse_config(small("single_run", target={"model": "heisenberg", "n_sites": 1}))


def test_presets_parse():
    names = preset_names()
    assert "fig8_gate_sweep" in names and "fig4_fidelity_vs_T" in names
    for name in names:
        load_config(name)


def test_scale_up():
    cfg = scale_up(load_config("fig4_fidelity_vs_T"))
    assert cfg.target["n_sites"] == 10 and cfg.evolution["n_sites"] == 10
    assert scale_up(load_config("fig5_fidelity_vs_N")).grids["N"] == [4, 5, 6, 7, 8, 9, 10]


def test_task_expansion_counts():
    cfg = parse_config(small("fidelity_vs_K", grids={"K": [1, 2, 4]}))
    tasks = expand_tasks(cfg)
    assert len(tasks) == 6
    assert len({t.config_hash for t in tasks}) == 6
    gates = parse_config(small("gate_sweep", grids={"gates": ["swap", "cnot"], "T": [1.0, 2.0]},
                               evolution={"model": "heisenberg", "n_sites": 2}))
    assert len(expand_tasks(gates)) == 8


def test_single_run_zero_epochs(tmp_path):
    cfg = parse_config(small("single_run", protocols=[{"protocol": "gto", "n_slices": 2, "epochs": 0}], seeds=[3]))
    (rec,) = run_experiment(cfg, out=tmp_path)
    assert 0 <= rec.fidelity <= 1 and rec.seed == 3


def test_run_is_reproducible_and_verifiable(tmp_path):
    cfg = parse_config(small("fidelity_vs_K", grids={"K": [1, 2]}))
    run_experiment(cfg, out=tmp_path / "a")
    run_experiment(cfg, out=tmp_path / "b")
    text_a = (tmp_path / "a" / "results.csv").read_text()
    assert text_a == (tmp_path / "b" / "results.csv").read_text()
    assert "# config_hash:" in text_a
    for seed in range(3):
        ok, record, fresh = verify(tmp_path / "a", seed=seed)
        assert ok and abs(fresh - record.fidelity) <= 1e-12
    _, records = read_results(tmp_path / "a" / "results.csv")
    assert len(records) == 4 and all(0 <= r.fidelity <= 1 for r in records)


def test_parallel_matches_serial(tmp_path):
    cfg = parse_config(small("fidelity_vs_T", grids={"T": [1.0, 2.0]}))
    run_experiment(cfg, out=tmp_path / "s")
    run_experiment(cfg, threads=2, out=tmp_path / "p")
    assert (tmp_path / "s" / "results.csv").read_text() == (tmp_path / "p" / "results.csv").read_text()


def test_verify_detects_tampering(tmp_path):
    cfg = parse_config(small("single_run", seeds=[0]))
    (rec,) = run_experiment(cfg, out=tmp_path)
    path = tmp_path / "results.csv"
    path.write_text(path.read_text().replace(repr(rec.fidelity), repr(rec.fidelity * 0.5)))
    ok, _, _ = verify(path)
    assert not ok


def test_trajectory_plot_columns(tmp_path):
    protos = [
        {"protocol": "sto", "total_time": 2.0, "n_slices": 4, "epochs": 2},
        {"protocol": "gto", "total_time": 2.0, "n_slices": 4, "epochs": 6},
        {"protocol": "fgto", "total_time": 2.0, "n_slices": 4, "epochs": 2},
    ]
    cfg = parse_config(small("trajectory", protocols=protos, seeds=[0]))
    records = run_experiment(cfg, out=tmp_path)
    (path,) = emit_plot_data(records, "trajectory", tmp_path)
    lines = path.read_text().splitlines()
    assert lines[1] == "t,f_fgto(t),f_gto(t),f_sto(t)"
    assert len(lines) == 2 + 5


def test_vs_n_plot_has_fit_footer(tmp_path):
    protos = [
        {"protocol": "fgto", "total_time": 2.0, "n_slices": 2, "epochs": 5, "loss": "nlf"},
        {"protocol": "fgto", "total_time": 2.0, "n_slices": 2, "epochs": 5, "loss": "one_minus_f"},
    ]
    cfg = parse_config(small("fidelity_vs_N", grids={"N": [2, 4]}, protocols=protos, seeds=[0],
                             target={"model": "heisenberg"}, evolution={"model": "xy"}))
    records = run_experiment(cfg, out=tmp_path)
    (path,) = emit_plot_data(records, "fidelity_vs_N", tmp_path)
    text = path.read_text()
    assert "f_fgto_nlf" in text and "# fit fgto_one_minus_f: f = 1 - mu*exp(nu*N)" in text


def test_landscape_writes_three_axes(tmp_path):
    cfg = parse_config(small("field_landscape", seeds=[0]))
    records = run_experiment(cfg, out=tmp_path)
    paths = emit_plot_data(records, "field_landscape", tmp_path)
    assert [p.name for p in paths] == ["plot_landscape_x.csv", "plot_landscape_y.csv", "plot_landscape_z.csv"]
    rows = paths[0].read_text().splitlines()
    assert len(rows) == 2 + 2 and rows[1].count(",") == 4


def test_three_model_histories(tmp_path):
    cfg = parse_config(small("three_model", grids={"models": ["ising", "xy", "heisenberg"]}, seeds=[0]))
    records = run_experiment(cfg, out=tmp_path)
    assert {r.evolution for r in records} == {"ising", "xy", "heisenberg"}
    (path,) = emit_plot_data(records, "three_model", tmp_path)
    assert len(path.read_text().splitlines()) == 2 + 10


def test_empty_plot_rejected(tmp_path):
    with pytest.raises(ValueError):
        emit_plot_data([], "single_run", tmp_path)


def test_cli_exit_codes(tmp_path, capsys):
    bad = write(tmp_path, {**small("single_run"), "oops": 1})
    assert cli.main(["run", str(bad)]) == cli.EXIT_CONFIG
    assert "oops" in capsys.readouterr().err
    good = write(tmp_path, small("single_run"), "good.json")
    out = tmp_path / "out"
    assert cli.main(["run", str(good), "--out", str(out), "--seed", "4"]) == cli.EXIT_OK
    _, records = read_results(out)
    assert [r.seed for r in records] == [4]
    assert cli.main(["verify", str(out)]) == cli.EXIT_OK
    assert cli.main(["plotdata", str(out / "results.csv"), "--kind", "single_run"]) == cli.EXIT_OK


def test_output_dir_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("SPINPREP_OUT", str(tmp_path / "env"))
    cfg = parse_config(small("single_run", seeds=[0]))
    run_experiment(cfg)
    assert (tmp_path / "env" / "results.csv").exists()


def test_numerical_failure_flushes_partial(tmp_path, monkeypatch):
    from spinprep import experiments
    from spinprep.control import NumericalError

    calls = {"n": 0}
    real = experiments.run_protocol

    def flaky(*args):
        calls["n"] += 1
        if calls["n"] == 2:
            raise NumericalError("boom", 0)
        return real(*args)

    monkeypatch.setattr(experiments, "run_protocol", flaky)
    path = write(tmp_path, small("single_run"))
    assert cli.main(["run", str(path), "--out", str(tmp_path / "o")]) == cli.EXIT_NUMERICAL
    text = (tmp_path / "o" / "results.csv").read_text()
    assert "# complete: false" in text
    assert len([l for l in text.splitlines() if not l.startswith("#")]) == 2
