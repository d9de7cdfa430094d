import json
import textwrap

import pytest

from swarmcbf import cli, scenarios
from swarmcbf.errors import ComparisonError, ConfigError
from swarmcbf.scenarios import (
    OUTPUT_ROOT_ENV,
    load_run,
    parse_config,
    preset,
    preset_names,
    read_csv,
    recompute_violations,
    run_config,
)

SMALL_1D = textwrap.dedent("""\
    name: small1d
    grid:
      bounds: [[-5, 20]]
      cells: [250]
    initial: {kind: gaussian, mean: [0], cov: [1]}
    target: {kind: uniform, box: [[10, 14]]}
    time: {dt: 0.01, steps: 30}
    schedule: {horizon: 1.0, gain_cap: 100}
    barriers:
      - kind: pointwise-cap
        bound: 0.2
        region: [[3, 7]]
        alpha: 5
    output: {stride: 10, plots: false}
    """)

SMALL_SWARM = textwrap.dedent("""\
    name: smallswarm
    mode: microscopic
    seed: 4
    grid: {bounds: [[0, 4], [0, 4]], cells: [40, 40]}
    initial: {kind: uniform, box: [[0.5, 3.5], [0.5, 3.5]]}
    target: {kind: gaussian, mean: [2, 2], cov: [0.2, 0.2]}
    time: {dt: 0.01, steps: 10}
    schedule: {horizon: 1.0, gain_cap: 10}
    sinkhorn: {epsilon: 0.05}
    swarm: {N: 150, r: 0.3, mode: entropy, entropy_eps: 1.0, alpha: 10}
    output: {stride: 5, plots: false}
    """)


def _err(text):
    with pytest.raises(ConfigError) as e:
        parse_config(text)
    return e.value


def test_parse_fills_defaults():
    cfg = parse_config(SMALL_1D)
    assert cfg.mode == "macroscopic" and cfg.filtered is True
    assert cfg.solver["feas_tol"] == 1e-7
    assert cfg.barriers[0]["alpha"] == 5.0
    assert cfg.horizon == pytest.approx(0.3)


def test_unknown_key_reports_field_and_line():
    e = _err(SMALL_1D.replace("  cells: [250]", "  cells: [250]\n  cels: [3]"))
    assert e.field == "grid.cels" and e.line == 5
    e = _err(SMALL_1D.replace("alpha: 5", "alfa: 5"))
    assert e.field.endswith("alfa") and e.line == 13


def test_bad_values_are_located():
    e = _err(SMALL_1D.replace("dt: 0.01", "dt: fast"))
    assert e.field == "time.dt"
    e = _err(SMALL_1D.replace("kind: pointwise-cap", "kind: lid"))
    assert "barriers[0].kind" in e.field
    e = _err(SMALL_1D.replace("    bound: 0.2\n", ""))
    assert e.field == "barriers[0].bound"


def test_duplicate_keys_rejected():
    e = _err(SMALL_1D.replace("name: small1d", "name: small1d\nname: other"))
    assert e.line == 2


def test_region_must_lie_inside_grid():
    e = _err(SMALL_1D.replace("region: [[3, 7]]", "region: [[3, 27]]"))
    assert e.field == "barriers[0].region"
    _err(SMALL_1D.replace("box: [[10, 14]]", "box: [[10, 24]]"))


def test_seed_mandatory_in_microscopic_mode():
    e = _err(SMALL_SWARM.replace("seed: 4\n", ""))
    assert e.field == "seed"
    _err(SMALL_SWARM.replace("swarm:", "barriers: [{kind: entropy, epsilon: 1}]\nswarm:"))


def test_yaml_syntax_error_has_line():
    e = _err("name: x\ngrid: [\n")
    assert e.line is not None


def test_config_round_trip():
    for name in preset_names():
        cfg = preset(name)
        assert parse_config(cfg.dump()).to_dict() == cfg.to_dict()


def test_presets_carry_stated_parameters():
    c = preset("1d_cap")
    assert c.time == {"dt": 0.001, "steps": 1000} and c.schedule["horizon"] == 1.0
    assert c.barriers[0]["bound"] == 0.2 and c.barriers[0]["region"] == [[3.0, 7.0]]
    c = preset("2d_obstacle")
    assert c.initial["mean"] == [1.0, 1.0] and c.initial["cov"] == [0.05, 0.05]
    assert c.target["mean"] == [7.0, 7.0] and c.grid["cells"] == [160, 160]
    c = preset("2d_distributed")
    assert c.swarm["rho_max"] == 0.045 and c.swarm["rho_min"] == 0.01
    assert preset("entropy").swarm["entropy_eps"] == 3.0
    with pytest.raises(ConfigError):
        preset("nope")


def test_run_writes_outputs_and_report(tmp_path):
    cfg = parse_config(SMALL_1D)
    rep = run_config(cfg, out=tmp_path / "a")
    d = tmp_path / "a"
    assert (d / "diagnostics.csv").exists() and (d / "report.json").exists()
    assert sorted(p.name for p in (d / "snapshots").iterdir()) == [f"rho_{k:05d}.csv" for k in range(4)]
    rows = read_csv(d / "diagnostics.csv")
    for col in ("t", "mass", "entropy", "V", "w2_to_target", "H_cap", "u_dev_norm", "qp_status", "qp_iters"):
        assert col in rows[0]
    assert recompute_violations(cfg, rows) == json.loads((d / "report.json").read_text())["violations"]
    echo = json.loads((d / "report.json").read_text())["config"]
    assert parse_config(echo).to_dict() == cfg.to_dict()
    assert rep.exit_code == 0


def test_plots_are_svg(tmp_path):
    cfg = parse_config(SMALL_1D.replace("plots: false", "plots: true"))
    rep = run_config(cfg, out=tmp_path)
    svgs = [f for f in rep.files if f.endswith(".svg")]
    assert {"density.svg", "barriers.svg", "w2.svg"} <= set(svgs)
    assert (tmp_path / "density.svg").read_text().lstrip().startswith("<?xml")


def test_byte_identical_reruns(tmp_path):
    for text, snap in ((SMALL_1D, "rho_00001.csv"), (SMALL_SWARM, "swarm_00001.csv")):
        cfg = parse_config(text)
        run_config(cfg, out=tmp_path / "x")
        run_config(cfg, out=tmp_path / "y")
        for f in ("diagnostics.csv", f"snapshots/{snap}"):
            assert (tmp_path / "x" / f).read_bytes() == (tmp_path / "y" / f).read_bytes()


def test_seed_changes_swarm(tmp_path):
    a = run_config(parse_config(SMALL_SWARM), out=tmp_path / "a")
    b = run_config(parse_config(SMALL_SWARM).with_overrides(seed=5), out=tmp_path / "b")
    assert a.diagnostics[0]["entropy_hat"] != b.diagnostics[0]["entropy_hat"]


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    rep = run_config(parse_config(SMALL_1D))
    assert rep.out_dir == str(tmp_path / "root" / "small1d")


def test_compare_self_and_errors(tmp_path):
    run_config(parse_config(SMALL_1D), out=tmp_path / "a")
    s = scenarios.compare(tmp_path / "a", tmp_path / "a", out=tmp_path / "cmp")
    assert all(v == 0.0 for v in s["difference"].values())
    assert (tmp_path / "cmp" / "compare.json").exists()
    assert any(f.startswith("compare_H_cap") for f in s["files"])
    run_config(parse_config(SMALL_1D.replace("steps: 30", "steps: 20")), out=tmp_path / "b")
    with pytest.raises(ComparisonError):
        scenarios.compare(tmp_path / "a", tmp_path / "b")
    run_config(parse_config(SMALL_1D.replace("cells: [250]", "cells: [200]")), out=tmp_path / "c")
    with pytest.raises(ComparisonError):
        scenarios.compare(tmp_path / "a", tmp_path / "c")
    with pytest.raises(ComparisonError):
        load_run(tmp_path / "missing")


def test_compare_reports_violation_of_unfiltered(tmp_path):
    base = SMALL_1D.replace("gain_cap: 100", "gain_cap: 1000").replace("steps: 30", "steps: 60")
    run_config(parse_config(base), out=tmp_path / "f")
    run_config(parse_config(base.replace("name: small1d", "name: small1d\nfiltered: false")), out=tmp_path / "u")
    s = scenarios.compare(tmp_path / "f", tmp_path / "u")
    assert s["a"]["max_violation"]["H_cap"] <= 2e-3
    assert s["b"]["max_violation"]["H_cap"] > 0


def test_cli_exit_codes(tmp_path, capsys):
    cfg = tmp_path / "ok.yaml"
    cfg.write_text(SMALL_1D)
    assert cli.main(["run", str(cfg), "--out", str(tmp_path / "ok"), "-q"]) == 0
    bad = tmp_path / "bad.yaml"
    bad.write_text(SMALL_1D.replace("steps: 30}", "steps: 30, stepz: 1}"))
    assert cli.main(["run", str(bad), "--out", str(tmp_path / "bad")]) == 1
    assert "time.stepz" in capsys.readouterr().err
    assert cli.main(["run", "--preset", "nope"]) == 1
    assert cli.main(["compare", str(tmp_path / "ok"), str(tmp_path / "nowhere")]) == 1
    # a lone agent cannot be kept in company: the cohesion floor is reported as violated
    lone = tmp_path / "lone.yaml"
    lone.write_text(SMALL_SWARM.replace("N: 150, r: 0.3, mode: entropy, entropy_eps: 1.0, alpha: 10",
                                        "N: 3, r: 0.1, mode: cap, rho_max: 50, rho_min: 0.01"))
    assert cli.main(["run", str(lone), "--out", str(tmp_path / "lone"), "-q"]) == 2
    assert cli.main(["compare", str(tmp_path / "ok"), str(tmp_path / "ok")]) == 0


def test_cli_presets(capsys):
    assert cli.main(["presets", "list"]) == 0
    out = capsys.readouterr().out
    assert all(n in out for n in ("1d_cap", "2d_obstacle", "2d_distributed", "entropy"))
    assert cli.main(["presets", "show", "1d_cap"]) == 0
    assert parse_config(capsys.readouterr().out).name == "1d_cap"


def test_preset_with_file_override(tmp_path):
    over = tmp_path / "o.yaml"
    over.write_text("time: {steps: 5}\noutput: {plots: false}\n")
    rep = scenarios.run(over, out=tmp_path / "r", preset_name="1d_cap")
    assert rep.final["steps"] == 5 and rep.config["time"]["dt"] == 0.001
