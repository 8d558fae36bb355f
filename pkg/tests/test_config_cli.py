import json
import textwrap

import numpy as np
import pytest
import yaml

from fracmv.cli import main
from fracmv.config import RunConfig, canonical_dict, load_config
from fracmv.errors import ValidationError

TINY_YAML = textwrap.dedent(
    """\
    grid: {half_width: 4.0, points_per_dim: 32}
    time: {horizon: 0.25, steps: 20}
    noise: {n_modes: 2}
    picard: {n_particles: 4}
    """
)


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY_YAML)
    return path


# -- configuration -----------------------------------------------------------


def test_shipped_canonical_file_matches_defaults():
    from pathlib import Path

    shipped = Path(__file__).resolve().parents[1] / "configs" / "canonical.yaml"
    with open(shipped) as fh:
        doc = yaml.safe_load(fh)
    assert doc == canonical_dict()
    assert RunConfig(doc).config_hash() == RunConfig().config_hash()


def test_defaults_build_canonical_instance(canonical_cfg):
    assert canonical_cfg.grid.points_per_dim == 128
    assert canonical_cfg.grid.half_width == 8.0
    assert canonical_cfg.tgrid.steps == 200
    assert canonical_cfg.coeffs.sigma.n_modes == 4
    assert canonical_cfg.epsilon == pytest.approx(0.01)
    assert canonical_cfg.picard_config().n_particles == 64
    assert canonical_cfg.eta_ladder() == (1e-2, 1e-3, 1e-4, 1e-5, 1e-6)


@pytest.mark.parametrize(
    "patch,needle",
    [
        ({"grid": {"points_per_dim": 33}}, "grid.points_per_dim"),
        ({"model": {"alpha": 1.5}}, "model.alpha"),
        ({"model": {"epsilon": 1.0}}, "model.epsilon"),
        ({"drift_f": {"p": 3}}, "drift_f.p"),
        ({"drift_g": {"c1": 1.2}}, "drift_g.c1"),
        ({"time": {"steps": 0}}, "time.steps"),
        ({"picard": {"lambda_weight": "car"}}, "picard.lambda_weight"),
        ({"output": {"trajectory_format": "parquet"}}, "output.trajectory_format"),
        ({"noise": {"shape": {"width": -1.0}}}, "noise.shape.width"),
    ],
)
def test_validation_errors_name_the_field(patch, needle):
    raw = canonical_dict()
    for key, val in patch.items():
        if isinstance(val, dict):
            raw[key] = {**raw[key], **val}
        else:
            raw[key] = val
    with pytest.raises(ValidationError) as exc_info:
        RunConfig(raw)
    assert needle in str(exc_info.value)


def test_unknown_keys_are_rejected():
    with pytest.raises(ValidationError) as exc_info:
        RunConfig({"grdi": {"points_per_dim": 64}})
    assert "grdi" in str(exc_info.value)
    with pytest.raises(ValidationError):
        RunConfig({"grid": {"n_points": 64}})


def test_with_overrides_merges_one_level(canonical_cfg):
    small = canonical_cfg.with_overrides(
        grid={"points_per_dim": 32}, time={"steps": 20, "horizon": 0.25}
    )
    assert small.grid.points_per_dim == 32
    assert small.grid.half_width == 8.0  # untouched sibling key survives
    assert small.tgrid.steps == 20
    # the original is unchanged
    assert canonical_cfg.grid.points_per_dim == 128
    assert small.config_hash() != canonical_cfg.config_hash()


def test_initial_ensemble_jitter():
    cfg = RunConfig().with_overrides(initial={"jitter": 0.0})
    assert cfg.initial_ensemble(4) is None
    jittered = RunConfig().with_overrides(initial={"jitter": 0.1})
    states = jittered.initial_ensemble(4)
    assert states.shape == (4,) + jittered.grid.shape
    # reproducible across calls
    assert np.array_equal(states, jittered.initial_ensemble(4))
    amps = states.max(axis=tuple(range(1, states.ndim)))
    assert len(np.unique(amps)) == 4


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ValidationError):
        load_config(tmp_path / "absent.yaml")
    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    cfg = load_config(empty)
    assert cfg.config_hash() == RunConfig().config_hash()


# -- command-line driver -------------------------------------------------


def test_skeleton_command_writes_artifacts(tiny_config, tmp_path, capsys):
    out = tmp_path / "out"
    rc = main(["skeleton", "--config", str(tiny_config), "--out", str(out), "--seed", "123"])
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "skeleton"
    assert manifest["seed"] == 123
    assert (out / "skeleton.traj").exists()
    assert (out / "energy_residual.csv").exists()
    rows = (out / "energy_residual.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 20 + 1  # header + one line per node


def test_simulate_command_writes_artifacts(tiny_config, tmp_path):
    out = tmp_path / "sim"
    # the tiny domain legitimately trips the boundary-mass advisory
    with pytest.warns(UserWarning, match="domain may be too small"):
        rc = main(["simulate", "--config", str(tiny_config), "--out", str(out)])
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "simulate"
    assert manifest["converged"] is True
    assert sorted(p.name for p in (out / "trajectories").iterdir()) == [
        f"particle_{i:03d}.traj" for i in range(4)
    ]
    assert (out / "final_measure" / "measure_manifest.json").exists()
    assert (out / "picard_report.csv").exists()
    summary = (out / "flow_summary.csv").read_text().strip().splitlines()
    assert len(summary) == 1 + 20 + 1


def test_environment_supplies_defaults_and_flags_win(tiny_config, tmp_path, monkeypatch):
    monkeypatch.setenv("FRACMV_SEED", "777")
    out1 = tmp_path / "a"
    assert main(["skeleton", "--config", str(tiny_config), "--out", str(out1)]) == 0
    assert json.loads((out1 / "manifest.json").read_text())["seed"] == 777

    out2 = tmp_path / "b"
    assert main(["skeleton", "--config", str(tiny_config), "--out", str(out2), "--seed", "5"]) == 0
    assert json.loads((out2 / "manifest.json").read_text())["seed"] == 5

    monkeypatch.setenv("FRACMV_OUT", str(tmp_path / "c"))
    assert main(["skeleton", "--config", str(tiny_config)]) == 0
    assert (tmp_path / "c" / "manifest.json").exists()


def test_invalid_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("grid: {points_per_dim: 33}\n")
    rc = main(["simulate", "--config", str(bad), "--out", str(tmp_path / "x")])
    assert rc == 2
    err = capsys.readouterr().err
    assert "error[validation]" in err and "grid.points_per_dim" in err


def test_bogus_rate_target_exits_2(tiny_config, tmp_path, capsys):
    rc = main(["rate", "--config", str(tiny_config), "--out", str(tmp_path / "r"),
               "--target", "bogus"])
    assert rc == 2
    assert "error[validation]" in capsys.readouterr().err


def test_blow_up_exits_3(tmp_path, capsys):
    boom = tmp_path / "boom.yaml"
    boom.write_text(TINY_YAML + "initial: {kind: gaussian, amp: 1.0e+120, width: 1.0}\n")
    rc = main(["skeleton", "--config", str(boom), "--out", str(tmp_path / "b")])
    assert rc == 3
    assert "error[numerical]" in capsys.readouterr().err


def test_unknown_suite_exits_2(tiny_config, tmp_path, capsys):
    rc = main(["verify", "--config", str(tiny_config), "--out", str(tmp_path / "v"),
               "--suite", "nope"])
    assert rc == 2
    assert "unknown suite" in capsys.readouterr().err


def test_rate_deterministic_target_floor(tiny_config, tmp_path):
    out = tmp_path / "rate"
    rc = main(["rate", "--config", str(tiny_config), "--out", str(out),
               "--target", "deterministic"])
    assert rc == 0
    rows = (out / "rate_estimate.csv").read_text().strip().splitlines()
    header, data = rows[0].split(","), rows[1].split(",")
    record = dict(zip(header, data))
    assert float(record["value"]) <= 1e-6
    assert (out / "optimal_control.csv").exists()
    assert (out / "rate_stages.csv").exists()


def test_skeleton_with_control_reports_consistency(tiny_config, tmp_path):
    """A zero control file must reproduce the skeleton exactly, and the
    manifest must record the check."""
    from fracmv.dynamics import Control, save_control, TimeGrid

    v = Control(np.zeros((20, 2)), TimeGrid(horizon=0.25, steps=20).dt)
    vpath = tmp_path / "vzero.csv"
    save_control(v, vpath)
    out = tmp_path / "sk"
    rc = main(["skeleton", "--config", str(tiny_config), "--out", str(out),
               "--control", str(vpath)])
    assert rc == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["control"]["zero_control_check"] is True
    assert manifest["control"]["sup_distance_to_skeleton"] == 0.0
    assert (out / "controlled.traj").exists()
