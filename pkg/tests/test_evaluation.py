import csv
import dataclasses
import json

import numpy as np
import pytest

from needleforge import dataset, elm, evaluation
from needleforge.config import Config, TrainConfig
from needleforge.errors import UsageError
from needleforge.evaluation import RunSummary, RunTrace, TRACE_COLUMNS
from needleforge.trajectory import Trajectory, straight_grid

SMOKE = "tests/data/smoke.csv"


def shallow_config(depth=0.004):
    cfg = Config()
    return dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, depth=depth))


def trace_with_error(e):
    tr = RunTrace(trajectory_id=0, controller="x")
    row = np.zeros(len(TRACE_COLUMNS))
    row[10:13] = e
    tr.rows.append(row.tolist())
    return tr


@pytest.fixture(scope="module")
def smoke_model():
    ds = dataset.load_csv(SMOKE)
    return elm.train(elm.init_model(TrainConfig()), ds.X, ds.Y)


def test_final_error_hand_case():
    assert evaluation.final_error(trace_with_error([3e-3, 4e-3, 0.0])) == pytest.approx(5.0)
    with pytest.raises(UsageError):
        evaluation.final_error(RunTrace(0, "x"))


def test_aggregate_matches_direct_formula(rng):
    v = rng.uniform(0, 2, size=17)
    mean, std = evaluation.aggregate(v)
    assert mean == pytest.approx(sum(v) / 17, rel=1e-14)
    assert std == pytest.approx(np.sqrt(sum((x - mean) ** 2 for x in v) / 16), rel=1e-12)
    assert evaluation.aggregate([2.5]) == (2.5, 0.0)
    assert all(np.isnan(evaluation.aggregate([])))


def test_run_steps_counts_settle_window(cfg):
    t = straight_grid(1, 1, extent=(0, 0), depth=0.110)[0]
    assert evaluation.run_steps(t, cfg.scene) == 2200 + cfg.scene.settle_steps


def test_zero_length_trajectory_holds_entry(cfg):
    t = Trajectory(id=0, kind="straight", entry=(0.0, 0.0, 0.0), endpoint=(0.0, 0.0, 0.0),
                   depth=0.0)
    tr = evaluation.run_closed_loop(cfg, t, evaluation.make_controller("inverse", cfg))
    assert tr.status == "done"
    assert tr.n_steps == cfg.scene.settle_steps
    assert np.allclose(tr.table[:, 7:10], 0.0)
    assert evaluation.final_error(tr) < 1e-3


def test_closed_loop_trace_invariants():
    cfg = shallow_config()
    traj = straight_grid(3, 1, extent=(0.004, 0.0), depth=cfg.data.depth)[2]
    tr = evaluation.run_closed_loop(cfg, traj, evaluation.make_controller("inverse", cfg))
    t = tr.table
    assert tr.status == "done" and tr.n_steps == evaluation.run_steps(traj, cfg.scene)
    assert np.all(np.diff(t[:, 0]) > 0)
    assert np.all(t[:, 13] >= 0)
    assert np.allclose(t[:, 10:13], t[:, 7:10] - t[:, 4:7], atol=1e-15)
    assert evaluation.final_error(tr) < 0.2


def test_evaluation_targets_are_noise_free():
    cfg = shallow_config()
    traj = straight_grid(1, 1, extent=(0, 0), depth=cfg.data.depth)[0]
    a = evaluation.run_closed_loop(cfg, traj, evaluation.make_controller("inverse", cfg),
                                   max_steps=30)
    # the straight-down path keeps every target on the axis
    assert np.all(a.table[:, 7:9] == 0.0)


def test_elm_controller_returns_absolute_goal(smoke_model, cfg):
    class Scene:
        def effector_position(self):
            return np.array([0.01, -0.02, -0.14])

        def needle_tip(self):
            return np.array([0.0, 0.0, 0.003])

    ctrl = evaluation.ElmController(smoke_model)
    P = np.array([0.0002, 0.0, 0.0031])
    goal = ctrl(Scene(), P)
    x = np.concatenate([Scene().effector_position(), P - Scene().needle_tip()]) * 1e3
    assert np.allclose(goal, Scene().effector_position() + elm.predict(smoke_model, x) * 1e-3,
                       rtol=0, atol=1e-18)


def test_make_controller_errors(cfg):
    with pytest.raises(UsageError):
        evaluation.make_controller("elm", cfg)
    with pytest.raises(UsageError):
        evaluation.make_controller("pid", cfg)


def test_bench_rejects_empty_measurement(cfg):
    with pytest.raises(UsageError):
        evaluation.bench_latency(cfg, evaluation.make_controller("inverse", cfg), n_steps=0)


def test_bench_sample_count(smoke_model):
    cfg = shallow_config()
    trajs = straight_grid(1, 1, extent=(0, 0), depth=cfg.data.depth)
    mean, std, samples = evaluation.bench_latency(cfg, evaluation.ElmController(smoke_model),
                                                  n_steps=150, trajectories=trajs, warmup=5)
    assert len(samples) == 150
    assert mean == pytest.approx(samples.mean()) and std >= 0


def fake_runs():
    rng = np.random.default_rng(3)
    runs = []
    for s in ("straight", "curved"):
        for k in ("inverse", "elm"):
            for i in range(6):
                status = "diverged" if (s, k, i) == ("curved", "elm", 4) else "done"
                runs.append(RunSummary(s, i, k, status, float(rng.uniform(0, 1)), 100,
                                       float(rng.uniform(0.1, 2))))
    return runs


def test_report_cells_recomputable(tmp_path, cfg):
    runs = fake_runs()
    summary = evaluation.write_report(runs, tmp_path, cfg)
    cells = summary["cells"]
    assert len(cells) == 4
    with open(tmp_path / "runs.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(runs)
    for c in cells:
        vals = [float(r["final_error_mm"]) for r in rows
                if r["set"] == c["set"] and r["controller"] == c["controller"]
                and r["status"] == "done"]
        assert c["completed"] == len(vals)
        assert c["final_error_mean_mm"] == pytest.approx(np.mean(vals), rel=1e-14)
        assert c["final_error_std_mm"] == pytest.approx(np.std(vals, ddof=1), rel=1e-12)
    bad = [c for c in cells if c["diverged"]]
    assert [(c["set"], c["controller"], c["diverged"]) for c in bad] == [("curved", "elm", 1)]
    assert json.loads((tmp_path / "summary.json").read_text()) == summary
    text = (tmp_path / "summary.txt").read_text()
    assert "curved" in text and "straight" in text


def test_report_is_byte_stable(tmp_path, cfg):
    runs = fake_runs()
    for r in runs[:3]:
        r.depth_mm = np.linspace(0, 110, 50)
        r.error_mm = np.linspace(1, 0.01, 50)
    a, b = tmp_path / "a", tmp_path / "b"
    evaluation.write_report(runs, a, cfg)
    evaluation.write_report(runs, b, cfg)
    for name in ("runs.csv", "summary.json", "summary.txt", "error_vs_depth_straight.svg"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert (a / "error_vs_depth_straight.svg").read_text().lstrip().startswith("<?xml")
