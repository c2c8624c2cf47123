import numpy as np
import pandas as pd
import pytest

from vsteer import cli
from vsteer.bench import (
    EvalReport,
    config_hash,
    evaluate,
    improvement_rows,
    parse_config,
    report,
    sweep,
    timing_profile,
    wilson_interval,
)
from vsteer.rerank import SteeringConfig
from vsteer.tabular import enumerate_grid, value_iteration
from vsteer.worlds import GridPickPlace, ScriptedGridPolicy, mixed_flawed_policy


@pytest.fixture(scope="module")
def grid3():
    return GridPickPlace(n=3, containers=((0, 1), (0, 2)), p_slip=0.0)


class OracleScorer:
    def __init__(self, env, tasks):
        self.tables = {}
        for t in tasks:
            mdp = enumerate_grid(env, t)
            self.tables[t] = (value_iteration(mdp), mdp.index)

    def __call__(self, state, actions, task_id):
        q, index = self.tables[task_id]
        return q[index[state], np.asarray(actions)]


# ------------------------------------------------------------------ Wilson


def test_wilson_interval_closed_form():
    # n=100, k=50, z=1.95996...: center 0.5, half-width z/denom * sqrt(...)
    z = 1.959963984540054
    lo, hi = wilson_interval(50, 100)
    denom = 1 + z * z / 100
    center = (0.5 + z * z / 200) / denom
    half = z / denom * np.sqrt(0.25 / 100 + z * z / 40000)
    assert lo == pytest.approx(center - half, abs=1e-9)
    assert hi == pytest.approx(center + half, abs=1e-9)


def test_wilson_interval_bounds_and_edges():
    lo, hi = wilson_interval(0, 20)
    assert lo == 0.0 and 0 < hi < 0.25
    lo, hi = wilson_interval(20, 20)
    assert 0.75 < lo < 1.0 and hi == 1.0
    with pytest.raises(ValueError):
        wilson_interval(5, 0)
    with pytest.raises(ValueError):
        wilson_interval(11, 10)


def test_config_hash_stable_and_order_free():
    a = config_hash({"x": 1, "y": [2, 3]})
    b = config_hash({"y": [2, 3], "x": 1})
    assert a == b and len(a) == 12
    assert config_hash({"x": 2, "y": [2, 3]}) != a


# ---------------------------------------------------------------- evaluate


def test_expert_on_noise_free_grid_is_perfect(grid3):
    policy = ScriptedGridPolicy(grid3, "expert", epsilon=0.0)
    rep = evaluate(grid3, policy, [0], n_episodes=100, seeds=[0])
    row = rep.pooled("baseline", 0)
    assert row["success_rate"] == 1.0
    assert row["ci_low"] > 0.95
    assert not rep.flagged


def test_random_policy_near_zero(grid3):
    policy = ScriptedGridPolicy(grid3, "random")
    rep = evaluate(grid3, policy, [0], n_episodes=100, seeds=[0], t_max=20)
    assert rep.pooled("baseline", 0)["success_rate"] < 0.3


def test_single_candidate_steering_matches_baseline_exactly(grid3):
    policy = mixed_flawed_policy(grid3)
    scorer = lambda state, actions, task: np.zeros(len(actions))
    base = evaluate(grid3, policy, [0], 50, [0, 1], label="baseline")
    steer = evaluate(grid3, policy, [0], 50, [0, 1], scorer=scorer,
                     steering=SteeringConfig(num_candidates=1), label="steered")
    for b, s in zip(base.rows, steer.rows):
        assert b["n_success"] == s["n_success"]


def test_evaluate_deterministic_given_seeds(grid3):
    policy = mixed_flawed_policy(grid3)
    a = evaluate(grid3, policy, [0, 1], 30, [3, 4])
    b = evaluate(grid3, policy, [0, 1], 30, [3, 4])
    strip = lambda rows: [{k: v for k, v in r.items()
                           if k != "mean_decision_seconds"} for r in rows]
    assert strip(a.rows) == strip(b.rows)


def test_evaluate_flags_invalid_episodes(grid3):
    policy = mixed_flawed_policy(grid3)
    scorer = lambda state, actions, task: np.full(len(actions), np.nan)
    rep = evaluate(grid3, policy, [0], 20, [0], scorer=scorer,
                   steering=SteeringConfig(num_candidates=3), label="broken")
    assert rep.flagged
    assert rep.pooled("broken")["invalid_count"] == 20


def test_evaluate_rejects_bad_args(grid3):
    policy = mixed_flawed_policy(grid3)
    with pytest.raises(ValueError):
        evaluate(grid3, policy, [0], 0, [0])
    with pytest.raises(ValueError):
        evaluate(grid3, policy, [0], 10, [])


def test_improvement_rows_paired(grid3):
    policy = mixed_flawed_policy(grid3)
    scorer = OracleScorer(grid3, [0])
    base = evaluate(grid3, policy, [0], 100, [0, 1], label="baseline")
    steer = evaluate(grid3, policy, [0], 100, [0, 1], scorer=scorer,
                     steering=SteeringConfig(num_candidates=8), label="steered")
    rows = improvement_rows(steer, base, [0])
    assert rows[0]["improvement_abs"] > 0.1
    assert rows[0]["ci_separated"]


# ------------------------------------------------------------------- sweep


def test_sweep_single_point_equals_evaluate(grid3):
    policy = mixed_flawed_policy(grid3)
    arm = {"label": "baseline", "policy": policy}
    swept = sweep([arm], grid3, [0], 30, [0])
    single = evaluate(grid3, policy, [0], 30, [0], label="baseline")
    strip = lambda rows: [{k: v for k, v in r.items()
                           if k != "mean_decision_seconds"} for r in rows]
    assert strip(swept.rows) == strip(single.rows)


def test_sweep_k_list_row_count_and_partial_failure(grid3):
    policy = mixed_flawed_policy(grid3)
    scorer = OracleScorer(grid3, [0])
    arms = [{"label": "baseline", "policy": policy}]
    for k in (2, 4):
        arms.append({"label": f"steered-k{k}", "policy": policy, "scorer": scorer,
                     "steering": SteeringConfig(num_candidates=k)})
    arms.append({"label": "broken", "policy": policy, "scorer": scorer,
                 "steering": SteeringConfig(num_candidates=-1)})
    rep = sweep(arms, grid3, [0], 20, [0])
    labels = [r["label"] for r in rep.rows]
    assert labels.count("baseline") == 1
    assert labels.count("steered-k2") == 1 and labels.count("steered-k4") == 1
    assert any(r.get("error") for r in rep.rows if r["label"] == "broken")
    assert rep.flagged


# ------------------------------------------------------------------ timing


def test_timing_profile_shape_and_overhead(grid3):
    policy = mixed_flawed_policy(grid3)
    scorer = OracleScorer(grid3, [0])
    frame = timing_profile(grid3, policy, scorer, 0, [1, 4, 16],
                           n_decisions=120, warmup=10)
    assert list(frame["num_candidates"]) == [1, 4, 16]
    assert (frame["median_seconds"] > 0).all()
    assert (frame["p95_seconds"] >= frame["median_seconds"]).all()
    with pytest.raises(ValueError):
        timing_profile(grid3, policy, scorer, 0, [1], n_decisions=50)


# ------------------------------------------------------------------ report


def test_report_empty_directory(tmp_path):
    merged = report(tmp_path, figures=False)
    assert len(merged) == 0
    assert (tmp_path / "report.csv").exists()
    assert (tmp_path / "report.txt").exists()


def test_report_merges_and_dedups(tmp_path, grid3):
    policy = mixed_flawed_policy(grid3)
    rep = evaluate(grid3, policy, [0], 20, [0], label="baseline",
                   experiment_tag="demo")
    rep.to_csv(tmp_path / "a.csv")
    rep.to_csv(tmp_path / "b.csv")   # identical run: must deduplicate
    merged = report(tmp_path, figures=False)
    assert len(merged) == 1
    assert merged.iloc[0]["n_episodes"] == 20


def test_report_rejects_schema_mismatch(tmp_path, grid3):
    policy = mixed_flawed_policy(grid3)
    rep = evaluate(grid3, policy, [0], 5, [0])
    frame = rep.to_frame()
    frame.insert(0, "schema", 999)
    frame.to_csv(tmp_path / "bad.csv", index=False)
    with pytest.raises(ValueError):
        report(tmp_path, figures=False)


def test_report_renders_figures(tmp_path, grid3):
    policy = mixed_flawed_policy(grid3)
    evaluate(grid3, policy, [0], 10, [0], label="baseline").to_csv(tmp_path / "a.csv")
    scorer = OracleScorer(grid3, [0])
    frame = timing_profile(grid3, policy, scorer, 0, [1, 4], n_decisions=100,
                           warmup=5)
    frame.to_csv(tmp_path / "run.timing.csv", index=False)
    report(tmp_path, figures=True)
    assert (tmp_path / "report.success.png").stat().st_size > 0
    assert (tmp_path / "report.timing.png").stat().st_size > 0


# ------------------------------------------------------------ config files


def test_parse_config_basics(tmp_path):
    (tmp_path / "base.cfg").write_text("episodes = 100\nk = 50  # comment\n")
    (tmp_path / "run.cfg").write_text(
        "include base.cfg\nbeta = 0.0\nepisodes = 200\n")
    values = parse_config(tmp_path / "run.cfg")
    assert values == {"episodes": "200", "k": "50", "beta": "0.0"}


def test_parse_config_rejects_cycles_and_garbage(tmp_path):
    (tmp_path / "a.cfg").write_text("include b.cfg\n")
    (tmp_path / "b.cfg").write_text("include a.cfg\n")
    with pytest.raises(ValueError):
        parse_config(tmp_path / "a.cfg")
    (tmp_path / "bad.cfg").write_text("no separator here\n")
    with pytest.raises(ValueError):
        parse_config(tmp_path / "bad.cfg")


# --------------------------------------------------------------------- CLI


def test_cli_end_to_end(tmp_path):
    data_path = tmp_path / "data.vsd"
    ckpt_prefix = tmp_path / "runs" / "calql"
    assert cli.main(["gen-data", "--env", "grid3", "--policy", "mixed",
                     "--n-trajectories", "60", "--seed", "0",
                     "--out", str(data_path)]) == 0
    assert cli.main(["train", "--dataset", str(data_path), "--algorithm", "calql",
                     "--steps", "200", "--hidden-dims", "16,16", "--no-actor",
                     "--no-figures", "--out", str(ckpt_prefix)]) == 0
    assert cli.main(["eval", "--env", "grid3", "--policy", "mixed",
                     "--checkpoint", str(ckpt_prefix), "--k", "5",
                     "--episodes", "10", "--seeds", "0",
                     "--out", str(tmp_path / "runs" / "eval.csv")]) == 0
    assert cli.main(["sweep", "--env", "grid3", "--policy", "mixed",
                     "--checkpoint", str(ckpt_prefix), "--k-list", "2,4",
                     "--episodes", "5", "--seeds", "0",
                     "--out", str(tmp_path / "runs" / "sweep.csv")]) == 0
    assert cli.main(["timing", "--env", "grid3", "--policy", "mixed",
                     "--checkpoint", str(ckpt_prefix), "--k-list", "1,4",
                     "--decisions", "100", "--no-figures",
                     "--out", str(tmp_path / "runs" / "timing.csv")]) == 0
    assert cli.main(["report", "--run-dir", str(tmp_path / "runs"),
                     "--no-figures"]) == 0
    assert (tmp_path / "runs" / "report.csv").exists()


def test_cli_config_file_defaults(tmp_path):
    data_path = tmp_path / "data.vsd"
    cfg = tmp_path / "gen.cfg"
    cfg.write_text("env = grid3\npolicy = expert\nn_trajectories = 20\n")
    assert cli.main(["--config", str(cfg), "gen-data",
                     "--out", str(data_path)]) == 0
    from vsteer.data import load_dataset
    ds = load_dataset(data_path)
    assert ds.manifest.n_trajectories == 20
