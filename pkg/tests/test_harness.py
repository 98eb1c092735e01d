import json

import numpy as np
import pytest

from cirslab import cli
from cirslab import env as E
from cirslab import harness as H


def small_cfg(tmp_path=None, **over):
    cfg = H.config_from_dict({
        "env": {"n_users": 6, "n_items": 20, "n_tags": 6, "max_round": 6, "log_records_per_user": 15},
        "user_model": {"epochs": 3},
        "ppo": {"rollouts": 4, "minibatch": 2, "hidden": 8, "update_epochs": 1},
        "tracker": {"d_state": 8, "d_ff": 8, "user_hidden": 4},
        "epochs": 2,
        "eval_trajectories": 5,
        "out": str(tmp_path / "run") if tmp_path else "unused",
    })
    return H.replace_cfg(cfg, **over)


class Fixed:
    """Test policy that recommends a fixed item sequence."""

    sequential = False

    def __init__(self, seq):
        self.seq = seq

    def start(self, users, rngs):
        return _FixedSession(self.seq, len(users))


class _FixedSession:
    def __init__(self, seq, b):
        self.seq, self.b, self.t = seq, b, 0

    def select(self):
        item = self.seq[min(self.t, len(self.seq) - 1)]
        self.t += 1
        return np.full(self.b, item)

    def observe(self, items, rewards):
        pass


def test_evaluate_repeating_policy_stops_at_bubble():
    ratings = np.array([[0.4, 1.0, 2.0], [0.9, 1.0, 2.0]])
    env = E.Environment(ratings, E.ItemCatalog.from_tags([[0], [1], [2]], 3), E.ExitConfig())
    m = H.evaluate(Fixed([0]), env, 20, seed=1)
    # first step earns interest, the repeat triggers the exit and earns nothing
    assert m.mean_len == 2.0
    for r in m.trajectories:
        assert r.exit_reason == "bubble" and r.cum_sat == ratings[r.user, 0]
    assert len(m.trajectories) == 20


def test_evaluate_distinct_tags_reaches_horizon():
    n = 12
    env = E.Environment(np.ones((3, n)), E.ItemCatalog.from_tags([[k] for k in range(n)], n),
                        E.ExitConfig(max_round=10))
    m = H.evaluate(Fixed(list(range(n))), env, 7, seed=0)
    assert m.mean_len == 10 and all(r.exit_reason == "horizon" for r in m.trajectories)
    with pytest.raises(ValueError):
        H.evaluate(Fixed([0]), env, 0, seed=0)


def test_evaluate_metric_identities():
    data = H.build_data(small_cfg())
    from cirslab.baselines import StaticPolicy
    pol = StaticPolicy(np.zeros((6, 20)), "random")
    m = H.evaluate(pol, data.env, 30, seed=3, epoch=2)
    cum = np.array([r.cum_sat for r in m.trajectories])
    lens = np.array([r.length for r in m.trajectories])
    assert m.mean_cum_sat == pytest.approx(cum.mean())
    assert m.mean_single_round == pytest.approx((cum / lens).mean())
    for r in m.trajectories:
        # replaying the recorded items reproduces the cumulative reward
        s = data.env.reset(r.user)
        for it in r.items:
            s, _ = data.env.step(s, it)
        assert s.cum_reward == r.cum_sat and s.t == r.length
    assert H.evaluate(pol, data.env, 30, seed=3, epoch=2).row() == m.row()


def test_config_errors(tmp_path):
    with pytest.raises(H.ConfigError, match="unknown keys"):
        H.config_from_dict({"bogus": 1})
    with pytest.raises(H.ConfigError, match="env"):
        H.config_from_dict({"env": {"colour": "red"}})
    with pytest.raises(H.ConfigError):
        H.config_from_dict({"epochs": "ten"})
    with pytest.raises(H.ConfigError):
        H.config_from_dict({"policy": "dqn"}).validate()
    with pytest.raises(H.ConfigError):
        H.config_from_dict({"eval_trajectories": 0}).validate()
    with pytest.raises(H.ConfigError, match="matrix_path"):
        H.config_from_dict({"env": {"kind": "files", "matrix_path": str(tmp_path / "no.csv")}}).validate()


def test_partial_sections_keep_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"ppo": {"lr_actor": 0.01}, "seed": 4}))
    cfg = H.load_config(p)
    assert cfg.ppo.lr_actor == 0.01 and cfg.ppo.gamma == H.ExperimentConfig().ppo.gamma and cfg.seed == 4
    assert H.config_from_dict(H.config_to_dict(cfg)) == cfg


def test_run_writes_artifacts_and_is_deterministic(tmp_path):
    cfg = small_cfg(tmp_path)
    pts = H.run_experiment(cfg)
    out = tmp_path / "run"
    rows = H.read_metrics(out / "metrics.csv")
    assert len(rows) == cfg.epochs == len(pts)
    assert (out / "metrics.csv").read_text().splitlines()[0] == ",".join(H.METRICS_HEADER)
    for name in ("config.json", "trajectories.csv", "user_model.npz", "user_model.json", "policy.npz", "policy.json"):
        assert (out / name).exists()
    assert json.loads((out / "config.json").read_text())["seed"] == cfg.seed
    first = (out / "metrics.csv").read_bytes()
    H.run_experiment(cfg)
    assert (out / "metrics.csv").read_bytes() == first


def test_ablation_label_zeroes_temperatures(tmp_path):
    cfg = small_cfg(tmp_path, policy="cirs-no-ci")
    H.run_experiment(cfg)
    side = json.loads((tmp_path / "run" / "user_model.json").read_text())
    assert side["tau"] == 0 and side["tau_star"] == 0
    assert H.user_model_config(small_cfg()).tau_star > 0


@pytest.mark.parametrize("policy", ["random", "eps-greedy", "ucb", "softmax-static"])
def test_baselines_run_without_planning(tmp_path, policy):
    cfg = small_cfg(tmp_path, policy=policy)
    pts = H.run_experiment(cfg)
    assert len(pts) == cfg.epochs
    assert (tmp_path / "run" / "user_model.npz").exists()
    assert not (tmp_path / "run" / "policy.npz").exists()


def test_train_then_evaluate_equals_final_metrics_row():
    cfg = small_cfg()
    data = H.build_data(cfg)
    last = H.run_experiment(cfg, data=data, write=False)[-1]
    trained = H.train_policy(cfg, data)
    again = H.evaluate(trained.policy, data.env, cfg.eval_trajectories, cfg.seed, cfg.epochs - 1)
    assert again.row() == last.row()


def test_failed_stage_writes_no_metrics(tmp_path):
    E.write_ratings(tmp_path / "logs.csv", [E.InteractionRecord(0, 0, 0.0, 1.0)])
    (tmp_path / "m.csv").write_text("user_id,item_id,timestamp,rating\n0,0,0,1\n0,1,0,2\n")
    (tmp_path / "c.csv").write_text("item_id,tags\n0,0\n1,1\n")
    cfg = small_cfg(tmp_path, env={"kind": "files", "matrix_path": str(tmp_path / "m.csv"),
                                   "catalog_path": str(tmp_path / "c.csv"),
                                   "logs_path": str(tmp_path / "logs.csv")})
    pts = H.run_experiment(cfg)
    assert len(pts) == 2
    (tmp_path / "run" / "metrics.csv").unlink()
    E.write_ratings(tmp_path / "logs.csv", [E.InteractionRecord(0, 5, 0.0, 1.0)])
    with pytest.raises(H.StageError) as info:
        H.run_experiment(cfg)
    assert info.value.stage == "pre-learn"
    assert not (tmp_path / "run" / "metrics.csv").exists()


def test_continuous_environment_runs(tmp_path):
    cfg = small_cfg(tmp_path, env={"kind": "synthetic-continuous"})
    assert len(H.run_experiment(cfg, write=False)) == 2
    gauss = H.replace_cfg(cfg, ppo={"continuous": True})
    assert len(H.run_experiment(gauss, write=False)) == 2


def test_sweep_cells(tmp_path):
    cfg = small_cfg(tmp_path)
    cells = H.sweep(cfg, [0.0], [0.0, 0.05])
    assert [(a, b) for a, b, _ in cells] == [(0.0, 0.0), (0.0, 0.05)]
    lines = (tmp_path / "run" / "sweep.csv").read_text().splitlines()
    assert lines[0] == ",".join(H.SWEEP_HEADER) and len(lines) == 3
    ablation = H.run_experiment(H.replace_cfg(cfg, policy="cirs-no-ci"), write=False)[-1]
    assert cells[0][2] == ablation.mean_cum_sat
    single = H.run_experiment(H.replace_cfg(cfg, user_model={"tau": 0.0, "tau_star": 0.05}), write=False)
    assert cells[1][2] == single[-1].mean_cum_sat
    with pytest.raises(H.ConfigError):
        H.sweep(cfg, [], [0.0])


def test_sweep_records_failed_cells(tmp_path, monkeypatch):
    cfg = small_cfg(tmp_path)
    real = H.run_experiment

    def flaky(cell, data=None, write=True):
        if cell.user_model.tau_star > 0:
            raise H.StageError("plan", RuntimeError("boom"))
        return real(cell, data=data, write=write)

    monkeypatch.setattr(H, "run_experiment", flaky)
    cells = H.sweep(cfg, [0.0], [0.0, 0.1], write=False)
    assert np.isfinite(cells[0][2]) and np.isnan(cells[1][2])


def test_cli_run_and_overrides(tmp_path, capsys):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps(H.config_to_dict(small_cfg())))
    out = tmp_path / "cli"
    rc = cli.main(["--config", str(conf), "--policy", "random", "--seed", "3", "--epochs", "1",
                   "--max-round", "4", "--out", str(out)])
    assert rc == 0
    saved = json.loads((out / "config.json").read_text())
    assert (saved["policy"], saved["seed"], saved["epochs"], saved["env"]["max_round"]) == ("random", 3, 1, 4)
    assert "cum_sat=" in capsys.readouterr().out
    assert cli.main(["--config", str(conf), "--epochs", "0"]) == 2
    with pytest.raises(SystemExit):
        cli.main(["--policy", "dqn"])


def test_cli_sweep(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps(H.config_to_dict(small_cfg())))
    rc = cli.main(["--config", str(conf), "--epochs", "1", "--out", str(tmp_path / "sw"),
                   "--sweep-tau", "0,1", "--sweep-tau-star", "0"])
    assert rc == 0
    assert len((tmp_path / "sw" / "sweep.csv").read_text().splitlines()) == 3
