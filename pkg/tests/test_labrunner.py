import csv
import json
import math

import numpy as np
import pytest

from stagger_lab import labrunner as lr
from stagger_lab.labrunner import ConfigError, RunConfig, SweepSpec


def test_config_round_trip_and_strictness():
    cfg = RunConfig().replace(env={"horizon": 50}, seed=3)
    assert cfg.env.horizon == 50 and cfg.seed == 3
    assert lr.config_from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    for bad in (
        {"envv": {}},
        {"env": {"horizn": 50}},
        {"env": {"horizon": 52}},
        {"ppo": {"num_envs": 10, "num_minibatches": 4, "rollout_len": 1}},
        {"seed": -1},
        {"seed": "7"},
        {"env": []},
        {"schedule": {"mode": "sideways"}},
        {"schedule": {"mode": "naive", "num_groups": 3}},
        {"net": {"embedding_rows": 3}},
    ):
        with pytest.raises(ConfigError):
            lr.config_from_dict(bad)


def test_load_config_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        lr.load_config(p)
    with pytest.raises(ConfigError):
        lr.load_config(tmp_path / "missing.json")


def test_fmt():
    assert lr.fmt(None) == "" and lr.fmt(math.nan) == ""
    assert lr.fmt(3) == "3" and lr.fmt(True) == "1"
    assert float(lr.fmt(0.1 + 0.2)) == 0.1 + 0.2


def test_run_writes_echo_and_csvs(tiny_cfg, tmp_path):
    r = lr.run_experiment(tiny_cfg, tmp_path)
    assert all(math.isfinite(x) for x in (r.final_success, r.mean_forgetting, r.peak_value_mse))
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["config.json", "forgetting.csv", "metrics.csv", "occupancy.csv", "resets.csv"]
    echo = json.loads((tmp_path / "config.json").read_text())
    assert len(echo["resolved"]["target_actions"]) == echo["resolved"]["num_blocks"] == 4
    assert lr.config_from_dict({k: v for k, v in echo.items() if k != "resolved"}) == tiny_cfg
    rows = lr.read_csv(tmp_path / "metrics.csv")
    assert [int(x["update"]) for x in rows] == list(range(1, 7))
    occ = lr.read_csv(tmp_path / "occupancy.csv")
    for u in range(1, 7):
        assert sum(float(x["count"]) for x in occ if x["update"] == str(u)) == pytest.approx(16)


def test_staggered_resets_spread_evenly(tiny_cfg):
    # H=20, K=5: four groups of four, one group reaches the horizon every update
    r = lr.run_experiment(tiny_cfg)
    per_update = np.bincount([u for u, _, _ in r.resets], minlength=7)[1:]
    assert per_update.tolist() == [4] * 6
    assert {reason for _, _, reason in r.resets} == {"horizon"}


def test_naive_resets_all_at_once(tiny_cfg):
    r = lr.run_experiment(tiny_cfg.replace(schedule={"mode": "naive"}))
    per_update = np.bincount([u for u, _, _ in r.resets], minlength=7)[1:]
    assert per_update.tolist() == [0, 0, 0, 16, 0, 0]


def test_run_is_byte_deterministic(tiny_cfg, tmp_path):
    lr.run_experiment(tiny_cfg, tmp_path / "a")
    lr.run_experiment(tiny_cfg, tmp_path / "b")
    for name in ("metrics.csv", "occupancy.csv", "forgetting.csv", "resets.csv", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_sweep_grids():
    homo = SweepSpec("homogeneity", seeds=3)
    assert len(list(homo.points())) == 11 * 2 * 3
    assert [homo.x_value(x) for x in homo.grid] == pytest.approx([2.0 - 0.1 * i for i in range(11)])
    assert SweepSpec("horizon").grid == (50, 100, 200, 300, 400, 500)
    assert SweepSpec("granularity").grid == (1, 2, 5, 10, 20, 40)
    with pytest.raises(ConfigError):
        SweepSpec("colour")


def test_sweep_pairs_share_environment():
    spec = SweepSpec("gating", seeds=2)
    a = spec.run_config(0.3, "naive", 1)
    b = spec.run_config(0.3, "staggered", 1)
    assert a.env == b.env and a.seed == b.seed and a.net == b.net
    assert a.env.build(a.seed).target_actions == b.env.build(b.seed).target_actions
    # horizon sweeps size the embedding for the longest horizon so all points share one net shape
    h = SweepSpec("horizon")
    assert h.run_config(50, "naive", 0).net.embedding_rows == 100


def tiny_spec(tiny_cfg, **kw):
    base = tiny_cfg.replace(ppo={"total_updates": 3})
    return SweepSpec("granularity", grid=(1, 2), seeds=2, base=base, **kw)


def test_sweep_summary_and_report_round_trip(tiny_cfg, tmp_path):
    rows = lr.run_sweep(tiny_spec(tiny_cfg), tmp_path)
    assert len(rows) == 2 * 2 * 2
    # one staggered group is the naive schedule: identical summaries under shared seeds
    for seed in (0, 1):
        pick = lambda mode, x: next(r for r in rows if r["mode"] == mode and r["x_value"] == x and r["seed"] == seed)
        a, b = pick("naive", 1), pick("staggered", 1)
        assert [a[c] for c in lr.SUMMARY_COLUMNS[4:]] == [b[c] for c in lr.SUMMARY_COLUMNS[4:]]
    first = (tmp_path / "aggregate.csv").read_bytes()
    agg = lr.report(tmp_path)
    assert (tmp_path / "aggregate.csv").read_bytes() == first
    lr.report(tmp_path)
    assert (tmp_path / "aggregate.csv").read_bytes() == first
    # aggregate recomputed independently from the raw summary
    with open(tmp_path / "summary.csv") as f:
        raw = list(csv.DictReader(f))
    for kind, x, mode, n, metric, mean, std in agg:
        vals = [float(r[metric]) for r in raw if float(r["x_value"]) == x and r["mode"] == mode and r[metric]]
        assert n == len(vals)
        if vals:
            assert mean == pytest.approx(sum(vals) / len(vals))


def test_sweep_records_failures_and_continues(tiny_cfg, tmp_path, monkeypatch):
    real = lr.run_experiment

    def flaky(cfg, out=None, **kw):
        if cfg.seed == 1 and cfg.schedule.mode == "staggered":
            raise RuntimeError("boom")
        return real(cfg, out, **kw)

    monkeypatch.setattr(lr, "run_experiment", flaky)
    rows = lr.run_sweep(tiny_spec(tiny_cfg, modes=("staggered",)), tmp_path)
    assert len(rows) == 2
    failures = lr.read_csv(tmp_path / "failures.csv")
    assert len(failures) == 2 and all("boom" in f["error"] for f in failures)


def test_sweep_spec_from_dict():
    spec = lr.sweep_spec_from_dict({"sweep_kind": "horizon", "grid": [50], "seeds": 2, "base": {"seed": 0}})
    assert spec.grid == (50,) and spec.seeds == 2
    with pytest.raises(ConfigError):
        lr.sweep_spec_from_dict({"grid": [50]})
    with pytest.raises(ConfigError):
        lr.sweep_spec_from_dict({"sweep_kind": "horizon", "sedes": 2})
