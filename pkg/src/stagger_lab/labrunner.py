"""Experiment plumbing: configs, single runs, sweeps, CSV output and aggregation."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from stagger_lab import metrics, net, ppo
from stagger_lab.chainworld import ChainEnv, EnvConfig
from stagger_lab.stagger import MODES, NAIVE, STAGGERED, apply_initial_stagger, build_schedule

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EnvSettings:
    horizon: int = 200
    block_length: int = 5
    num_actions: int = 20
    progression_prob: float = 0.5
    mastery_threshold: int = 3
    reset_lambda: float = 0.0
    reward_correct: float = 0.5
    reward_incorrect: float = -0.5

    def build(self, seed: int) -> EnvConfig:
        return EnvConfig.from_seed(seed, **dataclasses.asdict(self))


@dataclass(frozen=True)
class NetSettings:
    embed_dim: int = 64
    hidden: tuple[int, ...] = (256, 256, 256, 256)
    separate_critic: bool = True
    embedding_rows: int | None = None  # None: number of blocks of this run


@dataclass(frozen=True)
class ScheduleSettings:
    mode: str = STAGGERED
    num_groups: int | None = None


@dataclass(frozen=True)
class RunConfig:
    env: EnvSettings = field(default_factory=EnvSettings)
    ppo: ppo.PpoConfig = field(default_factory=ppo.PpoConfig)
    net: NetSettings = field(default_factory=NetSettings)
    schedule: ScheduleSettings = field(default_factory=ScheduleSettings)
    seed: int = 0
    accuracy_ema: float | None = None
    success_threshold: float = 0.75
    forgetting_source: str = metrics.POLICY

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **sections) -> "RunConfig":
        """Shallow-merge overrides, e.g. ``cfg.replace(env={"horizon": 50}, seed=3)``."""
        data = self.to_dict()
        for key, value in sections.items():
            if isinstance(value, dict):
                data[key] = {**data[key], **value}
            else:
                data[key] = value
        return config_from_dict(data)


_SECTIONS = {"env": EnvSettings, "ppo": ppo.PpoConfig, "net": NetSettings, "schedule": ScheduleSettings}


def _section(cls, data, name):
    if not isinstance(data, dict):
        raise ConfigError(f"'{name}' must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{name}': {', '.join(unknown)}")
    if "hidden" in data:
        data = {**data, "hidden": tuple(data["hidden"])}
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{name}' section: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {k: _section(cls, data[k], k) for k, cls in _SECTIONS.items() if k in data}
    for key in ("seed", "accuracy_ema", "success_threshold", "forgetting_source"):
        if key in data:
            kwargs[key] = data[key]
    if not isinstance(kwargs.get("seed", 0), int) or not 0 <= kwargs.get("seed", 0) < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    if kwargs.get("forgetting_source", metrics.POLICY) not in metrics.FORGETTING_SOURCES:
        raise ConfigError(f"forgetting_source must be one of {metrics.FORGETTING_SOURCES}")
    cfg = RunConfig(**kwargs)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    """Raise ConfigError for anything that would fail later in the run."""
    try:
        env_cfg = cfg.env.build(cfg.seed)
        build_schedule(
            cfg.ppo.num_envs, env_cfg.horizon, cfg.ppo.rollout_len,
            cfg.schedule.num_groups, cfg.schedule.mode,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rows = cfg.net.embedding_rows
    if rows is not None and rows < env_cfg.num_blocks:
        raise ConfigError(f"embedding_rows {rows} < number of blocks {env_cfg.num_blocks}")


def load_config(path) -> RunConfig:
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


@dataclass
class RunResult:
    final_success: float
    mean_forgetting: float
    peak_value_mse: float
    updates_to_threshold: int | None
    ledger: metrics.MetricsLedger = field(repr=False)
    resets: list[tuple[int, int, str]] = field(repr=False, default_factory=list)
    params: net.NetworkParams | None = field(repr=False, default=None)


def run_experiment(cfg: RunConfig, output_dir=None, *, on_update=None) -> RunResult:
    """Train one agent; writes the run's CSVs and config echo when ``output_dir`` is given."""
    validate(cfg)
    p = cfg.ppo
    env_cfg = cfg.env.build(cfg.seed)
    env = ChainEnv(env_cfg, cfg.seed)
    schedule = build_schedule(p.num_envs, env_cfg.horizon, p.rollout_len, cfg.schedule.num_groups, cfg.schedule.mode)
    states = apply_initial_stagger(env.initial_states(p.num_envs), schedule, env)

    rows = cfg.net.embedding_rows or env_cfg.num_blocks
    params = net.init_params(
        cfg.seed, rows, env_cfg.num_actions,
        embed_dim=cfg.net.embed_dim, hidden=cfg.net.hidden, separate_critic=cfg.net.separate_critic,
    )
    adam = ppo.AdamState.zeros_like(params)
    ledger = metrics.MetricsLedger(p.num_envs, env_cfg.num_blocks, cfg.accuracy_ema, cfg.forgetting_source)
    blocks = np.arange(env_cfg.num_blocks)
    resets: list[tuple[int, int, str]] = []

    for u in range(1, p.total_updates + 1):
        buf, states, reset_log = ppo.collect_rollout(env, states, params, schedule, p, cfg.seed, u)
        adv, ret = ppo.compute_gae(buf.rewards, buf.values, buf.dones, buf.bootstrap_values, p.gamma, p.gae_lambda)
        try:
            params, adam, stats = ppo.update(params, adam, buf, adv, ret, p, cfg.seed, u)
        except ppo.TrainingDiverged as exc:
            raise ppo.TrainingDiverged(f"update {u}: {exc}") from exc
        probe_logits, _ = net.forward(params, blocks)
        row = ledger.record(u, buf, stats, metrics.policy_block_accuracy(probe_logits, env_cfg.target_actions))
        resets.extend((u, env_id, reason) for env_id, reason in reset_log)
        if on_update is not None:
            on_update(row)

    window = math.ceil(env_cfg.horizon / p.rollout_len)
    final_success = ledger.final_success(window)
    result = RunResult(
        final_success=0.0 if math.isnan(final_success) else final_success,
        mean_forgetting=ledger.mean_forgetting(),
        peak_value_mse=float(np.max(ledger.column("value_mse"))),
        updates_to_threshold=ledger.updates_to_threshold(cfg.success_threshold),
        ledger=ledger,
        resets=resets,
        params=params,
    )
    if not all(map(math.isfinite, (result.final_success, result.mean_forgetting, result.peak_value_mse))):
        raise ppo.TrainingDiverged(f"non-finite run summary: {result}")
    if output_dir is not None:
        write_run(Path(output_dir), cfg, env_cfg, result)
    return result


# ---------------------------------------------------------------- CSV output


def fmt(x) -> str:
    """Locale-independent, round-trippable number formatting; None/NaN -> empty field."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "" if math.isnan(x) else repr(x)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) if not isinstance(v, str) else v for v in r])


def write_run(out: Path, cfg: RunConfig, env_cfg: EnvConfig, result: RunResult) -> None:
    out.mkdir(parents=True, exist_ok=True)
    echo = cfg.to_dict()
    echo["resolved"] = {
        "num_blocks": env_cfg.num_blocks,
        "target_actions": list(env_cfg.target_actions),
    }
    (out / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    ledger = result.ledger
    _write_csv(out / "metrics.csv", metrics.METRIC_COLUMNS,
               ([r[c] for c in metrics.METRIC_COLUMNS] for r in ledger.rows))
    updates = [r["update"] for r in ledger.rows]
    occ = ledger.occupancy_matrix
    _write_csv(out / "occupancy.csv", ("update", "block", "count"),
               ((u, b, occ[i, b]) for i, u in enumerate(updates) for b in range(ledger.num_blocks)))
    acc, forg = ledger.acc_matrix, ledger.forgetting_matrix
    _write_csv(out / "forgetting.csv", ("update", "block", "accuracy", "forgetting"),
               ((u, b, acc[i, b], forg[i, b]) for i, u in enumerate(updates) for b in range(ledger.num_blocks)))
    _write_csv(out / "resets.csv", ("update", "env_id", "reason"), result.resets)


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------- sweeps

SWEEP_KINDS = ("horizon", "homogeneity", "gating", "granularity")
SUMMARY_COLUMNS = (
    "sweep_kind", "x_value", "mode", "seed",
    "final_success", "mean_forgetting", "peak_value_mse", "updates_to_threshold",
)
AGGREGATE_COLUMNS = ("sweep_kind", "x_value", "mode", "n", "metric", "mean", "std")


def _tenths():
    return [round(0.1 * i, 1) for i in range(11)]


def default_grid(kind: str) -> list:
    return {
        "horizon": [50, 100, 200, 300, 400, 500],
        "homogeneity": _tenths(),
        "gating": _tenths(),
        "granularity": [1, 2, 5, 10, 20, 40],
    }[kind]


def sweep_base(kind: str) -> dict:
    """Fixed environment settings of each built-in sweep."""
    return {
        "horizon": {"block_length": 5, "progression_prob": 0.5, "mastery_threshold": 3, "reset_lambda": 0.0},
        "homogeneity": {"horizon": 50, "block_length": 5, "progression_prob": 1.0, "mastery_threshold": 3},
        "gating": {"horizon": 200, "block_length": 5, "mastery_threshold": 3, "reset_lambda": 0.0},
        "granularity": {"horizon": 200, "block_length": 5, "progression_prob": 0.5, "mastery_threshold": 3, "reset_lambda": 0.0},
    }[kind]


@dataclass(frozen=True)
class SweepSpec:
    kind: str
    grid: tuple = ()
    seeds: int = 5
    modes: tuple[str, ...] = MODES
    base: RunConfig = field(default_factory=RunConfig)
    first_seed: int = 0

    def __post_init__(self):
        if self.kind not in SWEEP_KINDS:
            raise ConfigError(f"sweep kind must be one of {SWEEP_KINDS}")
        if not self.grid:
            object.__setattr__(self, "grid", tuple(default_grid(self.kind)))
        if self.seeds < 1:
            raise ConfigError("seeds must be >= 1")
        if any(m not in MODES for m in self.modes):
            raise ConfigError(f"modes must be drawn from {MODES}")

    def x_value(self, x) -> float:
        # the homogeneity axis is plotted as 2 - lambda_R
        return round(2.0 - x, 10) if self.kind == "homogeneity" else x

    def run_config(self, x, mode: str, seed: int) -> RunConfig:
        env = dict(sweep_base(self.kind))
        sched = {"mode": mode, "num_groups": None}
        if self.kind == "horizon":
            env["horizon"] = int(x)
        elif self.kind == "homogeneity":
            env["reset_lambda"] = float(x)
        elif self.kind == "gating":
            env["progression_prob"] = float(x)
        elif mode == STAGGERED:
            sched["num_groups"] = int(x)
        rows = self.base.net.embedding_rows
        if rows is None:
            rows = self.max_blocks()
        return self.base.replace(env=env, schedule=sched, seed=seed, net={"embedding_rows": rows})

    def max_blocks(self) -> int:
        env = {**dataclasses.asdict(self.base.env), **sweep_base(self.kind)}
        horizons = self.grid if self.kind == "horizon" else [env["horizon"]]
        return max(int(h) // env["block_length"] for h in horizons)

    def points(self):
        for x in self.grid:
            for mode in self.modes:
                for i in range(self.seeds):
                    yield x, mode, self.first_seed + i


def sweep_spec_from_dict(data: dict) -> SweepSpec:
    known = {"sweep_kind", "grid", "seeds", "modes", "base", "first_seed"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown sweep key(s): {', '.join(unknown)}")
    if "sweep_kind" not in data:
        raise ConfigError("sweep config needs 'sweep_kind'")
    base = config_from_dict(data.get("base", {}))
    return SweepSpec(
        kind=data["sweep_kind"],
        grid=tuple(data.get("grid", ())),
        seeds=int(data.get("seeds", 5)),
        modes=tuple(data.get("modes", MODES)),
        base=base,
        first_seed=int(data.get("first_seed", 0)),
    )


def _run_point(args):
    cfg_dict, out_dir = args
    cfg = config_from_dict(cfg_dict)
    try:
        r = run_experiment(cfg, out_dir)
    except Exception as exc:  # a failed point is recorded, the sweep goes on
        return None, f"{type(exc).__name__}: {exc}"
    return (r.final_success, r.mean_forgetting, r.peak_value_mse, r.updates_to_threshold), None


def run_sweep(spec: SweepSpec, out_dir=None, workers: int = 1) -> list[dict]:
    """Run every (grid point, mode, seed); returns summary rows, also written to summary.csv."""
    out = Path(out_dir) if out_dir is not None else None
    points = list(spec.points())
    jobs, keys = {}, []
    for x, mode, seed in points:
        cfg = spec.run_config(x, mode, seed)
        key = json.dumps(cfg.to_dict(), sort_keys=True)
        keys.append(key)
        if key not in jobs:  # identical configs (e.g. naive across N_B) run once
            run_dir = None
            if out is not None:
                run_dir = out / "runs" / f"{spec.kind}_{x}_{mode}_s{seed}"
            jobs[key] = (cfg.to_dict(), run_dir)

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=_single_thread_blas) as pool:
            outcomes = dict(zip(jobs, pool.map(_run_point, jobs.values())))
    else:
        outcomes = {k: _run_point(v) for k, v in jobs.items()}

    rows, failures = [], []
    for (x, mode, seed), key in zip(points, keys):
        res, err = outcomes[key]
        if err is not None:
            log.error("sweep point %s x=%s mode=%s seed=%s failed: %s", spec.kind, x, mode, seed, err)
            failures.append((spec.kind, x, mode, seed, err))
            continue
        rows.append(dict(zip(SUMMARY_COLUMNS, (spec.kind, spec.x_value(x), mode, seed, *res))))
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_summary(out / "summary.csv", rows)
        if failures:
            _write_csv(out / "failures.csv", ("sweep_kind", "x_value", "mode", "seed", "error"),
                       [(k, fmt(x), m, s, e) for k, x, m, s, e in failures])
        write_aggregate(out / "aggregate.csv", aggregate_rows(rows))
    return rows


def _single_thread_blas():
    from threadpoolctl import threadpool_limits

    threadpool_limits(1)


def write_summary(path, rows) -> None:
    _write_csv(Path(path), SUMMARY_COLUMNS,
               ([r[c] if isinstance(r[c], str) else r[c] for c in SUMMARY_COLUMNS] for r in rows))


def read_summary(path) -> list[dict]:
    rows = []
    for r in read_csv(path):
        rows.append({
            "sweep_kind": r["sweep_kind"],
            "x_value": float(r["x_value"]),
            "mode": r["mode"],
            "seed": int(r["seed"]),
            "final_success": float(r["final_success"]),
            "mean_forgetting": float(r["mean_forgetting"]),
            "peak_value_mse": float(r["peak_value_mse"]),
            "updates_to_threshold": int(r["updates_to_threshold"]) if r["updates_to_threshold"] else None,
        })
    return rows


def aggregate_rows(rows) -> list[tuple]:
    """Mean and sample std per (sweep point, mode, metric). Std is empty with fewer than two seeds."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["sweep_kind"], float(r["x_value"]), r["mode"]), []).append(r)
    out = []
    for (kind, x, mode), members in sorted(groups.items()):
        for metric in SUMMARY_COLUMNS[4:]:
            vals = [m[metric] for m in members if m[metric] is not None]
            if not vals:
                out.append((kind, x, mode, 0, metric, None, None))
            elif len(vals) == 1:
                out.append((kind, x, mode, 1, metric, float(vals[0]), None))
            else:
                mean, std = metrics.aggregate(vals)
                out.append((kind, x, mode, len(vals), metric, mean, std))
    return out


def write_aggregate(path, agg) -> None:
    _write_csv(Path(path), AGGREGATE_COLUMNS, agg)


def report(sweep_dir) -> list[tuple]:
    """Re-aggregate a finished sweep from its summary.csv; rewrites aggregate.csv."""
    sweep_dir = Path(sweep_dir)
    agg = aggregate_rows(read_summary(sweep_dir / "summary.csv"))
    write_aggregate(sweep_dir / "aggregate.csv", agg)
    return agg


def set_threads(count: int):
    """Cap BLAS/OpenMP threads for the current process."""
    from threadpoolctl import threadpool_limits

    os.environ["OMP_NUM_THREADS"] = str(count)
    return threadpool_limits(count)
