"""Experiment configuration, execution and metric files.

A config is flat ``key = value`` text with dotted sections::

    name = clean_grid
    env.name = gridworld
    algo = npg
    seeds = 0, 1, 2
    schedule.iterations = 200
    schedule.episodes_per_iter = 500
    schedule.step_size = 4
    schedule.radius = 10.2
    attack.kind = reward_flip
    attack.delta = 100
    attack.epsilon = 0.1

A JSON file holding the same keys, flat or nested, is accepted too.  Runs
write ``records.csv`` and ``summary.json`` under ``output_dir/name``; both
are byte-identical for identical (config, seed).  Wall-clock timings live in
a separate ``timing.csv`` because they cannot be reproducible.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .contamination import ATTACK_KINDS, AttackConfig
from .fixtures import resolve
from .mdp import condition_number, optimal_value, policy_value
from .npg import NpgConfig, derive_fpg_schedule, derive_npg_schedule, npg_train
from .pcpg import pcpg_train

SCHEMA_VERSION = 1
OUTPUT_ENV = "ROBUSTPG_OUTPUT_DIR"
ALGOS = ("npg", "fpg", "fpg_det", "pcpg")
ALGO_SOLVER = {"npg": "ols", "fpg": "sever", "fpg_det": "deterministic_filter", "pcpg": "sever"}

RECORD_COLUMNS = (
    "schema_version",
    "algo",
    "env",
    "attack",
    "delta",
    "epsilon",
    "seed",
    "iteration",
    "exact_value",
    "optimality_gap",
    "mixture_value",
    "mixture_gap",
    "episodes_corrupted",
    "samples_filtered",
    "true_positives",
    "detection_precision",
    "detection_recall",
)
PCPG_COLUMNS = ("known_states", "cover_size")
SWEEP_COLUMNS = (
    "schema_version",
    "algo",
    "env",
    "delta",
    "n_seeds",
    "final_value_mean",
    "final_value_sd",
    "final_gap_mean",
    "detection_recall_mean",
    "detection_precision_mean",
)


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class ScheduleSpec:
    """Explicit NPG schedule, or derived from alpha when ``derive`` is set.

    Explicit fields given alongside ``derive`` override the derived values.
    """

    derive: bool = False
    alpha: float | None = None
    iterations: int | None = None
    episodes_per_iter: int | None = None
    step_size: float | None = None
    radius: float | None = None
    solver: str | None = None
    solver_params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PcpgSpec:
    epochs: int = 10
    beta: float = 1 / 1.001
    lam: float = 1.0
    cover_samples: int = 20000


@dataclass(frozen=True)
class ExperimentConfig:
    env: str
    algo: str = "npg"
    attack: AttackConfig = AttackConfig()
    schedule: ScheduleSpec = ScheduleSpec()
    scale_down: float = 1.0
    seeds: tuple = (0,)
    output_dir: str = "results"
    name: str = "run"
    pcpg: PcpgSpec = PcpgSpec()

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ConfigError("algo", f"must be one of {ALGOS}, got {self.algo!r}")
        if not self.seeds:
            raise ConfigError("seeds", "at least one seed is required")
        if not (0 < self.scale_down <= 1):
            raise ConfigError("schedule.scale_down", "must lie in (0, 1]")


@dataclass
class ExperimentRecord:
    seed: int
    iteration: int
    exact_value: float
    optimality_gap: float
    episodes_corrupted: int
    samples_filtered: int
    detection_precision: float
    detection_recall: float
    wall_time_ms: float
    mixture_value: float = float("nan")
    mixture_gap: float = float("nan")
    true_positives: int = 0
    algo: str = ""
    env: str = ""
    attack: str = "none"
    delta: float = 0.0
    epsilon: float = 0.0
    known_states: int | None = None
    cover_size: int | None = None


# ---------------------------------------------------------------------------
# config parsing

_INT_KEYS = {"schedule.iterations", "schedule.episodes_per_iter", "pcpg.epochs", "pcpg.cover_samples"}
_FLOAT_KEYS = {
    "schedule.alpha",
    "schedule.step_size",
    "schedule.radius",
    "schedule.scale_down",
    "scale_down",
    "attack.delta",
    "attack.epsilon",
    "attack.h_eff",
    "attack.confidence",
    "pcpg.beta",
    "pcpg.lambda",
}
_KNOWN = _INT_KEYS | _FLOAT_KEYS | {
    "name",
    "env",
    "env.name",
    "algo",
    "seeds",
    "output_dir",
    "schedule",
    "schedule.derive",
    "schedule.solver",
    "attack.kind",
    "attack.target_fraction_per_iter",
}


def parse_flat(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}", "empty key")
        if key in out:
            raise ConfigError(key, f"duplicate key on line {lineno}")
        out[key] = value
    return out


def _flatten(obj, prefix=""):
    flat = {}
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and not key.endswith("solver_params"):
            flat.update(_flatten(v, key + "."))
        else:
            flat[key] = v
    return flat


def load_config_mapping(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    if path.suffix == ".json" or text.lstrip().startswith("{"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON: {exc.msg} (line {exc.lineno})") from None
        if not isinstance(data, dict):
            raise ConfigError("config", "JSON config must be an object")
        return _flatten(data)
    return parse_flat(text)


def _as_float(key, v):
    try:
        x = float(v)
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected a number, got {v!r}") from None
    if not math.isfinite(x):
        raise ConfigError(key, "must be finite")
    return x


def _as_int(key, v):
    x = _as_float(key, v)
    if x != int(x):
        raise ConfigError(key, f"expected an integer, got {v!r}")
    return int(x)


def _as_bool(key, v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(key, f"expected a boolean, got {v!r}")


def _as_seeds(v):
    items = v if isinstance(v, (list, tuple)) else [p for p in str(v).replace(",", " ").split()]
    return tuple(_as_int("seeds", x) for x in items)


def config_from_mapping(m: dict) -> ExperimentConfig:
    """Build and validate an ExperimentConfig from flat dotted keys."""
    m = dict(m)
    solver_params = {}
    for key in list(m):
        if key.startswith("solver."):
            solver_params[key[len("solver."):]] = m.pop(key)
        elif key == "schedule.solver_params":
            sp = m.pop(key)
            if not isinstance(sp, dict):
                raise ConfigError(key, "must be an object")
            solver_params.update(sp)
    unknown = sorted(set(m) - _KNOWN)
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    for k, v in solver_params.items():
        if k != "sigma_prime" or v not in ("auto", "variance_bound"):
            solver_params[k] = _as_float(f"solver.{k}", v)
    env = m.get("env.name", m.get("env"))
    if env is None:
        raise ConfigError("env.name", "required")
    try:
        frac = m.get("attack.target_fraction_per_iter", "greedy")
        frac = frac if frac == "greedy" else _as_float("attack.target_fraction_per_iter", frac)
        kind = str(m.get("attack.kind", "none"))
        if kind not in ATTACK_KINDS:
            raise ConfigError("attack.kind", f"must be one of {ATTACK_KINDS}, got {kind!r}")
        attack = AttackConfig(
            kind,
            _as_float("attack.delta", m.get("attack.delta", 0.0)),
            _as_float("attack.epsilon", m.get("attack.epsilon", 0.0)),
            frac,
            _as_float("attack.h_eff", m["attack.h_eff"]) if "attack.h_eff" in m else None,
            _as_float("attack.confidence", m.get("attack.confidence", 0.01)),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError("attack", str(exc)) from None
    sched_mode = str(m.get("schedule", "explicit"))
    if sched_mode not in ("explicit", "derive"):
        raise ConfigError("schedule", "must be 'explicit' or 'derive'")
    derive = _as_bool("schedule.derive", m.get("schedule.derive", sched_mode == "derive"))
    opt = {}
    for key, conv in (
        ("alpha", _as_float),
        ("iterations", _as_int),
        ("episodes_per_iter", _as_int),
        ("step_size", _as_float),
        ("radius", _as_float),
    ):
        full = f"schedule.{key}"
        if full in m:
            opt[key] = conv(full, m[full])
    solver = m.get("schedule.solver")
    schedule = ScheduleSpec(derive=derive, solver=solver, solver_params=solver_params, **opt)
    if derive and schedule.alpha is None:
        raise ConfigError("schedule.alpha", "required when deriving the schedule")
    if not derive:
        for key in ("iterations", "episodes_per_iter", "step_size", "radius"):
            if getattr(schedule, key) is None:
                raise ConfigError(f"schedule.{key}", "required for an explicit schedule")
    algo = str(m.get("algo", "npg"))
    try:
        NpgConfig(
            schedule.iterations if schedule.iterations is not None else 1,
            schedule.episodes_per_iter if schedule.episodes_per_iter is not None else 1,
            schedule.step_size if schedule.step_size is not None else 1.0,
            schedule.radius if schedule.radius is not None else 1.0,
            solver or ALGO_SOLVER.get(algo, "ols"),
        )
    except ValueError as exc:
        raise ConfigError("schedule", str(exc)) from None
    pc = PcpgSpec(
        _as_int("pcpg.epochs", m.get("pcpg.epochs", PcpgSpec.epochs)),
        _as_float("pcpg.beta", m.get("pcpg.beta", PcpgSpec.beta)),
        _as_float("pcpg.lambda", m.get("pcpg.lambda", PcpgSpec.lam)),
        _as_int("pcpg.cover_samples", m.get("pcpg.cover_samples", PcpgSpec.cover_samples)),
    )
    scale = _as_float("schedule.scale_down", m.get("schedule.scale_down", m.get("scale_down", 1.0)))
    return ExperimentConfig(
        env=str(env),
        algo=algo,
        attack=attack,
        schedule=schedule,
        scale_down=scale,
        seeds=_as_seeds(m.get("seeds", "0")),
        output_dir=str(m.get("output_dir", "results")),
        name=str(m.get("name", "run")),
        pcpg=pc,
    )


def load_config(path) -> ExperimentConfig:
    return config_from_mapping(load_config_mapping(path))


def config_to_mapping(cfg: ExperimentConfig) -> dict:
    """Flat dotted mapping that round-trips through :func:`config_from_mapping`."""
    m = {
        "name": cfg.name,
        "env.name": cfg.env,
        "algo": cfg.algo,
        "seeds": list(cfg.seeds),
        "output_dir": cfg.output_dir,
        "schedule.derive": cfg.schedule.derive,
        "schedule.scale_down": cfg.scale_down,
        "attack.kind": cfg.attack.kind,
        "attack.delta": cfg.attack.delta,
        "attack.epsilon": cfg.attack.epsilon,
        "attack.target_fraction_per_iter": cfg.attack.target_fraction_per_iter,
        "attack.confidence": cfg.attack.confidence,
        "pcpg.epochs": cfg.pcpg.epochs,
        "pcpg.beta": cfg.pcpg.beta,
        "pcpg.lambda": cfg.pcpg.lam,
        "pcpg.cover_samples": cfg.pcpg.cover_samples,
    }
    if cfg.attack.h_eff is not None:
        m["attack.h_eff"] = cfg.attack.h_eff
    for key in ("alpha", "iterations", "episodes_per_iter", "step_size", "radius", "solver"):
        v = getattr(cfg.schedule, key)
        if v is not None:
            m[f"schedule.{key}"] = v
    for k, v in cfg.schedule.solver_params.items():
        m[f"solver.{k}"] = v
    return m


# ---------------------------------------------------------------------------
# execution


def resolve_schedule(cfg: ExperimentConfig, fixture) -> NpgConfig:
    """Concrete NpgConfig for the run, after derivation, overrides and scaling."""
    sch = cfg.schedule
    solver = sch.solver or ALGO_SOLVER[cfg.algo]
    if sch.derive:
        mdp, phi = fixture.mdp, fixture.phi
        W = sch.radius if sch.radius is not None else math.sqrt(phi.dim) / (1 - mdp.discount)
        kappa = condition_number(mdp, phi, fixture.nu)
        derive = derive_npg_schedule if solver in ("ols", "projected_ogd") else derive_fpg_schedule
        base = derive(sch.alpha, W, mdp.n_actions, mdp.discount, kappa, phi.dim, mdp.reward_noise_std)
        base = base.scaled(cfg.scale_down) if cfg.scale_down < 1 else base
        params = {**base.solver_params, **sch.solver_params}
        return replace(
            base,
            iterations=sch.iterations if sch.iterations is not None else base.iterations,
            episodes_per_iter=sch.episodes_per_iter if sch.episodes_per_iter is not None else base.episodes_per_iter,
            step_size=sch.step_size if sch.step_size is not None else base.step_size,
            solver=solver,
            solver_params=params,
        )
    base = NpgConfig(sch.iterations, sch.episodes_per_iter, sch.step_size, sch.radius, solver, dict(sch.solver_params))
    return base.scaled(cfg.scale_down) if cfg.scale_down < 1 else base


def _ratio(num, den):
    return num / den if den else 0.0


def _run_seed(cfg: ExperimentConfig, seed: int) -> list:
    fx = resolve(cfg.env)
    vstar = optimal_value(fx.mdp)
    inner = resolve_schedule(cfg, fx)
    common = dict(algo=cfg.algo, env=fx.name, attack=cfg.attack.kind, delta=cfg.attack.delta, epsilon=cfg.attack.epsilon)
    start = time.perf_counter()
    rows = []
    if cfg.algo == "pcpg":
        _, trace = pcpg_train(
            fx.mdp, fx.phi, fx.nu, cfg.pcpg.epochs, cfg.pcpg.beta, cfg.pcpg.lam, cfg.pcpg.cover_samples, inner, cfg.attack, seed
        )
        elapsed = (time.perf_counter() - start) * 1000
        for r in trace.records:
            rows.append(
                ExperimentRecord(
                    seed,
                    r.epoch,
                    r.value,
                    vstar - r.value,
                    r.corrupted,
                    r.filtered,
                    _ratio(r.true_positives, r.filtered),
                    _ratio(r.true_positives, r.corrupted),
                    elapsed,
                    r.mixture_value,
                    vstar - r.mixture_value,
                    r.true_positives,
                    known_states=r.known_states,
                    cover_size=r.epoch + 1,
                    **common,
                )
            )
        return rows
    _, trace = npg_train(fx.mdp, fx.phi, fx.nu, inner, cfg.attack, seed)
    elapsed = (time.perf_counter() - start) * 1000
    v0 = trace.initial_value
    rows.append(ExperimentRecord(seed, 0, v0, vstar - v0, 0, 0, 0.0, 0.0, elapsed, v0, vstar - v0, 0, **common))
    for r in trace.records:
        rows.append(
            ExperimentRecord(
                seed,
                r.iteration,
                r.value,
                vstar - r.value,
                r.corrupted,
                r.filtered,
                r.precision,
                r.recall,
                elapsed,
                r.mixture_value,
                vstar - r.mixture_value,
                r.true_positives,
                **common,
            )
        )
    return rows


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def records_csv(records, pcpg: bool | None = None) -> str:
    """Learning-curve CSV text; header only for an empty list."""
    if pcpg is None:
        pcpg = any(r.known_states is not None for r in records)
    cols = RECORD_COLUMNS + (PCPG_COLUMNS if pcpg else ())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in records:
        d = asdict(r)
        d["schema_version"] = SCHEMA_VERSION
        w.writerow([_fmt(d[c]) for c in cols])
    return buf.getvalue()


def summarize(records) -> dict:
    """Per-seed final metrics plus means; all derived from the records."""
    by_seed = {}
    for r in records:
        by_seed.setdefault(r.seed, []).append(r)
    seeds = {}
    for seed in sorted(by_seed):
        rs = by_seed[seed]
        last = rs[-1]
        corrupted = sum(r.episodes_corrupted for r in rs)
        filtered = sum(r.samples_filtered for r in rs)
        tp = sum(r.true_positives for r in rs)
        seeds[str(seed)] = {
            "final_value": float(last.exact_value),
            "final_gap": float(last.optimality_gap),
            "final_mixture_value": float(last.mixture_value),
            "final_mixture_gap": float(last.mixture_gap),
            "episodes_corrupted": int(corrupted),
            "samples_filtered": int(filtered),
            "detection_precision": _ratio(tp, filtered),
            "detection_recall": _ratio(tp, corrupted),
        }
    out = {"schema_version": SCHEMA_VERSION, "seeds": seeds}
    if seeds:
        keys = next(iter(seeds.values())).keys()
        out["mean"] = {k: float(np.mean([s[k] for s in seeds.values()])) for k in keys}
        if records:
            out["column_means"] = {
                c: float(np.mean([getattr(r, c) for r in records]))
                for c in ("exact_value", "optimality_gap", "mixture_value", "mixture_gap", "detection_precision", "detection_recall")
            }
    return out


def output_root(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or cfg.output_dir)


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def write_run(records, directory: Path, cfg: ExperimentConfig | None = None) -> dict:
    directory = Path(directory)
    _write(directory / "records.csv", records_csv(records, cfg.algo == "pcpg" if cfg else None))
    summary = summarize(records)
    if cfg is not None:
        summary["config"] = config_to_mapping(replace(cfg, output_dir=""))
    _write(directory / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    timing = io.StringIO()
    tw = csv.writer(timing, lineterminator="\n")
    tw.writerow(("seed", "wall_time_ms"))
    seen = set()
    for r in records:
        if r.seed not in seen:
            seen.add(r.seed)
            tw.writerow((r.seed, f"{r.wall_time_ms:.1f}"))
    _write(directory / "timing.csv", timing.getvalue())
    return summary


def run_experiment(cfg: ExperimentConfig, write: bool = True, workers: int = 1) -> list:
    """Run every seed; records are ordered by (seed, iteration)."""
    try:
        resolve(cfg.env)
    except KeyError as exc:
        raise ConfigError("env.name", str(exc.args[0])) from None
    except (OSError, ValueError) as exc:
        raise ConfigError("env.name", f"cannot load fixture {cfg.env!r}: {exc}") from None
    if workers > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_run_seed, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        parts = [_run_seed(cfg, s) for s in cfg.seeds]
    records = [r for part in parts for r in part]
    if write:
        write_run(records, output_root(cfg) / cfg.name, cfg)
    return records


def _sweep_cell(cfg: ExperimentConfig, delta: float) -> list:
    return run_experiment(replace(cfg, attack=replace(cfg.attack, delta=float(delta))), write=False)


def sweep_delta(cfg: ExperimentConfig, deltas, workers: int = 1, write: bool = True) -> list:
    """One run per (delta, seed); returns one summary row per delta."""
    deltas = [float(d) for d in deltas]
    if not deltas:
        raise ConfigError("deltas", "at least one delta is required")
    if cfg.attack.kind == "none":
        raise ConfigError("attack.kind", "a delta sweep needs an attack kind")
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            cells = list(pool.map(_sweep_cell, [cfg] * len(deltas), deltas))
    else:
        cells = [_sweep_cell(cfg, d) for d in deltas]
    rows = []
    for delta, records in zip(deltas, cells):
        s = summarize(records)
        per_seed = list(s["seeds"].values())
        finals = np.array([p["final_mixture_value"] for p in per_seed])
        rows.append(
            {
                "schema_version": SCHEMA_VERSION,
                "algo": cfg.algo,
                "env": cfg.env,
                "delta": delta,
                "n_seeds": len(per_seed),
                "final_value_mean": float(finals.mean()),
                "final_value_sd": float(finals.std(ddof=1)) if len(finals) > 1 else 0.0,
                "final_gap_mean": float(np.mean([p["final_mixture_gap"] for p in per_seed])),
                "detection_recall_mean": float(np.mean([p["detection_recall"] for p in per_seed])),
                "detection_precision_mean": float(np.mean([p["detection_precision"] for p in per_seed])),
            }
        )
    if write:
        root = output_root(cfg) / cfg.name
        for delta, records in zip(deltas, cells):
            write_run(records, root / f"delta={delta!r}", replace(cfg, attack=replace(cfg.attack, delta=delta)))
        emit_plot_data([r for c in cells for r in c], root, rows)
    return rows


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in SWEEP_COLUMNS])
    return buf.getvalue()


def emit_plot_data(records, directory, sweep_rows=None) -> list:
    """Write ``curves.csv`` (every record) and, for sweeps, ``sweep.csv`` and ``sweep.json``."""
    directory = Path(directory)
    paths = [directory / "curves.csv"]
    _write(paths[0], records_csv(records))
    if sweep_rows is not None:
        paths.append(directory / "sweep.csv")
        _write(paths[-1], sweep_csv(sweep_rows))
        paths.append(directory / "sweep.json")
        _write(paths[-1], json.dumps({"schema_version": SCHEMA_VERSION, "rows": sweep_rows}, indent=2, sort_keys=True) + "\n")
    return paths


def evaluate_theta(env: str, theta) -> dict:
    """Exact value and gap of the softmax-linear policy with parameters ``theta``."""
    from .mdp import SoftmaxLinearPolicy

    fx = resolve(env)
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.size != fx.phi.dim:
        raise ConfigError("theta", f"expected {fx.phi.dim} parameters for {fx.name}, got {theta.size}")
    v = policy_value(fx.mdp, SoftmaxLinearPolicy(theta), fx.phi)
    vstar = optimal_value(fx.mdp)
    return {"env": fx.name, "value": v, "optimal_value": vstar, "gap": vstar - v}

