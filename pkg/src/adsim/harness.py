"""Experiment harness: flat-file configuration, metrics, the 8-start
evaluation protocol, result export, and the forward/backward design ablation.

Config files are flat ``key = value`` lines with dotted sections; unknown keys
are rejected and parsing/serialization round-trips through a canonical form
(sorted keys). See docs/formats.md for the grammar and docs/protocols.md for
the start-position protocol.
"""

from __future__ import annotations

import csv
import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nets
from .adapt import (AdaptConfig, Policy, RolloutConfig, SquashConfig,
                    TrainConfig, adapt_step, box_init, buffer_init, pretrain,
                    rollout_and_grad, vision_pretrain_init)
from .dynamics import (EvalWorldConfig, EvalWorldState, QUAD_PRESETS,
                       QuadParams, eval_world_step)
from .orchestrator import OnlineConfig, OnlineLog, run_online
from .residual import (ResidualBuffer, ResidualConfig, ResidualDataset,
                       ResidualEnsemble, build_dataset, train_ensemble)
from .tasks import (DisturbanceSchedule, HoverTask, ReferenceTrajectory,
                    default_visual_config, reference_eval)

__all__ = [
    "ExperimentConfig", "ConfigError", "parse_config", "load_config",
    "serialize_config", "config_hash",
    "CrashedRunError", "MetricsRow", "metric_hover", "metric_tracking",
    "window_error", "start_positions",
    "run_experiment_suite", "emit_plot_data",
    "BenchRow", "run_bench",
    "build_policy", "save_policy_params", "load_policy_params",
]


class ConfigError(Exception):
    pass


def _p_float(s):
    return float(s)


def _p_int(s):
    return int(s)


def _p_bool(s):
    low = s.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _p_vec3(s):
    parts = [float(x) for x in s.split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected 3 components, got {len(parts)}")
    return tuple(parts)


def _p_ints(s):
    return tuple(int(x) for x in s.split(","))


def _p_str(s):
    return s.strip()


def _enum(*options):
    def parse(s):
        v = s.strip()
        if v not in options:
            raise ValueError(f"expected one of {options}, got {v!r}")
        return v
    return parse


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# key -> (parser, default)
_REGISTRY: dict[str, tuple] = {
    "task": (_enum("hover", "circle", "figure8"), "hover"),
    "observation": (_enum("state", "vision"), "state"),
    "seed": (_p_int, 0),
    "quad.preset": (_enum("small", "large"), "small"),
    "world.drag_coeff": (_p_float, 0.3),
    "world.substep_hz": (_p_float, 500.0),
    "dist.kind": (_enum("none", "constant", "reversing", "random-walk"), "none"),
    "dist.magnitude": (_p_vec3, (0.0, 0.0, 0.0)),
    "dist.switch_period_s": (_p_float, 15.0),
    "dist.walk_step": (_p_float, 0.05),
    "dist.bound": (_p_vec3, (1.0, 1.0, 1.0)),
    "hover.target": (_p_vec3, (0.0, 0.0, 1.0)),
    "circle.period_s": (_p_float, 3.0),
    "circle.radius": (_p_float, 1.0),
    "fig8.period_s": (_p_float, 5.0),
    "fig8.amp_x": (_p_float, 1.0),
    "fig8.amp_y": (_p_float, 0.5),
    "policy.hidden": (_p_ints, (512, 512)),
    "policy.checkpoint": (_p_str, ""),
    "pretrain.epochs": (_p_int, 300),
    "pretrain.envs": (_p_int, 100),
    "pretrain.lr": (_p_float, 5e-4),
    "vision.pretrain_epochs": (_p_int, 500),
    "vision.pretrain_envs": (_p_int, 300),
    "vision.init_samples": (_p_int, 10000),
    "vision.init_steps": (_p_int, 800),
    "residual.iters": (_p_int, 100),
    "residual.lr": (_p_float, 1e-3),
    "residual.beta": (_p_float, 1e-3),
    "residual.norm": (_enum("spectral", "frobenius"), "spectral"),
    "residual.hidden": (_p_ints, (128, 128)),
    "residual.members": (_p_int, 3),
    "buffer.capacity": (_p_int, 0),  # 0 = task default (100 hover / 250 tracking)
    "adapt.mode": (_enum("none", "full", "lora"), "none"),
    "adapt.epochs": (_p_int, 30),
    "adapt.envs": (_p_int, 10),
    "adapt.lr": (_p_float, 1e-3),
    "adapt.lora_rank": (_p_int, 8),
    "adapt.vision_epochs": (_p_int, 50),
    "adapt.vision_envs": (_p_int, 30),
    "adapt.residual_backward": (_p_bool, False),
    "online.duration_s": (_p_float, 40.0),
    "online.residual_period_s": (_p_float, 3.0),
    "online.adapt_period_s": (_p_float, 5.0),
    "online.clock": (_enum("virtual", "realtime"), "virtual"),
    "online.threads": (_p_int, 1),
    "suite.window_s": (_p_float, 5.0),
    "bench.rollouts": (_p_int, 10),
    "bench.epochs": (_p_int, 30),
    "bench.envs": (_p_int, 16),
    "bench.residual_iters": (_p_int, 200),
}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = {k: d for k, (_, d) in _REGISTRY.items()}
        merged.update(self.values)
        object.__setattr__(self, "values", merged)

    def __getitem__(self, key: str):
        try:
            return self.values[key]
        except KeyError:
            raise ConfigError(f"unknown config key {key!r}") from None

    def override(self, **pairs) -> "ExperimentConfig":
        vals = dict(self.values)
        for k, v in pairs.items():
            key = k.replace("__", ".")
            if key not in _REGISTRY:
                raise ConfigError(f"unknown config key {key!r}")
            vals[key] = v
        return ExperimentConfig(vals)

    # --- domain-object builders ---

    def task(self):
        kind = self["task"]
        if kind == "hover":
            return HoverTask(np.asarray(self["hover.target"]))
        if kind == "circle":
            return ReferenceTrajectory.circle(self["circle.period_s"], self["circle.radius"])
        return ReferenceTrajectory.figure8(self["fig8.period_s"],
                                           self["fig8.amp_x"], self["fig8.amp_y"])

    def quad_params(self) -> QuadParams:
        return QUAD_PRESETS[self["quad.preset"]]

    def world(self) -> EvalWorldConfig:
        return EvalWorldConfig(self["world.drag_coeff"], self["world.substep_hz"])

    def disturbance(self) -> DisturbanceSchedule:
        return DisturbanceSchedule(
            kind=self["dist.kind"], magnitude=np.asarray(self["dist.magnitude"]),
            switch_period=self["dist.switch_period_s"],
            walk_step=self["dist.walk_step"], bound=np.asarray(self["dist.bound"]))

    def residual(self) -> ResidualConfig:
        return ResidualConfig(hidden=self["residual.hidden"],
                              members=self["residual.members"],
                              lr=self["residual.lr"], beta=self["residual.beta"],
                              norm=self["residual.norm"])

    def adaptation(self) -> AdaptConfig | None:
        if self["adapt.mode"] == "none":
            return None
        return AdaptConfig(mode=self["adapt.mode"], epochs=self["adapt.epochs"],
                           n_envs=self["adapt.envs"], lr=self["adapt.lr"],
                           lora_rank=self["adapt.lora_rank"],
                           residual_backward=self["adapt.residual_backward"],
                           vision_epochs=self["adapt.vision_epochs"],
                           vision_envs=self["adapt.vision_envs"])

    def squash(self) -> SquashConfig:
        return SquashConfig.for_params(self.quad_params())

    def visual(self):
        return default_visual_config(np.asarray(self["hover.target"]))

    def online(self, policy: Policy, start: EvalWorldState | None = None,
               seed: int | None = None) -> OnlineConfig:
        return OnlineConfig(
            policy=policy, task=self.task(),
            duration_s=self["online.duration_s"],
            quad=self.quad_params(), world=self.world(),
            disturbance=self.disturbance(), start=start,
            residual_period_s=self["online.residual_period_s"],
            adapt_period_s=self["online.adapt_period_s"],
            residual_iters=self["residual.iters"],
            residual_cfg=self.residual(),
            buffer_capacity=self["buffer.capacity"] or None,
            adaptation=self.adaptation(),
            seed=self["seed"] if seed is None else seed,
            clock=self["online.clock"], threads=self["online.threads"])


def parse_config(text: str) -> ExperimentConfig:
    values = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in _REGISTRY:
            raise ConfigError(f"line {ln}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {ln}: duplicate key {key!r}")
        parser, _ = _REGISTRY[key]
        try:
            values[key] = parser(val.strip())
        except ValueError as e:
            raise ConfigError(f"line {ln}: bad value for {key}: {e}") from None
    return ExperimentConfig(values)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = [f"{k} = {_fmt(cfg.values[k])}" for k in sorted(_REGISTRY)]
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()[:12]


# --- policy checkpoint helpers ---------------------------------------------------

def build_policy(cfg: ExperimentConfig, params: nets.MlpParams) -> Policy:
    vision = cfg["observation"] == "vision"
    return Policy(params, cfg.squash(), None,
                  "vision" if vision else "state",
                  cfg.visual() if vision else None)


def save_policy_params(policy: Policy, path) -> None:
    Path(path).write_bytes(nets.serialize_params(policy.params))


def load_policy_params(path) -> nets.MlpParams:
    params = nets.deserialize_params(Path(path).read_bytes())
    if not isinstance(params, nets.MlpParams):
        raise ConfigError(f"{path}: not a policy checkpoint")
    return params


# --- metrics ---------------------------------------------------------------------

class CrashedRunError(Exception):
    pass


def window_error(log: OnlineLog, t0: float, t1: float, target) -> float:
    """Mean position-error norm over t in [t0, t1). `target` is a fixed point
    or a ReferenceTrajectory."""
    ts = log.times()
    sel = (ts >= t0) & (ts < t1)
    if not np.any(sel):
        raise ValueError(f"no log rows in window [{t0}, {t1})")
    pos = log.positions()[sel]
    if isinstance(target, ReferenceTrajectory):
        p_ref, _ = reference_eval(target, ts[sel])
    else:
        p_ref = np.asarray(target, dtype=np.float64)
    return float(np.linalg.norm(pos - p_ref, axis=1).mean())


def metric_hover(log: OnlineLog, p_des, window_s: float = 5.0,
                 min_duration_s: float = 30.0) -> float:
    """Steady-state hover error: mean position error over the final window."""
    if log.crashed:
        raise CrashedRunError("crashed run has no steady-state error")
    end = len(log) * log.dt
    if end < min_duration_s:
        raise ValueError(f"run too short for a steady-state metric: {end:.1f}s")
    return window_error(log, end - window_s, end + log.dt, p_des)


def metric_tracking(log: OnlineLog, ref: ReferenceTrajectory,
                    window: tuple[float, float] = (50.0, 60.0)) -> float:
    """Mean tracking error over the final window of a 60 s rollout."""
    if log.crashed:
        raise CrashedRunError("crashed run has no tracking error")
    if len(log) * log.dt < window[1]:
        raise ValueError("tracking metric needs the full 60 s rollout")
    return window_error(log, window[0], window[1] + log.dt, ref)


def start_positions(center) -> np.ndarray:
    """The fixed 8-start protocol: corners of a 0.5 m cube centered 0.5 m
    above the target (see docs/protocols.md)."""
    c = np.asarray(center, dtype=np.float64) + np.array([0.0, 0.0, 0.5])
    corners = []
    for sx in (-0.25, 0.25):
        for sy in (-0.25, 0.25):
            for sz in (-0.25, 0.25):
                corners.append(c + np.array([sx, sy, sz]))
    return np.stack(corners)


# --- suite runner -----------------------------------------------------------------

@dataclass
class MetricsRow:
    experiment: str
    start_index: int
    seed: int
    error: float | None
    crashed: bool
    adapt_rounds: int
    wall_s: float


def _run_one(name: str, cfg: ExperimentConfig, policy: Policy, start: np.ndarray,
             i: int) -> tuple[MetricsRow, OnlineLog]:
    t0 = time.perf_counter()
    ocfg = cfg.online(policy, start=EvalWorldState.at_rest(start))
    log = run_online(ocfg)
    wall = time.perf_counter() - t0
    rounds = sum(1 for e in log.events if e.kind == "adapt")
    task = cfg.task()
    try:
        if isinstance(task, ReferenceTrajectory):
            err = metric_tracking(log, task)
        else:
            err = metric_hover(log, task.p_des, cfg["suite.window_s"])
        row = MetricsRow(name, i, cfg["seed"], err, False, rounds, wall)
    except (CrashedRunError, ValueError):
        row = MetricsRow(name, i, cfg["seed"], None, log.crashed, rounds, wall)
    return row, log


def run_experiment_suite(experiments: list[tuple[str, ExperimentConfig]],
                         policies: dict[str, Policy], out_dir) -> list[MetricsRow]:
    """Run each experiment from the 8 protocol start positions.

    `policies` maps experiment names to loaded (read-only) policies. Writes
    rows.csv and summary.md under a per-experiment directory keyed by config
    hash and seed; returns all metric rows. Individual failures are recorded
    and the suite continues.
    """
    out_dir = Path(out_dir)
    rows: list[MetricsRow] = []
    summary_lines = ["| experiment | mean error (m) | std | crashes |",
                     "|---|---|---|---|"]
    for name, cfg in experiments:
        policy = policies[name]
        task = cfg.task()
        center = task.p_des if isinstance(task, HoverTask) else np.array([0.0, 0.0, 1.0])
        run_dir = out_dir / f"{name}-{config_hash(cfg)}-s{cfg['seed']}"
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.txt").write_text(serialize_config(cfg))
        exp_rows = []
        for i, start in enumerate(start_positions(center)):
            try:
                row, log = _run_one(name, cfg, policy, start, i)
                log.to_csv(run_dir / f"log_{i}.csv")
            except Exception as e:  # record and continue
                row = MetricsRow(name, i, cfg["seed"], None, True, 0, 0.0)
                (run_dir / f"error_{i}.txt").write_text(repr(e))
            exp_rows.append(row)
        rows.extend(exp_rows)
        errs = [r.error for r in exp_rows if r.error is not None]
        crashes = sum(1 for r in exp_rows if r.crashed)
        mean = float(np.mean(errs)) if errs else float("nan")
        std = float(np.std(errs)) if errs else float("nan")
        summary_lines.append(f"| {name} | {mean:.3f} | {std:.3f} | {crashes}/8 |")
        with open(run_dir / "rows.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["experiment", "start", "seed", "error", "crashed",
                        "adapt_rounds", "wall_s"])
            for r in exp_rows:
                w.writerow([r.experiment, r.start_index, r.seed,
                            "" if r.error is None else repr(r.error),
                            int(r.crashed), r.adapt_rounds, f"{r.wall_s:.2f}"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "summary.md").write_text("\n".join(summary_lines) + "\n")
    return rows


def emit_plot_data(log: OnlineLog, out_dir, target) -> None:
    """Time-series and adaptation-marker CSVs for external plotting."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ts = log.times()
    pos = log.positions()
    if isinstance(target, ReferenceTrajectory) and len(log):
        p_ref, _ = reference_eval(target, ts)
    elif len(log):
        p_ref = np.broadcast_to(np.asarray(target, float), pos.shape)
    with open(out_dir / "timeseries.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "err_norm", "px", "py", "pz", "dist_x", "dist_y", "dist_z"])
        for i in range(len(log)):
            err = float(np.linalg.norm(pos[i] - p_ref[i]))
            w.writerow([f"{ts[i]:.6f}", repr(err)] + [repr(x) for x in pos[i]]
                       + [repr(x) for x in log.disturbances[i]])
    with open(out_dir / "adaptation_marks.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "kind", "seq", "wall_ms"])
        for ev in log.events:
            if ev.kind == "adapt":
                w.writerow([f"{ev.tick * log.dt:.6f}", ev.kind, ev.published_seq,
                            f"{ev.wall_ms:.2f}"])


# --- design-ablation bench -----------------------------------------------------------

@dataclass(frozen=True)
class BenchRow:
    forward: str       # "lowfid" | "highfid"
    backward: str      # "analytic" | "through-residual"
    epoch_ms: float
    error_mean: float
    error_std: float


def _collect_bench_buffer(policy: Policy, cfg: ExperimentConfig, dist: np.ndarray,
                          n_rollouts: int, rng: np.random.Generator) -> ResidualBuffer:
    """Short eval-world rollouts of the base policy from random starts; the
    pooled samples are the residual training set for the ablation."""
    from .residual import BufferSample, buffer_push
    from .tasks import observe_state
    task = cfg.task()
    quad, world = cfg.quad_params(), cfg.world()
    buf = ResidualBuffer(capacity=n_rollouts * 150)
    t_abs = 0.0
    for _ in range(n_rollouts):
        start = np.asarray(task.p_des) + rng.uniform(-0.5, 0.5, size=3)
        w = EvalWorldState.at_rest(start)
        for k in range(150):
            qs = w.quad_state()
            a = policy_act_obs(policy, qs, task, k * 0.02)
            buf = buffer_push(buf, BufferSample(t_abs, qs, a, qs.v))
            t_abs += 0.02
            w, crashed = eval_world_step(w, a, 0.02, quad, dist, world)
            if crashed:
                break
        t_abs += 1.0  # gap between rollouts; pairs across the gap are harmless
    return buf


def policy_act_obs(policy: Policy, qs, task, t: float):
    """Observation + action for a structured state (state-based tasks)."""
    from .adapt import policy_act as _act
    from .tasks import observe_state, reference_offsets
    if isinstance(task, ReferenceTrajectory):
        return _act(policy, qs.as_flat() - reference_offsets(task, t))
    return _act(policy, observe_state(qs))


def _dataset_vs_highfid(ds: ResidualDataset, drag: float) -> ResidualDataset:
    """Re-express targets against the drag-aware analytic model:
    a_hat_high = a_hat_low - k_d v, so targets gain +k_d v."""
    v = ds.inputs[:, 12:15]
    return ResidualDataset(ds.inputs, ds.targets + drag * v)


def run_bench(policy: Policy, cfg: ExperimentConfig, out_dir=None) -> list[BenchRow]:
    """The forward-fidelity x backward-path ablation on the hover task.

    Collects eval-world rollouts under a +x 2 m/s^2 disturbance, fits a single
    residual network per forward model, adapts the base policy under each of
    the four configurations at equal epoch counts, and reports per-epoch time
    and final steady-state error (8-start protocol).
    """
    dist = np.array([2.0, 0.0, 0.0])
    cfg = cfg.override(dist__kind="constant", dist__magnitude=(2.0, 0.0, 0.0))
    task = cfg.task()
    if not isinstance(task, HoverTask):
        raise ConfigError("the bench protocol uses the hover task")
    rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 0xBE7C]))
    buf = _collect_bench_buffer(policy, cfg, dist, cfg["bench.rollouts"], rng)
    ds_low = build_dataset(buf)
    ds_high = _dataset_vs_highfid(ds_low, cfg["world.drag_coeff"])

    single = ResidualConfig(hidden=cfg["residual.hidden"], members=1,
                            lr=cfg["residual.lr"], beta=cfg["residual.beta"],
                            norm=cfg["residual.norm"])
    ens_low, _ = train_ensemble(ResidualEnsemble.init(cfg["seed"], single),
                                ds_low, cfg["bench.residual_iters"])
    ens_high, _ = train_ensemble(ResidualEnsemble.init(cfg["seed"], single),
                                 ds_high, cfg["bench.residual_iters"])

    rows = []
    for forward in ("lowfid", "highfid"):
        for backward in ("analytic", "through-residual"):
            ens = ens_low if forward == "lowfid" else ens_high
            rcfg = RolloutConfig(
                task=task, n_envs=cfg["bench.envs"], init_sampler=buffer_init(buf),
                residual_backward=backward == "through-residual",
                forward_model=forward, highfid_params=cfg.quad_params(),
                highfid_drag=cfg["world.drag_coeff"])
            adapted = policy
            arrays = nets.mlp_arrays(adapted.params)
            opt = nets.adam_init(arrays, lr=cfg["adapt.lr"])
            times = []
            rngs = np.random.SeedSequence([cfg["seed"], 0xBE7D]).spawn(cfg["bench.epochs"])
            from dataclasses import replace as _replace
            for e in range(cfg["bench.epochs"]):
                t0 = time.perf_counter()
                _, grads, _ = rollout_and_grad(adapted, ens, rcfg,
                                               np.random.default_rng(rngs[e]))
                arrays, opt = nets.adam_step(arrays, [-g for g in grads], opt)
                adapted = _replace(adapted,
                                   params=nets.mlp_from_arrays(adapted.params, arrays))
                times.append(time.perf_counter() - t0)
            errs = _bench_eval(adapted, cfg, dist)
            rows.append(BenchRow(forward, backward, float(np.mean(times)) * 1e3,
                                 float(np.mean(errs)), float(np.std(errs))))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "bench.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["forward", "backward", "epoch_ms", "error_mean", "error_std"])
            for r in rows:
                w.writerow([r.forward, r.backward, f"{r.epoch_ms:.1f}",
                            repr(r.error_mean), repr(r.error_std)])
        lines = ["| forward | backward | ms/epoch | steady error (m) |", "|---|---|---|---|"]
        lines += [f"| {r.forward} | {r.backward} | {r.epoch_ms:.0f} | "
                  f"{r.error_mean:.3f} +- {r.error_std:.3f} |" for r in rows]
        (out / "bench.md").write_text("\n".join(lines) + "\n")
    return rows


def _bench_eval(policy: Policy, cfg: ExperimentConfig, dist: np.ndarray,
                duration_s: float = 20.0) -> list[float]:
    """Closed-loop steady-state errors of a fixed policy from the 8 starts."""
    task = cfg.task()
    quad, world = cfg.quad_params(), cfg.world()
    errs = []
    for start in start_positions(task.p_des):
        w = EvalWorldState.at_rest(start)
        pos = []
        n = int(duration_s / 0.02)
        for k in range(n):
            a = policy_act_obs(policy, w.quad_state(), task, k * 0.02)
            w, crashed = eval_world_step(w, a, 0.02, quad, dist, world)
            pos.append(w.p)
            if crashed:
                break
        tail = np.stack(pos[-int(5.0 / 0.02):])
        errs.append(float(np.linalg.norm(tail - np.asarray(task.p_des), axis=1).mean()))
    return errs
