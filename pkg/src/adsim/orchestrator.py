"""Online runtime: three logical loops exchanging immutable snapshots.

* deployment: steps the evaluation world at 50 Hz with the newest adopted
  policy and records samples into the rolling buffer,
* residual learning: every 3 s, trains the ensemble on a buffer snapshot,
* policy adaptation: every 5 s, re-optimizes the policy in the hybrid
  simulation and publishes new parameters.

All cross-loop traffic is serialized ChannelMessages (ParamBlob payloads with
a kind/sequence header); consumers verify the checksum on adoption, so a torn
snapshot can never be acted on. The virtual clock mode is fully deterministic:
control ticks advance simulated time in 0.02 s steps and due training rounds
run at their scheduled tick (single-threaded, or dispatched to workers with a
barrier at each round, which produces bit-identical logs). Realtime mode runs
the three loops as actual threads with wall-clock pacing.
"""

from __future__ import annotations

import csv
import queue
import struct
import threading
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import nets
from .adapt import AdaptConfig, Policy, adapt_step, policy_act
from .dynamics import (Action, EvalWorldConfig, EvalWorldState, QuadParams,
                       QUAD_PRESETS, eval_world_step)
from .residual import (BufferSample, ResidualBuffer, ResidualConfig,
                       ResidualEnsemble, TrainingDivergedError, build_dataset,
                       buffer_push, train_ensemble)
from .tasks import (DisturbanceSchedule, DisturbanceState, HoverTask,
                    ReferenceTrajectory, disturbance_at, observe_state,
                    observe_visual_states, reference_offsets, reward_hover,
                    reward_track)

__all__ = [
    "OnlineConfig", "OnlineLog", "ChannelMessage", "RoundEvent",
    "ScheduleReport", "run_online", "schedule_check",
    "MSG_POLICY", "MSG_ENSEMBLE", "MSG_BUFFER", "MSG_SHUTDOWN",
]

MSG_POLICY = 1
MSG_ENSEMBLE = 2
MSG_BUFFER = 3
MSG_SHUTDOWN = 4

_MSG_HEADER = "<BIQI"  # kind u8 | sequence u32 | issue tick u64 | payload len u32


@dataclass(frozen=True)
class ChannelMessage:
    """Snapshot frame: kind/sequence header + ParamBlob (or buffer dump) payload."""

    kind: int
    sequence: int
    tick: int
    payload: bytes = b""

    def encode(self) -> bytes:
        return struct.pack(_MSG_HEADER, self.kind, self.sequence, self.tick,
                           len(self.payload)) + self.payload

    @staticmethod
    def decode(raw: bytes) -> "ChannelMessage":
        head = struct.calcsize(_MSG_HEADER)
        kind, seq, tick, n = struct.unpack(_MSG_HEADER, raw[:head])
        payload = raw[head:head + n]
        if len(payload) != n:
            raise ValueError("truncated channel message")
        return ChannelMessage(kind, seq, tick, payload)


@dataclass(frozen=True)
class RoundEvent:
    kind: str          # "residual" | "adapt"
    index: int
    scheduled_s: float
    tick: int
    wall_ms: float
    published_seq: int
    note: str = ""


@dataclass
class OnlineLog:
    """One row per control tick, gap-free; deterministic content only.

    Wall-clock information lives in `events` / `tick_wall_s` which are
    excluded from equality and from the CSV persistence of the rows.
    """

    dt: float = 0.02
    ticks: list[int] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)       # flat 15
    actions: list[np.ndarray] = field(default_factory=list)      # 4
    rewards: list[float] = field(default_factory=list)
    policy_seqs: list[int] = field(default_factory=list)
    ensemble_seqs: list[int] = field(default_factory=list)
    disturbances: list[np.ndarray] = field(default_factory=list)  # 3
    crashed: bool = False
    warnings: list[str] = field(default_factory=list)
    events: list[RoundEvent] = field(default_factory=list)
    tick_wall_s: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.ticks)

    def append(self, tick, state15, action4, reward, pseq, eseq, dist):
        self.ticks.append(tick)
        self.states.append(np.asarray(state15, dtype=np.float64))
        self.actions.append(np.asarray(action4, dtype=np.float64))
        self.rewards.append(float(reward))
        self.policy_seqs.append(pseq)
        self.ensemble_seqs.append(eseq)
        self.disturbances.append(np.asarray(dist, dtype=np.float64))

    def times(self) -> np.ndarray:
        return np.asarray(self.ticks, dtype=np.float64) * self.dt

    def positions(self) -> np.ndarray:
        return np.stack([s[0:3] for s in self.states]) if self.states else np.zeros((0, 3))

    def same_rows(self, other: "OnlineLog") -> bool:
        """Bit-exact equality of the deterministic per-tick content."""
        return (self.ticks == other.ticks
                and self.rewards == other.rewards
                and self.policy_seqs == other.policy_seqs
                and self.ensemble_seqs == other.ensemble_seqs
                and self.crashed == other.crashed
                and all(np.array_equal(a, b) for a, b in zip(self.states, other.states))
                and all(np.array_equal(a, b) for a, b in zip(self.actions, other.actions))
                and all(np.array_equal(a, b) for a, b in zip(self.disturbances, other.disturbances)))

    _HEADER = (["tick"] + [f"s{i}" for i in range(15)]
               + ["c", "wx", "wy", "wz", "reward", "policy_seq", "ensemble_seq",
                  "dist_x", "dist_y", "dist_z", "crashed"])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self._HEADER)
            for i in range(len(self.ticks)):
                w.writerow([self.ticks[i]]
                           + [repr(x) for x in self.states[i]]
                           + [repr(x) for x in self.actions[i]]
                           + [repr(self.rewards[i]), self.policy_seqs[i],
                              self.ensemble_seqs[i]]
                           + [repr(x) for x in self.disturbances[i]]
                           + [int(self.crashed and i == len(self.ticks) - 1)])

    @staticmethod
    def from_csv(path, dt: float = 0.02) -> "OnlineLog":
        log = OnlineLog(dt=dt)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != OnlineLog._HEADER:
            raise ValueError(f"{path}: not an online log")
        for row in rows[1:]:
            vals = [float(x) for x in row]
            log.append(int(vals[0]), vals[1:16], vals[16:20], vals[20],
                       int(vals[21]), int(vals[22]), vals[23:26])
            if int(vals[26]):
                log.crashed = True
        return log


@dataclass(frozen=True)
class OnlineConfig:
    policy: Policy
    task: HoverTask | ReferenceTrajectory
    duration_s: float = 40.0
    dt: float = 0.02
    quad: QuadParams = QUAD_PRESETS["small"]
    world: EvalWorldConfig = EvalWorldConfig()
    disturbance: DisturbanceSchedule = DisturbanceSchedule()
    start: EvalWorldState | None = None
    residual_period_s: float = 3.0
    adapt_period_s: float = 5.0
    residual_iters: int = 100
    residual_cfg: ResidualConfig = ResidualConfig()
    buffer_capacity: int | None = None   # default: 100 hover, 250 tracking
    adaptation: AdaptConfig | None = None  # None disables both training loops
    train_residual: bool | None = None     # default: only when adapting
    seed: int = 0
    clock: str = "virtual"               # "virtual" | "realtime"
    threads: int = 1                     # virtual mode: 1 or N worker threads
    warn_stale_rounds: int = 3
    residual_delay_s: float = 0.0        # fault injection for schedule tests

    def resolved_capacity(self) -> int:
        if self.buffer_capacity is not None:
            return self.buffer_capacity
        return 250 if isinstance(self.task, ReferenceTrajectory) else 100

    def wants_residual(self) -> bool:
        if self.train_residual is not None:
            return self.train_residual
        return self.adaptation is not None


# --- shared loop state ---------------------------------------------------------

class _Shared:
    """Cross-loop state. In virtual mode everything runs on one logical
    timeline; in realtime mode the lock guards snapshot swaps."""

    def __init__(self, cfg: OnlineConfig):
        self.lock = threading.Lock()
        self.cfg = cfg
        self.buffer = ResidualBuffer(capacity=cfg.resolved_capacity())
        self.policy = cfg.policy
        self.policy_seq = 0
        self.ensemble: ResidualEnsemble | None = None
        self.ensemble_blob: bytes | None = None
        self.ensemble_seq = 0
        self.adapt_opt = None
        self.stop = threading.Event()
        self.log = OnlineLog(dt=cfg.dt)

    def adopt_policy(self, msg: ChannelMessage) -> None:
        payload = nets.deserialize_params(msg.payload)  # checksum verified here
        with self.lock:
            if msg.sequence <= self.policy_seq:
                return
            if isinstance(payload, nets.LoraAdapter):
                self.policy = replace(self.policy, adapter=payload)
            else:
                self.policy = replace(self.policy, params=payload)
            self.policy_seq = msg.sequence

    def adopt_ensemble(self, msg: ChannelMessage, ensemble: ResidualEnsemble) -> None:
        members = nets.deserialize_params(msg.payload)
        with self.lock:
            if msg.sequence <= self.ensemble_seq:
                return
            # Reuse optimizer/power-iteration state from the trainer's copy;
            # the wire payload carries the member parameters.
            self.ensemble = replace(ensemble, members=members)
            self.ensemble_blob = msg.payload
            self.ensemble_seq = msg.sequence


def _residual_round(shared: _Shared, buffer: ResidualBuffer,
                    ensemble: ResidualEnsemble, index: int, tick: int):
    """Train the ensemble on a buffer snapshot; returns (message, ensemble, note)."""
    cfg = shared.cfg
    if cfg.residual_delay_s > 0:
        time.sleep(cfg.residual_delay_s)
    if len(buffer) < 2:
        return None, ensemble, "buffer too short"
    ds = build_dataset(buffer)
    try:
        new_ens, losses = train_ensemble(ensemble, ds, cfg.residual_iters)
    except TrainingDivergedError as e:
        return None, ensemble, f"diverged: {e}"
    blob = nets.serialize_params(tuple(new_ens.members))
    msg = ChannelMessage(MSG_ENSEMBLE, index, tick, blob)
    return msg, new_ens, f"loss {losses[:, -1].mean():.3g}"


def _adapt_round(shared: _Shared, policy: Policy, ensemble: ResidualEnsemble | None,
                 buffer: ResidualBuffer, opt, index: int, tick: int):
    cfg = shared.cfg
    if ensemble is None or len(buffer) < 2:
        return None, opt, "no ensemble/buffer yet"
    try:
        new_policy, opt, _report = adapt_step(
            policy, ensemble, cfg.task, buffer, cfg.adaptation, opt,
            seed=cfg.seed, round_index=index)
    except Exception as e:  # diverged rollout: keep previous policy
        return None, opt, f"adapt failed: {e}"
    if cfg.adaptation.mode == "lora":
        blob = nets.serialize_params(new_policy.adapter)
    else:
        blob = nets.serialize_params(new_policy.params)
    return ChannelMessage(MSG_POLICY, index, tick, blob), opt, ""


# --- virtual-clock run ------------------------------------------------------------

def _round_due(t: float, period: float, dt: float) -> bool:
    # True when t lands on a k*period boundary (k >= 1) within half a tick.
    if period <= 0 or t < period - 0.25 * dt:
        return False
    k = round(t / period)
    return k >= 1 and abs(t - k * period) < 0.25 * dt


def _run_virtual(cfg: OnlineConfig) -> OnlineLog:
    shared = _Shared(cfg)
    n_ticks = int(round(cfg.duration_s / cfg.dt))
    world = cfg.start if cfg.start is not None else EvalWorldState.at_rest()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD157]))
    dstate = DisturbanceState(np.zeros(3), rng)
    trainer_ens = ResidualEnsemble.init(cfg.seed, cfg.residual_cfg)
    executor = None
    if cfg.threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        executor = ThreadPoolExecutor(max_workers=cfg.threads - 1)

    adapt_sched = adapt_done = 0
    state_hist: list = []
    action_hist: list = []
    vision = cfg.policy.observation == "vision"

    def run_round(fn, *args):
        # Barrier at each scheduled round: dispatching to a worker and joining
        # immediately keeps multi-threaded virtual runs bit-identical to
        # single-threaded ones while exercising real cross-thread handoff.
        if executor is not None:
            return executor.submit(fn, *args).result()
        return fn(*args)

    try:
        for tick in range(n_ticks):
            t = tick * cfg.dt
            qs = world.quad_state()
            if vision:
                state_hist.append(qs)
                obs = observe_visual_states(state_hist[-cfg.policy.visual_cfg.history_len:],
                                            action_hist, cfg.policy.visual_cfg)
            elif isinstance(cfg.task, ReferenceTrajectory):
                obs = qs.as_flat() - reference_offsets(cfg.task, t)
            else:
                obs = observe_state(qs)
            action = policy_act(shared.policy, obs)
            if vision:
                action_hist.append(action)
                del state_hist[:-5], action_hist[:-3]
            dist, dstate = disturbance_at(cfg.disturbance, t, dstate)
            if isinstance(cfg.task, HoverTask):
                r = reward_hover(qs, action, cfg.task)
            else:
                r = reward_track(qs, action, t, cfg.task)
            shared.log.append(tick, qs.as_flat(), action.as_array(), r,
                              shared.policy_seq, shared.ensemble_seq, dist)
            shared.log.tick_wall_s.append(time.perf_counter())
            world, crashed = eval_world_step(world, action, cfg.dt, cfg.quad,
                                             dist, cfg.world)
            buf_sample = BufferSample(t, qs, action, qs.v)
            shared.buffer = buffer_push(shared.buffer, buf_sample)
            if crashed:
                shared.log.crashed = True
                break

            t_next = (tick + 1) * cfg.dt
            if cfg.wants_residual() and _round_due(t_next, cfg.residual_period_s, cfg.dt):
                idx = round(t_next / cfg.residual_period_s)
                w0 = time.perf_counter()
                msg, trainer_ens, note = run_round(
                    _residual_round, shared, shared.buffer, trainer_ens, idx, tick + 1)
                if msg is not None:
                    shared.adopt_ensemble(msg, trainer_ens)
                shared.log.events.append(RoundEvent(
                    "residual", idx, idx * cfg.residual_period_s, tick + 1,
                    (time.perf_counter() - w0) * 1e3, shared.ensemble_seq, note))
            if cfg.adaptation is not None and _round_due(t_next, cfg.adapt_period_s, cfg.dt):
                idx = round(t_next / cfg.adapt_period_s)
                adapt_sched += 1
                w0 = time.perf_counter()
                msg, shared.adapt_opt, note = run_round(
                    _adapt_round, shared, shared.policy, shared.ensemble,
                    shared.buffer, shared.adapt_opt, idx, tick + 1)
                if msg is not None:
                    shared.adopt_policy(msg)
                    adapt_done = adapt_sched
                elif adapt_sched - adapt_done >= cfg.warn_stale_rounds:
                    shared.log.warnings.append(
                        f"stale policy: {adapt_sched - adapt_done} scheduled rounds "
                        f"without an update at t={t_next:.2f}")
                shared.log.events.append(RoundEvent(
                    "adapt", idx, idx * cfg.adapt_period_s, tick + 1,
                    (time.perf_counter() - w0) * 1e3, shared.policy_seq, note))
    finally:
        if executor is not None:
            executor.shutdown(wait=False)
    return shared.log


# --- realtime run ---------------------------------------------------------------

def _run_realtime(cfg: OnlineConfig) -> OnlineLog:
    shared = _Shared(cfg)
    n_ticks = int(round(cfg.duration_s / cfg.dt))
    world = cfg.start if cfg.start is not None else EvalWorldState.at_rest()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD157]))
    dstate = DisturbanceState(np.zeros(3), rng)
    policy_q: queue.Queue = queue.Queue()
    t_start = time.perf_counter()

    def residual_loop():
        ens = ResidualEnsemble.init(cfg.seed, cfg.residual_cfg)
        idx = 0
        while not shared.stop.is_set():
            idx += 1
            deadline = t_start + idx * cfg.residual_period_s
            if shared.stop.wait(max(0.0, deadline - time.perf_counter())):
                break
            with shared.lock:
                buf = shared.buffer
            tick = int((time.perf_counter() - t_start) / cfg.dt)
            w0 = time.perf_counter()
            msg, ens, note = _residual_round(shared, buf, ens, idx, tick)
            if msg is not None:
                shared.adopt_ensemble(ChannelMessage.decode(msg.encode()), ens)
            shared.log.events.append(RoundEvent(
                "residual", idx, idx * cfg.residual_period_s, tick,
                (time.perf_counter() - w0) * 1e3, shared.ensemble_seq, note))

    def adapt_loop():
        idx = 0
        opt = None
        while not shared.stop.is_set():
            idx += 1
            deadline = t_start + idx * cfg.adapt_period_s
            if shared.stop.wait(max(0.0, deadline - time.perf_counter())):
                break
            with shared.lock:
                policy, ens, buf = shared.policy, shared.ensemble, shared.buffer
            tick = int((time.perf_counter() - t_start) / cfg.dt)
            w0 = time.perf_counter()
            msg, opt, note = _adapt_round(shared, policy, ens, buf, opt, idx, tick)
            if msg is not None:
                policy_q.put(msg.encode())
            shared.log.events.append(RoundEvent(
                "adapt", idx, idx * cfg.adapt_period_s, tick,
                (time.perf_counter() - w0) * 1e3, idx, note))

    threads = []
    if cfg.wants_residual():
        threads.append(threading.Thread(target=residual_loop, daemon=True))
    if cfg.adaptation is not None:
        threads.append(threading.Thread(target=adapt_loop, daemon=True))
    for th in threads:
        th.start()

    state_hist: list = []
    action_hist: list = []
    vision = cfg.policy.observation == "vision"
    try:
        for tick in range(n_ticks):
            target = t_start + tick * cfg.dt
            lag = target - time.perf_counter()
            if lag > 0:
                time.sleep(lag)
            while True:  # adopt the newest published policy, if any
                try:
                    shared.adopt_policy(ChannelMessage.decode(policy_q.get_nowait()))
                except queue.Empty:
                    break
            t = tick * cfg.dt
            qs = world.quad_state()
            if vision:
                state_hist.append(qs)
                obs = observe_visual_states(state_hist[-cfg.policy.visual_cfg.history_len:],
                                            action_hist, cfg.policy.visual_cfg)
            elif isinstance(cfg.task, ReferenceTrajectory):
                obs = qs.as_flat() - reference_offsets(cfg.task, t)
            else:
                obs = observe_state(qs)
            with shared.lock:
                policy, pseq, eseq = shared.policy, shared.policy_seq, shared.ensemble_seq
            action = policy_act(policy, obs)
            if vision:
                action_hist.append(action)
                del state_hist[:-5], action_hist[:-3]
            dist, dstate = disturbance_at(cfg.disturbance, t, dstate)
            if isinstance(cfg.task, HoverTask):
                r = reward_hover(qs, action, cfg.task)
            else:
                r = reward_track(qs, action, t, cfg.task)
            shared.log.append(tick, qs.as_flat(), action.as_array(), r, pseq, eseq, dist)
            shared.log.tick_wall_s.append(time.perf_counter() - t_start)
            world, crashed = eval_world_step(world, action, cfg.dt, cfg.quad,
                                             dist, cfg.world)
            with shared.lock:
                shared.buffer = buffer_push(shared.buffer,
                                            BufferSample(t, qs, action, qs.v))
            if crashed:
                shared.log.crashed = True
                break
    finally:
        shared.stop.set()
        for th in threads:
            th.join(timeout=30.0)
    return shared.log


def run_online(cfg: OnlineConfig) -> OnlineLog:
    """Run the full online pipeline; returns the complete tick log.

    The deployment loop is never blocked by training in realtime mode and
    always proceeds with its last-adopted snapshots. Crashes terminate the run
    with the log marked crashed.
    """
    if cfg.clock == "virtual":
        return _run_virtual(cfg)
    if cfg.clock == "realtime":
        return _run_realtime(cfg)
    raise ValueError(f"unknown clock mode {cfg.clock!r}")


# --- schedule analysis -------------------------------------------------------------

@dataclass(frozen=True)
class ScheduleReport:
    control_rate_hz: float
    control_jitter_p99_ms: float
    residual_wall_ms: tuple[float, ...]
    adapt_wall_ms: tuple[float, ...]
    deadline_misses: int
    on_schedule: bool


def schedule_check(log: OnlineLog, residual_period_s: float = 3.0,
                   adapt_period_s: float = 5.0, dt: float = 0.02) -> ScheduleReport:
    """Timing report for a completed run.

    A round misses its deadline when it finishes after the next round of the
    same kind is already due. Virtual-clock runs land exactly on their
    scheduled ticks by construction.
    """
    res_ms, ad_ms, misses = [], [], 0
    on_sched = True
    for ev in log.events:
        period = residual_period_s if ev.kind == "residual" else adapt_period_s
        (res_ms if ev.kind == "residual" else ad_ms).append(ev.wall_ms)
        if ev.wall_ms * 1e-3 > period:
            misses += 1  # overran into the next scheduled round
        if abs(ev.tick * dt - ev.scheduled_s) > 0.5 * dt:
            on_sched = False
    if len(log.tick_wall_s) >= 2:
        w = np.asarray(log.tick_wall_s)
        gaps = np.diff(w)
        rate = 1.0 / gaps.mean() if gaps.mean() > 0 else float("inf")
        jitter = float(np.percentile(np.abs(gaps - dt), 99) * 1e3)
    else:
        rate, jitter = float("nan"), float("nan")
    return ScheduleReport(rate, jitter, tuple(res_ms), tuple(ad_ms), misses, on_sched)
