"""Policy optimization by backpropagation through the differentiable rollout.

Pretraining runs on the pure analytic model; online adaptation re-optimizes
the policy inside the hybrid (analytic + residual) dynamics, either updating
all parameters or only a low-rank adapter over a frozen base. The backward
pass flows through the analytic terms only (surrogate gradient) unless the
through-residual ablation is enabled.

The gradient objective is the per-step, per-environment mean reward; reported
epoch rewards are the mean cumulative return over environments.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import nets
from . import tape as ad
from .dynamics import (OMEGA_MAX, Action, QuadParams, QuadState, QUAD_PRESETS,
                       step_highfid_flat, step_hybrid_flat)
from .geom import GRAVITY, random_tilt
from .tasks import (HoverTask, ReferenceTrajectory, U_HOVER,
                    VisualObservationConfig, normalize_action, observe_visual,
                    project_keypoints, reference_eval, reference_offsets,
                    reward_hover_flat, reward_track_flat)

__all__ = [
    "SquashConfig", "Policy", "RolloutConfig", "TrainConfig", "AdaptConfig",
    "TrainReport", "RolloutDivergedError",
    "policy_init", "policy_act", "policy_nodes", "apply_policy",
    "box_init", "buffer_init",
    "rollout_and_grad", "pretrain", "adapt_step",
    "vision_pretrain_init", "VisionInitConfig",
    "reports_equal",
]


class RolloutDivergedError(Exception):
    def __init__(self, step: int, what: str):
        self.step = step
        super().__init__(f"non-finite {what} at rollout step {step}")


@dataclass(frozen=True)
class SquashConfig:
    """Maps raw policy head outputs into the action limits.

    c = c_center + tanh(y0) * c_span, rates = tanh(y_i) * omega_max. Centering
    at hover thrust makes the zero network the hover policy.
    """

    c_center: float = GRAVITY
    c_span: float = GRAVITY
    omega_max: float = OMEGA_MAX

    @staticmethod
    def for_params(params: QuadParams) -> "SquashConfig":
        span = min(GRAVITY, params.c_max - GRAVITY)
        return SquashConfig(GRAVITY, span, OMEGA_MAX)


@dataclass(frozen=True)
class Policy:
    params: nets.MlpParams
    squash: SquashConfig = field(default_factory=SquashConfig)
    adapter: nets.LoraAdapter | None = None
    observation: str = "state"                      # "state" | "vision"
    visual_cfg: VisualObservationConfig | None = None

    @property
    def obs_dim(self) -> int:
        return self.params.input_dim


def policy_init(obs_dim: int, seed: int, hidden=(512, 512),
                squash: SquashConfig = SquashConfig(), observation: str = "state",
                visual_cfg: VisualObservationConfig | None = None) -> Policy:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x90110]))
    params = nets.mlp_init((obs_dim,) + tuple(hidden) + (4,), rng,
                           hidden_gain=1.0, output_gain=0.01)
    return Policy(params, squash, None, observation, visual_cfg)


def _squash_fwd(aux, y):
    center, span, omax = aux
    t = np.tanh(y)
    out = np.empty_like(t)
    out[..., 0] = center + span * t[..., 0]
    out[..., 1:4] = omax * t[..., 1:4]
    return out


def _squash_bwd(aux, out, pv, g, needs):
    center, span, omax = aux
    t0 = (out[..., 0] - center) / span
    ti = out[..., 1:4] / omax
    gy = np.empty_like(out)
    gy[..., 0] = g[..., 0] * span * (1.0 - t0 * t0)
    gy[..., 1:4] = g[..., 1:4] * omax * (1.0 - ti * ti)
    return (gy,)


ad.register_primitive("squash_action", _squash_fwd, _squash_bwd)


def _squash(y, squash: SquashConfig):
    return ad.apply_primitive(
        "squash_action", (y,),
        aux=(squash.c_center, squash.c_span, squash.omega_max))


def policy_act(policy: Policy, obs: np.ndarray) -> Action:
    """Deployment-path action; squashed into the actuation limits."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[-1] != policy.obs_dim:
        raise nets.ShapeMismatchError(
            f"observation dim {obs.shape[-1]} != policy input {policy.obs_dim}")
    if policy.adapter is not None:
        y = nets.lora_forward(policy.params, policy.adapter, obs)
    else:
        y = nets.mlp_forward(policy.params, obs)
    u = np.asarray(_squash(y, policy.squash))
    return Action.from_array(u)


# --- taped policy -------------------------------------------------------------

class _PolicyNodes:
    def __init__(self, wnodes, bnodes, trainable, names, squash, activation):
        self.wnodes = wnodes
        self.bnodes = bnodes
        self.trainable = trainable   # leaf nodes, in a fixed order
        self.names = names
        self.squash = squash
        self.activation = activation


def policy_nodes(tp: ad.Tape, policy: Policy, mode: str) -> _PolicyNodes:
    """Record policy parameters on a tape.

    mode "full": dense weights are leaves (an existing adapter stays applied
    but frozen). mode "lora": dense weights frozen, adapter matrices are
    leaves. mode "frozen": everything constant.
    """
    if mode not in ("full", "lora", "frozen"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "lora" and policy.adapter is None:
        raise ValueError("lora mode needs a policy with an adapter")
    base_mk = tp.leaf if mode == "full" else tp.constant
    wnodes = [base_mk(W) for W in policy.params.weights]
    bnodes = [base_mk(b) for b in policy.params.biases]
    trainable, names = [], []
    if mode == "full":
        for i in range(len(wnodes)):
            trainable += [wnodes[i], bnodes[i]]
            names += [f"layer{i}.W", f"layer{i}.b"]
    if policy.adapter is not None:
        ad_mk = tp.leaf if mode == "lora" else tp.constant
        for k, (i, A, B) in enumerate(zip(policy.adapter.layer_indices,
                                          policy.adapter.down, policy.adapter.up)):
            An, Bn = ad_mk(A), ad_mk(B)
            wnodes[i] = wnodes[i] + ad.matmul(Bn, An)
            if mode == "lora":
                trainable += [An, Bn]
                names += [f"adapter{i}.down", f"adapter{i}.up"]
    return _PolicyNodes(wnodes, bnodes, trainable, names,
                        policy.squash, policy.params.hidden_activation)


def apply_policy(nodes: _PolicyNodes, obs):
    y = nets.mlp_apply(nodes.wnodes, nodes.bnodes, obs, nodes.activation)
    return _squash(y, nodes.squash)


# --- rollout configuration -------------------------------------------------------

@dataclass(frozen=True)
class RolloutConfig:
    """One differentiable-rollout setup: horizon 150 steps at 50 Hz by default
    (a 3-second epoch)."""

    task: HoverTask | ReferenceTrajectory
    n_envs: int
    init_sampler: Callable  # (n, rng) -> (X0 [n,15], t0 [n])
    horizon: int = 150
    dt: float = 0.02
    observation: str = "state"          # "state" | "vision"
    visual_cfg: VisualObservationConfig | None = None
    residual_backward: bool = False
    forward_model: str = "lowfid"       # "lowfid" | "highfid" (design ablation)
    highfid_params: QuadParams = QUAD_PRESETS["small"]
    highfid_drag: float = 0.3
    highfid_substeps: int = 5

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.observation == "vision" and self.visual_cfg is None:
            raise ValueError("vision rollouts need a visual_cfg")
        if self.observation == "vision" and isinstance(self.task, ReferenceTrajectory):
            raise ValueError("vision policies support the hover task only")


def box_init(task, pos_half: float = 0.5, vel_half: float = 0.5,
             max_tilt: float = np.deg2rad(15.0)):
    """Pretraining starts: positions in a box around the task nominal,
    velocities around the nominal velocity, small random tilts. For tracking
    tasks the nominal is the reference point at a random phase."""
    def sample(n, rng):
        X = np.empty((n, 15))
        if isinstance(task, ReferenceTrajectory):
            t0 = rng.uniform(0.0, task.period, size=n)
            p_ref, v_ref = reference_eval(task, t0)
        else:
            t0 = np.zeros(n)
            p_ref = np.broadcast_to(task.p_des, (n, 3))
            v_ref = np.zeros((n, 3))
        X[:, 0:3] = p_ref + rng.uniform(-pos_half, pos_half, size=(n, 3))
        X[:, 12:15] = v_ref + rng.uniform(-vel_half, vel_half, size=(n, 3))
        for i in range(n):
            X[i, 3:12] = random_tilt(rng, max_tilt).ravel()
        return X, t0
    return sample


def buffer_init(buffer):
    """Adaptation starts: uniform draws from the recorded buffer states; the
    sample timestamp carries the reference phase for tracking tasks."""
    samples = buffer.samples
    if not samples:
        raise ValueError("cannot sample initial states from an empty buffer")

    def sample(n, rng):
        idx = rng.integers(0, len(samples), size=n)
        X = np.stack([samples[i].state.as_flat() for i in idx])
        t0 = np.array([samples[i].t for i in idx])
        return X, t0
    return sample


# --- the rollout ----------------------------------------------------------------

def _reward_node(cfg: RolloutConfig, x, u, t_k):
    if isinstance(cfg.task, HoverTask):
        return reward_hover_flat(x, u, cfg.task.p_des)
    p_ref, v_ref = reference_eval(cfg.task, t_k)
    return reward_track_flat(x, u, p_ref, v_ref)


def _extend_highfid(X0: np.ndarray) -> np.ndarray:
    n = X0.shape[0]
    omega = np.zeros((n, 3))
    c_act = np.full((n, 1), GRAVITY)
    return np.concatenate([X0, omega, c_act], axis=1)


def rollout_and_grad(policy: Policy, ensemble, cfg: RolloutConfig,
                     rng: np.random.Generator, mode: str = "full"):
    """Simulate cfg.n_envs trajectories for cfg.horizon steps and reverse-sweep.

    Returns (mean cumulative reward, gradient arrays aligned with the mode's
    trainable parameters, gradient norm). Full-horizon BPTT, no truncation;
    the backward pass sees only the analytic dynamics unless
    cfg.residual_backward is set.
    """
    X0, T0 = cfg.init_sampler(cfg.n_envs, rng)
    tp = ad.Tape()
    nodes = policy_nodes(tp, policy, mode)
    highfid = cfg.forward_model == "highfid"
    x = tp.constant(_extend_highfid(X0) if highfid else X0)

    vision = cfg.observation == "vision"
    vis_proj: list = []  # cached per-state projection blocks, oldest first
    vis_act: list = []   # cached normalized action blocks, newest last
    total = None
    for k in range(cfg.horizon):
        t_k = T0 + k * cfg.dt
        core = x[..., 0:15] if highfid else x
        if vision:
            vcfg = cfg.visual_cfg
            if not vis_proj:
                vis_proj = [project_keypoints(core, vcfg)] * vcfg.history_len
                u_pad = normalize_action(np.broadcast_to(U_HOVER, (cfg.n_envs, 4)))
                vis_act = [u_pad] * vcfg.action_history_len
            obs = ad.concat(vis_proj + vis_act, axis=-1)
        elif isinstance(cfg.task, ReferenceTrajectory):
            obs = core - reference_offsets(cfg.task, t_k)
        else:
            obs = core
        u = apply_policy(nodes, obs)
        r = _reward_node(cfg, core, u, t_k)
        if not np.all(np.isfinite(ad.value_of(r))):
            raise RolloutDivergedError(k, "reward")
        total = r if total is None else total + r
        try:
            if highfid:
                x = step_highfid_flat(x, u, cfg.dt, cfg.highfid_params,
                                      cfg.highfid_drag, cfg.highfid_substeps,
                                      ensemble=ensemble,
                                      residual_backward=cfg.residual_backward)
            else:
                x = step_hybrid_flat(x, u, cfg.dt, ensemble,
                                     cfg.residual_backward)
        except ad.NonFiniteValueError as e:
            raise RolloutDivergedError(k, "state") from e
        if vision:
            core_next = x[..., 0:15] if highfid else x
            vis_proj = vis_proj[1:] + [project_keypoints(core_next, cfg.visual_cfg)]
            vis_act = vis_act[1:] + [normalize_action(u)]

    mean_cum = float(ad.value_of(total).mean())
    objective = ad.reduce_mean(total) * (1.0 / cfg.horizon)
    grads = tp.backward(objective)
    garrs = [grads[leaf] for leaf in nodes.trainable]
    for g, name in zip(garrs, nodes.names):
        if not np.all(np.isfinite(g)):
            raise RolloutDivergedError(cfg.horizon, f"gradient ({name})")
    gnorm = float(np.sqrt(sum(float((g * g).sum()) for g in garrs))) if garrs else 0.0
    return mean_cum, garrs, gnorm


# --- training loops ---------------------------------------------------------------

@dataclass
class TrainReport:
    rewards: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)

    def append(self, reward: float, gnorm: float, ms: float):
        self.rewards.append(reward)
        self.grad_norms.append(gnorm)
        self.wall_ms.append(ms)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "reward", "grad_norm", "wall_ms"])
            for i, (r, g, m) in enumerate(zip(self.rewards, self.grad_norms, self.wall_ms)):
                w.writerow([i, repr(r), repr(g), f"{m:.3f}"])


def reports_equal(a: TrainReport, b: TrainReport) -> bool:
    """Bit-exact equality of the deterministic fields (wall times excluded)."""
    return a.rewards == b.rewards and a.grad_norms == b.grad_norms


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    lr: float = 5e-4
    seed: int = 0


def _epoch_rngs(seed: int, tag: int, epochs: int):
    ss = np.random.SeedSequence([seed, tag])
    return [np.random.default_rng(s) for s in ss.spawn(epochs)]


def _trainable_arrays(policy: Policy, mode: str):
    if mode == "full":
        return nets.mlp_arrays(policy.params)
    arrs = []
    for A, B in zip(policy.adapter.down, policy.adapter.up):
        arrs += [A, B]
    return arrs


def _rebuild_policy(policy: Policy, mode: str, arrays) -> Policy:
    if mode == "full":
        return replace(policy, params=nets.mlp_from_arrays(policy.params, arrays))
    n = len(policy.adapter.down)
    down = tuple(arrays[2 * i] for i in range(n))
    up = tuple(arrays[2 * i + 1] for i in range(n))
    return replace(policy, adapter=replace(policy.adapter, down=down, up=up))


def _ascend(policy: Policy, ensemble, cfg: RolloutConfig, mode: str,
            epochs: int, rngs, opt: nets.AdamState, report: TrainReport):
    arrays = _trainable_arrays(policy, mode)
    for e in range(epochs):
        t0 = time.perf_counter()
        try:
            reward, grads, gnorm = rollout_and_grad(policy, ensemble, cfg, rngs[e], mode)
        except RolloutDivergedError as err:
            err.report = report  # progress up to the abort, for diagnostics
            raise
        arrays, opt = nets.adam_step(arrays, [-g for g in grads], opt)
        policy = _rebuild_policy(policy, mode, arrays)
        report.append(reward, gnorm, (time.perf_counter() - t0) * 1e3)
    return policy, opt


def pretrain(task, train: TrainConfig = TrainConfig(), n_envs: int = 100,
             horizon: int = 150, observation: str = "state",
             visual_cfg: VisualObservationConfig | None = None,
             squash: SquashConfig = SquashConfig(),
             initial_policy: Policy | None = None,
             hidden=(512, 512)):
    """Train a base policy from scratch on the pure analytic dynamics.

    Returns (policy, TrainReport). Deterministic for a fixed seed.
    """
    if initial_policy is None:
        obs_dim = visual_cfg.obs_dim if observation == "vision" else 15
        policy = policy_init(obs_dim, train.seed, hidden, squash,
                             observation, visual_cfg)
    else:
        policy = initial_policy
    cfg = RolloutConfig(task=task, n_envs=n_envs, init_sampler=box_init(task),
                        horizon=horizon, observation=observation,
                        visual_cfg=visual_cfg)
    report = TrainReport()
    opt = nets.adam_init(_trainable_arrays(policy, "full"), lr=train.lr)
    rngs = _epoch_rngs(train.seed, 0xE90C, train.epochs)
    policy, _ = _ascend(policy, None, cfg, "full", train.epochs, rngs, opt, report)
    return policy, report


@dataclass(frozen=True)
class AdaptConfig:
    mode: str = "full"          # "full" | "lora"
    epochs: int = 30
    n_envs: int = 10
    lr: float = 1e-3
    lora_rank: int = 8
    residual_backward: bool = False
    vision_epochs: int = 50
    vision_envs: int = 30

    def __post_init__(self):
        if self.mode not in ("full", "lora"):
            raise ValueError(f"unknown adaptation mode {self.mode!r}")


def adapt_step(policy: Policy, ensemble, task, buffer, acfg: AdaptConfig,
               opt: nets.AdamState | None = None, seed: int = 0, round_index: int = 0):
    """One online adaptation round against the hybrid dynamics.

    Initial states are resampled from the buffer each epoch. In lora mode a
    fresh adapter is attached on first use and the dense base parameters are
    never touched. The Adam state persists across rounds when passed back in.
    Returns (policy, opt, TrainReport).
    """
    if acfg.mode == "lora" and policy.adapter is None:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x10AA]))
        policy = replace(policy, adapter=nets.lora_init(policy.params, acfg.lora_rank, rng))
    vision = policy.observation == "vision"
    epochs = acfg.vision_epochs if vision else acfg.epochs
    n_envs = acfg.vision_envs if vision else acfg.n_envs
    cfg = RolloutConfig(task=task, n_envs=n_envs, init_sampler=buffer_init(buffer),
                        observation=policy.observation, visual_cfg=policy.visual_cfg,
                        residual_backward=acfg.residual_backward)
    if opt is None:
        opt = nets.adam_init(_trainable_arrays(policy, acfg.mode), lr=acfg.lr)
    report = TrainReport()
    rngs = _epoch_rngs(seed, 0xADA0 + round_index, epochs)
    policy, opt = _ascend(policy, ensemble, cfg, acfg.mode, epochs, rngs, opt, report)
    return policy, opt, report


# --- vision-policy trunk initialization ----------------------------------------------

@dataclass(frozen=True)
class VisionInitConfig:
    n_samples: int = 10000
    steps: int = 800
    batch: int = 256
    lr: float = 1e-3
    val_fraction: float = 0.1
    patience: int = 500  # warn if the loss has not improved after this many steps


def _synthetic_visual_pairs(task: HoverTask, vcfg: VisualObservationConfig,
                            n: int, rng: np.random.Generator):
    """(visual observation, [p, v]) pairs from short analytic random rollouts."""
    sampler = box_init(task)
    obs_rows, target_rows = [], []
    chunk = 50
    while len(obs_rows) * chunk < n:
        X0, _ = sampler(chunk, rng)
        x = X0
        states = [x] * vcfg.history_len
        actions = [np.broadcast_to(U_HOVER, (chunk, 4))] * vcfg.action_history_len
        for _ in range(vcfg.history_len + 3):
            u = np.concatenate([
                GRAVITY + rng.uniform(-2.0, 2.0, size=(chunk, 1)),
                rng.uniform(-1.5, 1.5, size=(chunk, 3))], axis=1)
            x = step_hybrid_flat(x, u, 0.02)
            states = states[1:] + [x]
            actions = actions[1:] + [u]
        obs = np.asarray(observe_visual(states, actions, vcfg))
        obs_rows.append(obs)
        target_rows.append(np.concatenate([x[:, 0:3], x[:, 12:15]], axis=1))
    O = np.concatenate(obs_rows)[:n]
    T = np.concatenate(target_rows)[:n]
    return O, T


def vision_pretrain_init(task: HoverTask, vcfg: VisualObservationConfig,
                         seed: int = 0, icfg: VisionInitConfig = VisionInitConfig(),
                         hidden=(512, 512), squash: SquashConfig = SquashConfig()):
    """Supervised warm start for the vision policy trunk.

    Trains hidden layers to regress [p, v] from visual observations generated
    on analytic-dynamics rollouts, then transplants them into a fresh policy
    (output head stays small-init). Returns (policy, diagnostics dict).
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x715]))
    O, T = _synthetic_visual_pairs(task, vcfg, icfg.n_samples, rng)
    n_val = max(1, int(icfg.val_fraction * len(O)))
    O_tr, T_tr = O[:-n_val], T[:-n_val]
    O_va, T_va = O[-n_val:], T[-n_val:]

    reg = nets.mlp_init((vcfg.obs_dim,) + tuple(hidden) + (6,), rng,
                        hidden_gain=1.0, output_gain=0.1)
    opt = nets.adam_init(nets.mlp_arrays(reg), lr=icfg.lr)
    best = np.inf
    best_step = 0
    warned = False
    for step in range(icfg.steps):
        idx = rng.integers(0, len(O_tr), size=icfg.batch)
        pred = nets.mlp_forward(reg, O_tr[idx])
        err = pred - T_tr[idx]
        loss = float((err * err).mean())
        if loss < best - 1e-12:
            best, best_step = loss, step
        if not warned and step - best_step >= icfg.patience:
            warned = True
        grads, _ = nets.mlp_backward(reg, O_tr[idx], 2.0 * err / err.size)
        flat = [g for pair in grads for g in pair]
        arrays, opt = nets.adam_step(nets.mlp_arrays(reg), flat, opt)
        reg = nets.mlp_from_arrays(reg, arrays)

    val_pred = nets.mlp_forward(reg, O_va)
    pos_rmse = float(np.sqrt(((val_pred[:, 0:3] - T_va[:, 0:3]) ** 2).mean()))

    policy = policy_init(vcfg.obs_dim, seed, hidden, squash, "vision", vcfg)
    if warned:
        # Regression failed to improve; keep the random init.
        return policy, {"pos_rmse": pos_rmse, "used_init": False}
    ws = list(policy.params.weights)
    bs = list(policy.params.biases)
    for i in range(len(hidden)):
        ws[i] = reg.weights[i]
        bs[i] = reg.biases[i]
    policy = replace(policy, params=replace(policy.params, weights=tuple(ws),
                                            biases=tuple(bs)))
    return policy, {"pos_rmse": pos_rmse, "used_init": True}
