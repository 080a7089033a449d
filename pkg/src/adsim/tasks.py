"""Task layer: observation models, rewards, reference trajectories, and
disturbance schedules.

Rewards run on tape nodes as well as plain arrays, since policy optimization
differentiates them along the whole rollout.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import tape as ad
from .dynamics import OMEGA_MAX, Action, QuadState
from .geom import GRAVITY, rotation_about_axis

__all__ = [
    "HoverTask", "ReferenceTrajectory", "DisturbanceSchedule", "DisturbanceState",
    "VisualObservationConfig", "default_visual_config",
    "U_HOVER", "STATE_OBS_DIM", "VISUAL_OBS_DIM",
    "observe_state", "unpack_observation", "observe_visual", "project_keypoints",
    "huber", "reward_hover", "reward_hover_flat", "reward_track", "reward_track_flat",
    "reference_eval", "reference_offsets", "reference_to_csv",
    "disturbance_at",
]

U_HOVER = np.array([GRAVITY, 0.0, 0.0, 0.0])
STATE_OBS_DIM = 15
VISUAL_OBS_DIM = 82


@dataclass(frozen=True)
class HoverTask:
    p_des: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        object.__setattr__(self, "p_des", np.asarray(self.p_des, dtype=np.float64))


# --- observations ---------------------------------------------------------------

def observe_state(x: QuadState) -> np.ndarray:
    """o = [p, vec(R) row-major, v], 15 entries."""
    return np.concatenate([x.p, x.R.ravel(), x.v])


def unpack_observation(obs: np.ndarray) -> QuadState:
    obs = np.asarray(obs, dtype=np.float64)
    return QuadState(obs[0:3], obs[3:12].reshape(3, 3), obs[12:15])


# --- Huber and rewards ------------------------------------------------------------

def huber(v, delta: float = 1.0):
    """Sum over components of the Huber function; quadratic inside delta."""
    return ad.huber_sum(v, delta)


def _huber_np(a: np.ndarray, delta: float) -> np.ndarray:
    q = np.abs(a)
    return np.where(q <= delta, 0.5 * a * a,
                    delta * (q - 0.5 * delta)).sum(axis=-1)


_HUBER_DELTA = 1.0

# The per-step rewards are evaluated (and differentiated) at every rollout
# step, so each is a single fused primitive with a hand-written adjoint.


def _reward_hover_fwd(aux, x, u):
    p_des = aux
    d = _HUBER_DELTA
    return (-1.0 * _huber_np(5.0 * (x[..., 0:3] - p_des), d)
            - 0.1 * _huber_np(x[..., 12:15], d)
            - 0.1 * _huber_np(u[..., 1:4], d)
            - 0.5 * _huber_np(u - U_HOVER, d))


def _reward_hover_bwd(aux, y, pv, g, needs):
    x, u = pv
    p_des = aux
    d = _HUBER_DELTA
    gs = g[..., None]
    gx = gu = None
    if needs[0]:
        gx = np.zeros_like(x)
        gx[..., 0:3] = -5.0 * np.clip(5.0 * (x[..., 0:3] - p_des), -d, d) * gs
        gx[..., 12:15] = -0.1 * np.clip(x[..., 12:15], -d, d) * gs
    if needs[1]:
        gu = -0.5 * np.clip(u - U_HOVER, -d, d) * gs
        gu[..., 1:4] += -0.1 * np.clip(u[..., 1:4], -d, d) * gs
    return gx, gu


ad.register_primitive("reward_hover", _reward_hover_fwd, _reward_hover_bwd)


def _reward_track_fwd(aux, x, u, p_ref, v_ref):
    d = _HUBER_DELTA
    return (-1.0 * _huber_np(x[..., 0:3] - p_ref, d)
            - 1.0 * _huber_np(x[..., 12:15] - v_ref, d)
            - 0.1 * _huber_np(u - U_HOVER, d))


def _reward_track_bwd(aux, y, pv, g, needs):
    x, u, p_ref, v_ref = pv
    d = _HUBER_DELTA
    gs = g[..., None]
    dp = np.clip(x[..., 0:3] - p_ref, -d, d) * gs
    dv = np.clip(x[..., 12:15] - v_ref, -d, d) * gs
    gx = gu = None
    if needs[0]:
        gx = np.zeros_like(x)
        gx[..., 0:3] = -dp
        gx[..., 12:15] = -dv
    if needs[1]:
        gu = -0.1 * np.clip(u - U_HOVER, -d, d) * gs
    gp = dp if needs[2] else None
    gv = dv if needs[3] else None
    return gx, gu, gp, gv


ad.register_primitive("reward_track", _reward_track_fwd, _reward_track_bwd)


def reward_hover_flat(x, u, p_des):
    """Hover reward on flat states/actions (batched, tape-capable).

    r = -1.0 H(5 (p - p_des)) - 0.1 H(v) - 0.1 H(w_cmd) - 0.5 H(u - u_hover)
    The rate term uses the commanded body rate: the low-fidelity state carries
    no angular velocity.
    """
    return ad.apply_primitive("reward_hover", (x, u),
                              aux=np.asarray(p_des, dtype=np.float64))


def reward_hover(x: QuadState, u: Action, task: HoverTask) -> float:
    return float(ad.value_of(reward_hover_flat(x.as_flat(), u.as_array(), task.p_des)))


def reward_track_flat(x, u, p_ref, v_ref):
    """Tracking reward: r = -1.0 H(p - p_ref) - 1.0 H(v - v_ref) - 0.1 H(u - u_hover)."""
    return ad.apply_primitive("reward_track", (x, u, p_ref, v_ref))


def reward_track(x: QuadState, u: Action, t: float, ref: "ReferenceTrajectory") -> float:
    p_ref, v_ref = reference_eval(ref, t)
    return float(ad.value_of(reward_track_flat(x.as_flat(), u.as_array(), p_ref, v_ref)))


# --- reference trajectories ---------------------------------------------------------

@dataclass(frozen=True)
class ReferenceTrajectory:
    """Periodic reference in the z = height plane, starting at (0, 0, height).

    circle:   p = center + radius (sin th, -cos th, 0), th = 2 pi t / period
    figure8:  p = start + (A sin th, B sin 2 th, 0)
    """

    kind: str                  # "circle" | "figure8"
    period: float              # s
    radius: float = 1.0        # circle
    amp_x: float = 1.0         # figure8
    amp_y: float = 0.5         # figure8
    height: float = 1.0

    def __post_init__(self):
        if self.kind not in ("circle", "figure8"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.period <= 0:
            raise ValueError("period must be positive")

    @staticmethod
    def circle(period: float = 3.0, radius: float = 1.0) -> "ReferenceTrajectory":
        return ReferenceTrajectory("circle", period, radius=radius)

    @staticmethod
    def figure8(period: float = 5.0, amp_x: float = 1.0, amp_y: float = 0.5) -> "ReferenceTrajectory":
        return ReferenceTrajectory("figure8", period, amp_x=amp_x, amp_y=amp_y)


def reference_eval(ref: ReferenceTrajectory, t):
    """(p_ref, v_ref) at time t (scalar or array; arrays give [..., 3]).

    v_ref is the exact analytic derivative of p_ref.
    """
    t = np.asarray(t, dtype=np.float64)
    w = 2.0 * np.pi / ref.period
    th = w * t
    zeros = np.zeros_like(t)
    if ref.kind == "circle":
        p = np.stack([ref.radius * np.sin(th),
                      ref.radius * (1.0 - np.cos(th)),
                      ref.height + zeros], axis=-1)
        v = np.stack([ref.radius * w * np.cos(th),
                      ref.radius * w * np.sin(th),
                      zeros], axis=-1)
    else:
        p = np.stack([ref.amp_x * np.sin(th),
                      ref.amp_y * np.sin(2.0 * th),
                      ref.height + zeros], axis=-1)
        v = np.stack([ref.amp_x * w * np.cos(th),
                      ref.amp_y * 2.0 * w * np.cos(2.0 * th),
                      zeros], axis=-1)
    return p, v


def reference_offsets(ref: ReferenceTrajectory, t):
    """Flat-state offset [p_ref, 0 x 9, v_ref] used to form tracking-error
    observations o = x - offset."""
    p, v = reference_eval(ref, t)
    z9 = np.zeros(p.shape[:-1] + (9,))
    return np.concatenate([p, z9, v], axis=-1)


def reference_to_csv(ref: ReferenceTrajectory, path, duration: float, dt: float = 0.02) -> None:
    ts = np.arange(0.0, duration + 0.5 * dt, dt)
    p, v = reference_eval(ref, ts)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "px", "py", "pz", "vx", "vy", "vz"])
        for i, t in enumerate(ts):
            w.writerow([f"{t:.6f}"] + [repr(c) for c in p[i]] + [repr(c) for c in v[i]])


# --- disturbance schedules ---------------------------------------------------------

@dataclass(frozen=True)
class DisturbanceSchedule:
    """Acceleration disturbance injected into the evaluation world.

    constant:    always `magnitude`
    reversing:   magnitude * (-1)^floor(t / switch_period)
    random-walk: per-step increments of +-walk_step, clipped to +-bound
    """

    kind: str = "none"        # "none" | "constant" | "reversing" | "random-walk"
    magnitude: np.ndarray = field(default_factory=lambda: np.zeros(3))
    switch_period: float = 15.0
    walk_step: float = 0.05
    bound: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0, 1.0]))

    def __post_init__(self):
        if self.kind not in ("none", "constant", "reversing", "random-walk"):
            raise ValueError(f"unknown disturbance kind {self.kind!r}")
        object.__setattr__(self, "magnitude", np.asarray(self.magnitude, dtype=np.float64))
        object.__setattr__(self, "bound", np.asarray(self.bound, dtype=np.float64))


@dataclass
class DisturbanceState:
    """Explicit per-rollout random-walk state (no hidden globals)."""

    value: np.ndarray
    rng: np.random.Generator


def disturbance_at(schedule: DisturbanceSchedule, t: float,
                   state: DisturbanceState | None = None):
    """Disturbance vector at time t; returns (vec, state'). Only the
    random-walk kind uses and advances `state`."""
    if schedule.kind == "none":
        return np.zeros(3), state
    if schedule.kind == "constant":
        return schedule.magnitude.copy(), state
    if schedule.kind == "reversing":
        sign = -1.0 if int(np.floor(t / schedule.switch_period)) % 2 else 1.0
        return sign * schedule.magnitude, state
    if state is None:
        raise ValueError("random-walk disturbance needs a DisturbanceState")
    step = state.rng.uniform(-schedule.walk_step, schedule.walk_step, size=3)
    value = np.clip(state.value + step, -schedule.bound, schedule.bound)
    return value, DisturbanceState(value, state.rng)


# --- visual observations --------------------------------------------------------------

def _camera_rotation(pitch_down: float = np.pi / 4) -> np.ndarray:
    """Body -> camera axes. Optical axis z_cam points along body +x pitched
    down by `pitch_down`; x_cam is image-right, y_cam image-down."""
    z_cam = np.array([np.cos(pitch_down), 0.0, -np.sin(pitch_down)])
    x_cam = np.array([0.0, -1.0, 0.0])
    y_cam = np.cross(z_cam, x_cam)
    return np.stack([x_cam, y_cam, z_cam])


@dataclass(frozen=True)
class VisualObservationConfig:
    """Seven fixed world keypoints seen by a body-fixed pinhole camera.

    Observation = 5 past frames x 7 keypoints x 2 normalized pixel coords,
    oldest first, then the last 3 post-squash actions (newest last) normalized
    by (g, omega_max): 70 + 12 = 82 entries.
    """

    keypoints: np.ndarray                  # [7, 3] world positions, m
    focal: tuple[float, float] = (320.0, 320.0)      # px
    center: tuple[float, float] = (320.0, 240.0)     # px
    image_size: tuple[int, int] = (640, 480)         # px
    history_len: int = 5
    action_history_len: int = 3
    pitch_down: float = np.pi / 4
    min_depth: float = 0.05                # m; nearer/behind points hit the sentinel
    sentinel: float = 1.5

    def __post_init__(self):
        object.__setattr__(self, "keypoints", np.asarray(self.keypoints, dtype=np.float64))
        if self.keypoints.shape != (7, 3):
            raise ValueError("expected 7 keypoints")

    @property
    def obs_dim(self) -> int:
        return self.keypoints.shape[0] * 2 * self.history_len + 4 * self.action_history_len


def default_visual_config(p_des=(0.0, 0.0, 1.0)) -> VisualObservationConfig:
    """Keypoint constellation: 6 face centers + centroid of a 1 m cube placed
    1.5 m ahead and 0.5 m below the hover target, so every keypoint sits well
    in front of the 45-degree down camera at the nominal pose."""
    center = np.asarray(p_des, dtype=np.float64) + np.array([1.5, 0.0, -0.5])
    pts = [center]
    for axis in range(3):
        for s in (-0.5, 0.5):
            q = center.copy()
            q[axis] += s
            pts.append(q)
    return VisualObservationConfig(np.stack(pts))


def project_keypoints(x, cfg: VisualObservationConfig):
    """Normalized pixel coordinates of the keypoints from a flat state.

    Accepts [..., 15] arrays or nodes; returns [..., 14] (7 keypoints x 2).
    Principal point maps to (0, 0); +-1 spans the half image. Points closer
    than min_depth (or behind) saturate at +-sentinel with zero gradient.
    """
    p = x[..., 0:3]
    rflat = x[..., 3:12]
    batch = ad.value_of(x).shape[:-1]
    R = ad.reshape(rflat, batch + (3, 3))
    # world -> body: R^T (k - p); rows of `rel` are keypoints.
    rel = cfg.keypoints - ad.reshape(p, batch + (1, 3))          # [..., 7, 3]
    body = ad.matmul(rel, R)                                     # (R^T k)^T rows
    cam = ad.matmul(body, _camera_rotation(cfg.pitch_down).T)    # [..., 7, 3]
    z = cam[..., 2:3]
    zv = ad.value_of(z)
    safe = np.maximum(zv, cfg.min_depth)
    z_safe = ad.where(zv > cfg.min_depth, z, safe)
    fx, fy = cfg.focal
    cw, ch = cfg.image_size[0] / 2.0, cfg.image_size[1] / 2.0
    uv = ad.concat([cam[..., 0:1] * (fx / cw), cam[..., 1:2] * (fy / ch)], axis=-1)
    uv = ad.div(uv, z_safe)
    uvv = ad.value_of(uv)
    if not np.all(np.isfinite(uvv)):
        raise ad.NonFiniteValueError("non-finite keypoint projection")
    clipped = np.clip(uvv, -cfg.sentinel, cfg.sentinel)
    uv = ad.where(np.abs(uvv) < cfg.sentinel, uv, clipped)
    return ad.reshape(uv, batch + (cfg.keypoints.shape[0] * 2,))


def normalize_action(u):
    """Scale an action [..., 4] to observation units: c/g, omega/omega_max."""
    return ad.mul(u, np.array([1.0 / GRAVITY] + [1.0 / OMEGA_MAX] * 3))


def observe_visual(states, actions, cfg: VisualObservationConfig):
    """Assemble the 82-entry visual observation.

    `states`: the last `history_len` flat states, oldest first (repeat the
    oldest to pad at episode start). `actions`: the last `action_history_len`
    post-squash actions, newest last (pad with u_hover).
    """
    if len(states) != cfg.history_len:
        raise ValueError(f"need {cfg.history_len} states, got {len(states)}")
    if len(actions) != cfg.action_history_len:
        raise ValueError(f"need {cfg.action_history_len} actions, got {len(actions)}")
    blocks = [project_keypoints(s, cfg) for s in states]
    blocks += [normalize_action(u) for u in actions]
    return ad.concat(blocks, axis=-1)


def observe_visual_states(states: list[QuadState], actions: list[Action],
                          cfg: VisualObservationConfig) -> np.ndarray:
    """Structured-type convenience wrapper (deployment path)."""
    hist = list(states)
    while len(hist) < cfg.history_len:
        hist.insert(0, hist[0])
    acts = list(actions)
    while len(acts) < cfg.action_history_len:
        acts.insert(0, Action.hover())
    flat = [s.as_flat() for s in hist[-cfg.history_len:]]
    arrs = [a.as_array() for a in acts[-cfg.action_history_len:]]
    return observe_visual(flat, arrs, cfg)
