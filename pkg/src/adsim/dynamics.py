"""Quadrotor dynamics layers.

Three models, lowest to highest fidelity:

* analytic point-mass model (``analytic_deriv``) used for pretraining and as
  the backward-pass surrogate,
* hybrid model (``step_hybrid``): analytic + learned residual acceleration,
  used for adaptation rollouts,
* evaluation world (``eval_world_step``): actuator lag + linear body drag +
  injected acceleration disturbances, standing in for the real vehicle.

Flat state layout is [p(3), vec(R)(9) row-major, v(3)]; the eval world extends
it with [omega(3), c_act(1)]. All derivative functions run on plain arrays or
tape nodes, batched or single.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as ad
from .geom import GRAVITY, GRAVITY_VEC, reorthonormalize, rk4_step

__all__ = [
    "QuadState", "Action", "QuadParams", "EvalWorldState", "EvalWorldConfig",
    "QUAD_PRESETS", "OMEGA_MAX",
    "pack_state", "unpack_state",
    "f_a", "analytic_deriv", "analytic_accel",
    "hybrid_accel", "hybrid_deriv", "step_hybrid", "step_hybrid_flat",
    "highfid_deriv", "step_highfid_flat",
    "eval_world_step", "residual_target",
]

OMEGA_MAX = 5.0  # rad/s commanded body-rate limit per axis


def _ro(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)  # own copy; states are immutable values
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class QuadState:
    """Low-fidelity simulation state: position, rotation, linear velocity."""

    p: np.ndarray
    R: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p", _ro(self.p))
        object.__setattr__(self, "R", _ro(self.R))
        object.__setattr__(self, "v", _ro(self.v))

    @staticmethod
    def hover(p=(0.0, 0.0, 1.0)) -> "QuadState":
        return QuadState(np.asarray(p, float), np.eye(3), np.zeros(3))

    def as_flat(self) -> np.ndarray:
        return pack_state(self.p, self.R, self.v)

    @staticmethod
    def from_flat(x: np.ndarray) -> "QuadState":
        p, R, v = unpack_state(x)
        return QuadState(p, R, v)


@dataclass(frozen=True)
class Action:
    """Mass-normalized collective thrust (m/s^2) and commanded body rates."""

    c: float
    omega_cmd: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "c", float(self.c))
        object.__setattr__(self, "omega_cmd", _ro(self.omega_cmd))

    @staticmethod
    def hover() -> "Action":
        return Action(GRAVITY, np.zeros(3))

    def as_array(self) -> np.ndarray:
        return np.concatenate([[self.c], self.omega_cmd])

    @staticmethod
    def from_array(u: np.ndarray) -> "Action":
        u = np.asarray(u, dtype=np.float64)
        return Action(float(u[0]), u[1:4])


@dataclass(frozen=True)
class QuadParams:
    mass: float                 # kg
    max_thrust: float           # N
    arm_length: float           # m
    inertia: tuple[float, float, float]  # g m^2; unused by the rate-lag eval world
    motor_time_constant: float  # s

    def __post_init__(self):
        for name in ("mass", "max_thrust", "arm_length", "motor_time_constant"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if any(i <= 0 for i in self.inertia):
            raise ValueError("inertia entries must be positive")

    @property
    def c_max(self) -> float:
        """Mass-normalized thrust ceiling (m/s^2)."""
        return self.max_thrust / self.mass


QUAD_PRESETS = {
    "small": QuadParams(mass=0.19, max_thrust=14.0, arm_length=0.06,
                        inertia=(0.14, 0.17, 0.21), motor_time_constant=0.025),
    "large": QuadParams(mass=0.60, max_thrust=34.0, arm_length=0.13,
                        inertia=(2.41, 1.80, 3.76), motor_time_constant=0.033),
}


@dataclass(frozen=True)
class EvalWorldState:
    """Eval-world rigid-body state: QuadState plus actuator states."""

    p: np.ndarray
    R: np.ndarray
    v: np.ndarray
    omega: np.ndarray   # actual body rate, rad/s
    c_act: float        # lagged mass-normalized thrust, m/s^2

    def __post_init__(self):
        object.__setattr__(self, "p", _ro(self.p))
        object.__setattr__(self, "R", _ro(self.R))
        object.__setattr__(self, "v", _ro(self.v))
        object.__setattr__(self, "omega", _ro(self.omega))
        object.__setattr__(self, "c_act", float(self.c_act))

    @staticmethod
    def at_rest(p=(0.0, 0.0, 1.0), c_act: float = GRAVITY) -> "EvalWorldState":
        # Motors spun up to hover thrust, matching a vehicle entering the task.
        return EvalWorldState(np.asarray(p, float), np.eye(3), np.zeros(3),
                              np.zeros(3), c_act)

    def quad_state(self) -> QuadState:
        return QuadState(self.p, self.R, self.v)


@dataclass(frozen=True)
class EvalWorldConfig:
    drag_coeff: float = 0.3   # linear body drag, 1/s
    substep_hz: float = 500.0


# --- packing -----------------------------------------------------------------

def pack_state(p, R, v) -> np.ndarray:
    return np.concatenate([np.asarray(p, float).ravel(),
                           np.asarray(R, float).ravel(),
                           np.asarray(v, float).ravel()])


def unpack_state(x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    return x[..., 0:3], x[..., 3:12].reshape(x.shape[:-1] + (3, 3)), x[..., 12:15]


def _thrust_vec(u):
    """[0, 0, c] from an action array/node [..., 4]."""
    c = u[..., 0:1] if isinstance(u, ad.Node) else np.asarray(u, float)[..., 0:1]
    zeros = np.zeros(ad.value_of(c).shape[:-1] + (2,))
    return ad.concat([zeros, c], axis=-1)


def _rot_of(x):
    flat = x[..., 3:12]
    shape = ad.value_of(flat).shape[:-1] + (3, 3)
    return ad.reshape(flat, shape)


# --- fused derivative primitives -------------------------------------------------
#
# The RK4 inner loop evaluates these four times per step over the whole batch;
# fusing them into single tape nodes keeps rollout tapes short. Their hand
# written adjoints are covered by the all-primitives finite-difference test.

def _skew_np(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (3, 3), dtype=np.float64)
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def _skew_transpose_contract(gS: np.ndarray) -> np.ndarray:
    """v such that <skew(v), G> = <v, this(G)> (adjoint of the skew map)."""
    return np.stack([
        gS[..., 2, 1] - gS[..., 1, 2],
        gS[..., 0, 2] - gS[..., 2, 0],
        gS[..., 1, 0] - gS[..., 0, 1],
    ], axis=-1)


def _quad_deriv_fwd(aux, x, u, res):
    batch = x.shape[:-1]
    R = x[..., 3:12].reshape(batch + (3, 3))
    v = x[..., 12:15]
    c = u[..., 0:1]
    omega = u[..., 1:4]
    rdot = np.matmul(R, _skew_np(omega)).reshape(batch + (9,))
    vdot = R[..., :, 2] * c + GRAVITY_VEC + res
    return np.concatenate([v, rdot, vdot], axis=-1)


def _quad_deriv_bwd(aux, y, pv, g, needs):
    x, u, res = pv
    batch = x.shape[:-1]
    R = x[..., 3:12].reshape(batch + (3, 3))
    c = u[..., 0:1]
    gp = g[..., 0:3]
    gRmat = g[..., 3:12].reshape(batch + (3, 3))
    gv_out = g[..., 12:15]
    gx = gu = gres = None
    if needs[0]:
        S = _skew_np(u[..., 1:4])
        gR = np.matmul(gRmat, np.swapaxes(S, -1, -2))
        gR[..., :, 2] += gv_out * c
        gx = np.zeros_like(x)
        gx[..., 3:12] = gR.reshape(batch + (9,))
        gx[..., 12:15] = gp
    if needs[1]:
        gc = np.sum(gv_out * R[..., :, 2], axis=-1, keepdims=True)
        gS = np.matmul(np.swapaxes(R, -1, -2), gRmat)
        gu = np.concatenate([gc, _skew_transpose_contract(gS)], axis=-1)
    if needs[2]:
        gres = gv_out
    return gx, gu, gres


ad.register_primitive("quad_deriv", _quad_deriv_fwd, _quad_deriv_bwd)


def _quad_deriv_ext_fwd(aux, x, u, res):
    tau, drag, dist = aux
    batch = x.shape[:-1]
    R = x[..., 3:12].reshape(batch + (3, 3))
    v = x[..., 12:15]
    omega = x[..., 15:18]
    c_act = x[..., 18:19]
    rdot = np.matmul(R, _skew_np(omega)).reshape(batch + (9,))
    vdot = R[..., :, 2] * c_act + GRAVITY_VEC - drag * v + res
    if dist is not None:
        vdot = vdot + dist
    omega_dot = (u[..., 1:4] - omega) / tau
    c_dot = (u[..., 0:1] - c_act) / tau
    return np.concatenate([v, rdot, vdot, omega_dot, c_dot], axis=-1)


def _quad_deriv_ext_bwd(aux, y, pv, g, needs):
    tau, drag, _ = aux
    x, u, res = pv
    batch = x.shape[:-1]
    R = x[..., 3:12].reshape(batch + (3, 3))
    omega = x[..., 15:18]
    c_act = x[..., 18:19]
    gp = g[..., 0:3]
    gRmat = g[..., 3:12].reshape(batch + (3, 3))
    gv_out = g[..., 12:15]
    g_od = g[..., 15:18]
    g_cd = g[..., 18:19]
    gx = gu = gres = None
    if needs[0]:
        S = _skew_np(omega)
        gR = np.matmul(gRmat, np.swapaxes(S, -1, -2))
        gR[..., :, 2] += gv_out * c_act
        gS = np.matmul(np.swapaxes(R, -1, -2), gRmat)
        gx = np.zeros_like(x)
        gx[..., 3:12] = gR.reshape(batch + (9,))
        gx[..., 12:15] = gp - drag * gv_out
        gx[..., 15:18] = _skew_transpose_contract(gS) - g_od / tau
        gx[..., 18:19] = np.sum(gv_out * R[..., :, 2], axis=-1, keepdims=True) - g_cd / tau
    if needs[1]:
        gu = np.concatenate([g_cd / tau, g_od / tau], axis=-1)
    if needs[2]:
        gres = gv_out
    return gx, gu, gres


ad.register_primitive("quad_deriv_ext", _quad_deriv_ext_fwd, _quad_deriv_ext_bwd)


# --- analytic model ------------------------------------------------------------

def analytic_deriv(x, u):
    """Point-mass flat-state derivative: dp = v, dR = R [w]_x, dv = R c + g."""
    zeros = np.zeros(ad.value_of(x).shape[:-1] + (3,))
    return ad.apply_primitive("quad_deriv", (x, u, zeros))


def analytic_accel(x, u):
    """The dv row of the analytic model (theoretical acceleration a-hat)."""
    R = _rot_of(x)
    return ad.matvec(R, _thrust_vec(u)) + GRAVITY_VEC


def f_a(x: QuadState, u: Action) -> np.ndarray:
    """Analytic derivative of a structured state; returns the flat 15-vector."""
    return analytic_deriv(x.as_flat(), u.as_array())


# --- hybrid model ---------------------------------------------------------------

def _residual_accel(x, u, ensemble, residual_backward: bool):
    """Residual acceleration during a rollout.

    Default (surrogate backward): the ensemble is evaluated on the *values* of
    the current nodes and inserted as a constant, so the forward pass sees the
    hybrid dynamics while gradients flow only through the analytic terms.
    With residual_backward=True the member networks are recorded on the tape
    (frozen parameters, gradients flow through their inputs).
    """
    if ensemble is None:
        return np.zeros(ad.value_of(x).shape[:-1] + (3,))
    if residual_backward and (isinstance(x, ad.Node) or isinstance(u, ad.Node)):
        return ensemble.taped_accel(x, u)
    xu = np.concatenate([ad.value_of(x), ad.value_of(u)], axis=-1)
    return ensemble.predict_batch(xu)


def hybrid_deriv(x, u, ensemble, residual_backward: bool = False):
    res = _residual_accel(x, u, ensemble, residual_backward)
    return ad.apply_primitive("quad_deriv", (x, u, res))


def hybrid_accel(x: QuadState, u: Action, ensemble=None) -> np.ndarray:
    """a_hybrid = a_hat + ensemble mean prediction."""
    accel = analytic_accel(x.as_flat(), u.as_array())
    if ensemble is not None:
        xu = np.concatenate([x.as_flat(), u.as_array()])
        accel = accel + ensemble.predict_batch(xu[None, :])[0]
    return accel


def step_hybrid_flat(x, u, dt: float, ensemble=None, residual_backward: bool = False):
    """RK4 step of the hybrid dynamics on flat states (array or node, batched).

    The residual model is held frozen and queried at every RK4 stage state;
    the rotation block is re-projected onto SO(3) after the step.
    """
    def f(xs, us):
        return hybrid_deriv(xs, us, ensemble, residual_backward)

    xn = rk4_step(f, x, u, dt)
    if not np.all(np.isfinite(ad.value_of(xn))):
        raise ad.NonFiniteValueError("non-finite state after hybrid step")
    R = reorthonormalize(_rot_of(xn))
    rflat = ad.reshape(R, ad.value_of(xn).shape[:-1] + (9,))
    return ad.concat([xn[..., 0:3], rflat, xn[..., 12:15]], axis=-1)


def step_hybrid(x: QuadState, u: Action, dt: float = 0.02, ensemble=None) -> QuadState:
    return QuadState.from_flat(step_hybrid_flat(x.as_flat(), u.as_array(), dt, ensemble))


# --- evaluation world -------------------------------------------------------------
#
# Extended flat layout: [p(3), vec(R)(9), v(3), omega(3), c_act(1)] = 19 entries.

def _pack_eval(s: EvalWorldState) -> np.ndarray:
    return np.concatenate([s.p, s.R.ravel(), s.v, s.omega, [s.c_act]])


def _unpack_eval(x: np.ndarray) -> EvalWorldState:
    return EvalWorldState(x[0:3], x[3:12].reshape(3, 3), x[12:15], x[15:18], x[18])


def highfid_deriv(x, u, params: QuadParams, drag_coeff: float, dist=None, res=None):
    """Derivative of the extended state: actuator first-order lag, linear body
    drag, optional injected acceleration and residual term. Dual-mode."""
    if res is None:
        res = np.zeros(ad.value_of(x).shape[:-1] + (3,))
    d = None if dist is None else np.asarray(dist, dtype=np.float64)
    aux = (params.motor_time_constant, float(drag_coeff), d)
    return ad.apply_primitive("quad_deriv_ext", (x, u, res), aux=aux)


def step_highfid_flat(x, u, dt: float, params: QuadParams, drag_coeff: float,
                      substeps: int = 10, dist=None, ensemble=None,
                      residual_backward: bool = False):
    """Substepped RK4 of the lag+drag model, optionally with a residual term.

    Used as the "high-fidelity forward" training configuration in the design
    ablation; the eval world itself goes through eval_world_step.
    """
    def f(xs, us):
        res = None
        if ensemble is not None:
            res = _residual_accel(xs[..., 0:15], us, ensemble, residual_backward)
        return highfid_deriv(xs, us, params, drag_coeff, dist, res)

    h = dt / substeps
    for _ in range(substeps):
        x = rk4_step(f, x, u, h)
    R = reorthonormalize(_rot_of(x))
    rflat = ad.reshape(R, ad.value_of(x).shape[:-1] + (9,))
    return ad.concat([x[..., 0:3], rflat, x[..., 12:15], x[..., 15:19]], axis=-1)


def eval_world_step(s: EvalWorldState, u: Action, dt: float, params: QuadParams,
                    dist=None, cfg: EvalWorldConfig = EvalWorldConfig()):
    """Advance the evaluation world by one 50 Hz control interval.

    Returns (state, crashed). Actuation follows a first-order lag toward the
    commands; with tau at or below half a substep the lag is treated as
    instantaneous (the stiff limit). Ground contact with downward velocity
    sets the crash flag and clamps to the plane.
    """
    substeps = max(1, int(round(dt * cfg.substep_hz)))
    h = dt / substeps
    snap = params.motor_time_constant <= 0.5 * h
    if snap:
        s = EvalWorldState(s.p, s.R, s.v, u.omega_cmd, u.c)

    x = _pack_eval(s)
    ua = u.as_array()

    def f(xs, us):
        d = highfid_deriv(xs, us, params, cfg.drag_coeff, dist)
        if snap:
            d = np.asarray(d)
            d[..., 15:19] = 0.0  # actuators pinned to commands
        return d

    for _ in range(substeps):
        x = rk4_step(f, x, ua, h)
    R = np.asarray(reorthonormalize(x[3:12].reshape(3, 3)))
    out = EvalWorldState(x[0:3], R, x[12:15], x[15:18], x[18])
    crashed = bool(out.p[2] <= 0.0 and out.v[2] < 0.0)
    if crashed:
        p = out.p.copy()
        p[2] = 0.0
        out = EvalWorldState(p, out.R, out.v, out.omega, out.c_act)
    return out, crashed


# --- residual targets ---------------------------------------------------------

def residual_target(s_prev: QuadState, s_next: QuadState, u: Action, dt: float) -> np.ndarray:
    """a_res sample: finite-difference measured acceleration minus analytic."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    a_gt = (s_next.v - s_prev.v) / dt
    a_hat = analytic_accel(s_prev.as_flat(), u.as_array())
    return a_gt - a_hat
