"""Online residual-dynamics learning: rolling sample buffer, target dataset
construction, and the 3-member ensemble trained full-batch with Adam and
spectral-norm regularization.

Buffers and ensembles are immutable snapshots: pushes and training rounds
return new values, so the deployment loop can keep writing while a trainer
works on its copy.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import nets
from . import tape as ad
from .dynamics import OMEGA_MAX, Action, QuadState, analytic_accel
from .geom import GRAVITY

__all__ = [
    "BufferSample", "ResidualBuffer", "ResidualDataset", "ResidualEnsemble",
    "ResidualConfig", "buffer_push", "build_dataset", "train_ensemble",
    "predict_residual", "ensemble_disagreement",
    "buffer_to_csv", "buffer_from_csv",
    "NonMonotoneTimestampError", "EmptyDatasetError", "TrainingDivergedError",
    "normalize_inputs",
]

RESIDUAL_INPUT_DIM = 19

# Fixed observation scales for the network input; rotation entries pass raw.
_POS_SCALE = 5.0    # m
_VEL_SCALE = 5.0    # m/s


class NonMonotoneTimestampError(Exception):
    pass


class EmptyDatasetError(Exception):
    pass


class TrainingDivergedError(Exception):
    """NaN loss during a training round; carries member and iteration."""

    def __init__(self, member: int, iteration: int):
        self.member = member
        self.iteration = iteration
        super().__init__(f"non-finite loss in member {member} at iteration {iteration}")


@dataclass(frozen=True)
class BufferSample:
    t: float
    state: QuadState
    action: Action
    v: np.ndarray  # measured velocity used for finite-difference targets

    def __post_init__(self):
        object.__setattr__(self, "v", np.array(self.v, dtype=np.float64))


@dataclass(frozen=True)
class ResidualBuffer:
    """Rolling history of deployment samples; oldest evicted at capacity."""

    capacity: int
    samples: tuple[BufferSample, ...] = ()

    def __len__(self):
        return len(self.samples)


def buffer_push(buf: ResidualBuffer, sample: BufferSample) -> ResidualBuffer:
    if buf.samples and sample.t <= buf.samples[-1].t:
        raise NonMonotoneTimestampError(
            f"timestamp {sample.t} not after {buf.samples[-1].t}")
    samples = buf.samples + (sample,)
    if len(samples) > buf.capacity:
        samples = samples[-buf.capacity:]
    return replace(buf, samples=samples)


@dataclass(frozen=True)
class ResidualDataset:
    """Rows of raw [p, vec(R), v, c, w_cmd] inputs and a_res targets."""

    inputs: np.ndarray   # [n, 19]
    targets: np.ndarray  # [n, 3]

    def __len__(self):
        return self.inputs.shape[0]


def build_dataset(buf: ResidualBuffer) -> ResidualDataset:
    """Targets from consecutive pairs: a_gt = dv/dt, a_res = a_gt - a_hat."""
    if len(buf) < 2:
        raise EmptyDatasetError(f"need at least 2 samples, have {len(buf)}")
    inputs, targets = [], []
    for prev, nxt in zip(buf.samples[:-1], buf.samples[1:]):
        dt = nxt.t - prev.t
        a_gt = (nxt.v - prev.v) / dt
        xu = np.concatenate([prev.state.as_flat(), prev.action.as_array()])
        a_hat = analytic_accel(xu[0:15], xu[15:19])
        inputs.append(xu)
        targets.append(a_gt - a_hat)
    return ResidualDataset(np.stack(inputs), np.stack(targets))


def normalize_inputs(xu: np.ndarray):
    """Scale raw [.., 19] inputs to network units (dual-mode)."""
    scale = np.concatenate([
        np.full(3, 1.0 / _POS_SCALE),
        np.ones(9),
        np.full(3, 1.0 / _VEL_SCALE),
        [1.0 / GRAVITY],
        np.full(3, 1.0 / OMEGA_MAX),
    ])
    return ad.mul(xu, scale)


@dataclass(frozen=True)
class ResidualConfig:
    hidden: tuple[int, ...] = (128, 128)
    members: int = 3
    lr: float = 1e-3
    beta: float = 1e-3           # regularization strength
    norm: str = "spectral"       # "spectral" | "frobenius" (ablation switch)
    power_iters: int = 25

    def __post_init__(self):
        if self.norm not in ("spectral", "frobenius"):
            raise ValueError(f"unknown weight-norm kind {self.norm!r}")


@dataclass(frozen=True)
class ResidualEnsemble:
    """Immutable snapshot of the 3-network residual model.

    Prediction is the member mean. Adam moments and power-iteration vectors
    ride along so successive training rounds warm-start.
    """

    members: tuple[nets.MlpParams, ...]
    adam: tuple[nets.AdamState, ...]
    seeds: tuple[int, ...]
    pi_vectors: tuple[tuple[np.ndarray, ...], ...]  # per member, per layer u
    config: ResidualConfig = field(default_factory=ResidualConfig)

    @staticmethod
    def init(seed: int, config: ResidualConfig = ResidualConfig()) -> "ResidualEnsemble":
        sizes = (RESIDUAL_INPUT_DIM,) + config.hidden + (3,)
        seeds = tuple(int(s) for s in
                      np.random.SeedSequence(seed).generate_state(config.members))
        members, adam, pi = [], [], []
        for s in seeds:
            rng = np.random.default_rng(s)
            m = nets.mlp_init(sizes, rng)
            members.append(m)
            adam.append(nets.adam_init(nets.mlp_arrays(m), lr=config.lr))
            pi.append(tuple(np.full(W.shape[0], 1.0 / np.sqrt(W.shape[0]))
                            for W in m.weights))
        return ResidualEnsemble(tuple(members), tuple(adam), seeds, tuple(pi), config)

    def predict_batch(self, xu: np.ndarray) -> np.ndarray:
        """Mean member prediction for raw [.., 19] inputs (plain numpy)."""
        z = np.asarray(normalize_inputs(np.asarray(xu, dtype=np.float64)))
        acc = None
        for m in self.members:
            y = nets.mlp_forward(m, z)
            acc = y if acc is None else acc + y
        return acc / len(self.members)

    def taped_accel(self, x, u):
        """Member-mean prediction recorded on the tape (frozen parameters);
        used only by the through-residual backward ablation."""
        xu = ad.concat([x, u], axis=-1)
        z = normalize_inputs(xu)
        acc = None
        for m in self.members:
            w, b = nets.mlp_leaves(_tape_of(z), m, trainable=False)
            y = nets.mlp_apply(w, b, z, m.hidden_activation)
            acc = y if acc is None else acc + y
        return acc * (1.0 / len(self.members))


def _tape_of(x):
    if not isinstance(x, ad.Node):
        raise TypeError("taped_accel requires tape-node inputs")
    return x.tape


def predict_residual(ens: ResidualEnsemble, x: QuadState, u: Action) -> np.ndarray:
    xu = np.concatenate([x.as_flat(), u.as_array()])
    return ens.predict_batch(xu[None, :])[0]


def ensemble_disagreement(ens: ResidualEnsemble, xu: np.ndarray) -> float:
    """Mean across inputs of the member standard deviation (diagnostic only)."""
    z = np.asarray(normalize_inputs(np.asarray(xu, dtype=np.float64)))
    preds = np.stack([nets.mlp_forward(m, z) for m in ens.members])
    return float(preds.std(axis=0).mean())


def _member_round(member: nets.MlpParams, adam: nets.AdamState,
                  pi: tuple[np.ndarray, ...], Z: np.ndarray, Y: np.ndarray,
                  iters: int, cfg: ResidualConfig, index: int):
    """Full-batch MSE + beta * sum ||W_l||^2 training for one member."""
    n = Z.shape[0]
    losses = np.empty(iters)
    pi = list(pi)
    for it in range(iters):
        pred = nets.mlp_forward(member, Z)
        err = pred - Y
        mse = float((err * err).sum() / n)
        reg = 0.0
        sn = []
        if cfg.norm == "spectral":
            for li, W in enumerate(member.weights):
                sigma, u, v = nets.power_iteration(W, pi[li], cfg.power_iters)
                sn.append((sigma, u, v))
                pi[li] = u
                reg += sigma * sigma
        else:
            for W in member.weights:
                reg += float((W * W).sum())
        loss = mse + cfg.beta * reg
        if not np.isfinite(loss):
            raise TrainingDivergedError(index, it)
        losses[it] = loss

        grads, _ = nets.mlp_backward(member, Z, 2.0 * err / n)
        flat = []
        for li, (gW, gb) in enumerate(grads):
            if cfg.norm == "spectral":
                sigma, u, v = sn[li]
                gW = gW + cfg.beta * nets.spectral_penalty_grad(sigma, u, v)
            else:
                gW = gW + cfg.beta * 2.0 * member.weights[li]
            flat.extend((gW, gb))
        arrays, adam = nets.adam_step(nets.mlp_arrays(member), flat, adam,
                                      names=[f"member{index}.layer{i // 2}.{'Wb'[i % 2]}"
                                             for i in range(len(flat))])
        member = nets.mlp_from_arrays(member, arrays)
    return member, adam, tuple(pi), losses


def train_ensemble(ens: ResidualEnsemble, ds: ResidualDataset, iters: int = 100):
    """Refine every member on the full dataset for `iters` Adam steps.

    Returns (new ensemble, per-member loss histories [members, iters]).
    Members differ only by their initialization seed and are trained
    independently and deterministically; a NaN loss aborts the round with
    TrainingDivergedError and the caller keeps the previous snapshot.
    """
    if len(ds) == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    Z = np.asarray(normalize_inputs(ds.inputs))
    Y = ds.targets
    members, adams, pis, losses = [], [], [], []
    for i, (m, a, pi) in enumerate(zip(ens.members, ens.adam, ens.pi_vectors)):
        m2, a2, pi2, ls = _member_round(m, a, pi, Z, Y, iters, ens.config, i)
        members.append(m2)
        adams.append(a2)
        pis.append(pi2)
        losses.append(ls)
    new = replace(ens, members=tuple(members), adam=tuple(adams), pi_vectors=tuple(pis))
    return new, np.stack(losses)


# --- buffer CSV dump/load -------------------------------------------------------

_BUFFER_HEADER = (
    ["t"]
    + [f"s{i}" for i in range(15)]
    + ["c", "wx", "wy", "wz"]
    + ["vx", "vy", "vz"]
)


def buffer_to_csv(buf: ResidualBuffer, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_BUFFER_HEADER)
        for s in buf.samples:
            row = ([repr(s.t)] + [repr(x) for x in s.state.as_flat()]
                   + [repr(x) for x in s.action.as_array()]
                   + [repr(x) for x in s.v])
            w.writerow(row)


def buffer_from_csv(path, capacity: int | None = None) -> ResidualBuffer:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != _BUFFER_HEADER:
        raise ValueError(f"{path}: not a buffer dump")
    samples = []
    for row in rows[1:]:
        vals = np.array([float(x) for x in row])
        samples.append(BufferSample(
            t=float(vals[0]),
            state=QuadState.from_flat(vals[1:16]),
            action=Action.from_array(vals[16:20]),
            v=vals[20:23]))
    cap = capacity if capacity is not None else max(len(samples), 1)
    buf = ResidualBuffer(capacity=cap)
    for s in samples:
        buf = buffer_push(buf, s)
    return buf
