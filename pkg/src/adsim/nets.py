"""Minimal dense-network stack: MLP forward/backward, Adam, power-iteration
spectral norm, low-rank adapters, and the bit-exact parameter wire format.

Parameters are immutable snapshots; every update returns new arrays. The
explicit `mlp_backward` here is used for residual-model and supervised
training; policy gradients instead flow through the rollout tape (see
:mod:`adsim.adapt`), which gives two independently testable backprop paths.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, replace

import numpy as np

from . import tape as ad

__all__ = [
    "MlpParams", "LoraAdapter", "AdamState",
    "mlp_init", "mlp_forward", "mlp_backward", "mlp_apply", "mlp_leaves",
    "mlp_arrays", "mlp_from_arrays", "params_equal",
    "lora_init", "lora_forward", "lora_leaves", "effective_weights",
    "adam_init", "adam_step",
    "power_iteration", "spectral_norm", "spectral_penalty_grad",
    "serialize_params", "deserialize_params", "blob_kind",
    "ShapeMismatchError", "NonFiniteGradError",
    "BlobError", "BlobMagicError", "BlobVersionError",
    "BlobShapeError", "BlobChecksumError",
]


class ShapeMismatchError(Exception):
    pass


class NonFiniteGradError(Exception):
    """Raised by adam_step; names the offending parameter array."""


_ACT_FNS = {"tanh": np.tanh, "linear": lambda x: x}


@dataclass(frozen=True)
class MlpParams:
    """Dense layers y = W x + b; hidden layers squashed, output linear."""

    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    hidden_activation: str = "tanh"

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ShapeMismatchError("weights/biases length mismatch")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape[0] != b.shape[0]:
                raise ShapeMismatchError(f"layer {i}: W rows {W.shape[0]} != b {b.shape[0]}")
            if i > 0 and W.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeMismatchError(f"layer {i}: input dim does not chain")
        if self.hidden_activation not in _ACT_FNS:
            raise ValueError(f"unknown activation {self.hidden_activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.input_dim,) + tuple(W.shape[0] for W in self.weights)


def mlp_init(sizes, rng: np.random.Generator, hidden_gain: float = 1.0,
             output_gain: float = 0.01, hidden_activation: str = "tanh") -> MlpParams:
    """Scaled uniform fan-in init: W ~ U(+-gain/sqrt(fan_in)), b = 0.

    The small output gain makes fresh networks near-zero maps, which keeps a
    fresh policy at hover and a fresh residual model out of the dynamics.
    """
    weights, biases = [], []
    n = len(sizes) - 1
    for i in range(n):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        gain = output_gain if i == n - 1 else hidden_gain
        limit = gain / np.sqrt(fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(tuple(weights), tuple(biases), hidden_activation)


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Plain evaluation; x is [in] or [batch, in]."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.input_dim:
        raise ShapeMismatchError(
            f"input dim {x.shape[-1]} != first layer {params.input_dim}")
    act = _ACT_FNS[params.hidden_activation]
    h = x
    last = params.n_layers - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ W.T + b
        if i < last:
            h = act(h)
    return h


def mlp_backward(params: MlpParams, x, out_grad):
    """Exact reverse-mode gradients of sum(out * out_grad).

    Returns ((gW, gb) per layer, gx). Batched inputs sum parameter gradients
    over the batch.
    """
    if params.hidden_activation != "tanh":
        raise ValueError("backward implemented for tanh hidden layers")
    x = np.asarray(x, dtype=np.float64)
    out_grad = np.asarray(out_grad, dtype=np.float64)
    if x.shape[-1] != params.input_dim:
        raise ShapeMismatchError("input dim mismatch")
    if out_grad.shape[-1] != params.output_dim or out_grad.shape[:-1] != x.shape[:-1]:
        raise ShapeMismatchError("out_grad shape mismatch")

    last = params.n_layers - 1
    pre_inputs = [x]  # input to each layer
    h = x
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ W.T + b
        if i < last:
            h = np.tanh(h)
        pre_inputs.append(h)

    grads = [None] * params.n_layers
    g = out_grad
    for i in range(last, -1, -1):
        inp = pre_inputs[i]
        if inp.ndim == 1:
            gW = np.outer(g, inp)
            gb = g.copy()
        else:
            gW = g.T @ inp
            gb = g.sum(axis=0)
        grads[i] = (gW, gb)
        g = g @ params.weights[i]
        if i > 0:
            a = pre_inputs[i]  # tanh output feeding layer i
            g = g * (1.0 - a * a)
    return grads, g


def mlp_arrays(params: MlpParams) -> list[np.ndarray]:
    out = []
    for W, b in zip(params.weights, params.biases):
        out.extend((W, b))
    return out


def mlp_from_arrays(template: MlpParams, arrays) -> MlpParams:
    ws = tuple(arrays[2 * i] for i in range(template.n_layers))
    bs = tuple(arrays[2 * i + 1] for i in range(template.n_layers))
    return replace(template, weights=ws, biases=bs)


def params_equal(a: MlpParams, b: MlpParams) -> bool:
    return (a.hidden_activation == b.hidden_activation
            and len(a.weights) == len(b.weights)
            and all(np.array_equal(x, y) for x, y in zip(a.weights, b.weights))
            and all(np.array_equal(x, y) for x, y in zip(a.biases, b.biases)))


# --- taped application (policy rollouts, through-residual backward) ---------

def mlp_leaves(tp: ad.Tape, params: MlpParams, trainable: bool = True):
    """Put parameters on a tape: leaves if trainable, constants otherwise."""
    mk = tp.leaf if trainable else tp.constant
    return [mk(W) for W in params.weights], [mk(b) for b in params.biases]


def mlp_apply(wnodes, bnodes, x, hidden_activation: str = "tanh"):
    """Forward through layer nodes (or arrays); dual-mode like all tape ops."""
    h = x
    last = len(wnodes) - 1
    for i, (W, b) in enumerate(zip(wnodes, bnodes)):
        h = ad.linear(h, W, b)
        if i < last:
            if hidden_activation != "tanh":
                raise ValueError("taped apply implemented for tanh hidden layers")
            h = ad.tanh(h)
    return h


# --- LoRA -------------------------------------------------------------------

@dataclass(frozen=True)
class LoraAdapter:
    """Additive low-rank deltas: adapted layer i computes (W_i + up_i @ down_i) x + b."""

    layer_indices: tuple[int, ...]
    down: tuple[np.ndarray, ...]  # [rank, in]
    up: tuple[np.ndarray, ...]    # [out, rank]

    def __post_init__(self):
        if not (len(self.layer_indices) == len(self.down) == len(self.up)):
            raise ShapeMismatchError("adapter component lengths differ")
        for i, (A, B) in enumerate(zip(self.down, self.up)):
            r = A.shape[0]
            if B.shape[1] != r:
                raise ShapeMismatchError(f"adapter {i}: rank mismatch {B.shape[1]} != {r}")
            if not (1 <= r < min(A.shape[1], B.shape[0])):
                raise ShapeMismatchError(
                    f"adapter {i}: rank {r} not in [1, min(in,out))")

    @property
    def rank(self) -> int:
        return max(A.shape[0] for A in self.down)


def lora_init(params: MlpParams, rank: int, rng: np.random.Generator) -> LoraAdapter:
    """Fresh adapter on every layer. up = 0, so the adapter starts as an
    identity delta; per-layer rank is clamped below min(in, out)."""
    idx, down, up = [], [], []
    for i, W in enumerate(params.weights):
        out_d, in_d = W.shape
        r = min(rank, min(in_d, out_d) - 1)
        if r < 1:
            continue
        limit = 1.0 / np.sqrt(in_d)
        idx.append(i)
        down.append(rng.uniform(-limit, limit, size=(r, in_d)))
        up.append(np.zeros((out_d, r)))
    return LoraAdapter(tuple(idx), tuple(down), tuple(up))


def _check_adapter(params: MlpParams, adapter: LoraAdapter) -> None:
    for i, A, B in zip(adapter.layer_indices, adapter.down, adapter.up):
        if i >= params.n_layers:
            raise ShapeMismatchError(f"adapter targets missing layer {i}")
        W = params.weights[i]
        if A.shape[1] != W.shape[1] or B.shape[0] != W.shape[0]:
            raise ShapeMismatchError(f"adapter {i} shape does not match layer")


def effective_weights(params: MlpParams, adapter: LoraAdapter | None) -> MlpParams:
    """Merge the adapter into dense weights (testing/inspection helper)."""
    if adapter is None:
        return params
    _check_adapter(params, adapter)
    ws = list(params.weights)
    for i, A, B in zip(adapter.layer_indices, adapter.down, adapter.up):
        ws[i] = ws[i] + B @ A
    return replace(params, weights=tuple(ws))


def lora_forward(params: MlpParams, adapter: LoraAdapter, x) -> np.ndarray:
    """Forward with additive low-rank deltas on the adapted layers."""
    _check_adapter(params, adapter)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.input_dim:
        raise ShapeMismatchError("input dim mismatch")
    adapted = dict(zip(adapter.layer_indices, range(len(adapter.down))))
    act = _ACT_FNS[params.hidden_activation]
    h = x
    last = params.n_layers - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        y = h @ W.T + b
        if i in adapted:
            k = adapted[i]
            y = y + (h @ adapter.down[k].T) @ adapter.up[k].T
        h = act(y) if i < last else y
    return h


def lora_leaves(tp: ad.Tape, adapter: LoraAdapter):
    """Adapter matrices as trainable tape leaves."""
    return [tp.leaf(A) for A in adapter.down], [tp.leaf(B) for B in adapter.up]


# --- Adam --------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    step: int
    lr: float
    beta1: float
    beta2: float
    eps: float


def adam_init(arrays, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    return AdamState(
        m=tuple(np.zeros_like(a) for a in arrays),
        v=tuple(np.zeros_like(a) for a in arrays),
        step=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(arrays, grads, state: AdamState, names=None):
    """One bias-corrected Adam descent step; returns (new arrays, new state).

    Callers maximizing a reward negate their gradients first.
    """
    arrays = list(arrays)
    grads = list(grads)
    if len(arrays) != len(grads) or len(arrays) != len(state.m):
        raise ShapeMismatchError("adam_step: array/grad/state length mismatch")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            name = names[i] if names else f"array {i}"
            raise NonFiniteGradError(f"non-finite gradient for {name}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_arrays, new_m, new_v = [], [], []
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_arrays.append(a - update)
        new_m.append(m)
        new_v.append(v)
    return new_arrays, replace(state, m=tuple(new_m), v=tuple(new_v), step=t)


# --- spectral norm ------------------------------------------------------------

def power_iteration(W: np.ndarray, u0: np.ndarray | None = None, iters: int = 25):
    """Largest singular value of W via power iteration on W^T W.

    Returns (sigma, u, v) with W v ~= sigma u. Pass the previous `u` back in
    across training steps to warm-start. A zero matrix yields sigma = 0.
    """
    W = np.asarray(W, dtype=np.float64)
    out_d = W.shape[0]
    u = np.full(out_d, 1.0 / np.sqrt(out_d)) if u0 is None else np.asarray(u0, float)
    nrm = np.linalg.norm(u)
    if nrm == 0.0:
        u = np.full(out_d, 1.0 / np.sqrt(out_d))
    else:
        u = u / nrm
    v = None
    for _ in range(iters):
        v = W.T @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:
            return 0.0, u, np.zeros(W.shape[1])
        v = v / nv
        u = W @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0, np.full(out_d, 1.0 / np.sqrt(out_d)), v
        u = u / nu
    sigma = float(u @ (W @ v))
    return sigma, u, v


def spectral_norm(W: np.ndarray, iters: int = 25) -> float:
    sigma, _, _ = power_iteration(W, None, iters)
    return sigma


def spectral_penalty_grad(sigma: float, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Gradient of sigma(W)^2: 2 sigma u v^T (top singular pair)."""
    return 2.0 * sigma * np.outer(u, v)


# --- wire format ---------------------------------------------------------------
#
# ParamBlob layout (little-endian, all floats f64; full layout in docs/formats.md):
#   magic     4s   = b"ADSM"
#   version   u16  = 1
#   kind      u8     1=policy  2=lora  3=residual-ensemble
#   sections  u8     1 for policy/lora, member count for ensembles
#   sections...      (MLP or adapter sections, see below)
#   checksum  u32  = crc32 over every preceding byte
#
# MLP section:    u16 layer count; per layer: u8 activation (0 linear, 1 tanh),
#                 u32 out, u32 in, W data (out*in f64, row-major), b data (out f64).
# Adapter section: u16 entry count; per entry: u32 layer index, u32 rank,
#                 u32 out, u32 in, down data (rank*in f64), up data (out*rank f64).

class BlobError(Exception):
    pass


class BlobMagicError(BlobError):
    pass


class BlobVersionError(BlobError):
    pass


class BlobShapeError(BlobError):
    pass


class BlobChecksumError(BlobError):
    pass


_MAGIC = b"ADSM"
_VERSION = 1
_KIND_POLICY, _KIND_LORA, _KIND_ENSEMBLE = 1, 2, 3
_KIND_NAMES = {_KIND_POLICY: "policy", _KIND_LORA: "lora", _KIND_ENSEMBLE: "residual-ensemble"}
_ACT_TAGS = {"linear": 0, "tanh": 1}
_TAG_ACTS = {v: k for k, v in _ACT_TAGS.items()}
_MAX_DIM = 1 << 24


def _pack_mlp(params: MlpParams) -> bytes:
    out = [struct.pack("<H", params.n_layers)]
    last = params.n_layers - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        act = _ACT_TAGS[params.hidden_activation] if i < last else 0
        o, n = W.shape
        if o >= _MAX_DIM or n >= _MAX_DIM:
            raise BlobShapeError(f"layer {i} dims {W.shape} exceed format limit")
        out.append(struct.pack("<BII", act, o, n))
        out.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise BlobShapeError("blob truncated: section exceeds payload")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, shape) -> np.ndarray:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = self.take(count * 8)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def _unpack_mlp(r: _Reader) -> MlpParams:
    (n_layers,) = r.unpack("<H")
    weights, biases, acts = [], [], []
    for _ in range(n_layers):
        act, o, n = r.unpack("<BII")
        if act not in _TAG_ACTS:
            raise BlobShapeError(f"unknown activation tag {act}")
        if o >= _MAX_DIM or n >= _MAX_DIM:
            raise BlobShapeError(f"layer dims ({o},{n}) exceed format limit")
        weights.append(r.floats((o, n)))
        biases.append(r.floats((o,)))
        acts.append(act)
    if n_layers == 0:
        return MlpParams((), (), "tanh")
    if acts[-1] != 0:
        raise BlobShapeError("output layer must be linear")
    hidden = set(acts[:-1]) or {_ACT_TAGS["tanh"]}
    if len(hidden) != 1:
        raise BlobShapeError("mixed hidden activation tags")
    return MlpParams(tuple(weights), tuple(biases), _TAG_ACTS[hidden.pop()])


def _pack_adapter(adapter: LoraAdapter) -> bytes:
    out = [struct.pack("<H", len(adapter.layer_indices))]
    for i, A, B in zip(adapter.layer_indices, adapter.down, adapter.up):
        r, n = A.shape
        o = B.shape[0]
        if o >= _MAX_DIM or n >= _MAX_DIM or r >= _MAX_DIM:
            raise BlobShapeError("adapter dims exceed format limit")
        out.append(struct.pack("<IIII", i, r, o, n))
        out.append(np.ascontiguousarray(A, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(B, dtype="<f8").tobytes())
    return b"".join(out)


def _unpack_adapter(r: _Reader) -> LoraAdapter:
    (n_entries,) = r.unpack("<H")
    idx, down, up = [], [], []
    for _ in range(n_entries):
        i, rk, o, n = r.unpack("<IIII")
        if o >= _MAX_DIM or n >= _MAX_DIM or rk >= _MAX_DIM:
            raise BlobShapeError("adapter dims exceed format limit")
        idx.append(int(i))
        down.append(r.floats((rk, n)))
        up.append(r.floats((o, rk)))
    return LoraAdapter(tuple(idx), tuple(down), tuple(up))


def serialize_params(payload) -> bytes:
    """Serialize MlpParams / LoraAdapter / sequence of MlpParams to a blob."""
    if isinstance(payload, MlpParams):
        kind, sections = _KIND_POLICY, [_pack_mlp(payload)]
    elif isinstance(payload, LoraAdapter):
        kind, sections = _KIND_LORA, [_pack_adapter(payload)]
    elif isinstance(payload, (tuple, list)) and all(isinstance(p, MlpParams) for p in payload):
        if len(payload) > 255:
            raise BlobShapeError("too many ensemble members")
        kind, sections = _KIND_ENSEMBLE, [_pack_mlp(p) for p in payload]
    else:
        raise TypeError(f"cannot serialize {type(payload).__name__}")
    body = struct.pack("<4sHBB", _MAGIC, _VERSION, kind, len(sections)) + b"".join(sections)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def deserialize_params(blob: bytes):
    """Inverse of serialize_params; bit-exact. Raises a distinct BlobError
    subclass for bad magic, unsupported version, malformed shapes, and
    checksum mismatch."""
    if len(blob) < 12:
        raise BlobShapeError("blob shorter than minimal header")
    magic, version, kind, n_sections = struct.unpack("<4sHBB", blob[:8])
    if magic != _MAGIC:
        raise BlobMagicError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise BlobVersionError(f"unsupported version {version}")
    stored = struct.unpack("<I", blob[-4:])[0]
    actual = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored != actual:
        raise BlobChecksumError(f"checksum mismatch: stored {stored:#x}, computed {actual:#x}")
    if kind not in _KIND_NAMES:
        raise BlobShapeError(f"unknown payload kind {kind}")
    r = _Reader(blob[:-4])
    r.pos = 8
    if kind == _KIND_POLICY:
        if n_sections != 1:
            raise BlobShapeError("policy blob must have one section")
        out = _unpack_mlp(r)
    elif kind == _KIND_LORA:
        if n_sections != 1:
            raise BlobShapeError("lora blob must have one section")
        out = _unpack_adapter(r)
    else:
        out = tuple(_unpack_mlp(r) for _ in range(n_sections))
    if r.pos != len(r.buf):
        raise BlobShapeError("trailing bytes after payload")
    return out


def blob_kind(blob: bytes) -> str:
    if len(blob) < 8:
        raise BlobShapeError("blob shorter than minimal header")
    magic, version, kind, _ = struct.unpack("<4sHBB", blob[:8])
    if magic != _MAGIC:
        raise BlobMagicError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise BlobVersionError(f"unsupported version {version}")
    if kind not in _KIND_NAMES:
        raise BlobShapeError(f"unknown payload kind {kind}")
    return _KIND_NAMES[kind]
