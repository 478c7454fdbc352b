"""Stacked-LSTM regressor written directly on numpy float64 arrays.

Architecture: 2-channel input -> LSTM1 -> LSTM2 -> LSTM3 -> Dense(1), with
one prediction per time step. Gate blocks inside each LSTM weight matrix are
stacked in the order (input, forget, candidate, output):

    z   = W x_t + U h_{t-1} + b
    i, f, o = logistic(z_i), logistic(z_f), logistic(z_o)
    g   = tanh(z_g)
    c_t = f * c_{t-1} + i * g
    h_t = o * tanh(c_t)
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "StaleCacheError",
    "CheckpointError",
    "LstmParams",
    "DenseParams",
    "Network",
    "AdamState",
    "ForwardCache",
    "init_network",
    "parameter_count",
    "lstm_cell_forward",
    "forward",
    "mse",
    "backward",
    "adam_step",
    "save_checkpoint",
    "load_checkpoint",
]

DEFAULT_SIZES = (16, 64, 128)
GATES = ("input", "forget", "candidate", "output")


class NonFiniteError(FloatingPointError):
    def __init__(self, message: str, layer: str | None = None, time: int | None = None):
        self.layer = layer
        self.time = time
        super().__init__(message)


class StaleCacheError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def logistic(x):
    return 0.5 * np.tanh(0.5 * x) + 0.5


@dataclass(eq=False)
class LstmParams:
    W: np.ndarray  # (4*units, in_dim)
    U: np.ndarray  # (4*units, units)
    b: np.ndarray  # (4*units,)

    @property
    def units(self) -> int:
        return self.U.shape[1]

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    def gate(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Views ``(W_g, U_g, b_g)`` of one gate's block."""
        k = GATES.index(name)
        s = slice(k * self.units, (k + 1) * self.units)
        return self.W[s], self.U[s], self.b[s]

    def tensors(self) -> list[np.ndarray]:
        return [self.W, self.U, self.b]


@dataclass(eq=False)
class DenseParams:
    W: np.ndarray  # (out_dim, in_dim)
    b: np.ndarray  # (out_dim,)

    def tensors(self) -> list[np.ndarray]:
        return [self.W, self.b]


@dataclass(eq=False)
class Network:
    lstm: list[LstmParams]
    dense: DenseParams
    version: int = field(default=0, compare=False)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(layer.units for layer in self.lstm)

    @property
    def in_dim(self) -> int:
        return self.lstm[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.dense.W.shape[0]

    @property
    def layer_names(self) -> list[str]:
        return [f"LSTM{i + 1}" for i in range(len(self.lstm))] + ["Dense"]

    def layers(self) -> list[LstmParams | DenseParams]:
        return [*self.lstm, self.dense]

    def layer(self, name: str) -> LstmParams | DenseParams:
        try:
            return self.layers()[self.layer_names.index(name)]
        except ValueError:
            raise KeyError(f"no layer named {name!r}; layers are {self.layer_names}") from None

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        """Every parameter tensor in declaration order."""
        for name, layer in zip(self.layer_names, self.layers()):
            tags = ("W", "U", "b") if isinstance(layer, LstmParams) else ("W", "b")
            for tag, arr in zip(tags, layer.tensors()):
                yield f"{name}.{tag}", arr

    def tensors(self) -> list[np.ndarray]:
        return [arr for _, arr in self.named_tensors()]

    def copy(self) -> "Network":
        return Network(
            [LstmParams(p.W.copy(), p.U.copy(), p.b.copy()) for p in self.lstm],
            DenseParams(self.dense.W.copy(), self.dense.b.copy()),
        )

    def zeros_like(self) -> "Network":
        net = self.copy()
        for arr in net.tensors():
            arr[...] = 0.0
        return net

    def n_params(self) -> int:
        return sum(arr.size for arr in self.tensors())

    def equals(self, other: "Network") -> bool:
        a, b = self.tensors(), other.tensors()
        return len(a) == len(b) and all(
            x.shape == y.shape and x.tobytes() == y.tobytes() for x, y in zip(a, b)
        )


def parameter_count(sizes: Sequence[int], in_dim: int = 2, out_dim: int = 1) -> int:
    total, prev = 0, in_dim
    for u in sizes:
        total += 4 * (u * prev + u * u + u)
        prev = u
    return total + out_dim * prev + out_dim


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_network(
    sizes: Sequence[int] = DEFAULT_SIZES, seed: int = 0, in_dim: int = 2, out_dim: int = 1
) -> Network:
    """Glorot-uniform weights per gate block, zero biases, forget bias 1."""
    if not sizes:
        raise ValueError("need at least one LSTM layer")
    rng = np.random.default_rng(seed)
    layers, prev = [], in_dim
    for u in sizes:
        W = np.vstack([_glorot(rng, u, prev) for _ in GATES])
        U = np.vstack([_glorot(rng, u, u) for _ in GATES])
        b = np.zeros(4 * u)
        b[u:2 * u] = 1.0
        layers.append(LstmParams(W, U, b))
        prev = u
    dense = DenseParams(_glorot(rng, out_dim, prev), np.zeros(out_dim))
    return Network(layers, dense)


# --- forward -------------------------------------------------------------------


def lstm_cell_forward(params: LstmParams, x_t, h_prev, c_prev):
    """Single LSTM step. Works on vectors or (batch, dim) arrays."""
    u = params.units
    z = x_t @ params.W.T + h_prev @ params.U.T + params.b
    i = logistic(z[..., :u])
    f = logistic(z[..., u:2 * u])
    g = np.tanh(z[..., 2 * u:3 * u])
    o = logistic(z[..., 3 * u:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    cache = dict(x=x_t, h_prev=h_prev, c_prev=c_prev, i=i, f=f, g=g, o=o, c=c, tanh_c=tc)
    return h, c, cache


@dataclass
class _LayerTrace:
    x: np.ndarray       # (B, T, in)
    gates: np.ndarray   # (B, T, 4u) activated i, f, g, o
    c: np.ndarray       # (B, T, u)
    tanh_c: np.ndarray  # (B, T, u)
    h: np.ndarray       # (B, T, u)
    h0: np.ndarray      # (B, u)
    c0: np.ndarray      # (B, u)


@dataclass
class ForwardCache:
    traces: list[_LayerTrace]
    top: np.ndarray     # (B, T, last units) input to the dense layer
    predictions: np.ndarray
    final_state: list[tuple[np.ndarray, np.ndarray]]
    net_id: int
    net_version: int


def _run_layer(p: LstmParams, x: np.ndarray, h: np.ndarray, c: np.ndarray, keep: bool):
    B, T, _ = x.shape
    u = p.units
    zx = x @ p.W.T + p.b
    UT = p.U.T
    hs = np.empty((B, T, u))
    if keep:
        gates = np.empty((B, T, 4 * u))
        cs = np.empty((B, T, u))
        tcs = np.empty((B, T, u))
    for t in range(T):
        z = zx[:, t] + h @ UT
        a = np.empty_like(z)
        a[:, :2 * u] = logistic(z[:, :2 * u])
        a[:, 2 * u:3 * u] = np.tanh(z[:, 2 * u:3 * u])
        a[:, 3 * u:] = logistic(z[:, 3 * u:])
        c = a[:, u:2 * u] * c + a[:, :u] * a[:, 2 * u:3 * u]
        tc = np.tanh(c)
        h = a[:, 3 * u:] * tc
        hs[:, t] = h
        if keep:
            gates[:, t] = a
            cs[:, t] = c
            tcs[:, t] = tc
    if keep:
        return hs, h, c, (gates, cs, tcs)
    return hs, h, c, None


def _check_finite(arr: np.ndarray, layer: str):
    if not np.isfinite(arr).all():
        bad = ~np.isfinite(arr).reshape(arr.shape[0], arr.shape[1], -1).all(axis=(0, 2))
        t = int(np.argmax(bad))
        raise NonFiniteError(f"non-finite activation in {layer} at time index {t}", layer, t)


def forward(net: Network, features: np.ndarray, state=None, keep_cache: bool = True):
    """Run the network over ``features`` of shape (batch, time, in_dim).

    ``state`` is an optional list of per-layer ``(h, c)`` to start from
    (zeros otherwise). Returns ``(predictions, cache)``; predictions have
    shape (batch, time, out_dim). ``cache`` is None when ``keep_cache`` is off,
    but its final state is still needed for windowed runs, so in that case a
    cache without traces is returned.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != net.in_dim:
        raise ValueError(f"features must be (batch, time, {net.in_dim}), got {x.shape}")
    B = x.shape[0]
    traces, final = [], []
    for k, (name, p) in enumerate(zip(net.layer_names, net.lstm)):
        if state is None:
            h0 = np.zeros((B, p.units))
            c0 = np.zeros((B, p.units))
        else:
            h0, c0 = state[k]
        hs, hT, cT, extra = _run_layer(p, x, h0, c0, keep_cache)
        _check_finite(hs, name)
        if keep_cache:
            traces.append(_LayerTrace(x, extra[0], extra[1], extra[2], hs, h0, c0))
        final.append((hT, cT))
        x = hs
    pred = x @ net.dense.W.T + net.dense.b
    _check_finite(pred, "Dense")
    cache = ForwardCache(traces, x if keep_cache else None, pred, final, id(net), net.version)
    return pred, cache


def mse(predictions, labels) -> float:
    """Mean squared error over every batch/time/channel position."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: predictions {p.shape} vs labels {y.shape}")
    return float(np.mean((p - y) ** 2))


# --- backward ------------------------------------------------------------------


def _layer_backward(p: LstmParams, tr: _LayerTrace, dH: np.ndarray, need_params: bool, need_input: bool):
    B, T, u = dH.shape
    g4 = tr.gates
    dZ = np.empty((B, T, 4 * u))
    dh_next = np.zeros((B, u))
    dc_next = np.zeros((B, u))
    U = p.U
    for t in range(T - 1, -1, -1):
        a = g4[:, t]
        i, f, g, o = a[:, :u], a[:, u:2 * u], a[:, 2 * u:3 * u], a[:, 3 * u:]
        tc = tr.tanh_c[:, t]
        c_prev = tr.c[:, t - 1] if t > 0 else tr.c0
        dh = dH[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = dZ[:, t]
        dz[:, :u] = dc * g * i * (1.0 - i)
        dz[:, u:2 * u] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * u:3 * u] = dc * i * (1.0 - g * g)
        dz[:, 3 * u:] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = dz @ U
    grads = None
    if need_params:
        h_prev = np.concatenate([tr.h0[:, None, :], tr.h[:, :-1]], axis=1)
        flat = dZ.reshape(-1, 4 * u)
        grads = LstmParams(
            flat.T @ tr.x.reshape(-1, tr.x.shape[2]),
            flat.T @ h_prev.reshape(-1, u),
            flat.sum(axis=0),
        )
    dX = dZ @ p.W if need_input else None
    return grads, dX


def backward(net: Network, cache: ForwardCache, labels, trainable: Sequence[bool] | None = None) -> Network:
    """Gradients of ``mse(predictions, labels)`` for every parameter.

    Gradients are exact for the window that was run forward: the incoming
    ``(h, c)`` state, if any, is treated as a constant. ``trainable`` (one
    flag per layer) lets frozen layers skip parameter-gradient work; their
    entries in the result are zero.
    """
    if cache.net_id != id(net) or cache.net_version != net.version:
        raise StaleCacheError("forward cache does not match the network's current parameters")
    if cache.top is None:
        raise StaleCacheError("forward cache was created with keep_cache=False")
    y = np.asarray(labels, dtype=np.float64)
    pred = cache.predictions
    if y.shape != pred.shape:
        raise ValueError(f"labels shape {y.shape} does not match predictions {pred.shape}")
    n_layers = len(net.lstm) + 1
    if trainable is None:
        trainable = [True] * n_layers
    if len(trainable) != n_layers:
        raise ValueError(f"need {n_layers} trainable flags, got {len(trainable)}")
    grads = net.zeros_like()
    dpred = (2.0 / pred.size) * (pred - y)
    top = cache.top
    if trainable[-1]:
        grads.dense.W[...] = dpred.reshape(-1, pred.shape[2]).T @ top.reshape(-1, top.shape[2])
        grads.dense.b[...] = dpred.reshape(-1, pred.shape[2]).sum(axis=0)
    trainable_lstm = [k for k in range(len(net.lstm)) if trainable[k]]
    if not trainable_lstm:
        return grads
    lowest = min(trainable_lstm)
    dH = dpred @ net.dense.W
    for k in range(len(net.lstm) - 1, lowest - 1, -1):
        g, dH = _layer_backward(net.lstm[k], cache.traces[k], dH, trainable[k], k > lowest)
        if g is not None:
            for dst, src in zip(grads.lstm[k].tensors(), g.tensors()):
                dst[...] = src
    return grads


# --- optimizer -----------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, net: Network, **hyper) -> "AdamState":
        ts = net.tensors()
        return cls([np.zeros_like(a) for a in ts], [np.zeros_like(a) for a in ts], **hyper)


def _tensor_layer_index(net: Network) -> list[int]:
    out = []
    for k, layer in enumerate(net.layers()):
        out.extend([k] * len(layer.tensors()))
    return out


def adam_step(net: Network, grads: Network, state: AdamState, trainable: Sequence[bool] | None = None):
    """In-place Adam update of ``net``; layers flagged False are untouched."""
    params, gs = net.tensors(), grads.tensors()
    if len(params) != len(gs) or len(state.m) != len(params):
        raise ValueError("gradient/optimizer structure does not mirror the network")
    for p, g, m in zip(params, gs, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
    owner = _tensor_layer_index(net)
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for k, (p, g, m, v) in enumerate(zip(params, gs, state.m, state.v)):
        if trainable is not None and not trainable[owner[k]]:
            continue
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    net.version += 1
    return net, state


# --- checkpoint format -----------------------------------------------------------
#
#   4 bytes "SIDM" | u16 LE version | u32 LE header length L | L bytes JSON
#   header | every tensor of Network.named_tensors() as float64 LE, in order.

CKPT_MAGIC = b"SIDM"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHI")


def save_checkpoint(net: Network, path, **provenance) -> None:
    header = {
        "sizes": list(net.sizes),
        "in_dim": net.in_dim,
        "out_dim": net.out_dim,
        "tensors": [[name, list(arr.shape)] for name, arr in net.named_tensors()],
        **provenance,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(blob)))
        fh.write(blob)
        for arr in net.tensors():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[Network, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise CheckpointError(f"truncated checkpoint header at byte offset {len(raw)}")
    magic, version, hlen = _CKPT_HEADER.unpack_from(raw, 0)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"expected magic {CKPT_MAGIC!r} at byte offset 0, found {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    off = _CKPT_HEADER.size
    try:
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
        net = init_network(header["sizes"], 0, header["in_dim"], header["out_dim"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint header at byte offset {off}: {exc}") from exc
    off += hlen
    need = 8 * net.n_params()
    if len(raw) != off + need:
        raise CheckpointError(
            f"expected {need} bytes of parameters after header at byte offset {off}, found {len(raw) - off}"
        )
    for arr in net.tensors():
        arr[...] = np.frombuffer(raw, dtype="<f8", count=arr.size, offset=off).reshape(arr.shape)
        off += 8 * arr.size
    return net, header
