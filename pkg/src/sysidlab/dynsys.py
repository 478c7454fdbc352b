"""Discrete-time system models: state-space LTI, IIR difference equations and
the Wiener-Hammerstein cascade, together with named benchmark presets.

All systems are immutable. Stepping functions take and return caller-owned
state, so independent simulations never share anything.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

__all__ = [
    "DimensionError",
    "SimulationError",
    "LtiSystem",
    "IirFilter",
    "IirState",
    "DiodeSaturation",
    "WienerHammerstein",
    "FEEDBACK_CONVENTIONS",
    "PRESETS",
    "lti_step",
    "iir_step",
    "saturate",
    "simulate",
    "preset",
]


class DimensionError(ValueError):
    """Raised when an operand's shape does not match the system."""

    def __init__(self, operand: str, expected, got):
        self.operand = operand
        self.expected = expected
        self.got = got
        super().__init__(f"{operand}: expected shape {expected}, got {got}")


class SimulationError(ArithmeticError):
    """Raised when a simulation produces or receives a non-finite value."""

    def __init__(self, message: str, index: int | None = None):
        self.index = index
        super().__init__(message)


def _as_matrix(name: str, value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(name, "2-D", arr.shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LtiSystem:
    """x[n+1] = A x[n] + B u[n],  y[n] = C x[n] + D u[n]."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        A = _as_matrix("A", self.A)
        B = _as_matrix("B", self.B)
        C = _as_matrix("C", self.C)
        D = _as_matrix("D", self.D)
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionError("A", "(N, N)", A.shape)
        if B.shape[0] != n:
            raise DimensionError("B", f"({n}, M)", B.shape)
        if C.shape[1] != n:
            raise DimensionError("C", f"(P, {n})", C.shape)
        if D.shape != (C.shape[0], B.shape[1]):
            raise DimensionError("D", (C.shape[0], B.shape[1]), D.shape)
        for name, arr in zip("ABCD", (A, B, C, D)):
            object.__setattr__(self, name, arr)

    @property
    def N(self) -> int:
        return self.A.shape[0]

    @property
    def M(self) -> int:
        return self.B.shape[1]

    @property
    def P(self) -> int:
        return self.C.shape[0]

    def zero_state(self) -> np.ndarray:
        return np.zeros(self.N)


# Sign applied to each printed feedback coefficient b_j (j = 1..K):
#   printed      y += +b_j y[n-j]           (the recursion exactly as written)
#   subtractive  y += -b_j y[n-j]           (textbook 1 + sum b_j z^-j denominator)
#   alternating  y += (-1)**(j+1) b_j y[n-j] (b_j read as low-pass denominator magnitudes)
FEEDBACK_CONVENTIONS = ("printed", "subtractive", "alternating")


def _feedback_signs(convention: str, order: int) -> np.ndarray:
    if convention == "printed":
        return np.ones(order)
    if convention == "subtractive":
        return -np.ones(order)
    if convention == "alternating":
        return np.array([1.0 if j % 2 == 1 else -1.0 for j in range(1, order + 1)])
    raise ValueError(
        f"unknown feedback convention {convention!r}; valid: {', '.join(FEEDBACK_CONVENTIONS)}"
    )


@dataclass(frozen=True, eq=False)
class IirFilter:
    """y[N] = sum_i ff[i] u[N-i] + sum_j s_j fb[j-1] y[N-j].

    ``ff`` holds a_0..a_K and ``fb`` holds b_1..b_K as printed; ``convention``
    picks the signs s_j (see ``FEEDBACK_CONVENTIONS``).
    """

    ff: np.ndarray
    fb: np.ndarray
    convention: str = "printed"

    def __post_init__(self):
        ff = np.array(self.ff, dtype=np.float64).ravel()
        fb = np.array(self.fb, dtype=np.float64).ravel()
        if fb.size < 1:
            raise DimensionError("fb", "(K,) with K >= 1", fb.shape)
        if ff.size != fb.size + 1:
            raise DimensionError("ff", (fb.size + 1,), ff.shape)
        _feedback_signs(self.convention, fb.size)
        ff.setflags(write=False)
        fb.setflags(write=False)
        object.__setattr__(self, "ff", ff)
        object.__setattr__(self, "fb", fb)

    @property
    def order(self) -> int:
        return self.fb.size

    @property
    def effective_fb(self) -> np.ndarray:
        """Feedback coefficients with the convention's signs applied."""
        return _feedback_signs(self.convention, self.order) * self.fb

    def with_convention(self, convention: str) -> "IirFilter":
        return IirFilter(self.ff, self.fb, convention)

    def zero_state(self) -> "IirState":
        return IirState(np.zeros(self.order), np.zeros(self.order))


@dataclass
class IirState:
    """Rolling histories; index 0 is the most recent value."""

    u_hist: np.ndarray
    y_hist: np.ndarray


@dataclass(frozen=True)
class DiodeSaturation:
    """Piecewise-linear diode: slope 10/11 below zero, identity up to the
    knee at 3/10, flat above it."""

    lower_slope: float = 10.0 / 11.0
    knee: float = 3.0 / 10.0


@dataclass(frozen=True, eq=False)
class WienerHammerstein:
    front: IirFilter
    back: IirFilter
    nonlin: DiodeSaturation = field(default_factory=DiodeSaturation)

    def zero_state(self) -> tuple[IirState, IirState]:
        return self.front.zero_state(), self.back.zero_state()


System = Union[LtiSystem, IirFilter, WienerHammerstein]


def lti_step(sys: LtiSystem, state, u) -> tuple[np.ndarray, np.ndarray]:
    """One state-space step. Returns ``(next_state, y)``."""
    x = np.asarray(state, dtype=np.float64).reshape(-1)
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    if x.size != sys.N:
        raise DimensionError("state", (sys.N,), x.shape)
    if u.size != sys.M:
        raise DimensionError("u", (sys.M,), u.shape)
    return sys.A @ x + sys.B @ u, sys.C @ x + sys.D @ u


def iir_step(filt: IirFilter, state: IirState, u: float) -> float:
    """Advance ``state`` in place by one sample and return the output."""
    u = float(u)
    if not math.isfinite(u):
        raise SimulationError(f"non-finite filter input {u!r}")
    K = filt.order
    if state.u_hist.shape != (K,) or state.y_hist.shape != (K,):
        raise DimensionError("state", (K,), (state.u_hist.shape, state.y_hist.shape))
    fb = filt.effective_fb
    y = filt.ff[0] * u
    for i in range(K):
        y += filt.ff[i + 1] * state.u_hist[i]
    for j in range(K):
        y += fb[j] * state.y_hist[j]
    state.u_hist[1:] = state.u_hist[:-1]
    state.u_hist[0] = u
    state.y_hist[1:] = state.y_hist[:-1]
    state.y_hist[0] = y
    return float(y)


def saturate(nl: DiodeSaturation, x: float) -> float:
    if x < 0.0:
        return nl.lower_slope * x
    if x <= nl.knee:
        return float(x)
    return nl.knee


def _run_iir(filt: IirFilter, u: np.ndarray) -> np.ndarray:
    # Plain loop over python floats; same arithmetic order as iir_step.
    K = filt.order
    ff = filt.ff.tolist()
    fb = filt.effective_fb.tolist()
    uh = [0.0] * K
    yh = [0.0] * K
    out = np.empty(u.size)
    for n, un in enumerate(u.tolist()):
        y = ff[0] * un
        for i in range(K):
            y += ff[i + 1] * uh[i]
        for j in range(K):
            y += fb[j] * yh[j]
        uh.insert(0, un)
        uh.pop()
        yh.insert(0, y)
        yh.pop()
        out[n] = y
    return out


def _run_lti(sys: LtiSystem, u: np.ndarray) -> np.ndarray:
    if u.ndim == 1:
        u = u.reshape(-1, 1)
    if u.shape[1] != sys.M:
        raise DimensionError("inputs", f"(T, {sys.M})", u.shape)
    x = sys.zero_state()
    ys = np.empty((u.shape[0], sys.P))
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(u.shape[0]):
            x, ys[n] = sys.A @ x + sys.B @ u[n], sys.C @ x + sys.D @ u[n]
    return ys[:, 0] if sys.P == 1 else ys


def _first_nonfinite(arr: np.ndarray) -> int | None:
    bad = ~np.isfinite(arr.reshape(arr.shape[0], -1)).all(axis=1)
    return int(np.argmax(bad)) if bad.any() else None


def simulate(system: System, inputs: Sequence[float]) -> np.ndarray:
    """Simulate from zero initial state/histories. The input is not modified.

    Raises ``SimulationError`` with the first non-finite time index if the
    system blows up.
    """
    u = np.array(inputs, dtype=np.float64)
    if u.shape[0] < 1:
        raise ValueError("need at least one input sample")
    idx = _first_nonfinite(u)
    if idx is not None:
        raise SimulationError(f"non-finite input at index {idx}", idx)
    with np.errstate(over="ignore", invalid="ignore"):
        if isinstance(system, LtiSystem):
            y = _run_lti(system, u)
        elif isinstance(system, IirFilter):
            y = _run_iir(system, u.ravel())
        elif isinstance(system, WienerHammerstein):
            v = _run_iir(system.front, u.ravel())
            nl = system.nonlin
            w = np.where(v < 0.0, nl.lower_slope * v, np.minimum(v, nl.knee))
            # keep NaN visible to the blowup check below
            w[~np.isfinite(v)] = np.nan
            y = _run_iir(system.back, w)
        else:
            raise TypeError(f"cannot simulate {type(system).__name__}")
    idx = _first_nonfinite(y)
    if idx is not None:
        raise SimulationError(
            f"simulation produced a non-finite output at time index {idx} "
            "(unstable configuration?)",
            idx,
        )
    return y


# --- presets -----------------------------------------------------------------

CHEBY3_FRONT = ([0.0083, 0.0248, 0.0248, 0.0083], [2.2800, 1.9766, 0.6307])
CHEBY3_BACK = ([0.7452, 1.3902, 1.3902, 0.7452], [-1.4250, -1.2920, -0.5538])
CHEBY2_SOURCE = ([0.0635, 0.1270, 0.0635], [1.2129, -0.6646])

PRESETS = ("lti3_source", "lti2_target", "wh_benchmark", "cheby2_source")


def preset(
    name: str,
    *,
    front_feedback: str = "printed",
    back_feedback: str = "printed",
) -> System:
    """Return one of the four benchmark systems.

    ``front_feedback``/``back_feedback`` choose the feedback sign convention
    of the IIR filters. ``cheby2_source`` uses ``front_feedback``. With the
    defaults the Wiener-Hammerstein front filter has a pole at |z| ~ 3.0 and
    any long simulation raises ``SimulationError``.
    """
    if name == "lti3_source":
        return LtiSystem(
            A=[[0.60, 0.00, 0.00], [0.70, 0.15, -0.80], [0.45, 0.80, 0.45]],
            B=[[1.60], [0.70], [0.50]],
            C=[[0.05, 0.10, 0.20]],
            D=[[0.01]],
        )
    if name == "lti2_target":
        return LtiSystem(
            A=[[0.20, -0.70], [0.70, 0.50]],
            B=[[1.00], [0.70]],
            C=[[0.10, 0.25]],
            D=[[0.15]],
        )
    if name == "wh_benchmark":
        return WienerHammerstein(
            front=IirFilter(*CHEBY3_FRONT, convention=front_feedback),
            back=IirFilter(*CHEBY3_BACK, convention=back_feedback),
        )
    if name == "cheby2_source":
        return IirFilter(*CHEBY2_SOURCE, convention=front_feedback)
    raise ValueError(f"unknown preset {name!r}; valid names: {', '.join(PRESETS)}")
