"""Numerical integration of learned vector fields.

Two solvers are provided: a fixed-step fourth-order Runge-Kutta scheme with
the 3/8 rule (nodes 0, 1/3, 2/3, 1; weights 1/8, 3/8, 3/8, 1/8) and an
adaptive Dormand-Prince 5(4) embedded pair. The fixed-step solver has a taped
variant whose backward hook gives exact reverse-mode gradients through the
step arithmetic; the adaptive solver is inference-only.

States may be a single vector ``(n,)`` or a batch ``(B, n)``. For batched
solves the time step may vary per row, which is what lets irregularly sampled
sequences integrate side by side with an autonomous field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ParamSet
from .numcore import Rng, uniform_init


class DivergenceError(RuntimeError):
    """A solver state became non-finite."""

    def __init__(self, step_index: int, message: str = ""):
        self.step_index = step_index
        super().__init__(message or f"non-finite state at step {step_index}")


class NonConvergenceError(RuntimeError):
    """Adaptive solver exhausted its step budget."""


class StiffnessError(RuntimeError):
    """Adaptive step size underflowed its floor; the problem looks stiff."""


@dataclass
class SolveSpan:
    """Integration interval. Fixed-step mode sets ``steps``; adaptive mode
    sets ``rtol``/``atol``/``max_steps``. ``t1 == t0`` is the identity map and
    ``t1 < t0`` integrates backward."""

    t0: float
    t1: float
    steps: int | None = None
    rtol: float | None = None
    atol: float | None = None
    max_steps: int | None = None

    @classmethod
    def fixed(cls, t0: float, t1: float, steps: int = 4) -> "SolveSpan":
        if steps < 1:
            raise ValueError("fixed-step span needs steps >= 1")
        return cls(t0=float(t0), t1=float(t1), steps=int(steps))

    @classmethod
    def adaptive(
        cls,
        t0: float,
        t1: float,
        rtol: float = 1e-6,
        atol: float = 1e-9,
        max_steps: int = 10_000,
    ) -> "SolveSpan":
        if rtol <= 0 or atol <= 0:
            raise ValueError("adaptive span needs rtol > 0 and atol > 0")
        return cls(t0=float(t0), t1=float(t1), rtol=rtol, atol=atol, max_steps=int(max_steps))

    @property
    def mode(self) -> str:
        return "fixed" if self.steps is not None else "adaptive"


@dataclass
class SolveTrace:
    """States visited by a solve, first entry the initial condition."""

    states: list  # list of (t, ndarray) pairs
    n_accepted: int = 0
    n_rejected: int = 0
    n_evals: int = 0

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1][1]

    @property
    def times(self) -> np.ndarray:
        return np.array([t for t, _ in self.states])


class MLPField:
    """Learned dynamics dh/dt = W2 tanh(W1 h + b1) + b2.

    With ``time_dependent`` set, t is appended as an extra input column;
    by default the field is autonomous and t is ignored.
    """

    def __init__(self, params: ParamSet, arity: int, hidden: int, time_dependent: bool = False):
        self.params = params
        self.arity = arity
        self.hidden = hidden
        self.time_dependent = time_dependent

    @classmethod
    def build(cls, rng: Rng, dim: int, hidden: int, time_dependent: bool = False) -> "MLPField":
        in_dim = dim + (1 if time_dependent else 0)
        ps = ParamSet("field")
        ps.add("w1", uniform_init(rng, hidden, in_dim))
        ps.add("b1", np.zeros(hidden))
        ps.add("w2", uniform_init(rng, dim, hidden))
        ps.add("b2", np.zeros(dim))
        return cls(ps, dim, hidden, time_dependent)

    def _with_time(self, h_value: np.ndarray, t) -> np.ndarray:
        tcol = np.broadcast_to(np.asarray(t, dtype=np.float64), (h_value.shape[0], 1))
        return np.concatenate([h_value, tcol], axis=1)

    def node_eval(self, h: Node, t) -> Node:
        if self.time_dependent:
            tcol = ad.leaf(np.broadcast_to(np.asarray(t, dtype=np.float64), (h.value.shape[0], 1)).copy())
            h = ad.concat_cols(h, tcol)
        hid = ad.tanh(ad.affine(h, self.params.node("w1"), self.params.node("b1")))
        return ad.affine(hid, self.params.node("w2"), self.params.node("b2"))

    def np_eval(self, h: np.ndarray, t) -> np.ndarray:
        x = self._with_time(h, t) if self.time_dependent else h
        hid = np.tanh(x @ self.params.array("w1").T + self.params.array("b1"))
        return hid @ self.params.array("w2").T + self.params.array("b2")


class LinearField:
    """dh/dt = A h with a trainable matrix A; exact linear test dynamics."""

    def __init__(self, a: np.ndarray):
        a = np.asarray(a, dtype=np.float64)
        self.params = ParamSet("field")
        self.params.add("a", a)
        self.arity = a.shape[0]
        self.time_dependent = False

    def node_eval(self, h: Node, t) -> Node:
        return ad.matmul_t(h, self.params.node("a"))

    def np_eval(self, h: np.ndarray, t) -> np.ndarray:
        return h @ self.params.array("a").T


class ZeroField:
    """dh/dt = 0; trace stays at the initial condition."""

    def __init__(self, arity: int):
        self.params = ParamSet("field")
        self.arity = arity
        self.time_dependent = False

    def node_eval(self, h: Node, t) -> Node:
        return ad.scale(h, 0.0)

    def np_eval(self, h: np.ndarray, t) -> np.ndarray:
        return np.zeros_like(h)


def _as_batch(h0) -> tuple[np.ndarray, bool]:
    h0 = np.asarray(h0, dtype=np.float64)
    if h0.ndim == 1:
        return h0[None, :], True
    if h0.ndim == 2:
        return h0, False
    raise ValueError(f"state must be 1-D or 2-D, got shape {h0.shape}")


def rk4_38_step_np(f, h: np.ndarray, t, dt) -> np.ndarray:
    """One 3/8-rule step on a (B, n) state; t, dt scalar or (B, 1)."""
    k1 = f.np_eval(h, t)
    k2 = f.np_eval(h + (dt / 3.0) * k1, t + dt / 3.0)
    k3 = f.np_eval(h + dt * (k2 - k1 / 3.0), t + 2.0 * dt / 3.0)
    k4 = f.np_eval(h + dt * (k1 - k2 + k3), t + dt)
    return h + (dt / 8.0) * (k1 + 3.0 * k2 + 3.0 * k3 + k4)


def rk4_38_step_node(f, h: Node, t, dt) -> Node:
    """Taped counterpart of :func:`rk4_38_step_np`."""
    k1 = f.node_eval(h, t)
    y2 = ad.add_scaled(h, k1, dt / 3.0)
    k2 = f.node_eval(y2, t + dt / 3.0)
    y3 = ad.add_scaled(ad.add_scaled(h, k1, -dt / 3.0), k2, dt)
    k3 = f.node_eval(y3, t + 2.0 * dt / 3.0)
    y4 = ad.add_scaled(ad.add_scaled(ad.add_scaled(h, k1, dt), k2, -dt), k3, dt)
    k4 = f.node_eval(y4, t + dt)
    out = ad.add_scaled(h, k1, dt / 8.0)
    out = ad.add_scaled(out, k2, 3.0 * dt / 8.0)
    out = ad.add_scaled(out, k3, 3.0 * dt / 8.0)
    return ad.add_scaled(out, k4, dt / 8.0)


def rk4_chain_node(f, h: Node, t, dt, steps: int) -> Node:
    """``steps`` uniform taped 3/8 steps; ``t``/``dt`` scalar or (B, 1) consts."""
    sub = dt / steps
    for j in range(steps):
        h = rk4_38_step_node(f, h, t + j * sub, sub)
    return h


def rk4_38_solve(f, h0, span: SolveSpan) -> SolveTrace:
    """Fixed-step 3/8-rule solve recording every macro step."""
    if span.mode != "fixed":
        raise ValueError("rk4_38_solve requires a fixed-step span")
    h, was_vec = _as_batch(h0)
    if h.shape[1] != f.arity:
        raise ValueError(f"state dim {h.shape[1]} does not match field arity {f.arity}")
    dt = (span.t1 - span.t0) / span.steps

    def record(state):
        return state[0] if was_vec else state.copy()

    states = [(span.t0, record(h))]
    for j in range(span.steps):
        h = rk4_38_step_np(f, h, span.t0 + j * dt, dt)
        if not np.all(np.isfinite(h)):
            raise DivergenceError(j)
        states.append((span.t0 + (j + 1) * dt, record(h)))
    return SolveTrace(states=states, n_accepted=span.steps, n_evals=4 * span.steps)


@dataclass
class BackwardHook:
    """Maps an output-state cotangent to the cotangent on h0 and gradient
    contributions on the field parameters."""

    output_node: Node
    input_node: Node
    field: object
    squeeze: bool

    def __call__(self, cotangent) -> tuple[np.ndarray, dict]:
        g = np.asarray(cotangent, dtype=np.float64)
        if self.squeeze:
            g = g[None, :]
        grads = ad.backward([(self.output_node, g)])
        d_h0 = grads.get(self.input_node)
        if d_h0 is None:
            d_h0 = np.zeros_like(self.input_node.value)
        if self.squeeze:
            d_h0 = d_h0[0]
        param_grads = {}
        for name, node in self.field.params.items():
            pg = grads.get(node)
            param_grads[name] = np.zeros_like(node.value) if pg is None else pg
        return d_h0, param_grads


def solve_with_tape(f, h0, span: SolveSpan) -> tuple[SolveTrace, BackwardHook]:
    """Fixed-step solve recording the step arithmetic for reverse mode.

    Training always uses this path; the adaptive solver has no tape.
    """
    if span.mode != "fixed":
        raise ValueError("solve_with_tape requires a fixed-step span")
    h_arr, was_vec = _as_batch(h0)
    if h_arr.shape[1] != f.arity:
        raise ValueError(f"state dim {h_arr.shape[1]} does not match field arity {f.arity}")
    dt = (span.t1 - span.t0) / span.steps

    def record(state):
        return state[0] if was_vec else state.copy()

    h_in = ad.leaf(h_arr)
    h = h_in
    states = [(span.t0, record(h.value))]
    for j in range(span.steps):
        h = rk4_38_step_node(f, h, span.t0 + j * dt, dt)
        if not np.all(np.isfinite(h.value)):
            raise DivergenceError(j)
        states.append((span.t0 + (j + 1) * dt, record(h.value)))
    trace = SolveTrace(states=states, n_accepted=span.steps, n_evals=4 * span.steps)
    return trace, BackwardHook(output_node=h, input_node=h_in, field=f, squeeze=was_vec)


# Dormand-Prince 5(4) tableau.
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# b5 - b4: coefficients of the embedded local error estimate
_DP_E = np.array(
    [71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40]
)

_SAFETY = 0.9
_GROWTH = 5.0
_SHRINK = 0.2
_STEP_FLOOR_FRAC = 1e-10


def dopri5_solve(f, h0, span: SolveSpan) -> SolveTrace:
    """Adaptive Dormand-Prince 5(4) solve with FSAL stage reuse.

    Per-step error is measured component-wise against ``atol + rtol * |h|``;
    a step is accepted iff the normalized error is <= 1. The first trial
    attempts the whole remaining span, so exactly integrable dynamics (zero
    error estimate) finish in one accepted macro step; rejections then shrink
    the step by the standard controller with safety 0.9 and growth/shrink
    clamps 5x / 0.2x.
    """
    if span.mode != "adaptive":
        raise ValueError("dopri5_solve requires an adaptive span")
    y = np.asarray(h0, dtype=np.float64)
    if y.ndim != 1:
        raise ValueError("dopri5_solve integrates a single state vector")
    if y.shape[0] != f.arity:
        raise ValueError(f"state dim {y.shape[0]} does not match field arity {f.arity}")

    t, t_end = span.t0, span.t1
    states = [(t, y.copy())]
    if t_end == t:
        return SolveTrace(states=states)

    span_len = abs(t_end - t)
    floor = _STEP_FLOOR_FRAC * span_len
    h = t_end - t  # first trial: the full remaining span
    k = np.empty((7, y.shape[0]))
    k[0] = f.np_eval(y[None, :], t)[0]
    n_evals = 1
    n_accepted = 0
    n_rejected = 0
    trials = 0

    while True:
        remaining = t_end - t
        if remaining == 0.0 or abs(remaining) <= 1e-14 * span_len:
            break
        if abs(h) > abs(remaining):
            h = remaining
        if abs(h) < floor:
            raise StiffnessError(
                f"step size {abs(h):.3e} under floor {floor:.3e} at t={t:.6g}"
            )
        if trials >= span.max_steps:
            raise NonConvergenceError(
                f"no convergence after {span.max_steps} trial steps (t={t:.6g})"
            )
        trials += 1

        for i in range(1, 7):
            yi = y + h * (k[:i].T @ _DP_A[i])
            k[i] = f.np_eval(yi[None, :], t + _DP_C[i] * h)[0]
        n_evals += 6

        y5 = y + h * (k.T @ _DP_B5)
        err_vec = h * (k.T @ _DP_E)
        if not np.all(np.isfinite(y5)):
            err = np.inf
        else:
            scale = span.atol + span.rtol * np.maximum(np.abs(y), np.abs(y5))
            err = float(np.max(np.abs(err_vec) / scale))

        if err <= 1.0:
            t = t + h
            y = y5
            k[0] = k[6]  # FSAL: last stage is the first stage of the next step
            states.append((t, y.copy()))
            n_accepted += 1
            if err == 0.0:
                h = t_end - t if t_end != t else h
            else:
                h = h * min(_GROWTH, max(_SHRINK, _SAFETY * err ** -0.2))
        else:
            # rejected: y and t are unchanged so k[0] stays valid
            n_rejected += 1
            if np.isfinite(err):
                h = h * min(1.0, max(_SHRINK, _SAFETY * err ** -0.2))
            else:
                h = h * _SHRINK

    return SolveTrace(
        states=states, n_accepted=n_accepted, n_rejected=n_rejected, n_evals=n_evals
    )
