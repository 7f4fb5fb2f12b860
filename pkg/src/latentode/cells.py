"""Recurrent cells and continuous-time encoders.

The discrete cells follow the classic update rules: the RNN cell applies one
activation to ``w_feedback h + w_input x + b``; the LSTM cell computes input,
forget and output gates plus a tanh candidate, then
``C = F * C_prev + I * Ctilde`` and ``h = O * tanh(C)``.

The continuous-time encoders evolve the hidden state under a learned vector
field between observations and apply the cell at each observation. In the
LSTM variant only ``h`` is integrated; ``C`` passes between cells untouched,
and the gates read the integrated state ``h'`` rather than the previous
discrete state. Processing can run in reverse time, which is how the
recognition network of the latent model produces its initial summary.

Forward passes are recorded on an autodiff tape so ``cell_backward`` can
return exact gradients for any scalar function of the outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ParamSet
from .numcore import ACTIVATIONS, Rng, ShapeError, sigmoid, tanh_act, uniform_init
from .odesolve import rk4_chain_node


@dataclass
class TimedSequence:
    """Ordered observations (x_i, t_i) with strictly increasing timestamps."""

    xs: np.ndarray  # (N, d)
    ts: np.ndarray  # (N,)

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=np.float64)
        self.ts = np.asarray(self.ts, dtype=np.float64)
        if self.xs.ndim != 2 or self.ts.ndim != 1 or self.xs.shape[0] != self.ts.shape[0]:
            raise ShapeError(
                f"TimedSequence: xs {self.xs.shape} and ts {self.ts.shape} are inconsistent"
            )
        if self.xs.shape[0] == 0:
            raise ValueError("TimedSequence: at least one observation required")
        if np.any(np.diff(self.ts) <= 0):
            raise ValueError("TimedSequence: timestamps must be strictly increasing")

    def __len__(self):
        return self.xs.shape[0]

    @property
    def dim(self) -> int:
        return self.xs.shape[1]


@dataclass
class CellState:
    """Hidden state pair; ``c`` is all-zeros and unused for plain RNN cells."""

    h: np.ndarray
    c: np.ndarray


class RnnCellParams:
    def __init__(self, params: ParamSet, n: int, d: int, activation: str = "tanh"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.params = params
        self.n = n
        self.d = d
        self.activation = activation

    kind = "rnn"

    @classmethod
    def build(cls, rng: Rng, n: int, d: int, activation: str = "tanh") -> "RnnCellParams":
        ps = ParamSet("rnn_cell")
        ps.add("w_input", uniform_init(rng, n, d))
        ps.add("w_feedback", uniform_init(rng, n, n))
        ps.add("b", np.zeros(n))
        return cls(ps, n, d, activation)


_LSTM_GATES = ("in", "f", "o", "c")


class LstmCellParams:
    def __init__(self, params: ParamSet, n: int, d: int):
        self.params = params
        self.n = n
        self.d = d

    kind = "lstm"

    @classmethod
    def build(cls, rng: Rng, n: int, d: int) -> "LstmCellParams":
        ps = ParamSet("lstm_cell")
        for gate in _LSTM_GATES:
            ps.add(f"w_x{gate}", uniform_init(rng, n, d))
            ps.add(f"w_h{gate}", uniform_init(rng, n, n))
            ps.add(f"b_{gate}", np.zeros(n))
        return cls(ps, n, d)


def _check_vec(v, length, what):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (length,):
        raise ShapeError(f"{what}: expected shape ({length},), got {v.shape}")
    return v


def rnn_cell(p: RnnCellParams, h_prev, x) -> np.ndarray:
    """act(w_feedback h_prev + w_input x + b)."""
    h_prev = _check_vec(h_prev, p.n, "rnn_cell h_prev")
    x = _check_vec(x, p.d, "rnn_cell x")
    act = ACTIVATIONS[p.activation][0]
    pre = p.params.array("w_feedback") @ h_prev + p.params.array("w_input") @ x + p.params.array("b")
    return act(pre)


def lstm_cell(p: LstmCellParams, state: CellState, x) -> CellState:
    """One gated update: (C, h) from (C_prev, h_prev, x)."""
    h_prev = _check_vec(state.h, p.n, "lstm_cell h")
    c_prev = _check_vec(state.c, p.n, "lstm_cell c")
    x = _check_vec(x, p.d, "lstm_cell x")
    ps = p.params

    def gate(name, act):
        pre = ps.array(f"w_x{name}") @ x + ps.array(f"w_h{name}") @ h_prev + ps.array(f"b_{name}")
        return act(pre)

    i_gate = gate("in", sigmoid)
    f_gate = gate("f", sigmoid)
    o_gate = gate("o", sigmoid)
    candidate = gate("c", tanh_act)
    c_new = f_gate * c_prev + i_gate * candidate
    h_new = o_gate * np.tanh(c_new)
    return CellState(h=h_new, c=c_new)


def _rnn_cell_node(p: RnnCellParams, h: Node, x: Node) -> Node:
    ps = p.params
    pre = ad.affine2(x, ps.node("w_input"), h, ps.node("w_feedback"), ps.node("b"))
    return ad.ACTIVATION_NODES[p.activation](pre)


def _lstm_cell_node(p: LstmCellParams, h: Node, c: Node, x: Node) -> tuple[Node, Node]:
    ps = p.params

    def pre(name):
        return ad.affine2(x, ps.node(f"w_x{name}"), h, ps.node(f"w_h{name}"), ps.node(f"b_{name}"))

    i_gate = ad.sigmoid(pre("in"))
    f_gate = ad.sigmoid(pre("f"))
    o_gate = ad.sigmoid(pre("o"))
    candidate = ad.tanh(pre("c"))
    c_new = ad.add(ad.mul(f_gate, c), ad.mul(i_gate, candidate))
    h_new = ad.mul(o_gate, ad.tanh(c_new))
    return h_new, c_new


@dataclass
class EncodeTape:
    """Recorded forward pass of a continuous-time (or discrete) encoder."""

    kind: str
    cell: object
    field: object | None
    h_nodes: list = field(default_factory=list)
    c_nodes: list | None = None
    hprime_nodes: list = field(default_factory=list)
    h0_node: Node | None = None
    c0_node: Node | None = None
    squeeze: bool = True

    def _val(self, node):
        return node.value[0] if self.squeeze else node.value

    @property
    def outputs(self) -> list:
        """Hidden state after each processed observation."""
        return [self._val(h) for h in self.h_nodes]

    @property
    def h_n(self) -> np.ndarray:
        return self._val(self.h_nodes[-1])

    @property
    def c_n(self) -> np.ndarray:
        if self.c_nodes is None:
            raise ValueError("RNN tape has no cell state path")
        return self._val(self.c_nodes[-1])


def encode_nodes(
    cell,
    f,
    xs: np.ndarray,
    ts: np.ndarray,
    reverse: bool = False,
    solver_steps: int = 4,
    squeeze: bool = False,
) -> EncodeTape:
    """Batched taped encoder pass.

    ``xs`` is (N, B, d) and ``ts`` is (N, B); rows may carry different
    timestamps. ``f=None`` gives the discrete unroll (no state transition
    between observations). Initial h and C are zero; the first observation is
    preceded by a zero-length transition.
    """
    n_obs, batch, _ = xs.shape
    is_lstm = cell.kind == "lstm"
    h0 = ad.leaf(np.zeros((batch, cell.n)))
    c0 = ad.leaf(np.zeros((batch, cell.n)))
    tape = EncodeTape(
        kind=cell.kind,
        cell=cell,
        field=f,
        c_nodes=[] if is_lstm else None,
        h0_node=h0,
        c0_node=c0,
        squeeze=squeeze,
    )
    order = range(n_obs - 1, -1, -1) if reverse else range(n_obs)
    h, c = h0, c0
    prev_t = None
    for idx in order:
        t_i = ts[idx]
        if f is None or prev_t is None:
            h_prime = h
        else:
            dt = (t_i - prev_t)[:, None]
            if np.all(dt == 0.0):
                h_prime = h
            else:
                h_prime = rk4_chain_node(f, h, prev_t[:, None], dt, solver_steps)
        if not np.all(np.isfinite(h_prime.value)):
            from .odesolve import DivergenceError

            raise DivergenceError(idx, f"non-finite encoder state at observation {idx}")
        x_node = ad.leaf(xs[idx])
        if is_lstm:
            h, c = _lstm_cell_node(cell, h_prime, c, x_node)
            tape.c_nodes.append(c)
        else:
            h = _rnn_cell_node(cell, h_prime, x_node)
        tape.hprime_nodes.append(h_prime)
        tape.h_nodes.append(h)
        prev_t = t_i
    return tape


def _seq_to_batch(seq: TimedSequence):
    return seq.xs[:, None, :], seq.ts[:, None]


def ode_rnn_encode(
    p: RnnCellParams, f, seq: TimedSequence, reverse: bool = False, solver_steps: int = 4
) -> EncodeTape:
    """Continuous-time RNN encoder over one sequence.

    Per observation: integrate the hidden state across the inter-observation
    gap, then apply the cell to (h', x_i). Returns the recorded tape; the
    per-step hidden states and final state are ``tape.outputs`` / ``tape.h_n``.
    """
    if f.arity != p.n:
        raise ShapeError(f"field arity {f.arity} does not match hidden dim {p.n}")
    xs, ts = _seq_to_batch(seq)
    return encode_nodes(p, f, xs, ts, reverse=reverse, solver_steps=solver_steps, squeeze=True)


def ode_lstm_encode(
    p: LstmCellParams, f, seq: TimedSequence, reverse: bool = False, solver_steps: int = 4
) -> EncodeTape:
    """Continuous-time LSTM encoder; the field evolves h only, C passes
    between cells untouched by the solver."""
    if f.arity != p.n:
        raise ShapeError(f"field arity {f.arity} does not match hidden dim {p.n}")
    xs, ts = _seq_to_batch(seq)
    return encode_nodes(p, f, xs, ts, reverse=reverse, solver_steps=solver_steps, squeeze=True)


@dataclass
class CellGrads:
    """Gradients from one encoder backward pass."""

    cell: dict
    field: dict
    d_h0: np.ndarray
    d_c0: np.ndarray | None


def cell_backward(tape: EncodeTape, output_cotangents, h_n_cotangent=None) -> CellGrads:
    """Exact reverse-mode gradients for a recorded encoder pass.

    ``output_cotangents`` aligns with ``tape.outputs``; entries may be None.
    ``h_n_cotangent`` adds an extra cotangent on the final hidden state.
    """
    if output_cotangents is None:
        output_cotangents = [None] * len(tape.h_nodes)
    if len(output_cotangents) != len(tape.h_nodes):
        raise ValueError(
            f"got {len(output_cotangents)} cotangents for {len(tape.h_nodes)} outputs"
        )

    def lift(g):
        g = np.asarray(g, dtype=np.float64)
        return g[None, :] if tape.squeeze else g

    seeds = []
    for node, g in zip(tape.h_nodes, output_cotangents):
        if g is not None:
            seeds.append((node, lift(g)))
    if h_n_cotangent is not None:
        seeds.append((tape.h_nodes[-1], lift(h_n_cotangent)))

    def collect(param_set, grads):
        out = {}
        for name, node in param_set.items():
            g = grads.get(node)
            out[name] = np.zeros_like(node.value) if g is None else g
        return out

    if not seeds:
        zero_cell = {k: np.zeros_like(v.value) for k, v in tape.cell.params.items()}
        zero_field = (
            {} if tape.field is None
            else {k: np.zeros_like(v.value) for k, v in tape.field.params.items()}
        )
        zero_h0 = np.zeros_like(tape.h0_node.value)
        d_h0 = zero_h0[0] if tape.squeeze else zero_h0
        d_c0 = d_h0.copy() if tape.kind == "lstm" else None
        return CellGrads(cell=zero_cell, field=zero_field, d_h0=d_h0, d_c0=d_c0)

    grads = ad.backward(seeds)
    cell_grads = collect(tape.cell.params, grads)
    field_grads = {} if tape.field is None else collect(tape.field.params, grads)

    def initial(node):
        g = grads.get(node)
        g = np.zeros_like(node.value) if g is None else g
        return g[0] if tape.squeeze else g

    d_c0 = initial(tape.c0_node) if tape.kind == "lstm" else None
    return CellGrads(cell=cell_grads, field=field_grads, d_h0=initial(tape.h0_node), d_c0=d_c0)
