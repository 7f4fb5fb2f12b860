"""Variational assembly: recognition encoder, reparameterized sampling, a
neural-ODE latent decoder, and the output network.

The pipeline is: run the configured continuous-time encoder backwards over
the observations to get a summary state z'_0 at the earliest time; a
translator network g maps it to (mu, log sigma); sample eps and form
``z0 = mu + sigma * eps``; integrate the latent dynamics once through every
requested time; map each latent state through the output network.

Three model variants share this structure and differ only in the encoder
cell and whether gradient clipping is applied during training:
ODE-RNN encoder, ODE-LSTM encoder, and ODE-LSTM with norm clipping.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ParamSet
from .cells import LstmCellParams, RnnCellParams, TimedSequence, encode_nodes
from .numcore import Rng, ShapeError, gaussian, uniform_init
from .odesolve import MLPField, SolveSpan, SolveTrace, dopri5_solve, rk4_38_solve, rk4_chain_node

VARIANT_NAMES = ("latent-ode-rnn", "latent-ode-lstm", "latent-ode-lstm-gc")


@dataclass
class ModelVariant:
    """Encoder kind plus optional norm-clipping threshold."""

    encoder: str  # "ode-rnn" | "ode-lstm"
    clipping: float | None = None

    def __post_init__(self):
        if self.encoder not in ("ode-rnn", "ode-lstm"):
            raise ValueError(f"unknown encoder kind {self.encoder!r}")
        if self.clipping is not None and self.clipping <= 0:
            raise ValueError("clipping threshold must be positive")


def make_variant(name: str, clip_threshold: float = 1.0) -> ModelVariant:
    if name == "latent-ode-rnn":
        return ModelVariant("ode-rnn", None)
    if name == "latent-ode-lstm":
        return ModelVariant("ode-lstm", None)
    if name == "latent-ode-lstm-gc":
        return ModelVariant("ode-lstm", clip_threshold)
    raise ValueError(f"unknown variant {name!r}; expected one of {VARIANT_NAMES}")


def variant_name(variant: ModelVariant) -> str:
    if variant.encoder == "ode-rnn":
        return "latent-ode-rnn"
    return "latent-ode-lstm-gc" if variant.clipping is not None else "latent-ode-lstm"


@dataclass
class LatentPath:
    """Sampled initial latent state and the quantities that produced it."""

    mu: np.ndarray
    sigma: np.ndarray
    eps: np.ndarray
    z0: np.ndarray
    trajectory: SolveTrace | None = None


class EncoderHead:
    """Translator network g: one tanh hidden layer mapping the encoder
    summary to concatenated (mu, log sigma) lanes."""

    def __init__(self, params: ParamSet, latent_dim: int, hidden: int):
        self.params = params
        self.latent_dim = latent_dim
        self.hidden = hidden

    @classmethod
    def build(cls, rng: Rng, in_dim: int, hidden: int, latent_dim: int) -> "EncoderHead":
        ps = ParamSet("head")
        ps.add("w1", uniform_init(rng, hidden, in_dim))
        ps.add("b1", np.zeros(hidden))
        ps.add("w2", uniform_init(rng, 2 * latent_dim, hidden))
        ps.add("b2", np.zeros(2 * latent_dim))
        return cls(ps, latent_dim, hidden)

    def node_eval(self, h: Node) -> Node:
        hid = ad.tanh(ad.affine(h, self.params.node("w1"), self.params.node("b1")))
        return ad.affine(hid, self.params.node("w2"), self.params.node("b2"))


class OutputNet:
    """Readout from latent space: one tanh hidden layer, identity output."""

    def __init__(self, params: ParamSet, out_dim: int, hidden: int):
        self.params = params
        self.out_dim = out_dim
        self.hidden = hidden

    @classmethod
    def build(cls, rng: Rng, in_dim: int, hidden: int, out_dim: int) -> "OutputNet":
        ps = ParamSet("out")
        ps.add("w1", uniform_init(rng, hidden, in_dim))
        ps.add("b1", np.zeros(hidden))
        ps.add("w2", uniform_init(rng, out_dim, hidden))
        ps.add("b2", np.zeros(out_dim))
        return cls(ps, out_dim, hidden)

    def node_eval(self, z: Node) -> Node:
        hid = ad.tanh(ad.affine(z, self.params.node("w1"), self.params.node("b1")))
        return ad.affine(hid, self.params.node("w2"), self.params.node("b2"))

    def np_eval(self, z: np.ndarray) -> np.ndarray:
        hid = np.tanh(z @ self.params.array("w1").T + self.params.array("b1"))
        return hid @ self.params.array("w2").T + self.params.array("b2")


@dataclass
class DecoderStack:
    """Latent dynamics plus output network."""

    dynamics: MLPField
    output_net: OutputNet


class LatentODEModel:
    """One assembled model variant with all its parameter sets."""

    def __init__(
        self,
        variant: ModelVariant,
        enc_cell,
        enc_field: MLPField,
        head: EncoderHead,
        decoder: DecoderStack,
        dims: tuple[int, int, int, int],
        solver_steps: int = 4,
    ):
        self.variant = variant
        self.enc_cell = enc_cell
        self.enc_field = enc_field
        self.head = head
        self.decoder = decoder
        self.d, self.n, self.l, self.p = dims
        self.solver_steps = solver_steps

    @classmethod
    def build(
        cls,
        variant: ModelVariant | str,
        d: int,
        n: int,
        l: int,
        p: int,
        rng: Rng,
        enc_field_hidden: int = 20,
        g_hidden: int = 25,
        dyn_hidden: int = 20,
        out_hidden: int = 20,
        solver_steps: int = 4,
        rnn_activation: str = "tanh",
    ) -> "LatentODEModel":
        if isinstance(variant, str):
            variant = make_variant(variant)
        if variant.encoder == "ode-rnn":
            cell = RnnCellParams.build(rng, n, d, activation=rnn_activation)
        else:
            cell = LstmCellParams.build(rng, n, d)
        enc_field = MLPField.build(rng, n, enc_field_hidden)
        head = EncoderHead.build(rng, n, g_hidden, l)
        dynamics = MLPField.build(rng, l, dyn_hidden)
        output_net = OutputNet.build(rng, l, out_hidden, p)
        return cls(
            variant=variant,
            enc_cell=cell,
            enc_field=enc_field,
            head=head,
            decoder=DecoderStack(dynamics, output_net),
            dims=(d, n, l, p),
            solver_steps=solver_steps,
        )

    def param_groups(self) -> list[tuple[str, ParamSet]]:
        return [
            ("enc_cell", self.enc_cell.params),
            ("enc_field", self.enc_field.params),
            ("head", self.head.params),
            ("dyn", self.decoder.dynamics.params),
            ("out", self.decoder.output_net.params),
        ]

    def param_items(self) -> list[tuple[str, Node]]:
        """All parameters as (qualified name, leaf node), in declared order."""
        items = []
        for prefix, ps in self.param_groups():
            for name, node in ps.items():
                items.append((f"{prefix}.{name}", node))
        return items

    def n_params(self) -> int:
        return sum(node.value.size for _, node in self.param_items())


@dataclass
class ForwardTape:
    """Recorded end-to-end forward pass (training path)."""

    model: LatentODEModel
    mu_node: Node
    logsigma_node: Node
    sigma_node: Node
    z0_node: Node
    eps: np.ndarray
    z_nodes: list
    pred_nodes: list
    squeeze: bool = False

    def _val(self, node):
        return node.value[0] if self.squeeze else node.value

    @property
    def predictions(self) -> list:
        return [self._val(p) for p in self.pred_nodes]

    @property
    def latent_path(self) -> LatentPath:
        return LatentPath(
            mu=self._val(self.mu_node),
            sigma=self._val(self.sigma_node),
            eps=self.eps[0] if self.squeeze else self.eps,
            z0=self._val(self.z0_node),
        )


def _encode_to_z0_nodes(model: LatentODEModel, xs, ts, eps) -> tuple:
    """Shared taped encode: returns (mu, logsigma, sigma, z0) nodes."""
    tape = encode_nodes(
        model.enc_cell, model.enc_field, xs, ts, reverse=True, solver_steps=model.solver_steps
    )
    g_out = model.head.node_eval(tape.h_nodes[-1])
    latent_dim = model.l
    mu = ad.split_cols(g_out, 0, latent_dim)
    logsigma = ad.split_cols(g_out, latent_dim, 2 * latent_dim)
    sigma = ad.exp(logsigma)
    z0 = ad.add(mu, ad.mul(sigma, ad.leaf(eps)))
    return mu, logsigma, sigma, z0


def forward_taped(
    model: LatentODEModel,
    xs: np.ndarray,
    ts: np.ndarray,
    pred_ts: np.ndarray,
    eps: np.ndarray,
    squeeze: bool = False,
) -> ForwardTape:
    """Batched taped forward pass.

    ``xs`` (N, B, d) with timestamps ``ts`` (N, B) feed the encoder;
    predictions are made at ``pred_ts`` (K, B), which must start at the first
    observation time of each row and increase. ``eps`` is (B, l) noise.
    """
    if pred_ts.shape[1] != xs.shape[1]:
        raise ShapeError("pred_ts batch size does not match xs")
    if not np.allclose(pred_ts[0], ts[0]):
        raise ValueError("prediction times must start at the first observation time")
    mu, logsigma, sigma, z0 = _encode_to_z0_nodes(model, xs, ts, eps)

    dyn = model.decoder.dynamics
    out_net = model.decoder.output_net
    z_nodes = [z0]
    z = z0
    for i in range(1, pred_ts.shape[0]):
        dt = (pred_ts[i] - pred_ts[i - 1])[:, None]
        z = rk4_chain_node(dyn, z, pred_ts[i - 1][:, None], dt, model.solver_steps)
        z_nodes.append(z)
    pred_nodes = [out_net.node_eval(zn) for zn in z_nodes]
    return ForwardTape(
        model=model,
        mu_node=mu,
        logsigma_node=logsigma,
        sigma_node=sigma,
        z0_node=z0,
        eps=eps,
        z_nodes=z_nodes,
        pred_nodes=pred_nodes,
        squeeze=squeeze,
    )


def encode(model: LatentODEModel, seq: TimedSequence, rng: Rng | None = None, eps=None) -> LatentPath:
    """Summarize a sequence into (mu, sigma, eps, z0).

    ``eps`` overrides sampling (frozen-noise checks); otherwise it is drawn
    from ``rng``, one draw per sequence per call.
    """
    if seq.dim != model.d:
        raise ShapeError(f"sequence dim {seq.dim} does not match model input dim {model.d}")
    if eps is None:
        if rng is None:
            raise ValueError("encode needs an rng when eps is not given")
        eps = gaussian(rng, model.l)
    eps = np.asarray(eps, dtype=np.float64).reshape(1, model.l)
    xs, ts = seq.xs[:, None, :], seq.ts[:, None]
    mu, _, sigma, z0 = _encode_to_z0_nodes(model, xs, ts, eps)
    return LatentPath(mu=mu.value[0], sigma=sigma.value[0], eps=eps[0], z0=z0.value[0])


def _decode_np(model: LatentODEModel, z0: np.ndarray, times, method, rtol, atol):
    """Chain latent solves through ``times`` (z0 sits at times[0])."""
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or times.size == 0:
        raise ValueError("decode needs a non-empty 1-D list of times")
    if times.size > 1:
        diffs = np.diff(times)
        if not (np.all(diffs > 0) or np.all(diffs < 0)):
            raise ValueError("decode times must be strictly monotone")
    dyn = model.decoder.dynamics
    z = np.asarray(z0, dtype=np.float64)
    zs = [z]
    states = [(times[0], z.copy())]
    n_evals = 0
    for i in range(1, times.size):
        if method == "dopri5":
            span = SolveSpan.adaptive(times[i - 1], times[i], rtol=rtol, atol=atol)
            trace = dopri5_solve(dyn, z, span)
        else:
            span = SolveSpan.fixed(times[i - 1], times[i], steps=model.solver_steps)
            trace = rk4_38_solve(dyn, z, span)
        z = trace.final_state
        n_evals += trace.n_evals
        zs.append(z)
        states.append((times[i], z.copy()))
    trace = SolveTrace(states=states, n_accepted=len(states) - 1, n_evals=n_evals)
    return zs, trace


def decode(
    model: LatentODEModel,
    z0,
    times,
    method: str = "rk4",
    rtol: float = 1e-6,
    atol: float = 1e-9,
) -> list:
    """Predictions at ``times`` from an initial latent state at ``times[0]``.

    Times may decrease for backward extrapolation. The latent trajectory is
    solved once through all requested times; the output network is applied
    pointwise.
    """
    zs, _ = _decode_np(model, z0, times, method, rtol, atol)
    out_net = model.decoder.output_net
    return [out_net.np_eval(z[None, :])[0] for z in zs]


def forward(
    model: LatentODEModel,
    seq: TimedSequence,
    predict_times,
    rng: Rng | None = None,
    eps=None,
    method: str = "rk4",
    rtol: float = 1e-6,
    atol: float = 1e-9,
) -> tuple[list, LatentPath]:
    """Encode then decode; prediction times may extend beyond the observed
    span in both directions. z0 anchors at the first observation time."""
    times = np.asarray(predict_times, dtype=np.float64)
    if times.ndim != 1 or times.size == 0:
        raise ValueError("forward needs non-empty prediction times")
    if times.size > 1:
        diffs = np.diff(times)
        if not (np.all(diffs > 0) or np.all(diffs < 0)):
            raise ValueError("prediction times must be strictly monotone")
    decreasing = times.size > 1 and times[1] < times[0]
    asc = times[::-1] if decreasing else times

    path = encode(model, seq, rng=rng, eps=eps)
    t0 = seq.ts[0]
    back = asc[asc < t0]
    fwd = asc[asc >= t0]

    preds_by_time = {}
    merged_states = [(t0, path.z0.copy())]
    n_evals = 0
    out_net = model.decoder.output_net
    if back.size:
        chain = np.concatenate([[t0], back[::-1]])
        zs, trace = _decode_np(model, path.z0, chain, method, rtol, atol)
        n_evals += trace.n_evals
        for t, z in zip(chain[1:], zs[1:]):
            preds_by_time[float(t)] = out_net.np_eval(z[None, :])[0]
            merged_states.append((float(t), z.copy()))
    if fwd.size:
        chain = fwd if fwd[0] == t0 else np.concatenate([[t0], fwd])
        zs, trace = _decode_np(model, path.z0, chain, method, rtol, atol)
        n_evals += trace.n_evals
        for t, z in zip(chain, zs):
            preds_by_time[float(t)] = out_net.np_eval(z[None, :])[0]
            merged_states.append((float(t), z.copy()))

    merged_states.sort(key=lambda s: s[0])
    path.trajectory = SolveTrace(
        states=merged_states, n_accepted=len(merged_states) - 1, n_evals=n_evals
    )
    predictions = [preds_by_time[float(t)] for t in times]
    return predictions, path


def model_backward(tape: ForwardTape, cotangents) -> dict:
    """Exact gradients over every parameter group from a recorded forward.

    ``cotangents`` carries ``d_predictions`` (one array per prediction node,
    entries may be None) and optional ``d_mu`` / ``d_sigma`` for regularizer
    terms. Returns {qualified parameter name: gradient array}.
    """
    d_preds = cotangents.d_predictions
    if d_preds is not None and len(d_preds) != len(tape.pred_nodes):
        raise ShapeError(
            f"got {len(d_preds)} prediction cotangents for {len(tape.pred_nodes)} predictions"
        )

    def lift(g):
        g = np.asarray(g, dtype=np.float64)
        return g[None, :] if tape.squeeze else g

    seeds = []
    if d_preds is not None:
        for node, g in zip(tape.pred_nodes, d_preds):
            if g is not None:
                seeds.append((node, lift(g)))
    d_mu = getattr(cotangents, "d_mu", None)
    if d_mu is not None:
        seeds.append((tape.mu_node, lift(d_mu)))
    d_sigma = getattr(cotangents, "d_sigma", None)
    if d_sigma is not None:
        seeds.append((tape.sigma_node, lift(d_sigma)))

    items = tape.model.param_items()
    if not seeds:
        return {name: np.zeros_like(node.value) for name, node in items}
    grads = ad.backward(seeds)
    return {
        name: grads.get(node, None) if grads.get(node) is not None else np.zeros_like(node.value)
        for name, node in items
    }


_CKPT_MAGIC = b"LODEC001"


def save_checkpoint(model: LatentODEModel, path, seed: int):
    """Write the documented binary container: magic, length-prefixed JSON
    header, then float64 little-endian arrays in declared order."""
    manifest = [
        {"name": name, "shape": list(node.value.shape)} for name, node in model.param_items()
    ]
    header = {
        "format": "latentode-checkpoint",
        "version": 1,
        "dims": {"d": model.d, "n": model.n, "l": model.l, "p": model.p},
        "variant": variant_name(model.variant),
        "clip_threshold": model.variant.clipping,
        "hidden": {
            "enc_field": model.enc_field.hidden,
            "g": model.head.hidden,
            "dyn": model.decoder.dynamics.hidden,
            "out": model.decoder.output_net.hidden,
        },
        "rnn_activation": getattr(model.enc_cell, "activation", None),
        "solver_steps": model.solver_steps,
        "seed": int(seed),
        "params": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, node in model.param_items():
            fh.write(np.ascontiguousarray(node.value, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[LatentODEModel, int]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a latentode checkpoint (magic {magic!r})")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        dims = header["dims"]
        kwargs = {}
        if header.get("rnn_activation"):
            kwargs["rnn_activation"] = header["rnn_activation"]
        model = LatentODEModel.build(
            make_variant(header["variant"], header.get("clip_threshold") or 1.0),
            dims["d"],
            dims["n"],
            dims["l"],
            dims["p"],
            rng=Rng(0),
            enc_field_hidden=header["hidden"]["enc_field"],
            g_hidden=header["hidden"]["g"],
            dyn_hidden=header["hidden"]["dyn"],
            out_hidden=header["hidden"]["out"],
            solver_steps=header["solver_steps"],
            **kwargs,
        )
        items = model.param_items()
        if [n for n, _ in items] != [m["name"] for m in header["params"]]:
            raise ValueError("checkpoint parameter manifest does not match the model layout")
        for (_, node), meta in zip(items, header["params"]):
            shape = tuple(meta["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            node.value[...] = np.frombuffer(raw, dtype="<f8").reshape(shape)
    return model, int(header["seed"])
