"""Toy mixture-of-experts language model with a hand-written backward pass.

The model is deliberately small: token embedding, a stack of MoE blocks
(linear router + gated feed-forward experts, residual add), and a linear
output head trained with next-token cross-entropy.  There is no attention
and no normalization, so each position's prediction depends only on its own
input token; that keeps ablation arithmetic exactly per-token.

The forward pass records everything downstream consumers need (routing
decisions, gate values, per-expert activations, pre-gate expert outputs).
The backward pass additionally captures, for every routed token, the
gradient of the loss w.r.t. that expert's pre-gate output including the gate
factor; that vector is the quantity the second-order importance estimator
consumes.  Both passes expose small instrumentation hooks (pass counters,
FLOP counters, frozen routing, output bumps, gate overrides) used by the
verification oracles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core_math import log_softmax, seeded_rng, silu, silu_grad, softmax

__all__ = [
    "GATE_MODES",
    "MoEConfig",
    "ExpertWeights",
    "MoELayer",
    "MoEModel",
    "PassCounter",
    "FlopCounter",
    "OutputBump",
    "FrozenRouting",
    "ExpertTrace",
    "LayerTrace",
    "ForwardTrace",
    "Gradients",
    "TrainResult",
    "TrainingError",
    "init_model",
    "expert_forward",
    "atomic_expert_forward",
    "route_tokens",
    "moe_layer_forward",
    "lm_forward",
    "lm_backward",
    "frozen_routing",
    "train",
    "save_model",
    "load_model",
]

GATE_MODES = ("softmax_renorm", "softmax", "raw")

# rng stream tags; one user-facing seed fans out into independent streams
INIT_STREAM = 1
TRAIN_STREAM = 2


@dataclass(frozen=True)
class MoEConfig:
    """Static architecture description; immutable once built."""

    vocab: int = 64
    d_model: int = 32
    d_inter: int = 16
    num_experts: int = 8
    kappa: int = 2
    num_layers: int = 2
    seq_len: int = 64
    gate_mode: str = "softmax_renorm"
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab", "d_model", "d_inter", "num_experts", "kappa", "num_layers"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.seq_len < 2:
            raise ValueError("seq_len must be >= 2 (need at least one next-token target)")
        if self.kappa > self.num_experts:
            raise ValueError(f"kappa={self.kappa} exceeds num_experts={self.num_experts}")
        if self.gate_mode not in GATE_MODES:
            raise ValueError(f"gate_mode must be one of {GATE_MODES}, got {self.gate_mode!r}")

    def to_dict(self) -> dict:
        return {
            "vocab": self.vocab,
            "d_model": self.d_model,
            "d_inter": self.d_inter,
            "num_experts": self.num_experts,
            "kappa": self.kappa,
            "num_layers": self.num_layers,
            "seq_len": self.seq_len,
            "gate_mode": self.gate_mode,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MoEConfig":
        return cls(**{k: d[k] for k in cls().to_dict().keys() if k in d})


@dataclass
class ExpertWeights:
    """One gated feed-forward expert.

    Channel j is the atomic unit: row j of w_up and w_gate plus column j of
    w_down.  Pruning a channel removes exactly that row/row/column triple.
    """

    w_up: np.ndarray  # (channels, d_model)
    w_gate: np.ndarray  # (channels, d_model)
    w_down: np.ndarray  # (d_model, channels)

    def __post_init__(self):
        c, d = self.w_up.shape
        if self.w_gate.shape != (c, d) or self.w_down.shape != (d, c):
            raise ValueError(
                f"inconsistent expert shapes: up {self.w_up.shape}, "
                f"gate {self.w_gate.shape}, down {self.w_down.shape}"
            )

    @property
    def channels(self) -> int:
        return self.w_up.shape[0]

    def copy(self) -> "ExpertWeights":
        return ExpertWeights(self.w_up.copy(), self.w_gate.copy(), self.w_down.copy())


@dataclass
class MoELayer:
    router: np.ndarray  # (num_experts, d_model)
    experts: list

    def copy(self) -> "MoELayer":
        return MoELayer(self.router.copy(), [e.copy() for e in self.experts])

    def alive(self) -> np.ndarray:
        """Boolean mask of experts that still own at least one channel."""
        return np.array([e.channels > 0 for e in self.experts])


@dataclass
class MoEModel:
    config: MoEConfig
    embedding: np.ndarray  # (vocab, d_model)
    layers: list
    head: np.ndarray  # (vocab, d_model)

    def clone(self) -> "MoEModel":
        return MoEModel(
            self.config,
            self.embedding.copy(),
            [layer.copy() for layer in self.layers],
            self.head.copy(),
        )

    def channel_counts(self) -> list:
        return [[e.channels for e in layer.experts] for layer in self.layers]

    def num_params(self) -> int:
        return sum(arr.size for _, arr in self.param_items())

    def param_items(self):
        """Yield (name, array) pairs in a fixed canonical order."""
        yield "embedding", self.embedding
        for l, layer in enumerate(self.layers):
            yield f"layer{l}/router", layer.router
            for e, w in enumerate(layer.experts):
                yield f"layer{l}/expert{e}/w_up", w.w_up
                yield f"layer{l}/expert{e}/w_gate", w.w_gate
                yield f"layer{l}/expert{e}/w_down", w.w_down
        yield "head", self.head


@dataclass
class PassCounter:
    """Counts whole forward/backward passes over batches."""

    forward: int = 0
    backward: int = 0


@dataclass
class FlopCounter:
    """Accumulates floating-point operations actually executed.

    Convention: one multiply-add counts as 2 FLOPs; only the matrix products
    and the expert gating elementwise products are counted (embedding lookup
    is a gather, losses and softmaxes are excluded).
    """

    moe: int = 0
    head: int = 0
    tokens: int = 0


@dataclass(frozen=True)
class OutputBump:
    """Additive probe on one channel's contribution at one token.

    Used by finite-difference checks: during the forward pass the bumped
    channel's contribution at `token_row` becomes (contribution + delta)
    before the gate multiplies and before the weighted sum.
    """

    layer: int
    expert: int
    token_row: int
    channel: int
    delta: np.ndarray  # (d_model,)


@dataclass
class FrozenRouting:
    """Per-layer routing decisions captured from a previous forward pass."""

    layers: list  # list of (expert_index (N, k), gates (N, k)) pairs


def init_model(config: MoEConfig) -> MoEModel:
    """Uniform(-a, a) init with a = 1/sqrt(fan_in) per matrix, seeded draws.

    Draw order is fixed (embedding, then per layer router and experts in
    index order, then head) so a given config seed always produces the same
    model bit-for-bit.
    """
    rng = seeded_rng(config.seed, INIT_STREAM)

    def draw(shape, fan_in):
        a = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-a, a, size=shape)

    d, c = config.d_model, config.d_inter
    embedding = draw((config.vocab, d), d)
    layers = []
    for _ in range(config.num_layers):
        router = draw((config.num_experts, d), d)
        experts = []
        for _ in range(config.num_experts):
            w_up = draw((c, d), d)
            w_gate = draw((c, d), d)
            w_down = draw((d, c), c)
            experts.append(ExpertWeights(w_up, w_gate, w_down))
        layers.append(MoELayer(router, experts))
    head = draw((config.vocab, d), d)
    return MoEModel(config, embedding, layers, head)


def expert_forward(w: ExpertWeights, x: np.ndarray):
    """Full expert on a batch of inputs.

    x: (n, d_model) or (d_model,).  Returns (y, phi) with y the expert
    output and phi the per-channel gated activations silu(w_gate x) * (w_up x),
    whose columns scale the w_down columns.
    """
    single = x.ndim == 1
    xb = np.atleast_2d(np.asarray(x, dtype=np.float64))
    u = xb @ w.w_gate.T
    v = xb @ w.w_up.T
    phi = silu(u) * v
    y = phi @ w.w_down.T
    if single:
        return y[0], phi[0]
    return y, phi


def atomic_expert_forward(w: ExpertWeights, channel: int, x: np.ndarray) -> np.ndarray:
    """Contribution of a single channel: w_down[:, j] * phi_j(x)."""
    if not 0 <= channel < w.channels:
        raise ValueError(f"channel {channel} out of range for {w.channels} channels")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"atomic_expert_forward expects a single input vector, got {x.shape}")
    u = float(w.w_gate[channel] @ x)
    v = float(w.w_up[channel] @ x)
    phi_j = float(silu(np.array([u]))[0]) * v
    return w.w_down[:, channel] * phi_j


def route_tokens(layer: MoELayer, x: np.ndarray, kappa: int, gate_mode: str):
    """Router scores -> probabilities -> top-k -> gate values.

    Experts with zero remaining channels are masked to -inf before selection
    so a fully pruned expert can never be routed to.  Selection happens on
    the masked logits (softmax is monotone, so the selected set is the same
    as selecting on probabilities) with ties broken toward the lower expert
    index.  Returns (expert_index (n, k_eff), gates (n, k_eff), probs (n, E)).
    """
    if gate_mode not in GATE_MODES:
        raise ValueError(f"unknown gate_mode {gate_mode!r}")
    logits = x @ layer.router.T  # (n, E)
    alive = layer.alive()
    n_alive = int(alive.sum())
    k_eff = min(kappa, n_alive)
    if k_eff == 0:
        n = x.shape[0]
        empty = np.zeros((n, 0))
        return empty.astype(int), empty, np.zeros((n, len(layer.experts)))
    masked = logits.copy()
    masked[:, ~alive] = -np.inf
    order = np.argsort(-masked, axis=1, kind="stable")
    idx = order[:, :k_eff]
    probs = softmax(masked, axis=1)
    if gate_mode == "raw":
        gates = np.take_along_axis(logits, idx, axis=1)
    else:
        sel = np.take_along_axis(probs, idx, axis=1)
        if gate_mode == "softmax_renorm":
            gates = sel / sel.sum(axis=1, keepdims=True)
        else:
            gates = sel
    return idx, gates, probs


@dataclass
class ExpertTrace:
    """Per-expert forward record; arrays are aligned row-for-row."""

    rows: np.ndarray  # (t,) token rows routed here, ascending
    slots: np.ndarray  # (t,) routing slot of this expert per row
    u: np.ndarray  # (t, c) gate-branch preactivations
    v: np.ndarray  # (t, c) up-branch activations
    phi: np.ndarray  # (t, c) gated channel activations
    out: np.ndarray  # (t, d) pre-gate expert outputs


@dataclass
class LayerTrace:
    layer_input: np.ndarray  # (N, d)
    expert_index: np.ndarray  # (N, k_eff)
    gates: np.ndarray  # (N, k_eff)
    probs: np.ndarray | None  # (N, E); None when routing was frozen
    experts: list  # list[ExpertTrace], one per expert
    k_eff: int
    frozen: bool


@dataclass
class ForwardTrace:
    ids: np.ndarray  # (B, T) the batch this trace belongs to
    token_count: int  # N = B * (T - 1) scored positions
    layer_traces: list
    final_hidden: np.ndarray  # (N, d)
    logits: np.ndarray  # (N, vocab)
    token_nll: np.ndarray  # (N,)
    loss: float
    frozen: bool
    bumped: bool


def _validate_batch(config: MoEConfig, batch) -> np.ndarray:
    ids = np.asarray(batch)
    if ids.ndim != 2:
        raise ValueError(f"batch must be 2-D (sequences, positions), got shape {ids.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValueError(f"batch must contain integer token ids, got dtype {ids.dtype}")
    if ids.shape[1] != config.seq_len:
        raise ValueError(f"sequence length {ids.shape[1]} does not match config seq_len {config.seq_len}")
    if ids.shape[0] < 1:
        raise ValueError("batch is empty")
    if ids.min() < 0 or ids.max() >= config.vocab:
        raise ValueError(f"token id out of range [0, {config.vocab})")
    return ids


def moe_layer_forward(
    layer: MoELayer,
    x: np.ndarray,
    *,
    kappa: int,
    gate_mode: str = "softmax_renorm",
    routing=None,
    bumps=None,
    flops: FlopCounter | None = None,
):
    """One MoE block without the residual add.  Returns (y, LayerTrace).

    `routing` replays captured (expert_index, gates) instead of running the
    router.  `bumps` applies OutputBump probes (their layer field is the
    caller's concern; everything passed here is applied here).
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    num_experts = len(layer.experts)
    if routing is None:
        idx, gates, probs = route_tokens(layer, x, kappa, gate_mode)
        frozen = False
    else:
        idx, gates = routing
        idx = np.asarray(idx)
        gates = np.asarray(gates, dtype=np.float64)
        if idx.shape != gates.shape or idx.ndim != 2 or idx.shape[0] != n:
            raise ValueError(f"frozen routing shape {idx.shape} does not match batch of {n} tokens")
        if idx.size and (idx.min() < 0 or idx.max() >= num_experts):
            raise ValueError("frozen routing references an unknown expert")
        probs = None
        frozen = True
    if flops is not None and not frozen:
        flops.moe += n * 2 * num_experts * d

    bumps = list(bumps) if bumps else []
    y = np.zeros_like(x)
    expert_traces = []
    for e_i, w in enumerate(layer.experts):
        rows, slots = np.nonzero(idx == e_i)
        c = w.channels
        if rows.size == 0 or c == 0:
            # not routed (or physically gone under frozen routing): zero contribution
            empty = np.zeros((0, c))
            expert_traces.append(ExpertTrace(rows, slots, empty, empty, empty, np.zeros((0, d))))
            continue
        xi = x[rows]
        u = xi @ w.w_gate.T
        v = xi @ w.w_up.T
        phi = silu(u) * v
        out = phi @ w.w_down.T
        for b in bumps:
            if b.expert != e_i:
                continue
            pos = np.nonzero(rows == b.token_row)[0]
            if pos.size == 0:
                raise ValueError(f"bump targets token {b.token_row} which is not routed to expert {e_i}")
            if not 0 <= b.channel < c:
                raise ValueError(f"bump channel {b.channel} out of range for {c} channels")
            p = int(pos[0])
            # route the probe through the named channel's contribution so the
            # bump is attributed to that channel, not just to the sum
            contrib = phi[p, b.channel] * w.w_down[:, b.channel]
            out[p] = out[p] - contrib + (contrib + np.asarray(b.delta, dtype=np.float64))
        g = gates[rows, slots]
        y[rows] += g[:, None] * out
        if flops is not None:
            flops.moe += rows.size * (6 * d * c + 2 * c)
        expert_traces.append(ExpertTrace(rows, slots, u, v, phi, out))
    trace = LayerTrace(x, idx, gates, probs, expert_traces, idx.shape[1], frozen)
    return y, trace


def lm_forward(
    model: MoEModel,
    batch,
    *,
    routing: FrozenRouting | None = None,
    bumps=None,
    counter: PassCounter | None = None,
    flops: FlopCounter | None = None,
):
    """Full forward pass over a batch of token sequences.

    Consumes positions [0, T-2] as inputs and positions [1, T-1] as targets;
    the loss is the mean next-token negative log-likelihood over all scored
    positions.  Returns (loss, ForwardTrace).
    """
    cfg = model.config
    ids = _validate_batch(cfg, batch)
    inputs = ids[:, :-1].reshape(-1)
    targets = ids[:, 1:].reshape(-1)
    n = inputs.shape[0]
    if routing is not None and len(routing.layers) != cfg.num_layers:
        raise ValueError(
            f"frozen routing covers {len(routing.layers)} layers, model has {cfg.num_layers}"
        )
    bumps = list(bumps) if bumps else []
    for b in bumps:
        if not 0 <= b.layer < cfg.num_layers:
            raise ValueError(f"bump layer {b.layer} out of range")
        if not 0 <= b.token_row < n:
            raise ValueError(f"bump token row {b.token_row} out of range for {n} tokens")

    x = model.embedding[inputs]
    layer_traces = []
    for l, layer in enumerate(model.layers):
        y, lt = moe_layer_forward(
            layer,
            x,
            kappa=cfg.kappa,
            gate_mode=cfg.gate_mode,
            routing=routing.layers[l] if routing is not None else None,
            bumps=[b for b in bumps if b.layer == l],
            flops=flops,
        )
        x = x + y  # residual add
        layer_traces.append(lt)
    logits = x @ model.head.T
    if flops is not None:
        flops.head += n * 2 * cfg.vocab * cfg.d_model
        flops.tokens += n
    logp = log_softmax(logits, axis=1)
    token_nll = -logp[np.arange(n), targets]
    loss = float(token_nll.mean())
    if counter is not None:
        counter.forward += 1
    trace = ForwardTrace(
        ids=ids,
        token_count=n,
        layer_traces=layer_traces,
        final_hidden=x,
        logits=logits,
        token_nll=token_nll,
        loss=loss,
        frozen=routing is not None,
        bumped=bool(bumps),
    )
    return loss, trace


def frozen_routing(trace: ForwardTrace) -> FrozenRouting:
    """Capture a trace's routing decisions for later replay."""
    return FrozenRouting(
        [(lt.expert_index.copy(), lt.gates.copy()) for lt in trace.layer_traces]
    )


@dataclass
class ExpertGrads:
    w_up: np.ndarray
    w_gate: np.ndarray
    w_down: np.ndarray


@dataclass
class LayerGrads:
    router: np.ndarray
    experts: list


@dataclass
class Gradients:
    embedding: np.ndarray
    layers: list  # list[LayerGrads]
    head: np.ndarray
    # expert_output_grads[l][e] is (t, d): d loss / d (pre-gate expert output),
    # gate factor included, aligned with trace.layer_traces[l].experts[e].rows
    expert_output_grads: list
    # layer_output_grads[l] is (N, d): d loss / d (post-residual layer output)
    layer_output_grads: list

    def param_items(self):
        yield "embedding", self.embedding
        for l, lg in enumerate(self.layers):
            yield f"layer{l}/router", lg.router
            for e, eg in enumerate(lg.experts):
                yield f"layer{l}/expert{e}/w_up", eg.w_up
                yield f"layer{l}/expert{e}/w_gate", eg.w_gate
                yield f"layer{l}/expert{e}/w_down", eg.w_down
        yield "head", self.head

    def global_norm(self) -> float:
        total = 0.0
        for _, g in self.param_items():
            total += float(np.sum(g * g))
        return float(np.sqrt(total))


def lm_backward(
    model: MoEModel,
    batch,
    trace: ForwardTrace,
    *,
    gate_override: dict | None = None,
    counter: PassCounter | None = None,
) -> Gradients:
    """Reverse-mode gradients of the mean token NLL recorded in `trace`.

    `gate_override` maps (layer, token_row, expert) -> replacement gate value
    and is a verification hook: the backward is replayed as if that routed
    gate had the given value wherever the gate multiplies the expert path
    (captured expert-output gradients and everything downstream of them).
    Traced probabilities and renormalization sums are left untouched.
    """
    cfg = model.config
    ids = _validate_batch(cfg, batch)
    if not np.array_equal(ids, trace.ids):
        raise ValueError("trace does not belong to this batch")
    if trace.bumped:
        raise ValueError("refusing to differentiate a bumped forward trace")
    gate_override = dict(gate_override or {})
    for l_o, row_o, e_o in gate_override:
        if not (0 <= l_o < cfg.num_layers and 0 <= row_o < trace.token_count):
            raise ValueError(f"gate override key ({l_o}, {row_o}, {e_o}) out of range")

    n = trace.token_count
    targets = ids[:, 1:].reshape(-1)
    inputs = ids[:, :-1].reshape(-1)

    # head and loss
    p = softmax(trace.logits, axis=1)
    dlogits = p
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n
    d_head = dlogits.T @ trace.final_hidden
    dx = dlogits @ model.head

    layer_grads: list = [None] * cfg.num_layers
    expert_output_grads: list = [None] * cfg.num_layers
    layer_output_grads: list = [None] * cfg.num_layers

    for l in range(cfg.num_layers - 1, -1, -1):
        layer = model.layers[l]
        lt = trace.layer_traces[l]
        layer_output_grads[l] = dx.copy()
        dy = dx  # gradient w.r.t. the MoE branch equals the post-residual gradient
        dx_in = dx.copy()  # residual path
        num_experts = len(layer.experts)
        d_router = np.zeros_like(layer.router)
        e_grads = []
        eo_grads = []
        dgate = np.zeros_like(lt.gates)
        overrides_here = {
            (row, e): val for (lo, row, e), val in gate_override.items() if lo == l
        }
        for e_i, w in enumerate(layer.experts):
            et = lt.experts[e_i]
            if et.rows.size == 0:
                e_grads.append(
                    ExpertGrads(np.zeros_like(w.w_up), np.zeros_like(w.w_gate), np.zeros_like(w.w_down))
                )
                eo_grads.append(np.zeros((0, cfg.d_model)))
                continue
            g = lt.gates[et.rows, et.slots]
            if overrides_here:
                g = g.copy()
                for pos, row in enumerate(et.rows):
                    key = (int(row), e_i)
                    if key in overrides_here:
                        g[pos] = overrides_here[key]
            dy_rows = dy[et.rows]
            d_out = g[:, None] * dy_rows  # captured expert-output gradient
            eo_grads.append(d_out)
            dgate[et.rows, et.slots] = np.sum(dy_rows * et.out, axis=1)
            dphi = d_out @ w.w_down  # (t, c)
            d_w_down = d_out.T @ et.phi
            s = silu(et.u)
            dv = dphi * s
            du = dphi * et.v * silu_grad(et.u)
            xi = lt.layer_input[et.rows]
            d_w_up = dv.T @ xi
            d_w_gate = du.T @ xi
            dx_in[et.rows] += dv @ w.w_up + du @ w.w_gate
            e_grads.append(ExpertGrads(d_w_up, d_w_gate, d_w_down))

        if not lt.frozen and lt.k_eff > 0:
            # gates depend on the router; push dgate through selection + softmax
            if cfg.gate_mode == "raw":
                dz = np.zeros((n, num_experts))
                np.put_along_axis(dz, lt.expert_index, dgate, axis=1)
            else:
                if cfg.gate_mode == "softmax_renorm":
                    sel = np.take_along_axis(lt.probs, lt.expert_index, axis=1)
                    s_sum = sel.sum(axis=1, keepdims=True)
                    dot = np.sum(dgate * lt.gates, axis=1, keepdims=True)
                    dsel = (dgate - dot) / s_sum
                else:  # plain softmax gates
                    dsel = dgate
                dp = np.zeros((n, num_experts))
                np.put_along_axis(dp, lt.expert_index, dsel, axis=1)
                pdp = np.sum(lt.probs * dp, axis=1, keepdims=True)
                dz = lt.probs * (dp - pdp)
            d_router = dz.T @ lt.layer_input
            dx_in += dz @ layer.router
        layer_grads[l] = LayerGrads(d_router, e_grads)
        expert_output_grads[l] = eo_grads
        dx = dx_in

    d_emb = np.zeros_like(model.embedding)
    np.add.at(d_emb, inputs, dx)
    if counter is not None:
        counter.backward += 1
    return Gradients(d_emb, layer_grads, d_head, expert_output_grads, layer_output_grads)


class TrainingError(RuntimeError):
    """Raised when optimization blows up; carries the last finite checkpoint."""

    def __init__(self, message: str, step: int, checkpoint: MoEModel | None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainResult:
    model: MoEModel
    losses: np.ndarray  # (steps,) per-step batch losses
    grad_norms: np.ndarray  # (steps,) global gradient norms
    final_loss: float
    converged: bool  # gradient norm fell below grad_tol (False when tol unset)


def train(
    model: MoEModel,
    sequences: np.ndarray,
    *,
    steps: int,
    batch_size: int = 16,
    lr: float = 0.5,
    momentum: float = 0.9,
    schedule: str = "cosine",
    seed: int = 0,
    checkpoint_every: int = 100,
    grad_tol: float = 0.0,
    warmup: int = 0,
    sample: str = "replacement",
) -> TrainResult:
    """SGD with momentum on the next-token loss.  The input model is not
    mutated; a trained clone is returned.

    schedule: "cosine" decays the learning rate to 0 over `steps`;
    "constant" keeps it fixed.  `warmup` ramps the rate linearly from 0
    over that many leading steps before the schedule applies.  sample:
    "replacement" draws `batch_size` sequences per step (with replacement)
    from a stream derived from `seed`; "full" feeds the whole set every
    step, which makes the run deterministic in the data and is what a
    stationary-point search needs (batch_size and seed are then inert).
    Training stops early once the batch gradient norm falls below
    `grad_tol` (0 disables the check).  A non-finite batch loss, a loss
    that climbs 15 nats above the best seen (weights can oscillate with
    growing amplitude long before anything overflows), or a numeric
    overflow inside the forward/backward aborts with TrainingError carrying
    the most recent checkpoint; checkpoints are only taken at steps whose
    loss sits within 1 nat of the best seen, so the carried state predates
    the explosion.
    """
    if schedule not in ("cosine", "constant"):
        raise ValueError(f"unknown schedule {schedule!r}")
    if sample not in ("replacement", "full"):
        raise ValueError(f"unknown sampling mode {sample!r}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    sequences = np.asarray(sequences)
    if sequences.ndim != 2 or sequences.shape[0] < 1:
        raise ValueError(f"training set must be (sequences, seq_len), got {sequences.shape}")
    model = model.clone()
    rng = seeded_rng(seed, TRAIN_STREAM)
    params = [arr for _, arr in model.param_items()]
    velocity = [np.zeros_like(p) for p in params]
    losses = np.zeros(steps)
    grad_norms = np.zeros(steps)
    checkpoint = model.clone()
    ran = 0
    best_loss = np.inf
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(steps):
            if sample == "full":
                batch = sequences
            else:
                pick = rng.integers(0, sequences.shape[0], size=batch_size)
                batch = sequences[pick]
            try:
                loss, trace = lm_forward(model, batch)
            except ValueError:
                # softmax rejects NaN/Inf logits once weights overflow
                raise TrainingError(f"numeric blowup at step {step}", step, checkpoint)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step}", step, checkpoint)
            if loss > best_loss + 15.0:
                raise TrainingError(f"loss explosion at step {step}", step, checkpoint)
            best_loss = min(best_loss, loss)
            grads = lm_backward(model, batch, trace)
            if schedule == "cosine":
                lr_t = lr * 0.5 * (1.0 + np.cos(np.pi * step / steps))
            else:
                lr_t = lr
            if warmup > 0 and step < warmup:
                lr_t *= (step + 1) / warmup
            g_arrays = [arr for _, arr in grads.param_items()]
            for p_arr, v_arr, g_arr in zip(params, velocity, g_arrays):
                v_arr *= momentum
                v_arr += g_arr
                p_arr -= lr_t * v_arr
            losses[step] = loss
            grad_norms[step] = grads.global_norm()
            ran = step + 1
            if checkpoint_every and ran % checkpoint_every == 0 and loss <= best_loss + 1.0:
                checkpoint = model.clone()
            if grad_tol > 0.0 and grad_norms[step] < grad_tol:
                break
    losses = losses[:ran]
    grad_norms = grad_norms[:ran]
    final_loss = float(losses[-1])
    # converged reports the grad_tol criterion, not mere survival
    converged = grad_tol > 0.0 and bool(grad_norms[ran - 1] < grad_tol)
    return TrainResult(model, losses, grad_norms, final_loss, converged)


MODEL_FORMAT = "heaprlab-model-v1"


def save_model(model: MoEModel, path) -> None:
    """Checkpoint to .npz: config as JSON plus every parameter array.

    Round-trips bit-exactly (float64 arrays are stored raw).
    """
    payload = {
        "format": np.array(MODEL_FORMAT),
        "config": np.array(json.dumps(model.config.to_dict(), sort_keys=True)),
        "channel_counts": np.array(json.dumps(model.channel_counts())),
    }
    for name, arr in model.param_items():
        payload["param:" + name] = arr
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_model(path) -> MoEModel:
    with np.load(path, allow_pickle=False) as data:
        if "format" not in data or str(data["format"]) != MODEL_FORMAT:
            raise ValueError(f"{path} is not a model checkpoint (missing or wrong format tag)")
        config = MoEConfig.from_dict(json.loads(str(data["config"])))
        counts = json.loads(str(data["channel_counts"]))

        def take(name, shape=None):
            key = "param:" + name
            if key not in data:
                raise ValueError(f"checkpoint missing array {name}")
            arr = np.asarray(data[key], dtype=np.float64)
            if shape is not None and arr.shape != shape:
                raise ValueError(f"checkpoint array {name} has shape {arr.shape}, expected {shape}")
            return arr

        d = config.d_model
        embedding = take("embedding", (config.vocab, d))
        layers = []
        for l in range(config.num_layers):
            router = take(f"layer{l}/router", (config.num_experts, d))
            experts = []
            for e in range(config.num_experts):
                c = counts[l][e]
                experts.append(
                    ExpertWeights(
                        take(f"layer{l}/expert{e}/w_up", (c, d)),
                        take(f"layer{l}/expert{e}/w_gate", (c, d)),
                        take(f"layer{l}/expert{e}/w_down", (d, c)),
                    )
                )
            layers.append(MoELayer(router, experts))
        head = take("head", (config.vocab, d))
    return MoEModel(config, embedding, layers, head)
