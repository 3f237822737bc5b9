"""Independent verifiers for everything the pruning estimate relies on.

Each function here measures a quantity the cheap way is supposed to predict,
without sharing code with the estimator: ablation deltas come from actually
zeroing channels and re-running the model, curvature comes from central
finite differences, the Fisher/Hessian equivalence from explicit label
enumeration, and the constrained-minimum identity from an explicit
least-squares solve.  The package's credibility rests on these agreeing
with the fast path, so keep them dumb and direct.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from .core_math import seeded_rng, silu, silu_grad, softmax
from .heapr import AtomicExpertKey, ImportanceTable
from .model import (
    ExpertWeights,
    FrozenRouting,
    MoEModel,
    OutputBump,
    expert_forward,
    frozen_routing,
    lm_backward,
    lm_forward,
)

__all__ = [
    "FDConfig",
    "ObsReport",
    "ConstrainedCostResult",
    "true_loss_delta",
    "fd_cross_hessian",
    "shared_gradient_check",
    "fisher_hessian_softmax_check",
    "softmax_nll_hessian",
    "constrained_prune_cost_check",
    "obs_prediction_report",
    "write_obs_csv",
    "write_obs_json",
]

FD_STREAM = 4
FISHER_STREAM = 5


@dataclass(frozen=True)
class FDConfig:
    """Step sizes for the finite-difference probes.

    Central differences throughout; second derivatives tolerate a larger
    step than first derivatives (truncation vs rounding trade-off at 64-bit).
    """

    first_order_step: float = 1e-5
    second_order_step: float = 1e-3

    def __post_init__(self):
        if self.first_order_step <= 0 or self.second_order_step <= 0:
            raise ValueError("finite-difference steps must be positive")


# ---------------------------------------------------------------------------
# ablation measurements


def _mean_nll(model: MoEModel, batches, routings=None) -> float:
    """Token-weighted mean NLL over a list of batches."""
    total = 0.0
    count = 0
    for i, batch in enumerate(batches):
        _, trace = lm_forward(
            model, batch, routing=routings[i] if routings is not None else None
        )
        total += float(trace.token_nll.sum())
        count += trace.token_count
    if count == 0:
        raise ValueError("no tokens to evaluate")
    return total / count


def _collect_routings(model: MoEModel, batches):
    """Baseline loss and per-batch frozen routing decisions."""
    routings = []
    total = 0.0
    count = 0
    for batch in batches:
        _, trace = lm_forward(model, batch)
        routings.append(frozen_routing(trace))
        total += float(trace.token_nll.sum())
        count += trace.token_count
    if count == 0:
        raise ValueError("no tokens to evaluate")
    return total / count, routings


def _zero_channel(model: MoEModel, key: AtomicExpertKey) -> MoEModel:
    if not 0 <= key.layer < model.config.num_layers:
        raise ValueError(f"key {key} references unknown layer")
    if not 0 <= key.expert < model.config.num_experts:
        raise ValueError(f"key {key} references unknown expert")
    ablated = model.clone()
    w = ablated.layers[key.layer].experts[key.expert]
    if not 0 <= key.channel < w.channels:
        raise ValueError(f"key {key} out of range for {w.channels} channels")
    w.w_down[:, key.channel] = 0.0
    return ablated


def true_loss_delta(model: MoEModel, calib, key: AtomicExpertKey, *, reroute: bool = False) -> float:
    """Measured loss increase from silencing one channel.

    Zeroes w_down[:, channel] (the channel's entire output contribution) and
    returns mean calibration loss minus baseline.  By default the baseline
    routing decisions and gate values are replayed for the ablated model, so
    the measurement matches physical pruning, which never touches the
    router.  `reroute=True` instead lets the ablated hidden states pick
    their own routes; the difference between the two is the routing shift
    the frozen protocol deliberately excludes.
    """
    calib = list(calib)
    if reroute:
        baseline = _mean_nll(model, calib)
        return _mean_nll(_zero_channel(model, key), calib) - baseline
    baseline, routings = _collect_routings(model, calib)
    return _mean_nll(_zero_channel(model, key), calib, routings) - baseline


# ---------------------------------------------------------------------------
# curvature structure

_BLOCKS = ("up", "gate", "down")


def _coord_ref(w: ExpertWeights, channel: int, block: str, offset: int):
    """(array, index) for coordinate `offset` of the channel's given block."""
    if block == "up":
        return w.w_up, (channel, offset)
    if block == "gate":
        return w.w_gate, (channel, offset)
    return w.w_down, (offset, channel)


def fd_cross_hessian(
    model: MoEModel,
    x: np.ndarray,
    key_a: AtomicExpertKey,
    key_b: AtomicExpertKey,
    *,
    step: float = 1e-3,
    num_pairs: int = 32,
    seed: int = 0,
) -> float:
    """Max |mixed second derivative| of the expert output over sampled pairs.

    The differentiated map is the sum of the parent experts' outputs at the
    single input x (both keys must live in the same layer).  One coordinate
    is drawn from each key's parameter triple (w_up row, w_gate row, w_down
    column).  For the same-key control the two coordinates are drawn from
    different projection blocks: mixed derivatives inside a single row or
    column are zero by bilinearity of the channel map, which says nothing
    about cross-channel structure, so only cross-projection pairs probe
    genuine within-channel curvature.
    """
    if key_a.layer != key_b.layer:
        raise ValueError("keys must belong to the same layer")
    x = np.asarray(x, dtype=np.float64)
    layer = model.layers[key_a.layer]
    for key in (key_a, key_b):
        if not 0 <= key.expert < len(layer.experts):
            raise ValueError(f"key {key} references unknown expert")
        if not 0 <= key.channel < layer.experts[key.expert].channels:
            raise ValueError(f"key {key} out of range")
    rng = seeded_rng(seed, FD_STREAM)
    d = model.config.d_model

    experts = {e: layer.experts[e].copy() for e in {key_a.expert, key_b.expert}}

    def output() -> np.ndarray:
        total = np.zeros(d)
        for w in experts.values():
            y, _ = expert_forward(w, x)
            total = total + y
        return total

    same_key = key_a == key_b
    worst = 0.0
    for _ in range(num_pairs):
        if same_key:
            block_a, block_b = rng.choice(len(_BLOCKS), size=2, replace=False)
            block_a, block_b = _BLOCKS[block_a], _BLOCKS[block_b]
        else:
            block_a = _BLOCKS[rng.integers(len(_BLOCKS))]
            block_b = _BLOCKS[rng.integers(len(_BLOCKS))]
        arr_a, idx_a = _coord_ref(experts[key_a.expert], key_a.channel, block_a, int(rng.integers(d)))
        arr_b, idx_b = _coord_ref(experts[key_b.expert], key_b.channel, block_b, int(rng.integers(d)))
        if arr_a is arr_b and idx_a == idx_b:
            continue  # same scalar coordinate; not a mixed derivative
        orig_a = arr_a[idx_a]
        orig_b = arr_b[idx_b]
        corners = []
        for sa, sb in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
            arr_a[idx_a] = orig_a + sa * step
            arr_b[idx_b] = orig_b + sb * step
            corners.append(output())
            arr_a[idx_a] = orig_a
            arr_b[idx_b] = orig_b
        mixed = (corners[0] - corners[1] - corners[2] + corners[3]) / (4.0 * step * step)
        worst = max(worst, float(np.abs(mixed).max()))
    return worst


def shared_gradient_check(
    model: MoEModel,
    batch,
    *,
    step: float = 1e-4,
    num_sites: int = 8,
    num_channels: int = 2,
    seed: int = 0,
) -> float:
    """Probe that every channel of an expert sees the same loss gradient.

    For sampled (layer, expert, token, component) sites: bump the expert's
    pre-gate output additively through `num_channels` different channels'
    contributions, measure the loss by central differences under frozen
    routing, and compare those slopes to each other and to the captured
    gradient from the backward pass.  Returns the max absolute deviation.
    """
    rng = seeded_rng(seed, FD_STREAM)
    _, trace = lm_forward(model, batch)
    grads = lm_backward(model, batch, trace)
    routing = frozen_routing(trace)
    n_tokens = trace.token_count

    sites = []
    for l, lt in enumerate(trace.layer_traces):
        for e, et in enumerate(lt.experts):
            if et.rows.size:
                sites.append((l, e))
    if not sites:
        raise ValueError("no routed experts in this batch")
    worst = 0.0
    d = model.config.d_model
    for _ in range(num_sites):
        l, e = sites[rng.integers(len(sites))]
        et = trace.layer_traces[l].experts[e]
        pos = int(rng.integers(et.rows.size))
        row = int(et.rows[pos])
        comp = int(rng.integers(d))
        channels = rng.choice(et.phi.shape[1], size=min(num_channels, et.phi.shape[1]), replace=False)
        captured = float(grads.expert_output_grads[l][e][pos, comp])
        slopes = []
        delta = np.zeros(d)
        for j in channels:
            delta[comp] = step
            up = lm_forward(model, batch, routing=routing, bumps=[OutputBump(l, e, row, int(j), delta.copy())])[0]
            delta[comp] = -step
            down = lm_forward(model, batch, routing=routing, bumps=[OutputBump(l, e, row, int(j), delta.copy())])[0]
            delta[comp] = 0.0
            # pre-gate bump: the slope picks up the gate factor through the
            # weighted sum, matching the captured gradient's convention
            slopes.append((up - down) / (2.0 * step))
        for s in slopes:
            worst = max(worst, abs(s - captured))
        for i in range(len(slopes)):
            for k in range(i + 1, len(slopes)):
                worst = max(worst, abs(slopes[i] - slopes[k]))
    return worst


# ---------------------------------------------------------------------------
# Fisher / Hessian agreement


def softmax_nll_hessian(z: np.ndarray) -> np.ndarray:
    """Analytic Hessian of -log softmax(z)_y w.r.t. z: diag(p) - p p^T.

    Independent of the label y, which is what makes the label-expectation
    comparison meaningful.
    """
    p = softmax(np.asarray(z, dtype=np.float64))
    return np.diag(p) - np.outer(p, p)


def fisher_hessian_softmax_check(
    dim: int,
    num_samples: int,
    seed: int,
    *,
    exact: bool = False,
) -> float:
    """Relative Frobenius gap between the label Fisher and the NLL Hessian.

    Draws a fixed random logit vector z, forms the analytic Hessian
    diag(p) - p p^T, and compares it with E_{y~p}[g g^T] for g = p - e_y:
    either the closed-form expectation (exact=True) or a Monte-Carlo
    estimate from `num_samples` label draws.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    rng = seeded_rng(seed, FISHER_STREAM)
    z = rng.normal(size=dim)
    p = softmax(z)
    hessian = np.diag(p) - np.outer(p, p)
    eye = np.eye(dim)
    if exact:
        fisher = np.zeros((dim, dim))
        for y in range(dim):
            g = p - eye[y]
            fisher += p[y] * np.outer(g, g)
    else:
        if num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        counts = rng.multinomial(num_samples, p)
        fisher = np.zeros((dim, dim))
        for y in range(dim):
            if counts[y]:
                g = p - eye[y]
                fisher += counts[y] * np.outer(g, g)
        fisher /= num_samples
    return float(np.linalg.norm(fisher - hessian) / np.linalg.norm(hessian))


# ---------------------------------------------------------------------------
# constrained-minimum identity


@dataclass
class ConstrainedCostResult:
    """Outcome of the explicit zeroing-constrained quadratic minimization."""

    achieved_cost: float  # 0.5 d^T (J^T M J) d at the least-norm feasible d
    direct_cost: float  # 0.5 e^T M e
    feasible: bool
    constraint_residual: float


def constrained_prune_cost_check(
    model: MoEModel,
    x: np.ndarray,
    key: AtomicExpertKey,
    *,
    grad: np.ndarray | None = None,
    seed: int = 0,
    residual_tol: float = 1e-8,
) -> ConstrainedCostResult:
    """Solve the single-sample zeroing problem explicitly and compare costs.

    The channel's output e(x) is linear in each of its 3*d_model parameters;
    J is its Jacobian w.r.t. the stacked (w_up row, w_gate row, w_down
    column) and M = grad grad^T the rank-one curvature proxy.  Minimizing
    0.5 d^T (J^T M J) d subject to J d = -e(x) is solved by any feasible d,
    because the objective depends on d only through J d; the achieved cost
    must therefore equal 0.5 e^T M e whenever the constraint is satisfiable.
    A rank-deficient J that cannot reach -e(x) is reported as infeasible,
    not an error.
    """
    x = np.asarray(x, dtype=np.float64)
    d = model.config.d_model
    if x.shape != (d,):
        raise ValueError(f"x must have shape ({d},), got {x.shape}")
    w = model.layers[key.layer].experts[key.expert]
    if not 0 <= key.channel < w.channels:
        raise ValueError(f"key {key} out of range")
    if grad is None:
        grad = seeded_rng(seed, FD_STREAM).normal(size=d)
    grad = np.asarray(grad, dtype=np.float64)

    j = key.channel
    u = float(w.w_gate[j] @ x)
    v = float(w.w_up[j] @ x)
    s = float(silu(np.array([u]))[0])
    s_grad = float(silu_grad(np.array([u]))[0])
    phi = s * v
    col = w.w_down[:, j]
    e_vec = phi * col

    jac = np.zeros((d, 3 * d))
    jac[:, :d] = np.outer(col, s * x)  # d e / d (w_up row)
    jac[:, d : 2 * d] = np.outer(col, v * s_grad * x)  # d e / d (w_gate row)
    jac[:, 2 * d :] = phi * np.eye(d)  # d e / d (w_down column)

    delta, _, _, _ = np.linalg.lstsq(jac, -e_vec, rcond=None)
    residual = float(np.linalg.norm(jac @ delta + e_vec))
    feasible = residual <= residual_tol * max(1.0, float(np.linalg.norm(e_vec)))
    m = np.outer(grad, grad)
    achieved = float(0.5 * delta @ (jac.T @ (m @ (jac @ delta))))
    direct = float(0.5 * e_vec @ (m @ e_vec))
    return ConstrainedCostResult(achieved, direct, feasible, residual)


# ---------------------------------------------------------------------------
# prediction vs measurement


@dataclass
class ObsReport:
    """Predicted loss deltas against measured ablation deltas."""

    keys: list
    predicted: np.ndarray
    measured: np.ndarray
    spearman_rho: float
    baseline_loss: float
    bottom_decile: dict
    reroute: bool


def obs_prediction_report(
    model: MoEModel,
    calib,
    table: ImportanceTable,
    *,
    keys=None,
    reroute: bool = False,
) -> ObsReport:
    """Measure true_loss_delta for every scored key and compare to the table.

    `keys` restricts the sweep to a sample (ordering preserved, duplicates
    rejected); default is every key in the table.  The summary includes the
    Spearman rank correlation and error statistics on the bottom decile by
    predicted score, plus the jointly-measured delta of that decile next to
    the sum of its single-key deltas: the quadratic model treats channels as
    independent, and this pair of numbers is where the interaction error
    shows.
    """
    calib = list(calib)
    if keys is None:
        keys = table.keys()
    else:
        keys = list(keys)
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate keys in sample")
        for key in keys:
            if key not in table.scores:
                raise ValueError(f"key {key} not in importance table")
    if not keys:
        raise ValueError("no keys to report on")

    if reroute:
        baseline = _mean_nll(model, calib)
        routings = None
    else:
        baseline, routings = _collect_routings(model, calib)

    predicted = np.array([table.scores[k] for k in keys])
    measured = np.zeros(len(keys))
    for i, key in enumerate(keys):
        ablated = _zero_channel(model, key)
        measured[i] = _mean_nll(ablated, calib, routings) - baseline

    rho = float(spearmanr(predicted, measured).statistic)

    decile = max(1, len(keys) // 10)
    order = np.argsort(predicted, kind="stable")[:decile]
    joint = model.clone()
    for i in order:
        k = keys[i]
        joint.layers[k.layer].experts[k.expert].w_down[:, k.channel] = 0.0
    joint_measured = _mean_nll(joint, calib, routings) - baseline
    errs = np.abs(predicted[order] - measured[order])
    denom = np.maximum(np.abs(measured[order]), 1e-12)
    bottom = {
        "count": int(decile),
        "mean_abs_err": float(errs.mean()),
        "max_abs_err": float(errs.max()),
        "mean_rel_err": float((errs / denom).mean()),
        "sum_single_deltas": float(measured[order].sum()),
        "joint_delta": float(joint_measured),
    }
    return ObsReport(list(keys), predicted, measured, rho, baseline, bottom, reroute)


OBS_COLUMNS = ["layer", "expert", "channel", "predicted", "measured"]


def write_obs_csv(report: ObsReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(OBS_COLUMNS)
        for key, pred, meas in zip(report.keys, report.predicted, report.measured):
            writer.writerow([key.layer, key.expert, key.channel, repr(float(pred)), repr(float(meas))])


def write_obs_json(report: ObsReport, path) -> None:
    summary = {
        "spearman_rho": report.spearman_rho,
        "baseline_loss": report.baseline_loss,
        "num_keys": len(report.keys),
        "reroute": report.reroute,
        "bottom_decile": report.bottom_decile,
    }
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
