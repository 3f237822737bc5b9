"""Second-order atomic-expert pruning.

Stage 1 estimates, per (layer, expert), the covariance of the loss gradient
w.r.t. the expert's output over the calibration tokens routed to it (one
forward + one backward pass per batch).  Stage 2 scores every channel k of
every expert as the mean over routed tokens of the quadratic form
0.5 * e_k(x)^T G e_k(x), where e_k(x) is the channel's output contribution
(one more forward pass; the gradients are reused through G).  Ranking sorts
the scores globally or per layer, and pruning physically deletes the chosen
channels (row of w_up and w_gate, column of w_down).

Total data cost: exactly two forward passes and one backward pass per
calibration batch, which heapr_pipeline asserts with an instrumented
counter.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core_math import symmetrize
from .model import MoEModel, PassCounter, lm_backward, lm_forward

__all__ = [
    "AtomicExpertKey",
    "GradCovariance",
    "ImportanceTable",
    "PruneManifest",
    "PassReport",
    "PipelineResult",
    "LAYERWISE_ONLY_METHODS",
    "estimate_covariances",
    "compute_importances",
    "rank_global",
    "rank_layerwise",
    "apply_prune",
    "heapr_pipeline",
    "write_importance_csv",
    "read_importance_csv",
    "write_manifest_json",
    "read_manifest_json",
]

# methods whose scores are only comparable within a layer
LAYERWISE_ONLY_METHODS = frozenset({"camera"})


class AtomicExpertKey(NamedTuple):
    """Identifies one channel of one expert: (layer, expert, channel)."""

    layer: int
    expert: int
    channel: int


@dataclass
class GradCovariance:
    """Mean outer product of routed-token gradients for one expert."""

    layer: int
    expert: int
    matrix: np.ndarray  # (d_model, d_model), symmetric
    token_count: int


@dataclass
class ImportanceTable:
    """One score per atomic expert key, plus the routed-token count behind it."""

    method: str
    scores: dict  # AtomicExpertKey -> float
    token_counts: dict  # AtomicExpertKey -> int
    layerwise_only: bool = False

    def __post_init__(self):
        if set(self.scores) != set(self.token_counts):
            raise ValueError("scores and token_counts cover different keys")
        for key, s in self.scores.items():
            if not np.isfinite(s):
                raise ValueError(f"non-finite score for {key}")
            if s < -1e-9:
                raise ValueError(f"negative score {s} for {key}")

    def keys(self):
        return sorted(self.scores)

    def items(self):
        """(key, score, token_count) triples in key-lexicographic order."""
        for key in self.keys():
            yield key, self.scores[key], self.token_counts[key]

    def channel_counts(self) -> dict:
        """Channels per (layer, expert) implied by the key set."""
        counts: dict = {}
        for key in self.scores:
            pair = (key.layer, key.expert)
            counts[pair] = counts.get(pair, 0) + 1
        return counts


@dataclass
class PruneManifest:
    """The outcome of a ranking pass: what to remove and what survives."""

    ratio: float
    mode: str  # "global" | "layerwise"
    method: str
    channel_floor: int
    pruned: list  # ordered [(AtomicExpertKey, score)], ranking order
    skipped: list  # [(AtomicExpertKey, score)] kept only because the floor bound
    remaining_channels: dict  # (layer, expert) -> channel count after pruning

    def pruned_keys(self) -> list:
        return [key for key, _ in self.pruned]


@dataclass
class PassReport:
    """Whole-pass tallies for the pipeline's data-cost contract."""

    batches: int
    forward: int
    backward: int

    @property
    def forward_per_batch(self) -> float:
        return self.forward / self.batches if self.batches else 0.0

    @property
    def backward_per_batch(self) -> float:
        return self.backward / self.batches if self.batches else 0.0


@dataclass
class PipelineResult:
    model: MoEModel
    table: ImportanceTable
    manifest: PruneManifest
    passes: PassReport


def _model_keys(model: MoEModel):
    for l, layer in enumerate(model.layers):
        for e, w in enumerate(layer.experts):
            for j in range(w.channels):
                yield AtomicExpertKey(l, e, j)


def estimate_covariances(model: MoEModel, calib, *, counter: PassCounter | None = None) -> list:
    """Stage 1: per-expert gradient covariance over routed calibration tokens.

    One forward and one backward pass per batch.  The captured gradient for
    a routed token is d(batch mean loss)/d(pre-gate expert output) with the
    gate factor included.  Sums are accumulated in full and divided by the
    routed-token count once at the end; never-routed experts get a zero
    matrix and count 0.
    """
    calib = list(calib)
    if not calib:
        raise ValueError("calibration set is empty")
    d = model.config.d_model
    sums = {}
    counts = {}
    for l in range(model.config.num_layers):
        for e in range(model.config.num_experts):
            sums[(l, e)] = np.zeros((d, d))
            counts[(l, e)] = 0
    for batch in calib:
        _, trace = lm_forward(model, batch, counter=counter)
        grads = lm_backward(model, batch, trace, counter=counter)
        for l in range(model.config.num_layers):
            for e in range(model.config.num_experts):
                g = grads.expert_output_grads[l][e]  # (t, d)
                if g.shape[0]:
                    sums[(l, e)] += g.T @ g
                    counts[(l, e)] += g.shape[0]
    out = []
    for (l, e), total in sums.items():
        n = counts[(l, e)]
        mat = symmetrize(total / n) if n else np.zeros((d, d))
        out.append(GradCovariance(l, e, mat, n))
    return out


def _validate_covs(model: MoEModel, covs) -> dict:
    d = model.config.d_model
    expected = {
        (l, e)
        for l in range(model.config.num_layers)
        for e in range(model.config.num_experts)
    }
    cov_map = {}
    for cov in covs:
        pair = (cov.layer, cov.expert)
        if pair not in expected:
            raise ValueError(f"covariance for unknown expert {pair}")
        if pair in cov_map:
            raise ValueError(f"duplicate covariance for expert {pair}")
        if cov.matrix.shape != (d, d):
            raise ValueError(
                f"covariance for {pair} has shape {cov.matrix.shape}, expected {(d, d)}"
            )
        if not np.allclose(cov.matrix, cov.matrix.T, atol=1e-12, rtol=0.0):
            raise ValueError(f"covariance for {pair} is not symmetric")
        cov_map[pair] = cov
    missing = expected - set(cov_map)
    if missing:
        raise ValueError(f"missing covariances for {sorted(missing)}")
    return cov_map


def compute_importances(
    model: MoEModel,
    calib,
    covs,
    *,
    counter: PassCounter | None = None,
    score_log: dict | None = None,
) -> ImportanceTable:
    """Stage 2: score every channel against its expert's shared covariance.

    One forward pass per batch; no new gradients.  Channel k's per-token
    contribution e_k(x) = phi_k(x) * w_down[:, k] is a scalar multiple of a
    fixed vector, so 0.5 e_k^T G e_k reduces to 0.5 phi_k^2 * (w_k^T G w_k)
    with the column quadratic precomputed once per expert.

    `score_log`, when given, records the covariance matrix object used per
    (layer, expert) so callers can assert that all channels of an expert
    were scored against the same matrix.
    """
    calib = list(calib)
    if not calib:
        raise ValueError("calibration set is empty")
    cov_map = _validate_covs(model, covs)

    col_quads = {}
    for (l, e), cov in cov_map.items():
        wd = model.layers[l].experts[e].w_down  # (d, c)
        col_quads[(l, e)] = ((cov.matrix @ wd) * wd).sum(axis=0)  # (c,)
        if score_log is not None:
            score_log[(l, e)] = cov.matrix

    score_sums = {pair: np.zeros(q.shape[0]) for pair, q in col_quads.items()}
    counts = {pair: 0 for pair in col_quads}
    for batch in calib:
        _, trace = lm_forward(model, batch, counter=counter)
        for l, lt in enumerate(trace.layer_traces):
            for e, et in enumerate(lt.experts):
                if et.rows.size == 0:
                    continue
                score_sums[(l, e)] += 0.5 * (et.phi ** 2).sum(axis=0) * col_quads[(l, e)]
                counts[(l, e)] += et.rows.size

    scores = {}
    token_counts = {}
    for key in _model_keys(model):
        pair = (key.layer, key.expert)
        n = counts[pair]
        raw = score_sums[pair][key.channel] / n if n else 0.0
        # quadratic form in a PSD accumulator; clip away -1e-18-scale rounding
        scores[key] = float(max(raw, 0.0))
        token_counts[key] = n
    return ImportanceTable("heapr", scores, token_counts, layerwise_only=False)


def _tolerant_floor(x: float) -> int:
    # floor with absolute slack so decimal ratios stored in binary (0.3 * 10
    # = 2.999...96) do not lose a whole unit
    return int(math.floor(x + 1e-9))


def _rank_subset(entries, budget: int, remaining: dict, channel_floor: int):
    """Greedy ascending-score walk; skips keys pinned by the channel floor."""
    pruned = []
    skipped = []
    for key, score in entries:
        if len(pruned) == budget:
            break
        pair = (key.layer, key.expert)
        if remaining[pair] - 1 < channel_floor:
            skipped.append((key, score))
            continue
        pruned.append((key, score))
        remaining[pair] -= 1
    return pruned, skipped


def _check_ratio(ratio: float) -> float:
    ratio = float(ratio)
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"pruning ratio must be in [0, 1), got {ratio}")
    return ratio


def rank_global(table: ImportanceTable, ratio: float, *, channel_floor: int = 1) -> PruneManifest:
    """Mark the floor(ratio * N) lowest-scored channels across the whole model.

    Ties break toward the lexicographically smaller key.  Keys whose removal
    would push their expert below `channel_floor` are skipped (and recorded);
    the walk continues down the sorted list until the budget is met or the
    list is exhausted.
    """
    ratio = _check_ratio(ratio)
    if channel_floor < 0:
        raise ValueError("channel_floor must be >= 0")
    if table.layerwise_only:
        raise ValueError(
            f"method {table.method!r} produces layer-local scores; use rank_layerwise"
        )
    entries = sorted(table.scores.items(), key=lambda kv: (kv[1], kv[0]))
    budget = _tolerant_floor(ratio * len(entries))
    remaining = table.channel_counts()
    pruned, skipped = _rank_subset(entries, budget, remaining, channel_floor)
    return PruneManifest(ratio, "global", table.method, channel_floor, pruned, skipped, remaining)


def rank_layerwise(table: ImportanceTable, ratio: float, *, channel_floor: int = 1) -> PruneManifest:
    """As rank_global, but the sort and the floor(ratio * N_layer) quota are
    applied independently inside each layer."""
    ratio = _check_ratio(ratio)
    if channel_floor < 0:
        raise ValueError("channel_floor must be >= 0")
    by_layer: dict = {}
    for key, score in table.scores.items():
        by_layer.setdefault(key.layer, []).append((key, score))
    remaining = table.channel_counts()
    pruned = []
    skipped = []
    for layer in sorted(by_layer):
        entries = sorted(by_layer[layer], key=lambda kv: (kv[1], kv[0]))
        budget = _tolerant_floor(ratio * len(entries))
        p, s = _rank_subset(entries, budget, remaining, channel_floor)
        pruned.extend(p)
        skipped.extend(s)
    return PruneManifest(ratio, "layerwise", table.method, channel_floor, pruned, skipped, remaining)


def apply_prune(model: MoEModel, manifest: PruneManifest) -> MoEModel:
    """Physically delete the manifest's channels; returns a new model.

    Routers are untouched.  Experts become ragged (each keeps its own channel
    count); an expert reduced to zero channels is masked out of routing by
    the forward pass.
    """
    drops: dict = {}
    for key, _ in manifest.pruned:
        if not 0 <= key.layer < model.config.num_layers:
            raise ValueError(f"manifest key {key} references unknown layer")
        if not 0 <= key.expert < model.config.num_experts:
            raise ValueError(f"manifest key {key} references unknown expert")
        c = model.layers[key.layer].experts[key.expert].channels
        if not 0 <= key.channel < c:
            raise ValueError(f"manifest key {key} out of range for {c} channels")
        pair = (key.layer, key.expert)
        drops.setdefault(pair, set())
        if key.channel in drops[pair]:
            raise ValueError(f"manifest prunes {key} twice")
        drops[pair].add(key.channel)

    pruned = model.clone()
    for (l, e), channels in drops.items():
        w = pruned.layers[l].experts[e]
        keep = np.setdiff1d(np.arange(w.channels), sorted(channels))
        expected = manifest.remaining_channels.get((l, e))
        if expected is not None and keep.size != expected:
            raise ValueError(
                f"manifest inconsistency at layer {l} expert {e}: "
                f"{keep.size} channels left, manifest says {expected}"
            )
        pruned.layers[l].experts[e] = type(w)(
            w.w_up[keep], w.w_gate[keep], w.w_down[:, keep]
        )
    return pruned


def heapr_pipeline(
    model: MoEModel,
    calib,
    ratio: float,
    mode: str = "global",
    *,
    channel_floor: int = 1,
    stage2_calib=None,
) -> PipelineResult:
    """Covariances -> importances -> ranking -> physical pruning.

    The returned pass report must show exactly 2 forward and 1 backward
    traversals per calibration batch; stage 2 reuses the stage-1 batches
    unless `stage2_calib` supplies a disjoint set.
    """
    if mode not in ("global", "layerwise"):
        raise ValueError(f"mode must be 'global' or 'layerwise', got {mode!r}")
    calib = list(calib)
    counter = PassCounter()
    covs = estimate_covariances(model, calib, counter=counter)
    table = compute_importances(
        model, stage2_calib if stage2_calib is not None else calib, covs, counter=counter
    )
    if mode == "global":
        manifest = rank_global(table, ratio, channel_floor=channel_floor)
    else:
        manifest = rank_layerwise(table, ratio, channel_floor=channel_floor)
    pruned = apply_prune(model, manifest)
    report = PassReport(len(calib), counter.forward, counter.backward)
    return PipelineResult(pruned, table, manifest, report)


# ---------------------------------------------------------------------------
# exports

IMPORTANCE_COLUMNS = ["layer", "expert", "channel", "score", "token_count", "method"]


def write_importance_csv(table: ImportanceTable, path) -> None:
    """Key-lexicographic rows; floats written as shortest round-trip repr."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(IMPORTANCE_COLUMNS)
        for key, score, count in table.items():
            writer.writerow([key.layer, key.expert, key.channel, repr(score), count, table.method])


def read_importance_csv(path) -> ImportanceTable:
    scores = {}
    counts = {}
    methods = set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != IMPORTANCE_COLUMNS:
            raise ValueError(f"{path} is not an importance table (columns {reader.fieldnames})")
        for row in reader:
            key = AtomicExpertKey(int(row["layer"]), int(row["expert"]), int(row["channel"]))
            scores[key] = float(row["score"])
            counts[key] = int(row["token_count"])
            methods.add(row["method"])
    if len(methods) != 1:
        raise ValueError(f"{path} mixes methods: {sorted(methods)}")
    method = methods.pop()
    return ImportanceTable(method, scores, counts, layerwise_only=method in LAYERWISE_ONLY_METHODS)


def manifest_to_dict(manifest: PruneManifest, *, tool_version: str, config_hash: str) -> dict:
    def key_rows(entries):
        return [
            {"layer": k.layer, "expert": k.expert, "channel": k.channel, "score": s}
            for k, s in entries
        ]

    return {
        "ratio": manifest.ratio,
        "mode": manifest.mode,
        "method": manifest.method,
        "channel_floor": manifest.channel_floor,
        "pruned": key_rows(manifest.pruned),
        "skipped": key_rows(manifest.skipped),
        "remaining_channels": [
            {"layer": l, "expert": e, "channels": c}
            for (l, e), c in sorted(manifest.remaining_channels.items())
        ],
        "tool_version": tool_version,
        "config_hash": config_hash,
    }


def write_manifest_json(manifest: PruneManifest, path, *, tool_version: str, config_hash: str) -> None:
    with open(path, "w") as fh:
        json.dump(manifest_to_dict(manifest, tool_version=tool_version, config_hash=config_hash), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest_json(path) -> PruneManifest:
    with open(path) as fh:
        data = json.load(fh)

    def entries(rows):
        return [
            (AtomicExpertKey(r["layer"], r["expert"], r["channel"]), float(r["score"]))
            for r in rows
        ]

    return PruneManifest(
        ratio=float(data["ratio"]),
        mode=data["mode"],
        method=data["method"],
        channel_floor=int(data["channel_floor"]),
        pruned=entries(data["pruned"]),
        skipped=entries(data["skipped"]),
        remaining_channels={
            (r["layer"], r["expert"]): int(r["channels"]) for r in data["remaining_channels"]
        },
    )
