"""Competing channel-importance criteria at the same granularity.

These exist so the second-order scores can be compared against cheaper
signals on identical footing: an activation-energy heuristic (layer-local by
construction), uniform-random scores, weight-magnitude products, and a
whole-expert dropping scheme that consumes any channel table.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_math import seeded_rng
from .heapr import AtomicExpertKey, ImportanceTable, PruneManifest, _check_ratio, _tolerant_floor
from .model import MoEModel, PassCounter, lm_forward

__all__ = [
    "CameraConfig",
    "camera_energy",
    "random_importance",
    "magnitude_importance",
    "expert_drop_manifest",
]

RANDOM_IMPORTANCE_STREAM = 3


@dataclass(frozen=True)
class CameraConfig:
    """alpha weights the second energy term; the score scales by (1 + alpha)."""

    alpha: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")


def _all_keys(model: MoEModel):
    for l, layer in enumerate(model.layers):
        for e, w in enumerate(layer.experts):
            for j in range(w.channels):
                yield AtomicExpertKey(l, e, j)


def camera_energy(
    model: MoEModel,
    calib,
    cfg: CameraConfig = CameraConfig(),
    *,
    counter: PassCounter | None = None,
) -> ImportanceTable:
    """Activation-energy scores: mean over routed tokens of
    (1 + alpha) * |phi_k(x)| * ||w_down[:, k]||_2.

    The channel activation phi is a scalar per token, so its 2-norm is its
    absolute value.  Activation magnitudes are not comparable across layers,
    so the table is flagged layerwise-only and rank_global refuses it.
    """
    calib = list(calib)
    if not calib:
        raise ValueError("calibration set is empty")
    abs_sums = {}
    counts = {}
    for l, layer in enumerate(model.layers):
        for e, w in enumerate(layer.experts):
            abs_sums[(l, e)] = np.zeros(w.channels)
            counts[(l, e)] = 0
    for batch in calib:
        _, trace = lm_forward(model, batch, counter=counter)
        for l, lt in enumerate(trace.layer_traces):
            for e, et in enumerate(lt.experts):
                if et.rows.size == 0:
                    continue
                abs_sums[(l, e)] += np.abs(et.phi).sum(axis=0)
                counts[(l, e)] += et.rows.size
    scale = 1.0 + cfg.alpha
    scores = {}
    token_counts = {}
    for key in _all_keys(model):
        pair = (key.layer, key.expert)
        n = counts[pair]
        col_norm = float(
            np.linalg.norm(model.layers[key.layer].experts[key.expert].w_down[:, key.channel])
        )
        mean_abs = abs_sums[pair][key.channel] / n if n else 0.0
        scores[key] = scale * mean_abs * col_norm
        token_counts[key] = n
    return ImportanceTable("camera", scores, token_counts, layerwise_only=True)


def random_importance(model: MoEModel, seed: int) -> ImportanceTable:
    """Uniform(0, 1) scores drawn in key-lexicographic order; control baseline."""
    rng = seeded_rng(seed, RANDOM_IMPORTANCE_STREAM)
    scores = {}
    counts = {}
    for key in sorted(_all_keys(model)):
        scores[key] = float(rng.random())
        counts[key] = 0
    return ImportanceTable("random", scores, counts, layerwise_only=False)


def magnitude_importance(model: MoEModel) -> ImportanceTable:
    """Data-free norm product: ||w_up row|| * ||w_gate row|| * ||w_down column||."""
    scores = {}
    counts = {}
    for l, layer in enumerate(model.layers):
        for e, w in enumerate(layer.experts):
            up = np.linalg.norm(w.w_up, axis=1)
            gate = np.linalg.norm(w.w_gate, axis=1)
            down = np.linalg.norm(w.w_down, axis=0)
            prod = up * gate * down
            for j in range(w.channels):
                scores[AtomicExpertKey(l, e, j)] = float(prod[j])
                counts[AtomicExpertKey(l, e, j)] = 0
    return ImportanceTable("magnitude", scores, counts, layerwise_only=False)


def expert_drop_manifest(table: ImportanceTable, ratio: float) -> PruneManifest:
    """Whole-expert dropping driven by per-expert score sums.

    Experts are dropped in ascending order of their aggregate channel score
    (ties toward the smaller (layer, expert) pair) until the atomic-channel
    budget floor(ratio * N) is met; the final drop may overshoot the budget
    by at most one expert's channel count.  Channels are pruned only in
    whole-expert groups, so the floor is 0 by construction.
    """
    ratio = _check_ratio(ratio)
    aggregates: dict = {}
    per_expert: dict = {}
    for key, score, _ in table.items():
        pair = (key.layer, key.expert)
        aggregates[pair] = aggregates.get(pair, 0.0) + score
        per_expert.setdefault(pair, []).append((key, score))
    total = len(table.scores)
    budget = _tolerant_floor(ratio * total)
    remaining = table.channel_counts()
    pruned = []
    for pair in sorted(aggregates, key=lambda p: (aggregates[p], p)):
        if len(pruned) >= budget:
            break
        pruned.extend(sorted(per_expert[pair]))
        remaining[pair] = 0
    return PruneManifest(ratio, "global", "expert_drop", 0, pruned, [], remaining)
