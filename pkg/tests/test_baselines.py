"""Baseline importance criteria: activation energy, random, magnitude, expert drop."""

import numpy as np
import pytest

from heaprlab.baselines import (
    CameraConfig,
    camera_energy,
    expert_drop_manifest,
    magnitude_importance,
    random_importance,
)
from heaprlab.core_math import seeded_rng
from heaprlab.heapr import AtomicExpertKey, ImportanceTable, apply_prune, rank_global
from heaprlab.model import MoEConfig, PassCounter, init_model, lm_forward

CFG = MoEConfig(vocab=12, d_model=4, d_inter=3, num_experts=4, kappa=2, num_layers=2, seq_len=8, seed=7)


def make_calib(cfg: MoEConfig, batches: int, per_batch: int, seed: int = 1) -> list:
    rng = seeded_rng(seed, 9)
    return [rng.integers(0, cfg.vocab, size=(per_batch, cfg.seq_len)) for _ in range(batches)]


# --- activation energy --------------------------------------------------------


def naive_camera(model, calib, alpha):
    sums: dict = {}
    counts: dict = {}
    for batch in calib:
        _, trace = lm_forward(model, batch)
        for l, lt in enumerate(trace.layer_traces):
            for e, et in enumerate(lt.experts):
                for t in range(et.rows.size):
                    for k in range(et.phi.shape[1]):
                        key = AtomicExpertKey(l, e, k)
                        sums[key] = sums.get(key, 0.0) + abs(et.phi[t, k])
                counts[(l, e)] = counts.get((l, e), 0) + et.rows.size
    out = {}
    for l, layer in enumerate(model.layers):
        for e, w in enumerate(layer.experts):
            n = counts.get((l, e), 0)
            for k in range(w.channels):
                key = AtomicExpertKey(l, e, k)
                mean_abs = sums.get(key, 0.0) / n if n else 0.0
                out[key] = ((1.0 + alpha) * mean_abs * np.linalg.norm(w.w_down[:, k]), n)
    return out


def test_camera_energy_matches_per_token_loop():
    model = init_model(CFG)
    calib = make_calib(CFG, batches=3, per_batch=3)
    table = camera_energy(model, calib, CameraConfig(alpha=0.5))
    expected = naive_camera(model, calib, 0.5)
    assert set(table.scores) == set(expected)
    for key, (score, count) in expected.items():
        assert table.scores[key] == pytest.approx(score, abs=1e-12)
        assert table.token_counts[key] == count
    assert table.method == "camera"


def test_camera_energy_is_layer_local_and_forward_only():
    model = init_model(CFG)
    calib = make_calib(CFG, batches=4, per_batch=2)
    counter = PassCounter()
    table = camera_energy(model, calib, counter=counter)
    assert table.layerwise_only
    assert (counter.forward, counter.backward) == (4, 0)
    with pytest.raises(ValueError):
        rank_global(table, 0.25)


def test_camera_alpha_rescales_every_score():
    model = init_model(CFG)
    calib = make_calib(CFG, batches=2, per_batch=3)
    base = camera_energy(model, calib, CameraConfig(alpha=0.0))
    doubled = camera_energy(model, calib, CameraConfig(alpha=1.0))
    for key in base.keys():
        assert doubled.scores[key] == pytest.approx(2.0 * base.scores[key], rel=1e-12)


def test_camera_validates_inputs():
    with pytest.raises(ValueError):
        camera_energy(init_model(CFG), [])
    with pytest.raises(ValueError):
        CameraConfig(alpha=-0.1)


# --- random and magnitude -----------------------------------------------------


def test_random_importance_is_seeded_and_weight_free():
    a = init_model(CFG)
    b = init_model(MoEConfig(**{**CFG.to_dict(), "seed": 99}))
    t1 = random_importance(a, seed=5)
    t2 = random_importance(b, seed=5)
    t3 = random_importance(a, seed=6)
    assert t1.scores == t2.scores  # same architecture, weights irrelevant
    assert t1.scores != t3.scores
    assert t1.method == "random"
    assert all(0.0 <= s < 1.0 for s in t1.scores.values())
    assert all(c == 0 for c in t1.token_counts.values())
    assert not t1.layerwise_only


def test_magnitude_importance_matches_norm_products():
    model = init_model(CFG)
    table = magnitude_importance(model)
    for key, score, count in table.items():
        w = model.layers[key.layer].experts[key.expert]
        expected = (
            np.linalg.norm(w.w_up[key.channel])
            * np.linalg.norm(w.w_gate[key.channel])
            * np.linalg.norm(w.w_down[:, key.channel])
        )
        assert score == pytest.approx(expected, rel=1e-12)
        assert count == 0
    assert table.method == "magnitude"
    assert not table.layerwise_only


# --- whole-expert dropping ----------------------------------------------------


def drop_table(aggregates: dict, channels: int = 2) -> ImportanceTable:
    """One layer; expert e gets `channels` channels splitting aggregates[e]."""
    scores = {}
    for e, total in aggregates.items():
        for c in range(channels):
            scores[AtomicExpertKey(0, e, c)] = total / channels
    return ImportanceTable("toy", scores, {k: 1 for k in scores})


def test_expert_drop_removes_whole_experts_in_aggregate_order():
    table = drop_table({0: 0.3, 1: 0.1, 2: 0.9})
    manifest = expert_drop_manifest(table, 2 / 6)
    assert manifest.pruned_keys() == [AtomicExpertKey(0, 1, 0), AtomicExpertKey(0, 1, 1)]
    assert manifest.remaining_channels == {(0, 0): 2, (0, 1): 0, (0, 2): 2}
    assert (manifest.method, manifest.mode, manifest.channel_floor) == ("expert_drop", "global", 0)


def test_expert_drop_may_overshoot_by_one_expert():
    table = drop_table({0: 0.3, 1: 0.1, 2: 0.9})
    manifest = expert_drop_manifest(table, 0.5)  # budget 3, drops land on 2 or 4
    assert [k.expert for k in manifest.pruned_keys()] == [1, 1, 0, 0]
    assert manifest.remaining_channels == {(0, 0): 0, (0, 1): 0, (0, 2): 2}


def test_expert_drop_zero_ratio_drops_nothing():
    table = drop_table({0: 0.3, 1: 0.1})
    manifest = expert_drop_manifest(table, 0.0)
    assert manifest.pruned == []
    assert manifest.remaining_channels == {(0, 0): 2, (0, 1): 2}


def test_expert_drop_ties_break_toward_smaller_expert():
    table = drop_table({0: 0.5, 1: 0.5, 2: 0.5})
    manifest = expert_drop_manifest(table, 2 / 6)
    assert {k.expert for k in manifest.pruned_keys()} == {0}


def test_expert_drop_manifest_applies_and_masks_routing():
    model = init_model(CFG)
    table = magnitude_importance(model)
    manifest = expert_drop_manifest(table, 0.25)
    pruned = apply_prune(model, manifest)
    dropped = {pair for pair, n in manifest.remaining_channels.items() if n == 0}
    assert dropped
    for l, e in dropped:
        assert pruned.layers[l].experts[e].channels == 0
        assert not pruned.layers[l].alive()[e]
    _, trace = lm_forward(pruned, make_calib(CFG, 1, 4)[0])
    for l, e in dropped:
        assert trace.layer_traces[l].experts[e].rows.size == 0
