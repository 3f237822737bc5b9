"""Tests for the independent verifiers themselves.

The verifiers earn trust by agreeing with closed-form answers on rigged
inputs: channels silenced ahead of time, zero-phi constructions, analytic
softmax Hessians, and hand-recomputed rank statistics.
"""

import csv
import json

import numpy as np
import pytest
from scipy.stats import spearmanr

from heaprlab.core_math import seeded_rng, softmax
from heaprlab.heapr import AtomicExpertKey, estimate_covariances, compute_importances
from heaprlab.model import MoEConfig, init_model, lm_forward, frozen_routing
from heaprlab.oracle import (
    FDConfig,
    constrained_prune_cost_check,
    fd_cross_hessian,
    fisher_hessian_softmax_check,
    obs_prediction_report,
    shared_gradient_check,
    softmax_nll_hessian,
    true_loss_delta,
    write_obs_csv,
    write_obs_json,
)

CFG = MoEConfig(vocab=10, d_model=4, d_inter=3, num_experts=3, kappa=2, num_layers=2, seq_len=8, seed=13)


def make_calib(cfg: MoEConfig, batches: int, per_batch: int, seed: int = 1) -> list:
    rng = seeded_rng(seed, 9)
    return [rng.integers(0, cfg.vocab, size=(per_batch, cfg.seq_len)) for _ in range(batches)]


def mean_nll(model, batches, routings=None):
    total, count = 0.0, 0
    for i, batch in enumerate(batches):
        _, trace = lm_forward(model, batch, routing=routings[i] if routings else None)
        total += float(trace.token_nll.sum())
        count += trace.token_count
    return total / count


# --- ablation deltas ------------------------------------------------------------


def test_true_loss_delta_of_a_silent_channel_is_zero():
    model = init_model(CFG)
    key = AtomicExpertKey(0, 1, 2)
    model.layers[0].experts[1].w_down[:, 2] = 0.0
    calib = make_calib(CFG, 2, 3)
    assert true_loss_delta(model, calib, key) == 0.0
    assert true_loss_delta(model, calib, key, reroute=True) == 0.0


def test_true_loss_delta_matches_manual_frozen_replay():
    model = init_model(CFG)
    key = AtomicExpertKey(1, 0, 1)
    calib = make_calib(CFG, 2, 3, seed=4)
    routings = []
    for batch in calib:
        _, trace = lm_forward(model, batch)
        routings.append(frozen_routing(trace))
    ablated = model.clone()
    ablated.layers[1].experts[0].w_down[:, 1] = 0.0
    expected = mean_nll(ablated, calib, routings) - mean_nll(model, calib, routings)
    assert true_loss_delta(model, calib, key) == pytest.approx(expected, abs=1e-15)


def test_true_loss_delta_reroute_lets_routing_move():
    model = init_model(CFG)
    key = AtomicExpertKey(0, 0, 0)
    calib = make_calib(CFG, 2, 3, seed=6)
    ablated = model.clone()
    ablated.layers[0].experts[0].w_down[:, 0] = 0.0
    expected = mean_nll(ablated, calib) - mean_nll(model, calib)
    assert true_loss_delta(model, calib, key, reroute=True) == pytest.approx(expected, abs=1e-15)


def test_true_loss_delta_validates_keys():
    model = init_model(CFG)
    calib = make_calib(CFG, 1, 2)
    for bad in (AtomicExpertKey(9, 0, 0), AtomicExpertKey(0, 9, 0), AtomicExpertKey(0, 0, 9)):
        with pytest.raises(ValueError):
            true_loss_delta(model, calib, bad)


# --- curvature probes ------------------------------------------------------------


def test_fd_cross_hessian_separates_channels():
    model = init_model(CFG)
    x = seeded_rng(3, 9).normal(size=CFG.d_model)
    distinct = fd_cross_hessian(model, x, AtomicExpertKey(0, 0, 0), AtomicExpertKey(0, 0, 1), seed=1)
    across = fd_cross_hessian(model, x, AtomicExpertKey(0, 0, 0), AtomicExpertKey(0, 2, 1), seed=1)
    same = fd_cross_hessian(model, x, AtomicExpertKey(0, 1, 1), AtomicExpertKey(0, 1, 1), seed=1)
    assert distinct <= 1e-6
    assert across <= 1e-6
    assert same > 1e-3


def test_fd_cross_hessian_validates():
    model = init_model(CFG)
    x = np.zeros(CFG.d_model)
    with pytest.raises(ValueError):
        fd_cross_hessian(model, x, AtomicExpertKey(0, 0, 0), AtomicExpertKey(1, 0, 0))
    with pytest.raises(ValueError):
        fd_cross_hessian(model, x, AtomicExpertKey(0, 9, 0), AtomicExpertKey(0, 0, 0))
    with pytest.raises(ValueError):
        fd_cross_hessian(model, x, AtomicExpertKey(0, 0, 9), AtomicExpertKey(0, 0, 0))
    with pytest.raises(ValueError):
        FDConfig(first_order_step=0.0)


def test_shared_gradient_check_is_small_on_any_model():
    model = init_model(CFG)
    batch = make_calib(CFG, 1, 4, seed=5)[0]
    assert shared_gradient_check(model, batch, seed=2) <= 1e-5


# --- Fisher / Hessian agreement --------------------------------------------------


def test_softmax_nll_hessian_matches_finite_differences():
    rng = seeded_rng(8, 2)
    z = rng.normal(size=5)
    analytic = softmax_nll_hessian(z)
    h = 1e-4
    y = 3  # the Hessian must not depend on the label
    fd = np.zeros((5, 5))
    for i in range(5):
        for j in range(5):
            zz = z.copy()

            def nll(zi, zj):
                zz[i], zz[j] = z[i] + zi, z[j] + zj
                if i == j:
                    zz[i] = z[i] + zi + zj
                val = -float(np.log(softmax(zz)[y]))
                zz[i], zz[j] = z[i], z[j]
                return val

            fd[i, j] = (nll(h, h) - nll(h, -h) - nll(-h, h) + nll(-h, -h)) / (4 * h * h)
    np.testing.assert_allclose(fd, analytic, atol=1e-6)


def test_fisher_hessian_exact_identity():
    for seed in (0, 1, 2):
        assert fisher_hessian_softmax_check(6, 1, seed, exact=True) <= 1e-12


def test_fisher_hessian_monte_carlo_converges():
    gap = fisher_hessian_softmax_check(4, 50_000, 3)
    assert gap <= 0.1
    again = fisher_hessian_softmax_check(4, 50_000, 3)
    assert gap == again  # seeded draw


def test_fisher_hessian_validates():
    with pytest.raises(ValueError):
        fisher_hessian_softmax_check(1, 10, 0)
    with pytest.raises(ValueError):
        fisher_hessian_softmax_check(4, 0, 0)


# --- constrained-minimum identity -------------------------------------------------


def test_constrained_cost_equals_direct_cost_when_feasible():
    model = init_model(CFG)
    rng = seeded_rng(4, 6)
    for trial in range(5):
        x = rng.normal(size=CFG.d_model)
        key = AtomicExpertKey(0, int(rng.integers(CFG.num_experts)), int(rng.integers(CFG.d_inter)))
        res = constrained_prune_cost_check(model, x, key, seed=trial)
        assert res.feasible
        scale = max(abs(res.direct_cost), 1e-12)
        assert abs(res.achieved_cost - res.direct_cost) / scale <= 1e-8


def test_constrained_cost_explicit_gradient_matches_hand_formula():
    model = init_model(CFG)
    x = seeded_rng(5, 6).normal(size=CFG.d_model)
    grad = seeded_rng(6, 6).normal(size=CFG.d_model)
    key = AtomicExpertKey(0, 0, 0)
    res = constrained_prune_cost_check(model, x, key, grad=grad)
    w = model.layers[0].experts[0]
    u = float(w.w_gate[0] @ x)
    v = float(w.w_up[0] @ x)
    phi = u / (1.0 + np.exp(-u)) * v  # silu(u) * v
    e_vec = phi * w.w_down[:, 0]
    assert res.direct_cost == pytest.approx(0.5 * float(grad @ e_vec) ** 2, rel=1e-12)


def test_constrained_cost_zero_phi_is_trivially_feasible():
    model = init_model(CFG)
    model.layers[0].experts[0].w_up[0] = 0.0  # v = 0 for every x, so phi = 0
    x = seeded_rng(7, 6).normal(size=CFG.d_model)
    res = constrained_prune_cost_check(model, x, AtomicExpertKey(0, 0, 0))
    assert res.feasible
    assert res.achieved_cost == 0.0
    assert res.direct_cost == 0.0


def test_constrained_cost_validates():
    model = init_model(CFG)
    with pytest.raises(ValueError):
        constrained_prune_cost_check(model, np.zeros(3), AtomicExpertKey(0, 0, 0))
    with pytest.raises(ValueError):
        constrained_prune_cost_check(model, np.zeros(CFG.d_model), AtomicExpertKey(0, 0, 9))


# --- prediction vs measurement -----------------------------------------------------


def heapr_table(model, calib):
    return compute_importances(model, calib, estimate_covariances(model, calib))


def test_obs_report_measures_every_key_and_recomputes():
    model = init_model(CFG)
    calib = make_calib(CFG, 2, 3, seed=9)
    table = heapr_table(model, calib)
    report = obs_prediction_report(model, calib, table)
    assert report.keys == table.keys()
    np.testing.assert_array_equal(report.predicted, [table.scores[k] for k in report.keys])
    for i in (0, len(report.keys) // 2, len(report.keys) - 1):
        delta = true_loss_delta(model, calib, report.keys[i])
        assert report.measured[i] == pytest.approx(delta, abs=1e-15)
    assert report.spearman_rho == pytest.approx(
        float(spearmanr(report.predicted, report.measured).statistic)
    )
    assert not report.reroute
    assert report.baseline_loss == pytest.approx(mean_nll(model, calib), abs=1e-12)


def test_obs_report_bottom_decile_bookkeeping():
    model = init_model(CFG)
    calib = make_calib(CFG, 2, 3, seed=10)
    table = heapr_table(model, calib)
    report = obs_prediction_report(model, calib, table)
    n = len(report.keys)
    decile = max(1, n // 10)
    bottom = report.bottom_decile
    assert bottom["count"] == decile
    order = np.argsort(report.predicted, kind="stable")[:decile]
    assert bottom["sum_single_deltas"] == pytest.approx(float(report.measured[order].sum()))
    joint = model.clone()
    for i in order:
        k = report.keys[i]
        joint.layers[k.layer].experts[k.expert].w_down[:, k.channel] = 0.0
    routings = []
    for batch in calib:
        _, trace = lm_forward(model, batch)
        routings.append(frozen_routing(trace))
    expected_joint = mean_nll(joint, calib, routings) - report.baseline_loss
    assert bottom["joint_delta"] == pytest.approx(expected_joint, abs=1e-15)


def test_obs_report_key_sampling_and_validation():
    model = init_model(CFG)
    calib = make_calib(CFG, 1, 3, seed=11)
    table = heapr_table(model, calib)
    sample = table.keys()[:3]
    report = obs_prediction_report(model, calib, table, keys=sample)
    assert report.keys == sample
    assert len(report.measured) == 3
    with pytest.raises(ValueError):
        obs_prediction_report(model, calib, table, keys=[sample[0], sample[0]])
    with pytest.raises(ValueError):
        obs_prediction_report(model, calib, table, keys=[AtomicExpertKey(9, 9, 9)])
    with pytest.raises(ValueError):
        obs_prediction_report(model, calib, table, keys=[])


def test_obs_csv_and_json_roundtrip(tmp_path):
    model = init_model(CFG)
    calib = make_calib(CFG, 1, 3, seed=12)
    table = heapr_table(model, calib)
    report = obs_prediction_report(model, calib, table, keys=table.keys()[:4])
    csv_path = tmp_path / "obs.csv"
    write_obs_csv(report, csv_path)
    with open(csv_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    for row, key, pred, meas in zip(rows, report.keys, report.predicted, report.measured):
        assert (int(row["layer"]), int(row["expert"]), int(row["channel"])) == tuple(key)
        assert float(row["predicted"]) == pred
        assert float(row["measured"]) == meas
    json_path = tmp_path / "obs.json"
    write_obs_json(report, json_path)
    with open(json_path) as fh:
        summary = json.load(fh)
    assert summary["spearman_rho"] == report.spearman_rho
    assert summary["num_keys"] == 4
    assert summary["bottom_decile"] == report.bottom_decile
