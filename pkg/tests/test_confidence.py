import math

import numpy as np
import pytest

from oodgate.confidence import (
    LogitRecord,
    dice_mask,
    odin_grid,
    react_threshold,
    score_de_mcp,
    score_dice,
    score_energy,
    score_gradnorm,
    score_max_logit,
    score_mcdp,
    score_mcp,
    score_odin,
    score_react,
    score_shannon_entropy,
)
from oodgate.engine import Dense, ModelParams, ModelSpec, forward, softmax
from oodgate.errors import EmptySamples, InvariantViolation, MissingFitStatistics

from helpers import entropy_loop, random_model


def random_record(rng, k=None, m=None, nonneg=True):
    k = k or int(rng.integers(2, 6))
    m = m or int(rng.integers(2, 10))
    f = rng.uniform(0, 2, m) if nonneg else rng.standard_normal(m)
    w, b = rng.standard_normal((k, m)), rng.standard_normal(k)
    return LogitRecord(w @ f + b, f, w, b)


def test_record_needs_two_classes():
    with pytest.raises(InvariantViolation):
        LogitRecord(np.array([1.0]))


# --- MCP / SE / MLS / energy -----------------------------------------------


def test_mcp_examples():
    assert score_mcp(np.array([0.0, 0.0])) == 0.5
    assert abs(score_mcp(np.array([math.log(3), 0.0])) - 0.75) < 1e-15


def test_mcp_shift_invariant_and_bounded(rng):
    for _ in range(100):
        r = random_record(rng)
        s = score_mcp(r)
        assert abs(score_mcp(r.logits + rng.normal() * 50) - s) < 1e-12
        assert 1 / len(r.logits) - 1e-15 <= s <= 1


def test_shannon_entropy_examples(rng):
    assert abs(score_shannon_entropy(np.zeros(4)) + math.log(4)) < 1e-12
    assert abs(score_shannon_entropy(np.array([100.0, 0.0]))) < 1e-40
    for _ in range(100):
        r = random_record(rng)
        s = score_shannon_entropy(r)
        assert abs(s + entropy_loop(softmax(r.logits))) < 1e-12
        assert -math.log(len(r.logits)) - 1e-12 <= s <= 0


def test_max_logit(rng):
    assert score_max_logit(np.array([2.0, -1.0, 0.5])) == 2.0
    for _ in range(50):
        z = rng.standard_normal(int(rng.integers(2, 9)))
        c = rng.normal()
        best = z[0]
        for v in z[1:]:
            best = v if v > best else best
        assert score_max_logit(z) == best
        assert abs(score_max_logit(z + c) - (best + c)) < 1e-12


def test_energy_examples(rng):
    for k in (2, 3, 7):
        assert abs(score_energy(np.zeros(k)) - math.log(k)) < 1e-15
    assert abs(score_energy(np.array([1.0, 1.0])) - (1 + math.log(2))) < 1e-15
    assert abs(score_energy(np.array([1000.0, 1000.0])) - (1000 + math.log(2))) < 1e-12
    for _ in range(100):
        z = rng.standard_normal(5) * 10
        assert score_energy(z) >= score_max_logit(z)
        t = rng.uniform(0.1, 10)
        assert abs(score_energy(z, t) - t * math.log(sum(math.exp(v / t) for v in z))) < 1e-10


def test_batch_scores_match_single(rng):
    z = rng.standard_normal((6, 3))
    for fn in (score_mcp, score_shannon_entropy, score_max_logit, score_energy):
        np.testing.assert_allclose(fn(z), [fn(row) for row in z], atol=1e-15)


# --- MC dropout and ensembles ---------------------------------------------


def test_mcdp_identical_samples_have_zero_mi(rng):
    p = softmax(rng.standard_normal(4))
    assert abs(score_mcdp(np.tile(p, (10, 1)), "mi")) < 1e-15


def test_mcdp_single_sample_pe_is_se(rng):
    z = rng.standard_normal(4)
    assert abs(score_mcdp(softmax(z)[None], "pe") - score_shannon_entropy(z)) < 1e-15


def test_mcdp_disagreeing_pair():
    s = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert score_mcdp(s, "mcp") == 0.5
    assert abs(score_mcdp(s, "pe") + math.log(2)) < 1e-15
    assert abs(score_mcdp(s, "mi") + math.log(2)) < 1e-15


def test_mcdp_errors():
    with pytest.raises(EmptySamples):
        score_mcdp(np.zeros((0, 3)), "mcp")
    with pytest.raises(ValueError):
        score_mcdp(np.ones((2, 2)) / 2, "bald")


def test_mi_is_never_positive(rng):
    for _ in range(50):
        s = softmax(rng.standard_normal((int(rng.integers(1, 20)), 3)) * 3)
        assert score_mcdp(s, "mi") <= 1e-15


def test_de_mcp(rng):
    p = softmax(rng.standard_normal(3))
    assert abs(score_de_mcp(np.tile(p, (5, 1))) - p.max()) < 1e-15
    assert score_de_mcp(np.array([[1.0, 0.0], [0.0, 1.0]])) == 0.5
    members = softmax(rng.standard_normal((5, 4)))
    assert score_de_mcp(members) == pytest.approx(score_de_mcp(members[rng.permutation(5)]), abs=1e-15)
    with pytest.raises(EmptySamples):
        score_de_mcp(np.zeros((0, 2)))


# --- GradNorm -------------------------------------------------------------


def gradnorm_loop(r):
    # d/dW_ij of -sum_k u_k log p_k = -sum_k u_k (delta_ki - p_i) f_j
    k, m = r.weights.shape
    p = softmax(r.logits)
    total = 0.0
    for i in range(k):
        for j in range(m):
            g = -sum((1.0 / k) * ((1.0 if kk == i else 0.0) - p[i]) * r.features[j] for kk in range(k))
            total += abs(g)
    return total


def test_gradnorm_examples(rng):
    r = LogitRecord(np.zeros(3), rng.uniform(0, 1, 4), rng.standard_normal((3, 4)))
    assert score_gradnorm(r) == 0.0
    r = LogitRecord(rng.standard_normal(3), np.zeros(4), rng.standard_normal((3, 4)))
    assert score_gradnorm(r) == 0.0
    for _ in range(100):
        r = random_record(rng, nonneg=False)
        assert abs(score_gradnorm(r) - gradnorm_loop(r)) < 1e-10


def test_gradnorm_needs_features():
    with pytest.raises(MissingFitStatistics):
        score_gradnorm(LogitRecord(np.zeros(2)))


# --- ODIN -----------------------------------------------------------------


def test_odin_identity_configuration(rng):
    spec, params, x = random_model(rng, "conv")
    assert score_odin(spec, params, x, temperature=1.0, epsilon=0.0) == score_mcp(forward(spec, params, x).logits)


def test_odin_large_temperature_flattens(rng):
    spec, params, x = random_model(rng, "mlp")
    assert abs(score_odin(spec, params, x, temperature=1e6, epsilon=1e-3) - 1 / spec.num_classes) < 1e-4


def test_odin_linear_closed_form(rng):
    for _ in range(20):
        w, b = rng.standard_normal((2, 6)), rng.standard_normal(2)
        spec = ModelSpec((6,), (Dense(6, 2),), 2)
        params = ModelParams([w], [b])
        x = rng.standard_normal(6)
        t, eps = float(rng.uniform(1, 100)), 2e-3
        k = int(np.argmax(w @ x + b))
        # log p_k grows along sign(w_k - w_other)
        x2 = x + eps * np.sign(w[k] - w[1 - k])
        expect = softmax((w @ x2 + b) / t).max()
        assert abs(score_odin(spec, params, x, temperature=t, epsilon=eps) - expect) < 1e-9


def test_odin_grid_matches_single_calls(rng):
    spec, params, _ = random_model(rng, "conv")
    xs = rng.uniform(0, 1, (3,) + spec.input_shape)
    g = odin_grid(spec, params, xs, (1.0, 10.0), (0.0, 1e-3))
    for a, t in enumerate((1.0, 10.0)):
        for b, e in enumerate((0.0, 1e-3)):
            np.testing.assert_allclose(g[:, a, b], score_odin(spec, params, xs, t, e), atol=1e-15)


def test_odin_rejects_bad_config(rng):
    spec, params, x = random_model(rng, "mlp")
    with pytest.raises(InvariantViolation):
        score_odin(spec, params, x, temperature=0.0)
    with pytest.raises(InvariantViolation):
        score_odin(spec, params, x, epsilon=-1.0)


# --- ReAct ----------------------------------------------------------------


def test_react_no_clamp_is_base(rng):
    for _ in range(50):
        r = random_record(rng)
        assert abs(score_react(r, math.inf) - score_energy(r.logits)) < 1e-12
        assert abs(score_react(r, math.inf, "mls") - score_max_logit(r.logits)) < 1e-12


def test_react_zero_clamp_leaves_bias(rng):
    r = random_record(rng)
    assert abs(score_react(r, 0.0) - score_energy(r.bias)) < 1e-15


def test_react_clamp_idempotent(rng):
    r = random_record(rng)
    c = float(np.median(r.features))
    once = LogitRecord(r.relogit(np.minimum(r.features, c)), np.minimum(r.features, c), r.weights, r.bias)
    assert score_react(once, c) == score_react(r, c)


def test_react_threshold_is_percentile(rng):
    feats = rng.uniform(0, 1, (50, 4))
    assert react_threshold(feats, 90) == np.percentile(feats, 90)


def test_react_needs_last_layer():
    with pytest.raises(MissingFitStatistics):
        score_react(LogitRecord(np.zeros(2), np.ones(3)), 1.0)


# --- DICE -----------------------------------------------------------------


def dice_loop(r, keep, mean):
    k, m = r.weights.shape
    n_keep = int(math.floor(keep * m + 1e-9))
    w = np.zeros_like(r.weights)
    for y in range(k):
        contrib = sorted(((-mean[i] * r.weights[y, i], i) for i in range(m)))
        for _, i in contrib[:n_keep]:
            w[y, i] = r.weights[y, i]
    logits = w @ r.features + r.bias
    return math.log(sum(math.exp(v) for v in logits))


def test_dice_full_mask_is_energy(rng):
    for _ in range(50):
        r = random_record(rng)
        assert abs(score_dice(r, 1.0, rng.uniform(0, 1, len(r.features))) - score_energy(r.logits)) < 1e-12


def test_dice_matches_brute_force(rng):
    for _ in range(100):
        r = random_record(rng, m=int(rng.integers(3, 12)))
        mean = rng.uniform(0, 1, len(r.features))
        keep = float(rng.choice([0.1, 0.3, 0.5, 0.7, 0.9]))
        assert abs(score_dice(r, keep, mean) - dice_loop(r, keep, mean)) < 1e-12


def test_dice_keeps_dominant_weight():
    w = np.array([[0.1, 5.0, 0.2, 0.1], [0.3, 0.1, 0.1, 0.2]])
    mask = dice_mask(w, np.ones(4), 0.25)
    assert mask[0].tolist() == [False, True, False, False]
    assert mask[1].tolist() == [True, False, False, False]


def test_dice_empty_mask_gives_bias_only(rng):
    r = random_record(rng)
    assert abs(score_dice(r, 0.0, np.ones(len(r.features))) - score_energy(r.bias)) < 1e-15


def test_dice_needs_mean_features(rng):
    with pytest.raises(MissingFitStatistics):
        score_dice(random_record(rng), 0.5, None)
    with pytest.raises(ValueError):
        score_dice(random_record(rng), 1.5, np.ones(3))
