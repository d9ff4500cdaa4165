import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paadetect.attacks import (
    ATTACK_DEFAULTS,
    AttackSpec,
    EncoderClassifier,
    LinearModel,
    ProbeHead,
    best_saliency_pair,
    bim,
    cw_l2,
    cw_margin,
    deepfool,
    fgsm,
    jsma,
    jsma_budget,
    logits_of,
    pgd,
    project_linf,
    run_attack,
)
from paadetect.encoder import PAAEncoder
from paadetect.tensor import ConfigurationError
from oracles import brute_saliency_pair, greedy_jsma_budget, linear_min_perturbation

SHAPE = (3, 8, 8)
D = int(np.prod(SHAPE))
K = 5


@pytest.fixture
def linear():
    rng = np.random.default_rng(11)
    return LinearModel(rng.standard_normal((D, K)) * 0.1, rng.standard_normal(K) * 0.1)


@pytest.fixture
def batch():
    rng = np.random.default_rng(12)
    x = rng.uniform(0, 1, (40,) + SHAPE)
    x[:5] = np.round(x[:5])  # saturated pixels exercise the clip
    return x, rng.integers(0, K, 40)


@pytest.mark.parametrize("name", ["FGSM", "PGD", "BIM"])
def test_linf_attacks_stay_in_ball_and_box(name, linear, batch):
    x, y = batch
    spec = AttackSpec.default(name, random_start=name == "PGD")
    adv = run_attack(spec, linear, x, y, K).x_adv
    assert np.abs(adv - x).max() <= spec.eps
    assert adv.min() >= 0.0 and adv.max() <= 1.0


def test_pgd_one_step_equals_fgsm(linear, batch):
    x, y = batch
    for eps, alpha in [(0.008, 0.008), (0.01, 0.5), (0.03, 0.03)]:
        assert np.array_equal(pgd(linear, x, y, eps, alpha, 1), fgsm(linear, x, y, eps))


def test_fgsm_step_follows_sign_of_gradient(linear, batch):
    x, y = batch
    inner = np.full_like(x, 0.5)
    adv = fgsm(linear, inner, y, 0.01)
    # for a linear model d(CE)/dx = W (softmax - onehot)
    z = inner.reshape(len(x), -1) @ linear.weight + linear.bias
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    p[np.arange(len(x)), y] -= 1
    g = (p @ linear.weight.T).reshape(x.shape)
    np.testing.assert_allclose(adv - inner, 0.01 * np.sign(g), atol=1e-15)


def test_bim_trace_stays_in_ball(linear, batch):
    x, y = batch
    trace = []
    bim(linear, x, y, 0.03, 0.01, 3, trace=trace)
    assert len(trace) == 3
    assert all(np.abs(t - x).max() <= 0.03 for t in trace)


def test_pgd_random_start_is_seeded(linear, batch):
    x, y = batch
    a = pgd(linear, x, y, 0.01, 0.002, 1, random_start=True, seed=4)
    b = pgd(linear, x, y, 0.01, 0.002, 1, random_start=True, seed=4)
    c = pgd(linear, x, y, 0.01, 0.002, 1, random_start=True, seed=5)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_projection_is_exact_at_ulp_level():
    x = np.array([0.1, 0.7, 0.3, 1.0 - 1e-17])
    out = project_linf(x, np.array([0.008, -0.008, 0.008, 0.008]), 0.008)
    assert np.all(np.abs(out - x) <= 0.008) and out.max() <= 1.0


def test_deepfool_matches_linear_closed_form(linear):
    rng = np.random.default_rng(3)
    x = rng.uniform(0.3, 0.7, (20,) + SHAPE)
    res = deepfool(linear, x, steps=20, overshoot=0.02)
    for i in range(len(x)):
        r = linear_min_perturbation(linear.weight, linear.bias, x[i].reshape(-1))
        got = np.linalg.norm(res.extra["r_tot"][i])
        assert abs(got - np.linalg.norm(r)) / np.linalg.norm(r) < 0.02
    assert res.success.all()
    assert np.all(res.iterations == 1)


def test_cw_successes_reach_the_margin(linear, batch):
    x, y = batch
    res = cw_l2(linear, x[:10], y[:10], c=5.0, kappa=0.5, steps=200, lr=0.05)
    z = logits_of(linear, res.x_adv)
    ok = res.success
    assert ok.any()
    assert np.all(cw_margin(z[ok], y[:10][ok]) >= 0.5 - 1e-9)
    np.testing.assert_array_equal(res.x_adv[~ok], x[:10][~ok])
    # best-so-far distances never increase
    hist = res.extra["history"]
    assert np.array_equal(hist, np.minimum.accumulate(hist, axis=0))


def test_cw_keeps_inputs_already_far_inside_wrong_class():
    w = np.zeros((D, 2))
    b = np.array([0.0, 10.0])
    x = np.full((2,) + SHAPE, 0.5)
    res = cw_l2(LinearModel(w, b), x, np.array([0, 0]), kappa=0.0, steps=20)
    assert res.success.all()
    np.testing.assert_allclose(res.x_adv, x, atol=1e-5)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(2, 14), ints=st.booleans())
def test_saliency_pair_matches_exhaustive_search(seed, n, ints):
    rng = np.random.default_rng(seed)
    if ints:
        a, b = rng.integers(-3, 4, n).astype(float), rng.integers(-3, 4, n).astype(float)
    else:
        a, b = rng.standard_normal(n), rng.standard_normal(n)
    allowed = rng.random(n) > 0.2
    assert best_saliency_pair(a, b, allowed) == brute_saliency_pair(a, b, allowed)


@pytest.mark.parametrize("pixels,gamma", [(3072, 0.02), (192, 0.02), (100, 0.02), (50, 0.1), (7, 1.0)])
def test_jsma_budget(pixels, gamma):
    assert jsma_budget(pixels, gamma) == greedy_jsma_budget(pixels, gamma) == math.ceil(round(gamma * pixels, 9))


def test_jsma_respects_budget_and_only_raises_values(linear, batch):
    x, y = batch
    res = jsma(linear, x, (y + 1) % K, gamma=0.02)
    budget = jsma_budget(D, 0.02)
    changed = (res.x_adv != x).reshape(len(x), -1)
    assert np.all(changed.sum(axis=1) <= budget)
    assert np.all(res.x_adv[res.x_adv != x] == 1.0)
    assert np.all(res.extra["modified"] <= budget)


def test_jsma_success_means_target_class(linear, batch):
    x, y = batch
    targets = (y + 1) % K
    res = jsma(linear, x, targets, gamma=0.1)
    pred = np.argmax(logits_of(linear, res.x_adv), axis=1)
    assert np.array_equal(res.success, pred == targets)
    assert res.success.any()


@pytest.mark.parametrize("name", list(ATTACK_DEFAULTS))
def test_attacks_are_deterministic(name, linear, batch):
    x, y = batch
    spec = AttackSpec.default(name, **({"steps": 20} if name == "CW" else {}))
    a = run_attack(spec, linear, x[:6], y[:6], K, seed=2)
    b = run_attack(spec, linear, x[:6], y[:6], K, seed=2)
    assert np.array_equal(a.x_adv, b.x_adv) and np.array_equal(a.success, b.success)


def test_attack_spec_defaults_and_validation():
    assert AttackSpec.default("PGD").label == "PGD(eps=0.01,alpha=0.02,steps=40)"
    assert AttackSpec.default("CW").c == 1.0
    with pytest.raises(ConfigurationError):
        AttackSpec("SSAH")
    with pytest.raises(ConfigurationError):
        AttackSpec("FGSM", eps=-1.0)
    with pytest.raises(ConfigurationError):
        AttackSpec.default("JSMA", gamma=0.0)


def test_probe_learns_separable_embeddings(rng):
    centres = np.eye(4, 16)
    labels = np.repeat(np.arange(4), 30)
    emb = centres[labels] + 0.05 * rng.standard_normal((120, 16))
    probe = ProbeHead(16, 4).fit(emb, labels, epochs=200)
    assert (probe.predict(emb) == labels).mean() == 1.0


def test_encoder_classifier_attacks_run_end_to_end(rng):
    enc = PAAEncoder("XS", seed=0)
    probe = ProbeHead(128, 3)
    probe.weight = rng.standard_normal((3, 128))
    model = EncoderClassifier(enc, probe)
    x = rng.uniform(0, 1, (2, 3, 32, 32))
    adv = fgsm(model, x, np.array([0, 1]), 0.008)
    assert np.abs(adv - x).max() <= 0.008
    assert all(not p.requires_grad for p in model.encoder.params.values())
