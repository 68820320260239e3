import math

import numpy as np
import pytest

from entsft import dist

# Oracle values computed by direct evaluation at double precision.
P_HI = math.exp(2.0) / (math.exp(2.0) + 1.0)       # softmax([2,0])[0]
P_LO = 1.0 - P_HI
H_20 = -(P_HI * math.log(P_HI) + P_LO * math.log(P_LO))


def test_softmax_uniform_logits():
    pd = dist.softmax_temp([0.0, 0.0, 0.0, 0.0], 1.0)
    np.testing.assert_allclose(pd.probs, 0.25, rtol=0, atol=1e-15)
    assert pd.temperature == 1.0
    assert pd.renormalized_over == "full"


def test_softmax_infinite_temperature_limit():
    pd = dist.softmax_temp([3.0, 3.0 + 0.5], 1e9)
    np.testing.assert_allclose(pd.probs, 0.5, atol=1e-9)


def test_softmax_two_logits_matches_direct_evaluation():
    pd = dist.softmax_temp([2.0, 0.0], 1.0)
    np.testing.assert_allclose(pd.probs, [P_HI, P_LO], rtol=1e-14)
    np.testing.assert_allclose(pd.probs, [0.8807970779778823, 0.1192029220221176], rtol=1e-12)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(0)
    row = rng.normal(0, 3, size=33)
    for shift in (-1000.0, -3.7, 250.0):
        a = dist.softmax_temp(row, 0.7).probs
        b = dist.softmax_temp(row + shift, 0.7).probs
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_softmax_rejects_bad_inputs():
    with pytest.raises(ValueError):
        dist.softmax_temp([1.0, np.nan], 1.0)
    with pytest.raises(ValueError):
        dist.softmax_temp([1.0, np.inf], 1.0)
    with pytest.raises(ValueError):
        dist.softmax_temp([1.0, 2.0], 0.0)
    with pytest.raises(ValueError):
        dist.softmax_temp([1.0, 2.0], -2.0)
    with pytest.raises(ValueError):
        dist.softmax_temp([1.0], 1.0)


def test_entropy_uniform_and_onehot():
    uniform = dist.ProbDist(np.full(8, 0.125), 1.0)
    assert abs(dist.entropy(uniform) - math.log(8)) < 1e-14
    onehot = dist.ProbDist(np.array([0.0, 1.0, 0.0]), 1.0)
    assert dist.entropy(onehot) == 0.0


def test_entropy_matches_direct_summation_oracle():
    pd = dist.softmax_temp([2.0, 0.0], 1.0)
    assert abs(dist.entropy(pd) - H_20) < 1e-14
    assert abs(dist.entropy(pd) - 0.3653338550872077) < 1e-12


def test_probdist_invariants():
    with pytest.raises(ValueError):
        dist.ProbDist(np.array([0.5, 0.6]), 1.0)  # does not sum to 1
    with pytest.raises(ValueError):
        dist.ProbDist(np.array([-0.1, 1.1]), 1.0)
    with pytest.raises(ValueError):
        dist.ProbDist(np.array([0.5, 0.5]), 0.0)


def test_entropy_topk_equals_full_when_k_covers_vocab():
    rng = np.random.default_rng(1)
    for _ in range(20):
        row = rng.normal(0, 2, size=16)
        full = dist.entropy(dist.softmax_temp(row, 1.3))
        topk = dist.entropy_topk(row, 1.3, 16)
        assert abs(full - topk) < 1e-12
        assert abs(full - dist.entropy_topk(row, 1.3, 99)) < 1e-12  # k clamps


def test_entropy_topk_uniform_logits_gives_log_k():
    row = np.zeros(32)
    for k in (2, 5, 17):
        assert abs(dist.entropy_topk(row, 1.0, k) - math.log(k)) < 1e-12


def test_entropy_topk_heavy_tail_close_to_full():
    # A top-heavy vocab-4096 row: almost all mass on the leading tokens, so
    # top-512 entropy tracks the full entropy closely.
    rng = np.random.default_rng(7)
    row = np.concatenate([rng.normal(5.0, 1.0, 64), rng.normal(-6.5, 1.0, 4032)])
    full = dist.entropy(dist.softmax_temp(row, 1.0))
    approx = dist.entropy_topk(row, 1.0, 512)
    assert abs(full - approx) < 0.02
    # The same bound does not hold when the tail carries the mass; that is
    # what limits the approximation, not vocabulary size.
    flat = np.zeros(4096)
    flat[123] = 6.0
    assert abs(dist.entropy(dist.softmax_temp(flat, 1.0))
               - dist.entropy_topk(flat, 1.0, 512)) > 1.0


def test_entropy_topk_tie_break_is_deterministic():
    row = np.array([1.0, 5.0, 1.0, 1.0, 0.0])
    idx = dist.topk_indices_rows(row[None, :], 3)[0]
    assert idx.tolist() == [1, 0, 2]  # ties at 1.0 resolve to lower index
    with pytest.raises(ValueError):
        dist.entropy_topk(row, 1.0, 1)


def test_kl_divergence_identity_and_oracle_value():
    p = dist.ProbDist(np.array([0.9, 0.1]), 1.0)
    q = dist.ProbDist(np.array([0.5, 0.5]), 1.0)
    assert dist.kl_divergence(p, p) == 0.0
    oracle = 0.9 * math.log(0.9 / 0.5) + 0.1 * math.log(0.1 / 0.5)
    assert abs(dist.kl_divergence(p, q) - oracle) < 1e-14
    assert abs(oracle - 0.36806420716849715) < 1e-15


def test_kl_divergence_uniform_identity():
    rng = np.random.default_rng(2)
    for _ in range(200):
        vocab = int(rng.integers(2, 40))
        p = dist.ProbDist(rng.dirichlet(np.full(vocab, 0.4)), 1.0)
        uniform = dist.ProbDist(np.full(vocab, 1.0 / vocab), 1.0)
        identity_gap = dist.kl_divergence(p, uniform) - (math.log(vocab) - dist.entropy(p))
        assert abs(identity_gap) <= 1e-10


def test_kl_divergence_support_mismatch_raises():
    p = dist.ProbDist(np.array([0.5, 0.5, 0.0]), 1.0)
    q = dist.ProbDist(np.array([0.0, 0.5, 0.5]), 1.0)
    with pytest.raises(ValueError):
        dist.kl_divergence(p, q)
    # zero mass in q is fine where p is zero too
    assert dist.kl_divergence(q, q) == 0.0
    with pytest.raises(ValueError):
        dist.kl_divergence(p, dist.ProbDist(np.array([0.5, 0.5]), 1.0))


def test_log_prob_at_values():
    assert abs(dist.log_prob_at(np.zeros(4), 1.0, 2) - math.log(0.25)) < 1e-14
    assert abs(dist.log_prob_at([2.0, 0.0], 1.0, 0) - math.log(P_HI)) < 1e-14
    assert abs(dist.log_prob_at([2.0, 0.0], 1.0, 0) + 0.1269280110429726) < 1e-12
    # greedy limit: argmax token probability goes to 1 as tau -> 0+
    assert abs(dist.log_prob_at([2.0, 0.0, -1.0], 1e-3, 0)) < 1e-12
    with pytest.raises(ValueError):
        dist.log_prob_at([2.0, 0.0], 1.0, 2)
    with pytest.raises(ValueError):
        dist.log_prob_at([2.0, 0.0], 1.0, -1)


def test_log_prob_never_minus_inf_on_peaked_rows():
    # log-sum-exp path keeps extreme rows finite
    row = np.array([800.0, 0.0, -800.0])
    lp = dist.log_prob_at(row, 1.0, 2)
    assert np.isfinite(lp) and lp < -1000


def test_entropy_monotone_in_temperature():
    rng = np.random.default_rng(3)
    rows = rng.normal(0, 3, size=(300, 32))
    taus = np.arange(0.5, 3.01, 0.05)
    prev = None
    for tau in taus:
        cur = dist.entropy_from_logit_rows(rows, float(tau))
        if prev is not None:
            assert np.all(cur - prev >= -1e-9)
        prev = cur
    # strict increase for a clearly non-constant row
    row = np.array([3.0, 1.0, 0.0, -2.0])
    h1 = dist.entropy(dist.softmax_temp(row, 1.0))
    h2 = dist.entropy(dist.softmax_temp(row, 1.5))
    assert h2 > h1


def test_entropy_slope_matches_variance_identity():
    rng = np.random.default_rng(4)
    step = 1e-5
    for _ in range(50):
        row = rng.normal(0, 3, size=24)
        tau = float(rng.uniform(0.5, 3.0))
        hi = dist.entropy(dist.softmax_temp(row, tau + step))
        lo = dist.entropy(dist.softmax_temp(row, tau - step))
        fd = (hi - lo) / (2 * step)
        p = dist.softmax_temp(row, tau).probs
        mean = (p * row).sum()
        var = (p * (row - mean) ** 2).sum()
        analytic = var / tau ** 3
        assert abs(fd - analytic) / max(abs(analytic), 1e-12) <= 1e-4


def test_batch_rows_match_scalar_calls():
    rng = np.random.default_rng(5)
    rows = rng.normal(0, 2, size=(40, 17))
    probs = dist.softmax_rows(rows, 1.3)
    ents = dist.entropy_rows(probs)
    logps = dist.log_softmax_rows(rows, 1.3)
    topk = dist.entropy_topk_rows(rows, 1.3, 5)
    for i in range(40):
        pd = dist.softmax_temp(rows[i], 1.3)
        np.testing.assert_allclose(probs[i], pd.probs, atol=1e-15)
        assert abs(ents[i] - dist.entropy(pd)) < 1e-12
        assert abs(logps[i, 3] - dist.log_prob_at(rows[i], 1.3, 3)) < 1e-12
        assert abs(topk[i] - dist.entropy_topk(rows[i], 1.3, 5)) < 1e-15
