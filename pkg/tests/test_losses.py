import math

import numpy as np
import pytest

from entsft import losses
from entsft.dist import entropy_rows, log_softmax_rows, softmax_rows
from entsft.oracles import finite_difference_grad, relative_error
from entsft.tempsearch import TokenTempPlan


def _rand_case(seed, n=8, vocab=10, scale=2.0):
    rng = np.random.default_rng(seed)
    z = rng.normal(0, scale, size=(n, vocab))
    y = rng.integers(0, vocab, size=n)
    return rng, z, y


def test_sft_loss_uniform_logits():
    z = np.zeros((5, 4))
    y = np.array([0, 1, 2, 3, 1])
    value, grad = losses.sft_loss(z, y)
    assert abs(value - math.log(4)) < 1e-14
    assert grad.shape == z.shape


def test_sft_loss_saturates_when_peaked():
    z = np.zeros((3, 6))
    y = np.array([2, 2, 5])
    for i, t in enumerate(y):
        z[i, t] = 20.0
    value, _ = losses.sft_loss(z, y)
    assert value < 1e-6


def test_sft_loss_two_logit_oracle_value():
    value, grad = losses.sft_loss(np.array([[2.0, 0.0]]), np.array([1]))
    assert abs(value - 2.1269280110429727) < 1e-12
    fd = finite_difference_grad(lambda r: losses.sft_loss(r, np.array([1]))[0],
                                np.array([[2.0, 0.0]]))
    assert relative_error(grad, fd) <= 1e-6


def test_sft_gradient_matches_finite_differences():
    _, z, y = _rand_case(0)
    _, grad = losses.sft_loss(z, y)
    fd = finite_difference_grad(lambda r: losses.sft_loss(r, y)[0], z)
    assert relative_error(grad, fd) <= 1e-6


def test_sft_gradient_rows_sum_to_zero():
    _, z, y = _rand_case(1)
    _, grad = losses.sft_loss(z, y)
    np.testing.assert_allclose(grad.sum(axis=-1), 0.0, atol=1e-14)


def test_sft_loss_length_mismatch():
    with pytest.raises(ValueError):
        losses.sft_loss(np.zeros((3, 4)), np.array([0, 1]))
    with pytest.raises(ValueError):
        losses.sft_loss(np.zeros((2, 4)), np.array([0, 4]))


def test_entropy_loss_onehot_like_is_zero():
    z = np.zeros((4, 8))
    z[np.arange(4), [0, 3, 5, 7]] = 40.0
    value, _ = losses.entropy_loss(z, 1.0)
    assert abs(value) < 1e-12


def test_entropy_loss_uniform_rows():
    z = np.zeros((6, 16))
    value, grad = losses.entropy_loss(z, 0.8)
    assert abs(value + 0.8 * math.log(16)) < 1e-12
    assert np.max(np.abs(grad)) < 1e-12  # entropy stationary at uniform


def test_entropy_loss_appendix_identity():
    # alpha * (KL(p||uniform) - log V) equals the entropy loss per position.
    _, z, _ = _rand_case(2, n=6, vocab=12)
    alpha = 0.7
    value, _ = losses.entropy_loss(z, alpha)
    p = softmax_rows(z)
    logu = -math.log(12)
    kl = (p * (np.log(p) - logu)).sum(axis=-1)
    identity = alpha * (kl - math.log(12)).mean()
    assert abs(value - identity) < 1e-10


def test_entropy_loss_gradient_matches_finite_differences():
    _, z, _ = _rand_case(3)
    for frac in (None, 0.25, 1.0):
        _, grad = losses.entropy_loss(z, 0.7, top_fraction=frac)
        fd = finite_difference_grad(lambda r: losses.entropy_loss(r, 0.7, top_fraction=frac)[0], z)
        assert relative_error(grad, fd) <= 1e-6


def test_entropy_loss_top_fraction_matches_sorted_subset_oracle():
    _, z, _ = _rand_case(4, n=10, vocab=9)
    value, _ = losses.entropy_loss(z, 1.0, top_fraction=0.2)
    ent = entropy_rows(softmax_rows(z))
    top = np.sort(ent)[::-1][:2]  # brute-force: top ceil(0.2*10)=2 positions
    assert abs(value - (-top.mean())) < 1e-12


def test_kl_to_base_zero_when_equal():
    _, z, _ = _rand_case(5)
    value, grad = losses.kl_to_base_loss(z, z.copy(), 1.0)
    assert abs(value) < 1e-14
    assert np.max(np.abs(grad)) < 1e-12


def test_kl_to_base_gradient_matches_finite_differences():
    rng, z, _ = _rand_case(6, vocab=8)
    base = rng.normal(0, 2, size=z.shape)
    _, grad = losses.kl_to_base_loss(z, base, 0.6)
    fd = finite_difference_grad(lambda r: losses.kl_to_base_loss(r, base, 0.6)[0], z)
    assert relative_error(grad, fd) <= 1e-6


def test_kl_to_base_linear_in_alpha():
    rng, z, _ = _rand_case(7)
    base = rng.normal(0, 1, size=z.shape)
    v1, g1 = losses.kl_to_base_loss(z, base, 0.5)
    v2, g2 = losses.kl_to_base_loss(z, base, 1.0)
    assert abs(v2 - 2 * v1) < 1e-12
    np.testing.assert_allclose(g2, 2 * g1, atol=1e-15)


def test_kl_to_base_shape_mismatch():
    with pytest.raises(ValueError):
        losses.kl_to_base_loss(np.zeros((3, 4)), np.zeros((3, 5)), 1.0)


def test_sed_loss_zero_when_student_equals_tempered_teacher():
    _, z, y = _rand_case(8)
    plans = [1.0] * z.shape[0]
    value, grad = losses.sed_loss(z, z.copy(), plans, y, student_tau=1.0)
    assert abs(value) < 1e-24
    assert np.max(np.abs(grad)) < 1e-12


def test_sed_loss_single_position_is_half_squared_log_ratio():
    z = np.array([[2.0, 0.0, -1.0]])
    t = np.array([[1.0, 0.5, 0.0]])
    y = np.array([0])
    tau_hat = 1.3
    value, _ = losses.sed_loss(z, t, [tau_hat], y)
    r = (log_softmax_rows(z)[0, 0] - log_softmax_rows(t, tau_hat)[0, 0])
    assert abs(value - 0.5 * r * r) < 1e-14


def test_sed_gradient_matches_finite_differences():
    rng, z, y = _rand_case(9, n=7, vocab=6)
    t = rng.normal(0, 2, size=z.shape)
    plans = rng.uniform(1.1, 1.5, size=7).tolist()
    for student_tau in (1.0, 0.8):
        _, grad = losses.sed_loss(z, t, plans, y, student_tau=student_tau)
        fd = finite_difference_grad(
            lambda r: losses.sed_loss(r, t, plans, y, student_tau=student_tau)[0], z)
        assert relative_error(grad, fd) <= 1e-6


def test_sed_loss_shift_invariance_both_sides():
    rng, z, y = _rand_case(10, n=5, vocab=7)
    t = rng.normal(0, 2, size=z.shape)
    plans = [1.2] * 5
    v0, g0 = losses.sed_loss(z, t, plans, y)
    v1, _ = losses.sed_loss(z + 13.0, t, plans, y)
    v2, _ = losses.sed_loss(z, t - 7.0, plans, y)
    assert abs(v0 - v1) < 1e-10
    assert abs(v0 - v2) < 1e-10


def test_sed_loss_nonnegative_and_accepts_plan_objects():
    rng, z, y = _rand_case(11, n=4, vocab=5)
    t = rng.normal(0, 1, size=z.shape)
    plans = [TokenTempPlan(base_entropy=0.5, increment=0.1, solved_tau=1.25,
                           target_entropy=0.6, achieved_entropy=0.6, clamped=False)
             for _ in range(4)]
    value, _ = losses.sed_loss(z, t, plans, y)
    assert value >= 0.0


def test_sed_loss_misaligned_plans():
    _, z, y = _rand_case(12, n=4)
    with pytest.raises(ValueError):
        losses.sed_loss(z, z.copy(), [1.2] * 3, y)


def test_total_loss_alpha_zero_is_pure_sft():
    rng, z, y = _rand_case(13)
    base = rng.normal(0, 1, size=z.shape)
    ref, _ = losses.sft_loss(z, y)
    breakdown, grad = losses.total_loss(z, y, losses.Regularizer("kl_to_base"),
                                        alpha=0.0, base_rows=base)
    assert breakdown.total == ref
    sft_grad = losses.sft_loss(z, y)[1]
    np.testing.assert_allclose(grad, sft_grad, atol=1e-15)


def test_total_loss_sed_degenerate_equals_sft():
    _, z, y = _rand_case(14)
    breakdown, _ = losses.total_loss(
        z, y, losses.Regularizer("sed"), alpha=1.0,
        teacher_rows=z.copy(), plans=[1.0] * z.shape[0])
    assert abs(breakdown.total - breakdown.sft) < 1e-20


def test_total_loss_additivity_invariant():
    rng, z, y = _rand_case(15)
    base = rng.normal(0, 2, size=z.shape)
    for alpha in (0.0, 0.3, 1.0, 2.5):
        breakdown, _ = losses.total_loss(z, y, losses.Regularizer("kl_to_base"),
                                         alpha=alpha, base_rows=base)
        assert abs(breakdown.total - (breakdown.sft + alpha * breakdown.regularizer)) <= 1e-9


def test_total_loss_per_token_decomposition():
    rng, z, y = _rand_case(16, n=6)
    base = rng.normal(0, 2, size=z.shape)
    breakdown, _ = losses.total_loss(z, y, losses.Regularizer("kl_to_base"),
                                     alpha=1.0, base_rows=base)
    sft_terms = np.array([t[1] for t in breakdown.per_token])
    reg_terms = np.array([t[2] for t in breakdown.per_token])
    assert abs(sft_terms.mean() - breakdown.sft) < 1e-12
    assert abs(reg_terms.mean() - breakdown.regularizer) < 1e-12


def test_total_loss_rejects_mismatched_materials():
    _, z, y = _rand_case(17)
    with pytest.raises(ValueError):
        losses.total_loss(z, y, losses.Regularizer("sed"), alpha=1.0)  # missing teacher
    with pytest.raises(ValueError):
        losses.total_loss(z, y, losses.Regularizer("none"), base_rows=z.copy())
    with pytest.raises(ValueError):
        losses.total_loss(z, y, losses.Regularizer("kl_to_base"),
                          base_rows=z.copy(), teacher_rows=z.copy(),
                          plans=[1.0] * z.shape[0])
    with pytest.raises(ValueError):
        losses.Regularizer("something_else")


def test_total_loss_gradient_all_regularizers():
    rng, z, y = _rand_case(18, n=6, vocab=8)
    base = rng.normal(0, 2, size=z.shape)
    teacher = rng.normal(0, 2, size=z.shape)
    plans = rng.uniform(1.1, 1.5, size=6).tolist()
    cases = [
        (losses.Regularizer("none"), {}),
        (losses.Regularizer("entropy"), {}),
        (losses.Regularizer("entropy_top_fraction", 0.4), {}),
        (losses.Regularizer("kl_to_base"), dict(base_rows=base)),
        (losses.Regularizer("sed"), dict(teacher_rows=teacher, plans=plans)),
    ]
    for reg, kwargs in cases:
        _, grad = losses.total_loss(z, y, reg, alpha=0.9, **kwargs)
        fd = finite_difference_grad(
            lambda r: losses.total_loss(r, y, reg, alpha=0.9, **kwargs)[0].total, z)
        assert relative_error(grad, fd) <= 1e-4, reg.kind
