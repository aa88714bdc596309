import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hyperkd import objective as ob
from hyperkd.numerics import grad_check

from oracles import kl_loops, softmax_list, ssim_global


def rng(seed):
    return np.random.default_rng(seed)


# -- weights -----------------------------------------------------------------

def test_weights_validation():
    with pytest.raises(ValueError):
        ob.LossWeights(lambda1=-1.0)
    with pytest.raises(ValueError):
        ob.LossWeights(temperature=0.0)
    c = ob.SsimConstants(2.0)
    assert c.c1 == pytest.approx(4e-4) and c.c2 == pytest.approx(36e-4)


# -- MSE ---------------------------------------------------------------------

def test_mse_trivial():
    x = rng(0).normal(size=(2, 4, 8))
    assert ob.mse_loss(x, x, region="all").item() == 0.0
    assert ob.mse_loss(np.zeros((3, 3)), np.ones((3, 3)), region="all").item() == 1.0


def test_mse_matches_loop_oracle():
    t, p = rng(1).normal(size=(2, 2, 5, 6))
    s = 0.0
    for a, b in zip(t.ravel(), p.ravel()):
        s += (a - b) ** 2
    assert abs(ob.mse_loss(t, p, region="all").item() - s / t.size) <= 1e-12


def test_mse_masked_only_uses_masked_patches():
    t = np.zeros((1, 4, 3))
    p = np.zeros((1, 4, 3))
    p[0, 1] = 2.0
    masked = np.array([[False, True, False, False]])
    assert ob.mse_loss(t, p, masked).item() == 4.0
    assert ob.mse_loss(t, p, masked, "all").item() == 1.0


def test_mse_shape_mismatch():
    with pytest.raises(ValueError):
        ob.mse_loss(np.zeros(3), np.zeros(4))


def test_huber_quadratic_region_halves_mse():
    t, p = np.zeros((1, 2, 4)), np.full((1, 2, 4), 0.3)
    assert ob.huber_loss(t, p, region="all").item() == pytest.approx(0.5 * 0.09)


# -- SSIM --------------------------------------------------------------------

def test_ssim_self_similarity_is_exactly_one():
    x = rng(2).uniform(size=(3, 8, 8))
    assert ob.ssim_index(x, x).item() == 1.0
    assert ob.ssim_loss(x, x).item() == 0.0


def test_ssim_constant_images_closed_form():
    got = ob.ssim_index(np.zeros((1, 4, 4)), np.ones((1, 4, 4))).item()
    assert abs(got - 1e-4 / (1 + 1e-4)) <= 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_ssim_symmetric_bounded_and_matches_oracle(seed):
    x, y = rng(seed).uniform(size=(2, 2, 5, 5))
    a, b = ob.ssim_index(x, y).item(), ob.ssim_index(y, x).item()
    assert a == pytest.approx(b, abs=1e-15)
    assert -1.0 <= a <= 1.0
    c = ob.SsimConstants()
    ref = np.mean([ssim_global(x[k], y[k], c.c1, c.c2) for k in range(2)])
    assert a == pytest.approx(ref, abs=1e-12)


def test_ssim_shape_mismatch():
    with pytest.raises(ValueError):
        ob.ssim_index(np.zeros((1, 4, 4)), np.zeros((1, 4, 5)))


def test_patch_ssim_loss_equals_image_ssim_when_all_selected():
    from hyperkd.vitmae import patchify
    mean, std = np.array([0.2, 0.4]), np.array([0.1, 0.05])
    t, p = rng(3).normal(size=(2, 2, 8, 8))
    tok_t, tok_p = patchify(t[None], 4), patchify(p[None], 4)
    got = ob.patch_ssim_loss(tok_t, tok_p, None, 2, mean, std, "all").item()
    refl = lambda z: z * std[:, None, None] + mean[:, None, None]  # noqa: E731
    assert got == pytest.approx(1 - ob.ssim_index(refl(t), refl(p)).item(), abs=1e-12)


def test_window_ssim_option():
    x = rng(4).uniform(size=(2, 16, 16))
    np.testing.assert_allclose(ob.per_channel_ssim(x, x, window=7), 1.0, atol=1e-12)
    y = np.clip(x + rng(5).normal(0, 0.1, x.shape), 0, 1)
    assert ob.ssim_metric(x, y, window=7) < 1.0


# -- distillation ------------------------------------------------------------

def test_identical_features_give_zero():
    f = rng(6).normal(size=(2, 5, 16))
    for kind in ob.KD_FUNCTIONS:
        assert ob.kd_loss(kind, f, f).item() == pytest.approx(0.0, abs=1e-15)


def test_kld_matches_loop_oracle():
    t, s = rng(7).normal(size=(2, 3, 10))
    T = 2.0
    ref = 0.0
    for a, b in zip(t, s):
        ref += kl_loops(softmax_list(list(a / T)), softmax_list(list(b / T)))
    ref = ref / 3 * T * T
    assert ob.feature_kld(t, s, T).item() == pytest.approx(ref, abs=1e-12)


def test_kld_non_negative_on_1000_pairs():
    r = rng(8)
    for _ in range(1000):
        t, s = r.normal(0, 2, size=(2, 4, 12))
        assert ob.feature_kld(t, s, 1.0).item() >= 0.0


def test_kld_direction_is_teacher_to_student():
    t = np.array([[4.0, 0.0, 0.0]])
    s = np.array([[0.0, 0.0, 0.0]])
    p, q = softmax_list([4.0, 0.0, 0.0]), [1 / 3] * 3
    assert ob.feature_kld(t, s).item() == pytest.approx(kl_loops(p, q), abs=1e-12)


def test_kld_at_fixed_temperature_zero_for_all_t():
    f = rng(9).normal(size=(3, 8))
    for T in (0.5, 1.0, 4.0, 100.0):
        assert ob.feature_kld(f, f, T).item() == pytest.approx(0.0, abs=1e-15)


def test_softened_kl_decreases_with_temperature():
    # the tempered KL without the T^2 factor shrinks toward 0 as T grows
    r = rng(10)
    for _ in range(200):
        t, s = r.normal(size=(2, 8, 24))
        k1 = ob.feature_kld(t, s, 1.0).item()
        k4 = ob.feature_kld(t, s, 4.0).item() / 16.0
        assert k4 < k1


def test_t2_scaled_kld_tends_to_half_logit_variance():
    # second-order expansion: T^2 KL -> 0.5 * Var_uniform(t - s), per token
    t, s = rng(11).normal(size=(2, 8, 24))
    limit = 0.5 * np.mean((t - s).var(axis=-1))
    assert abs(ob.feature_kld(t, s, 1e3).item() - limit) < 1e-3 * limit


def test_kld_scale_continuity():
    t, s = rng(12).normal(size=(2, 4, 16))
    a = ob.feature_kld(t, s).item()
    b = ob.feature_kld(t * 1.000001, s * 1.000001).item()
    assert abs(a - b) < 1e-4


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.5, 5.0))
def test_js_symmetric_and_bounded(seed, scale):
    a, b = rng(seed).normal(0, scale, size=(2, 3, 10))
    x, y = ob.feature_js(a, b).item(), ob.feature_js(b, a).item()
    assert x == pytest.approx(y, abs=1e-14)
    assert 0.0 <= x <= math.log(2)


def test_js_near_ln2_for_disjoint_distributions():
    a = np.array([[100.0, 0.0]])
    b = np.array([[0.0, 100.0]])
    assert ob.feature_js(a, b).item() == pytest.approx(math.log(2), abs=1e-12)


def test_l1_raw_features():
    assert ob.feature_l1(np.zeros((1, 2, 2)), np.full((1, 2, 2), 3.0)).item() == 3.0


def test_kd_dim_mismatch_and_unknown_kind():
    for kind in ob.KD_FUNCTIONS:
        with pytest.raises(ValueError):
            ob.kd_loss(kind, np.zeros((1, 2, 8)), np.zeros((1, 2, 6)))
    with pytest.raises(ValueError):
        ob.kd_loss("mse", np.zeros(3), np.zeros(3))


@pytest.mark.parametrize("kind", ob.KD_FUNCTIONS)
def test_kd_gradients(kind):
    t = rng(13).normal(size=(2, 6))
    err = grad_check(lambda s: ob.kd_loss(kind, t, s, 2.0), rng(14).normal(size=(2, 6)))
    assert err <= 1e-4


# -- total loss --------------------------------------------------------------

def test_total_loss_arithmetic():
    w = ob.LossWeights(1.0, 0.0, 1.0, 1.0)
    total, br = ob.total_loss(0.5, 0.9, 0.2, w)
    assert total.item() == pytest.approx(0.7, abs=1e-15)
    assert br.l_total == total.item()


def test_total_loss_degenerate_weights():
    _, br = ob.total_loss(0.3, 0.4, 0.8, ob.LossWeights(1.0, 0.5, 2.0, 0.0))
    assert br.l_total == pytest.approx(2.0 * br.l_recon, abs=1e-12)
    _, br = ob.total_loss(0.3, 0.4, 0.8, ob.LossWeights(1.0, 0.5, 0.0, 1.0))
    assert br.l_total == br.l_kd


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=7, max_size=7))
def test_breakdown_invariant(v):
    w = ob.LossWeights(*v[:4], temperature=1.0)
    _, br = ob.total_loss(v[4], v[5], v[6], w)
    expect = w.alpha * (w.lambda1 * br.l_mse + w.lambda2 * br.l_ssim) + w.beta * br.l_kd
    assert abs(br.l_total - expect) <= 1e-12 * max(1.0, abs(expect))


def test_total_loss_gradient():
    t = rng(15).normal(size=(1, 3, 8))
    mean, std = np.full(2, 0.5), np.full(2, 0.1)
    w = ob.LossWeights()

    def f(p):
        total, _ = ob.total_loss(ob.mse_loss(t, p, region="all"),
                                 ob.patch_ssim_loss(t, p, None, 2, mean, std, "all"),
                                 ob.feature_kld(t, p), w)
        return total
    assert grad_check(f, rng(16).normal(size=(1, 3, 8))) <= 1e-4


# -- PSNR and summaries ------------------------------------------------------

def test_psnr_closed_form():
    t = np.zeros((4, 10))
    assert abs(ob.psnr(t, t + 0.1) - 20.0) <= 1e-9


def test_psnr_identical_clamps():
    x = rng(17).uniform(size=(3, 4, 4))
    assert ob.psnr(x, x) == 99.0


def test_psnr_matches_formula():
    x, y = rng(18).uniform(size=(2, 3, 6, 6))
    ref = 10 * math.log10(1.0 / (sum((a - b) ** 2 for a, b in zip(x.ravel(), y.ravel())) / x.size))
    assert abs(ob.psnr(x, y) - ref) <= 1e-9


def test_psnr_decreases_with_noise():
    x = rng(19).uniform(size=(4, 16, 16))
    noise = rng(20).normal(size=x.shape)
    vals = [ob.psnr(x, x + s * noise) for s in (0.01, 0.02, 0.05, 0.1, 0.2)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_per_channel_vectors():
    x = rng(21).uniform(size=(3, 8, 8))
    y = x.copy()
    y[1] += 0.1
    pc = ob.per_channel_psnr(x, y)
    assert pc[0] == pc[2] == 99.0 and pc[1] == pytest.approx(20.0)
    assert ob.per_channel_ssim(x, y).shape == (3,)


def test_max_of_means_differs_from_mean_of_maxes():
    table = np.array([[30.0, 10.0], [10.0, 25.0]])
    assert ob.max_of_channel_means(table) == 20.0
    assert table.max(axis=1).mean() == 27.5


def test_to_reflectance_clamps():
    out = ob.to_reflectance(np.array([[-100.0], [0.0]]), [0.5, 0.5], [0.1, 0.1])
    np.testing.assert_array_equal(out, [[0.0], [0.5]])


def test_metric_csvs(tmp_path):
    ob.write_metrics_csv(tmp_path / "m.csv", [3, 9], [30.5, 31.25], [0.9, 0.95])
    assert (tmp_path / "m.csv").read_text() == "tile_id,psnr,ssim\n3,30.5,0.9\n9,31.25,0.95\n"
    ob.write_channel_csv(tmp_path / "c.csv", np.array([20.0]), np.array([0.5]))
    assert (tmp_path / "c.csv").read_text() == "channel,psnr_mean,ssim_mean\n0,20.0,0.5\n"
