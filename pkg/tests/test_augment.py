import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import ndtr

from leaves import autodiff as ad
from leaves.augment import (
    AugmentBounds,
    AugmentParams,
    NoiseBundle,
    distortion_locations,
    effective_segments,
    faithfulness_proxy,
    fixed_sigma_view,
    jitter,
    knot_curve,
    leaves_forward,
    mag_warp,
    open_uniform,
    permutation_index,
    permute,
    permute_fixed,
    relaxed_bernoulli_logits,
    reparam_normal,
    reparam_relaxed_bernoulli,
    reparam_uniform,
    scale,
    time_distort,
    time_warp_baseline,
    warp_positions,
    write_view_csv,
)
from leaves.autodiff import Tape, Tensor, grad_check, grad_errors


def sine(n=2, c=1, length=64, f=2.0):
    t = np.arange(length)
    return np.broadcast_to(np.sin(2 * np.pi * f * t / length), (n, c, length)).copy()


# -------------------------------------------------------- reparameterizations


def test_reparam_normal_examples():
    eps = np.random.default_rng(0).uniform(0.01, 0.99, 5)
    assert np.all(reparam_normal(0.0, 0.0, eps).data == 0.0)
    assert reparam_normal(5.0, 1.0, ndtr(0.5)).item() == pytest.approx(5.5, abs=1e-12)


def test_reparam_normal_sigma_derivative_is_deviate():
    eps = np.array([0.1, 0.5, 0.93])
    sigma = Tensor(0.7, requires_grad=True)
    with Tape() as tape:
        tape.backward(reparam_normal(1.0, sigma, eps).sum())
    h = 1e-6
    fd = (reparam_normal(1.0, 0.7 + h, eps).data - reparam_normal(1.0, 0.7 - h, eps).data) / (2 * h)
    assert sigma.grad == pytest.approx(fd.sum(), rel=1e-8)


def test_reparam_uniform_examples():
    eps = np.random.default_rng(1).uniform(size=100)
    assert np.all(reparam_uniform(2.0, 2.0, eps).data == 2.0)
    assert reparam_uniform(0.0, 10.0, 0.25).item() == 2.5
    out = reparam_uniform(-3.0, 4.0, eps).data
    assert out.min() >= -3.0 and out.max() <= 4.0
    with pytest.raises(ValueError):
        reparam_uniform(1.0, 0.0, eps)
    lo, hi = Tensor(0.5, requires_grad=True), Tensor(2.0, requires_grad=True)
    assert grad_check(lambda a, b: reparam_uniform(a, b, eps), [lo, hi]) < 1e-8


def test_relaxed_bernoulli_log_p_form():
    assert relaxed_bernoulli_logits(0.5, 1.0, 0.5, form="log_p").item() == pytest.approx(np.log(0.5))


def test_relaxed_bernoulli_limit_and_errors():
    assert reparam_relaxed_bernoulli(1 - 1e-12, 0.01, 0.5).item() == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValueError):
        reparam_relaxed_bernoulli(1.0, 0.01, 0.5)
    with pytest.raises(ValueError):
        reparam_relaxed_bernoulli(0.5, 0.01, 0.0)


def test_relaxed_bernoulli_monte_carlo_mean():
    eps = open_uniform(np.random.default_rng(42), 100_000)
    assert reparam_relaxed_bernoulli(0.7, 0.01, eps).data.mean() == pytest.approx(0.7, abs=0.01)


def test_relaxed_bernoulli_gradcheck_in_p():
    eps = np.array([0.2, 0.6, 0.9])
    p = Tensor(0.35, requires_grad=True)
    assert grad_check(lambda p: relaxed_bernoulli_logits(p, 0.5, eps), p) < 1e-6
    assert grad_check(lambda p: reparam_relaxed_bernoulli(p, 0.5, eps), p) < 1e-6


# ------------------------------------------------------------ augmentations


def test_jitter_examples():
    x = sine()
    eps = NoiseBundle.draw(0, x.shape).jitter
    assert np.array_equal(jitter(x, 0.0, eps).data, x)
    zeros = np.zeros_like(x)
    assert np.array_equal(jitter(zeros, 0.05, eps).data, reparam_normal(0.0, 0.05, eps).data)


def test_jitter_variance_monte_carlo():
    shape = (10, 10, 1000)
    eps = NoiseBundle.draw(5, shape).jitter
    diff = jitter(np.zeros(shape), 0.04, eps).data
    assert diff.var() == pytest.approx(0.04**2, rel=0.05)


def test_scale_examples():
    x = sine(n=3, c=2)
    eps = NoiseBundle.draw(1, x.shape).scale
    assert np.array_equal(scale(x, 0.0, eps).data, x)
    # factor 1.5 exactly: deviate 0.5 at sigma 1
    out = scale([[[1.0, 2.0]]], 1.0, np.array([[ndtr(0.5)]])).data.ravel()
    assert out == pytest.approx([1.5, 3.0], abs=1e-12)
    nonzero = np.abs(x) > 1e-9
    ratio = scale(x, 0.05, eps).data / np.where(nonzero, x, 1.0)
    for i in range(3):
        for j in range(2):
            r = ratio[i, j][nonzero[i, j]]
            assert np.ptp(r) < 1e-12


def test_mag_warp_examples():
    x = sine()
    eps = NoiseBundle.draw(2, x.shape).magw
    assert np.array_equal(mag_warp(x, 0.0, eps).data, x)
    curve = knot_curve(np.full((1, 1, 8), 2.0), 4)
    assert np.array_equal((Tensor(np.ones((1, 1, 4))) * curve).data.ravel(), [2.0, 2.0, 2.0, 2.0])
    assert np.array_equal(mag_warp(x, 0.0, eps, additive=True).data, x + 1.0)


def test_mag_warp_curve_is_piecewise_linear():
    length, k = 101, 8
    knots = np.random.default_rng(3).normal(1.0, 0.2, (1, 1, k))
    curve = knot_curve(knots, length).data.ravel()
    second = np.abs(np.diff(curve, 2))  # second[l-1] centred at l
    knot_pos = np.arange(k) * (length - 1) / (k - 1)
    for centre in range(1, length - 1):
        near_knot = np.any((knot_pos > centre - 1) & (knot_pos < centre + 1))
        if not near_knot:
            assert second[centre - 1] < 1e-12
    assert curve[0] == pytest.approx(knots[0, 0, 0]) and curve[-1] == pytest.approx(knots[0, 0, -1])


def test_time_warp_examples():
    x = sine(n=2, c=2, length=50)
    eps = NoiseBundle.draw(4, x.shape).timew
    assert np.allclose(time_warp_baseline(x, 0.0, eps), x, atol=1e-12)
    out = time_warp_baseline(x, 0.05, eps)
    assert out.shape == x.shape
    with Tape():
        with pytest.raises(RuntimeError):
            time_warp_baseline(x, 0.05, eps)


def test_time_warp_positions_strictly_increasing_over_seeds():
    grid = np.linspace(0, 1, 64)
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        knots = np.abs(rng.normal(1.0, 0.5, 8)) + 1e-3
        warp = warp_positions(np.interp(grid, np.linspace(0, 1, 8), knots))
        assert np.all(np.diff(warp) > 0)
        assert warp[0] == 0.0 and warp[-1] == pytest.approx(63.0)


def test_time_distort_degenerate_single_component_is_identity():
    bounds = AugmentBounds(m=1)
    params = AugmentParams.init(bounds)
    params.gmm_scales_raw.data[:] = -np.inf
    x = sine(length=32)
    nb = NoiseBundle.draw(0, x.shape, bounds)
    lam, degenerate = distortion_locations(params, nb.gmm_normal, nb.gmm_choice)
    assert degenerate.all()
    assert np.array_equal(lam.data[0, 0], np.linspace(-1, 1, 32))
    assert np.array_equal(time_distort(x, params, nb.gmm_normal, nb.gmm_choice).data, x)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 8), st.floats(-3, 1))
def test_time_distort_locations_sorted_with_unit_endpoints(seed, m, log_scale):
    bounds = AugmentBounds(m=m)
    params = AugmentParams.init(bounds)
    params.gmm_scales_raw.data[:] = log_scale
    params.gmm_weights_raw.data[:] = np.random.default_rng(seed).normal(size=m)
    nb = NoiseBundle.draw(seed, (2, 2, 40), bounds)
    lam, _ = distortion_locations(params, nb.gmm_normal, nb.gmm_choice)
    assert np.all(np.diff(lam.data, axis=-1) >= 0)
    assert np.all(lam.data[..., 0] == -1.0) and np.all(lam.data[..., -1] == 1.0)


def test_time_distort_near_uniform_mixture_keeps_sinusoid():
    params = AugmentParams.init()  # bin-centred narrow components approximate a uniform density
    x = sine(n=200, length=256, f=1.0)
    nb = NoiseBundle.draw(9, x.shape)
    out = time_distort(x, params, nb.gmm_normal, nb.gmm_choice).data
    corr = faithfulness_proxy(x, out)["pearson"]
    assert np.all(corr > 0.9)


def test_time_distort_upsamples_dense_region():
    # one narrow component at the left: the left part of the signal is stretched
    bounds = AugmentBounds(m=2)
    params = AugmentParams.init(bounds)
    params.gmm_weights_raw.data[:] = [3.0, 0.0]
    params.gmm_means_raw.data[:] = [-0.8, 0.5]
    params.gmm_scales_raw.data[:] = np.log([0.05, 0.5])
    nb = NoiseBundle.draw(1, (1, 1, 200), bounds)
    lam, _ = distortion_locations(params, nb.gmm_normal, nb.gmm_choice)
    assert lam.data[0, 0, 100] < 0.0  # more than half the output samples come from the left half


def test_permute_examples():
    x = np.arange(1.0, 7.0).reshape(1, 1, 6)
    assert np.array_equal(permute_fixed(x, 1, np.array([[0.3, 0.1]])).data, x)
    idx = permutation_index(6, (2, 0, 1))
    assert x[0, 0, idx].tolist() == [5.0, 6.0, 1.0, 2.0, 3.0, 4.0]
    keys = np.array([[0.2, 0.9, 0.1, 0.5, 0.6]])  # argsort of first three -> (2, 0, 1)
    assert permute_fixed(x, 3, keys).data.ravel().tolist() == [5.0, 6.0, 1.0, 2.0, 3.0, 4.0]


def test_permute_segment_boundaries_use_floor():
    assert permutation_index(7, (0, 1, 2)).tolist() == list(range(7))
    assert permutation_index(7, (2, 1, 0)).tolist() == [4, 5, 6, 2, 3, 0, 1]


def test_permute_straight_through_gradient():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 1, 12))
    keys = rng.uniform(size=(2, 5))
    raw = Tensor(0.3, requires_grad=True)
    w = rng.normal(size=x.shape)
    with Tape() as tape:
        out = permute(x, raw, keys, 5)
        tape.backward((out * Tensor(w)).sum())
    n = effective_segments(0.3, 5)
    s = 1 / (1 + np.exp(-0.3))
    expected = np.sum(w * out.data) / n * 4 * s * (1 - s)
    assert raw.grad == pytest.approx(expected, rel=1e-12)
    # the true forward map is piecewise constant in raw_perm
    h = 1e-5
    assert np.array_equal(permute(x, 0.3 + h, keys, 5).data, permute(x, 0.3 - h, keys, 5).data)


# --------------------------------------------------------------- parameters


def test_parameter_count():
    assert AugmentParams.init(AugmentBounds(m=6)).count() == 22
    for m in (1, 3, 12):
        assert AugmentParams.init(AugmentBounds(m=m)).count() == 4 + 3 * m


def test_init_puts_intensities_at_half_eta():
    eff = AugmentParams.init(AugmentBounds(eta=0.08)).effective()
    assert eff["sigma_j"] == eff["sigma_s"] == eff["sigma_m"] == pytest.approx(0.04)
    assert eff["segments"] == 3


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e3, 1e3), st.floats(1e-3, 2.0), st.integers(1, 12))
def test_bounds_respected(raw, eta, k_max):
    p = AugmentParams.init(AugmentBounds(eta=eta, k_max=k_max))
    p.raw_sigma_j.data[...] = raw
    p.raw_perm.data[...] = raw
    assert 0.0 <= p.sigma_j().item() <= eta
    assert 1 <= p.segments() <= k_max


def test_gmm_weights_normalized_and_scales_positive():
    rng = np.random.default_rng(0)
    for _ in range(100):
        p = AugmentParams.init()
        p.gmm_weights_raw.data[:] = rng.normal(scale=10, size=6)
        p.gmm_scales_raw.data[:] = rng.normal(scale=5, size=6)
        assert abs(p.gmm_weights().data.sum() - 1.0) < 1e-12
        assert np.all(p.gmm_scales().data > 0)


# -------------------------------------------------------------------- noise


def test_noise_bundle_open_interval_and_regenerable():
    nb = NoiseBundle.draw(123, (3, 2, 50))
    for arr in nb.arrays().values():
        assert np.all((arr > 0) & (arr < 1))
    again = nb.regenerate()
    for k, arr in nb.arrays().items():
        assert np.array_equal(arr, again.arrays()[k])


# ---------------------------------------------------------------- pipeline


def test_leaves_identity_limit():
    x = sine(n=3, c=2, length=48) + 0.1
    nb = NoiseBundle.draw(0, x.shape)
    assert np.array_equal(leaves_forward(x, AugmentParams.identity(), nb).data, x)
    p = AugmentParams.identity()
    for t in (p.raw_sigma_j, p.raw_sigma_s, p.raw_sigma_m, p.raw_perm):
        t.data[...] = -40.0
    p.gmm_scales_raw.data[:] = -40.0
    assert np.max(np.abs(leaves_forward(x, p, nb).data - x)) < 1e-9


def test_different_noise_gives_different_views():
    x = sine(length=32)
    p = AugmentParams.init()
    for seed in range(100):
        a = leaves_forward(x, p, NoiseBundle.draw(2 * seed, x.shape)).data
        b = leaves_forward(x, p, NoiseBundle.draw(2 * seed + 1, x.shape)).data
        assert np.max(np.abs(a - b)) > 0


def test_leaves_forward_deterministic():
    x = sine(length=32)
    p = AugmentParams.init()
    nb = NoiseBundle.draw(5, x.shape)
    assert leaves_forward(x, p, nb).data.tobytes() == leaves_forward(x, p, nb.regenerate()).data.tobytes()


@pytest.mark.parametrize("seed", range(3))
def test_leaves_forward_gradcheck_all_smooth_params(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(2, 1, 16)))
    p = AugmentParams.init()
    p.gmm_weights_raw.data[:] = rng.normal(size=6)
    nb = NoiseBundle.draw(seed, x.shape)
    smooth = [t for name, t in p.named_tensors().items() if name != "raw_perm"]

    def f(*_):
        return leaves_forward(x, p, nb)

    errs = grad_errors(f, smooth)
    assert max(e.max() for e in errs) < 1e-4


def test_each_augmentation_shape_preserved():
    x = sine(n=2, c=3, length=30)
    nb = NoiseBundle.draw(0, x.shape)
    p = AugmentParams.init()
    assert leaves_forward(x, p, nb).shape == x.shape
    assert fixed_sigma_view(x, 0.05, nb).shape == x.shape


# ------------------------------------------------------------- diagnostics


def test_faithfulness_examples():
    x = sine(n=2, c=2)
    f = faithfulness_proxy(x, x)
    assert np.all(f["rmse"] == 0) and np.allclose(f["pearson"], 1.0)
    assert np.allclose(faithfulness_proxy(x, -x)["pearson"], -1.0)
    with pytest.raises(ValueError):
        faithfulness_proxy(x, x[:, :1])


def test_faithfulness_jitter_rmse_monte_carlo():
    x = sine(n=20, length=500)
    view = jitter(x, 0.05, NoiseBundle.draw(8, x.shape).jitter).data
    assert faithfulness_proxy(x, view)["rmse"].mean() == pytest.approx(0.05, rel=0.1)


def test_view_csv_format(tmp_path):
    path = tmp_path / "v.csv"
    write_view_csv(path, np.array([[0.5, 1.0, 2.0]]), ["lead"])
    lines = path.read_text().splitlines()
    assert lines[0] == "channel,t0,t1,t2"
    assert lines[1] == "lead,0.5,1.0,2.0"
