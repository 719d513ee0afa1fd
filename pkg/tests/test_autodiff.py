import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmdreamer import autodiff as ad
from mmdreamer.autodiff import DiagGaussian, Tape, Tensor
from mmdreamer.autodiff.checkpoint import dumps, loads
from mmdreamer.autodiff.gradcheck import check_gradients
from mmdreamer.errors import ContractError, DimensionError, DomainError, FormatError, StateError
from mmdreamer.harness.gradsuite import op_cases

LN2 = math.log(2.0)
HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def grads_of(fn, *params):
    with Tape() as tape:
        loss = fn()
    g = ad.backward(tape, loss)
    return [g.get(p) for p in params]


# ---------------------------------------------------------------- matmul

def test_matmul_identity_and_hand_arithmetic():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)
    assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    assert check_gradients(lambda: ad.tsum(ad.matmul(a, b)), [a, b]) < 1e-6
    (ga,) = grads_of(lambda: ad.tsum(ad.matmul(a, b)), a)
    np.testing.assert_allclose(ga, np.ones((3, 2)) @ b.data.T, rtol=1e-12)


# ---------------------------------------------------------------- convolution

def test_conv2d_all_ones_sums_window():
    out = ad.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), 1)
    assert out.data.tolist() == [[[9.0]]]


def test_conv2d_stride_shape():
    out = ad.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))), 2)
    assert out.shape == (1, 2, 2)


def test_conv2d_kernel_larger_than_input():
    with pytest.raises(DimensionError):
        ad.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), 1)


def test_conv2d_kernel_gradient(rng):
    x = Tensor(rng.standard_normal((2, 8, 8)))
    k = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 6, 6)))
    assert check_gradients(lambda: ad.tsum(ad.mul(ad.conv2d(x, k, 1), w)), [k]) < 1e-6


def test_conv2d_transpose_restores_spatial_dims():
    x = np.ones((1, 8, 8))
    k = Tensor(np.ones((2, 1, 2, 2)))
    y = ad.conv2d(Tensor(x), k, 2)
    assert ad.conv2d_transpose(y, k, 2).shape == x.shape


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), stride=st.integers(1, 3), kh=st.integers(1, 4))
def test_conv_adjoint_identity(seed, stride, kh):
    r = np.random.default_rng(seed)
    x = r.standard_normal((2, 9, 10))
    k = r.standard_normal((3, 2, kh, kh))
    y_shape = ad.conv2d(Tensor(x), Tensor(k), stride).shape
    y = r.standard_normal(y_shape)
    lhs = np.sum(ad.conv2d(Tensor(x), Tensor(k), stride).data * y)
    rhs = np.sum(x * ad.conv2d_transpose(Tensor(y), Tensor(k), stride, output_hw=(9, 10)).data)
    assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs))


def test_conv2d_transpose_gradient(rng):
    y = Tensor(rng.standard_normal((3, 3, 3)), requires_grad=True)
    k = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 7, 7)))
    assert check_gradients(lambda: ad.tsum(ad.mul(ad.conv2d_transpose(y, k, 2), w)), [y, k]) < 1e-6


# ---------------------------------------------------------------- elementwise

def test_elementwise_closed_forms():
    assert ad.elementwise("tanh", Tensor(0.0)).item() == 0.0
    assert ad.elementwise("softplus", Tensor(0.0)).item() == pytest.approx(LN2, abs=1e-15)
    assert ad.elementwise("affine-scale", Tensor(2.0), scale=3.0, shift=1.0).item() == 7.0
    assert ad.elementwise("mul", Tensor([2.0]), Tensor([4.0])).data.tolist() == [8.0]


def test_log_domain_and_broadcast_errors():
    with pytest.raises(DomainError):
        ad.log(Tensor([1.0, 0.0]))
    with pytest.raises(DimensionError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(2)))
    # scalar broadcasting is the one supported case
    assert ad.add(Tensor(np.ones(3)), Tensor(2.0)).data.tolist() == [3.0, 3.0, 3.0]


@pytest.mark.parametrize("tag", ["tanh", "relu", "softplus", "exp", "log", "add", "mul", "affine-scale"])
def test_each_op_tag_gradient_at_64_points(tag, rng):
    x = rng.uniform(0.1, 2.0, 64) if tag == "log" else rng.standard_normal(64)
    if tag == "relu":
        x = np.where(np.abs(x) < 0.05, 0.5, x)
    a = Tensor(x, requires_grad=True)
    b = Tensor(rng.standard_normal(64), requires_grad=True)
    w = Tensor(rng.standard_normal(64))
    if tag in ("add", "mul"):
        fn, params = (lambda: ad.tsum(ad.mul(ad.elementwise(tag, a, b), w))), [a, b]
    else:
        fn, params = (lambda: ad.tsum(ad.mul(ad.elementwise(tag, a, scale=1.3, shift=0.2), w))), [a]
    assert check_gradients(fn, params) < 1e-6


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_every_op_gradient_within_1e_4(seed):
    for name, fn, params in op_cases(seed):
        assert check_gradients(fn, params, eps=1e-5) <= 1e-4, name


def test_repeated_backward_is_bit_identical(rng):
    _, fn, params = next(c for c in op_cases(3) if c[0] == "conv2d")
    first = grads_of(fn, *params)
    second = grads_of(fn, *params)
    for a, b in zip(first, second):
        assert np.array_equal(a, b)


# ---------------------------------------------------------------- distributions

def test_reparameterize_examples():
    mean = Tensor([0.3, -1.0])
    dist = DiagGaussian(mean, Tensor([2.0, 0.5]))
    assert np.array_equal(ad.reparameterize(dist, np.zeros(2)).data, mean.data)
    assert ad.reparameterize(DiagGaussian(Tensor([0.0]), Tensor([1.0])), [1.5]).data.tolist() == [1.5]


def test_reparameterize_std_gradient_is_noise(rng):
    noise = rng.standard_normal(4)
    mu = Tensor(rng.standard_normal(4), requires_grad=True)
    sd = Tensor(rng.uniform(0.5, 2.0, 4), requires_grad=True)
    fn = lambda: ad.tsum(ad.reparameterize(DiagGaussian(mu, sd), noise))
    _, gs = grads_of(fn, mu, sd)
    np.testing.assert_allclose(gs, noise, rtol=1e-12)
    assert check_gradients(fn, [mu, sd]) < 1e-6


def test_nonpositive_std_rejected():
    with pytest.raises(DomainError):
        DiagGaussian(Tensor([0.0]), Tensor([0.0]))


def test_gaussian_kl_closed_forms():
    p = DiagGaussian(Tensor([0.4, -0.2]), Tensor([1.3, 0.7]))
    assert ad.gaussian_kl(p, p).item() == 0.0
    assert ad.gaussian_kl(DiagGaussian(Tensor([1.0]), Tensor([1.0])),
                          DiagGaussian(Tensor([0.0]), Tensor([1.0]))).item() == pytest.approx(0.5, abs=1e-15)


def test_gaussian_kl_matches_quadrature(rng):
    from scipy import integrate
    from scipy.stats import norm

    for _ in range(20):
        m1, m2 = rng.uniform(-2, 2, 2)
        s1, s2 = rng.uniform(0.3, 2.0, 2)
        f = lambda x: norm.pdf(x, m1, s1) * (norm.logpdf(x, m1, s1) - norm.logpdf(x, m2, s2))
        ref, _ = integrate.quad(f, m1 - 14 * s1, m1 + 14 * s1, epsabs=1e-13, epsrel=1e-13, limit=200)
        kl = ad.gaussian_kl(DiagGaussian(Tensor([m1]), Tensor([s1])), DiagGaussian(Tensor([m2]), Tensor([s2])))
        assert abs(kl.item() - ref) <= 1e-6


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(0.05, 5), st.floats(-5, 5), st.floats(0.05, 5)),
                min_size=1, max_size=6))
def test_gaussian_kl_nonnegative_and_zero_only_when_equal(rows):
    m1, s1, m2, s2 = (np.array(c) for c in zip(*rows))
    kl = ad.gaussian_kl(DiagGaussian(Tensor(m1), Tensor(s1)), DiagGaussian(Tensor(m2), Tensor(s2))).item()
    assert kl >= -1e-12
    if np.array_equal(m1, m2) and np.array_equal(s1, s2):
        assert abs(kl) <= 1e-12
    elif np.max(np.abs(m1 - m2)) > 1e-3 or np.max(np.abs(np.log(s1 / s2))) > 1e-3:
        assert kl > 0


def test_gaussian_nll_values_and_gradient(rng):
    assert ad.gaussian_nll(Tensor([0.7]), Tensor([0.7])).item() == pytest.approx(0.9189385332046727, abs=1e-15)
    assert ad.gaussian_nll(Tensor([0.0]), Tensor([2.0])).item() == pytest.approx(2.0 + HALF_LOG_2PI, abs=1e-14)
    t = rng.standard_normal(6)
    m = Tensor(rng.standard_normal(6), requires_grad=True)
    (g,) = grads_of(lambda: ad.gaussian_nll(Tensor(t), m), m)
    np.testing.assert_allclose(g, m.data - t, rtol=1e-12)
    assert check_gradients(lambda: ad.gaussian_nll(Tensor(t), m), [m]) < 1e-6
    with pytest.raises(DimensionError):
        ad.gaussian_nll(Tensor(np.ones(2)), Tensor(np.ones(3)))


def test_bernoulli_nll_values_stability_and_gradient(rng):
    assert ad.bernoulli_nll(Tensor([1.0]), Tensor([30.0])).item() <= 1e-12
    assert ad.bernoulli_nll(Tensor([1.0]), Tensor([0.0])).item() == pytest.approx(LN2, abs=1e-15)
    big = ad.bernoulli_nll(Tensor([1.0, 0.0, 1.0, 0.0]), Tensor([1e4, -1e4, -1e4, 1e4])).item()
    assert big == pytest.approx(2e4, rel=1e-12)
    t = (rng.uniform(size=8) > 0.5).astype(float)
    z = Tensor(rng.standard_normal(8) * 3, requires_grad=True)
    (g,) = grads_of(lambda: ad.bernoulli_nll(Tensor(t), z), z)
    np.testing.assert_allclose(g, 1 / (1 + np.exp(-z.data)) - t, rtol=1e-12)
    assert check_gradients(lambda: ad.bernoulli_nll(Tensor(t), z), [z]) < 1e-6
    with pytest.raises(DomainError):
        ad.bernoulli_nll(Tensor([0.5]), Tensor([0.0]))


# ---------------------------------------------------------------- backward

def test_backward_examples():
    w = Tensor(np.ones((2, 3)), requires_grad=True)
    (g,) = grads_of(lambda: ad.tsum(w), w)
    np.testing.assert_array_equal(g, np.ones((2, 3)))
    v = Tensor([3.0], requires_grad=True)
    (g,) = grads_of(lambda: ad.tsum(ad.mul(v, v)), v)
    assert g.tolist() == [6.0]


def test_backward_errors():
    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        vec = ad.mul(w, w)
    with pytest.raises(ContractError):
        ad.backward(tape, vec)
    with Tape() as tape:
        loss = ad.tsum(ad.mul(w, w))
    ad.backward(tape, loss)
    with pytest.raises(StateError):
        ad.backward(tape, loss)


def test_backward_skips_detached_and_constant_leaves():
    w = Tensor([2.0], requires_grad=True)
    c = Tensor([5.0])
    with Tape() as tape:
        loss = ad.tsum(ad.add(ad.mul(w, c), ad.mul(w.detach(), w.detach())))
    g = ad.backward(tape, loss)
    assert g.get(c) is None
    assert g[w].tolist() == [5.0]


def test_composite_loss_through_matmul_tanh_conv(rng):
    x = Tensor(rng.standard_normal((2, 6, 6)))
    k = Tensor(rng.standard_normal((2, 2, 3, 3)) * 0.5, requires_grad=True)
    w = Tensor(rng.standard_normal((8, 3)) * 0.5, requires_grad=True)

    def loss():
        h = ad.tanh(ad.conv2d(x, k, 2))
        return ad.tsum(ad.square(ad.matmul(ad.reshape(h, (1, 8)), w)))

    assert check_gradients(loss, [k, w]) < 1e-5


# ---------------------------------------------------------------- optimizer

def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    new, _ = ad.adam_step(p, {"w": np.zeros(2)}, ad.AdamState(), lr=0.1)
    np.testing.assert_array_equal(new["w"], p["w"])


@pytest.mark.parametrize("g", [1e-3, 0.3, -50.0, 1e4])
def test_adam_first_step_is_lr_sign(g):
    new, state = ad.adam_step({"w": np.array([0.0])}, {"w": np.array([g])}, ad.AdamState(), lr=0.01)
    assert new["w"][0] == pytest.approx(-0.01 * np.sign(g), rel=1e-3)
    assert state.step == 1


def test_adam_converges_on_quadratic():
    w, state = {"w": np.array([0.0])}, ad.AdamState()
    for _ in range(100):
        w, state = ad.adam_step(w, {"w": 2 * (w["w"] - 3.0)}, state, lr=0.1)
    assert abs(w["w"][0] - 3.0) < 0.5


def test_adam_is_deterministic(rng):
    p = {"a": rng.standard_normal(5)}
    g = {"a": rng.standard_normal(5)}
    one = ad.adam_step(p, g, ad.AdamState(), 0.01)[0]
    two = ad.adam_step(p, g, ad.AdamState(), 0.01)[0]
    assert np.array_equal(one["a"], two["a"])


def test_clip_by_global_norm():
    clipped, norm = ad.clip_by_global_norm({"a": np.array([3.0]), "b": np.array([4.0])}, 1.0)
    assert norm == 5.0
    assert np.sqrt(clipped["a"] ** 2 + clipped["b"] ** 2)[0] == pytest.approx(1.0)


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip(tmp_path, rng):
    arrays = {"w": rng.standard_normal((3, 2)), "b": rng.standard_normal(4), "s": np.array(1.5)}
    digest = ad.save_checkpoint(tmp_path / "a.drck", arrays, {"variant": "x"})
    back, meta = ad.load_checkpoint(tmp_path / "a.drck")
    assert meta["variant"] == "x" and len(digest) == 64
    for k in arrays:
        assert np.array_equal(back[k], arrays[k]) and back[k].shape == arrays[k].shape


def test_checkpoint_rejects_bad_input():
    blob = dumps({"w": np.ones(2)})
    assert blob[:4] == b"DRCK"
    with pytest.raises(FormatError):
        loads(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        loads(blob[:4] + (2).to_bytes(4, "little") + blob[8:])
    with pytest.raises(FormatError):
        loads(blob[:-3])
    with pytest.raises(FormatError):
        loads(blob + b"\0")
