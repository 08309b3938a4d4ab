import numpy as np
import pytest
from helpers import fd_check

from fundps import autodiff as ad

rng = np.random.default_rng(1234)


def _x(*shape):
    return rng.standard_normal(shape)


def _z(*shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


PRIMITIVES = {
    "add": (lambda v: ad.add(v[0], v[1]), [_x(2, 3, 4), _x(3, 1)]),
    "sub": (lambda v: ad.sub(v[0], v[1]), [_x(2, 3, 4), _x(4)]),
    "neg": (lambda v: ad.neg(v[0]), [_x(5)]),
    "scalar_mul": (lambda v: ad.mul(2.5, v[0]), [_x(3, 3)]),
    "mul": (lambda v: ad.mul(v[0], v[1]), [_x(2, 3, 4), _x(2, 1, 4)]),
    "div": (lambda v: ad.div(v[0], v[1]), [_x(3, 4), 2.0 + np.abs(_x(3, 4))]),
    "sqrt": (lambda v: ad.sqrt(v[0]), [1.0 + np.abs(_x(6))]),
    "gelu": (lambda v: ad.gelu(v[0]), [_x(2, 3, 5)]),
    "reshape": (lambda v: ad.reshape(v[0], (6, 4)), [_x(2, 3, 4)]),
    "index": (lambda v: v[0][:, 1, 1:3], [_x(2, 3, 4)]),
    "concat": (lambda v: ad.concat([v[0], v[1]], axis=1), [_x(2, 3, 4), _x(2, 2, 4)]),
    "pad2d": (lambda v: ad.pad2d(v[0], 1, 2, 0, 1), [_x(2, 3, 4)]),
    "sum": (lambda v: ad.sum(v[0], axis=(0, 2)), [_x(2, 3, 4)]),
    "squared_l2": (lambda v: ad.squared_l2(v[0], axis=1), [_x(2, 3, 4)]),
    "huber": (lambda v: ad.huber(v[0] * 2.0, 1.0), [_x(4, 5) + 0.05]),
    "gather": (
        lambda v: ad.gather(v[0], np.arange(2 * 4 * 4).reshape(2, 4, 4) % 3 == 0),
        [_x(3, 2, 4, 4)],
    ),
    "matmul": (lambda v: ad.matmul(v[0], v[1]), [_x(3, 2, 5), _x(5, 4)]),
    "channel_mix": (lambda v: ad.channel_mix(v[0], v[1], v[2]), [_x(2, 3, 4, 5), _x(6, 3), _x(6)]),
    "group_norm": (lambda v: ad.group_norm(v[0], 2), [_x(2, 4, 3, 3)]),
    "rfft2_even": (lambda v: ad.rfft2(v[0]), [_x(2, 8, 8)]),
    "rfft2_odd": (lambda v: ad.rfft2(v[0]), [_x(2, 7, 9)]),
    "irfft2_even": (lambda v: ad.irfft2(v[0], (6, 8)), [_z(2, 6, 5)]),
    "irfft2_odd": (lambda v: ad.irfft2(v[0], (5, 7)), [_z(2, 5, 4)]),
    "truncate_modes": (lambda v: ad.truncate_modes(v[0], 2, 3), [_z(2, 8, 5)]),
    "embed_modes": (lambda v: ad.embed_modes(v[0], 8, 5), [_z(2, 4, 3)]),
    "spectral_mix": (lambda v: ad.spectral_mix(v[0], v[1]), [_z(2, 3, 4, 3), _x(3, 5, 4, 3, 2)]),
    "resample_fourier_up": (lambda v: ad.resample_fourier(v[0], (12, 10)), [_x(2, 6, 5)]),
    "resample_fourier_down": (lambda v: ad.resample_fourier(v[0], (4, 5)), [_x(2, 8, 10)]),
    "resample_nearest": (lambda v: ad.resample_nearest(v[0], (8, 6)), [_x(2, 4, 3)]),
    "real": (lambda v: ad.real(v[0]), [_z(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_adjoint_matches_finite_differences(name):
    fn, inputs = PRIMITIVES[name]
    assert fd_check(fn, inputs) <= 1e-5


def test_squared_l2_gradient():
    tape = ad.Tape()
    x = tape.var([3.0, 4.0])
    np.testing.assert_allclose(ad.grad(tape, ad.squared_l2(x), x), [6.0, 8.0])


def test_huber_gradient_inside_and_outside():
    tape = ad.Tape()
    x = tape.var([0.5, 2.0, -3.0])
    g = ad.grad(tape, ad.sum(ad.huber(x, 1.0)), x)
    np.testing.assert_allclose(g, [0.5, 1.0, -1.0])


def test_fft_roundtrip_composition_has_zero_gradient():
    tape = ad.Tape()
    x = tape.var(_x(8, 8))
    y = ad.irfft2(ad.rfft2(x), (8, 8))
    loss = ad.squared_l2(y - x)
    assert float(loss.value) < 1e-25
    assert np.abs(ad.grad(tape, loss, x)).max() < 1e-12


def test_linear_least_squares_gradient_matches_dense_oracle():
    m = _x(64, 64)
    u = _x(64)
    x0 = _x(8, 8)
    tape = ad.Tape()
    x = tape.var(x0)
    r = ad.matmul(ad.reshape(x, (64,)), m.T) - u
    g = ad.grad(tape, ad.squared_l2(r), x)
    expected = 2 * m.T @ (m @ x0.ravel() - u)
    np.testing.assert_allclose(g.ravel(), expected, rtol=1e-10, atol=1e-10)


def test_gradient_of_sum_is_sum_of_gradients():
    x0 = _x(4, 4)

    def g_of(fn):
        tape = ad.Tape()
        x = tape.var(x0)
        return ad.grad(tape, fn(x), x)

    f1 = lambda x: ad.sum(ad.gelu(x))
    f2 = lambda x: ad.squared_l2(ad.rfft2(x))
    np.testing.assert_allclose(g_of(lambda x: f1(x) + f2(x)), g_of(f1) + g_of(f2), atol=1e-14)


def test_backward_is_deterministic():
    x0 = _x(2, 3, 8, 8)
    w = _x(3, 3, 4, 3, 2)

    def run():
        tape = ad.Tape()
        x = tape.var(x0)
        y = ad.irfft2(ad.embed_modes(ad.spectral_mix(ad.truncate_modes(ad.rfft2(x), 2, 3), w), 8, 5), (8, 8))
        return ad.grad(tape, ad.squared_l2(ad.gelu(y)), x)

    assert np.array_equal(run(), run())


def test_wrt_not_on_tape_is_rejected():
    t1, t2 = ad.Tape(), ad.Tape()
    x = t1.var(1.0)
    y = t2.var(2.0)
    with pytest.raises(ad.TapeError):
        ad.grad(t1, ad.mul(x, x), y)


def test_mixing_tapes_is_rejected():
    t1, t2 = ad.Tape(), ad.Tape()
    with pytest.raises(ad.TapeError):
        ad.add(t1.var(1.0), t2.var(2.0))


def test_shape_mismatch_at_record_time():
    tape = ad.Tape()
    with pytest.raises(ValueError, match="shape mismatch"):
        ad.add(tape.var(np.zeros(3)), tape.var(np.zeros(4)))
    with pytest.raises(ValueError, match="shape mismatch"):
        ad.channel_mix(tape.var(np.zeros((1, 3, 2, 2))), np.zeros((2, 4)))


def test_untraced_inputs_return_plain_arrays():
    out = ad.gelu(np.array([0.0, 1.0]))
    assert isinstance(out, np.ndarray)


def test_unused_wrt_gets_zero_gradient():
    tape = ad.Tape()
    x = tape.var(np.ones(3))
    y = tape.var(np.ones(2))
    gx, gy = ad.grad(tape, ad.squared_l2(x), [x, y])
    np.testing.assert_array_equal(gy, 0.0)
    np.testing.assert_allclose(gx, 2.0)
