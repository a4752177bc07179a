import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from conftest import check_grad
from vsharp import autodiff as ad
from vsharp.autodiff import Tensor
from vsharp.denoisers import (
    IdentityDenoiser,
    ProxQuadratic,
    Residual,
    SoftThreshold,
    UNet,
    UNetDenoiser,
    build_denoiser,
    prox_quadratic,
    soft_threshold,
    unet_parameter_count,
)


def _prox_oracle(v, lam, rho, reg):
    """Numerically minimise ``lam*R(z) + rho/2 ||v - z||^2`` for a single complex pixel."""
    obj = lambda z: lam * reg(z) + 0.5 * rho * np.sum((v - z) ** 2)  # noqa: E731
    return minimize(obj, v, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 4000}).x


@pytest.mark.parametrize("lam,rho", [(0.1, 1.0), (0.7, 0.3), (2.0, 5.0)])
def test_prox_quadratic_matches_numerical_minimiser(rng, lam, rho):
    x, u = rng.standard_normal((1, 2, 2, 2)), rng.standard_normal((1, 2, 2, 2))
    ours = prox_quadratic(None, Tensor(x), Tensor(u / rho), lam, rho).data
    v = (x + u / rho).reshape(2, -1)
    ref = np.stack([_prox_oracle(v[:, i], lam, rho, lambda z: np.sum(z * z)) for i in range(v.shape[1])], 1)
    np.testing.assert_allclose(ours.reshape(2, -1), ref, atol=1e-6)


@pytest.mark.parametrize("lam,rho", [(0.3, 1.0), (1.0, 0.5)])
def test_soft_threshold_matches_numerical_minimiser(rng, lam, rho):
    x = rng.standard_normal((1, 2, 2, 3))
    ours = soft_threshold(None, Tensor(x), Tensor(np.zeros_like(x)), lam, rho).data
    v = x.reshape(2, -1)
    ref = np.stack([_prox_oracle(v[:, i], lam, rho, lambda z: np.hypot(*z)) for i in range(v.shape[1])], 1)
    np.testing.assert_allclose(ours.reshape(2, -1), ref, atol=1e-5)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.0, 3.0), st.floats(0.05, 5.0), st.integers(0, 2**31))
def test_soft_threshold_shrinks_magnitude_keeps_phase(lam, rho, seed):
    v = np.random.default_rng(seed).standard_normal((1, 2, 3, 3))
    out = soft_threshold(None, Tensor(v), Tensor(np.zeros_like(v)), lam, rho).data
    mag_in, mag_out = np.hypot(*v[0]), np.hypot(*out[0])
    np.testing.assert_allclose(mag_out, np.maximum(mag_in - lam / rho, 0), atol=1e-12)
    keep = mag_out > 0
    np.testing.assert_allclose(v[0][:, keep] / mag_in[keep], out[0][:, keep] / mag_out[keep], atol=1e-12)


def test_prox_quadratic_rejects_negative_lambda():
    with pytest.raises(ValueError):
        prox_quadratic(None, Tensor(np.zeros((1, 2, 1, 1))), Tensor(np.zeros((1, 2, 1, 1))), -1.0, 1.0)


def test_identity_returns_z():
    z = Tensor(np.ones((1, 2, 2, 2)))
    assert IdentityDenoiser()(z, None, None, 1.0) is z


@pytest.mark.parametrize("scales,filters", [(1, 4), (2, 8), (3, 4)])
def test_unet_parameter_count_matches_analytic(scales, filters):
    net = UNet(6, 2, scales, filters)
    assert net.num_parameters() == unet_parameter_count(6, 2, scales, filters)


def test_unet_hand_count_small():
    # 1 scale: conv(3->4) + conv(4->4) + 1x1(4->2)
    assert unet_parameter_count(3, 2, 1, 4) == (3 * 4 * 9 + 4) + (4 * 4 * 9 + 4) + (4 * 2 + 2)


@pytest.mark.parametrize("H,W", [(16, 16), (13, 10), (7, 9)])
def test_unet_preserves_shape(rng, H, W):
    net = UNet(6, 2, scales=3, filters=4, dtype=np.float64)
    assert net(Tensor(rng.standard_normal((2, 6, H, W)))).shape == (2, 2, H, W)


def test_unet_zero_weights_give_zero_output(rng):
    net = UNet(6, 2, 2, 4)
    for p in net.parameters():
        p.data[...] = 0
    assert not net(Tensor(rng.standard_normal((1, 6, 8, 8)))).data.any()


def test_residual_denoiser_is_identity_with_zero_unet(rng):
    den = UNetDenoiser(UNet(6, 2, 2, 4, dtype=np.float64))
    for p in den.parameters():
        p.data[...] = 0
    z, x, u = (Tensor(rng.standard_normal((1, 2, 8, 8))) for _ in range(3))
    np.testing.assert_array_equal(den(z, x, u).data, z.data)


def test_residual_wrapper_adds_leading_channels(rng):
    net = UNet(2, 2, 1, 2, dtype=np.float64)
    for p in net.parameters():
        p.data[...] = 0
    x = Tensor(rng.standard_normal((3, 2, 4, 4)))
    np.testing.assert_array_equal(Residual(net)(x).data, x.data)


def test_unet_gradients_match_finite_differences(rng):
    net = UNet(2, 2, 2, 2, seed=3, dtype=np.float64)
    conv = net.down[1][0]
    x0 = rng.standard_normal((1, 2, 6, 6))
    check_grad(lambda x: ad.sum(net(x) ** 2), [x0])

    def with_weight(wt):
        conv.weight = wt
        return ad.sum(net(Tensor(x0)) ** 2)

    check_grad(with_weight, [conv.weight.data.copy()])


def test_denoiser_shape_mismatch():
    den = UNetDenoiser(UNet(6, 2, 1, 2))
    with pytest.raises(ValueError):
        den(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 4, 5))), Tensor(np.zeros((1, 2, 4, 4))))


def test_build_denoiser_dispatch():
    assert isinstance(build_denoiser({"kind": "identity"}), IdentityDenoiser)
    assert isinstance(build_denoiser({"kind": "prox-quadratic", "lambda": 0.1}), ProxQuadratic)
    assert isinstance(build_denoiser({"kind": "soft-threshold", "lambda": 0.1}), SoftThreshold)
    unet = build_denoiser({"kind": "unet", "scales": 2, "filters": 4})
    assert unet.spec()["filters"] == 4
    with pytest.raises(ValueError):
        build_denoiser({"kind": "bm3d"})
