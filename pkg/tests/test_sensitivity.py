import numpy as np
import pytest

from conftest import check_grad
from vsharp import autodiff as ad
from vsharp.autodiff import Tensor
from vsharp.denoisers import Residual, UNet
from vsharp.masks import equispaced_mask, full_mask
from vsharp.operators import predict_kspace, sensitivity_norm
from vsharp.sensitivity import estimate_acs, normalize, refine
from vsharp.training import coil_maps


def _kspace(rng, n_c=4, N=32):
    img = np.abs(rng.standard_normal((N, N))) + 0.5
    C = coil_maps(rng, n_c, N, N)
    return img, C, predict_kspace(ad.from_complex(img.astype(complex))[None], ad.from_complex(C)[None]).data


def test_full_acs_recovers_true_maps(rng):
    img, C, y = _kspace(rng)
    est = estimate_acs(y, full_mask(32, 32))
    # with the whole of k-space as ACS, coil images / RSS equal the true (unit-norm) maps for a positive image
    np.testing.assert_allclose(ad.to_complex(est.maps[0]), C, atol=1e-10)
    assert est.support.all()


def test_partial_acs_maps_are_normalized(rng):
    _, _, y = _kspace(rng)
    m = equispaced_mask(32, 32, 4, 0.08)
    est = estimate_acs(y * m.grid, m)
    norm = sensitivity_norm(est.maps)[0]
    np.testing.assert_allclose(norm[est.support[0]], 1.0, rtol=1e-10)
    assert (norm[~est.support[0]] == 0).all()


def test_estimate_ignores_non_acs_samples(rng):
    _, _, y = _kspace(rng)
    m = equispaced_mask(32, 32, 4, 0.08)
    noisy = y * m.grid + (rng.standard_normal(y.shape) * (~m.acs))
    np.testing.assert_allclose(estimate_acs(noisy, m).maps, estimate_acs(y, m).maps, atol=1e-12)


def test_zero_kspace_gives_zero_maps():
    est = estimate_acs(np.zeros((1, 2, 2, 8, 8)), full_mask(8, 8))
    assert not est.maps.any() and not est.support.any()


def test_empty_acs_rejected():
    with pytest.raises(ValueError, match="ACS"):
        estimate_acs(np.ones((1, 2, 2, 8, 8)), np.zeros((8, 8), bool))


def test_refine_renormalizes_on_support(rng):
    _, _, y = _kspace(rng)
    m = equispaced_mask(32, 32, 4, 0.08)
    est = estimate_acs(y * m.grid, m)
    net = Residual(UNet(2, 2, 2, 4, seed=1, dtype=np.float64))
    C = refine(est, net).data
    np.testing.assert_allclose(sensitivity_norm(C)[0][est.support[0]], 1.0, rtol=1e-10)


def test_refine_with_identity_network_is_noop(rng):
    _, _, y = _kspace(rng)
    est = estimate_acs(y, full_mask(32, 32))
    np.testing.assert_allclose(refine(est, lambda t: t).data, est.maps, atol=1e-12)


def test_refine_rejects_shape_change(rng):
    _, _, y = _kspace(rng, N=8)
    est = estimate_acs(y, full_mask(8, 8))
    with pytest.raises(ValueError):
        refine(est, lambda t: t[:, :1])


def test_normalize_gradient(rng):
    C = rng.standard_normal((1, 3, 2, 4, 4))
    w = rng.standard_normal(C.shape)
    check_grad(lambda c: ad.sum(normalize(c) * Tensor(w)), [C])
