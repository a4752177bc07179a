import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vsharp.masks import (
    MaskError,
    default_acs_fraction,
    equispaced_mask,
    full_mask,
    make_mask,
    poisson_disc_mask,
    poisson_radius,
)


@settings(max_examples=40, deadline=None)
@given(st.integers(16, 256), st.sampled_from([2, 4, 8, 16]), st.integers(0, 1000))
def test_equispaced_properties(W, accel, seed):
    acs_fraction = min(default_acs_fraction(accel), 0.5 / accel)
    m = equispaced_mask(24, W, accel, acs_fraction, seed)
    cols = m.grid[0]
    assert (m.grid == cols).all(), "whole columns are acquired"
    assert m.grid[m.acs].all()
    assert int(cols.sum()) == max(round(W / accel), int(np.ceil(acs_fraction * W)))


def test_equispaced_spacing_is_even():
    m = equispaced_mask(8, 200, 8, 0.02, seed=3)
    free = ~m.acs[0]
    # positions of the extra lines counted over non-ACS columns only
    rank = np.flatnonzero(m.grid[0][free])
    gaps = np.diff(rank)
    assert gaps.max() - gaps.min() <= 1


def test_acs_block_is_centered():
    m = equispaced_mask(4, 64, 4, 0.08)
    idx = np.flatnonzero(m.acs[0])
    assert idx.size == 6 and abs(idx.mean() - 31.5) <= 1


@pytest.mark.parametrize("accel,acs", [(4, 0.08), (8, 0.04), (16, 0.02)])
@pytest.mark.parametrize("size", [64, 96])
def test_poisson_acceleration_and_acs(accel, acs, size):
    m = poisson_disc_mask(size, size, accel, acs, seed=7)
    assert abs(m.achieved_accel / accel - 1) <= 0.1
    assert m.grid[m.acs].all()
    assert abs(m.acs.mean() - acs) < 0.5 * acs + 2 / size


def test_poisson_density_decreases_outward():
    m = poisson_disc_mask(128, 128, 8, 0.04, seed=1)
    yy, xx = np.mgrid[:128, :128]
    r = np.hypot(yy - 64, xx - 64)
    inner, outer = m.grid[(r > 10) & (r < 25)].mean(), m.grid[r > 50].mean()
    assert inner > outer


def test_poisson_respects_exclusion_radius():
    m = poisson_disc_mask(48, 48, 6, 0.04, seed=2)
    rad = poisson_radius(48, 48, m.params["r0"], m.params["alpha"])
    pts = np.argwhere(m.grid.astype(bool) & ~m.acs)
    d = np.hypot(*(pts[:, None, :] - pts[None, :, :]).transpose(2, 0, 1))
    np.fill_diagonal(d, np.inf)
    # every pair is at least the smaller of their two radii apart (the sampler's acceptance rule)
    r = rad[pts[:, 0], pts[:, 1]]
    assert (d >= np.minimum(r[:, None], r[None, :]) - 1e-9).all()


@pytest.mark.parametrize("kind", ["equispaced", "poisson"])
def test_seeded_determinism(kind):
    a = make_mask(kind, 64, 64, 8, seed=11)
    b = make_mask(kind, 64, 64, 8, seed=11)
    c = make_mask(kind, 64, 64, 8, seed=12)
    assert np.array_equal(a.grid, b.grid)
    assert not np.array_equal(a.grid, c.grid)


def test_full_mask():
    m = full_mask(5, 7)
    assert m.grid.all() and m.achieved_accel == 1.0


def test_default_acs_pairing():
    assert [default_acs_fraction(r) for r in (4, 8, 16)] == [0.08, 0.04, 0.02]


@pytest.mark.parametrize(
    "args",
    [
        dict(H=0, W=8, accel=4, acs_fraction=0.1),
        dict(H=8, W=8, accel=0.5, acs_fraction=0.1),
        dict(H=8, W=8, accel=4, acs_fraction=0.0),
        dict(H=8, W=64, accel=8, acs_fraction=0.3),
    ],
)
def test_invalid_arguments(args):
    with pytest.raises(MaskError):
        equispaced_mask(**args)
    with pytest.raises(MaskError):
        poisson_disc_mask(**args)


def test_unknown_kind():
    with pytest.raises(MaskError):
        make_mask("radial", 8, 8, 2)


def test_metadata_roundtrips_generation_parameters():
    m = make_mask("poisson", 32, 32, 4, seed=5)
    meta = m.metadata()
    assert meta["kind"] == "poisson" and meta["seed"] == 5 and "alpha" in meta
    assert meta["achieved_accel"] == pytest.approx(m.achieved_accel)
