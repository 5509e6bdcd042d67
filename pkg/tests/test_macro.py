import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from localhughes.eikonal import CostModel
from localhughes.fields import make_kernel
from localhughes.geometry import Domain, VisionSpec, build_grid
from localhughes.macro import (FluxLaw, MacroSetup, MacroState, MonotonicityError, cfl_dt, force_flux, mobility,
                               run_macro, step_macro)

LWR = FluxLaw("lwr")


def test_mobility_examples():
    aw = FluxLaw("as_written")
    assert mobility(0.0, aw) == 0 and mobility(1.0, aw) == 0
    assert math.isclose(mobility(0.5, aw), 0.25)
    assert math.isclose(LWR.flux(0.5), 0.25) and LWR.flux(1.0) == 0
    assert math.isclose(aw.flux(2 / 3), 4 / 27)
    assert math.isclose(LWR.max_slope, 1.0) and math.isclose(aw.max_slope, 1.0)
    with pytest.raises(ValueError):
        FluxLaw("greenshields")


def test_force_hand_value():
    # g(0.8) = g(0.2) = 0.16, LF = 0.16 + 0.6, rho* = 0.5, LW = 0.25
    assert math.isclose(float(force_flux(0.8, 0.2, 1.0, 0.5, 1.0, LWR.flux)), 0.505, rel_tol=1e-14)


@given(st.floats(0, 1), st.floats(-1, 1), st.floats(0.05, 1))
def test_force_consistency(rho, theta, lam):
    assert math.isclose(float(force_flux(rho, rho, theta, lam, 1.0, LWR.flux)), theta * rho * (1 - rho),
                        abs_tol=1e-15)
    assert float(force_flux(1.0, 1.0, theta, lam, 1.0, LWR.flux)) == 0


def test_cfl_dt():
    assert math.isclose(cfl_dt(1.0, 0.01, 0.45, 1.0), 0.0045)
    assert cfl_dt(0.0, 0.01, 0.45, 5e-3) == 5e-3
    assert cfl_dt(1e-6, 0.01, 0.45, 5e-3) == 5e-3


def _line(n, exits=("left", "right")):
    return build_grid(Domain.interval(exits=exits), n)


def test_zero_direction_leaves_uniform_state_unchanged():
    g = build_grid(Domain.rectangle((0, 1), (0, 1), [((0, 0), (0, 0.2))]), (10, 10))
    zero = np.zeros(g.shape + (2,))
    rho = np.full(g.shape, 0.4)
    s = step_macro(MacroState(0.0, rho, np.zeros(1)), g, zero, 1e-3, LWR)
    # only the two cells behind the exit release their upwind outflow
    changed = s.rho != rho
    assert changed.sum() == 2 and changed[0, :2].all()
    jam = np.ones(g.shape)
    s = step_macro(MacroState(0.0, jam, np.zeros(1)), g, zero, 1e-3, LWR)
    np.testing.assert_array_equal(s.rho, jam)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=20)
def test_step_mass_balance(seed):
    rng = np.random.default_rng(seed)
    g = build_grid(Domain.rectangle((0, 1), (0, 0.5), [((0, 0), (0, 0.1)), ((1, 0.5), (1, 0.4))]), (16, 8))
    rho = rng.random(g.shape)
    d = rng.uniform(-1, 1, g.shape + (2,))
    d /= np.maximum(1.0, np.linalg.norm(d, axis=-1))[..., None]
    st0 = MacroState(0.0, rho, np.zeros(2))
    dt = cfl_dt(2 * LWR.max_slope, g.h, 0.4, 1.0)
    s1 = step_macro(st0, g, d, dt, LWR)
    m0, m1 = st0.mass(g), s1.mass(g)
    assert abs(m0 - m1 - s1.outflux.sum()) <= 1e-12 * m0
    assert s1.rho.min() >= -1e-12 and s1.rho.max() <= 1 + 1e-12


def test_monotonicity_violation_raises():
    g = _line(20)
    rho = np.zeros(20)
    rho[:10] = 1.0
    rho[9] = 0.5
    d = np.ones((20, 1))
    with pytest.raises(MonotonicityError) as err:
        step_macro(MacroState(0.0, rho, np.zeros(2)), g, d, 10.0, LWR)
    assert err.value.state is not None


def _riemann(n, t_end=0.2):
    g = _line(n, ("right",))
    x = g.cell_axes()[0]
    rho = np.where(x < 0.5, 0.85, 0.0)
    d = np.ones((n, 1))
    s = MacroState(0.0, rho, np.zeros(2))
    dt = 0.4 * g.h
    while s.t < t_end - 1e-12:
        s = step_macro(s, g, d, min(dt, t_end - s.t), LWR)
    return x, s.rho


def test_riemann_rarefaction_self_convergence():
    xf, ref = _riemann(800)
    errs = []
    for n in (100, 200):
        x, r = _riemann(n)
        coarse_ref = ref.reshape(n, -1).mean(axis=1)
        errs.append(np.abs(r - coarse_ref).sum() / n)
    # first-order scheme: L1 error at least halves by the square-root rate
    assert errs[1] < errs[0] / math.sqrt(2)
    assert errs[0] <= math.sqrt(1 / 100)
    # exact fan of rho_t + (rho(1-rho))_x = 0 for the data (0.85 | 0) at t = 0.2
    xi = (xf - 0.5) / 0.2
    exact = np.clip(0.5 * (1 - xi), 0.0, 0.85)
    exact[xi >= 1] = 0.0
    # the wall at x = 0 starts its own fan, which stays in x < 0.2 by t = 0.2
    far = xf > 0.25
    assert np.abs(ref - exact)[far].sum() / 800 < 5e-3


def _setup(grid, rho0, **kw):
    K = make_kernel("bump" if grid.dim == 2 else "indicator", 0.05, grid.spacing)
    base = dict(law=LWR, stride=2, solver="fmm", dt_cap=5e-3, t_max=0.3)
    base.update(kw)
    return MacroSetup(grid, rho0, CostModel(c_max=1e3), 0.0, VisionSpec(base.pop("L", math.inf)), K, **base)


def test_empty_density_terminates_immediately():
    g = _line(30)
    run = run_macro(_setup(g, np.zeros(30)))
    assert run.terminated == "evacuated" and len(run.times) == 1 and run.outflux[-1].sum() == 0


def test_run_conservation_and_bounds():
    g = build_grid(Domain.rectangle((0, 1), (0, 0.5), [((0, 0), (0, 0.1)), ((1, 0.5), (1, 0.4))]), (20, 10))
    X = g.cell_coords()
    rho0 = np.where(X[..., 0] > 0.6, 0.9, 0.0)
    run = run_macro(_setup(g, rho0, L=0.5, t_max=0.5, snapshot_times=(0.0, 0.25), record_every=0))
    assert run.conservation_error <= 1e-12
    assert run.rho_min >= -1e-12 and run.rho_max <= 1 + 1e-12
    assert [round(s.t, 6) for s in run.snapshots][:1] == [0.0] and len(run.snapshots) == 2
    assert np.all(np.diff(run.mass) <= 1e-15)
    assert np.all(np.diff(run.outflux, axis=0) >= 0)


def test_symmetric_run_stays_symmetric():
    dom = Domain.rectangle((0, 1), (0, 0.5), [((0, 0), (0, 0.5)), ((1, 0), (1, 0.5))])
    g = build_grid(dom, (24, 12))
    X = g.cell_coords()
    rho0 = np.where(np.abs(X[..., 0] - 0.5) > 0.2, 0.7, 0.0)
    run = run_macro(_setup(g, rho0, t_max=0.2, stride=1, record_every=5))
    for s in run.snapshots:
        np.testing.assert_allclose(s.rho, s.rho[::-1], atol=1e-10)


def test_demand_exit_flux_option():
    g = _line(50)
    rho = np.full(50, 0.9)
    d = np.zeros((50, 1))
    up = step_macro(MacroState(0.0, rho, np.zeros(2)), g, d, 1e-3, LWR)
    dem = step_macro(MacroState(0.0, rho, np.zeros(2)), g, d, 1e-3, LWR, exit_flux="demand")
    assert math.isclose(up.outflux[0], 1e-3 * LWR.flux(0.9))
    assert math.isclose(dem.outflux[0], 1e-3 * LWR.flux(0.5))
