import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_density, random_pure
from rqj.lindblad import (
    QGridWarning,
    SteadyStateError,
    StepSizeError,
    Variant,
    coherent_q,
    default_q_axes,
    dressed_population,
    expectation,
    generator,
    integrate_me,
    liouvillian_apply,
    liouvillian_apply_full,
    liouvillian_apply_rwa,
    liouvillian_residual,
    q_function,
    steady_state,
    trace_distance,
)
from rqj.operators import (
    KET_E,
    KET_G,
    KET_MINUS,
    KET_PLUS,
    SystemParams,
    build_joint_operators,
    coherent_state,
    compute_fixed_points,
    product_state,
    reference_state,
)

VARIANTS = [Variant.FULL, Variant.RWA]


def _params(frame="LAB", **kw):
    base = dict(g=3.0, kappa=2.0, gamma_perp=0.9, E=4.0, eta=1.0, n_max=7, frame=frame)
    base.update(kw)
    return SystemParams(**base)


def test_emission_dissipator_alone():
    p = SystemParams(g=1e-300, kappa=1.0, gamma_perp=0.8, E=1e-300, n_max=3, frame="LAB")
    rho = product_state(KET_E, np.eye(4)[0])
    out = liouvillian_apply_full(rho, p)
    expected = 2 * 0.8 * (product_state(KET_G, np.eye(4)[0]) - rho)
    assert np.allclose(out, expected, atol=1e-12)


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("frame", ["LAB", "DISPLACED"])
def test_trace_free_and_hermitian(variant, frame):
    p = _params(frame)
    rng = np.random.default_rng(1)
    gen = generator(p, variant)
    for _ in range(5):
        rho = random_density(p.dim, rng)
        out = liouvillian_apply(rho, p, variant)
        assert abs(np.trace(out)) < 1e-12
        assert np.allclose(out, out.conj().T, atol=1e-12)
        assert np.allclose(gen.apply(rho), out, atol=1e-12)
        assert np.allclose(gen.superoperator() @ rho.ravel(), out.ravel(), atol=1e-12)


@given(st.integers(0, 2**32 - 1), st.sampled_from(VARIANTS))
def test_trace_free_property(seed, variant):
    p = SystemParams.standard(n_max=6)
    rho = random_density(p.dim, np.random.default_rng(seed))
    assert abs(np.trace(generator(p, variant).apply(rho))) < 1e-12


def test_field_amplitude_equation_of_motion():
    p = SystemParams(g=2.0, kappa=1.3, gamma_perp=0.4, E=1.1, n_max=25, frame="LAB")
    ops = build_joint_operators(p)
    atom = np.array([0.6, 0.8j])
    alpha = 0.7 - 0.4j
    rho = product_state(atom, coherent_state(alpha, p.n_max))
    out = liouvillian_apply_full(rho, p)
    s = expectation(rho, ops.sigma)
    assert abs(expectation(out, ops.a) - (p.E + p.g * s - p.kappa * alpha)) < 1e-8


def test_rwa_emission_channel_rate():
    p = SystemParams(g=1e-300, kappa=1.0, gamma_perp=1.2, E=1e-300, n_max=2, frame="LAB")
    rho = product_state(KET_PLUS, np.eye(3)[0])
    out = liouvillian_apply_rwa(rho, p)
    # |+> feeds |-> through the mu channel only
    assert dressed_population(out, p) == pytest.approx(-p.gamma_perp / 2)
    minus = np.kron(np.outer(KET_MINUS, KET_MINUS.conj()), np.eye(3))
    assert np.trace(minus @ out).real == pytest.approx(p.gamma_perp / 2)


def test_rwa_populations_relax_at_gamma_perp():
    p = SystemParams.standard(n_max=12)
    rho0 = reference_state("PLUS", p)
    traj = integrate_me(rho0, p, 5e-4, 1.0, Variant.RWA, stride=200)
    pp = np.array([dressed_population(r, p) for r in traj.states])
    assert np.allclose(pp - 0.5, 0.5 * np.exp(-p.gamma_perp * traj.times), atol=1e-6)


def test_driven_cavity_amplitude():
    p = SystemParams(g=1e-300, kappa=40.0, gamma_perp=0.0, E=80.0, n_max=20, frame="LAB")
    rho0 = product_state(KET_G, np.eye(21)[0])
    traj = integrate_me(rho0, p, 1e-3, 0.2, stride=10)
    a = build_joint_operators(p).a
    amp = np.array([expectation(r, a) for r in traj.states])
    assert np.allclose(amp, p.alpha_bar * (1 - np.exp(-p.kappa * traj.times)), atol=1e-4)


def test_rwa_fixed_point_is_stationary_without_emission():
    p = SystemParams.standard(gamma_perp=0.0)
    y = build_joint_operators(p).y
    traj = integrate_me(reference_state("PLUS", p), p, 1e-4, 1.0, Variant.RWA, stride=500)
    ys = [expectation(r, y).real for r in traj.states]
    assert max(abs(v + 3.0) for v in ys) < 1e-3


def test_trace_kept_over_many_steps():
    p = _params()
    traj = integrate_me(np.eye(p.dim) / p.dim, p, 1e-3, 100.0, stride=100_000)
    assert len(traj.states) == 2
    assert abs(np.trace(traj.states[-1]) - 1) < 1e-8


def test_step_size_rejected(std_params):
    with pytest.raises(ValueError, match="resolve"):
        integrate_me(reference_state("PLUS", std_params), std_params, 1e-3, 0.01)


def test_trace_drift_rejection(monkeypatch):
    import rqj.lindblad as lb

    monkeypatch.setattr(lb, "TRACE_DRIFT_LIMIT", 1e-30)
    p = _params()
    rho = np.eye(p.dim) / p.dim
    with pytest.raises(StepSizeError):
        lb.integrate_me(rho, p, 1e-3, 0.01)


def test_positivity_from_random_pure_states():
    rng = np.random.default_rng(7)
    p = SystemParams.standard(n_max=8)
    for variant in VARIANTS:
        rho0 = random_pure(p.dim, rng)
        traj = integrate_me(rho0, p, 5e-5, 0.05, variant, stride=100)
        for r in traj.states:
            assert np.linalg.eigvalsh(r).min() >= -1e-6
            assert np.allclose(r, r.conj().T, atol=1e-10)
            assert abs(np.trace(r) - 1) < 1e-10


def test_steady_state_decoupled():
    p = SystemParams(g=1e-300, kappa=2.0, gamma_perp=0.5, E=3.0, n_max=25, frame="LAB")
    rho = steady_state(p)
    ref = product_state(KET_G, coherent_state(1.5, 25))
    assert trace_distance(rho, ref) < 1e-6


def test_steady_state_methods_agree():
    p = _params()
    rho = steady_state(p, method="both", tol=1e-13, t_max=100)
    res, norm = liouvillian_residual(rho, p)
    assert res < 1e-8 * norm


def test_steady_state_degenerate_null_space():
    # without emission or drive coupling the atom never relaxes: two stationary states
    p = SystemParams(g=1e-300, kappa=1.0, gamma_perp=0.0, E=1.0, n_max=4, frame="LAB")
    with pytest.raises(SteadyStateError):
        steady_state(p)


def test_steady_state_unknown_method(std_params):
    with pytest.raises(ValueError):
        steady_state(std_params, method="magic")


@pytest.fixture(scope="module")
def standard_steady():
    p = SystemParams.standard()
    return p, steady_state(p)


def test_standard_steady_state(standard_steady):
    p, rho = standard_steady
    assert dressed_population(rho, p) == pytest.approx(0.5, abs=1e-3)
    res, norm = liouvillian_residual(rho, p)
    assert res < 1e-8 * norm
    assert np.linalg.eigvalsh(rho).min() > -1e-6


def test_standard_q_function(standard_steady):
    p, rho = standard_steady
    grid = q_function(rho, p)
    assert grid.values.min() >= 0
    assert grid.integral() == pytest.approx(1.0, abs=1e-3)
    fp = compute_fixed_points(p)
    peaks = grid.local_maxima()
    assert len(peaks) == 2
    assert abs(peaks[0][0] - fp.alpha_plus) < 0.2
    assert abs(peaks[1][0] - fp.alpha_minus) < 0.2


def test_q_grid_default_extent(std_params):
    re_axis, im_axis = default_q_axes(std_params)
    assert (re_axis[0], re_axis[-1], len(re_axis)) == (0.0, 9.0, 101)
    assert (im_axis[0], im_axis[-1], len(im_axis)) == (-4.5, 4.5, 101)


def test_q_function_boundary_warning(standard_steady):
    p, rho = standard_steady
    with pytest.warns(QGridWarning):
        q_function(rho, p, np.linspace(3, 5, 21), np.linspace(-1, 1, 21))


@pytest.mark.parametrize("frame, centre", [("LAB", 2.0), ("DISPLACED", 4.5)])
def test_q_of_coherent_state(frame, centre):
    # grid kept where |alpha - offset|^2 stays well inside the cutoff
    p = SystemParams.standard(frame=frame)
    beta = centre + 0.7 - 0.4j
    field = coherent_state(beta - p.frame_offset, p.n_max)
    rho = product_state(KET_G, field)
    re_axis, im_axis = np.linspace(centre - 2.5, centre + 2.5, 41), np.linspace(-2.5, 2.5, 41)
    grid = q_function(rho, p, re_axis, im_axis)
    assert np.allclose(grid.values, coherent_q(beta, re_axis, im_axis), atol=1e-6)


def test_q_csv_roundtrip(tmp_path, standard_steady):
    p, rho = standard_steady
    grid = q_function(rho, p, np.linspace(0, 9, 11), np.linspace(-4.5, 4.5, 11))
    path = tmp_path / "q.csv"
    grid.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "re,im,q"
    assert len(lines) == 1 + 121
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    assert np.allclose(np.sort(data[:, 2]), np.sort(grid.values.ravel()), rtol=1e-8)


def test_expectation_basics(std_params):
    ops = build_joint_operators(std_params)
    rho = reference_state("PLUS", std_params)
    assert expectation(rho, ops.identity) == pytest.approx(1.0)
    assert expectation(rho, ops.y).real == pytest.approx(-std_params.g / std_params.kappa, abs=1e-6)
    mixed = np.kron(np.eye(2) / 2, np.outer(np.eye(std_params.field_dim)[0], np.eye(std_params.field_dim)[0]))
    assert abs(expectation(mixed, ops.sigma_z)) < 1e-15
    with pytest.raises(ValueError):
        expectation(rho, np.eye(3))


def test_rwa_and_full_peaks_agree():
    # the secular form neglects a shift g^2/(4 E kappa) of Re(alpha); at (E/kappa)^2 = 400
    # the splitting exceeds g^2/kappa by a factor 6.7 and the shift is 0.11
    p = SystemParams.standard(E=40.0 * 20.0)
    rho_full = steady_state(p)
    rho_rwa = steady_state(p, Variant.RWA)
    peaks_full = q_function(rho_full, p).local_maxima()
    peaks_rwa = q_function(rho_rwa, p).local_maxima()
    assert len(peaks_full) == len(peaks_rwa) == 2
    for (za, _), (zb, _) in zip(peaks_full, peaks_rwa):
        assert abs(za - zb) < 0.3


def _reference_mixture(p):
    return 0.5 * (reference_state("PLUS", p) + reference_state("MINUS", p))


@pytest.mark.xfail(strict=True, reason="the steady state keeps field-atom correlations beyond "
                   "the product-state mixture; the measured distance is about 0.49")
def test_steady_state_is_close_to_reference_mixture(standard_steady):
    p, rho = standard_steady
    assert trace_distance(rho, _reference_mixture(p)) < 0.1


def test_steady_state_approaches_mixture_with_stronger_drive():
    dists = []
    for ratio_sq in (20.0, 80.0):
        p = SystemParams.standard(E=40.0 * math.sqrt(ratio_sq), gamma_perp=0.65)
        dists.append(trace_distance(steady_state(p), _reference_mixture(p)))
    assert dists[1] < dists[0]
