import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rqj.lindblad import expectation, purity
from rqj.operators import (
    KET_MINUS,
    KET_PLUS,
    MU,
    MU_Z,
    SIGMA,
    Frame,
    SystemParams,
    TruncationWarning,
    build_field_annihilation,
    build_joint_operators,
    classical_rates,
    coherent_state,
    compute_fixed_points,
    reference_state,
)


def test_field_annihilation_superdiagonal():
    a = build_field_annihilation(2)
    expected = np.zeros((3, 3))
    expected[0, 1], expected[1, 2] = 1.0, math.sqrt(2)
    assert np.array_equal(a, expected)


@pytest.mark.parametrize("n_max", [1, 5, 30])
def test_truncated_commutator_is_identity_below_cutoff(n_max):
    a = build_field_annihilation(n_max)
    comm = a @ a.conj().T - a.conj().T @ a
    assert np.allclose(comm[:n_max, :n_max], np.eye(n_max), atol=1e-13)


@pytest.mark.parametrize("bad", [0, -1, 2.5])
def test_field_annihilation_rejects_bad_cutoff(bad):
    with pytest.raises(ValueError):
        build_field_annihilation(bad)


@given(st.floats(0, 1), st.floats(0, 2 * math.pi))
def test_coherent_photon_number(r, phi):
    n_max = 60
    alpha = math.sqrt(r * n_max / 3) * complex(math.cos(phi), math.sin(phi))
    psi = coherent_state(alpha, n_max)
    a = build_field_annihilation(n_max)
    n = np.vdot(psi, a.conj().T @ a @ psi).real
    assert abs(n - abs(alpha) ** 2) < 1e-6


@given(
    st.complex_numbers(max_magnitude=2.0, allow_nan=False, allow_infinity=False),
    st.complex_numbers(max_magnitude=2.0, allow_nan=False, allow_infinity=False),
)
def test_coherent_overlap_matches_gaussian(alpha, beta):
    psi, phi = coherent_state(alpha, 40), coherent_state(beta, 40)
    assert abs(abs(np.vdot(psi, phi)) ** 2 - math.exp(-abs(alpha - beta) ** 2)) < 1e-6


def test_coherent_vacuum_and_norm():
    vac = coherent_state(0, 5)
    assert np.array_equal(vac, np.eye(6)[0])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TruncationWarning)
        psi = coherent_state(3 + 2j, 6)
    assert abs(np.linalg.norm(psi) - 1) < 1e-14


def test_coherent_state_warns_on_truncation():
    with pytest.warns(TruncationWarning):
        coherent_state(4.0, 10)


def test_params_validation():
    with pytest.raises(ValueError, match="eta"):
        SystemParams.standard(eta=1.5)
    with pytest.raises(ValueError, match="gamma_perp"):
        SystemParams.standard(gamma_perp=-1)
    with pytest.raises(ValueError, match="kappa"):
        SystemParams.standard(kappa=0)
    with pytest.raises(ValueError, match="n_max"):
        SystemParams.standard(n_max=0)
    assert SystemParams.standard().n_max == 15
    assert SystemParams.standard(frame="LAB").n_max == 60
    assert SystemParams.standard().with_(frame=Frame.LAB).n_max == 60


@pytest.mark.parametrize("frame", ["LAB", "DISPLACED"])
def test_joint_operator_algebra(frame):
    p = SystemParams.standard(frame=frame, n_max=6)
    ops = build_joint_operators(p)
    assert ops.a.shape == (14, 14)
    for h in (ops.x, ops.y, ops.sigma_z, ops.mu_z):
        assert np.array_equal(h, h.conj().T)
    for op, dag in ((ops.a, ops.adag), (ops.sigma, ops.sigmadag), (ops.mu, ops.mudag)):
        assert np.array_equal(op.conj().T, dag)
    assert np.allclose(ops.sigma @ ops.sigmadag + ops.sigmadag @ ops.sigma, ops.identity)
    assert np.allclose(ops.a - ops.b, p.frame_offset * ops.identity)
    with pytest.raises(ValueError):
        ops.a[0, 0] = 1.0


def test_dressed_states():
    assert np.allclose(MU @ KET_PLUS, KET_MINUS)
    assert np.allclose(MU_Z @ KET_PLUS, KET_PLUS)
    assert np.allclose(MU_Z @ KET_MINUS, -KET_MINUS)
    # the strong-drive Hamiltonian i(sigma - sigma^dag) is diagonal in |+>, |->
    h0 = 1j * (SIGMA - SIGMA.conj().T)
    assert np.vdot(KET_PLUS, h0 @ KET_MINUS) == 0
    assert np.allclose(h0, MU_Z)


def test_y_of_shifted_coherent_state(std_params):
    p = std_params.with_(frame="LAB")
    ops = build_joint_operators(p)
    psi = np.kron([1, 0], coherent_state(p.alpha_bar - 1.5j, 60))
    assert abs(np.vdot(psi, ops.y @ psi).real + 3.0) < 1e-4


def test_fixed_points_standard_values(std_params):
    fp = compute_fixed_points(std_params)
    assert fp.alpha_plus_approx == pytest.approx(4.4721 - 1.5j, abs=1e-4)
    assert fp.alpha_minus_approx == pytest.approx(4.4721 + 1.5j, abs=1e-4)
    assert (fp.y_plus, fp.y_minus) == (-3.0, 3.0)
    # independent arithmetic: s = -g/(4E) -+ i sqrt(1/4 - g^2/(16 E^2))
    assert fp.s_plus == pytest.approx(-0.16771 - 0.47104j, abs=1e-5)
    assert fp.s_minus == pytest.approx(-0.16771 + 0.47104j, abs=1e-5)
    assert fp.alpha_plus == pytest.approx(3.9690 - 1.4131j, abs=1e-4)
    assert fp.alpha_minus == pytest.approx(3.9690 + 1.4131j, abs=1e-4)


@given(st.floats(1, 500), st.floats(1, 100), st.floats(1.01, 20))
def test_fixed_points_are_stationary(g, kappa, drive):
    p = SystemParams(g=g, kappa=kappa, gamma_perp=0.0, E=drive * g / 2)
    fp = compute_fixed_points(p)
    for alpha, s in ((fp.alpha_plus, fp.s_plus), (fp.alpha_minus, fp.s_minus)):
        rates = classical_rates(p, alpha, s, fp.w)
        assert max(abs(r) for r in rates) < 1e-10 * max(1.0, g * abs(alpha))
        assert abs(s) ** 2 <= 0.25 + 1e-15
        assert fp.w**2 + 4 * abs(s) ** 2 == pytest.approx(1.0, abs=1e-12)


def test_fixed_points_decoupled_limit():
    p = SystemParams(g=1e-9, kappa=40.0, gamma_perp=0.0, E=100.0)
    fp = compute_fixed_points(p)
    assert fp.alpha_plus == pytest.approx(2.5, abs=1e-6)
    assert fp.alpha_minus == pytest.approx(2.5, abs=1e-6)


def test_fixed_points_need_strong_drive():
    with pytest.raises(ValueError, match="2E > g"):
        compute_fixed_points(SystemParams(g=120, kappa=40, gamma_perp=2.6, E=60))


@pytest.mark.parametrize("frame", ["LAB", "DISPLACED"])
def test_reference_states(std_params, frame):
    p = std_params.with_(frame=frame)
    ops = build_joint_operators(p)
    plus, minus = reference_state("PLUS", p), reference_state("MINUS", p)
    for rho in (plus, minus):
        assert abs(np.trace(rho) - 1) < 1e-10
        assert abs(purity(rho) - 1) < 1e-10
    assert expectation(plus, ops.y).real == pytest.approx(-3.0, abs=1e-6)
    assert expectation(minus, ops.y).real == pytest.approx(3.0, abs=1e-6)
    assert abs(np.trace(plus @ minus)) < 1e-12
