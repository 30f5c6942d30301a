"""Deterministic master-equation evolution, steady states and Q-functions.

Two Liouvillians are provided.  ``FULL`` is the driven, damped
Jaynes-Cummings master equation; ``RWA`` is its dressed-state secular form
in which spontaneous emission splits into the three Mollow channels.  The
RWA form is taken in the interaction picture of the strong-drive term
``g*alpha_bar*mu_z``; that term only rotates the |+>/|-> coherence, so
populations and all field observables are unchanged by dropping it.

``liouvillian_apply_full`` / ``liouvillian_apply_rwa`` evaluate the
equations literally with dense matrices.  Time stepping goes through
:class:`Generator`, which uses the identity
``D[b + c] rho = D[b] rho + (c/2)[b - b^dag, rho]`` (real ``c``) to move the
frame displacement into the Hamiltonian and then applies the ladder and
atomic parts blockwise.
"""

from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .operators import (
    MU,
    MU_Z,
    SIGMA,
    Frame,
    SystemParams,
    build_joint_operators,
    coherent_amplitudes,
)

log = logging.getLogger(__name__)

MAX_STEP_FRACTION = 0.1
TRACE_DRIFT_LIMIT = 1e-6


class Variant(str, enum.Enum):
    FULL = "FULL"
    RWA = "RWA"


class StepSizeError(RuntimeError):
    pass


class SteadyStateError(RuntimeError):
    pass


class QGridWarning(UserWarning):
    pass


def dissipator(A: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """A rho A^dag - {A^dag A, rho}/2."""
    AdA = A.conj().T @ A
    return A @ rho @ A.conj().T - 0.5 * (AdA @ rho + rho @ AdA)


def _check_dims(rho: np.ndarray, params: SystemParams) -> None:
    if rho.shape[-2:] != (params.dim, params.dim):
        raise ValueError(f"density matrix shape {rho.shape} does not match dim {params.dim}")


def liouvillian_apply_full(rho: np.ndarray, params: SystemParams) -> np.ndarray:
    _check_dims(rho, params)
    ops = build_joint_operators(params)
    K = params.g * (ops.adag @ ops.sigma - ops.sigmadag @ ops.a) - 1j * params.E * ops.y
    return (
        K @ rho
        - rho @ K
        + 2 * params.kappa * dissipator(ops.a, rho)
        + 2 * params.gamma_perp * dissipator(ops.sigma, rho)
    )


def liouvillian_apply_rwa(rho: np.ndarray, params: SystemParams) -> np.ndarray:
    _check_dims(rho, params)
    ops = build_joint_operators(params)
    x_int = ops.x - 2 * params.alpha_bar * ops.identity
    H = params.E * ops.y + 0.5 * params.g * ops.mu_z @ x_int
    out = -1j * (H @ rho - rho @ H) + 2 * params.kappa * dissipator(ops.a, rho)
    for A in (ops.mu, ops.mu_z, ops.mudag):
        out = out + 0.5 * params.gamma_perp * dissipator(A, rho)
    return out


def liouvillian_apply(rho: np.ndarray, params: SystemParams, variant=Variant.FULL) -> np.ndarray:
    if Variant(variant) is Variant.FULL:
        return liouvillian_apply_full(rho, params)
    return liouvillian_apply_rwa(rho, params)


def _atomic_superop(channels) -> np.ndarray:
    """4x4 matrix T with (sum_k r_k A_k rho A_k^dag)[i,l] = sum_jk T[il, jk] rho[j,k]."""
    T = np.zeros((2, 2, 2, 2), dtype=complex)
    for rate, A in channels:
        T += rate * np.einsum("ij,lk->iljk", A, A.conj())
    return T.reshape(4, 4)


@dataclass(frozen=True)
class Generator:
    """Structured Lindblad generator L[rho] = -i(G rho - rho G^dag) + jumps.

    ``field_rate`` multiplies ``f rho f^dag`` with ``f`` the frame's field
    annihilator; ``atomic`` is the 4x4 superoperator of the atomic jumps.
    Works on arrays with arbitrary leading batch dimensions.
    """

    params: SystemParams
    variant: Variant
    H: np.ndarray
    G: np.ndarray
    field_rate: float
    atomic: np.ndarray
    ladder: np.ndarray
    channels: tuple = ()

    def apply(self, rho: np.ndarray) -> np.ndarray:
        X = self.G @ rho
        out = -1j * (X - np.conj(np.swapaxes(X, -1, -2)))
        out += self.jumps(rho)
        return out

    def jumps(self, rho: np.ndarray) -> np.ndarray:
        nf = self.params.field_dim
        lead = rho.shape[:-2]
        r4 = rho.reshape(lead + (2, nf, 2, nf))
        blocks = np.swapaxes(r4, -3, -2).reshape(lead + (4, nf * nf))
        j4 = (self.atomic @ blocks).reshape(lead + (2, 2, nf, nf))
        j4 = np.swapaxes(j4, -3, -2)
        if self.field_rate:
            j4[..., :, :-1, :, :-1] += self.field_rate * self.ladder * r4[..., :, 1:, :, 1:]
        return j4.reshape(rho.shape)

    def jump_operators(self) -> list[np.ndarray]:
        """Joint-space jump operators with their rates folded in as sqrt(rate)."""
        ops = []
        if self.field_rate:
            ops.append(np.sqrt(self.field_rate) * build_joint_operators(self.params).b)
        nf = self.params.field_dim
        for rate, A in self.channels:
            if rate:
                ops.append(np.sqrt(rate) * np.kron(A, np.eye(nf)))
        return ops

    def superoperator(self) -> sp.csr_matrix:
        """Row-major matricized Liouvillian: vec(L[rho]) = S @ vec(rho)."""
        d = self.params.dim
        ident = sp.identity(d, dtype=complex, format="csr")
        G = sp.csr_matrix(self.G)
        S = -1j * (sp.kron(G, ident) - sp.kron(ident, G.conj()))
        f = sp.csr_matrix(build_joint_operators(self.params).b)
        if self.field_rate:
            S = S + self.field_rate * sp.kron(f, f.conj())
        nf = self.params.field_dim
        T = self.atomic.reshape(2, 2, 2, 2)
        If = sp.identity(nf, dtype=complex, format="csr")
        # jump term sum_{ijkl} T[i,l,j,k] |i><j| rho |k><l|  (atomic factor)
        for i in range(2):
            for l in range(2):
                for j in range(2):
                    for k in range(2):
                        c = T[i, l, j, k]
                        if c == 0:
                            continue
                        Eij = sp.csr_matrix(([1.0], ([i], [j])), shape=(2, 2))
                        Elk = sp.csr_matrix(([1.0], ([l], [k])), shape=(2, 2))
                        S = S + c * sp.kron(sp.kron(Eij, If), sp.kron(Elk, If))
        return sp.csr_matrix(S)


def _field_ops(params: SystemParams):
    ops = build_joint_operators(params)
    f = ops.b
    fd = f.conj().T
    return ops, f, fd, 1j * (fd - f), f + fd


@lru_cache(maxsize=64)
def generator(params: SystemParams, variant=Variant.FULL, exclude_measured: bool = False) -> Generator:
    """Cached generator.  With ``exclude_measured`` the eta-fraction of cavity
    damping is left out; the homodyne update supplies it instead."""
    variant = Variant(variant)
    ops, f, fd, y_f, x_f = _field_ops(params)
    g, kappa, gp = params.g, params.kappa, params.gamma_perp
    off = params.frame_offset
    drive = (params.E - kappa * off) * y_f
    if variant is Variant.FULL:
        H = (
            1j * g * (fd @ ops.sigma - ops.sigmadag @ f)
            + 1j * g * off * (ops.sigma - ops.sigmadag)
            + drive
        )
        channels = [(2 * gp, SIGMA)]
    else:
        shift = 2 * off - 2 * params.alpha_bar
        H = drive + 0.5 * g * ops.mu_z @ (x_f + shift * ops.identity)
        channels = [(0.5 * gp, MU), (0.5 * gp, MU_Z), (0.5 * gp, MU.conj().T)]
    field_rate = 2 * kappa * ((1.0 - params.eta) if exclude_measured else 1.0)
    decay = field_rate * (fd @ f)
    nf = params.field_dim
    for rate, A in channels:
        decay = decay + rate * np.kron(A.conj().T @ A, np.eye(nf))
    G = H - 0.5j * decay
    sq = np.sqrt(np.arange(1, nf, dtype=float))
    gen = Generator(
        params=params,
        variant=variant,
        H=H,
        G=G,
        field_rate=field_rate,
        atomic=_atomic_superop(channels),
        ladder=np.outer(sq, sq)[:, None, :],
        channels=tuple((float(rate), A) for rate, A in channels),
    )
    for arr in (gen.H, gen.G, gen.atomic, gen.ladder):
        arr.setflags(write=False)
    return gen


def max_rate(params: SystemParams, variant=Variant.FULL) -> float:
    """Fastest rate the time step has to resolve."""
    if Variant(variant) is Variant.FULL:
        return max(params.omega, 2 * params.kappa, params.g)
    return max(2 * params.kappa, params.g)


def check_time_step(params: SystemParams, dt: float, variant=Variant.FULL) -> None:
    limit = MAX_STEP_FRACTION / max_rate(params, variant)
    if not 0 < dt < limit:
        raise ValueError(
            f"dt = {dt:g} us does not resolve the fastest rate "
            f"{max_rate(params, variant):g} MHz (need 0 < dt < {limit:.3g} us)"
        )


def default_dt(params: SystemParams, variant=Variant.FULL) -> float:
    if Variant(variant) is Variant.RWA:
        return 1e-4
    if params.frame is Frame.LAB:
        return 1e-5
    return 5e-5


def n_steps_for(t_final: float, dt: float) -> int:
    n = int(round(t_final / dt))
    if n < 1 or abs(n * dt - t_final) > 1e-9 * max(1.0, t_final):
        raise ValueError(f"t_final = {t_final} is not a whole number of steps dt = {dt}")
    return n


def rk4_step(gen: Generator, rho: np.ndarray, dt: float) -> np.ndarray:
    k1 = gen.apply(rho)
    k2 = gen.apply(rho + 0.5 * dt * k1)
    k3 = gen.apply(rho + 0.5 * dt * k2)
    k4 = gen.apply(rho + dt * k3)
    return rho + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def hermitize(rho: np.ndarray) -> np.ndarray:
    return 0.5 * (rho + np.conj(np.swapaxes(rho, -1, -2)))


def trace(rho: np.ndarray):
    return np.trace(rho, axis1=-2, axis2=-1)


@dataclass
class MeTrajectory:
    times: np.ndarray
    states: np.ndarray
    renorm_drift: float


def integrate_me(
    rho0: np.ndarray,
    params: SystemParams,
    dt: float,
    t_final: float,
    variant=Variant.FULL,
    stride: int = 1,
) -> MeTrajectory:
    """Fixed-step RK4 integration; states stored every ``stride`` steps.

    Each step is re-Hermitized and renormalized.  A step whose trace drifts
    by more than 1e-6 is rejected with :class:`StepSizeError`.
    """
    _check_dims(rho0, params)
    check_time_step(params, dt, variant)
    n = n_steps_for(t_final, dt)
    gen = generator(params, Variant(variant))
    rho = np.array(rho0, dtype=complex)
    states = [rho.copy()]
    times = [0.0]
    drift_total = 0.0
    for k in range(1, n + 1):
        rho = hermitize(rk4_step(gen, rho, dt))
        tr = trace(rho).real
        drift = abs(tr - 1.0)
        if not np.isfinite(tr) or drift > TRACE_DRIFT_LIMIT:
            raise StepSizeError(f"trace drift {drift:.3e} at step {k} (t = {k * dt:g} us)")
        drift_total += drift
        rho /= tr
        if k % stride == 0:
            states.append(rho.copy())
            times.append(k * dt)
    log.debug("integrate_me: %d steps, accumulated renormalization %.3e", n, drift_total)
    return MeTrajectory(np.asarray(times), np.asarray(states), drift_total)


def _superop_norm(S: sp.spmatrix) -> float:
    return float(abs(S).sum(axis=1).max())


def _trace_row(d: int) -> sp.csr_matrix:
    idx = np.arange(d) * (d + 1)
    return sp.csr_matrix((np.ones(d, dtype=complex), (np.zeros(d, int), idx)), shape=(1, d * d))


def _null_space_dimension(S: sp.spmatrix, tol: float = 1e-9) -> int:
    sv = scipy.linalg.svdvals(S.toarray())
    return int(np.sum(sv < tol * sv[0]))


DENSE_CHECK_MAX_DIM = 32


def _steady_direct(params: SystemParams, variant: Variant) -> np.ndarray:
    gen = generator(params, variant)
    S = gen.superoperator()
    d = params.dim
    if d <= DENSE_CHECK_MAX_DIM:
        ndim = _null_space_dimension(S)
        if ndim != 1:
            raise SteadyStateError(f"stationary subspace has dimension {ndim}, expected 1")
    # replace the (0,0) population equation by the trace constraint
    A = sp.vstack([_trace_row(d), S[1:]]).tocsc()
    rhs = np.zeros(d * d, dtype=complex)
    rhs[0] = 1.0
    with warnings.catch_warnings():
        warnings.simplefilter("error", spla.MatrixRankWarning)
        try:
            vec = spla.spsolve(A, rhs)
        except (RuntimeError, spla.MatrixRankWarning) as exc:
            raise SteadyStateError(f"singular bordered Liouvillian: {exc}") from exc
    if not np.all(np.isfinite(vec)):
        raise SteadyStateError("non-finite steady-state solution (degenerate null space?)")
    rho = hermitize(vec.reshape(d, d))
    rho /= trace(rho).real
    resid = np.linalg.norm(S @ rho.ravel())
    if resid > 1e-8 * _superop_norm(S):
        raise SteadyStateError(f"steady-state residual {resid:.3e} too large (degenerate?)")
    return rho


def _steady_integrate(
    params: SystemParams,
    variant: Variant,
    rho0: np.ndarray | None,
    tol: float,
    t_max: float,
    dt: float | None,
) -> np.ndarray:
    gen = generator(params, variant)
    dt = dt if dt is not None else 0.5 * MAX_STEP_FRACTION / max_rate(params, variant)
    rho = np.eye(params.dim, dtype=complex) / params.dim if rho0 is None else np.array(rho0, complex)
    norm = _superop_norm(gen.superoperator())
    t = 0.0
    check_every = max(1, int(0.05 / dt))
    k = 0
    while t < t_max:
        rho = hermitize(rk4_step(gen, rho, dt))
        rho /= trace(rho).real
        t += dt
        k += 1
        if k % check_every == 0:
            resid = np.linalg.norm(gen.apply(rho))
            if resid < tol * norm:
                return rho
    raise SteadyStateError(f"time integration did not converge within t = {t_max} us")


def steady_state(
    params: SystemParams,
    variant=Variant.FULL,
    method: str = "direct",
    *,
    rho0: np.ndarray | None = None,
    tol: float = 1e-12,
    t_max: float = 200.0,
    dt: float | None = None,
) -> np.ndarray:
    """Stationary state of the master equation.

    ``method="direct"`` solves the matricized Liouvillian with the trace
    condition replacing one row; ``"integrate"`` evolves until the residual
    falls below ``tol * ||L||``; ``"both"`` runs the two and requires them to
    agree within 1e-6 in trace distance.
    """
    variant = Variant(variant)
    if method == "direct":
        return _steady_direct(params, variant)
    if method == "integrate":
        return _steady_integrate(params, variant, rho0, tol, t_max, dt)
    if method == "both":
        a = _steady_direct(params, variant)
        b = _steady_integrate(params, variant, rho0, tol, t_max, dt)
        dist = trace_distance(a, b)
        if dist > 1e-6:
            raise SteadyStateError(f"direct and integrated steady states differ by {dist:.2e}")
        return a
    raise ValueError(f"unknown steady-state method {method!r}")


def liouvillian_residual(rho: np.ndarray, params: SystemParams, variant=Variant.FULL) -> tuple[float, float]:
    """(||L[rho]||, ||L||) with the induced infinity norm of the superoperator."""
    gen = generator(params, Variant(variant))
    return float(np.linalg.norm(gen.apply(rho))), _superop_norm(gen.superoperator())


def expectation(rho: np.ndarray, op: np.ndarray) -> complex:
    if rho.shape[-2:] != op.shape:
        raise ValueError(f"operator shape {op.shape} does not match state {rho.shape}")
    return complex(np.einsum("ij,ji->", rho, op))


def field_reduced(rho: np.ndarray, params: SystemParams) -> np.ndarray:
    nf = params.field_dim
    r4 = rho.reshape(rho.shape[:-2] + (2, nf, 2, nf))
    return r4[..., 0, :, 0, :] + r4[..., 1, :, 1, :]


def atom_reduced(rho: np.ndarray, params: SystemParams) -> np.ndarray:
    nf = params.field_dim
    r4 = rho.reshape(rho.shape[:-2] + (2, nf, 2, nf))
    return np.trace(r4, axis1=-3, axis2=-1)


def dressed_population(rho: np.ndarray, params: SystemParams):
    """p_+ = <+| Tr_field rho |+> for |+> = (|g> - i|e>)/sqrt(2)."""
    ra = atom_reduced(rho, params)
    return 0.5 * (ra[..., 0, 0] + ra[..., 1, 1]).real - ra[..., 1, 0].imag


def trace_distance(rho: np.ndarray, sigma: np.ndarray) -> float:
    ev = np.linalg.eigvalsh(hermitize(rho - sigma))
    return 0.5 * float(np.sum(np.abs(ev)))


def purity(rho: np.ndarray) -> float:
    return float(np.einsum("ij,ji->", rho, rho).real)


@dataclass
class QGrid:
    re_axis: np.ndarray
    im_axis: np.ndarray
    values: np.ndarray  # indexed [im, re]

    @property
    def cell_area(self) -> float:
        dre = self.re_axis[1] - self.re_axis[0]
        dim_ = self.im_axis[1] - self.im_axis[0]
        return float(dre * dim_)

    def integral(self) -> float:
        return float(self.values.sum() * self.cell_area)

    def to_csv(self, path) -> None:
        re, im = np.meshgrid(self.re_axis, self.im_axis)
        table = np.column_stack([re.ravel(), im.ravel(), self.values.ravel()])
        np.savetxt(path, table, delimiter=",", header="re,im,q", comments="", fmt="%.8e")

    def local_maxima(self, rel_floor: float = 1e-6) -> list[tuple[complex, float]]:
        """Interior cells strictly above all 8 neighbours and above rel_floor * max."""
        q = self.values
        core = q[1:-1, 1:-1]
        is_max = core > rel_floor * q.max()
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                if di == 0 and dj == 0:
                    continue
                nb = q[1 + di : q.shape[0] - 1 + di, 1 + dj : q.shape[1] - 1 + dj]
                is_max &= core > nb
        out = []
        for i, j in zip(*np.nonzero(is_max)):
            out.append((complex(self.re_axis[j + 1], self.im_axis[i + 1]), float(core[i, j])))
        return sorted(out, key=lambda p: p[0].imag)


def default_q_axes(params: SystemParams, n: int = 101) -> tuple[np.ndarray, np.ndarray]:
    """101x101 grid; Re in [0, 9] and Im in [-4.5, 4.5] at the default parameters."""
    half = max(4.5, params.g / (2 * params.kappa) + 3.0)
    centre = round(2 * params.alpha_bar) / 2
    return (
        np.linspace(centre - half, centre + half, n),
        np.linspace(-half, half, n),
    )


def q_function(
    rho: np.ndarray,
    params: SystemParams,
    re_axis: np.ndarray | None = None,
    im_axis: np.ndarray | None = None,
    warn_tol: float = 1e-6,
) -> QGrid:
    """Husimi Q(alpha) = <alpha| Tr_atom rho |alpha> / pi on a lab-frame grid."""
    _check_dims(rho, params)
    if re_axis is None or im_axis is None:
        dre, dim_ = default_q_axes(params)
        re_axis = dre if re_axis is None else re_axis
        im_axis = dim_ if im_axis is None else im_axis
    re_axis = np.asarray(re_axis, float)
    im_axis = np.asarray(im_axis, float)
    rf = field_reduced(rho, params)
    beta = (re_axis[None, :] + 1j * im_axis[:, None]) - params.frame_offset
    flat = beta.ravel()
    C = np.empty((params.field_dim, flat.size), dtype=complex)
    C[0] = np.exp(-0.5 * np.abs(flat) ** 2)
    for n in range(1, params.field_dim):
        C[n] = C[n - 1] * flat / np.sqrt(n)
    q = np.einsum("nk,nm,mk->k", C.conj(), rf, C).real / np.pi
    values = np.clip(q.reshape(beta.shape), 0.0, None)
    edge = max(values[0].max(), values[-1].max(), values[:, 0].max(), values[:, -1].max())
    if edge > warn_tol:
        warnings.warn(f"Q-function reaches {edge:.2e} on the grid boundary", QGridWarning, stacklevel=2)
    return QGrid(re_axis, im_axis, values)


def coherent_q(beta: complex, re_axis: np.ndarray, im_axis: np.ndarray) -> np.ndarray:
    """Analytic Q of a coherent state |beta>: exp(-|alpha - beta|^2) / pi."""
    alpha = re_axis[None, :] + 1j * np.asarray(im_axis)[:, None]
    return np.exp(-np.abs(alpha - beta) ** 2) / np.pi


__all__ = [
    "Variant",
    "Generator",
    "QGrid",
    "MeTrajectory",
    "StepSizeError",
    "SteadyStateError",
    "QGridWarning",
    "dissipator",
    "liouvillian_apply",
    "liouvillian_apply_full",
    "liouvillian_apply_rwa",
    "generator",
    "integrate_me",
    "steady_state",
    "q_function",
    "expectation",
    "trace_distance",
    "coherent_amplitudes",
]
