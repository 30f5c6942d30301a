"""Reduced two-branch P-function model on a line in phase space.

The atom is kept in the dressed basis and the field in a mixture of coherent
states ``|alpha_bar + i y/2>``, one density per dressed state:

    dP_+/dt = d/dy[(+g + kappa y) P_+] + c xi (y - <y>) P_+ + (gamma_perp/2)(P_- - P_+)

and the same for ``P_-`` with ``-g``, where ``c = sqrt(2 kappa eta)``.

One step applies, in order: the measurement multiply (with ``<y>`` of the
incoming state, so the step is Ito and conserves mass exactly), donor-cell
advection with zero flux through the grid ends (the drift points inward
there), the exact local exchange between branches, then clipping of
negative densities and renormalization.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .operators import SystemParams
from .records import TrajectoryRecord, photocurrent_from
from .sme import NoiseSource

log = logging.getLogger(__name__)

DEFAULT_NY = 512
DEFAULT_SPAN = 4.0  # grid half-width in units of g/kappa
CFL_LIMIT = 0.8
EMPTY_BRANCH = 1e-12


class CFLError(ValueError):
    pass


@dataclass
class PfeState:
    y_axis: np.ndarray
    p_plus_density: np.ndarray
    p_minus_density: np.ndarray
    clipped_mass: float = 0.0

    @property
    def dy(self) -> float:
        return float(self.y_axis[1] - self.y_axis[0])

    def total(self) -> float:
        return float(np.sum(self.p_plus_density + self.p_minus_density) * self.dy)

    def copy(self) -> "PfeState":
        return PfeState(
            self.y_axis.copy(), self.p_plus_density.copy(), self.p_minus_density.copy(), self.clipped_mass
        )

    def to_csv(self, path) -> None:
        data = np.column_stack([self.y_axis, self.p_plus_density, self.p_minus_density])
        np.savetxt(path, data, delimiter=",", header="y,p_plus,p_minus", comments="", fmt="%.8e")


@dataclass(frozen=True)
class PfeMoments:
    p_plus: float
    p_minus: float
    y_mean_plus: float
    y_mean_minus: float
    y_mean: float
    delta_y: float
    entropy_s: float


def y_grid(params: SystemParams, n_y: int = DEFAULT_NY, span: float = DEFAULT_SPAN) -> np.ndarray:
    """Uniform grid on [-span*g/kappa, span*g/kappa) with the end point dropped.

    With ``n_y`` divisible by ``2*span`` the fixed points ``-+g/kappa`` are grid
    nodes, so the advection holds a delta at a fixed point without smearing.
    """
    if n_y < 8:
        raise ValueError(f"n_y must be >= 8, got {n_y}")
    if span <= 1:
        raise ValueError(f"span must exceed 1 (the fixed points sit at +-g/kappa), got {span}")
    half = span * params.g / params.kappa
    return np.linspace(-half, half, int(n_y), endpoint=False)


def point_state(y_axis: np.ndarray, p_plus: float = 1.0, y_plus: float | None = None,
                y_minus: float | None = None) -> PfeState:
    """Branch weights concentrated on the grid nodes nearest ``y_plus``/``y_minus``."""
    if not 0.0 <= p_plus <= 1.0:
        raise ValueError("p_plus must lie in [0, 1]")
    dy = y_axis[1] - y_axis[0]
    Pp = np.zeros_like(y_axis)
    Pm = np.zeros_like(y_axis)
    y_plus = 0.0 if y_plus is None else y_plus
    y_minus = y_plus if y_minus is None else y_minus
    Pp[np.argmin(np.abs(y_axis - y_plus))] = p_plus / dy
    Pm[np.argmin(np.abs(y_axis - y_minus))] = (1.0 - p_plus) / dy
    return PfeState(y_axis.copy(), Pp, Pm)


def gaussian_state(y_axis: np.ndarray, centre: float, width: float, p_plus: float = 1.0) -> PfeState:
    dy = y_axis[1] - y_axis[0]
    shape = np.exp(-0.5 * ((y_axis - centre) / width) ** 2)
    shape /= shape.sum() * dy
    return PfeState(y_axis.copy(), p_plus * shape, (1.0 - p_plus) * shape)


def fixed_point_state(params: SystemParams, y_axis: np.ndarray, which: str = "PLUS") -> PfeState:
    """All probability in one branch at its fixed point (the default initial state)."""
    plus = str(which).upper() == "PLUS"
    y0 = -params.g / params.kappa if plus else params.g / params.kappa
    return point_state(y_axis, 1.0 if plus else 0.0, y0, y0)


def pfe_moments(state: PfeState) -> PfeMoments:
    mp, mm, yp, ym = _kernels.pfe_moments_raw(
        state.p_plus_density, state.p_minus_density, state.y_axis, state.dy
    )
    total = mp + mm
    mp, mm, yp, ym = mp / total, mm / total, yp / total, ym / total
    y_plus = yp / mp if mp > 0 else 0.0
    y_minus = ym / mm if mm > 0 else 0.0
    delta = 0.0 if (mp < EMPTY_BRANCH or mm < EMPTY_BRANCH) else y_plus - y_minus
    return PfeMoments(mp, mm, y_plus, y_minus, yp + ym, delta, mp - mp * mp)


def max_drift(params: SystemParams, y_axis: np.ndarray) -> float:
    ymax = float(np.max(np.abs(y_axis)))
    return params.g + params.kappa * ymax


def check_cfl(params: SystemParams, y_axis: np.ndarray, dt: float) -> None:
    dy = y_axis[1] - y_axis[0]
    if not dt > 0:
        raise CFLError(f"dt must be positive, got {dt}")
    if max_drift(params, y_axis) * dt > CFL_LIMIT * dy:
        raise CFLError(
            f"dt = {dt:g} us breaks the CFL bound: max drift {max_drift(params, y_axis):g} "
            f"* dt exceeds {CFL_LIMIT} * dy = {CFL_LIMIT * dy:g}"
        )


def default_pfe_dt(params: SystemParams, y_axis: np.ndarray) -> float:
    """Largest power-of-ten multiple of 1e-6 us (times 1, 2 or 5) inside 0.8 of the CFL bound."""
    limit = CFL_LIMIT * (y_axis[1] - y_axis[0]) / max_drift(params, y_axis)
    best = None
    for exp in range(-9, 0):
        for m in (1, 2, 5):
            cand = m * 10.0**exp
            if cand <= limit:
                best = cand
    if best is None:
        raise CFLError("grid too fine for any supported time step")
    return best


def _advect(P, y, dy, dt, drift, kappa):
    mid = 0.5 * (y[1:] + y[:-1])
    v = -(drift + kappa * mid)
    flux = np.where(v > 0, v * P[:-1], v * P[1:])
    div = np.zeros_like(P)
    div[:-1] += flux
    div[1:] -= flux
    return P - dt / dy * div


def pfe_step(state: PfeState, params: SystemParams, dt: float, dW: float) -> PfeState:
    """One step of the two-branch model (see the module docstring for the order)."""
    check_cfl(params, state.y_axis, dt)
    if not np.isfinite(dW):
        raise ValueError("dW must be finite")
    y, dy = state.y_axis, state.dy
    Pp, Pm = state.p_plus_density, state.p_minus_density
    c = np.sqrt(2 * params.kappa * params.eta)
    if c > 0:
        ybar = np.sum(y * (Pp + Pm)) / np.sum(Pp + Pm)
        f = 1.0 + c * dW * (y - ybar)
        Pp, Pm = Pp * f, Pm * f
    Pp = _advect(Pp, y, dy, dt, params.g, params.kappa)
    Pm = _advect(Pm, y, dy, dt, -params.g, params.kappa)
    s, h = 0.5 * (Pp + Pm), 0.5 * (Pp - Pm) * np.exp(-params.gamma_perp * dt)
    a, b = s + h, s - h
    clipped = float(-(np.sum(np.minimum(a, 0)) + np.sum(np.minimum(b, 0))) * dy)
    a, b = np.maximum(a, 0), np.maximum(b, 0)
    total = np.sum(a + b) * dy
    if not np.isfinite(total) or total <= 0:
        raise FloatingPointError("P-function lost all mass or became non-finite")
    return PfeState(y.copy(), a / total, b / total, state.clipped_mass + clipped)


def simulate_pfe(
    params: SystemParams,
    dt: float | None,
    t_final: float,
    noise: NoiseSource,
    *,
    initial: PfeState | None = None,
    n_y: int = DEFAULT_NY,
    span: float = DEFAULT_SPAN,
    stride: int = 1,
    n_snapshots: int = 0,
) -> TrajectoryRecord:
    """Run the two-branch model and record it in the trajectory schema.

    ``delta_y`` is stored alongside the usual columns.  With ``n_snapshots``
    the full densities are kept at that many evenly spaced times (plus t = 0)
    in ``record.meta["snapshots"]`` as ``(t, PfeState)`` pairs.
    """
    y = y_grid(params, n_y, span) if initial is None else initial.y_axis
    dt = default_pfe_dt(params, y) if dt is None else dt
    check_cfl(params, y, dt)
    n_steps = int(round(t_final / dt))
    if n_steps < 1 or abs(n_steps * dt - t_final) > 1e-9 * max(1.0, t_final):
        raise ValueError(f"t_final = {t_final} is not a whole number of steps dt = {dt}")
    if stride < 1 or n_steps % stride:
        raise ValueError(f"stride {stride} must divide the number of steps {n_steps}")
    snap_every = 0
    if n_snapshots:
        if n_steps % n_snapshots:
            raise ValueError("n_snapshots must divide the number of steps")
        snap_every = n_steps // n_snapshots
    state = (fixed_point_state(params, y) if initial is None else initial).copy()
    Pp = np.ascontiguousarray(state.p_plus_density, dtype=float)
    Pm = np.ascontiguousarray(state.p_minus_density, dtype=float)
    norm = (Pp.sum() + Pm.sum()) * state.dy
    Pp /= norm
    Pm /= norm
    n_rec = n_steps // stride
    y_rec, p_rec, d_rec, xi_rec = (np.zeros(n_rec) for _ in range(4))
    n_snap = n_snapshots + 1 if snap_every else 1
    snaps_p = np.zeros((n_snap, len(y)))
    snaps_m = np.zeros((n_snap, len(y)))
    snaps_p[0], snaps_m[0] = Pp, Pm
    dWs = noise.increments(n_steps, dt)
    c = float(np.sqrt(2 * params.kappa * params.eta))
    done, clipped = _kernels.pfe_trajectory(
        Pp, Pm, np.ascontiguousarray(y, dtype=float), state.dy, dt, params.g, params.kappa,
        params.gamma_perp, c, dWs, stride, y_rec, p_rec, d_rec, xi_rec, snap_every, snaps_p, snaps_m,
    )
    xi_rec /= stride * dt
    meta = {
        "seed": noise.seed,
        "stream_index": noise.spawn_key,
        "n_y": len(y),
        "span": span,
        "clipped_mass": float(clipped),
        "final_state": PfeState(y.copy(), Pp, Pm, float(clipped)),
    }
    if snap_every:
        meta["snapshots"] = [
            (k * snap_every * dt, PfeState(y.copy(), snaps_p[k], snaps_m[k])) for k in range(n_snap)
        ]
    rec = TrajectoryRecord(
        times=np.arange(n_rec) * stride * dt,
        photocurrent=photocurrent_from(params, y_rec, xi_rec),
        y_mean=y_rec,
        p_plus=p_rec,
        entropy_s=p_rec - p_rec**2,
        xi=xi_rec,
        params=params,
        dt_step=dt,
        stride=stride,
        source="pfe",
        delta_y=d_rec,
        meta=meta,
    )
    if clipped / (done * dt if done else 1.0) > 1e-4:
        log.warning("clipped negative mass %.3e over %.3g us", clipped, done * dt)
    if done < n_steps:
        rec = rec.truncated(done // stride)
        rec.error = f"non-finite density at step {done} (t = {done * dt:g} us)"
        log.error(rec.error)
    return rec


@dataclass(frozen=True)
class OdeCheck:
    normalized_rms_residual: float
    n_steps: int
    sign_test_fraction: float | None
    sign_test_count: int


def check_p_plus_ode(record: TrajectoryRecord, params: SystemParams) -> OdeCheck:
    """Compare finite differences of p_plus with its closed moment equation

        dp_+ = c dW (p_+ - p_+^2) Delta_y - gamma_perp (p_+ - 1/2) dt.

    The residual RMS is normalized by the RMS of dp_+.  Also reports the
    fraction of steps with Delta_y < 0 and dW > 0 where dp_+ <= gamma_perp dt / 2.
    """
    if record.delta_y is None:
        raise ValueError("record has no delta_y column; use a simulate_pfe record")
    if record.stride != 1:
        raise ValueError(f"record stride is {record.stride}; the check needs every step (stride 1)")
    if len(record) < 3:
        raise ValueError("record too short")
    dt = record.dt_step
    p = record.p_plus
    dW = record.xi[:-1] * dt
    dp = np.diff(p)
    c = np.sqrt(2 * params.kappa * params.eta)
    pk, dk = p[:-1], record.delta_y[:-1]
    model = c * dW * (pk - pk**2) * dk - params.gamma_perp * (pk - 0.5) * dt
    scale = np.sqrt(np.mean(dp**2))
    resid = np.sqrt(np.mean((dp - model) ** 2))
    norm = 0.0 if resid == 0 else resid / scale
    mask = (dk < 0) & (dW > 0)
    count = int(mask.sum())
    frac = float(np.mean(dp[mask] <= params.gamma_perp * dt / 2 + 1e-15)) if count else None
    return OdeCheck(float(norm), len(dp), frac, count)
