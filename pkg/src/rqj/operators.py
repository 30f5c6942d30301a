"""Hilbert space, operators, reference states and semiclassical fixed points.

The joint space is atom (x) field with the atomic factor first, so a joint
basis index is ``atom * (n_max + 1) + n``.  Atomic basis: index 0 is the
ground state |g>, index 1 the excited state |e>.

All rates are in MHz (1e6 s^-1) and all times in microseconds.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

DEFAULT_G = 120.0
DEFAULT_KAPPA = 40.0
DEFAULT_GAMMA_PERP = 2.6
DEFAULT_DRIVE_RATIO_SQ = 20.0

DEFAULT_NMAX = {"LAB": 60, "DISPLACED": 15}
TAIL_WARN = 1e-8


class TruncationWarning(UserWarning):
    """Raised when a coherent state leaks noticeably past the Fock cutoff."""


class Frame(str, enum.Enum):
    LAB = "LAB"
    DISPLACED = "DISPLACED"


class Dressed(str, enum.Enum):
    PLUS = "PLUS"
    MINUS = "MINUS"


@dataclass(frozen=True)
class SystemParams:
    """Physical rates of the driven, damped Jaynes-Cummings system.

    ``n_max`` defaults to 60 in the LAB frame and 15 in the DISPLACED frame,
    where the Fock basis only has to hold fluctuations about E/kappa.
    """

    g: float
    kappa: float
    gamma_perp: float
    E: float
    eta: float = 1.0
    n_max: int | None = None
    frame: Frame = Frame.DISPLACED

    def __post_init__(self):
        object.__setattr__(self, "frame", Frame(self.frame))
        if self.n_max is None:
            object.__setattr__(self, "n_max", DEFAULT_NMAX[self.frame.value])
        for name in ("g", "kappa", "gamma_perp", "E", "eta"):
            value = getattr(self, name)
            if not np.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value!r}")
            object.__setattr__(self, name, float(value))
        if self.g <= 0:
            raise ValueError(f"g must be > 0, got {self.g}")
        if self.kappa <= 0:
            raise ValueError(f"kappa must be > 0, got {self.kappa}")
        if self.E <= 0:
            raise ValueError(f"E must be > 0, got {self.E}")
        if self.gamma_perp < 0:
            raise ValueError(f"gamma_perp must be >= 0, got {self.gamma_perp}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if int(self.n_max) != self.n_max or self.n_max < 1:
            raise ValueError(f"n_max must be an integer >= 1, got {self.n_max}")
        object.__setattr__(self, "n_max", int(self.n_max))

    @classmethod
    def standard(cls, **overrides) -> "SystemParams":
        """(g, kappa, gamma_perp) = (120, 40, 2.6) MHz, (E/kappa)^2 = 20, eta = 1."""
        base = dict(
            g=DEFAULT_G,
            kappa=DEFAULT_KAPPA,
            gamma_perp=DEFAULT_GAMMA_PERP,
            E=DEFAULT_KAPPA * math.sqrt(DEFAULT_DRIVE_RATIO_SQ),
            eta=1.0,
        )
        base.update(overrides)
        return cls(**base)

    def with_(self, **changes) -> "SystemParams":
        if "frame" in changes and "n_max" not in changes:
            changes["n_max"] = None
        return replace(self, **changes)

    @property
    def alpha_bar(self) -> float:
        return self.E / self.kappa

    @property
    def omega(self) -> float:
        """Dressed-state splitting 2 g E / kappa."""
        return 2.0 * self.g * self.alpha_bar

    @property
    def field_dim(self) -> int:
        return self.n_max + 1

    @property
    def dim(self) -> int:
        return 2 * (self.n_max + 1)

    @property
    def frame_offset(self) -> float:
        """Amplitude subtracted from the field operator in this frame."""
        return self.alpha_bar if self.frame is Frame.DISPLACED else 0.0

    def require_fixed_point_regime(self) -> None:
        if not 2.0 * self.E > self.g:
            raise ValueError(
                f"fixed points need 2E > g (got 2E = {2 * self.E:g}, g = {self.g:g})"
            )

    def as_dict(self) -> dict:
        return {
            "g": self.g,
            "kappa": self.kappa,
            "gamma_perp": self.gamma_perp,
            "E": self.E,
            "eta": self.eta,
            "n_max": self.n_max,
            "frame": self.frame.value,
        }


def build_field_annihilation(n_max: int) -> np.ndarray:
    if int(n_max) != n_max or n_max < 1:
        raise ValueError(f"n_max must be an integer >= 1, got {n_max}")
    return np.diag(np.sqrt(np.arange(1, n_max + 1, dtype=float)), k=1).astype(complex)


# atomic operators in the (|g>, |e>) basis
SIGMA = np.array([[0, 1], [0, 0]], dtype=complex)  # |g><e|
SIGMA_Z = np.array([[-1, 0], [0, 1]], dtype=complex)  # [sigma^dag, sigma]
KET_G = np.array([1, 0], dtype=complex)
KET_E = np.array([0, 1], dtype=complex)
KET_PLUS = (KET_G - 1j * KET_E) / np.sqrt(2)
KET_MINUS = (KET_G + 1j * KET_E) / np.sqrt(2)
MU = np.outer(KET_MINUS, KET_PLUS.conj())  # |-><+|
MU_Z = MU.conj().T @ MU - MU @ MU.conj().T  # |+><+| - |-><-|


def dressed_ket(which: Dressed | str) -> np.ndarray:
    return KET_PLUS.copy() if Dressed(which) is Dressed.PLUS else KET_MINUS.copy()


@dataclass(frozen=True)
class JointOperators:
    """Operators on the joint atom (x) field space.

    ``a`` is the field operator as it enters the equations of motion; in the
    DISPLACED frame it is ``b + alpha_bar`` where ``b`` acts on the stored
    fluctuation basis.  In the LAB frame ``a`` and ``b`` coincide.
    """

    a: np.ndarray
    adag: np.ndarray
    b: np.ndarray
    sigma: np.ndarray
    sigmadag: np.ndarray
    sigma_z: np.ndarray
    x: np.ndarray
    y: np.ndarray
    mu: np.ndarray
    mudag: np.ndarray
    mu_z: np.ndarray
    identity: np.ndarray
    dim: int = field(default=0)


def _lift_atom(op: np.ndarray, n_field: int) -> np.ndarray:
    return np.kron(op, np.eye(n_field, dtype=complex))


def _lift_field(op: np.ndarray) -> np.ndarray:
    return np.kron(np.eye(2, dtype=complex), op)


@lru_cache(maxsize=32)
def _joint_operators_cached(params: SystemParams) -> JointOperators:
    nf = params.field_dim
    b = _lift_field(build_field_annihilation(params.n_max))
    ident = np.eye(params.dim, dtype=complex)
    a = b + params.frame_offset * ident
    adag = a.conj().T
    ops = JointOperators(
        a=a,
        adag=adag,
        b=b,
        sigma=_lift_atom(SIGMA, nf),
        sigmadag=_lift_atom(SIGMA.conj().T, nf),
        sigma_z=_lift_atom(SIGMA_Z, nf),
        x=a + adag,
        y=-1j * a + 1j * adag,
        mu=_lift_atom(MU, nf),
        mudag=_lift_atom(MU.conj().T, nf),
        mu_z=_lift_atom(MU_Z, nf),
        identity=ident,
        dim=params.dim,
    )
    for arr in vars(ops).values():
        if isinstance(arr, np.ndarray):
            arr.setflags(write=False)
    return ops


def build_joint_operators(params: SystemParams) -> JointOperators:
    """All model operators on the joint space (cached per parameter set)."""
    if not isinstance(params, SystemParams):
        raise TypeError("params must be a SystemParams instance")
    return _joint_operators_cached(params)


def coherent_amplitudes(alpha: complex, n_max: int) -> np.ndarray:
    """Fock amplitudes of the exact coherent state, truncated but not renormalized."""
    coeffs = np.empty(n_max + 1, dtype=complex)
    coeffs[0] = np.exp(-0.5 * abs(alpha) ** 2)
    for n in range(1, n_max + 1):
        coeffs[n] = coeffs[n - 1] * alpha / np.sqrt(n)
    return coeffs


def coherent_state(alpha: complex, n_max: int) -> np.ndarray:
    """Truncated coherent state |alpha>, renormalized to unit norm.

    Emits a TruncationWarning when the probability lost to the cutoff
    exceeds 1e-8.
    """
    if int(n_max) != n_max or n_max < 1:
        raise ValueError(f"n_max must be an integer >= 1, got {n_max}")
    coeffs = coherent_amplitudes(complex(alpha), int(n_max))
    kept = float(np.vdot(coeffs, coeffs).real)
    tail = 1.0 - kept
    if tail > TAIL_WARN:
        warnings.warn(
            f"coherent state |{alpha}> loses {tail:.2e} probability above n_max={n_max}",
            TruncationWarning,
            stacklevel=2,
        )
    return coeffs / np.sqrt(kept)


@dataclass(frozen=True)
class FixedPointPair:
    """Semiclassical fixed points (exact) together with their strong-drive limits."""

    alpha_plus: complex
    alpha_minus: complex
    s_plus: complex
    s_minus: complex
    w: float
    y_plus: float
    y_minus: float
    alpha_plus_approx: complex
    alpha_minus_approx: complex


def compute_fixed_points(params: SystemParams) -> FixedPointPair:
    params.require_fixed_point_regime()
    g, kappa, E = params.g, params.kappa, params.E
    re = -g / (4.0 * E)
    im = math.sqrt(0.25 - re * re)
    s_plus = complex(re, -im)
    s_minus = complex(re, im)
    abar = params.alpha_bar
    half = g / (2.0 * kappa)
    return FixedPointPair(
        alpha_plus=(E + g * s_plus) / kappa,
        alpha_minus=(E + g * s_minus) / kappa,
        s_plus=s_plus,
        s_minus=s_minus,
        w=0.0,
        y_plus=-g / kappa,
        y_minus=g / kappa,
        alpha_plus_approx=complex(abar, -half),
        alpha_minus_approx=complex(abar, half),
    )


def classical_rates(params: SystemParams, alpha: complex, s: complex, w: float):
    """Factorized equations of motion for (alpha, s, w) with gamma_perp included."""
    g, kappa, gp = params.g, params.kappa, params.gamma_perp
    dalpha = params.E + g * s - kappa * alpha
    ds = g * w * alpha - gp * s
    dw = -2.0 * g * (np.conj(alpha) * s + alpha * np.conj(s)).real - 2.0 * gp * (w + 1.0)
    return dalpha, ds, dw


def reference_amplitude(which: Dressed | str, params: SystemParams) -> complex:
    """Strong-drive fixed-point amplitude, expressed in the frame's field basis."""
    sign = -1.0 if Dressed(which) is Dressed.PLUS else 1.0
    return complex(params.alpha_bar - params.frame_offset, sign * params.g / (2 * params.kappa))


def reference_ket(which: Dressed | str, params: SystemParams) -> np.ndarray:
    field_ket = coherent_state(reference_amplitude(which, params), params.n_max)
    return np.kron(dressed_ket(which), field_ket)


def reference_state(which: Dressed | str, params: SystemParams) -> np.ndarray:
    """Pure fixed-point state |alpha_fix> (x) |+/-> as a density matrix."""
    psi = reference_ket(which, params)
    return np.outer(psi, psi.conj())


def product_state(atom: np.ndarray, field_ket: np.ndarray) -> np.ndarray:
    """Density matrix of an atom state (ket or 2x2 matrix) times a field ket."""
    atom = np.asarray(atom, dtype=complex)
    if atom.ndim == 1:
        atom = np.outer(atom, atom.conj())
    return np.kron(atom, np.outer(field_ket, field_ket.conj()))
