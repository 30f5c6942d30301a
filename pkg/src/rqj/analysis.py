"""Photocurrent filtering, switch detection and the entropy statistics."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import signal, stats

from .operators import SystemParams, compute_fixed_points
from .records import Direction, SwitchEvent, TrajectoryRecord, photocurrent_from
from .sme import NoiseSource, resolve_workers

log = logging.getLogger(__name__)

DEFAULT_FC = 10.0
DETECT_FC = 20.0  # chosen by calibration against the semiclassical jump process
S_FLOOR = 1e-12
MIN_STATIONARY_SAMPLES = 10_000
SCALING_CSV_HEADER = "g_mhz,kappa_mhz,gamma_perp_mhz,eta,inv_mean_inv_s,std_err"


class UndefinedStatistic(ValueError):
    """The requested statistic does not exist for this input (e.g. S == 0 everywhere)."""


def default_burn_in(params: SystemParams) -> float:
    return max(1.0, 5.0 / params.kappa)


def lowpass(series, dt: float, f_c: float = DEFAULT_FC) -> np.ndarray:
    """Zero-initialized single-pole recursive low-pass with unit DC gain.

    y[k] = y[k-1] + a (x[k] - y[k-1]) with a = 1 - exp(-2 pi f_c dt).
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    nyquist = 0.5 / dt
    if not 0 < f_c < nyquist:
        raise ValueError(f"cutoff {f_c:g} MHz must lie in (0, {nyquist:g}) MHz (Nyquist)")
    a = -math.expm1(-2 * math.pi * f_c * dt)
    return signal.lfilter([a], [1.0, a - 1.0], np.asarray(series, dtype=float))


def lowpass_noise_variance(f_c: float, dt: float, var: float = 1.0) -> float:
    """Stationary output variance of :func:`lowpass` for white input of variance ``var``."""
    a = -math.expm1(-2 * math.pi * f_c * dt)
    return a * var / (2.0 - a)


def _crossing_time(t, x, k, level):
    """Linear interpolation of the time x crosses ``level`` between samples k-1 and k."""
    if k == 0 or x[k] == x[k - 1]:
        return float(t[k])
    frac = (level - x[k - 1]) / (x[k] - x[k - 1])
    return float(t[k - 1] + frac * (t[k] - t[k - 1]))


def schmitt_trigger(t, x, low: float, high: float) -> list[tuple[int, float, Direction]]:
    """Hysteresis crossings of ``x``: (sample index, event time, direction).

    An UP event fires when ``x`` reaches ``high`` after having been at or below
    ``low``; DOWN is symmetric.  The event time is placed at the last crossing
    of the midpoint level before the trigger, which is where the transition
    actually happens rather than where it is confirmed.
    """
    if not low < high:
        raise ValueError("need low < high")
    mid = 0.5 * (low + high)
    x = np.asarray(x)
    above = x >= high
    below = x <= low
    state = 1 if len(x) and above[0] else (-1 if len(x) and below[0] else 0)
    events = []
    last_mid_up = last_mid_down = None
    for k in range(1, len(x)):
        if x[k - 1] < mid <= x[k]:
            last_mid_up = k
        elif x[k - 1] > mid >= x[k]:
            last_mid_down = k
        if above[k] and state != 1:
            if state == -1:
                j = last_mid_up if last_mid_up is not None else k
                events.append((k, _crossing_time(t, x, j, mid), Direction.UP))
            state = 1
        elif below[k] and state != -1:
            if state == 1:
                j = last_mid_down if last_mid_down is not None else k
                events.append((k, _crossing_time(t, x, j, mid), Direction.DOWN))
            state = -1
    return events


def detect_switches(
    record: TrajectoryRecord,
    params: SystemParams | None = None,
    f_c: float = DETECT_FC,
    thresholds: tuple[float, float] | None = None,
) -> list[SwitchEvent]:
    """Switches between the two photocurrent levels.

    The photocurrent is low-passed at ``f_c`` and passed through a Schmitt
    trigger with thresholds ``(-g, +g)`` MHz by default.  Directions refer to
    the photocurrent: UP means the current rose from the -2g level to +2g,
    which is the atom leaving |+> (p_plus going DOWN).
    """
    if len(record) == 0:
        raise ValueError("empty record")
    params = record.params if params is None else params
    low, high = (-params.g, params.g) if thresholds is None else thresholds
    filt = lowpass(record.photocurrent, record.dt, f_c)
    t = record.times
    win = max(1, int(round(1.0 / (f_c * record.dt))))
    events = []
    for k, te, direction in schmitt_trigger(t, filt, low, high):
        i = int(np.searchsorted(t, te))
        before = filt[max(0, i - 2 * win): max(1, i - win)]
        after = filt[min(len(t) - 1, k + win): k + 2 * win]
        events.append(
            SwitchEvent(
                t=te,
                direction=direction,
                filtered_level_before=float(np.mean(before)) if len(before) else float("nan"),
                filtered_level_after=float(np.mean(after)) if len(after) else float("nan"),
            )
        )
    record.switch_events = events
    return events


def switching_rate(events: list[SwitchEvent], duration: float, t_start: float = 0.0) -> float:
    n = sum(1 for e in events if e.t >= t_start)
    return n / (duration - t_start)


def photocurrent_modes(record: TrajectoryRecord, f_c: float = DEFAULT_FC, burn_in: float | None = None,
                       bins: int = 120) -> tuple[float, float]:
    """Histogram modes of the filtered photocurrent on the negative and positive side."""
    burn_in = default_burn_in(record.params) if burn_in is None else burn_in
    filt = lowpass(record.photocurrent, record.dt, f_c)[record.times >= burn_in]
    hist, edges = np.histogram(filt, bins=bins)
    centres = 0.5 * (edges[1:] + edges[:-1])
    neg, pos = centres < 0, centres > 0
    if not neg.any() or not pos.any():
        raise UndefinedStatistic("filtered photocurrent does not straddle zero")
    return float(centres[neg][np.argmax(hist[neg])]), float(centres[pos][np.argmax(hist[pos])])


# ---------------------------------------------------------------------------
# semiclassical jump process


@dataclass
class OracleRun:
    times: np.ndarray
    labels: np.ndarray  # +1 for |+>, -1 for |->
    alpha: np.ndarray
    flip_times: np.ndarray
    params: SystemParams
    dt: float

    @property
    def y(self) -> np.ndarray:
        return 2.0 * self.alpha.imag

    def dwell_times(self) -> np.ndarray:
        return np.diff(self.flip_times)


def semiclassical_jump_oracle(
    params: SystemParams,
    t_final: float,
    noise: NoiseSource,
    dt: float = 1e-3,
    initial: str = "PLUS",
) -> OracleRun:
    """Atomic label flipping as a Poisson process at rate gamma_perp/2 while
    the field amplitude relaxes at rate kappa toward the fixed point matching
    the current label.  The field is sampled exactly on a grid of spacing dt.
    """
    fp = compute_fixed_points(params)
    target = {1: fp.alpha_plus, -1: fp.alpha_minus}
    rng = noise.generator()
    rate = 0.5 * params.gamma_perp
    flips = []
    if rate > 0:
        t = 0.0
        while True:
            t += rng.exponential(1.0 / rate)
            if t >= t_final:
                break
            flips.append(t)
    flips = np.asarray(flips)
    n = int(round(t_final / dt))
    times = np.arange(n) * dt
    label0 = 1 if str(initial).upper() == "PLUS" else -1
    # field amplitude just after each flip (index 0 is t = 0)
    starts = np.concatenate([[0.0], flips])
    labs = label0 * (-1) ** np.arange(len(starts))
    a_start = np.empty(len(starts), dtype=complex)
    a_start[0] = target[label0]
    for i in range(1, len(starts)):
        prev = target[int(labs[i - 1])]
        a_start[i] = prev + (a_start[i - 1] - prev) * math.exp(-params.kappa * (starts[i] - starts[i - 1]))
    seg = np.searchsorted(starts, times, side="right") - 1
    labels = labs[seg]
    tgt = np.where(labels > 0, target[1], target[-1])
    alpha = tgt + (a_start[seg] - tgt) * np.exp(-params.kappa * (times - starts[seg]))
    return OracleRun(times, labels, alpha, np.concatenate([[0.0], flips]), params, dt)


def oracle_photocurrent(run: OracleRun, noise: NoiseSource) -> TrajectoryRecord:
    """Synthetic homodyne record: 2 kappa eta y(t) + sqrt(2 kappa eta) xi."""
    p = run.params
    xi = noise.increments(len(run.times), run.dt) / run.dt
    y = run.y
    p_plus = (run.labels > 0).astype(float)
    return TrajectoryRecord(
        times=run.times,
        photocurrent=photocurrent_from(p, y, xi),
        y_mean=y,
        p_plus=p_plus,
        entropy_s=np.zeros_like(y),
        xi=xi,
        params=p,
        dt_step=run.dt,
        source="oracle",
    )


# ---------------------------------------------------------------------------
# retroactive-jump statistics


@dataclass(frozen=True)
class BiasEstimate:
    mean: float
    std_err: float
    n_events: int

    @property
    def z_score(self) -> float:
        return self.mean / self.std_err if self.std_err > 0 else float("nan")


def p_plus_crossing(record: TrajectoryRecord, t_event: float, search: float = 0.5) -> float | None:
    """Last time before ``t_event`` (within ``search`` us) where p_plus crossed 1/2."""
    t, p = record.times, record.p_plus
    k1 = int(np.searchsorted(t, t_event))
    k0 = max(1, int(np.searchsorted(t, t_event - search)))
    side = p[k0 - 1: k1 + 1] >= 0.5
    idx = np.nonzero(side[1:] != side[:-1])[0]
    if len(idx) == 0:
        return None
    k = k0 + idx[-1]
    return _crossing_time(t, p, k, 0.5)


def retroactive_bias(
    record: TrajectoryRecord,
    events: list[SwitchEvent],
    direction: Direction,
    window: float = 0.1,
    f_c: float = DEFAULT_FC,
    anchor: str = "p_plus",
) -> BiasEstimate:
    """Mean low-passed noise xi over the ``window`` preceding each switch.

    ``direction`` selects photocurrent events (UP = atom leaving |+>).  With
    ``anchor="p_plus"`` the window ends where p_plus crosses 1/2, otherwise at
    the detected event time.
    """
    filt = lowpass(record.xi, record.dt, f_c)
    t = record.times
    vals = []
    for e in events:
        if e.direction is not direction:
            continue
        t_end = p_plus_crossing(record, e.t) if anchor == "p_plus" else e.t
        if t_end is None or t_end - window < t[0]:
            continue
        sel = (t >= t_end - window) & (t < t_end)
        if sel.any():
            vals.append(float(np.mean(filt[sel])))
    if len(vals) < 2:
        raise UndefinedStatistic(f"only {len(vals)} usable {direction.value} events")
    vals = np.asarray(vals)
    return BiasEstimate(float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(len(vals))), len(vals))


# ---------------------------------------------------------------------------
# entropy statistics


@dataclass(frozen=True)
class EntropyEstimate:
    value: float
    std_err: float
    n_samples: int
    defined: bool = True


def _post_burn_in(rec: TrajectoryRecord, burn_in: float | None) -> slice:
    b = default_burn_in(rec.params) if burn_in is None else burn_in
    return slice(int(np.searchsorted(rec.times, b)), None)


def entropy_statistic(
    records: list[TrajectoryRecord],
    burn_in: float | None = None,
    n_blocks: int = 20,
    n_boot: int = 400,
    seed: int = 0,
) -> EntropyEstimate:
    """1/E[1/S] over post-burn-in samples with a block-bootstrap error.

    Each record is cut into ``n_blocks`` contiguous blocks; bootstrap
    replicates resample blocks.  Block summaries are put in canonical order
    first, so the result does not depend on record order.  Raises
    UndefinedStatistic when S vanishes everywhere.
    """
    if not records:
        raise ValueError("no records")
    sums, counts, all_zero = [], [], True
    for rec in records:
        S = np.asarray(rec.entropy_s)[_post_burn_in(rec, burn_in)]
        if len(S) == 0:
            continue
        if np.any(S > S_FLOOR):
            all_zero = False
        inv = 1.0 / np.maximum(S, S_FLOOR)
        for block in np.array_split(inv, min(n_blocks, len(inv))):
            sums.append(math.fsum(block))
            counts.append(len(block))
    if not sums:
        raise ValueError("no samples after burn-in")
    if all_zero:
        raise UndefinedStatistic("S is zero in every sample (pure-state run); 1/E[1/S] is undefined")
    order = np.lexsort((np.asarray(counts), np.asarray(sums)))
    sums = np.asarray(sums)[order]
    counts = np.asarray(counts)[order]
    n = int(counts.sum())
    value = n / math.fsum(sums)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(sums), size=(n_boot, len(sums)))
    boot = counts[idx].sum(axis=1) / sums[idx].sum(axis=1)
    return EntropyEstimate(float(value), float(boot.std(ddof=1)) if len(sums) > 1 else 0.0, n)


@dataclass(frozen=True)
class StationarityResult:
    lhs: float  # gamma_perp E[1/(2S)]
    rhs: float  # kappa eta E[Delta_y^2]
    ratio: float
    n_samples: int
    degenerate: bool = False


def stationarity_check(
    records: list[TrajectoryRecord], params: SystemParams, burn_in: float | None = None
) -> StationarityResult:
    """Both sides of gamma_perp E[1/(2S)] = kappa eta E[Delta_y^2] from time averages."""
    inv, d2 = [], []
    for rec in records:
        if rec.delta_y is None:
            raise ValueError("records need a delta_y column (use simulate_pfe)")
        sl = _post_burn_in(rec, burn_in)
        inv.append(1.0 / (2.0 * np.maximum(rec.entropy_s[sl], S_FLOOR)))
        d2.append(rec.delta_y[sl] ** 2)
    inv = np.concatenate(inv)
    d2 = np.concatenate(d2)
    if len(inv) < MIN_STATIONARY_SAMPLES:
        raise ValueError(f"need >= {MIN_STATIONARY_SAMPLES} post-burn-in samples, got {len(inv)}")
    lhs = params.gamma_perp * float(np.mean(inv))
    rhs = params.kappa * params.eta * float(np.mean(d2))
    degenerate = params.gamma_perp == 0 or rhs == 0
    ratio = float("nan") if degenerate else lhs / rhs
    if degenerate:
        log.warning("stationarity relation is degenerate (gamma_perp = 0 or Delta_y = 0)")
    return StationarityResult(lhs, rhs, ratio, len(inv), degenerate)


def predicted_entropy_scale(params: SystemParams) -> float:
    """Order-of-magnitude estimate gamma_perp / (2 g^(2/3) (kappa eta)^(1/3))."""
    return params.gamma_perp / (2 * params.g ** (2 / 3) * (params.kappa * params.eta) ** (1 / 3))


def in_scaling_regime(params: SystemParams, margin: float = 5.0) -> bool:
    """g sqrt(eta) >= kappa and gamma_perp small (by ``margin``) against g^(2/3)(kappa eta)^(1/3)."""
    if params.eta <= 0:
        return False
    scale = params.g ** (2 / 3) * (params.kappa * params.eta) ** (1 / 3)
    return params.g * math.sqrt(params.eta) >= params.kappa and margin * params.gamma_perp <= scale


# ---------------------------------------------------------------------------
# scaling study


@dataclass(frozen=True)
class ScalingPoint:
    g: float
    kappa: float
    gamma_perp: float
    eta: float
    inv_mean_inv_s: float
    std_err: float
    series: str = ""
    in_regime: bool = True


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    ci95: tuple[float, float]
    n_points: int


def fit_loglog(x, y) -> SlopeFit:
    """Least-squares slope of log y against log x with a 95% t-interval."""
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    if len(lx) < 2:
        raise ValueError("need at least two points")
    res = stats.linregress(lx, ly)
    if len(lx) > 2:
        half = stats.t.ppf(0.975, len(lx) - 2) * res.stderr
    else:
        half = float("inf")
    return SlopeFit(float(res.slope), float(res.intercept), (res.slope - half, res.slope + half), len(lx))


@dataclass(frozen=True)
class ScalingSpec:
    """What to sweep.  Each g value uses kappa = g / g_over_kappa and
    E = kappa * drive_ratio; the eta series runs at ``eta_g``, ``eta_kappa``."""

    g_values: tuple[float, ...] = (60.0, 120.0, 240.0, 480.0)
    g_over_kappa: float = 3.0
    gamma_perps: tuple[float, ...] = (1.3, 0.65)
    etas: tuple[float, ...] = (0.125, 0.25, 0.5, 1.0)
    eta_g: float = 120.0
    eta_kappa: float = 40.0
    eta_gamma_perp: float = 1.3
    drive_ratio: float = math.sqrt(20.0)
    t_final: float = 100.0
    burn_in: float = 2.0
    stride: int = 10
    n_y: int = 512
    span: float = 4.0
    base_seed: int = 0


@dataclass
class ScalingResult:
    points: list[ScalingPoint]
    fits: dict = field(default_factory=dict)
    gamma_ratios: list[float] = field(default_factory=list)

    def to_csv(self, path) -> None:
        rows = [[p.g, p.kappa, p.gamma_perp, p.eta, p.inv_mean_inv_s, p.std_err] for p in self.points]
        np.savetxt(path, np.asarray(rows, float).reshape(-1, 6), delimiter=",",
                   header=SCALING_CSV_HEADER, comments="", fmt="%.8e")

    def summary(self) -> dict:
        return {
            "fits": {k: asdict(v) for k, v in self.fits.items()},
            "gamma_perp_ratios": self.gamma_ratios,
            "points": [asdict(p) for p in self.points],
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)


def _scaling_point(args) -> ScalingPoint:
    from .pfe import simulate_pfe

    series, index, params, spec = args
    rec = simulate_pfe(
        params, None, spec.t_final, NoiseSource(spec.base_seed, (index,)),
        stride=spec.stride, n_y=spec.n_y, span=spec.span,
    )
    if not rec.ok:
        raise FloatingPointError(rec.error)
    est = entropy_statistic([rec], burn_in=spec.burn_in)
    return ScalingPoint(params.g, params.kappa, params.gamma_perp, params.eta, est.value, est.std_err,
                        series, in_scaling_regime(params))


def scaling_points(spec: ScalingSpec) -> list[tuple[str, SystemParams]]:
    out = []
    for j, gp in enumerate(spec.gamma_perps):
        for g in spec.g_values:
            kappa = g / spec.g_over_kappa
            out.append((f"g/gamma_perp={gp:g}", SystemParams(g, kappa, gp, kappa * spec.drive_ratio, 1.0)))
    for eta in spec.etas:
        out.append(("eta", SystemParams(spec.eta_g, spec.eta_kappa, spec.eta_gamma_perp,
                                        spec.eta_kappa * spec.drive_ratio, eta)))
    return out


def scaling_study(spec: ScalingSpec = ScalingSpec(), workers: int | None = None) -> ScalingResult:
    """Run the P-function model at every sweep point and fit the exponents.

    Sweep point i draws noise from stream (i,) of ``spec.base_seed``; points
    outside the validity regime are reported but left out of the fits.
    """
    todo = [(s, i, p, spec) for i, (s, p) in enumerate(scaling_points(spec))]
    workers = resolve_workers(workers)
    if workers == 1:
        points = [_scaling_point(a) for a in todo]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            points = list(pool.map(_scaling_point, todo))
    for p in points:
        if not p.in_regime:
            log.warning("point g=%g kappa=%g gamma_perp=%g eta=%g is outside the scaling regime",
                        p.g, p.kappa, p.gamma_perp, p.eta)
    result = ScalingResult(points)
    for gp in spec.gamma_perps:
        ser = [p for p in points if p.series == f"g/gamma_perp={gp:g}" and p.in_regime]
        if len(ser) >= 2:
            result.fits[f"g_slope_gamma_perp_{gp:g}"] = fit_loglog([p.g for p in ser],
                                                                   [p.inv_mean_inv_s for p in ser])
    eta_ser = [p for p in points if p.series == "eta" and p.in_regime]
    if len(eta_ser) >= 2:
        result.fits["eta_slope"] = fit_loglog([p.eta for p in eta_ser], [p.inv_mean_inv_s for p in eta_ser])
    if len(spec.gamma_perps) >= 2:
        hi, lo = spec.gamma_perps[0], spec.gamma_perps[1]
        a = {p.g: p.inv_mean_inv_s for p in points if p.series == f"g/gamma_perp={hi:g}"}
        b = {p.g: p.inv_mean_inv_s for p in points if p.series == f"g/gamma_perp={lo:g}"}
        result.gamma_ratios = [a[g] / b[g] for g in spec.g_values if g in a and g in b]
    return result


# ---------------------------------------------------------------------------
# spectra


def power_spectrum(series, dt: float, segment: float = 10.0):
    """Welch estimate of the one-sided PSD; ``segment`` is the segment length in us."""
    nper = min(len(series), int(round(segment / dt)))
    return signal.welch(np.asarray(series, float), fs=1.0 / dt, nperseg=nper)


def band_spectrum(series, dt: float, band=(0.1, 50.0), n_bands: int = 8, segment: float = 10.0):
    """PSD averaged over ``n_bands`` log-spaced bands inside ``band`` (MHz)."""
    f, P = power_spectrum(series, dt, segment)
    edges = np.geomspace(band[0], band[1], n_bands + 1)
    out = np.empty(n_bands)
    for i in range(n_bands):
        sel = (f >= edges[i]) & (f < edges[i + 1])
        if not sel.any():
            raise ValueError(f"no frequency bins in [{edges[i]:g}, {edges[i + 1]:g}) MHz; use longer segments")
        out[i] = P[sel].mean()
    return edges, out


def spectrum_mismatch(rec_a: TrajectoryRecord, rec_b: TrajectoryRecord, band=(0.1, 50.0),
                      n_bands: int = 8, segment: float = 10.0) -> float:
    """Largest relative band-power difference between two photocurrents, |a-b|/b."""
    _, a = band_spectrum(rec_a.photocurrent, rec_a.dt, band, n_bands, segment)
    _, b = band_spectrum(rec_b.photocurrent, rec_b.dt, band, n_bands, segment)
    return float(np.max(np.abs(a - b) / b))
