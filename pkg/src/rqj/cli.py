"""Command-line runner: ``rqj --config run.cfg --mode SME_TRAJ --out results/``.

Configuration files hold flat ``key = value`` lines (``#`` starts a comment).
``--set key=value`` overrides a single key; ``--mode``, ``--seed`` and
``--out`` override ``mode``, ``base_seed`` and ``output_dir``.
"""

from __future__ import annotations

import argparse
import enum
import json
import logging
import math
import platform
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    DEFAULT_FC,
    DETECT_FC,
    ScalingSpec,
    detect_switches,
    lowpass,
    scaling_study,
    switching_rate,
)
from .lindblad import (
    QGridWarning,
    Variant,
    check_time_step,
    default_dt,
    default_q_axes,
    dressed_population,
    expectation,
    n_steps_for,
    purity,
    q_function,
    steady_state,
    trace_distance,
)
from .operators import Frame, SystemParams, build_joint_operators, compute_fixed_points, reference_state
from .pfe import check_cfl, default_pfe_dt, simulate_pfe, y_grid
from .sme import NoiseSource, ensemble_run, resolve_workers, simulate_trajectory

log = logging.getLogger("rqj")


class Mode(str, enum.Enum):
    ME_STEADY = "ME_STEADY"
    SME_TRAJ = "SME_TRAJ"
    PFE_TRAJ = "PFE_TRAJ"
    ENSEMBLE = "ENSEMBLE"
    SCALING = "SCALING"
    QFUNC = "QFUNC"


NEEDS_FIXED_POINTS = {Mode.SME_TRAJ, Mode.PFE_TRAJ, Mode.ENSEMBLE, Mode.QFUNC}


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).replace(",", " ").split())


def _pair(text: str) -> tuple[float, float]:
    vals = _floats(text)
    if len(vals) != 2:
        raise ValueError(f"expected two numbers, got {text!r}")
    return vals


def _opt(conv):
    def parse(text):
        return None if str(text).strip().lower() in ("", "none", "auto", "default") else conv(text)

    return parse


def _int(text) -> int:
    value = float(text)
    if value != int(value):
        raise ValueError(f"expected an integer, got {text!r}")
    return int(value)


# key -> (parser, default)
SCHEMA = {
    "mode": (lambda s: Mode(str(s).strip().upper()), Mode.SME_TRAJ),
    "g": (float, 120.0),
    "kappa": (float, 40.0),
    "gamma_perp": (float, 2.6),
    "E": (_opt(float), None),
    "e_over_kappa_sq": (float, 20.0),
    "eta": (float, 1.0),
    "n_max": (_opt(_int), None),
    "frame": (lambda s: Frame(str(s).strip().upper()), Frame.DISPLACED),
    "variant": (lambda s: Variant(str(s).strip().upper()), Variant.FULL),
    "dt": (_opt(float), None),
    "t_final": (float, 10.0),
    "n_traj": (_int, 500),
    "n_snapshots": (_int, 10),
    "base_seed": (_int, 0),
    "output_dir": (str, "rqj_out"),
    "stride": (_int, 10),
    "filter_fc": (float, DEFAULT_FC),
    "detect_fc": (float, DETECT_FC),
    "thresholds": (_opt(_pair), None),
    "initial_state": (lambda s: str(s).strip().upper(), "PLUS"),
    "n_y": (_int, 512),
    "span": (float, 4.0),
    "q_points": (_int, 101),
    "q_re_range": (_opt(_pair), None),
    "q_im_range": (_opt(_pair), None),
    "ss_method": (lambda s: str(s).strip().lower(), "direct"),
    "scaling_g_values": (_floats, ScalingSpec.g_values),
    "scaling_g_over_kappa": (float, ScalingSpec.g_over_kappa),
    "scaling_gamma_perps": (_floats, ScalingSpec.gamma_perps),
    "scaling_etas": (_floats, ScalingSpec.etas),
    "scaling_eta_g": (float, ScalingSpec.eta_g),
    "scaling_eta_kappa": (float, ScalingSpec.eta_kappa),
    "scaling_eta_gamma_perp": (float, ScalingSpec.eta_gamma_perp),
    "scaling_burn_in": (float, ScalingSpec.burn_in),
}


@dataclass
class RunConfig:
    values: dict
    params: SystemParams
    explicit: set = field(default_factory=set)

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    @property
    def output_path(self) -> Path:
        return Path(self.values["output_dir"])

    def to_json(self) -> dict:
        out = {}
        for k, v in self.values.items():
            if isinstance(v, enum.Enum):
                v = v.value
            elif isinstance(v, tuple):
                v = list(v)
            out[k] = v
        out["E"] = self.params.E
        out["n_max"] = self.params.n_max
        return out

    def to_text(self) -> str:
        """The resolved configuration as a config file that re-runs this experiment."""
        lines = []
        for k, v in self.to_json().items():
            drop = "e_over_kappa_sq" if "E" in self.explicit else "E"
            if k == drop or v is None:
                continue
            if isinstance(v, list):
                v = ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    def scaling_spec(self) -> ScalingSpec:
        v = self.values
        return ScalingSpec(
            g_values=tuple(v["scaling_g_values"]),
            g_over_kappa=v["scaling_g_over_kappa"],
            gamma_perps=tuple(v["scaling_gamma_perps"]),
            etas=tuple(v["scaling_etas"]),
            eta_g=v["scaling_eta_g"],
            eta_kappa=v["scaling_eta_kappa"],
            eta_gamma_perp=v["scaling_eta_gamma_perp"],
            drive_ratio=math.sqrt(v["e_over_kappa_sq"]),
            t_final=v["t_final"],
            burn_in=v["scaling_burn_in"],
            stride=v["stride"],
            n_y=v["n_y"],
            span=v["span"],
            base_seed=v["base_seed"],
        )


def read_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    raw = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in raw:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def build_config(raw: dict[str, str]) -> RunConfig:
    """Validate raw string values and fill every default explicitly."""
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    values = {}
    for key, (conv, default) in SCHEMA.items():
        if key in raw:
            try:
                values[key] = conv(raw[key])
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value for {key!r}: {raw[key]!r} ({exc})") from None
        else:
            values[key] = default
    if "E" in raw and "e_over_kappa_sq" in raw and values["E"] is not None:
        raise ConfigError("give either E or e_over_kappa_sq, not both")
    if values["E"] is None:
        if values["e_over_kappa_sq"] <= 0:
            raise ConfigError("e_over_kappa_sq must be > 0")
        values["E"] = values["kappa"] * math.sqrt(values["e_over_kappa_sq"])
    try:
        params = SystemParams(
            g=values["g"], kappa=values["kappa"], gamma_perp=values["gamma_perp"], E=values["E"],
            eta=values["eta"], n_max=values["n_max"], frame=values["frame"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cfg = RunConfig(values, params, set(raw))
    validate(cfg)
    return cfg


def _check(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def validate(cfg: RunConfig) -> None:
    """Every numeric precondition of the selected pipeline, checked up front."""
    v, p, mode = cfg.values, cfg.params, cfg.values["mode"]
    if mode in NEEDS_FIXED_POINTS:
        try:
            p.require_fixed_point_regime()
        except ValueError as exc:
            raise ConfigError(f"{mode.value} needs the two-fixed-point regime: {exc}") from None
    _check(v["t_final"] > 0, "t_final must be > 0")
    _check(v["stride"] >= 1, "stride must be >= 1")
    _check(v["n_traj"] >= 1, "n_traj must be >= 1")
    _check(0 <= v["base_seed"] < 2**64, "base_seed must be a 64-bit unsigned integer")
    _check(v["initial_state"] in ("PLUS", "MINUS"), "initial_state must be PLUS or MINUS")
    _check(v["ss_method"] in ("direct", "integrate", "both"), "ss_method must be direct, integrate or both")
    if v["thresholds"] is not None:
        _check(v["thresholds"][0] < v["thresholds"][1], "thresholds must be (low, high) with low < high")
    _check(v["q_points"] >= 3, "q_points must be >= 3")
    for key in ("q_re_range", "q_im_range"):
        if v[key] is not None:
            _check(v[key][0] < v[key][1], f"{key} must be increasing")
    try:
        if mode in (Mode.SME_TRAJ, Mode.ENSEMBLE):
            dt = v["dt"] if v["dt"] is not None else default_dt(p, v["variant"])
            check_time_step(p, dt, v["variant"])
            v["dt"] = dt
            n = n_steps_for(v["t_final"], dt)
            _check(n % v["stride"] == 0, f"stride {v['stride']} must divide the {n} integration steps")
            if mode is Mode.ENSEMBLE:
                _check(v["n_snapshots"] >= 1 and n % v["n_snapshots"] == 0,
                       f"n_snapshots must divide the {n} integration steps")
            _check_filter(v, dt * v["stride"])
        elif mode is Mode.PFE_TRAJ:
            y = y_grid(p, v["n_y"], v["span"])
            dt = v["dt"] if v["dt"] is not None else default_pfe_dt(p, y)
            check_cfl(p, y, dt)
            v["dt"] = dt
            n = n_steps_for(v["t_final"], dt)
            _check(n % v["stride"] == 0, f"stride {v['stride']} must divide the {n} integration steps")
            if v["n_snapshots"]:
                _check(n % v["n_snapshots"] == 0, "n_snapshots must divide the number of steps")
            _check_filter(v, dt * v["stride"])
        elif mode is Mode.SCALING:
            spec = cfg.scaling_spec()
            _check(len(spec.g_values) >= 2 or len(spec.etas) >= 2, "a scaling study needs at least two points")
            _check(spec.t_final > spec.burn_in, "t_final must exceed scaling_burn_in")
            from .analysis import scaling_points

            for _, sp in scaling_points(spec):
                sp.require_fixed_point_regime()
                y = y_grid(sp, spec.n_y, spec.span)
                n = n_steps_for(spec.t_final, default_pfe_dt(sp, y))
                _check(n % spec.stride == 0, f"stride {spec.stride} must divide the {n} steps at g={sp.g:g}")
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def _check_filter(v: dict, record_dt: float) -> None:
    nyquist = 0.5 / record_dt
    _check(0 < v["filter_fc"] < nyquist, f"filter_fc must lie in (0, {nyquist:g}) MHz for the record spacing")
    _check(0 < v["detect_fc"] < nyquist, f"detect_fc must lie in (0, {nyquist:g}) MHz for the record spacing")


def parse_config(argv: list[str] | None = None) -> tuple[RunConfig, int]:
    """Build a validated RunConfig from command-line arguments; returns (config, workers)."""
    parser = argparse.ArgumentParser(prog="rqj", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="flat key = value configuration file")
    parser.add_argument("--mode", help="override the mode key")
    parser.add_argument("--seed", help="override base_seed")
    parser.add_argument("--out", help="override output_dir")
    parser.add_argument("--workers", type=int, help="worker processes (default: $RQJ_WORKERS or 1)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    raw = read_config_file(args.config) if args.config else {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        raw[key] = value
    for flag, key in (("mode", "mode"), ("seed", "base_seed"), ("out", "output_dir")):
        if getattr(args, flag) is not None:
            raw[key] = getattr(args, flag)
    if args.verbose:
        logging.basicConfig(level=logging.INFO)
    cfg = build_config(raw)
    try:
        workers = resolve_workers(args.workers)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg, workers


# ---------------------------------------------------------------------------
# pipelines


def _initial_state(cfg: RunConfig) -> np.ndarray:
    return reference_state(cfg.initial_state, cfg.params)


def _run_me_steady(cfg: RunConfig, out: Path, meta: dict) -> None:
    p = cfg.params
    rho = steady_state(p, cfg.variant, method=cfg.ss_method)
    ops = build_joint_operators(p)
    summary = {
        "p_plus": float(dressed_population(rho, p)),
        "x_mean": expectation(rho, ops.x).real,
        "y_mean": expectation(rho, ops.y).real,
        "photon_number": expectation(rho, ops.adag @ ops.a).real,
        "purity": purity(rho),
    }
    if 2 * p.E > p.g:
        mix = 0.5 * (reference_state("PLUS", p) + reference_state("MINUS", p))
        summary["trace_distance_to_reference_mixture"] = trace_distance(rho, mix)
    _write_json(out / "steady_state.json", summary)
    np.save(out / "rho_steady.npy", rho)
    meta["outputs"] += ["steady_state.json", "rho_steady.npy"]


def _q_axes(cfg: RunConfig):
    dre, dim_ = default_q_axes(cfg.params, cfg.q_points)
    re_axis = np.linspace(*cfg.q_re_range, cfg.q_points) if cfg.q_re_range else dre
    im_axis = np.linspace(*cfg.q_im_range, cfg.q_points) if cfg.q_im_range else dim_
    return re_axis, im_axis


def _run_qfunc(cfg: RunConfig, out: Path, meta: dict) -> None:
    p = cfg.params
    rho = steady_state(p, cfg.variant, method=cfg.ss_method)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", QGridWarning)
        grid = q_function(rho, p, *_q_axes(cfg))
    grid.to_csv(out / "qfunc.csv")
    fp = compute_fixed_points(p)
    peaks = grid.local_maxima()
    _write_json(out / "qfunc_summary.json", {
        "integral": grid.integral(),
        "maxima": [{"re": z.real, "im": z.imag, "q": q} for z, q in peaks],
        "fixed_points": [{"re": a.real, "im": a.imag} for a in (fp.alpha_plus, fp.alpha_minus)],
        "warnings": [str(w.message) for w in caught],
    })
    meta["outputs"] += ["qfunc.csv", "qfunc_summary.json"]


def _switch_summary(cfg: RunConfig, rec) -> dict:
    if len(rec) < 2:
        return {"n_events": 0}
    events = detect_switches(rec, cfg.params, cfg.detect_fc, cfg.thresholds)
    filt = lowpass(rec.photocurrent, rec.dt, cfg.filter_fc)
    return {
        "n_events": len(events),
        "rate_mhz": switching_rate(events, rec.duration),
        "events": [{"t_us": e.t, "direction": e.direction.value,
                    "level_before": e.filtered_level_before, "level_after": e.filtered_level_after}
                   for e in events],
        "mean_filtered_photocurrent": float(np.mean(filt)),
    }


def _run_sme(cfg: RunConfig, out: Path, meta: dict) -> bool:
    noise = NoiseSource(cfg.base_seed, 0)
    rec = simulate_trajectory(_initial_state(cfg), cfg.params, cfg.dt, cfg.t_final, noise,
                              cfg.variant, stride=cfg.stride)
    rec.to_csv(out / "trajectory.csv")
    _write_json(out / "switches.json", _switch_summary(cfg, rec))
    meta["outputs"] += ["trajectory.csv", "switches.json"]
    meta["seeds"] = {"base_seed": cfg.base_seed, "stream_index": [0]}
    meta["dt_us"] = rec.dt_step
    if not rec.ok:
        meta["error"] = rec.error
    return rec.ok


def _run_pfe(cfg: RunConfig, out: Path, meta: dict) -> bool:
    noise = NoiseSource(cfg.base_seed, 0)
    rec = simulate_pfe(cfg.params, cfg.dt, cfg.t_final, noise, n_y=cfg.n_y, span=cfg.span,
                       stride=cfg.stride, n_snapshots=cfg.n_snapshots)
    rec.to_csv(out / "trajectory.csv")
    meta["outputs"].append("trajectory.csv")
    for k, (t, state) in enumerate(rec.meta.get("snapshots", [])):
        name = f"snapshot_t{k}.csv"
        state.to_csv(out / name)
        meta["outputs"].append(name)
    if rec.meta.get("snapshots"):
        meta["snapshot_times_us"] = [t for t, _ in rec.meta["snapshots"]]
    _write_json(out / "switches.json", _switch_summary(cfg, rec))
    meta["outputs"].append("switches.json")
    meta["seeds"] = {"base_seed": cfg.base_seed, "stream_index": [0]}
    meta["dt_us"] = rec.dt_step
    meta["clipped_mass"] = rec.meta["clipped_mass"]
    if not rec.ok:
        meta["error"] = rec.error
    return rec.ok


def _run_ensemble(cfg: RunConfig, out: Path, meta: dict, workers: int) -> bool:
    res = ensemble_run(_initial_state(cfg), cfg.params, cfg.dt, cfg.t_final, cfg.n_traj, cfg.base_seed,
                       cfg.variant, stride=cfg.stride, n_snapshots=cfg.n_snapshots, workers=workers)
    res.write_json(out / "ensemble.json")
    np.save(out / "ensemble_mean.npy", res.mean_states)
    meta["outputs"] += ["ensemble.json", "ensemble_mean.npy"]
    meta["seeds"] = {"base_seed": cfg.base_seed, "stream_index": [0, cfg.n_traj - 1]}
    meta["dt_us"] = res.dt
    if res.n_failed:
        meta["error"] = f"{res.n_failed} of {cfg.n_traj} trajectories failed"
    return res.n_failed == 0


def _run_scaling(cfg: RunConfig, out: Path, meta: dict, workers: int) -> None:
    spec = cfg.scaling_spec()
    res = scaling_study(spec, workers=workers)
    res.to_csv(out / "scaling.csv")
    res.write_json(out / "scaling_fit.json")
    meta["outputs"] += ["scaling.csv", "scaling_fit.json"]
    meta["seeds"] = {"base_seed": cfg.base_seed, "stream_index": "(point index,)"}


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, enum.Enum):
        return obj.value
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def run(cfg: RunConfig, workers: int = 1) -> int:
    """Execute a validated configuration; returns the process exit status."""
    out = cfg.output_path
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "config": cfg.to_json(),
        "explicit_keys": sorted(cfg.explicit),
        "params": cfg.params.as_dict(),
        "seeds": {"base_seed": cfg.base_seed},
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "workers": workers,
        "outputs": [],
        "incomplete": True,
    }
    (out / "run_config.cfg").write_text(cfg.to_text())
    meta["outputs"].append("run_config.cfg")
    started = time.perf_counter()
    ok = False
    try:
        mode = cfg.mode
        if mode is Mode.ME_STEADY:
            _run_me_steady(cfg, out, meta)
            ok = True
        elif mode is Mode.QFUNC:
            _run_qfunc(cfg, out, meta)
            ok = True
        elif mode is Mode.SME_TRAJ:
            ok = _run_sme(cfg, out, meta)
        elif mode is Mode.PFE_TRAJ:
            ok = _run_pfe(cfg, out, meta)
        elif mode is Mode.ENSEMBLE:
            ok = _run_ensemble(cfg, out, meta, workers)
        elif mode is Mode.SCALING:
            _run_scaling(cfg, out, meta, workers)
            ok = True
    except (ArithmeticError, ValueError, RuntimeError) as exc:
        log.error("run failed: %s", exc)
        meta["error"] = f"{type(exc).__name__}: {exc}"
    meta["incomplete"] = not ok
    meta["wall_time_s"] = time.perf_counter() - started
    _write_json(out / "run_meta.json", meta)
    return 0 if ok else 1


def main(argv: list[str] | None = None) -> int:
    try:
        cfg, workers = parse_config(argv)
    except ConfigError as exc:
        print(f"rqj: configuration error: {exc}", file=sys.stderr)
        return 2
    return run(cfg, workers)


if __name__ == "__main__":
    sys.exit(main())
