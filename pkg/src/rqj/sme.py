"""Homodyne-conditioned stochastic master equation.

One step advances the state in two stages.  The deterministic part of the
Liouvillian, minus the monitored fraction ``eta`` of cavity damping, goes
through a classical RK4 step.  The monitored part goes through the
measurement update

    K = 1 - eta*kappa*b^dag b dt - i*sqrt(2 kappa eta) b dY,
    dY = sqrt(2 kappa eta) <y> dt + dW,
    rho -> K rho K^dag / Tr[K rho K^dag],

which expands to the Ito increment
``sqrt(2 kappa eta) dW (-i b rho + i rho b^dag - <y> rho) + 2 kappa eta D[b] rho dt``
and, being a single Kraus map, never leaves the positive cone.  In the
DISPLACED frame the constant ``-i*alpha_bar`` part of the measured operator
drops out of the innovation term exactly.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .lindblad import (
    Variant,
    check_time_step,
    default_dt,
    generator,
    hermitize,
    integrate_me,
    n_steps_for,
    rk4_step,
    trace,
    trace_distance,
)
from . import _kernels
from .operators import SystemParams
from .records import TrajectoryRecord, photocurrent_from

log = logging.getLogger(__name__)

NOISE_CHUNK = 1 << 14
ENSEMBLE_BATCH = 25


class InstabilityError(FloatingPointError):
    pass


@dataclass(frozen=True)
class NoiseSource:
    """Reproducible Wiener increments for one trajectory.

    ``stream_index`` may be an int or a tuple of ints (e.g. sweep point and
    trajectory index); each distinct value gives an independent substream.
    """

    seed: int
    stream_index: int | tuple[int, ...] = 0

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    @property
    def spawn_key(self) -> tuple[int, ...]:
        idx = self.stream_index
        return tuple(int(i) for i in idx) if isinstance(idx, tuple) else (int(idx),)

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(int(self.seed), spawn_key=self.spawn_key)
        return np.random.Generator(np.random.PCG64(seq))

    def increments(self, n: int, dt: float) -> np.ndarray:
        return self.generator().standard_normal(n) * np.sqrt(dt)

    def iter_increments(self, n: int, dt: float, chunk: int = NOISE_CHUNK):
        rng = self.generator()
        sq = np.sqrt(dt)
        done = 0
        while done < n:
            m = min(chunk, n - done)
            yield rng.standard_normal(m) * sq
            done += m

    def child(self, index: int) -> "NoiseSource":
        return NoiseSource(self.seed, self.spawn_key + (int(index),))


class _MeasurementUpdate:
    def __init__(self, params: SystemParams, dt: float):
        nf = params.field_dim
        self.nf = nf
        self.dt = dt
        self.c = np.sqrt(2.0 * params.kappa * params.eta)
        self.row_scale = 1.0 - params.eta * params.kappa * dt * np.arange(nf)
        self.sq = np.sqrt(np.arange(1, nf, dtype=float))

    def shift_rows(self, r4):
        # b acting from the left: (b X)[n] = sqrt(n+1) X[n+1]
        out = np.zeros_like(r4)
        out[..., :, :-1, :, :] = self.sq[:, None, None] * r4[..., :, 1:, :, :]
        return out

    def shift_cols(self, r4):
        # X b^dag: (X b^dag)[:, m] = sqrt(m+1) X[:, m+1]
        out = np.zeros_like(r4)
        out[..., :-1] = self.sq * r4[..., 1:]
        return out

    def apply(self, rho, dW):
        lead = rho.shape[:-2]
        nf = self.nf
        r4 = rho.reshape(lead + (2, nf, 2, nf))
        y = 2.0 * _ladder_mean(r4, self.sq).imag
        dY = np.asarray(self.c * y * self.dt + dW)
        coef = (1j * self.c * dY)[..., None, None, None, None]
        M = self.row_scale[:, None, None] * r4 - coef * self.shift_rows(r4)
        N = M * self.row_scale + coef * self.shift_cols(M)
        N = hermitize(N.reshape(rho.shape))
        tr = trace(N).real
        return N / tr[..., None, None], y


def _ladder_mean(r4, sq):
    """<b> = sum_{atom, n} sqrt(n+1) rho[atom, n+1, atom, n]."""
    total = 0.0
    for a in range(2):
        block = r4[..., a, :, a, :]
        sub = np.diagonal(block[..., 1:, :-1], axis1=-2, axis2=-1)
        total = total + np.sum(sub * sq, axis=-1)
    return total


@lru_cache(maxsize=32)
def _measurement(params: SystemParams, dt: float) -> _MeasurementUpdate:
    return _MeasurementUpdate(params, dt)


def sme_step(rho: np.ndarray, params: SystemParams, dt: float, dW, variant=Variant.FULL) -> np.ndarray:
    """One Ito step of the conditional master equation (see module docstring).

    Accepts a batch of states with leading dimensions matching ``dW``.
    """
    if not np.all(np.isfinite(dW)):
        raise ValueError("dW must be finite")
    gen = generator(params, Variant(variant), exclude_measured=True)
    rho_t = hermitize(rk4_step(gen, rho, dt))
    if params.eta > 0:
        rho_t, _ = _measurement(params, dt).apply(rho_t, dW)
    else:
        rho_t = rho_t / trace(rho_t).real[..., None, None]
    if not np.all(np.isfinite(rho_t)):
        raise InstabilityError("non-finite density matrix entries")
    return rho_t


def _y_mean(rho, params):
    nf = params.field_dim
    r4 = rho.reshape(rho.shape[:-2] + (2, nf, 2, nf))
    return 2.0 * _ladder_mean(r4, np.sqrt(np.arange(1, nf, dtype=float))).imag


def _coo(M: np.ndarray, tol: float = 0.0):
    r, c = np.nonzero(np.abs(M) > tol)
    return r.astype(np.int64), c.astype(np.int64), np.ascontiguousarray(M[r, c], dtype=complex)


@lru_cache(maxsize=32)
def _kernel_operators(params: SystemParams, variant: Variant):
    gen = generator(params, variant, exclude_measured=True)
    Gr, Gc, Gv = _coo(np.asarray(gen.G))
    parts = [_coo(J) for J in gen.jump_operators()]
    Jptr = np.zeros(len(parts) + 1, dtype=np.int64)
    Jptr[1:] = np.cumsum([len(p[0]) for p in parts])
    if parts:
        Jr, Jc, Jv = (np.concatenate([p[i] for p in parts]) for i in range(3))
    else:
        Jr = Jc = np.zeros(0, dtype=np.int64)
        Jv = np.zeros(0, dtype=complex)
    return Gr, Gc, Gv, Jr, Jc, Jv, Jptr


@dataclass
class _BatchResult:
    records: list[TrajectoryRecord]
    snapshots: np.ndarray | None  # (batch, n_snap, d, d)
    snap_ok: np.ndarray  # (batch,) bool: trajectory reached every snapshot


def _run_one(rho0, params, dt, n_steps, noise, variant, stride, snap_every):
    d = params.dim
    n_rec = n_steps // stride
    rho = np.array(rho0, dtype=complex, order="C")
    y_rec = np.zeros(n_rec)
    p_rec = np.zeros(n_rec)
    xi_rec = np.zeros(n_rec)
    n_snap = n_steps // snap_every + 1 if snap_every else 1
    snaps = np.zeros((n_snap, d, d), dtype=complex)
    snaps[0] = rho
    dWs = noise.increments(n_steps, dt)
    c = float(np.sqrt(2.0 * params.kappa * params.eta))
    done = _kernels.sme_trajectory(
        rho, dWs, dt, stride, params.field_dim, c, params.eta * params.kappa,
        *_kernel_operators(params, variant),
        y_rec, p_rec, xi_rec, snap_every or 0, snaps,
    )
    xi_rec /= stride * dt
    rec = TrajectoryRecord(
        times=np.arange(n_rec) * stride * dt,
        photocurrent=photocurrent_from(params, y_rec, xi_rec),
        y_mean=y_rec,
        p_plus=p_rec,
        entropy_s=p_rec * (1.0 - p_rec),
        xi=xi_rec,
        params=params,
        dt_step=dt,
        stride=stride,
        source="sme",
        meta={"variant": variant.value, "seed": noise.seed, "stream_index": noise.spawn_key},
    )
    if done < n_steps:
        error = f"instability at step {done} (t = {done * dt:g} us)"
        log.error(error)
        rec = rec.truncated(done // stride)
        rec.error = error
    return rec, (snaps if snap_every else None), done == n_steps


def _run_batch(
    rho0: np.ndarray,
    params: SystemParams,
    dt: float,
    n_steps: int,
    noises: list[NoiseSource],
    variant: Variant,
    stride: int,
    snap_every: int | None = None,
) -> _BatchResult:
    out = [_run_one(rho0, params, dt, n_steps, nz, Variant(variant), stride, snap_every) for nz in noises]
    snaps = np.stack([o[1] for o in out]) if snap_every else None
    return _BatchResult([o[0] for o in out], snaps, np.array([o[2] for o in out]))


def simulate_trajectory(
    rho0: np.ndarray,
    params: SystemParams,
    dt: float | None,
    t_final: float,
    noise: NoiseSource,
    variant=Variant.FULL,
    stride: int = 10,
) -> TrajectoryRecord:
    """Integrate one conditional trajectory and record every ``stride``-th step.

    On numerical instability the partial record is returned with ``error`` set.
    """
    variant = Variant(variant)
    dt = default_dt(params, variant) if dt is None else dt
    check_time_step(params, dt, variant)
    n = n_steps_for(t_final, dt)
    if stride < 1 or n % stride:
        raise ValueError(f"stride {stride} must divide the number of steps {n}")
    return _run_batch(rho0, params, dt, n, [noise], variant, stride).records[0]


class PairwiseSum:
    """Order-deterministic pairwise summation of a stream of arrays."""

    def __init__(self):
        self._stack: list[tuple[int, np.ndarray]] = []
        self.count = 0

    def add(self, x: np.ndarray) -> None:
        size, acc = 1, np.array(x, copy=True)
        while self._stack and self._stack[-1][0] == size:
            s, top = self._stack.pop()
            acc = top + acc
            size += s
        self._stack.append((size, acc))
        self.count += 1

    def total(self) -> np.ndarray:
        if not self._stack:
            raise ValueError("no terms")
        acc = self._stack[-1][1]
        for _, part in reversed(self._stack[:-1]):
            acc = part + acc
        return acc


@dataclass
class EnsembleResult:
    times: np.ndarray
    mean_states: np.ndarray
    records: list[TrajectoryRecord]
    n_success: int
    n_failed: int
    base_seed: int
    params: SystemParams
    variant: Variant
    dt: float
    trace_distance_vs_me: np.ndarray | None = None
    me_states: np.ndarray | None = field(default=None, repr=False)

    def summary(self) -> dict:
        return {
            "n_traj": self.n_success + self.n_failed,
            "n_success": self.n_success,
            "base_seed": self.base_seed,
            "params": self.params.as_dict(),
            "variant": self.variant.value,
            "dt_us": self.dt,
            "times_us": self.times.tolist(),
            "trace_distance_vs_me": None
            if self.trace_distance_vs_me is None
            else [float(v) for v in self.trace_distance_vs_me],
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)


def _ensemble_chunk(args):
    rho0, params, dt, n_steps, base_seed, indices, variant, stride, snap_every = args
    noises = [NoiseSource(base_seed, i) for i in indices]
    return _run_batch(rho0, params, dt, n_steps, noises, variant, stride, snap_every)


def resolve_workers(workers: int | None) -> int:
    if workers is None:
        workers = int(os.environ.get("RQJ_WORKERS", "1"))
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    return workers


def ensemble_run(
    rho0: np.ndarray,
    params: SystemParams,
    dt: float | None,
    t_final: float,
    n_traj: int,
    base_seed: int,
    variant=Variant.FULL,
    *,
    stride: int = 10,
    n_snapshots: int = 10,
    workers: int | None = None,
    compare_me: bool = True,
) -> EnsembleResult:
    """Run ``n_traj`` trajectories (stream indices 0..n_traj-1) and average them.

    Trajectories are integrated in fixed batches of ``ENSEMBLE_BATCH`` so the
    arithmetic, and hence the output, does not depend on the worker count.
    Failed trajectories are excluded from the mean and counted.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    variant = Variant(variant)
    dt = default_dt(params, variant) if dt is None else dt
    check_time_step(params, dt, variant)
    n = n_steps_for(t_final, dt)
    if stride < 1 or n % stride:
        raise ValueError(f"stride {stride} must divide the number of steps {n}")
    if n % n_snapshots:
        raise ValueError(f"n_snapshots {n_snapshots} must divide the number of steps {n}")
    snap_every = n // n_snapshots
    chunks = [
        list(range(i, min(i + ENSEMBLE_BATCH, n_traj))) for i in range(0, n_traj, ENSEMBLE_BATCH)
    ]
    jobs = [(rho0, params, dt, n, base_seed, c, variant, stride, snap_every) for c in chunks]
    workers = resolve_workers(workers)
    if workers == 1 or len(jobs) == 1:
        results = map(_ensemble_chunk, jobs)
        pool = None
    else:
        pool = ProcessPoolExecutor(max_workers=workers)
        results = pool.map(_ensemble_chunk, jobs)
    acc = PairwiseSum()
    records: list[TrajectoryRecord] = []
    n_failed = 0
    try:
        for res in results:
            for i, rec in enumerate(res.records):
                records.append(rec)
                if res.snap_ok[i]:
                    acc.add(res.snapshots[i])
                else:
                    n_failed += 1
    finally:
        if pool is not None:
            pool.shutdown()
    if acc.count == 0:
        raise InstabilityError("every trajectory failed")
    mean = acc.total() / acc.count
    times = np.arange(n_snapshots + 1) * snap_every * dt
    result = EnsembleResult(times, mean, records, acc.count, n_failed, base_seed, params, variant, dt)
    if n_failed:
        log.warning("%d of %d trajectories failed", n_failed, n_traj)
    if compare_me:
        me = integrate_me(rho0, params, dt, t_final, variant, stride=snap_every)
        result.me_states = me.states
        result.trace_distance_vs_me = np.array(
            [trace_distance(a, b) for a, b in zip(mean, me.states)]
        )
    return result
