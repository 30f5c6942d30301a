"""Compiled inner loops for conditional trajectories and the P-function grid.

The Lindblad generator is passed in coordinate form: ``G`` (the effective
non-Hermitian Hamiltonian) and the stacked jump operators, each as
(row, col, value) triples with rates already folded in.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def lindblad_apply(rho, Gr, Gc, Gv, Jr, Jc, Jv, Jptr, out, tmp):
    d = rho.shape[0]
    for i in range(d):
        for j in range(d):
            tmp[i, j] = 0.0
    for k in range(Gr.shape[0]):
        r = Gr[k]
        c = Gc[k]
        v = Gv[k]
        for j in range(d):
            tmp[r, j] += v * rho[c, j]
    for i in range(d):
        for j in range(d):
            out[i, j] = -1j * (tmp[i, j] - np.conj(tmp[j, i]))
    for q in range(Jptr.shape[0] - 1):
        for i in range(d):
            for j in range(d):
                tmp[i, j] = 0.0
        for k in range(Jptr[q], Jptr[q + 1]):
            r = Jr[k]
            c = Jc[k]
            v = Jv[k]
            for j in range(d):
                tmp[r, j] += v * rho[c, j]
        # out += tmp A^dag
        for k in range(Jptr[q], Jptr[q + 1]):
            r = Jr[k]
            c = Jc[k]
            v = np.conj(Jv[k])
            for i in range(d):
                out[i, r] += tmp[i, c] * v


@njit(cache=True)
def _axpy(out, x, a, y):
    d = x.shape[0]
    for i in range(d):
        for j in range(d):
            out[i, j] = x[i, j] + a * y[i, j]


@njit(cache=True)
def rk4_inplace(rho, dt, Gr, Gc, Gv, Jr, Jc, Jv, Jptr, ws):
    k1, k2, k3, k4, stage, tmp = ws[0], ws[1], ws[2], ws[3], ws[4], ws[5]
    lindblad_apply(rho, Gr, Gc, Gv, Jr, Jc, Jv, Jptr, k1, tmp)
    _axpy(stage, rho, 0.5 * dt, k1)
    lindblad_apply(stage, Gr, Gc, Gv, Jr, Jc, Jv, Jptr, k2, tmp)
    _axpy(stage, rho, 0.5 * dt, k2)
    lindblad_apply(stage, Gr, Gc, Gv, Jr, Jc, Jv, Jptr, k3, tmp)
    _axpy(stage, rho, dt, k3)
    lindblad_apply(stage, Gr, Gc, Gv, Jr, Jc, Jv, Jptr, k4, tmp)
    d = rho.shape[0]
    h = dt / 6.0
    for i in range(d):
        for j in range(d):
            rho[i, j] += h * (k1[i, j] + 2.0 * k2[i, j] + 2.0 * k3[i, j] + k4[i, j])


@njit(cache=True)
def mean_y(rho, nf):
    b = 0.0j
    for a in range(2):
        o = a * nf
        for n in range(nf - 1):
            b += np.sqrt(n + 1.0) * rho[o + n + 1, o + n]
    return 2.0 * b.imag


@njit(cache=True)
def p_plus(rho, nf):
    s = 0.0
    eg = 0.0j
    for n in range(nf):
        s += rho[n, n].real + rho[nf + n, nf + n].real
        eg += rho[nf + n, n]
    return 0.5 * s - eg.imag


@njit(cache=True)
def measurement_inplace(rho, nf, dt, c, eta_kappa, dW, tmp):
    """Kraus update K rho K^dag / Tr with K = R - i c b dY (see sme module)."""
    d = rho.shape[0]
    y = mean_y(rho, nf)
    dY = c * y * dt + dW
    coef = 1j * c * dY
    # tmp = K rho
    for a in range(2):
        for n in range(nf):
            i = a * nf + n
            rs = 1.0 - eta_kappa * dt * n
            if n < nf - 1:
                s = coef * np.sqrt(n + 1.0)
                for j in range(d):
                    tmp[i, j] = rs * rho[i, j] - s * rho[i + 1, j]
            else:
                for j in range(d):
                    tmp[i, j] = rs * rho[i, j]
    # rho = tmp K^dag, K^dag = R + coef b^dag
    for a in range(2):
        for n in range(nf):
            j = a * nf + n
            rs = 1.0 - eta_kappa * dt * n
            if n < nf - 1:
                s = coef * np.sqrt(n + 1.0)
                for i in range(d):
                    rho[i, j] = rs * tmp[i, j] + s * tmp[i, j + 1]
            else:
                for i in range(d):
                    rho[i, j] = rs * tmp[i, j]
    return y


@njit(cache=True)
def hermitize_normalize(rho):
    d = rho.shape[0]
    tr = 0.0
    for i in range(d):
        for j in range(i + 1, d):
            v = 0.5 * (rho[i, j] + np.conj(rho[j, i]))
            rho[i, j] = v
            rho[j, i] = np.conj(v)
        rho[i, i] = rho[i, i].real
        tr += rho[i, i].real
    for i in range(d):
        for j in range(d):
            rho[i, j] /= tr
    return tr


@njit(cache=True)
def sme_trajectory(
    rho, dWs, dt, stride, nf, c, eta_kappa,
    Gr, Gc, Gv, Jr, Jc, Jv, Jptr,
    y_rec, p_rec, xi_rec, snap_every, snaps,
):
    """Integrate in place; returns the number of completed steps."""
    d = rho.shape[0]
    ws = np.empty((6, d, d), dtype=np.complex128)
    n_steps = dWs.shape[0]
    for k in range(n_steps):
        if k % stride == 0:
            j = k // stride
            y_rec[j] = mean_y(rho, nf)
            p_rec[j] = p_plus(rho, nf)
        xi_rec[k // stride] += dWs[k]
        rk4_inplace(rho, dt, Gr, Gc, Gv, Jr, Jc, Jv, Jptr, ws)
        if c > 0.0:
            measurement_inplace(rho, nf, dt, c, eta_kappa, dWs[k], ws[0])
        tr = hermitize_normalize(rho)
        if not np.isfinite(tr) or tr <= 0.0:
            return k
        if snap_every > 0 and (k + 1) % snap_every == 0:
            snaps[(k + 1) // snap_every] = rho
    return n_steps


@njit(cache=True)
def pfe_moments_raw(Pp, Pm, y, dy):
    """(p_plus, p_minus, <y>_+ p_+, <y>_- p_-) by the rectangle rule."""
    mp = 0.0
    mm = 0.0
    yp = 0.0
    ym = 0.0
    for i in range(y.shape[0]):
        mp += Pp[i]
        mm += Pm[i]
        yp += y[i] * Pp[i]
        ym += y[i] * Pm[i]
    return mp * dy, mm * dy, yp * dy, ym * dy


@njit(cache=True)
def _advect(P, y, dy, dt, drift, kappa, flux):
    # donor-cell fluxes at the interior interfaces, zero flux at both ends
    n = y.shape[0]
    for i in range(n - 1):
        v = -(drift + kappa * 0.5 * (y[i] + y[i + 1]))
        flux[i] = v * (P[i] if v > 0.0 else P[i + 1])
    r = dt / dy
    P[0] -= r * flux[0]
    for i in range(1, n - 1):
        P[i] -= r * (flux[i] - flux[i - 1])
    P[n - 1] += r * flux[n - 2]


@njit(cache=True)
def pfe_step_inplace(Pp, Pm, y, dy, dt, g, kappa, gamma_perp, c, dW, flux):
    """One step; returns the clipped negative mass."""
    n = y.shape[0]
    mp, mm, yp, ym = pfe_moments_raw(Pp, Pm, y, dy)
    ybar = (yp + ym) / (mp + mm)
    if c > 0.0:
        for i in range(n):
            f = 1.0 + c * dW * (y[i] - ybar)
            Pp[i] *= f
            Pm[i] *= f
    _advect(Pp, y, dy, dt, g, kappa, flux)
    _advect(Pm, y, dy, dt, -g, kappa, flux)
    decay = np.exp(-gamma_perp * dt)
    clipped = 0.0
    total = 0.0
    for i in range(n):
        s = 0.5 * (Pp[i] + Pm[i])
        h = 0.5 * (Pp[i] - Pm[i]) * decay
        a = s + h
        b = s - h
        if a < 0.0:
            clipped -= a
            a = 0.0
        if b < 0.0:
            clipped -= b
            b = 0.0
        Pp[i] = a
        Pm[i] = b
        total += a + b
    total *= dy
    for i in range(n):
        Pp[i] /= total
        Pm[i] /= total
    return clipped * dy


@njit(cache=True)
def pfe_trajectory(
    Pp, Pm, y, dy, dt, g, kappa, gamma_perp, c, dWs, stride,
    y_rec, p_rec, dy_rec, xi_rec, snap_every, snaps_p, snaps_m,
):
    """Integrate in place; returns (completed steps, clipped mass)."""
    flux = np.empty(y.shape[0] - 1)
    clipped = 0.0
    for k in range(dWs.shape[0]):
        if k % stride == 0:
            j = k // stride
            mp, mm, yp, ym = pfe_moments_raw(Pp, Pm, y, dy)
            y_rec[j] = yp + ym
            p_rec[j] = mp
            if mp < 1e-12 or mm < 1e-12:
                dy_rec[j] = 0.0
            else:
                dy_rec[j] = yp / mp - ym / mm
        xi_rec[k // stride] += dWs[k]
        clipped += pfe_step_inplace(Pp, Pm, y, dy, dt, g, kappa, gamma_perp, c, dWs[k], flux)
        if not np.isfinite(Pp[0] + Pm[0]):
            return k, clipped
        if snap_every > 0 and (k + 1) % snap_every == 0:
            snaps_p[(k + 1) // snap_every] = Pp
            snaps_m[(k + 1) // snap_every] = Pm
    return dWs.shape[0], clipped
