"""Compiled numerical kernels.

Everything here is a plain function of scalars and ndarrays so that numba can
compile it. The public modules wrap these in typed interfaces; nothing in this
file should be imported by user code directly.

If numba is unavailable the kernels still run as ordinary Python (slowly),
which keeps the library importable in minimal environments.
"""

from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover
    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]

        def deco(fn):
            return fn

        return deco

TWO_PI = 2.0 * math.pi


@njit(cache=True)
def wrap_angle(a):
    """Wrap to the half-open interval [-pi, pi)."""
    return (a + math.pi) % TWO_PI - math.pi


@njit(cache=True)
def rk4_step(x, y, th, v, om, mu, nu, dt):
    """One RK4 step of the traction-scaled unicycle.

    The heading channel is linear in time (theta_dot = nu*om does not depend
    on the state), so the RK4 stages collapse to Simpson's rule on the
    position integrands. The returned heading is NOT wrapped; callers that
    expose states wrap it themselves.
    """
    dth = nu * om * dt
    th2 = th + 0.5 * dth
    th4 = th + dth
    c = dt * mu * v / 6.0
    xn = x + c * (math.cos(th) + 4.0 * math.cos(th2) + math.cos(th4))
    yn = y + c * (math.sin(th) + 4.0 * math.sin(th2) + math.sin(th4))
    return xn, yn, th + dth


@njit(cache=True)
def rk4_step_jac(x, y, th, v, om, mu, nu, dt):
    """RK4 step plus exact Jacobians of the next state.

    Returns (xn, yn, thn, A, Bu, Bm) where A = d(next)/d(state) is 3x3,
    Bu = d(next)/d(v, om) is 3x2 and Bm = d(next)/d(mu, nu, dtheta) is 3x3.
    dtheta never enters the dynamics so its column in Bm is zero; it is kept
    so the estimator can treat the parameter vector as one block.
    """
    dth = nu * om * dt
    th2 = th + 0.5 * dth
    th4 = th + dth
    c1, c2, c4 = math.cos(th), math.cos(th2), math.cos(th4)
    s1, s2, s4 = math.sin(th), math.sin(th2), math.sin(th4)
    sc = c1 + 4.0 * c2 + c4
    ss = s1 + 4.0 * s2 + s4
    k = dt / 6.0

    xn = x + k * mu * v * sc
    yn = y + k * mu * v * ss
    thn = th + dth

    A = np.zeros((3, 3))
    A[0, 0] = 1.0
    A[1, 1] = 1.0
    A[2, 2] = 1.0
    A[0, 2] = -k * mu * v * ss
    A[1, 2] = k * mu * v * sc

    # Stage headings depend on (nu, om) through dth.
    ds_dnu = om * dt  # d(dth)/dnu
    ds_dom = nu * dt  # d(dth)/dom
    dsc_ddth = -(4.0 * s2 * 0.5 + s4)
    dss_ddth = 4.0 * c2 * 0.5 + c4

    Bu = np.zeros((3, 2))
    Bu[0, 0] = k * mu * sc
    Bu[1, 0] = k * mu * ss
    Bu[0, 1] = k * mu * v * dsc_ddth * ds_dom
    Bu[1, 1] = k * mu * v * dss_ddth * ds_dom
    Bu[2, 1] = nu * dt

    Bm = np.zeros((3, 3))
    Bm[0, 0] = k * v * sc
    Bm[1, 0] = k * v * ss
    Bm[0, 1] = k * mu * v * dsc_ddth * ds_dnu
    Bm[1, 1] = k * mu * v * dss_ddth * ds_dnu
    Bm[2, 1] = om * dt

    return xn, yn, thn, A, Bu, Bm


@njit(cache=True)
def mhe_residual_jac(q, inputs, dts, meas, x_prior, m_prior, w_x, w_m, w_meas):
    """Weighted residual vector and Jacobian of the horizon cost.

    q        : decision vector [x0, y0, th0, mu, nu, dtheta]
    inputs   : (N, 2) per-interval body commands (v, om)
    dts      : (N,) interval lengths
    meas     : (N+1, 3) measurements (z_x, z_y, z_th)
    x_prior  : (3,) arrival state prior
    m_prior  : (3,) arrival parameter prior
    w_x, w_m : (3, 3) square roots of the arrival weights
    w_meas   : (3, 3) square root of the per-sample measurement weight

    States over the window are generated by single shooting from (x0, m), so
    the dynamics constraint holds by construction. Returns (r, J) with
    cost = r @ r and d(cost)/dq = 2 J^T r.
    """
    n = inputs.shape[0]
    n_res = 6 + 3 * (n + 1)
    r = np.zeros(n_res)
    J = np.zeros((n_res, 6))

    # Arrival residuals. Heading and compass-offset residuals are wrapped.
    ax = np.zeros(3)
    ax[0] = q[0] - x_prior[0]
    ax[1] = q[1] - x_prior[1]
    ax[2] = wrap_angle(q[2] - x_prior[2])
    am = np.zeros(3)
    am[0] = q[3] - m_prior[0]
    am[1] = q[4] - m_prior[1]
    am[2] = wrap_angle(q[5] - m_prior[2])
    for i in range(3):
        for j in range(3):
            r[i] += w_x[i, j] * ax[j]
            r[3 + i] += w_m[i, j] * am[j]
            J[i, j] = w_x[i, j]
            J[3 + i, 3 + j] = w_m[i, j]

    mu, nu, dth_off = q[3], q[4], q[5]
    sx, sy, sth = q[0], q[1], q[2]
    # Sensitivities of the current state w.r.t. x0 (Sx) and params (Sm).
    Sx = np.eye(3)
    Sm = np.zeros((3, 3))

    for i in range(n + 1):
        h = np.zeros(3)
        h[0] = sx - meas[i, 0]
        h[1] = sy - meas[i, 1]
        h[2] = wrap_angle(sth - (meas[i, 2] + dth_off))
        # d(h)/dq: rows of Sx/Sm; heading row gets the extra -1 on dtheta.
        D = np.zeros((3, 6))
        for a in range(3):
            for b in range(3):
                D[a, b] = Sx[a, b]
                D[a, 3 + b] = Sm[a, b]
        D[2, 5] -= 1.0
        base = 6 + 3 * i
        for a in range(3):
            acc = 0.0
            for b in range(3):
                acc += w_meas[a, b] * h[b]
            r[base + a] = acc
            for c in range(6):
                jac = 0.0
                for b in range(3):
                    jac += w_meas[a, b] * D[b, c]
                J[base + a, c] = jac

        if i < n:
            v, om = inputs[i, 0], inputs[i, 1]
            sx, sy, sth, A, Bu, Bm = rk4_step_jac(
                sx, sy, sth, v, om, mu, nu, dts[i]
            )
            Sx = A @ Sx
            Sm = A @ Sm + Bm

    return r, J


@njit(cache=True)
def mpc_cost_grad(x0, U, xref, uref, Q, R, QN, mu, nu, dt):
    """Horizon tracking cost and its gradient w.r.t. the input sequence.

    Rolls the state forward with the shared integrator, then runs the adjoint
    recursion backwards. Heading errors are wrapped. Returns (cost, grad)
    with grad shaped like U (N, 2).
    """
    n = U.shape[0]
    xs = np.zeros((n + 1, 3))
    As = np.zeros((n, 3, 3))
    Bus = np.zeros((n, 3, 2))
    xs[0, 0], xs[0, 1], xs[0, 2] = x0[0], x0[1], x0[2]
    for i in range(n):
        xn, yn, thn, A, Bu, _ = rk4_step_jac(
            xs[i, 0], xs[i, 1], xs[i, 2], U[i, 0], U[i, 1], mu, nu, dt
        )
        xs[i + 1, 0], xs[i + 1, 1], xs[i + 1, 2] = xn, yn, thn
        As[i] = A
        Bus[i] = Bu

    cost = 0.0
    lam = np.zeros(3)
    grad = np.zeros((n, 2))
    # Terminal term seeds the adjoint.
    e = np.zeros(3)
    e[0] = xs[n, 0] - xref[n, 0]
    e[1] = xs[n, 1] - xref[n, 1]
    e[2] = wrap_angle(xs[n, 2] - xref[n, 2])
    for a in range(3):
        for b in range(3):
            cost += e[a] * QN[a, b] * e[b]
            lam[a] += 2.0 * QN[a, b] * e[b]

    for i in range(n - 1, -1, -1):
        e[0] = xs[i, 0] - xref[i, 0]
        e[1] = xs[i, 1] - xref[i, 1]
        e[2] = wrap_angle(xs[i, 2] - xref[i, 2])
        du0 = U[i, 0] - uref[i, 0]
        du1 = U[i, 1] - uref[i, 1]
        cost += (
            R[0, 0] * du0 * du0
            + (R[0, 1] + R[1, 0]) * du0 * du1
            + R[1, 1] * du1 * du1
        )
        for a in range(3):
            for b in range(3):
                cost += e[a] * Q[a, b] * e[b]
        # grad_u = 2 R du + Bu^T lam(next)
        grad[i, 0] = 2.0 * (R[0, 0] * du0 + R[0, 1] * du1)
        grad[i, 1] = 2.0 * (R[1, 0] * du0 + R[1, 1] * du1)
        for a in range(3):
            grad[i, 0] += Bus[i][a, 0] * lam[a]
            grad[i, 1] += Bus[i][a, 1] * lam[a]
        new_lam = np.zeros(3)
        for a in range(3):
            for b in range(3):
                new_lam[a] += 2.0 * Q[a, b] * e[b] + As[i][b, a] * lam[b]
        lam = new_lam

    return cost, grad


@njit(cache=True)
def mpc_rollout(x0, U, mu, nu, dt):
    """Predicted state sequence for an input sequence (no cost)."""
    n = U.shape[0]
    xs = np.zeros((n + 1, 3))
    xs[0, 0], xs[0, 1], xs[0, 2] = x0[0], x0[1], x0[2]
    for i in range(n):
        xn, yn, thn = rk4_step(
            xs[i, 0], xs[i, 1], xs[i, 2], U[i, 0], U[i, 1], mu, nu, dt
        )
        xs[i + 1, 0], xs[i + 1, 1], xs[i + 1, 2] = xn, yn, thn
    return xs


@njit(cache=True)
def raycast(px, py, heading, angles, stems, max_range):
    """Per-beam nearest ray-disc intersection.

    stems is (S, 3) of (x, y, r) in the world frame; beams start at (px, py)
    with world bearings heading + angles. Returns an array of ranges, inf for
    misses. Only beams inside a stem's subtended cone are tested, so the work
    is O(S * beams_per_stem).
    """
    n_beams = angles.shape[0]
    ranges = np.full(n_beams, np.inf)
    if n_beams == 0:
        return ranges
    a_min = angles[0]
    a_step = (angles[-1] - angles[0]) / max(n_beams - 1, 1)
    for s in range(stems.shape[0]):
        cx = stems[s, 0] - px
        cy = stems[s, 1] - py
        d2 = cx * cx + cy * cy
        rr = stems[s, 2]
        if d2 > (max_range + rr) * (max_range + rr) or d2 <= rr * rr:
            continue
        d = math.sqrt(d2)
        bearing = wrap_angle(math.atan2(cy, cx) - heading)
        half = math.asin(min(rr / d, 1.0))
        lo = int(math.ceil((bearing - half - a_min) / a_step))
        hi = int(math.floor((bearing + half - a_min) / a_step))
        # A stem straddling the +-pi seam of the scan fan is ignored beyond
        # the fan edges, which is the physical behaviour anyway.
        if hi < 0 or lo >= n_beams:
            continue
        if lo < 0:
            lo = 0
        if hi >= n_beams:
            hi = n_beams - 1
        for b in range(lo, hi + 1):
            ang = heading + angles[b]
            dx = math.cos(ang)
            dy = math.sin(ang)
            t_close = cx * dx + cy * dy
            if t_close <= 0.0:
                continue
            perp2 = d2 - t_close * t_close
            if perp2 > rr * rr:
                continue
            t_hit = t_close - math.sqrt(rr * rr - perp2)
            if 0.0 < t_hit < ranges[b] and t_hit <= max_range:
                ranges[b] = t_hit
    return ranges


@njit(cache=True)
def footprint_hits_stem(px, py, heading, half_len, half_wid, stems):
    """Index of the first stem disc overlapping the robot rectangle, or -1."""
    c = math.cos(heading)
    s = math.sin(heading)
    reach = math.sqrt(half_len * half_len + half_wid * half_wid)
    for i in range(stems.shape[0]):
        dx = stems[i, 0] - px
        dy = stems[i, 1] - py
        rr = stems[i, 2]
        lim = reach + rr
        if dx * dx + dy * dy > lim * lim:
            continue
        # Stem centre in the body frame.
        bx = c * dx + s * dy
        by = -s * dx + c * dy
        qx = min(max(bx, -half_len), half_len)
        qy = min(max(by, -half_wid), half_wid)
        ex = bx - qx
        ey = by - qy
        if ex * ex + ey * ey <= rr * rr:
            return i
    return -1
