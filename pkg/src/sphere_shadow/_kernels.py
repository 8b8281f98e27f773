"""Compiled kernels: vector fields and the embedded Runge-Kutta propagator.

Every vector field acts on a 7-vector ``z = (x, w, t)`` where ``x`` is a point
of the unit sphere, ``w`` its velocity (restricted problem) or momentum
(reduced two-body problem) and ``t`` physical time.  The independent variable
is a Sundman-rescaled time ``s`` with ``dt/ds = g(x)``; ``g`` behaves like
``rho / delta_reg`` near the singular pair ``{+a, -a}`` and tends to one away
from it.

Fields are written with analytic operations only so that complex-step
differentiation gives exact directional derivatives; the propagator carries
tangent vectors through the very same Runge-Kutta stages, so the returned
variations are the derivative of the discrete flow map.

Parameter vector layout (float64):
    p[0] eps, p[1] rot, p[2] delta_reg, p[3:6] a, p[6:9] e, p[9] sigma
"""

import numpy as np
from numba import njit
from scipy.integrate._ivp import dop853_coefficients as _dop

N_STAGES = _dop.N_STAGES
RK_A = np.ascontiguousarray(_dop.A[:N_STAGES, :N_STAGES])
RK_B = np.ascontiguousarray(_dop.B)
RK_E3 = np.ascontiguousarray(_dop.E3)
RK_E5 = np.ascontiguousarray(_dop.E5)

CSTEP = 1e-30
TOL_FLOOR = 1e-2

# status codes returned by propagate()
OK = 0
MAX_STEPS = 1
COLLISION = 2
UNDERFLOW = 3
NO_EVENT = 4

# termination modes
MODE_TIME = 0
MODE_EXIT_BALL = 1
MODE_ENTER_BALL = 2
MODE_SDUR = 3


@njit(cache=True)
def _cross(u, v, out, k):
    out[k] = u[1] * v[2] - u[2] * v[1]
    out[k + 1] = u[2] * v[0] - u[0] * v[2]
    out[k + 2] = u[0] * v[1] - u[1] * v[0]


@njit(cache=True)
def _sin2(a, x):
    # |a x x|^2 equals 1 - <a, x>^2 on the sphere without the cancellation near +-a
    c0 = a[1] * x[2] - a[2] * x[1]
    c1 = a[2] * x[0] - a[0] * x[2]
    c2 = a[0] * x[1] - a[1] * x[0]
    return c0 * c0 + c1 * c1 + c2 * c2


@njit(cache=True)
def sundman_weight(x, p):
    dreg = p[2]
    q = _sin2(p[3:6], x)
    if dreg <= 0.0:
        return q * 0.0 + 1.0
    return np.sqrt(q / (q + dreg * dreg))


@njit(cache=True)
def restricted_field(z, p):
    """Rotating-frame restricted problem, Sundman-rescaled."""
    eps = p[0]
    rot = p[1]
    a = p[3:6]
    e = p[6:9]
    x = z[0:3]
    v = z[3:6]
    out = np.empty_like(z)
    q = _sin2(a, x)
    pw = 0.0 * q
    if eps != 0.0:
        pw = 1.0 / (q * np.sqrt(q))
    ev = np.empty_like(x)
    _cross(e, v, ev, 0)
    ex_dot = e[0] * x[0] + e[1] * x[1] + e[2] * x[2]
    xx = x[0] * x[0] + x[1] * x[1] + x[2] * x[2]
    vv = v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
    axx = np.empty_like(x)
    _cross(a, x, axx, 0)
    pull = np.empty_like(x)
    _cross(x, axx, pull, 0)
    F = np.empty_like(x)
    for i in range(3):
        F[i] = (-2.0 * rot * ev[i] + rot * rot * (x[i] - ex_dot * e[i])
                + eps * pw * pull[i])
    lam = -(vv + x[0] * F[0] + x[1] * F[1] + x[2] * F[2]) / xx
    g = sundman_weight(x, p)
    for i in range(3):
        out[i] = g * v[i]
        out[3 + i] = g * (F[i] + lam * x[i])
    out[6] = g
    return out


@njit(cache=True)
def reduced_field(z, p):
    """Hamilton equations of the reduced two-body Hamiltonian on T*S^2.

    Canonical field with multipliers keeping |x| = 1 and <x, y> = 0.
    """
    eps = p[0]
    a = p[3:6]
    e = p[6:9]
    sig = p[9]
    x = z[0:3]
    y = z[3:6]
    out = np.empty_like(z)
    exx = np.empty_like(x)
    axx = np.empty_like(x)
    yxe = np.empty_like(x)
    yxa = np.empty_like(x)
    _cross(e, x, exx, 0)
    _cross(a, x, axx, 0)
    _cross(y, e, yxe, 0)
    _cross(y, a, yxa, 0)
    P = y[0] * exx[0] + y[1] * exx[1] + y[2] * exx[2]
    Q = y[0] * axx[0] + y[1] * axx[1] + y[2] * axx[2]
    q = _sin2(a, x)
    R = np.sqrt(1.0 - sig * sig * Q * Q)
    den = R + 1.0
    H_Y2 = 0.5 + 0.5 * sig
    H_P = 1.0 - sig * sig * Q * Q / den
    dR = -sig * sig * Q / R
    H_Q = sig * (-2.0 * Q - sig * (2.0 * Q * P / den - Q * Q * P * dR / (den * den)))
    H_c = 0.0 * q
    if eps != 0.0:
        H_c = eps / (q * np.sqrt(q))
    # the potential gradient only matters tangentially; x x (a x x) is its
    # cancellation-free tangential form
    pull = np.empty_like(x)
    _cross(x, axx, pull, 0)
    Hy = np.empty_like(x)
    Hx = np.empty_like(x)
    for i in range(3):
        Hy[i] = 2.0 * H_Y2 * y[i] + H_P * exx[i] + H_Q * axx[i]
        Hx[i] = H_P * yxe[i] + H_Q * yxa[i] + H_c * pull[i]
    xHy = x[0] * Hy[0] + x[1] * Hy[1] + x[2] * Hy[2]
    xHx = x[0] * Hx[0] + x[1] * Hx[1] + x[2] * Hx[2]
    yHy = y[0] * Hy[0] + y[1] * Hy[1] + y[2] * Hy[2]
    g = sundman_weight(x, p)
    for i in range(3):
        out[i] = g * (Hy[i] - xHy * x[i])
        out[3 + i] = g * (-Hx[i] + xHx * x[i] - yHy * x[i] + xHy * y[i])
    out[6] = g
    return out


@njit(cache=True)
def _rk_stages(fun, p, z, V, h, with_var):
    n = z.shape[0]
    m = V.shape[1]
    K = np.zeros((N_STAGES + 1, n))
    KV = np.zeros((N_STAGES, n, m))
    for s in range(N_STAGES):
        y = z.copy()
        for j in range(s):
            a = RK_A[s, j]
            if a != 0.0:
                for i in range(n):
                    y[i] += h * a * K[j, i]
        K[s] = fun(y, p)
        if with_var:
            for col in range(m):
                yc = y.astype(np.complex128)
                for i in range(n):
                    d = V[i, col]
                    for j in range(s):
                        a = RK_A[s, j]
                        if a != 0.0:
                            d += h * a * KV[j, i, col]
                    yc[i] += 1j * CSTEP * d
                fc = fun(yc, p)
                for i in range(n):
                    KV[s, i, col] = fc[i].imag / CSTEP
    znew = z.copy()
    for s in range(N_STAGES):
        for i in range(n):
            znew[i] += h * RK_B[s] * K[s, i]
    Vnew = V.copy()
    if with_var:
        for s in range(N_STAGES):
            for i in range(n):
                for col in range(m):
                    Vnew[i, col] += h * RK_B[s] * KV[s, i, col]
    K[N_STAGES] = fun(znew, p)
    return znew, Vnew, K


@njit(cache=True)
def _err_norm(z, znew, K, h, rtol, atol):
    n = z.shape[0]
    e5 = 0.0
    e3 = 0.0
    for i in range(n):
        sc = atol + rtol * max(abs(z[i]), abs(znew[i]))
        d5 = 0.0
        d3 = 0.0
        for s in range(N_STAGES + 1):
            d5 += K[s, i] * RK_E5[s]
            d3 += K[s, i] * RK_E3[s]
        e5 += (d5 / sc) ** 2
        e3 += (d3 / sc) ** 2
    if e5 == 0.0 and e3 == 0.0:
        return 0.0
    return abs(h) * e5 / np.sqrt((e5 + 0.01 * e3) * n)


@njit(cache=True)
def _project(z, V, with_var):
    """Retract onto |x| = 1, <x, w> = 0; push variations through the retraction."""
    x = z[0:3].copy()
    w = z[3:6].copy()
    r = np.sqrt(x[0] ** 2 + x[1] ** 2 + x[2] ** 2)
    xh = x / r
    xw = xh[0] * w[0] + xh[1] * w[1] + xh[2] * w[2]
    zn = z.copy()
    for i in range(3):
        zn[i] = xh[i]
        zn[3 + i] = w[i] - xw * xh[i]
    if not with_var:
        return zn, V
    Vn = V.copy()
    m = V.shape[1]
    for col in range(m):
        dx = V[0:3, col]
        dw = V[3:6, col]
        xdx = xh[0] * dx[0] + xh[1] * dx[1] + xh[2] * dx[2]
        dxh = (dx - xdx * xh) / r
        dxw = (dw[0] * xh[0] + dw[1] * xh[1] + dw[2] * xh[2]
               + w[0] * dxh[0] + w[1] * dxh[1] + w[2] * dxh[2])
        for i in range(3):
            Vn[i, col] = dxh[i]
            Vn[3 + i, col] = dw[i] - dxw * xh[i] - xw * dxh[i]
    return zn, Vn


@njit(cache=True)
def rk_step(fun, p, z, h):
    """Single projected DOP853 step without error control (dense evaluation)."""
    V = np.zeros((z.shape[0], 1))
    znew, _, _ = _rk_stages(fun, p, z, V, h, False)
    zn, _ = _project(znew, V, False)
    return zn


@njit(cache=True)
def near_distance(z, p):
    """Geodesic distance from x to the nearer of +a, -a."""
    x = z[0:3]
    a = p[3:6]
    c = a[0] * x[0] + a[1] * x[1] + a[2] * x[2]
    cx = np.empty(3)
    _cross(a, x, cx, 0)
    sn = np.sqrt(cx[0] ** 2 + cx[1] ** 2 + cx[2] ** 2)
    return np.arctan2(sn, abs(c))


@njit(cache=True)
def _event_value(z, mode, target, cosd, t_stop):
    if mode == MODE_TIME:
        return z[6] - t_stop
    return z[0] * target[0] + z[1] * target[1] + z[2] * target[2] - cosd


@njit(cache=True)
def propagate(fun, p, z0, V0, with_var, mode, target, cosd, t_arm, t_stop,
              s_max, rtol, atol, h0, rho_min, max_steps, record):
    """Integrate in Sundman time until the termination condition of ``mode``.

    Returns (status, z, V, s, nsteps, min_rho, s_rec, z_rec, nrec).
    """
    n = z0.shape[0]
    z = z0.copy()
    V = V0.copy()
    s = 0.0
    h = h0
    min_rho = near_distance(z, p)
    nrec_max = max_steps + 2 if record else 1
    s_rec = np.zeros(nrec_max)
    z_rec = np.zeros((nrec_max, n))
    nrec = 0
    if record:
        s_rec[0] = 0.0
        z_rec[0] = z
        nrec = 1
    armed = False
    gsign = _event_value(z, mode, target, cosd, t_stop)
    if mode == MODE_TIME and gsign >= 0.0:
        return OK, z, V, s, 0, min_rho, s_rec[:nrec], z_rec[:nrec], nrec
    nsteps = 0
    while nsteps < max_steps:
        if mode == MODE_SDUR:
            if s >= s_max:
                return OK, z, V, s, nsteps, min_rho, s_rec[:nrec], z_rec[:nrec], nrec
            if s + h > s_max:
                h = s_max - s
        elif s >= s_max:
            return NO_EVENT, z, V, s, nsteps, min_rho, s_rec[:nrec], z_rec[:nrec], nrec
        if h < 1e-14:
            return UNDERFLOW, z, V, s, nsteps, min_rho, s_rec[:nrec], z_rec[:nrec], nrec
        znew, Vnew, K = _rk_stages(fun, p, z, V, h, with_var)
        # near the singular pair the relevant length scale is the distance to
        # it, so the tolerance shrinks with the Sundman weight (down to a floor)
        wl = min(sundman_weight(z[0:3], p), sundman_weight(znew[0:3], p))
        wl = max(wl, TOL_FLOOR)
        err = _err_norm(z, znew, K, h, rtol * wl, atol * wl)
        if not np.isfinite(err):
            h *= 0.2
            continue
        if err > 1.0:
            h *= max(0.2, 0.9 * err ** (-1.0 / 8.0))
            continue
        znew, Vnew = _project(znew, Vnew, with_var)
        nsteps += 1
        rho = near_distance(znew, p)
        if rho < min_rho:
            min_rho = rho
        if rho < rho_min:
            return COLLISION, znew, Vnew, s + h, nsteps, min_rho, s_rec[:nrec], z_rec[:nrec], nrec
        gnew = _event_value(znew, mode, target, cosd, t_stop)
        hit = False
        if mode == MODE_TIME:
            hit = gnew >= 0.0
        elif mode == MODE_EXIT_BALL:
            hit = armed and gnew <= 0.0
            if gnew > 0.0:
                armed = True
        elif mode == MODE_ENTER_BALL:
            hit = armed and gnew >= 0.0
            if gnew < 0.0 and znew[6] >= t_arm:
                armed = True
        if hit:
            # Illinois regula falsi on the step length
            lo = 0.0
            hi = h
            glo = _event_value(z, mode, target, cosd, t_stop)
            ghi = gnew
            side = 0
            hs = h
            for _ in range(60):
                hs = hi - ghi * (hi - lo) / (ghi - glo)
                if hs <= lo or hs >= hi:
                    hs = 0.5 * (lo + hi)
                zt = rk_step(fun, p, z, hs)
                gt = _event_value(zt, mode, target, cosd, t_stop)
                if gt == 0.0 or abs(hi - lo) < 1e-16 * max(1.0, h):
                    break
                if (gt > 0.0) == (ghi > 0.0):
                    hi = hs
                    ghi = gt
                    if side == 1:
                        glo *= 0.5
                    side = 1
                else:
                    lo = hs
                    glo = gt
                    if side == -1:
                        ghi *= 0.5
                    side = -1
                if abs(gt) < 1e-16:
                    break
            ze, Ve, _ = _rk_stages(fun, p, z, V, hs, with_var)
            ze, Ve = _project(ze, Ve, with_var)
            if with_var:
                fe = fun(ze, p)
                grad = np.zeros(n)
                if mode == MODE_TIME:
                    grad[6] = 1.0
                else:
                    grad[0] = target[0]
                    grad[1] = target[1]
                    grad[2] = target[2]
                gf = 0.0
                for i in range(n):
                    gf += grad[i] * fe[i]
                for col in range(V.shape[1]):
                    gv = 0.0
                    for i in range(n):
                        gv += grad[i] * Ve[i, col]
                    for i in range(n):
                        Ve[i, col] -= fe[i] * gv / gf
            rho = near_distance(ze, p)
            if rho < min_rho:
                min_rho = rho
            if record:
                s_rec[nrec] = s + hs
                z_rec[nrec] = ze
                nrec += 1
            return OK, ze, Ve, s + hs, nsteps, min_rho, s_rec[:nrec], z_rec[:nrec], nrec
        s += h
        z = znew
        V = Vnew
        if record:
            s_rec[nrec] = s
            z_rec[nrec] = z
            nrec += 1
        fac = 10.0 if err == 0.0 else min(10.0, 0.9 * err ** (-1.0 / 8.0))
        h *= fac
    return MAX_STEPS, z, V, s, nsteps, min_rho, s_rec[:nrec], z_rec[:nrec], nrec
