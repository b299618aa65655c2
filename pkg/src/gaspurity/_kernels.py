"""Compiled inner loops shared by the plant, estimator and scenario modules.

Everything here works on flat float64 arrays so numba can compile it. The
public, dataclass-based API lives in :mod:`plant_model` and :mod:`estimator`;
those modules pack their parameters with the index constants below.
"""

import math

import numpy as np
from numba import njit

PA_PER_BAR = 1.0e5
CONV_REF_BAR = 0.01  # convective crossover equals diffusive crossover at this dp

# plant parameter vector
P_AC = 0
P_DM = 1
P_T = 2
P_NSEG = 3
P_LP = 4
P_RPIPE = 5
P_ETA = 6
P_VT = 7
P_AREA = 8
P_RHO = 9
P_FARADAY = 10
P_RGAS = 11
P_ZH2 = 12
P_ZO2 = 13
P_DH2 = 14
P_SH2 = 15
P_SO2 = 16
N_PLANT_PRM = 17

# plant input vector
U_I = 0
U_DP = 1
U_MLYE = 2
U_NOUT = 3
U_MIN = 4
N_PLANT_U = 5

# estimator parameter vector
E_RGAS = 0
E_T = 1
E_VT = 2
E_AREA = 3
E_RHO = 4
E_SO2 = 5
E_MIN = 6
N_EST_PRM = 7

# rosenbrock status codes
OK = 0
STEP_UNDERFLOW = 1
NONFINITE = 2

_D = 1.0 / (2.0 + math.sqrt(2.0))
_E32 = 6.0 + math.sqrt(2.0)


@njit(cache=True)
def production(current_density, area, z, faraday):
    return current_density * area / (z * faraday)


@njit(cache=True)
def diffusion(p_bar, rho, solubility, diffusivity, area, thickness):
    return rho * p_bar * solubility * diffusivity * area / thickness


@njit(cache=True)
def convection(n_diff, dp_bar):
    return n_diff * dp_bar / CONV_REF_BAR


@njit(cache=True)
def pipe_conductance(prm):
    # mol / (s Pa^2); each of the n segments has length l_p / n
    r = prm[P_RPIPE]
    return prm[P_NSEG] * math.pi * r ** 4 / (
        16.0 * prm[P_ETA] * prm[P_RGAS] * prm[P_T] * prm[P_LP])


@njit(cache=True)
def segment_volume(prm):
    return math.pi * prm[P_RPIPE] ** 2 * prm[P_LP] / prm[P_NSEG]


@njit(cache=True)
def stack_h2(p1_bar, dp_bar, prm):
    nd = diffusion(p1_bar, prm[P_RHO], prm[P_SH2], prm[P_DH2], prm[P_AC], prm[P_DM])
    return nd + convection(nd, dp_bar)


@njit(cache=True)
def _flows(y, u, prm, q):
    n = int(prm[P_NSEG])
    c = pipe_conductance(prm)
    for i in range(n):
        q[i] = c * (y[i] - y[i + 1]) * (y[i] + y[i + 1])


@njit(cache=True)
def plant_rhs(y, u, prm, dy):
    """Time derivative of the full plant state.

    Layout of ``y``: pressures [Pa] for compartments 0..n (n = separator),
    then x_H2 for the same compartments, then x_O2, then the separator level.
    Two trailing entries, if present, integrate the stack gas inflow and the
    dissolved-O2 sink [mol] for balance checks.
    Inter-segment transport is upwind, which reduces to plain forward
    convection for the usual positive pipe flows.
    """
    n = int(prm[P_NSEG])
    nc = n + 1
    rt = prm[P_RGAS] * prm[P_T]
    q = np.empty(n)
    _flows(y, u, prm, q)

    o2_stack = production(u[U_I], prm[P_AC], prm[P_ZO2], prm[P_FARADAY])
    h2_stack = max(0.0, stack_h2(y[0] / PA_PER_BAR, u[U_DP], prm))
    n_dis = u[U_MLYE] * prm[P_SO2] * y[n] / PA_PER_BAR

    vseg = segment_volume(prm)
    level = y[3 * nc]
    vdot_sep = -(u[U_MIN] - u[U_MLYE]) / prm[P_RHO]
    v_sep = prm[P_VT] - level * prm[P_AREA]

    for i in range(nc):
        in_h = 0.0
        in_o = 0.0
        out = 0.0
        if i == 0:
            in_h += h2_stack
            in_o += o2_stack
        else:
            qu = q[i - 1]
            if qu > 0.0:
                in_h += qu * y[nc + i - 1]
                in_o += qu * y[2 * nc + i - 1]
            else:
                out -= qu
        if i < n:
            qd = q[i]
            if qd > 0.0:
                out += qd
            else:
                in_h -= qd * y[nc + i + 1]
                in_o -= qd * y[2 * nc + i + 1]
            vol = vseg
            vdot = 0.0
        else:
            in_o -= n_dis
            out += u[U_NOUT]
            vol = v_sep
            vdot = vdot_sep
        p = y[i]
        dy[i] = ((in_h + in_o - out) * rt - p * vdot) / vol
        xd = rt * (in_h * y[2 * nc + i] - in_o * y[nc + i]) / (p * vol)
        dy[nc + i] = xd
        dy[2 * nc + i] = -xd
    dy[3 * nc] = (u[U_MIN] - u[U_MLYE]) / (prm[P_RHO] * prm[P_AREA])
    if y.shape[0] > 3 * nc + 1:
        # optional accumulators: stack gas production and dissolved-O2 loss
        dy[3 * nc + 1] = h2_stack + o2_stack
        dy[3 * nc + 2] = n_dis


@njit(cache=True)
def plant_jac(y, u, prm, jac):
    """Analytic Jacobian of :func:`plant_rhs` with respect to the state."""
    n = int(prm[P_NSEG])
    nc = n + 1
    m = 3 * nc + 1
    rt = prm[P_RGAS] * prm[P_T]
    c = pipe_conductance(prm)
    q = np.empty(n)
    _flows(y, u, prm, q)
    jac[:, :] = 0.0

    o2_stack = production(u[U_I], prm[P_AC], prm[P_ZO2], prm[P_FARADAY])
    h2_raw = stack_h2(y[0] / PA_PER_BAR, u[U_DP], prm)
    h2_stack = max(0.0, h2_raw)
    dh2_dp0 = 0.0
    if h2_raw > 0.0:
        dh2_dp0 = stack_h2(1.0, u[U_DP], prm) / PA_PER_BAR
    n_dis = u[U_MLYE] * prm[P_SO2] * y[n] / PA_PER_BAR
    dndis_dp = u[U_MLYE] * prm[P_SO2] / PA_PER_BAR

    vseg = segment_volume(prm)
    level = y[3 * nc]
    vdot_sep = -(u[U_MIN] - u[U_MLYE]) / prm[P_RHO]
    v_sep = prm[P_VT] - level * prm[P_AREA]

    d_in_h = np.empty(m)
    d_in_o = np.empty(m)
    d_net = np.empty(m)
    for i in range(nc):
        d_in_h[:] = 0.0
        d_in_o[:] = 0.0
        d_net[:] = 0.0
        in_h = 0.0
        in_o = 0.0
        out = 0.0
        if i == 0:
            in_h += h2_stack
            in_o += o2_stack
            d_in_h[0] += dh2_dp0
        else:
            qu = q[i - 1]
            dqu_a = 2.0 * c * y[i - 1]   # d q_{i-1} / d p_{i-1}
            dqu_b = -2.0 * c * y[i]      # d q_{i-1} / d p_i
            if qu > 0.0:
                xh_u = y[nc + i - 1]
                xo_u = y[2 * nc + i - 1]
                in_h += qu * xh_u
                in_o += qu * xo_u
                d_in_h[i - 1] += dqu_a * xh_u
                d_in_h[i] += dqu_b * xh_u
                d_in_h[nc + i - 1] += qu
                d_in_o[i - 1] += dqu_a * xo_u
                d_in_o[i] += dqu_b * xo_u
                d_in_o[2 * nc + i - 1] += qu
            else:
                out -= qu
                d_net[i - 1] += dqu_a
                d_net[i] += dqu_b
        if i < n:
            qd = q[i]
            dqd_a = 2.0 * c * y[i]
            dqd_b = -2.0 * c * y[i + 1]
            if qd > 0.0:
                out += qd
                d_net[i] -= dqd_a
                d_net[i + 1] -= dqd_b
            else:
                xh_d = y[nc + i + 1]
                xo_d = y[2 * nc + i + 1]
                in_h -= qd * xh_d
                in_o -= qd * xo_d
                d_in_h[i] -= dqd_a * xh_d
                d_in_h[i + 1] -= dqd_b * xh_d
                d_in_h[nc + i + 1] -= qd
                d_in_o[i] -= dqd_a * xo_d
                d_in_o[i + 1] -= dqd_b * xo_d
                d_in_o[2 * nc + i + 1] -= qd
            vol = vseg
            vdot = 0.0
            dvol_dl = 0.0
        else:
            in_o -= n_dis
            d_in_o[n] -= dndis_dp
            out += u[U_NOUT]
            vol = v_sep
            vdot = vdot_sep
            dvol_dl = -prm[P_AREA]
        for k in range(m):
            d_net[k] += d_in_h[k] + d_in_o[k]

        p = y[i]
        xh = y[nc + i]
        xo = y[2 * nc + i]
        pdot = ((in_h + in_o - out) * rt - p * vdot) / vol
        xdot = rt * (in_h * xo - in_o * xh) / (p * vol)
        a = rt / (p * vol)
        for k in range(m):
            jac[i, k] = rt * d_net[k] / vol
            dx = a * (xo * d_in_h[k] - xh * d_in_o[k])
            jac[nc + i, k] = dx
        jac[i, i] -= vdot / vol
        jac[nc + i, nc + i] -= a * in_o
        jac[nc + i, 2 * nc + i] += a * in_h
        jac[nc + i, i] -= xdot / p
        if dvol_dl != 0.0:
            jac[i, 3 * nc] -= pdot / vol * dvol_dl
            jac[nc + i, 3 * nc] -= xdot / vol * dvol_dl
        for k in range(m):
            jac[2 * nc + i, k] = -jac[nc + i, k]
    if y.shape[0] > m:
        jac[m, 0] = dh2_dp0
        jac[m + 1, n] = dndis_dp


@njit(cache=True)
def lu_factor(a, piv):
    """In-place LU with partial pivoting. Returns False if singular."""
    m = a.shape[0]
    for k in range(m):
        best = k
        big = abs(a[k, k])
        for i in range(k + 1, m):
            v = abs(a[i, k])
            if v > big:
                big = v
                best = i
        piv[k] = best
        if big == 0.0:
            return False
        if best != k:
            for j in range(m):
                tmp = a[k, j]
                a[k, j] = a[best, j]
                a[best, j] = tmp
        inv = 1.0 / a[k, k]
        for i in range(k + 1, m):
            a[i, k] *= inv
            f = a[i, k]
            if f != 0.0:
                for j in range(k + 1, m):
                    a[i, j] -= f * a[k, j]
    return True


@njit(cache=True)
def lu_solve(lu, piv, b):
    m = lu.shape[0]
    for k in range(m):
        p = piv[k]
        if p != k:
            tmp = b[k]
            b[k] = b[p]
            b[p] = tmp
    for i in range(m):
        s = b[i]
        for j in range(i):
            s -= lu[i, j] * b[j]
        b[i] = s
    for i in range(m - 1, -1, -1):
        s = b[i]
        for j in range(i + 1, m):
            s -= lu[i, j] * b[j]
        b[i] = s / lu[i, i]


@njit(cache=True)
def plant_advance(y, u, prm, span, h_init, h_max, rtol, atol, stats):
    """Advance ``y`` in place over ``span`` seconds with constant inputs.

    Linearly implicit Rosenbrock 2(3) pair (the L-stable scheme behind
    MATLAB's ode23s) with the analytic Jacobian and per-step error control.
    ``stats`` receives [accepted steps, rejected steps]. Returns
    (status, last accepted step size, time reached).
    """
    m = y.shape[0]
    jac = np.empty((m, m))
    w = np.empty((m, m))
    piv = np.empty(m, dtype=np.int64)
    f0 = np.empty(m)
    f1 = np.empty(m)
    f2 = np.empty(m)
    k1 = np.empty(m)
    k2 = np.empty(m)
    k3 = np.empty(m)
    ytmp = np.empty(m)
    ynew = np.empty(m)

    t = 0.0
    h = min(h_init, h_max, span)
    h_min = 1e-14 * span
    last_ok = h
    while t < span:
        remaining = span - t
        if h >= remaining or remaining - h < 1e-9 * span:
            h = remaining
        plant_rhs(y, u, prm, f0)
        plant_jac(y, u, prm, jac)
        for i in range(m):
            for j in range(m):
                w[i, j] = -h * _D * jac[i, j]
            w[i, i] += 1.0
        if not lu_factor(w, piv):
            return STEP_UNDERFLOW, h, t
        for i in range(m):
            k1[i] = f0[i]
        lu_solve(w, piv, k1)
        for i in range(m):
            ytmp[i] = y[i] + 0.5 * h * k1[i]
        plant_rhs(ytmp, u, prm, f1)
        for i in range(m):
            k2[i] = f1[i] - k1[i]
        lu_solve(w, piv, k2)
        for i in range(m):
            k2[i] += k1[i]
            ynew[i] = y[i] + h * k2[i]
        plant_rhs(ynew, u, prm, f2)
        for i in range(m):
            k3[i] = f2[i] - _E32 * (k2[i] - f1[i]) - 2.0 * (k1[i] - f0[i])
        lu_solve(w, piv, k3)
        err = 0.0
        finite = True
        for i in range(m):
            e = h / 6.0 * (k1[i] - 2.0 * k2[i] + k3[i])
            if not math.isfinite(ynew[i]) or not math.isfinite(e):
                finite = False
                break
            scale = atol[i] + rtol * max(abs(y[i]), abs(ynew[i]))
            r = abs(e) / scale
            if r > err:
                err = r
        if finite and err <= 1.0:
            t += h
            last_ok = h
            for i in range(m):
                y[i] = ynew[i]
            stats[0] += 1
        else:
            stats[1] += 1
        if not finite:
            h *= 0.25
        elif err == 0.0:
            h *= 5.0
        else:
            h *= min(5.0, max(0.2, 0.8 * err ** (-1.0 / 3.0)))
        if h > h_max:
            h = h_max
        if h < h_min and t < span:
            if not finite:
                return NONFINITE, h, t
            return STEP_UNDERFLOW, h, t
    return OK, last_ok, t


# ---------------------------------------------------------------------------
# simplified separator model used by the estimator
# state: [p (bar), l (m), x_H2, x_O2, n_H2_in (mol/s), n_O2_in (mol/s)]
# input: [n_out_gas (mol/s), m_lye (kg/s)]


@njit(cache=True)
def sep_rhs(x, u, e, dx):
    rt = e[E_RGAS] * e[E_T]
    p = x[0]
    vol = e[E_VT] - x[1] * e[E_AREA]
    vdot = -(e[E_MIN] - u[1]) / e[E_RHO]
    n_dis = u[1] * e[E_SO2] * p
    net = x[4] + x[5] - n_dis - u[0]
    dx[0] = (net * rt / PA_PER_BAR - p * vdot) / vol
    dx[1] = (e[E_MIN] - u[1]) / (e[E_RHO] * e[E_AREA])
    a = rt / (p * PA_PER_BAR * vol)
    xd = a * (x[4] * x[3] - (x[5] - n_dis) * x[2])
    dx[2] = xd
    dx[3] = -xd
    dx[4] = 0.0
    dx[5] = 0.0


@njit(cache=True)
def sep_jac(x, u, e, jx, ju):
    """Continuous-time Jacobians of :func:`sep_rhs` (6x6 state, 6x2 input)."""
    rt = e[E_RGAS] * e[E_T]
    p = x[0]
    area = e[E_AREA]
    vol = e[E_VT] - x[1] * area
    vdot = -(e[E_MIN] - u[1]) / e[E_RHO]
    s = e[E_SO2]
    n_dis = u[1] * s * p
    net = x[4] + x[5] - n_dis - u[0]
    pdot = (net * rt / PA_PER_BAR - p * vdot) / vol
    a = rt / (p * PA_PER_BAR * vol)
    xd = a * (x[4] * x[3] - (x[5] - n_dis) * x[2])
    jx[:, :] = 0.0
    ju[:, :] = 0.0
    rtv = rt / (PA_PER_BAR * vol)

    jx[0, 0] = (-rt / PA_PER_BAR * u[1] * s - vdot) / vol
    jx[0, 1] = area * pdot / vol
    jx[0, 4] = rtv
    jx[0, 5] = rtv
    jx[2, 0] = -xd / p + a * u[1] * s * x[2]
    jx[2, 1] = area * xd / vol
    jx[2, 2] = -a * (x[5] - n_dis)
    jx[2, 3] = a * x[4]
    jx[2, 4] = a * x[3]
    jx[2, 5] = -a * x[2]
    for k in range(6):
        jx[3, k] = -jx[2, k]

    ju[0, 0] = -rtv
    ju[0, 1] = (-rt / PA_PER_BAR * s * p - p / e[E_RHO]) / vol
    ju[1, 1] = -1.0 / (e[E_RHO] * area)
    ju[2, 1] = a * s * p * x[2]
    ju[3, 1] = -ju[2, 1]


@njit(cache=True)
def sep_transition(x, u, e, ts, out):
    sep_rhs(x, u, e, out)
    for i in range(6):
        out[i] = x[i] + ts * out[i]


@njit(cache=True)
def sep_transition_jac(x, u, e, ts, fx, gu):
    sep_jac(x, u, e, fx, gu)
    for i in range(6):
        for j in range(6):
            fx[i, j] *= ts
        fx[i, i] += 1.0
        for j in range(2):
            gu[i, j] *= ts


@njit(cache=True)
def ekf_predict(x, p, u, e, ts, q):
    """Propagate state and covariance in place. Returns False on bad state."""
    if not (x[0] > 0.0) or not (e[E_VT] - x[1] * e[E_AREA] > 0.0):
        return False
    fx = np.empty((6, 6))
    gu = np.empty((6, 2))
    sep_transition_jac(x, u, e, ts, fx, gu)
    xn = np.empty(6)
    sep_transition(x, u, e, ts, xn)
    pn = fx @ p @ fx.T + q
    for i in range(6):
        x[i] = xn[i]
        for j in range(6):
            p[i, j] = 0.5 * (pn[i, j] + pn[j, i])
    return True


@njit(cache=True)
def ekf_update(x, p, y, r):
    """Measurement update for the selector H = [I4 0]. Returns False if the
    innovation covariance cannot be factorised."""
    s = p[:4, :4] + r
    piv = np.empty(4, dtype=np.int64)
    lu = s.copy()
    if not lu_factor(lu, piv):
        return False
    # K^T = S^-1 H P (S is symmetric)
    kt = np.empty((4, 6))
    col = np.empty(4)
    for j in range(6):
        for i in range(4):
            col[i] = p[i, j]
        lu_solve(lu, piv, col)
        for i in range(4):
            kt[i, j] = col[i]
    innov = np.empty(4)
    for i in range(4):
        innov[i] = y[i] - x[i]
    for j in range(6):
        acc = 0.0
        for i in range(4):
            acc += kt[i, j] * innov[i]
        x[j] += acc
    # P <- (I - K H) P ; (K H P)_{ij} = sum_k K_{ik} P_{kj}, k < 4
    pn = p.copy()
    for i in range(6):
        for j in range(6):
            acc = 0.0
            for k in range(4):
                acc += kt[k, i] * p[k, j]
            pn[i, j] = p[i, j] - acc
    for i in range(6):
        for j in range(6):
            p[i, j] = 0.5 * (pn[i, j] + pn[j, i])
    xh = min(max(x[2], 0.0), 1.0)
    xo = min(max(x[3], 0.0), 1.0)
    tot = xh + xo
    if tot > 0.0:
        x[2] = xh / tot
        x[3] = xo / tot
    return True
