# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled batch detector kernel; same contract as ``_kernels_py.run_block``."""

import numpy as np
from libc.math cimport exp, log, log1p, INFINITY, isfinite

cdef double HALF_LOG_2PI = 0.9189385332046727

RULE_SR = 0
RULE_CUSUM = 1
RULE_LR = 2

cdef inline double softplus(double t) nogil:
    if t > 0:
        return t + log1p(exp(-t))
    return log1p(exp(t))


cdef void _run(
    double[:, ::1] x, double[:, :, ::1] xhat, long long[::1] age, long long[::1] steps,
    double[:, ::1] logR, double[:, ::1] logS, unsigned char[::1] active, double[::1] stop_stat,
    double[:, :, ::1] noise, double[:, :, ::1] obs, bint use_obs, long long[::1] omega,
    double[:, :, ::1] sF, double[:, ::1] sc, double[:, :, ::1] sL,
    double[:, :, ::1] sH, double[:, ::1] sd, double[:, :, ::1] sM,
    double[:, :, ::1] nF, double[:, ::1] nc, double[:, :, ::1] nH, double[:, ::1] nd,
    double[:, :, :, ::1] tA, double[:, :, :, ::1] tLinv, double[:, ::1] thalf, long long[::1] tlen,
    double[::1] logw, double neg_log_q, double b, int rule, long long max_steps,
    double[:, :, ::1] g_out, bint want_g, double[:, ::1] path_out, bint want_path,
    int L, double[::1] xt, double[::1] y, double[::1] e, double[::1] a, double[::1] ll,
    double[::1] xn,
) nogil:
    cdef Py_ssize_t n = x.shape[0], p = x.shape[1], r = sH.shape[1], m1 = nF.shape[0]
    cdef Py_ssize_t i, t, j, u, v, reg, ti
    cdef long long k
    cdef double acc, g, lr, vmax, ssum, stat
    for i in range(n):
        for t in range(L):
            if active[i] == 0 or steps[i] >= max_steps:
                break
            k = steps[i] + 1
            if use_obs:
                for u in range(r):
                    y[u] = obs[i, t, u]
            else:
                reg = 1 if k >= omega[i] else 0
                for u in range(p):
                    acc = sc[reg, u]
                    for v in range(p):
                        acc = acc + sF[reg, u, v] * x[i, v]
                    for v in range(p):
                        acc = acc + sL[reg, u, v] * noise[i, t, v]
                    xt[u] = acc
                for u in range(p):
                    x[i, u] = xt[u]
                for u in range(r):
                    acc = sd[reg, u]
                    for v in range(p):
                        acc = acc + sH[reg, u, v] * x[i, v]
                    for v in range(r):
                        acc = acc + sM[reg, u, v] * noise[i, t, p + v]
                    y[u] = acc
            for j in range(m1):
                ti = age[i] if age[i] < tlen[j] - 1 else tlen[j] - 1
                for u in range(r):
                    acc = y[u] - nd[j, u]
                    for v in range(p):
                        acc = acc - nH[j, u, v] * xhat[i, j, v]
                    e[u] = acc
                ssum = 0.0
                for u in range(r):
                    acc = 0.0
                    for v in range(u + 1):
                        acc = acc + tLinv[j, ti, u, v] * e[v]
                    ssum = ssum + acc * acc
                ll[j] = -0.5 * ssum - thalf[j, ti] - r * HALF_LOG_2PI
                for u in range(p):
                    acc = nc[j, u]
                    for v in range(p):
                        acc = acc + nF[j, u, v] * xhat[i, j, v]
                    for v in range(r):
                        acc = acc + tA[j, ti, u, v] * e[v]
                    xn[u] = acc
                for u in range(p):
                    xhat[i, j, u] = xn[u]
            vmax = -INFINITY
            for j in range(m1 - 1):
                g = ll[j + 1] - ll[0]
                logS[i, j] += g
                lr = logR[i, j]
                if rule == 0:
                    lr = g + neg_log_q + softplus(lr)
                elif rule == 1:
                    lr = g + (lr if lr > 0 else 0.0)
                else:
                    lr = g + lr
                logR[i, j] = lr
                if want_g:
                    g_out[i, t, j] = g
                if logw[j] + lr > vmax:
                    vmax = logw[j] + lr
            if isfinite(vmax):
                ssum = 0.0
                for j in range(m1 - 1):
                    ssum = ssum + exp(logw[j] + logR[i, j] - vmax)
                stat = vmax + log(ssum)
            else:
                stat = vmax
            if want_path:
                path_out[i, t] = stat
            age[i] += 1
            steps[i] = k
            if stat >= b:
                active[i] = 0
                stop_stat[i] = stat
                break


def run_block(
    x, xhat, age, steps, logR, logS, active, stop_stat,
    noise, obs, omega,
    sF, sc, sL, sH, sd, sM,
    nF, nc, nH, nd, tA, tLinv, thalf, tlen,
    logw, double neg_log_q, double b, int rule, long long max_steps,
    g_out, path_out,
):
    cdef bint use_obs = obs is not None
    cdef bint want_g = g_out is not None
    cdef bint want_path = path_out is not None
    cdef int L = obs.shape[1] if use_obs else noise.shape[1]
    dummy3 = np.zeros((1, 1, 1))
    dummy2 = np.zeros((1, 1))
    cdef Py_ssize_t p = x.shape[1], r = sH.shape[1], m1 = nF.shape[0]
    cdef double[::1] xt = np.empty(p), y = np.empty(r), e = np.empty(r), a = np.empty(r)
    cdef double[::1] ll = np.empty(m1), xn = np.empty(p)
    cdef double[:, :, ::1] noise_v = dummy3 if use_obs else noise
    cdef double[:, :, ::1] obs_v = obs if use_obs else dummy3
    cdef double[:, :, ::1] g_v = g_out if want_g else dummy3
    cdef double[:, ::1] path_v = path_out if want_path else dummy2
    cdef double[:, ::1] x_v = x
    cdef double[:, :, ::1] xhat_v = xhat
    cdef long long[::1] age_v = age, steps_v = steps, omega_v = omega, tlen_v = tlen
    cdef double[:, ::1] logR_v = logR, logS_v = logS
    cdef unsigned char[::1] active_v = active
    cdef double[::1] stop_v = stop_stat, logw_v = logw
    cdef double[:, :, ::1] sF_v = sF, sL_v = sL, sH_v = sH, sM_v = sM, nF_v = nF, nH_v = nH
    cdef double[:, ::1] sc_v = sc, sd_v = sd, nc_v = nc, nd_v = nd, thalf_v = thalf
    cdef double[:, :, :, ::1] tA_v = tA, tLinv_v = tLinv
    with nogil:
        _run(x_v, xhat_v, age_v, steps_v, logR_v, logS_v, active_v, stop_v,
             noise_v, obs_v, use_obs, omega_v,
             sF_v, sc_v, sL_v, sH_v, sd_v, sM_v,
             nF_v, nc_v, nH_v, nd_v, tA_v, tLinv_v, thalf_v, tlen_v,
             logw_v, neg_log_q, b, rule, max_steps,
             g_v, want_g, path_v, want_path,
             L, xt, y, e, a, ll, xn)
