"""Pure numpy implementation of the batch detector kernel.

Vectorised across replications; loops over time only.  Must stay
semantically identical to ``_kernels.pyx``.
"""

from __future__ import annotations

import math

import numpy as np

RULE_SR = 0
RULE_CUSUM = 1
RULE_LR = 2

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _softplus(t: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.where(t > 0, t + np.log1p(np.exp(-np.abs(t))), np.log1p(np.exp(np.minimum(t, 0.0))))
    return out


def run_block(
    x, xhat, age, steps, logR, logS, active, stop_stat,
    noise, obs, omega,
    sF, sc, sL, sH, sd, sM,
    nF, nc, nH, nd, tA, tLinv, thalf, tlen,
    logw, neg_log_q, b, rule, max_steps,
    g_out, path_out,
):
    """Advance every active replication by up to ``L`` steps.

    State arrays are updated in place.  A replication leaves ``active`` when
    its statistic reaches ``b``; it is left active (censored) when
    ``steps`` hits ``max_steps``.
    """
    use_obs = obs is not None
    L = obs.shape[1] if use_obs else noise.shape[1]
    p = x.shape[1]
    r = sH.shape[1]
    m1 = nF.shape[0]
    n = x.shape[0]
    rows = np.arange(n)
    node_ix = np.arange(m1)[None, :]
    for t in range(L):
        live = (active != 0) & (steps < max_steps)
        if not live.any():
            break
        idx = rows[live]
        k = steps[idx] + 1
        if use_obs:
            y = obs[idx, t]
        else:
            z = noise[idx, t]
            reg = (k >= omega[idx]).astype(np.intp)
            xi = np.einsum("nij,nj->ni", sF[reg], x[idx]) + sc[reg] + np.einsum("nij,nj->ni", sL[reg], z[:, :p])
            x[idx] = xi
            y = np.einsum("nij,nj->ni", sH[reg], xi) + sd[reg] + np.einsum("nij,nj->ni", sM[reg], z[:, p:])
        ti = np.minimum(age[idx][:, None], tlen[None, :] - 1)  # (n, m1)
        xh = xhat[idx]  # (n, m1, p)
        e = y[:, None, :] - np.einsum("mrp,nmp->nmr", nH, xh) - nd[None]
        Linv = tLinv[node_ix, ti]  # (n, m1, r, r)
        a = np.einsum("nmij,nmj->nmi", Linv, e)
        ll = -0.5 * (a * a).sum(axis=2) - thalf[node_ix, ti] - r * _HALF_LOG_2PI
        A = tA[node_ix, ti]  # (n, m1, p, r)
        xhat[idx] = np.einsum("mij,nmj->nmi", nF, xh) + nc[None] + np.einsum("nmij,nmj->nmi", A, e)
        g = ll[:, 1:] - ll[:, :1]
        logS[idx] += g
        lr = logR[idx]
        if rule == RULE_SR:
            lr = g + neg_log_q + _softplus(lr)
        elif rule == RULE_CUSUM:
            lr = g + np.maximum(lr, 0.0)
        else:
            lr = g + lr
        logR[idx] = lr
        v = logw[None, :] + lr
        vmax = v.max(axis=1)
        safe = np.where(np.isfinite(vmax), vmax, 0.0)
        stat = safe + np.log(np.exp(v - safe[:, None]).sum(axis=1))
        if g_out is not None:
            g_out[idx, t] = g
        if path_out is not None:
            path_out[idx, t] = stat
        age[idx] += 1
        steps[idx] = k
        hit = stat >= b
        if hit.any():
            h = idx[hit]
            active[h] = 0
            stop_stat[h] = stat[hit]
