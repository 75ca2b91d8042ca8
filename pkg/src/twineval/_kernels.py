"""Numba kernels: exact transportation simplex, metric sweeps, samplers.

The pairwise-metric fixed point issues |S|x|S'|x|A| small optimal-transport
solves per sweep, so the inner solver has to be compiled and warm-startable:
the distributions of each (state, state', action) cell never change across
sweeps, only the ground cost does, so each cell keeps its last optimal basis
and usually re-certifies optimality in one pricing pass.

All kernels are pure functions of their inputs (the per-cell basis buffers
are owned by the caller), so parallel sweeps are bitwise deterministic.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

# ---------------------------------------------------------------------------
# SplitMix64 counter RNG (twin of twineval.rng.splitmix64_next)
# ---------------------------------------------------------------------------

_U64_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_U64_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_U64_MIX2 = np.uint64(0x94D049BB133111EB)
_INV_2_53 = 1.0 / 9007199254740992.0


@njit(inline="always", cache=True)
def _sm64_next(state):
    state = state + _U64_GOLDEN
    z = state
    z = (z ^ (z >> np.uint64(30))) * _U64_MIX1
    z = (z ^ (z >> np.uint64(27))) * _U64_MIX2
    z = z ^ (z >> np.uint64(31))
    u = np.float64(z >> np.uint64(11)) * _INV_2_53
    return state, u


@njit(inline="always", cache=True)
def _pick(cdf, u, last):
    """Smallest index with cdf > u, clamped to the last support index."""
    lo = 0
    hi = cdf.shape[0]
    while lo < hi:
        mid = (lo + hi) >> 1
        if cdf[mid] > u:
            hi = mid
        else:
            lo = mid + 1
    if lo > last:
        return last
    return lo


# ---------------------------------------------------------------------------
# Transportation simplex
# ---------------------------------------------------------------------------


@njit(cache=True)
def _transport_simplex(aw, bw, C, m, n, bi, bj, bf, warm, eps_opt,
                       head, enext, eto, earc, pot, visited, stk,
                       par_node, par_arc, cyc, max_pivots):
    """Exact min-cost transport on an m-by-n dense problem.

    aw/bw are balanced supplies/demands (only the first m/n entries are
    read); bi/bj/bf hold the m+n-1 basic cells and flows, reused verbatim
    when ``warm`` (flows depend only on the margins, which are unchanged).
    Node numbering: rows 0..m-1, columns m..m+n-1.  Entering arcs are
    chosen by most-negative reduced cost, switching to Bland's smallest
    index rule after a run of degenerate pivots; leaving arcs break flow
    ties by smallest cell index.  Returns the optimal objective, or NaN if
    the pivot cap is hit.
    """
    nb = m + n - 1
    nodes = m + n
    if not warm:
        i = 0
        j = 0
        ra = aw[0]
        rb = bw[0]
        for k in range(nb):
            bi[k] = i
            bj[k] = j
            x = ra if ra < rb else rb
            if x < 0.0:
                x = 0.0
            bf[k] = x
            ra -= x
            rb -= x
            if k == nb - 1:
                break
            if ra <= rb:
                if i < m - 1:
                    i += 1
                    ra = aw[i]
                else:
                    j += 1
                    rb = bw[j]
            else:
                if j < n - 1:
                    j += 1
                    rb = bw[j]
                else:
                    i += 1
                    ra = aw[i]

    bland = False
    degen_run = 0
    pivots = 0
    while True:
        # adjacency of the basis tree
        for x in range(nodes):
            head[x] = -1
        for k in range(nb):
            u_node = bi[k]
            v_node = m + bj[k]
            e = 2 * k
            eto[e] = v_node
            earc[e] = k
            enext[e] = head[u_node]
            head[u_node] = e
            e = 2 * k + 1
            eto[e] = u_node
            earc[e] = k
            enext[e] = head[v_node]
            head[v_node] = e

        # dual potentials: pot[row i] + pot[col m+j] = C[i, j] on the tree
        for x in range(nodes):
            visited[x] = 0
        pot[0] = 0.0
        visited[0] = 1
        stk[0] = 0
        top = 1
        while top > 0:
            top -= 1
            x = stk[top]
            e = head[x]
            while e != -1:
                y = eto[e]
                if visited[y] == 0:
                    k = earc[e]
                    visited[y] = 1
                    pot[y] = C[bi[k], bj[k]] - pot[x]
                    stk[top] = y
                    top += 1
                e = enext[e]

        # pricing
        ei = -1
        ej = -1
        if bland:
            found = False
            for i in range(m):
                ui = pot[i]
                for j in range(n):
                    if C[i, j] - ui - pot[m + j] < -eps_opt:
                        ei = i
                        ej = j
                        found = True
                        break
                if found:
                    break
        else:
            best = -eps_opt
            for i in range(m):
                ui = pot[i]
                for j in range(n):
                    r = C[i, j] - ui - pot[m + j]
                    if r < best:
                        best = r
                        ei = i
                        ej = j
        if ei < 0:
            value = 0.0
            for k in range(nb):
                value += bf[k] * C[bi[k], bj[k]]
            return value

        # tree path from row node ei to column node m+ej (BFS)
        for x in range(nodes):
            visited[x] = 0
        visited[ei] = 1
        par_node[ei] = -1
        par_arc[ei] = -1
        stk[0] = ei
        lo = 0
        hi = 1
        target = m + ej
        while lo < hi:
            x = stk[lo]
            lo += 1
            if x == target:
                break
            e = head[x]
            while e != -1:
                y = eto[e]
                if visited[y] == 0:
                    visited[y] = 1
                    par_node[y] = x
                    par_arc[y] = earc[e]
                    stk[hi] = y
                    hi += 1
                e = enext[e]

        plen = 0
        x = target
        while x != ei:
            cyc[plen] = par_arc[x]
            plen += 1
            x = par_node[x]

        # arcs at even walk positions lose flow when the entering arc gains
        theta = 1.0e300
        for t in range(0, plen, 2):
            f = bf[cyc[t]]
            if f < theta:
                theta = f
        leave = -1
        leave_key = 2147483647
        for t in range(0, plen, 2):
            k = cyc[t]
            if bf[k] <= theta:
                key = bi[k] * n + bj[k]
                if key < leave_key:
                    leave_key = key
                    leave = k
        for t in range(plen):
            k = cyc[t]
            if t % 2 == 0:
                bf[k] -= theta
                if bf[k] < 0.0:
                    bf[k] = 0.0
            else:
                bf[k] += theta
        bi[leave] = ei
        bj[leave] = ej
        bf[leave] = theta

        pivots += 1
        if theta <= 0.0:
            degen_run += 1
            if degen_run > nodes:
                bland = True
        else:
            degen_run = 0
        if pivots > max_pivots:
            return np.nan


@njit(cache=True)
def transport_solve_dense(a, b, C, max_pivots):
    """Cold-start exact solve; returns (value, plan). Inputs are pruned."""
    m = a.shape[0]
    n = b.shape[0]
    nb = m + n - 1
    q = m + n
    aw = a.copy()
    bw = b.copy()
    sa = 0.0
    for i in range(m):
        sa += aw[i]
    sb = 0.0
    jmax = 0
    for j in range(n):
        sb += bw[j]
        if bw[j] > bw[jmax]:
            jmax = j
    bw[jmax] += sa - sb
    cmax = 0.0
    for i in range(m):
        for j in range(n):
            if C[i, j] > cmax:
                cmax = C[i, j]
    bi = np.empty(nb, np.int32)
    bj = np.empty(nb, np.int32)
    bf = np.empty(nb)
    head = np.empty(q, np.int32)
    enext = np.empty(2 * nb, np.int32)
    eto = np.empty(2 * nb, np.int32)
    earc = np.empty(2 * nb, np.int32)
    pot = np.empty(q)
    visited = np.empty(q, np.int32)
    stk = np.empty(q, np.int32)
    par_node = np.empty(q, np.int32)
    par_arc = np.empty(q, np.int32)
    cyc = np.empty(nb, np.int32)
    eps_opt = 1e-11 * (1.0 + cmax)
    value = _transport_simplex(aw, bw, C, m, n, bi, bj, bf, False, eps_opt,
                               head, enext, eto, earc, pot, visited, stk,
                               par_node, par_arc, cyc, max_pivots)
    plan = np.zeros((m, n))
    for k in range(nb):
        plan[bi[k], bj[k]] += bf[k]
    return value, plan


# ---------------------------------------------------------------------------
# Log-domain Sinkhorn
# ---------------------------------------------------------------------------


@njit(cache=True)
def _sinkhorn_sweep_pair(la, lb, C, m, n, eps, f, g):
    """One g-then-f update at regularization eps; returns column violation."""
    for j in range(n):
        hi = -1.0e300
        for i in range(m):
            v = la[i] + (f[i] - C[i, j]) / eps
            if v > hi:
                hi = v
        acc = 0.0
        for i in range(m):
            acc += np.exp(la[i] + (f[i] - C[i, j]) / eps - hi)
        g[j] = -eps * (hi + np.log(acc))
    for i in range(m):
        hi = -1.0e300
        for j in range(n):
            v = lb[j] + (g[j] - C[i, j]) / eps
            if v > hi:
                hi = v
        acc = 0.0
        for j in range(n):
            acc += np.exp(lb[j] + (g[j] - C[i, j]) / eps - hi)
        f[i] = -eps * (hi + np.log(acc))
    viol = 0.0
    for j in range(n):
        col = 0.0
        for i in range(m):
            col += np.exp(la[i] + lb[j] + (f[i] + g[j] - C[i, j]) / eps)
        d = col - np.exp(lb[j])
        viol += d if d >= 0.0 else -d
    return viol


@njit(cache=True)
def _sinkhorn_potentials(a, b, C, m, n, eps, f, g, warm, max_iter, tol_marg):
    """Fit potentials at regularization eps; anneal from coarse eps when cold.

    Returns (iterations, final column violation, converged flag as uint8).
    """
    la = np.empty(m)
    lb = np.empty(n)
    for i in range(m):
        la[i] = np.log(a[i])
    for j in range(n):
        lb[j] = np.log(b[j])
    cmax = 0.0
    for i in range(m):
        for j in range(n):
            if C[i, j] > cmax:
                cmax = C[i, j]
    iters = 0
    if not warm:
        for i in range(m):
            f[i] = 0.0
        for j in range(n):
            g[j] = 0.0
        eps_cur = cmax * 0.5
        while eps_cur > eps and iters < max_iter:
            lvl = 0
            while lvl < 50 and iters < max_iter:
                viol = _sinkhorn_sweep_pair(la, lb, C, m, n, eps_cur, f, g)
                iters += 1
                lvl += 1
                if viol <= 1e-3:
                    break
            eps_cur *= 0.5
    viol = 1.0e300
    while iters < max_iter:
        viol = _sinkhorn_sweep_pair(la, lb, C, m, n, eps, f, g)
        iters += 1
        if viol <= tol_marg:
            return iters, viol, np.uint8(1)
    if viol <= tol_marg:
        return iters, viol, np.uint8(1)
    return iters, viol, np.uint8(0)


@njit(cache=True)
def _sinkhorn_plan_value(a, b, C, m, n, eps, f, g, plan):
    """Round the entropic plan to exact marginals; return its cost."""
    for i in range(m):
        for j in range(n):
            plan[i, j] = a[i] * b[j] * np.exp((f[i] + g[j] - C[i, j]) / eps)
    for i in range(m):
        rs = 0.0
        for j in range(n):
            rs += plan[i, j]
        if rs > a[i] and rs > 0.0:
            sc = a[i] / rs
            for j in range(n):
                plan[i, j] *= sc
    resid_b = 0.0
    for j in range(n):
        cs = 0.0
        for i in range(m):
            cs += plan[i, j]
        if cs > b[j] and cs > 0.0:
            sc = b[j] / cs
            for i in range(m):
                plan[i, j] *= sc
    err_a = np.empty(m)
    err_b = np.empty(n)
    tot = 0.0
    for i in range(m):
        rs = 0.0
        for j in range(n):
            rs += plan[i, j]
        err_a[i] = a[i] - rs
        if err_a[i] < 0.0:
            err_a[i] = 0.0
        tot += err_a[i]
    for j in range(n):
        cs = 0.0
        for i in range(m):
            cs += plan[i, j]
        err_b[j] = b[j] - cs
        if err_b[j] < 0.0:
            err_b[j] = 0.0
        resid_b += err_b[j]
    if tot > 0.0 and resid_b > 0.0:
        for i in range(m):
            for j in range(n):
                plan[i, j] += err_a[i] * err_b[j] / resid_b
    value = 0.0
    for i in range(m):
        for j in range(n):
            value += plan[i, j] * C[i, j]
    return value


# ---------------------------------------------------------------------------
# Pairwise-metric sweeps
# ---------------------------------------------------------------------------


@njit(parallel=True, cache=True)
def bsm_sweep_exact(s1_idx, s1_val, s1_len, s2_idx, s2_val, s2_len,
                    dr, gamma, d, out, BI, BJ, BF, BV,
                    W1L, SL, WV, delta_prev, margin, max_pivots):
    """One application of the metric operator with exact inner transport.

    s*_idx/s*_val/s*_len are the padded per-(state, action) transition
    supports; dr[s, s', a] holds |R(s,a) - R'(s',a)|; BI/BJ/BF/BV are the
    per-cell warm-start bases, updated in place.

    Only the max over actions leaves the cell, and W1 moves by at most the
    sup-norm drift of the ground cost, so an action whose last exact value
    plus accumulated drift (W1L + SL + delta_prev) cannot beat the best
    solved action by more than ``margin`` is skipped outright; the output
    equals a full sweep's up to solver rounding (~1e-15, from summing the
    objective over a different optimal basis).
    """
    S1 = dr.shape[0]
    S2 = dr.shape[1]
    A = dr.shape[2]
    maxm = s1_idx.shape[2]
    maxn = s2_idx.shape[2]
    nbmax = maxm + maxn - 1
    q = maxm + maxn
    ncells = S1 * S2
    nchunks = 128 if ncells >= 128 else ncells
    csize = (ncells + nchunks - 1) // nchunks
    for chunk in prange(nchunks):
        C = np.empty((maxm, maxn))
        aw = np.empty(maxm)
        bw = np.empty(maxn)
        head = np.empty(q, np.int32)
        enext = np.empty(2 * nbmax, np.int32)
        eto = np.empty(2 * nbmax, np.int32)
        earc = np.empty(2 * nbmax, np.int32)
        pot = np.empty(q)
        visited = np.empty(q, np.int32)
        stk = np.empty(q, np.int32)
        par_node = np.empty(q, np.int32)
        par_arc = np.empty(q, np.int32)
        cyc = np.empty(nbmax, np.int32)
        order = np.empty(A, np.int64)
        ub = np.empty(A)
        for cell in range(chunk * csize, min((chunk + 1) * csize, ncells)):
            s1 = cell // S2
            s2 = cell - s1 * S2
            # upper bounds from the previous sweep, sorted descending
            for a in range(A):
                if WV[cell, a] != 0:
                    ub[a] = dr[s1, s2, a] + gamma * (
                        W1L[cell, a] + SL[cell, a] + delta_prev)
                else:
                    ub[a] = 1.0e300
                order[a] = a
            for ii in range(1, A):
                key_a = order[ii]
                key_u = ub[key_a]
                jj = ii - 1
                while jj >= 0 and ub[order[jj]] < key_u:
                    order[jj + 1] = order[jj]
                    jj -= 1
                order[jj + 1] = key_a
            best = -1.0
            for pos in range(A):
                a = order[pos]
                if WV[cell, a] != 0 and ub[a] <= best - margin:
                    # this and all later actions are certified non-maximal
                    for rest in range(pos, A):
                        SL[cell, order[rest]] += delta_prev
                    break
                m = s1_len[s1, a]
                n = s2_len[s2, a]
                if m == 1 and n == 1:
                    w = d[s1_idx[s1, a, 0], s2_idx[s2, a, 0]]
                elif m == 1:
                    i0 = s1_idx[s1, a, 0]
                    w = 0.0
                    for jj in range(n):
                        w += s2_val[s2, a, jj] * d[i0, s2_idx[s2, a, jj]]
                elif n == 1:
                    j0 = s2_idx[s2, a, 0]
                    w = 0.0
                    for ii in range(m):
                        w += s1_val[s1, a, ii] * d[s1_idx[s1, a, ii], j0]
                else:
                    sa = 0.0
                    for ii in range(m):
                        aw[ii] = s1_val[s1, a, ii]
                        sa += aw[ii]
                    sb = 0.0
                    jmax = 0
                    for jj in range(n):
                        bw[jj] = s2_val[s2, a, jj]
                        sb += bw[jj]
                        if bw[jj] > bw[jmax]:
                            jmax = jj
                    bw[jmax] += sa - sb
                    cmax = 0.0
                    for ii in range(m):
                        gi = s1_idx[s1, a, ii]
                        for jj in range(n):
                            c = d[gi, s2_idx[s2, a, jj]]
                            C[ii, jj] = c
                            if c > cmax:
                                cmax = c
                    if cmax == 0.0:
                        w = 0.0
                    else:
                        eps_opt = 1e-11 * (1.0 + cmax)
                        w = _transport_simplex(
                            aw, bw, C, m, n,
                            BI[cell, a], BJ[cell, a], BF[cell, a],
                            BV[cell, a] != 0, eps_opt,
                            head, enext, eto, earc, pot, visited, stk,
                            par_node, par_arc, cyc, max_pivots)
                        BV[cell, a] = 1
                W1L[cell, a] = w
                SL[cell, a] = 0.0
                WV[cell, a] = 1
                v = dr[s1, s2, a] + gamma * w
                if v > best:
                    best = v
            out[s1, s2] = best


@njit(parallel=True, cache=True)
def bsm_sweep_sinkhorn(s1_idx, s1_val, s1_len, s2_idx, s2_val, s2_len,
                       dr, gamma, d, out, F, G, FV,
                       eps_abs, eps_scale, max_iter, tol_marg):
    """Metric sweep with entropic inner solves (eps_abs <= 0 uses eps_scale*max-cost)."""
    S1 = dr.shape[0]
    S2 = dr.shape[1]
    A = dr.shape[2]
    maxm = s1_idx.shape[2]
    maxn = s2_idx.shape[2]
    for cell in prange(S1 * S2):
        s1 = cell // S2
        s2 = cell - s1 * S2
        C = np.empty((maxm, maxn))
        plan = np.empty((maxm, maxn))
        aw = np.empty(maxm)
        bw = np.empty(maxn)
        best = -1.0
        for a in range(A):
            m = s1_len[s1, a]
            n = s2_len[s2, a]
            if m == 1 and n == 1:
                w = d[s1_idx[s1, a, 0], s2_idx[s2, a, 0]]
            elif m == 1:
                i0 = s1_idx[s1, a, 0]
                w = 0.0
                for jj in range(n):
                    w += s2_val[s2, a, jj] * d[i0, s2_idx[s2, a, jj]]
            elif n == 1:
                j0 = s2_idx[s2, a, 0]
                w = 0.0
                for ii in range(m):
                    w += s1_val[s1, a, ii] * d[s1_idx[s1, a, ii], j0]
            else:
                for ii in range(m):
                    aw[ii] = s1_val[s1, a, ii]
                for jj in range(n):
                    bw[jj] = s2_val[s2, a, jj]
                cmax = 0.0
                for ii in range(m):
                    gi = s1_idx[s1, a, ii]
                    for jj in range(n):
                        c = d[gi, s2_idx[s2, a, jj]]
                        C[ii, jj] = c
                        if c > cmax:
                            cmax = c
                if cmax == 0.0:
                    w = 0.0
                else:
                    eps = eps_abs if eps_abs > 0.0 else eps_scale * cmax
                    _sinkhorn_potentials(aw, bw, C, m, n, eps,
                                         F[cell, a], G[cell, a],
                                         FV[cell, a] != 0, max_iter, tol_marg)
                    FV[cell, a] = 1
                    w = _sinkhorn_plan_value(aw, bw, C, m, n, eps,
                                             F[cell, a], G[cell, a], plan)
            v = dr[s1, s2, a] + gamma * w
            if v > best:
                best = v
        out[s1, s2] = best


# ---------------------------------------------------------------------------
# Trajectory sampling and tabular Q-learning
# ---------------------------------------------------------------------------


@njit(cache=True)
def sample_chain(cdf, last_idx, pol_cdf, pol_last, rho_cdf, rho_last,
                 n_steps, episode_length, seed):
    """Roll a behavior policy; returns (s, a, sn, episode, final rng state).

    Draw order per step: episode reset (when due), action, transition.
    Each draw consumes exactly one SplitMix64 uniform, matching ``mdp.step``.
    """
    s_arr = np.empty(n_steps, np.int64)
    a_arr = np.empty(n_steps, np.int64)
    sn_arr = np.empty(n_steps, np.int64)
    ep_arr = np.empty(n_steps, np.int64)
    state = np.uint64(seed)
    s = 0
    ep = -1
    for t in range(n_steps):
        if t % episode_length == 0:
            ep += 1
            state, u = _sm64_next(state)
            s = _pick(rho_cdf, u, rho_last)
        state, u = _sm64_next(state)
        a = _pick(pol_cdf[s], u, pol_last[s])
        state, u = _sm64_next(state)
        sn = _pick(cdf[s, a], u, last_idx[s, a])
        s_arr[t] = s
        a_arr[t] = a
        sn_arr[t] = sn
        ep_arr[t] = ep
        s = sn
    return s_arr, a_arr, sn_arr, ep_arr, state


@njit(cache=True)
def q_learning_core(cdf, last_idx, rewards, rho_cdf, rho_last, gamma,
                    episodes, horizon, alpha0, alpha_decay, alpha_min,
                    eps0, eps_decay, eps_min, seed):
    """Tabular Q-learning with epsilon-greedy exploration; first-max greedy ties."""
    S = rewards.shape[0]
    A = rewards.shape[1]
    Q = np.zeros((S, A))
    returns = np.empty(episodes)
    state = np.uint64(seed)
    for ep in range(episodes):
        e = eps0 * eps_decay ** ep
        if e < eps_min:
            e = eps_min
        al = alpha0 * alpha_decay ** ep
        if al < alpha_min:
            al = alpha_min
        state, u = _sm64_next(state)
        s = _pick(rho_cdf, u, rho_last)
        ret = 0.0
        disc = 1.0
        for t in range(horizon):
            state, u = _sm64_next(state)
            if u < e:
                state, u2 = _sm64_next(state)
                a = int(u2 * A)
                if a >= A:
                    a = A - 1
            else:
                a = 0
                best = Q[s, 0]
                for k in range(1, A):
                    if Q[s, k] > best:
                        best = Q[s, k]
                        a = k
            state, u = _sm64_next(state)
            sn = _pick(cdf[s, a], u, last_idx[s, a])
            r = rewards[s, a]
            best_n = Q[sn, 0]
            for k in range(1, A):
                if Q[sn, k] > best_n:
                    best_n = Q[sn, k]
            Q[s, a] += al * (r + gamma * best_n - Q[s, a])
            ret += disc * r
            disc *= gamma
            s = sn
        returns[ep] = ret
    return Q, returns
