"""Compiled loop kernels (numba.njit, single-threaded, cached).

Mirrors the function set of ``_impl_numpy``; see that module for the
contract of each routine. Keep the two in sync: same tie-break rules,
same accumulation order where bit-level agreement is cheap to preserve.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

LOG2PI = math.log(2.0 * math.pi)


@njit(cache=True)
def gauss_sum(xt, coef, xe, h):
    # sum_j coef_j * prod_k phi((xe_k - xt_jk)/h_k)/h_k  for each eval row
    n, d = xt.shape
    m = xe.shape[0]
    out = np.zeros(m)
    hprod = 1.0
    for k in range(d):
        hprod *= h[k]
    c0 = math.exp(-0.5 * d * LOG2PI) / hprod
    for e in range(m):
        s = 0.0
        for j in range(n):
            q = 0.0
            for k in range(d):
                u = (xe[e, k] - xt[j, k]) / h[k]
                q += u * u
            s += coef[j] * math.exp(-0.5 * q)
        out[e] = s * c0
    return out


@njit(cache=True)
def gauss_sum_grad(xt, coef, xe, h):
    # value and gradient in the eval coordinates
    n, d = xt.shape
    m = xe.shape[0]
    val = np.zeros(m)
    grad = np.zeros((m, d))
    hprod = 1.0
    for k in range(d):
        hprod *= h[k]
    c0 = math.exp(-0.5 * d * LOG2PI) / hprod
    for e in range(m):
        s = 0.0
        for j in range(n):
            q = 0.0
            for k in range(d):
                u = (xe[e, k] - xt[j, k]) / h[k]
                q += u * u
            kj = coef[j] * math.exp(-0.5 * q)
            s += kj
            for k in range(d):
                grad[e, k] += kj * (xt[j, k] - xe[e, k]) / (h[k] * h[k])
        val[e] = s * c0
        for k in range(d):
            grad[e, k] *= c0
    return val, grad


@njit(cache=True)
def nw_eval(xt, yt, wt, xe, h, window):
    # Nadaraya-Watson with row weights; eval points with no training point
    # inside `window` bandwidths (max-norm) fall back to nearest neighbor.
    n, d = xt.shape
    m = xe.shape[0]
    yhat = np.zeros(m)
    empty = np.zeros(m, np.uint8)
    for e in range(m):
        s0 = 0.0
        s1 = 0.0
        best_max = np.inf
        best_l2 = np.inf
        near = -1
        for j in range(n):
            if wt[j] == 0.0:
                continue
            q = 0.0
            mx = 0.0
            for k in range(d):
                u = abs(xe[e, k] - xt[j, k]) / h[k]
                q += u * u
                if u > mx:
                    mx = u
            kj = wt[j] * math.exp(-0.5 * q)
            s0 += kj
            s1 += kj * yt[j]
            if mx < best_max:
                best_max = mx
            if q < best_l2:
                best_l2 = q
                near = j
        if best_max > window or s0 <= 0.0:
            empty[e] = 1
            yhat[e] = yt[near] if near >= 0 else 0.0
        else:
            yhat[e] = s1 / s0
    return yhat, empty


@njit(cache=True)
def _chol_solve(A, b, x, q):
    # in-place Cholesky solve; returns False when the pivot collapses
    L = np.zeros((q, q))
    for i in range(q):
        for j in range(i + 1):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            if i == j:
                if s <= 1e-300:
                    return False
                L[i, i] = math.sqrt(s)
            else:
                L[i, j] = s / L[j, j]
    # forward then backward substitution
    for i in range(q):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * x[k]
        x[i] = s / L[i, i]
    for i in range(q - 1, -1, -1):
        s = x[i]
        for k in range(i + 1, q):
            s -= L[k, i] * x[k]
        x[i] = s / L[i, i]
    return True


@njit(cache=True)
def ll_eval(xt, yt, wt, xe, h, ridge, window):
    # locally linear fit at each eval point: value, slope, flags
    n, d = xt.shape
    m = xe.shape[0]
    q = d + 1
    yhat = np.zeros(m)
    grad = np.zeros((m, d))
    empty = np.zeros(m, np.uint8)
    ridged = np.zeros(m, np.uint8)
    A = np.zeros((q, q))
    bvec = np.zeros(q)
    sol = np.zeros(q)
    dx = np.zeros(d)
    for e in range(m):
        for i in range(q):
            bvec[i] = 0.0
            for j in range(q):
                A[i, j] = 0.0
        best_max = np.inf
        best_l2 = np.inf
        near = -1
        for j in range(n):
            if wt[j] == 0.0:
                continue
            qd = 0.0
            mx = 0.0
            for k in range(d):
                dx[k] = xt[j, k] - xe[e, k]
                u = abs(dx[k]) / h[k]
                qd += u * u
                if u > mx:
                    mx = u
            kj = wt[j] * math.exp(-0.5 * qd)
            A[0, 0] += kj
            bvec[0] += kj * yt[j]
            for k in range(d):
                A[0, k + 1] += kj * dx[k]
                bvec[k + 1] += kj * dx[k] * yt[j]
                for l in range(k, d):
                    A[k + 1, l + 1] += kj * dx[k] * dx[l]
            if mx < best_max:
                best_max = mx
            if qd < best_l2:
                best_l2 = qd
                near = j
        if best_max > window or A[0, 0] <= 0.0:
            empty[e] = 1
            yhat[e] = yt[near] if near >= 0 else 0.0
            continue
        for i in range(q):
            for j in range(i):
                A[i, j] = A[j, i]
        ok = _chol_solve(A, bvec, sol, q)
        if not ok:
            tr = 0.0
            for i in range(q):
                tr += A[i, i]
            lam = ridge * (1.0 + tr / q)
            for i in range(q):
                A[i, i] += lam
            ridged[e] = 1
            ok = _chol_solve(A, bvec, sol, q)
        if not ok:
            empty[e] = 1
            yhat[e] = yt[near] if near >= 0 else 0.0
            continue
        yhat[e] = sol[0]
        for k in range(d):
            grad[e, k] = sol[k + 1]
    return yhat, grad, empty, ridged


@njit(cache=True)
def build_tree(X, y, cnt, sorted_idx, feat_table, mtry, max_depth, min_leaf):
    # CART with multiplicity weights (bootstrap counts) and per-node feature
    # subsampling via a pre-drawn permutation table. Split criterion is the
    # weighted sum-of-squares reduction; for 0/1 targets this orders splits
    # identically to Gini impurity.
    n, p = X.shape
    W0 = 0.0
    for i in range(n):
        W0 += cnt[i]
    cap = 2 * int(W0 / min_leaf + 1.0) + 3
    feature = np.full(cap, -1, np.int32)
    thr = np.zeros(cap)
    left = np.full(cap, -1, np.int32)
    right = np.full(cap, -1, np.int32)
    value = np.zeros(cap)
    node_id = np.full(n, -1, np.int32)
    for i in range(n):
        if cnt[i] > 0:
            node_id[i] = 0
    stack_nid = np.zeros(cap, np.int32)
    stack_dep = np.zeros(cap, np.int32)
    sp = 0
    stack_nid[sp] = 0
    stack_dep[sp] = 0
    sp += 1
    n_nodes = 1
    while sp > 0:
        sp -= 1
        nid = stack_nid[sp]
        depth = stack_dep[sp]
        W = 0.0
        S = 0.0
        SS = 0.0
        for i in range(n):
            if node_id[i] == nid:
                w = cnt[i]
                W += w
                S += w * y[i]
                SS += w * y[i] * y[i]
        value[nid] = S / W
        sse = SS - S * S / W
        if (
            (max_depth >= 0 and depth >= max_depth)
            or W < 2.0 * min_leaf
            or sse <= 1e-12
            or n_nodes + 2 > cap
        ):
            continue
        best_score = -np.inf
        best_f = -1
        best_thr = 0.0
        for fi in range(mtry):
            f = feat_table[nid % feat_table.shape[0], fi]
            WL = 0.0
            SL = 0.0
            prev_x = 0.0
            seen = False
            for s in range(n):
                row = sorted_idx[f, s]
                if node_id[row] != nid:
                    continue
                xv = X[row, f]
                if seen and xv > prev_x:
                    WR = W - WL
                    if WL >= min_leaf and WR >= min_leaf:
                        score = SL * SL / WL + (S - SL) * (S - SL) / WR
                        if score > best_score:
                            best_score = score
                            best_f = f
                            best_thr = 0.5 * (prev_x + xv)
                w = cnt[row]
                WL += w
                SL += w * y[row]
                prev_x = xv
                seen = True
        if best_f < 0:
            continue
        lid = n_nodes
        rid = n_nodes + 1
        n_nodes += 2
        feature[nid] = best_f
        thr[nid] = best_thr
        left[nid] = lid
        right[nid] = rid
        for i in range(n):
            if node_id[i] == nid:
                if X[i, best_f] <= best_thr:
                    node_id[i] = lid
                else:
                    node_id[i] = rid
        stack_nid[sp] = lid
        stack_dep[sp] = depth + 1
        sp += 1
        stack_nid[sp] = rid
        stack_dep[sp] = depth + 1
        sp += 1
    return feature[:n_nodes], thr[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes]


@njit(cache=True)
def apply_tree(feature, thr, left, right, X):
    m = X.shape[0]
    out = np.zeros(m, np.int32)
    for r in range(m):
        i = 0
        while feature[i] >= 0:
            if X[r, feature[i]] <= thr[i]:
                i = left[i]
            else:
                i = right[i]
        out[r] = i
    return out


@njit(cache=True)
def wls_cd(X, z, w, lam, pen, b, aj, max_sweeps, tol):
    # cyclic coordinate descent for
    #   (1/2n) sum_i w_i (z_i - X_i b)^2 + lam * sum_j pen_j |b_j|
    # returns sweeps used and the per-sweep objective trace
    n, k = X.shape
    r = np.empty(n)
    for i in range(n):
        s = z[i]
        for j in range(k):
            s -= X[i, j] * b[j]
        r[i] = s
    trace = np.zeros(max_sweeps)
    sweeps = 0
    for sw in range(max_sweeps):
        delta = 0.0
        for j in range(k):
            if aj[j] <= 0.0:
                continue
            rho = 0.0
            for i in range(n):
                rho += w[i] * X[i, j] * r[i]
            rho = rho / n + aj[j] * b[j]
            t = lam * pen[j]
            if rho > t:
                bj = (rho - t) / aj[j]
            elif rho < -t:
                bj = (rho + t) / aj[j]
            else:
                bj = 0.0
            d = bj - b[j]
            if d != 0.0:
                for i in range(n):
                    r[i] -= X[i, j] * d
                b[j] = bj
                if abs(d) > delta:
                    delta = abs(d)
        obj = 0.0
        for i in range(n):
            obj += w[i] * r[i] * r[i]
        obj = 0.5 * obj / n
        for j in range(k):
            obj += lam * pen[j] * abs(b[j])
        trace[sw] = obj
        sweeps = sw + 1
        if delta < tol:
            break
    return sweeps, trace[:sweeps]


@njit(cache=True)
def simulate_panel(x0, dx, v2g, v1, g1, g2, shocks, x_init):
    # single-agent forward simulation on the solved value grid;
    # choice 1 (replace) resets the state to 1 + shock
    T = g1.shape[0]
    G = v2g.shape[0]
    xs = np.empty(T + 1)
    y1 = np.zeros(T, np.uint8)
    x = x_init
    xs[0] = x
    for t in range(T):
        u = (x - x0) / dx
        if u <= 0.0:
            v2x = v2g[0]
        elif u >= G - 1:
            v2x = v2g[G - 1]
        else:
            i = int(u)
            f = u - i
            v2x = v2g[i] * (1.0 - f) + v2g[i + 1] * f
        if v1 + g1[t] >= v2x + g2[t]:
            y1[t] = 1
            x = 1.0 + shocks[t]
        else:
            x = x + shocks[t]
        xs[t + 1] = x
    return xs, y1
