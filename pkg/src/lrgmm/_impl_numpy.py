"""Pure-numpy fallback kernels.

Contract (shared with ``_impl_numba``):

* ``gauss_sum(xt, coef, xe, h)``: weighted sums of normalized Gaussian
  product kernels, one value per eval row.
* ``gauss_sum_grad``: same plus the gradient in the eval coordinates.
* ``nw_eval``: Nadaraya-Watson regression with row weights; eval points
  with no positive-weight training point within ``window`` bandwidths
  (max-norm) fall back to the nearest training value and raise a flag.
* ``ll_eval``: locally linear regression returning value, slope, the
  empty-window flag, and a flag for ridge-stabilized local systems.
* ``build_tree`` / ``apply_tree``: CART on multiplicity weights with a
  pre-drawn per-node feature subsample table; weighted sum-of-squares
  split criterion (equivalent to Gini ordering for 0/1 targets).
* ``wls_cd``: cyclic coordinate descent for an L1-penalized weighted
  least squares problem, objective traced per sweep.
* ``simulate_panel``: sequential single-agent simulation on a solved
  value grid.

Eval loops are chunked to bound the size of pairwise distance arrays.
"""

from __future__ import annotations

import math

import numpy as np

LOG2PI = math.log(2.0 * math.pi)
_CHUNK = 512


def _sq_dists(xt, xe_chunk, h):
    # (m, n, d) scaled differences collapsed to (m, n) squared distance
    u = (xe_chunk[:, None, :] - xt[None, :, :]) / h[None, None, :]
    return np.einsum("mnd,mnd->mn", u, u), u


def gauss_sum(xt, coef, xe, h):
    n, d = xt.shape
    m = xe.shape[0]
    out = np.empty(m)
    c0 = math.exp(-0.5 * d * LOG2PI) / np.prod(h)
    for a in range(0, m, _CHUNK):
        b = min(a + _CHUNK, m)
        q, _ = _sq_dists(xt, xe[a:b], h)
        out[a:b] = np.exp(-0.5 * q) @ coef * c0
    return out


def gauss_sum_grad(xt, coef, xe, h):
    n, d = xt.shape
    m = xe.shape[0]
    val = np.empty(m)
    grad = np.empty((m, d))
    c0 = math.exp(-0.5 * d * LOG2PI) / np.prod(h)
    for a in range(0, m, _CHUNK):
        b = min(a + _CHUNK, m)
        q, u = _sq_dists(xt, xe[a:b], h)
        kj = np.exp(-0.5 * q) * coef[None, :]
        val[a:b] = kj.sum(axis=1) * c0
        # d/dxe of exp(-0.5*sum u^2) is -u/h times the kernel
        grad[a:b] = -np.einsum("mn,mnd->md", kj, u / h[None, None, :]) * c0
    return val, grad


def nw_eval(xt, yt, wt, xe, h, window):
    n, d = xt.shape
    m = xe.shape[0]
    yhat = np.empty(m)
    empty = np.zeros(m, np.uint8)
    pos = wt != 0.0
    xtp = xt[pos]
    ytp = yt[pos]
    wtp = wt[pos]
    if xtp.shape[0] == 0:
        return np.zeros(m), np.ones(m, np.uint8)
    for a in range(0, m, _CHUNK):
        b = min(a + _CHUNK, m)
        q, u = _sq_dists(xtp, xe[a:b], h)
        kj = wtp[None, :] * np.exp(-0.5 * q)
        s0 = kj.sum(axis=1)
        s1 = kj @ ytp
        mx = np.abs(u).max(axis=2).min(axis=1)
        near = ytp[np.argmin(q, axis=1)]
        bad = (mx > window) | (s0 <= 0.0)
        empty[a:b] = bad
        with np.errstate(invalid="ignore", divide="ignore"):
            yhat[a:b] = np.where(bad, near, s1 / np.maximum(s0, 1e-300))
    return yhat, empty


def ll_eval(xt, yt, wt, xe, h, ridge, window):
    n, d = xt.shape
    m = xe.shape[0]
    q1 = d + 1
    yhat = np.empty(m)
    grad = np.zeros((m, d))
    empty = np.zeros(m, np.uint8)
    ridged = np.zeros(m, np.uint8)
    pos = wt != 0.0
    xtp = xt[pos]
    ytp = yt[pos]
    wtp = wt[pos]
    if xtp.shape[0] == 0:
        return np.zeros(m), grad, np.ones(m, np.uint8), ridged
    for a in range(0, m, _CHUNK):
        b = min(a + _CHUNK, m)
        mm = b - a
        q, u = _sq_dists(xtp, xe[a:b], h)
        kj = wtp[None, :] * np.exp(-0.5 * q)
        dx = xtp[None, :, :] - xe[a:b, None, :]
        basis = np.concatenate([np.ones((mm, xtp.shape[0], 1)), dx], axis=2)
        A = np.einsum("mn,mnp,mnq->mpq", kj, basis, basis)
        bv = np.einsum("mn,mnp,n->mp", kj, basis, ytp)
        mx = np.abs(u).max(axis=2).min(axis=1)
        near = ytp[np.argmin(q, axis=1)]
        bad = (mx > window) | (A[:, 0, 0] <= 0.0)
        # detect near-singular local designs via the smallest eigenvalue
        ev = np.linalg.eigvalsh(A)
        sing = (ev[:, 0] <= 1e-300) & ~bad
        if sing.any():
            tr = np.trace(A[sing], axis1=1, axis2=2)
            A[sing] += (ridge * (1.0 + tr / q1))[:, None, None] * np.eye(q1)
            ridged[a:b][sing] = 1
        sol = np.zeros((mm, q1))
        ok = ~bad
        if ok.any():
            try:
                sol[ok] = np.linalg.solve(A[ok], bv[ok][:, :, None])[:, :, 0]
            except np.linalg.LinAlgError:
                for i in np.nonzero(ok)[0]:
                    try:
                        sol[i] = np.linalg.solve(A[i], bv[i])
                    except np.linalg.LinAlgError:
                        tr = np.trace(A[i])
                        A[i] += ridge * (1.0 + tr / q1) * np.eye(q1)
                        ridged[a + i] = 1
                        sol[i] = np.linalg.solve(A[i], bv[i])
        empty[a:b] = bad
        yhat[a:b] = np.where(bad, near, sol[:, 0])
        grad[a:b][ok] = sol[ok, 1:]
    return yhat, grad, empty, ridged


def build_tree(X, y, cnt, sorted_idx, feat_table, mtry, max_depth, min_leaf):
    n, p = X.shape
    W0 = float(cnt.sum())
    cap = 2 * int(W0 / min_leaf + 1.0) + 3
    feature = np.full(cap, -1, np.int32)
    thr = np.zeros(cap)
    left = np.full(cap, -1, np.int32)
    right = np.full(cap, -1, np.int32)
    value = np.zeros(cap)
    node_id = np.where(cnt > 0, 0, -1).astype(np.int32)
    stack = [(0, 0)]
    n_nodes = 1
    cntf = cnt.astype(np.float64)
    while stack:
        nid, depth = stack.pop()
        mask = node_id == nid
        w = cntf[mask]
        yv = y[mask]
        W = w.sum()
        S = float(w @ yv)
        SS = float(w @ (yv * yv))
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
            order = sorted_idx[f]
            sel = order[node_id[order] == nid]
            xv = X[sel, f]
            wv = cntf[sel]
            WL = np.cumsum(wv)[:-1]
            SL = np.cumsum(wv * y[sel])[:-1]
            if xv.shape[0] < 2:
                continue
            valid = (xv[1:] > xv[:-1]) & (WL >= min_leaf) & (W - WL >= min_leaf)
            if not valid.any():
                continue
            with np.errstate(invalid="ignore", divide="ignore"):
                score = SL * SL / WL + (S - SL) * (S - SL) / (W - WL)
            score = np.where(valid, score, -np.inf)
            pos_best = int(np.argmax(score))
            if score[pos_best] > best_score:
                best_score = score[pos_best]
                best_f = f
                best_thr = 0.5 * (xv[pos_best] + xv[pos_best + 1])
        if best_f < 0:
            continue
        lid, rid = n_nodes, n_nodes + 1
        n_nodes += 2
        feature[nid] = best_f
        thr[nid] = best_thr
        left[nid] = lid
        right[nid] = rid
        go_left = mask & (X[:, best_f] <= best_thr)
        node_id[go_left] = lid
        node_id[mask & ~go_left] = rid
        stack.append((rid, depth + 1))
        stack.append((lid, depth + 1))
    return feature[:n_nodes], thr[:n_nodes], left[:n_nodes], right[:n_nodes], value[:n_nodes]


def apply_tree(feature, thr, left, right, X):
    m = X.shape[0]
    out = np.zeros(m, np.int32)
    active = np.arange(m)
    node = np.zeros(m, np.int32)
    while active.size:
        f = feature[node[active]]
        leaf = f < 0
        out[active[leaf]] = node[active[leaf]]
        live = active[~leaf]
        if live.size == 0:
            break
        fl = feature[node[live]]
        goes_left = X[live, fl] <= thr[node[live]]
        node[live] = np.where(goes_left, left[node[live]], right[node[live]])
        active = live
    return out


def wls_cd(X, z, w, lam, pen, b, aj, max_sweeps, tol):
    n, k = X.shape
    r = z - X @ b
    wX = w[:, None] * X
    trace = []
    for sw in range(max_sweeps):
        delta = 0.0
        for j in range(k):
            if aj[j] <= 0.0:
                continue
            rho = float(wX[:, j] @ r) / n + aj[j] * b[j]
            t = lam * pen[j]
            if rho > t:
                bj = (rho - t) / aj[j]
            elif rho < -t:
                bj = (rho + t) / aj[j]
            else:
                bj = 0.0
            d = bj - b[j]
            if d != 0.0:
                r -= X[:, j] * d
                b[j] = bj
                delta = max(delta, abs(d))
        obj = 0.5 * float(w @ (r * r)) / n + lam * float(pen @ np.abs(b))
        trace.append(obj)
        if delta < tol:
            break
    return len(trace), np.asarray(trace)


def simulate_panel(x0, dx, v2g, v1, g1, g2, shocks, x_init):
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
