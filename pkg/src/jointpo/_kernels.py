"""Hot numeric kernels.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version with identical semantics. The public dispatchers at the bottom pick
one at import time. Set ``JOINTPO_DISABLE_NUMBA=1`` to force the numpy path
(useful for debugging and for checking the two paths against each other).
"""

import math
import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("JOINTPO_DISABLE_NUMBA", "").strip().lower() not in (
    "1",
    "true",
    "yes",
)

LINK_LINEAR = 0
LINK_LOGISTIC = 1


def _njit(*args, **kwargs):
    if HAVE_NUMBA:
        return numba.njit(*args, cache=True, nogil=True, **kwargs)
    return lambda f: f  # pragma: no cover


# ---------------------------------------------------------------------------
# B-spline basis
# ---------------------------------------------------------------------------


@_njit()
def _bspline_local_nb(x, t, degree):
    """Non-zero B-spline values per row as ``(offset, values)``.

    Row i of the basis is zero except ``values[i]`` (``degree + 1`` entries)
    starting at column ``offset[i]``. Points outside the boundary knots are
    clamped.
    """
    n = x.shape[0]
    nb = t.shape[0] - degree - 1
    off = np.empty(n, dtype=np.int64)
    vals = np.empty((n, degree + 1))
    left = np.empty(degree + 1)
    right = np.empty(degree + 1)
    lo = t[degree]
    hi = t[nb]
    for i in range(n):
        xi = min(max(x[i], lo), hi)
        # span mu with t[mu] <= x < t[mu+1]; x == hi uses the last non-empty span
        if xi >= hi:
            mu = nb - 1
            while mu > degree and t[mu] >= hi:
                mu -= 1
        else:
            a = degree
            b = nb
            while b - a > 1:
                mid = (a + b) // 2
                if t[mid] <= xi:
                    a = mid
                else:
                    b = mid
            mu = a
        vals[i, 0] = 1.0
        for j in range(1, degree + 1):
            left[j] = xi - t[mu + 1 - j]
            right[j] = t[mu + j] - xi
            saved = 0.0
            for r in range(j):
                den = right[r + 1] + left[j - r]
                tmp = vals[i, r] / den if den != 0.0 else 0.0
                vals[i, r] = saved + right[r + 1] * tmp
                saved = left[j - r] * tmp
            vals[i, j] = saved
        off[i] = mu - degree
    return off, vals


@_njit()
def _bspline_basis_nb(x, t, degree):
    off, vals = _bspline_local_nb(x, t, degree)
    nb = t.shape[0] - degree - 1
    out = np.zeros((x.shape[0], nb))
    for i in range(x.shape[0]):
        for j in range(degree + 1):
            out[i, off[i] + j] = vals[i, j]
    return out


def _bspline_basis_np(x, t, degree):
    nb = len(t) - degree - 1
    lo, hi = t[degree], t[nb]
    x = np.clip(np.asarray(x, dtype=float), lo, hi)
    nint = len(t) - 1
    B = np.zeros((x.shape[0], nint))
    for i in range(nint):
        if t[i] < t[i + 1]:
            B[:, i] = (t[i] <= x) & (x < t[i + 1])
    # close the last non-empty interval on the right
    last = max(i for i in range(nint) if t[i] < t[i + 1])
    B[x == hi, last] = 1.0
    for k in range(1, degree + 1):
        Bk = np.zeros((x.shape[0], nint - k))
        for i in range(nint - k):
            d1 = t[i + k] - t[i]
            d2 = t[i + k + 1] - t[i + 1]
            if d1 > 0:
                Bk[:, i] += (x - t[i]) / d1 * B[:, i]
            if d2 > 0:
                Bk[:, i] += (t[i + k + 1] - x) / d2 * B[:, i + 1]
        B = Bk
    return B


# ---------------------------------------------------------------------------
# Logistic IRLS (shared by the numpy path and by the general fit_logistic)
# ---------------------------------------------------------------------------


def _softplus_np(eta):
    return np.where(eta > 0, eta + np.log1p(np.exp(-np.abs(eta))), np.log1p(np.exp(-np.abs(eta))))


def _expit_np(eta):
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    e = np.exp(eta[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def irls_numpy(X, y, ridge, tol, maxit, start=None, sep_bound=30.0):
    """Ridge-penalized logistic Newton/IRLS with step halving.

    Returns ``(coef, converged, iterations, separated, loglik_path)`` where
    ``loglik_path`` holds the penalized log-likelihood of each accepted
    iterate.
    """
    n, m = X.shape
    coef = np.zeros(m) if start is None else np.array(start, dtype=float)
    path = []
    prev = None
    prev_ll = -np.inf
    converged = separated = False
    halvings = 0
    it = 0
    while it < maxit:
        eta = X @ coef
        ll = float(y @ eta - _softplus_np(eta).sum() - 0.5 * ridge * coef @ coef)
        if prev is not None and ll < prev_ll - 1e-12 * abs(prev_ll):
            if halvings >= 40:
                coef = prev
                break
            coef = prev + 0.5 * (coef - prev)
            halvings += 1
            continue
        halvings = 0
        path.append(ll)
        p = _expit_np(eta)
        grad = X.T @ (y - p) - ridge * coef
        if ridge == 0.0 and (np.max(np.abs(coef)) > sep_bound or ll > -1e-6):
            # diverging coefficients or a (near-)perfect fit: the MLE is at infinity
            separated = True
            converged = bool(np.max(np.abs(grad)) <= tol)
            break
        if np.max(np.abs(grad)) <= tol:
            converged = True
            break
        w = p * (1.0 - p)
        H = (X.T * w) @ X
        H[np.diag_indices_from(H)] += ridge
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        prev, prev_ll = coef, ll
        coef = coef + step
        it += 1
    return coef, converged, it, separated, path


@_njit()
def _chol_solve_nb(A, b):
    m = A.shape[0]
    L = np.zeros((m, m))
    for j in range(m):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if s <= 0.0:
            return b * 0.0, False
        L[j, j] = math.sqrt(s)
        for i in range(j + 1, m):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / L[j, j]
    z = np.empty(m)
    for i in range(m):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * z[k]
        z[i] = s / L[i, i]
    x = np.empty(m)
    for i in range(m - 1, -1, -1):
        s = z[i]
        for k in range(i + 1, m):
            s -= L[k, i] * x[k]
        x[i] = s / L[i, i]
    return x, True


@_njit()
def _expit_nb(eta):
    if eta >= 0:
        return 1.0 / (1.0 + math.exp(-eta))
    e = math.exp(eta)
    return e / (1.0 + e)


@_njit(fastmath=True)
def _irls_pass_nb(off, vals, y, coef, m, H, grad, loc):
    """One sweep: penalty-free log-likelihood, gradient and lower-triangular Hessian (flat)."""
    n, w = vals.shape
    ll = 0.0
    for i in range(n):
        o = off[i]
        eta = 0.0
        for j in range(w):
            loc[j] = vals[i, j]
            eta += loc[j] * coef[o + j]
        e = math.exp(-abs(eta))
        if eta >= 0:
            ll += y[i] * eta - eta - math.log1p(e)
            p = 1.0 / (1.0 + e)
        else:
            ll += y[i] * eta - math.log1p(e)
            p = e / (1.0 + e)
        res = y[i] - p
        wt = p * (1.0 - p)
        base = o * m + o
        for j in range(w):
            xj = loc[j]
            grad[o + j] += xj * res
            wx = wt * xj
            r = base + j * m
            for k in range(j + 1):
                H[r + k] += wx * loc[k]
    return ll


@_njit()
def _irls_local_nb(off, vals, m, y, coef, ridge, tol, maxit, sep_bound):
    """IRLS on a banded design; updates ``coef`` in place.

    Row i of the design is zero except ``vals[i, :]`` at columns
    ``off[i] .. off[i] + w - 1`` (B-spline rows have degree+1 non-zeros).
    """
    w = vals.shape[1]
    Hf = np.empty(m * m)
    H = np.empty((m, m))
    grad = np.empty(m)
    loc = np.empty(w)
    prev = coef.copy()
    prev_ll = -np.inf
    have_prev = False
    halvings = 0
    it = 0
    converged = False
    separated = False
    while it < maxit:
        pen = 0.0
        for j in range(m):
            grad[j] = -ridge * coef[j]
            pen += 0.5 * ridge * coef[j] * coef[j]
        Hf[:] = 0.0
        ll = _irls_pass_nb(off, vals, y, coef, m, Hf, grad, loc) - pen
        if have_prev and ll < prev_ll - 1e-12 * abs(prev_ll):
            if halvings >= 40:
                coef[:] = prev
                break
            for j in range(m):
                coef[j] = prev[j] + 0.5 * (coef[j] - prev[j])
            halvings += 1
            continue
        halvings = 0
        gmax = 0.0
        cmax = 0.0
        for j in range(m):
            gmax = max(gmax, abs(grad[j]))
            cmax = max(cmax, abs(coef[j]))
        if ridge == 0.0 and (cmax > sep_bound or ll > -1e-6):
            separated = True
            converged = gmax <= tol
            break
        if gmax <= tol:
            converged = True
            break
        for j in range(m):
            for k in range(j + 1):
                H[j, k] = Hf[j * m + k]
                H[k, j] = H[j, k]
            H[j, j] += ridge
        step, ok = _chol_solve_nb(H, grad)
        if not ok:
            break
        prev[:] = coef
        prev_ll = ll
        have_prev = True
        for j in range(m):
            coef[j] += step[j]
        it += 1
    return converged, it, separated


def local_to_dense(off, vals, m):
    n, w = vals.shape
    out = np.zeros((n, m))
    rows = np.repeat(np.arange(n), w)
    cols = (off[:, None] + np.arange(w)[None, :]).reshape(-1)
    np.add.at(out, (rows, cols), vals.reshape(-1))
    return out


def _block_start(y, rows, m):
    ybar = y[rows].mean() if rows.size else 0.5
    ybar = min(max(ybar, 1e-3), 1 - 1e-3)
    return np.full(m, math.log(ybar / (1 - ybar)))


@_njit()
def _crossfit_blocks_nb(off, vals, m, y, train, group_order, group_starts, fold, n_folds, ridge, tol, maxit):
    n = y.shape[0]
    w = vals.shape[1]
    n_groups = group_starts.shape[0] - 1
    pred = np.empty(n)
    coefs = np.zeros((n_groups, n_folds, m))
    conv = np.zeros((n_groups, n_folds), dtype=np.bool_)
    sizes = np.zeros((n_groups, n_folds), dtype=np.int64)
    for g in range(n_groups):
        members = group_order[group_starts[g] : group_starts[g + 1]]
        cnt = 0
        for ii in range(members.shape[0]):
            if train[members[ii]]:
                cnt += 1
        if cnt == 0:
            continue
        # contiguous copy of the block's training rows
        b_off = np.empty(cnt, dtype=np.int64)
        b_vals = np.empty((cnt, w))
        b_y = np.empty(cnt)
        b_fold = np.empty(cnt, dtype=np.int64)
        cnt = 0
        ysum = 0.0
        for ii in range(members.shape[0]):
            i = members[ii]
            if train[i]:
                b_off[cnt] = off[i]
                b_vals[cnt] = vals[i]
                b_y[cnt] = y[i]
                b_fold[cnt] = fold[i]
                ysum += y[i]
                cnt += 1
        # each fit starts from the logit of its own training mean, so a
        # fold's model depends on nothing from that fold
        for k in range(n_folds):
            if n_folds == 1:
                nk = cnt
                f_off, f_vals, f_y = b_off, b_vals, b_y
                fsum = ysum
            else:
                nk = 0
                for r in range(cnt):
                    if b_fold[r] != k:
                        nk += 1
                if nk == 0:
                    continue
                f_off = np.empty(nk, dtype=np.int64)
                f_vals = np.empty((nk, w))
                f_y = np.empty(nk)
                nk = 0
                fsum = 0.0
                for r in range(cnt):
                    if b_fold[r] != k:
                        f_off[nk] = b_off[r]
                        f_vals[nk] = b_vals[r]
                        f_y[nk] = b_y[r]
                        fsum += b_y[r]
                        nk += 1
            ybar = min(max(fsum / nk, 1e-3), 1.0 - 1e-3)
            coef = np.full(m, math.log(ybar / (1.0 - ybar)))
            c, _, _ = _irls_local_nb(f_off, f_vals, m, f_y, coef, ridge, tol, maxit, 30.0)
            sizes[g, k] = nk
            conv[g, k] = c
            coefs[g, k] = coef
            for ii in range(members.shape[0]):
                i = members[ii]
                if n_folds == 1 or fold[i] == k:
                    eta = 0.0
                    for j in range(w):
                        eta += vals[i, j] * coef[off[i] + j]
                    pred[i] = _expit_nb(eta)
    return pred, coefs, conv, sizes


def _crossfit_blocks_np(off, vals, m, y, train, group_order, group_starts, fold, n_folds, ridge, tol, maxit):
    basis = local_to_dense(off, vals, m)
    n = basis.shape[0]
    n_groups = len(group_starts) - 1
    pred = np.empty(n)
    coefs = np.zeros((n_groups, n_folds, m))
    conv = np.zeros((n_groups, n_folds), dtype=bool)
    sizes = np.zeros((n_groups, n_folds), dtype=np.int64)
    for g in range(n_groups):
        members = group_order[group_starts[g] : group_starts[g + 1]]
        all_rows = members[train[members]]
        if all_rows.size == 0:
            continue
        for k in range(n_folds):
            rows = all_rows if n_folds == 1 else all_rows[fold[all_rows] != k]
            if rows.size == 0:
                continue
            coef, c, _, _, _ = irls_numpy(basis[rows], y[rows], ridge, tol, maxit, _block_start(y, rows, m))
            sizes[g, k] = rows.size
            conv[g, k] = c
            coefs[g, k] = coef
            target = members if n_folds == 1 else members[fold[members] == k]
            pred[target] = _expit_np(basis[target] @ coef)
    return pred, coefs, conv, sizes


# ---------------------------------------------------------------------------
# Orthogonal score and its Jacobian in xi
# ---------------------------------------------------------------------------


@_njit()
def _link_nb(x, link):
    if link == 0:
        return x, 1.0, 0.0
    g = _expit_nb(x)
    g1 = _expit_nb(x) * _expit_nb(-x)
    return g, g1, g1 * (1.0 - 2.0 * g)


@_njit()
def _ortho_score_nb(B, q, r, a, y, pi1, pi0, beta, lam, link):
    n, p = B.shape
    d = 2 * p
    psi = np.empty((n, d))
    J = np.zeros((d, d))
    Z = np.empty(d)
    dR = np.empty(d)
    for i in range(n):
        eg = 0.0
        eh = 0.0
        for j in range(p):
            eg += B[i, j] * beta[j]
            eh += B[i, j] * lam[j]
        g, g1, g2 = _link_nb(eg, link)
        h, h1, h2 = _link_nb(eh, link)
        qi = q[i]
        w0e = (1.0 - a[i]) / pi0[i] * (y[i] - qi)
        w1e = a[i] / pi1[i] * (y[i] - r[i])
        R = r[i] + w1e - (g * (1.0 - qi) + h * qi) + (g - h) * w0e
        for j in range(p):
            Z[j] = (1.0 - qi) * g1 * B[i, j]
            Z[p + j] = qi * h1 * B[i, j]
            dR[j] = -Z[j] + w0e * g1 * B[i, j]
            dR[p + j] = -Z[p + j] - w0e * h1 * B[i, j]
        for j in range(d):
            psi[i, j] = Z[j] * R
            for k in range(d):
                J[j, k] += Z[j] * dR[k]
        if link != 0:
            cg = (1.0 - qi) * g2 * R
            ch = qi * h2 * R
            for j in range(p):
                for k in range(p):
                    bb = B[i, j] * B[i, k]
                    J[j, k] += cg * bb
                    J[p + j, p + k] += ch * bb
    return psi, J / n


def link_np(x, link):
    """Return ``(g, g', g'')`` evaluated at the linear predictor ``x``."""
    x = np.asarray(x, dtype=float)
    if link == LINK_LINEAR:
        return x, np.ones_like(x), np.zeros_like(x)
    g = _expit_np(np.atleast_1d(x)).reshape(x.shape)
    g1 = g * _expit_np(-np.atleast_1d(x)).reshape(x.shape)
    return g, g1, g1 * (1.0 - 2.0 * g)


def _bspline_local_np(x, t, degree):
    B = _bspline_basis_np(x, t, degree)
    nb = B.shape[1]
    w = degree + 1
    first = np.argmax(B > 0, axis=1)
    off = np.minimum(first, nb - w).astype(np.int64)
    vals = B[np.arange(B.shape[0])[:, None], off[:, None] + np.arange(w)[None, :]]
    return off, vals


def _ortho_score_np(B, q, r, a, y, pi1, pi0, beta, lam, link):
    n, p = B.shape
    g, g1, g2 = link_np(B @ beta, link)
    h, h1, h2 = link_np(B @ lam, link)
    w0e = (1.0 - a) / pi0 * (y - q)
    w1e = a / pi1 * (y - r)
    R = r + w1e - (g * (1.0 - q) + h * q) + (g - h) * w0e
    Z = np.hstack([((1.0 - q) * g1)[:, None] * B, (q * h1)[:, None] * B])
    dR = -Z + np.hstack([(w0e * g1)[:, None] * B, -(w0e * h1)[:, None] * B])
    psi = Z * R[:, None]
    J = Z.T @ dR
    if link != LINK_LINEAR:
        J[:p, :p] += (B * ((1.0 - q) * g2 * R)[:, None]).T @ B
        J[p:, p:] += (B * (q * h2 * R)[:, None]).T @ B
    return psi, J / n


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

if USE_NUMBA:
    bspline_basis = _bspline_basis_nb
    bspline_local = _bspline_local_nb
    crossfit_blocks = _crossfit_blocks_nb
    ortho_score = _ortho_score_nb
else:
    bspline_basis = _bspline_basis_np
    bspline_local = _bspline_local_np
    crossfit_blocks = _crossfit_blocks_np
    ortho_score = _ortho_score_np

KERNELS = {
    "bspline_basis": (_bspline_basis_nb, _bspline_basis_np),
    "bspline_local": (_bspline_local_nb, _bspline_local_np),
    "crossfit_blocks": (_crossfit_blocks_nb, _crossfit_blocks_np),
    "ortho_score": (_ortho_score_nb, _ortho_score_np),
}
