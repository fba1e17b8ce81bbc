"""Numba kernels for the coordinate-descent solvers.

These are the hot loops: the cyclic coordinate descent for the penalized
multinomial fit and the nodewise quadratic-program descent used to estimate
rows of the inverse Hessian. Everything here is numeric plumbing; the public
contracts live in solver.py and debias.py.
"""

import numpy as np
from numba import njit

_NJIT = dict(cache=True, nogil=True, fastmath=True)

# Status bits reported by cd_fit.
STATUS_DEGENERATE = 1   # some coordinate had zero curvature and was skipped
STATUS_FALLBACK = 2     # at least one sweep was redone with fallback weights
STATUS_STUCK = 4        # a fallback sweep still increased the objective

ACTIVE_CAP = 100        # polish passes per majorization


@njit(**_NJIT)
def _soft(a, b):
    if a > b:
        return a - b
    if a < -b:
        return a + b
    return 0.0


@njit(**_NJIT)
def _refresh_probs(etaT, k, pk):
    """Posterior probability of class k for each sample, with max-shift."""
    km1, n = etaT.shape
    for i in range(n):
        m = 0.0
        for l in range(km1):
            if etaT[l, i] > m:
                m = etaT[l, i]
        denom = np.exp(-m)
        for l in range(km1):
            denom += np.exp(etaT[l, i] - m)
        pk[i] = np.exp(etaT[k, i] - m) / denom


@njit(**_NJIT)
def _penalized_objective(etaT, y_idx, lam, B):
    """Averaged negative log-likelihood plus lam * l1(B), from cached eta."""
    km1, n = etaT.shape
    nll = 0.0
    for i in range(n):
        m = 0.0
        for l in range(km1):
            if etaT[l, i] > m:
                m = etaT[l, i]
        s = np.exp(-m)
        for l in range(km1):
            s += np.exp(etaT[l, i] - m)
        lse = m + np.log(s)
        own = 0.0
        if y_idx[i] < km1:
            own = etaT[y_idx[i], i]
        nll += lse - own
    pen = 0.0
    for k in range(B.shape[0]):
        for j in range(B.shape[1]):
            pen += abs(B[k, j])
    return nll / n + lam * pen


@njit(**_NJIT)
def _update_coord(XF, X2F, lam, B, eta_k, k, j, w, s, inv_n):
    """One coordinate move; returns the applied delta (0 on degenerate v)."""
    n = XF.shape[0]
    vj = 0.0
    num = 0.0
    for i in range(n):
        vj += w[i] * X2F[i, j]
        num += XF[i, j] * s[i]
    vj *= inv_n
    num *= inv_n
    if vj <= 1e-12:
        return 0.0, True
    bnew = _soft(num + vj * B[k, j], lam) / vj
    delta = bnew - B[k, j]
    if delta != 0.0:
        B[k, j] = bnew
        for i in range(n):
            eta_k[i] += delta * XF[i, j]
            s[i] -= w[i] * XF[i, j] * delta
    return delta, False


@njit(**_NJIT)
def _intercept_move(a, eta_k, k, w, s, inv_n):
    n = eta_k.shape[0]
    v0 = 0.0
    g0 = 0.0
    for i in range(n):
        v0 += w[i]
        g0 += s[i]
    v0 *= inv_n
    g0 *= inv_n
    if v0 <= 1e-12:
        return 0.0
    delta = g0 / v0
    if delta != 0.0:
        a[k] += delta
        for i in range(n):
            eta_k[i] += delta
            s[i] -= w[i] * delta
    return delta


@njit(**_NJIT)
def _class_pass(XF, X2F, lam, B, a, etaT, k, w, s, use_intercept, mask,
                active_only):
    """One weighted-least-squares pass over the class-k coordinates.

    The weights w are frozen for the pass; s tracks the weighted working
    residual, which starts at y - p at the enclosing majorization and absorbs
    w * x_j * delta after each accepted update, so the update numerator
    (1/n) sum_i x_ij s_i + v_j b_j reproduces the textbook w*x*r form.
    With ``active_only`` the pass visits only currently nonzero coordinates.
    Returns (max_delta, degenerate_seen).
    """
    n, p = XF.shape
    inv_n = 1.0 / n
    eta_k = etaT[k]
    max_delta = 0.0
    degen = False
    if use_intercept:
        d = _intercept_move(a, eta_k, k, w, s, inv_n)
        if abs(d) > max_delta:
            max_delta = abs(d)
    for j in range(p):
        if mask[k, j] == 0:
            continue
        if active_only and B[k, j] == 0.0:
            continue
        delta, dg = _update_coord(XF, X2F, lam, B, eta_k, k, j, w, s, inv_n)
        degen |= dg
        if abs(delta) > max_delta:
            max_delta = abs(delta)
    return max_delta, degen


@njit(**_NJIT)
def _outer_sweep(XF, X2F, YT, lam, B, a, etaT, pk, w, s, use_intercept, mask,
                 fallback, tol, max_inner):
    """One outer iteration: every class to inner convergence. Returns stats.

    Each majorization refreshes the class posteriors, freezes the weights,
    runs one full pass, and then polishes the active set on the frozen
    quadratic subproblem before re-majorizing.
    """
    km1 = B.shape[0]
    n = XF.shape[0]
    max_delta = 0.0
    degen = False
    for k in range(km1):
        for _ in range(max_inner):
            _refresh_probs(etaT, k, pk)
            for i in range(n):
                if fallback:
                    w[i] = pk[i] * (1.0 - pk[i]) + 1e-5
                else:
                    w[i] = pk[i]
                s[i] = YT[k, i] - pk[i]
            d, dg = _class_pass(XF, X2F, lam, B, a, etaT, k, w, s,
                                use_intercept, mask, False)
            degen |= dg
            if d > max_delta:
                max_delta = d
            if d < tol:
                break
            for _ in range(ACTIVE_CAP):
                d_act, dg = _class_pass(XF, X2F, lam, B, a, etaT, k, w, s,
                                        use_intercept, mask, True)
                degen |= dg
                if d_act > max_delta:
                    max_delta = d_act
                if d_act < tol:
                    break
    return max_delta, degen


@njit(**_NJIT)
def _gradient_full(XF, YT, etaT, pk, G):
    """Score of the averaged loss for every (class, feature) into G."""
    n, p = XF.shape
    km1 = G.shape[0]
    inv_n = 1.0 / n
    for k in range(km1):
        _refresh_probs(etaT, k, pk)
        for j in range(p):
            g = 0.0
            for i in range(n):
                g += XF[i, j] * (pk[i] - YT[k, i])
            G[k, j] = g * inv_n


@njit(**_NJIT)
def _kkt_residual(G, B, lam):
    res = 0.0
    for k in range(B.shape[0]):
        for j in range(B.shape[1]):
            if B[k, j] > 0.0:
                r = abs(G[k, j] + lam)
            elif B[k, j] < 0.0:
                r = abs(G[k, j] - lam)
            else:
                r = abs(G[k, j]) - lam
                if r < 0.0:
                    r = 0.0
            if r > res:
                res = r
    return res


@njit(**_NJIT)
def cd_fit(XF, X2F, YT, y_idx, lam, B, a, etaT, use_intercept,
           tol, max_outer, max_inner, kkt_tol, lam_prev):
    """Cyclic coordinate descent on the penalized averaged objective.

    B, a and etaT are updated in place (etaT must hold the transposed linear
    predictor of the initial B and a on entry). ``lam_prev`` enables
    sequential screening of coordinates when fitting along a decreasing
    penalty path; pass a value <= lam to sweep every coordinate.
    Screened-out coordinates are always KKT-checked afterwards, so the
    fixed point is identical either way.

    Returns (n_sweeps, converged, kkt_res, objective, status).
    """
    km1, p = B.shape
    n = XF.shape[0]
    pk = np.empty(n)
    w = np.empty(n)
    s = np.empty(n)
    G = np.empty((km1, p))
    mask = np.ones((km1, p), dtype=np.uint8)
    B_snap = np.empty_like(B)
    a_snap = np.empty_like(a)
    eta_snap = np.empty_like(etaT)

    use_screen = lam_prev > lam and lam > 0.0
    if use_screen:
        _gradient_full(XF, YT, etaT, pk, G)
        thresh = 2.0 * lam - lam_prev
        for k in range(km1):
            for j in range(p):
                if B[k, j] == 0.0 and abs(G[k, j]) < thresh:
                    mask[k, j] = 0

    status = 0
    sweeps = 0
    converged = False
    obj = _penalized_objective(etaT, y_idx, lam, B)

    while sweeps < max_outer:
        inner_converged = False
        while sweeps < max_outer:
            B_snap[:] = B
            a_snap[:] = a
            eta_snap[:] = etaT
            obj_prev = obj
            max_delta, degen = _outer_sweep(XF, X2F, YT, lam, B, a, etaT, pk,
                                            w, s, use_intercept, mask, False,
                                            tol, max_inner)
            if degen:
                status |= STATUS_DEGENERATE
            sweeps += 1
            obj = _penalized_objective(etaT, y_idx, lam, B)
            if obj > obj_prev + 1e-10:
                # Algorithm's own weights overshot: redo the sweep with the
                # curvature weights p(1-p) + eps from the same starting point.
                B[:] = B_snap
                a[:] = a_snap
                etaT[:] = eta_snap
                status |= STATUS_FALLBACK
                max_delta, degen = _outer_sweep(XF, X2F, YT, lam, B, a, etaT,
                                                pk, w, s, use_intercept, mask,
                                                True, tol, max_inner)
                if degen:
                    status |= STATUS_DEGENERATE
                sweeps += 1
                obj = _penalized_objective(etaT, y_idx, lam, B)
                if obj > obj_prev + 1e-10:
                    B[:] = B_snap
                    a[:] = a_snap
                    etaT[:] = eta_snap
                    obj = obj_prev
                    status |= STATUS_STUCK
                    inner_converged = True
                    break
            rel = abs(obj - obj_prev) / max(1.0, abs(obj_prev))
            if max_delta < tol and rel < 1e-10:
                inner_converged = True
                break
        # Check KKT over every coordinate; re-admit screened-out violators.
        _gradient_full(XF, YT, etaT, pk, G)
        violations = 0
        if use_screen:
            for k in range(km1):
                for j in range(p):
                    if mask[k, j] == 0 and abs(G[k, j]) > lam + 1e-9:
                        mask[k, j] = 1
                        violations += 1
        if violations == 0:
            kkt = _kkt_residual(G, B, lam)
            converged = inner_converged and kkt <= kkt_tol
            return sweeps, converged, kkt, obj, status
    _gradient_full(XF, YT, etaT, pk, G)
    kkt = _kkt_residual(G, B, lam)
    return sweeps, False, kkt, obj, status


@njit(**_NJIT)
def nodewise_cd(S, j, lam, gamma, u, tol, max_iter, literal_divisor):
    """Coordinate descent for the nodewise l1 quadratic program at row j.

    gamma is the full-length coefficient vector with the slot gamma[j] pinned
    to zero; u tracks S @ gamma and must be consistent on entry. With
    ``literal_divisor`` the update divides by S[j, j] (the published form)
    instead of the QP-consistent diagonal entry S[r, r].

    Returns (n_sweeps, converged).
    """
    m = S.shape[0]
    for it in range(max_iter):
        max_delta = 0.0
        for r in range(m):
            if r == j:
                continue
            srr = S[r, r]
            div = S[j, j] if literal_divisor else srr
            if div <= 1e-12:
                continue
            z = S[r, j] - (u[r] - srr * gamma[r])
            gnew = _soft(z, lam) / div
            delta = gnew - gamma[r]
            if delta != 0.0:
                gamma[r] = gnew
                for ss in range(m):
                    u[ss] += delta * S[ss, r]
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
        if max_delta < tol:
            return it + 1, True
    return max_iter, False


@njit(**_NJIT)
def nodewise_kkt(S, j, lam, gamma, u):
    """Max KKT residual of the nodewise QP at (gamma, u = S @ gamma)."""
    m = S.shape[0]
    res = 0.0
    for r in range(m):
        if r == j:
            continue
        grad = u[r] - S[r, j]
        if gamma[r] > 0.0:
            v = abs(grad + lam)
        elif gamma[r] < 0.0:
            v = abs(grad - lam)
        else:
            v = abs(grad) - lam
            if v < 0.0:
                v = 0.0
        if v > res:
            res = v
    return res


def warmup():
    """Compile (or load from cache) every kernel on tiny inputs."""
    rng = np.random.default_rng(0)
    n, p, km1 = 6, 3, 2
    XF = np.asfortranarray(rng.standard_normal((n, p)))
    YT = np.zeros((km1, n))
    YT[0, :3] = 1.0
    YT[1, 3:5] = 1.0
    y_idx = np.array([0, 0, 0, 1, 1, 2], dtype=np.int64)
    B = np.zeros((km1, p))
    a = np.zeros(km1)
    etaT = np.zeros((km1, n))
    cd_fit(XF, XF ** 2, YT, y_idx, 0.1, B, a, etaT, False, 1e-7, 10, 10,
           1e-5, 0.0)
    S = np.eye(4)
    gamma = np.zeros(4)
    u = np.zeros(4)
    nodewise_cd(S, 0, 0.5, gamma, u, 1e-9, 10, False)
    nodewise_kkt(S, 0, 0.5, gamma, u)
