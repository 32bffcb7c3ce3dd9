"""Topology and impedance recovery from smart-meter (magnitude) data.

Covers moment-based recovery of the sensitivity matrices ``R`` and ``X``,
Laplacian fitting on probing differences, closed-form line-resistance
estimation for a known topology, and exact desk-scale mixed-integer
identification over a line library by spanning-tree enumeration.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import khatri_rao, qr

from .additive_tree import DistanceMatrix, complex_recursive_grouping, recursive_grouping
from .errors import NumericalError, RankDeficiencyError, StructuralError
from .graphs import components, minimum_spanning_tree
from .grid import Feeder, LineLibrary, build_incidence, enumerate_spanning_trees
from .simulate import CovarianceBundle

log = logging.getLogger(__name__)

RHO_FLOOR = 1e-9


# --------------------------------------------------------------------------
# Moment-based R / X recovery
# --------------------------------------------------------------------------


@dataclass
class RXEstimate:
    """Sensitivity estimates; rows are ``buses``, columns are ``columns``.

    ``identifiable[j]`` is False when the injection moments of column bus
    ``columns[j]`` do not determine the entries (NaN in ``R`` and ``X``).
    """

    R: np.ndarray
    X: np.ndarray
    buses: list
    columns: list
    identifiable: np.ndarray
    mode: str

    def square(self) -> tuple[np.ndarray, np.ndarray]:
        """Symmetrized ``(R, X)`` on the ``columns x columns`` block."""
        pos = [self.buses.index(b) for b in self.columns]
        Rs, Xs = self.R[pos], self.X[pos]
        return 0.5 * (Rs + Rs.T), 0.5 * (Xs + Xs.T)


def _is_diagonal(M, rtol=1e-12):
    off = M - np.diag(np.diag(M))
    return np.abs(off).max(initial=0.0) <= rtol * max(np.abs(M).max(initial=0.0), 1e-300)


def covariance_rx(bundle: CovarianceBundle, columns=None, mode="auto", det_rtol=1e-10) -> RXEstimate:
    """Solve the moment equations for ``R`` and ``X``.

    ``Cov(v, p) = R Spp + X Sqp`` and ``Cov(v, q) = R Spq + X Sqq``. With
    uncorrelated injections (``mode="diagonal"``) every column ``n`` reduces
    to a 2 x 2 system in the injection moments of bus ``n``; the ``"block"``
    mode inverts the joint injection covariance instead, which also handles
    correlated injections inside the metered set. ``"auto"`` picks diagonal
    when the injection moments are diagonal.
    """
    buses = list(bundle.buses)
    columns = buses if columns is None else list(columns)
    cpos = np.array([buses.index(c) for c in columns])
    Svp, Svq = bundle.vp[:, cpos], bundle.vq[:, cpos]
    Spp = bundle.pp[np.ix_(cpos, cpos)]
    Sqq = bundle.qq[np.ix_(cpos, cpos)]
    Spq = bundle.pq[np.ix_(cpos, cpos)]
    if mode == "auto":
        mode = "diagonal" if all(_is_diagonal(M) for M in (Spp, Sqq, Spq)) else "block"
    k = len(columns)
    R = np.full((len(buses), k), np.nan)
    X = np.full((len(buses), k), np.nan)
    ok = np.zeros(k, dtype=bool)
    if mode == "diagonal":
        for j in range(k):
            a, b, c = Spp[j, j], Spq[j, j], Sqq[j, j]
            det = a * c - b * b
            if det <= det_rtol * max(a * c, 1e-300):
                continue
            # [R X] [[a, b], [b, c]] = [Svp Svq]
            R[:, j] = (Svp[:, j] * c - Svq[:, j] * b) / det
            X[:, j] = (Svq[:, j] * a - Svp[:, j] * b) / det
            ok[j] = True
    elif mode == "block":
        K = np.block([[Spp, Spq], [Spq.T, Sqq]])
        cond = np.linalg.cond(K)
        if not np.isfinite(cond) or cond > 1e14:
            raise NumericalError(f"joint injection covariance is singular (cond={cond:.3g})", condition=cond)
        RX = np.linalg.solve(K.T, np.hstack([Svp, Svq]).T).T
        R, X = RX[:, :k], RX[:, k:]
        ok[:] = True
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return RXEstimate(R, X, buses, columns, ok, mode)


def _distances_from_sensitivity(M, labels_with_root=True):
    """Effective distances among ``{0} + buses`` from a square sensitivity block."""
    d = np.diag(M)
    D = d[:, None] + d[None, :] - 2 * M
    if labels_with_root:
        n = M.shape[0]
        full = np.zeros((n + 1, n + 1), dtype=M.dtype)
        full[1:, 1:] = D
        full[0, 1:] = d
        full[1:, 0] = d
        D = full
    np.fill_diagonal(D, 0)
    return D


def partial_covariance_rx(bundle: CovarianceBundle, buses=None, use_reactance=False, tol=None, strict=True):
    """Recover ``(R_SS, X_SS)`` from metered-bus moments and rebuild the tree.

    Valid when injections at metered buses are uncorrelated with unmetered
    ones; correlation inside the metered set is allowed. Effective
    resistances (or impedances with ``use_reactance``) among the substation
    and ``buses`` feed recursive grouping.
    """
    buses = list(bundle.buses if buses is None else buses)
    sub = bundle.restrict(buses)
    est = covariance_rx(sub, mode="block")
    R, X = est.square()
    labels = [0] + buses
    Dr = _distances_from_sensitivity(R)
    if use_reactance:
        Dx = _distances_from_sensitivity(X)
        tree = complex_recursive_grouping(Dr, Dx, tol=tol, labels=labels, strict=strict)
    else:
        tree = recursive_grouping(DistanceMatrix(labels, Dr, tol), strict=strict)
    return est, tree


# --------------------------------------------------------------------------
# Closed-form line resistances for a known topology
# --------------------------------------------------------------------------


def khatri_rao_design(A, dV):
    """``H = (dV^T A^T) * A^T`` so that ``vec(A^T diag(rho) A dV) = H rho``."""
    A = np.asarray(A, dtype=float)
    return khatri_rao(dV.T @ A.T, A.T)


def vec(M):
    return np.asarray(M).reshape(-1, order="F")


@dataclass
class ImpedanceFit:
    rho: np.ndarray  # inverse line resistances
    cost: float
    clipped: np.ndarray

    @property
    def r(self) -> np.ndarray:
        return 1.0 / self.rho


def impedance_ls(A, dV, dP) -> ImpedanceFit:
    """LS estimate of inverse line resistances ``rho`` for known incidence ``A``.

    ``A`` may be a reduced incidence matrix (lines x buses) or a Feeder.
    Negative estimates are clipped to a small positive floor with a warning.

    Raises
    ------
    RankDeficiencyError
        If ``H`` is column-rank deficient; the message names dependent lines.
    """
    if isinstance(A, Feeder):
        A = build_incidence(A).reduced
    A = np.asarray(A, dtype=float)
    dV, dP = np.atleast_2d(dV), np.atleast_2d(dP)
    H = khatri_rao_design(A, dV)
    p = vec(dP)
    _, Rq, piv = qr(H, mode="economic", pivoting=True)
    diag = np.abs(np.diag(Rq))
    rank = int(np.sum(diag > 1e-10 * max(diag[0], 1e-300))) if diag.size else 0
    if rank < A.shape[0]:
        dependent = sorted(int(i) for i in piv[rank:])
        raise RankDeficiencyError(f"design matrix has rank {rank} < {A.shape[0]}; dependent lines {dependent}", rank=rank, required=A.shape[0])
    rho = np.linalg.lstsq(H, p, rcond=None)[0]
    cost = float(np.sum((p - H @ rho) ** 2))
    clipped = rho < RHO_FLOOR
    if clipped.any():
        warnings.warn(f"clipping {int(clipped.sum())} nonpositive inverse resistances", RuntimeWarning)
        rho = np.where(clipped, RHO_FLOOR, rho)
    return ImpedanceFit(rho, cost, clipped)


# --------------------------------------------------------------------------
# Laplacian fit on probing data
# --------------------------------------------------------------------------


@dataclass
class LaplacianFit:
    """Result of the regularized Laplacian fit.

    ``objective[k]`` is evaluated with the regularization weights in force at
    iteration ``k`` (``lam_trace``, ``mu_trace``); it is non-increasing while
    the weights are fixed.
    """

    G: np.ndarray
    objective: np.ndarray
    lam_trace: np.ndarray
    mu_trace: np.ndarray
    lam: float
    mu: float
    tree: list
    iterations: int
    converged: bool
    tree_G: np.ndarray | None = None
    info: dict = field(default_factory=dict)


def _logdet_pd(G):
    """``log det G`` for positive definite ``G``; ``-inf`` outside the cone."""
    try:
        L = np.linalg.cholesky(G)
    except np.linalg.LinAlgError:
        return -np.inf
    return 2.0 * float(np.sum(np.log(np.diag(L))))


def _laplacian_objective(G, Q, B, pp, lam, mu, C):
    logdet = _logdet_pd(G)
    if not np.isfinite(logdet):
        return np.inf
    fit = pp - 2 * np.sum(G * B) + np.sum(G * (G @ Q))
    return fit + lam * np.sum(G * C) - mu * logdet


def _check_priors(n, forbidden):
    """Bus-pair mask of allowed entries; reject priors that disconnect the grid."""
    nodes = range(n + 1)
    banned = {tuple(sorted(e)) for e in forbidden}
    kept = [(a, b) for a in nodes for b in nodes if a < b and (a, b) not in banned]
    if len(components(nodes, kept)) > 1:
        raise StructuralError("forced-zero priors disconnect the grid")
    allowed = np.ones((n, n), dtype=bool)
    for a, b in banned:
        if a > 0 and b > 0:
            allowed[a - 1, b - 1] = allowed[b - 1, a - 1] = False
    return allowed, banned


def laplacian_tree(G, banned=()) -> list:
    """Maximum spanning tree over buses and substation from a Laplacian estimate.

    Bus pairs weigh ``-G_mn``; the substation link of bus ``n`` weighs the row
    sum ``(G 1)_n``, its conductance to ground.
    """
    n = G.shape[0]
    banned = {tuple(sorted(e)) for e in banned}
    weights = {}
    rows = G.sum(axis=1)
    for i in range(n):
        if (0, i + 1) not in banned:
            weights[(0, i + 1)] = rows[i]
        for j in range(i + 1, n):
            if (i + 1, j + 1) not in banned:
                weights[(i + 1, j + 1)] = -0.5 * (G[i, j] + G[j, i])
    return minimum_spanning_tree(range(n + 1), weights, maximum=True)


class _SymmetricVars:
    """Map between free entries of a symmetric matrix and a parameter vector.

    The first ``n`` parameters are the diagonal; the rest are allowed
    strictly-upper entries, which are constrained to be nonpositive.
    """

    def __init__(self, allowed):
        n = allowed.shape[0]
        iu = [(i, j) for i in range(n) for j in range(i + 1, n) if allowed[i, j]]
        self.n = n
        self.rows = np.array([i for i in range(n)] + [i for i, _ in iu], dtype=int)
        self.cols = np.array([i for i in range(n)] + [j for _, j in iu], dtype=int)
        self.n_diag = n
        T = np.zeros((n * n, len(self.rows)))
        for k, (i, j) in enumerate(zip(self.rows, self.cols)):
            T[i * n + j, k] = 1.0
            T[j * n + i, k] = 1.0
        self.T = T

    def to_matrix(self, x):
        G = np.zeros((self.n, self.n))
        G[self.rows, self.cols] = x
        G[self.cols, self.rows] = x
        return G

    def from_matrix(self, G):
        return G[self.rows, self.cols].copy()

    def reduce(self, M):
        """Gradient in parameter space from a symmetric matrix gradient."""
        return self.T.T @ M.reshape(-1)

    def project(self, x):
        x = x.copy()
        x[self.n_diag :] = np.minimum(x[self.n_diag :], 0.0)
        return x


def _arc_search(objective, project, x, f_x, g, d, sigma=1e-4, min_step=1e-14):
    """Armijo backtracking along the projection arc ``P(x + t d)``."""
    step = 1.0
    while step >= min_step:
        x_new = project(x + step * d)
        f_new = objective(x_new)
        if np.isfinite(f_new) and f_new <= f_x + sigma * (g @ (x_new - x)) and f_new <= f_x:
            return x_new, f_new
        step *= 0.5
    return None, None


def _limit_polish(sv, dV, dP, x_start, rtol=1e-10, max_iter=200):
    """Maximize ``log det G`` over exact fits ``G dV = dP`` with signed entries.

    Primal active-set Newton method in null-space coordinates, started from
    ``x_start``. Returns ``None`` when the sign-constrained fit set is empty
    near the start point or the method fails.
    """
    n = sv.n
    fit_tol = 1e-8 * max(np.linalg.norm(dP), 1e-300)
    if dV.shape[1] > n:
        # G dV = dP holds iff it holds on the row space of dV and dP vanishes off it
        U, s, Wt = np.linalg.svd(dV, full_matrices=False)
        keep = s > 1e-12 * max(s[0], 1e-300)
        U, s, Wt = U[:, keep], s[keep], Wt[keep]
        dP_c = dP @ Wt.T
        if np.linalg.norm(dP - dP_c @ Wt) > fit_tol:
            return None
        dV, dP = U * s, dP_c
    D = np.kron(np.eye(n), dV.T) @ sv.T
    p = dP.reshape(-1)
    x_ls = np.linalg.lstsq(D, p, rcond=None)[0]
    if np.linalg.norm(D @ x_ls - p) > fit_tol:
        return None
    _, s, Vt = np.linalg.svd(D)
    rank = int(np.sum(s > rtol * s[0]))
    N = Vt[rank:].T
    off = np.arange(x_ls.size) >= sv.n_diag
    scale = max(np.abs(x_start).max(), 1e-300)
    working = off & (x_start > -1e-6 * scale)

    def restrict(working, target):
        # point of the fit set with working entries at zero, closest to target
        Nw = N[working]
        if N.shape[1] == 0:
            return (x_ls if np.all(np.abs(x_ls[working]) <= 1e-12 * scale) else None), N
        if Nw.shape[0]:
            z0 = np.linalg.lstsq(Nw, -x_ls[working], rcond=None)[0]
            if np.linalg.norm(x_ls[working] + Nw @ z0) > 1e-10 * scale:
                return None, None
            _, sw, Vw = np.linalg.svd(Nw)
            rw = int(np.sum(sw > 1e-10 * max(sw[0], 1e-300)))
            M = Vw[rw:].T
        else:
            z0 = np.zeros(N.shape[1])
            M = np.eye(N.shape[1])
        Bz = N @ M
        xp = x_ls + N @ z0
        w = np.linalg.lstsq(Bz, target - xp, rcond=None)[0] if Bz.shape[1] else np.zeros(0)
        return xp + Bz @ w, Bz

    for _ in range(x_ls.size):
        x, Bz = restrict(working, x_start)
        if x is None:
            return None
        bad = off & ~working & (x > 0)
        if not bad.any():
            break
        working |= bad
    else:
        return None
    x[working] = 0.0

    def phi(x):
        return -_logdet_pd(sv.to_matrix(x))

    f = phi(x)
    if not np.isfinite(f):
        return None
    for _ in range(max_iter):
        G = sv.to_matrix(x)
        Ginv = np.linalg.inv(G)
        g = sv.reduce(-Ginv)
        if Bz.shape[1]:
            H = sv.T.T @ np.kron(Ginv, Ginv) @ sv.T
            gr = Bz.T @ g
            Hr = Bz.T @ H @ Bz
            w = -np.linalg.lstsq(Hr, gr, rcond=None)[0]
            d = Bz @ w
            decrement = -float(gr @ w)
        else:
            d = np.zeros_like(x)
            decrement = 0.0
        if decrement > 1e-20:
            # ratio test against inactive sign constraints
            step, block = 1.0, None
            for k in np.flatnonzero(off & ~working & (d > 0)):
                t = -x[k] / d[k]
                if t < step:
                    step, block = t, k
            while step > 1e-16:
                x_new = x + step * d
                f_new = phi(x_new)
                if np.isfinite(f_new) and f_new <= f + 1e-4 * step * float(g @ d):
                    break
                step *= 0.5
                block = None
            else:
                return None
            x, f = x_new, f_new
            if block is not None:
                x[block] = 0.0
                working[block] = True
                x, Bz = restrict(working, x)
                if x is None:
                    return None
                x[working] = 0.0
                f = phi(x)
                if not np.isfinite(f):
                    return None
            continue
        # stationary on the working set: release a constraint with a wrong-sign multiplier
        idx = np.flatnonzero(working)
        if idx.size == 0 or N.shape[1] == 0:
            return x
        nu = np.linalg.lstsq(N[idx].T, -(N.T @ g), rcond=None)[0]
        k = int(np.argmin(nu))
        if nu[k] >= -1e-10 * max(np.abs(nu).max(), 1e-300):
            return x
        working[idx[k]] = False
        x, Bz = restrict(working, x)
        if x is None:
            return None
        x[working] = 0.0
        f = phi(x)
        if not np.isfinite(f):
            return None
    return x


def probing_laplacian_fit(
    dV,
    dP,
    lam=None,
    mu=None,
    forbidden=(),
    continuation=True,
    stage_iter=20,
    n_stages=12,
    lam_factor=0.25,
    mu_factor=0.5,
    max_iter=5000,
    final_iter=200,
    tol=1e-12,
    refit=True,
    polish=True,
    G0=None,
) -> LaplacianFit:
    """Fit a reduced Laplacian ``G`` to probing differences.

    Minimizes ``||dP - G dV||_F^2 + lam tr[G (I + 11^T)] - mu log det G`` over
    symmetric ``G`` with nonpositive off-diagonal entries. ``dP`` holds all
    bus rows (zero outside the probed set). ``forbidden`` lists bus pairs
    ``(m, n)`` known to be disconnected; pairs with the substation only
    restrict the spanning-tree step.

    The solver is a projected Newton method for the sign constraints with an
    Armijo search along the projection arc, so the objective never increases
    while the weights are fixed. With ``continuation`` the weights are shrunk
    by ``lam_factor`` and ``mu_factor`` after each stage of at most
    ``stage_iter`` iterations, ``n_stages`` times; the last stage runs for at
    most ``final_iter`` iterations. The trace weight decays
    faster than the barrier weight: on leaf-probing data the fit leaves a set
    of exact solutions, and the barrier-dominated limit is the one that
    returns the true Laplacian when it is identifiable.

    With ``polish`` the continuation result seeds an active-set Newton
    solve of the limit problem: maximize ``log det G`` over the sign-feasible
    exact fits of the data. It is used only when that set is nonempty near
    the iterate; ``info["polished"]`` reports whether it was. On feeders where
    the fit set is unbounded in ``log det`` the estimate diverges and only
    the tree may survive.

    The returned ``tree`` is the maximum-weight spanning tree of the estimate;
    with ``refit`` the line resistances on that tree are re-estimated in
    closed form and stored as ``tree_G``.
    """
    dV, dP = np.atleast_2d(np.asarray(dV, float)), np.atleast_2d(np.asarray(dP, float))
    n = dV.shape[0]
    allowed, banned = _check_priors(n, forbidden)
    Q = dV @ dV.T
    B = dP @ dV.T
    pp = float(np.sum(dP * dP))
    C = np.eye(n) + np.ones((n, n))
    qn = float(np.linalg.norm(Q, 2))
    lam = 1e-3 * qn if lam is None else float(lam)
    mu = 1e-4 * qn if mu is None else float(mu)
    if mu <= 0:
        raise ValueError("the barrier weight mu must be positive")
    lam0, mu0 = lam, mu
    sv = _SymmetricVars(allowed)
    eye = np.eye(n)
    K_fit = np.kron(Q, eye) + np.kron(eye, Q)

    def objective(x):
        return _laplacian_objective(sv.to_matrix(x), Q, B, pp, lam, mu, C)

    scale = np.trace(B) / max(np.trace(Q), 1e-300)
    x = sv.from_matrix(max(scale, 1e-6) * eye if G0 is None else np.asarray(G0, float))
    if G0 is not None and not np.isfinite(objective(x)):
        raise ValueError("G0 must be positive definite")
    f_x = objective(x)
    obj, lt, mt = [], [], []
    stages = n_stages if continuation else 0
    it_stage = 0
    checkpoints = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        G = sv.to_matrix(x)
        Ginv = np.linalg.inv(G)
        grad_m = (G @ Q + Q @ G) - (B + B.T) + lam * C - mu * Ginv
        g = sv.reduce(grad_m)
        H = sv.T.T @ (K_fit + mu * np.kron(Ginv, Ginv)) @ sv.T
        # Bertsekas active set: bound entries pushed outward by the gradient
        off = np.arange(x.size) >= sv.n_diag
        hd = np.maximum(np.abs(np.diag(H)), 1e-300)
        eps = min(0.1 * float(np.abs(x).max()), float(np.linalg.norm(x - sv.project(x - g / hd))))
        active = off & (x >= -eps) & (g < 0)
        free = ~active
        d = np.zeros_like(x)
        Hf = H[np.ix_(free, free)]
        try:
            d[free] = -np.linalg.solve(Hf, g[free])
        except np.linalg.LinAlgError:
            d[free] = -g[free]
        d[active] = -g[active] / max(np.abs(np.diag(H)).max(), 1e-300)
        if g @ d >= 0:
            d = -g / max(np.abs(np.diag(H)).max(), 1e-300)
        x_new, f_new = _arc_search(objective, sv.project, x, f_x, g, d)
        if x_new is None:
            # Newton arc failed; fall back to a scaled projected gradient step
            x_new, f_new = _arc_search(objective, sv.project, x, f_x, g, -g / max(np.abs(np.diag(H)).max(), 1e-300))
        if x_new is None:
            x_new, f_new = x, f_x
        # objective / mu is self-concordant, so the decrement over mu bounds
        # the remaining suboptimality in units of mu
        stationarity = max(-float(g[free] @ d[free]), 0.0) / mu
        change = float(np.linalg.norm(x_new - x))
        x, f_x = x_new, f_new
        obj.append(f_x)
        lt.append(lam)
        mt.append(mu)
        it_stage += 1
        stage_done = stationarity < tol or it_stage >= stage_iter
        if stages > 0 and stage_done:
            if stationarity < tol:
                checkpoints.append(x.copy())
            lam *= lam_factor
            mu *= mu_factor
            stages -= 1
            it_stage = 0
            f_x = objective(x)
        elif stages == 0 and (stationarity < tol or change == 0.0 or it_stage >= final_iter):
            converged = stationarity < tol
            break

    polished = False
    if polish and continuation:
        # the limit problem is strictly concave, so any successful start will do;
        # earlier well-converged stages are tried when the final iterate is poor
        for start in [x] + checkpoints[::-1][:8]:
            x_limit = _limit_polish(sv, dV, dP, start)
            if x_limit is not None:
                x, polished = x_limit, True
                break
    G = sv.to_matrix(x)
    tree = laplacian_tree(G, banned)
    fit = LaplacianFit(
        G=G,
        objective=np.array(obj),
        lam_trace=np.array(lt),
        mu_trace=np.array(mt),
        lam=lam0,
        mu=mu0,
        tree=tree,
        iterations=it,
        converged=converged,
    )
    fit.info["polished"] = polished
    if refit:
        try:
            feeder = Feeder(n + 1, [(a, b, 1.0, 1.0) for a, b in tree])
            A = build_incidence(feeder).reduced
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                rho = impedance_ls(A, dV, dP).rho
            fit.tree_G = A.T @ (rho[:, None] * A)
        except (RankDeficiencyError, StructuralError) as exc:
            fit.info["refit_error"] = str(exc)
    return fit



# --------------------------------------------------------------------------
# Mixed-integer identification by enumeration
# --------------------------------------------------------------------------


@dataclass
class MilpSolution:
    w: np.ndarray
    rho: np.ndarray  # on all library lines; zero for unselected
    objective: float  # reduced LS cost
    eq_objective: float  # ||p||^2 + the Woodbury-form objective
    n_candidates: int
    max_gap: float  # worst relative gap between the two objective forms
    skipped: list = field(default_factory=list)
    table: list = field(default_factory=list)  # (w tuple, cost)


def milp_identify(library: LineLibrary, dV, dP, cap=10**6, check_forms=True) -> MilpSolution:
    """Select the spanning tree of ``library`` that best explains probing data.

    Each tree ``w`` is scored by the reduced LS cost
    ``||p||^2 - b_w^T M_ww^{-1} b_w`` where ``M = H^T H`` and ``b = H^T p``
    over the whole library. With ``check_forms`` the equivalent formulation
    ``b^T D_w b + b^T D_w x`` with ``(C - D_w) x = D_w b`` and
    ``C = (M + I)^{-1}`` is evaluated as well and the largest relative gap
    between the forms is reported.
    """
    dV, dP = np.atleast_2d(dV), np.atleast_2d(dP)
    A = library.reduced_incidence.astype(float)
    H = khatri_rao_design(A, dV)
    p = vec(dP)
    p2 = float(p @ p)
    M = H.T @ H
    b = H.T @ p
    Lall = A.shape[0]
    Cm = np.linalg.inv(M + np.eye(Lall)) if check_forms else None
    best = None
    skipped, table = [], []
    max_gap = 0.0
    count = 0
    for w in enumerate_spanning_trees(library, cap=cap):
        count += 1
        idx = np.flatnonzero(w)
        Mw = M[np.ix_(idx, idx)]
        try:
            cw = np.linalg.cond(Mw)
            if not np.isfinite(cw) or cw > 1e14:
                raise np.linalg.LinAlgError(f"cond {cw:.3g}")
            rho_w = np.linalg.solve(Mw, b[idx])
        except np.linalg.LinAlgError as exc:
            skipped.append((tuple(int(v) for v in w), f"singular normal matrix: {exc}"))
            continue
        cost = p2 - float(b[idx] @ rho_w)
        eq_cost = np.nan
        if check_forms:
            Dw = np.diag(w.astype(float))
            try:
                x = np.linalg.solve(Cm - Dw, Dw @ b)
                eq_cost = p2 + float(b @ Dw @ b + b @ Dw @ x)
                gap = abs(eq_cost - cost) / max(p2, 1e-300)
                max_gap = max(max_gap, gap)
            except np.linalg.LinAlgError:
                skipped.append((tuple(int(v) for v in w), "singular C - D_w"))
        table.append((tuple(int(v) for v in w), cost))
        if best is None or cost < best[0] - 1e-15 * max(p2, 1e-300):
            rho = np.zeros(Lall)
            rho[idx] = rho_w
            best = (cost, w.copy(), rho, eq_cost)
    if best is None:
        raise NumericalError("no spanning tree of the library could be scored")
    cost, w, rho, eq_cost = best
    return MilpSolution(w, rho, cost, eq_cost, count, max_gap, skipped, table)
