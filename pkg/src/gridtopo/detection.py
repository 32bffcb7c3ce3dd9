"""Topology detection: choosing the energized lines of a known line library.

A status vector ``w`` (one 0/1 entry per library line) selects lines; the
topology matrices are linear in ``w`` through the library incidence matrix
``A`` (reduced, substation column dropped):
``Y(w) = A^T D_w D_y A``, ``G(w) = A^T D_w D_r^{-1} A`` and
``R(w) = G(w)^{-1}``, with ``B(w)`` and ``X(w)`` built from reactances.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import khatri_rao

from .errors import EnumerationCapError, StructuralError
from .grid import LineLibrary, _UnionFind, enumerate_spanning_trees
from .simulate import InjectionModel
from .voltage_only import PhiMatrix

log = logging.getLogger(__name__)


@dataclass
class TopologyEntry:
    """Topology matrices for one status vector; ``R``/``X`` are None when undefined."""

    w: tuple
    Y: np.ndarray
    G: np.ndarray
    B: np.ndarray
    R: np.ndarray | None
    X: np.ndarray | None
    spanning: bool


class ParameterizedTopology:
    """Status-vector parameterization of a library's topology matrices (cached)."""

    def __init__(self, library: LineLibrary):
        self.library = library
        self.A = library.reduced_incidence.astype(float)
        self.y = library.y
        self.r = library.r
        self.x = library.x
        self._cache = {}

    def check(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        if w.shape != (self.library.n_lines,):
            raise StructuralError(f"status vector needs {self.library.n_lines} entries")
        for l, s in enumerate(self.library.status):
            if s is not None and w[l] != s:
                raise StructuralError(f"line {l} has known status {s}, got {w[l]:g}")
        return w

    def matrices(self, w, weights):
        return self.A.T @ ((np.asarray(w, float) * weights)[:, None] * self.A)

    def entry(self, w) -> TopologyEntry:
        w = self.check(w)
        key = tuple(w.tolist())
        if key in self._cache:
            return self._cache[key]
        Y = self.matrices(w, self.y)
        G = self.matrices(w, 1.0 / self.r)
        B = self.matrices(w, 1.0 / self.x)
        binary = np.all((w == 0) | (w == 1))
        spanning = bool(binary and self.library.is_spanning_tree(w.astype(int)))
        R = X = None
        if spanning or not binary:
            try:
                np.linalg.cholesky(G)
                np.linalg.cholesky(B)
                R, X = np.linalg.inv(G), np.linalg.inv(B)
                R, X = 0.5 * (R + R.T), 0.5 * (X + X.T)
            except np.linalg.LinAlgError:
                R = X = None
        out = TopologyEntry(key, Y, G, B, R, X, spanning)
        self._cache[key] = out
        return out


def parameterize(library: LineLibrary, w) -> TopologyEntry:
    """Topology matrices for status vector ``w``; ``R``, ``X`` undefined unless it spans."""
    return ParameterizedTopology(library).entry(w)


@dataclass
class DetectionResult:
    w: np.ndarray
    objective: float
    method: str
    n_candidates: int = 0
    table: list = field(default_factory=list)  # (w tuple, objective)
    info: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# phasor data
# --------------------------------------------------------------------------


def detection_design(library: LineLibrary, U) -> np.ndarray:
    """``H = (U^T A^T D_y) * A^T`` so that ``vec(Y(w) U) = H w`` (column-major)."""
    A = library.reduced_incidence.astype(float)
    U = np.atleast_2d(np.asarray(U, dtype=complex))
    return khatri_rao(U.T @ A.T @ np.diag(library.y), A.T.astype(complex))


def miqp_detect(U, I, library: LineLibrary, u0=0.0, cap=10**6) -> DetectionResult:
    """Spanning tree of ``library`` minimizing ``||vec(I) - H w||^2``.

    ``U`` holds voltage phasors (minus ``u0``) and ``I`` current injections
    for buses ``1..N``. The quadratic is expanded once and every spanning
    tree is scored exactly.
    """
    U = np.atleast_2d(np.asarray(U, dtype=complex)) - u0
    I = np.atleast_2d(np.asarray(I, dtype=complex))
    H = detection_design(library, U)
    i = I.reshape(-1, order="F")
    M = (H.conj().T @ H).real
    b = (H.conj().T @ i).real
    i2 = float(np.vdot(i, i).real)
    best, table, count = None, [], 0
    for w in enumerate_spanning_trees(library, cap=cap):
        count += 1
        wf = w.astype(float)
        cost = i2 - 2.0 * float(b @ wf) + float(wf @ M @ wf)
        table.append((tuple(int(v) for v in w), cost))
        if best is None or cost < best[1]:
            best = (w.copy(), cost)
    if best is None:
        raise StructuralError("library contains no spanning tree")
    return DetectionResult(best[0], max(best[1], 0.0), "miqp-detect", count, table)


def candidate_fit_detect(U, I, library: LineLibrary, candidates, criterion="current", u0=0.0) -> DetectionResult:
    """Pick the candidate status vector with the smallest fitting error.

    ``criterion="current"`` scores ``||I - Y(w) U||_F^2``; ``"voltage"``
    scores ``||U - Y(w)^{-1} I||_F^2`` and gives singular ``Y(w)`` an
    infinite score.
    """
    if criterion not in ("current", "voltage"):
        raise ValueError("criterion must be 'current' or 'voltage'")
    U = np.atleast_2d(np.asarray(U, dtype=complex)) - u0
    I = np.atleast_2d(np.asarray(I, dtype=complex))
    par = ParameterizedTopology(library)
    table = []
    for w in candidates:
        w = np.asarray(w, dtype=int)
        Y = par.entry(w).Y
        if criterion == "current":
            score = float(np.linalg.norm(I - Y @ U) ** 2)
        else:
            try:
                cond = np.linalg.cond(Y)
                if not np.isfinite(cond) or cond > 1e14:
                    raise np.linalg.LinAlgError
                score = float(np.linalg.norm(U - np.linalg.solve(Y, I)) ** 2)
            except np.linalg.LinAlgError:
                score = np.inf
        table.append((tuple(int(v) for v in w), score))
    if not table:
        raise ValueError("no candidates given")
    s = int(np.argmin([t[1] for t in table]))
    return DetectionResult(
        np.array(table[s][0]), table[s][1], f"fit-detect-{criterion}", len(table), table, info={"index": s}
    )


# --------------------------------------------------------------------------
# maximum-likelihood detection from voltage covariances
# --------------------------------------------------------------------------


def model_covariance(R, X, model: InjectionModel, noise_sd=0.0) -> np.ndarray:
    """``Sigma_vv`` implied by the linear model for given ``R``, ``X``."""
    Spp, Sqq, Spq = model.cov_pp, model.cov_qq, model.cov_pq
    S = R @ Spp @ R + X @ Spq.T @ R + R @ Spq @ X + X @ Sqq @ X
    S = 0.5 * (S + S.T)
    return S + noise_sd**2 * np.eye(S.shape[0])


class _MLObjective:
    """``trace(Sigma(w)^{-1} S_hat) + log det Sigma(w)`` and its gradient in ``w``."""

    def __init__(self, library, S_hat, model, noise_sd):
        self.par = ParameterizedTopology(library)
        self.S_hat = np.asarray(S_hat, float)
        self.model = model
        self.noise_sd = noise_sd

    def _rx(self, w):
        G = self.par.matrices(w, 1.0 / self.par.r)
        B = self.par.matrices(w, 1.0 / self.par.x)
        try:
            np.linalg.cholesky(G)
            np.linalg.cholesky(B)
        except np.linalg.LinAlgError:
            return None, None
        return np.linalg.inv(G), np.linalg.inv(B)

    def value(self, w, with_grad=False):
        R, X = self._rx(w)
        if R is None:
            return (np.inf, None) if with_grad else np.inf
        S = model_covariance(R, X, self.model, self.noise_sd)
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            return (np.inf, None) if with_grad else np.inf
        Sinv = np.linalg.inv(S)
        f = float(np.sum(Sinv * self.S_hat)) + 2.0 * float(np.sum(np.log(np.diag(L))))
        if not with_grad:
            return f
        m = self.model
        M = Sinv - Sinv @ self.S_hat @ Sinv
        K1 = m.cov_pp @ R + m.cov_pq @ X
        K2 = m.cov_pq.T @ R + m.cov_qq @ X
        E = K1 @ M + M @ K1.T
        F = K2 @ M + M @ K2.T
        A = self.par.A
        AR, AX = A @ R, A @ X
        g = -np.einsum("li,ij,lj->l", AR, E, AR) / self.par.r - np.einsum("li,ij,lj->l", AX, F, AX) / self.par.x
        return f, g


def project_box_sum(v, total, lower=None, upper=None, tol=1e-12) -> np.ndarray:
    """Euclidean projection onto ``{lower <= w <= upper, sum(w) = total}`` by bisection."""
    v = np.asarray(v, float)
    lo_b = np.zeros_like(v) if lower is None else np.asarray(lower, float)
    hi_b = np.ones_like(v) if upper is None else np.asarray(upper, float)
    if not (lo_b.sum() - 1e-12 <= total <= hi_b.sum() + 1e-12):
        raise StructuralError("box and sum constraints are infeasible")
    lo, hi = float(np.min(v - hi_b)) - 1.0, float(np.max(v - lo_b)) + 1.0
    for _ in range(200):
        tau = 0.5 * (lo + hi)
        s = np.clip(v - tau, lo_b, hi_b).sum()
        if abs(s - total) <= tol:
            break
        if s > total:
            lo = tau
        else:
            hi = tau
    return np.clip(v - tau, lo_b, hi_b)


def _status_bounds(library):
    lower = np.array([1.0 if s == 1 else 0.0 for s in library.status])
    upper = np.array([0.0 if s == 0 else 1.0 for s in library.status])
    return lower, upper


def _round_to_tree(library, weights) -> np.ndarray:
    """Maximum-weight spanning tree of the library under known statuses."""
    n = library.n_nodes
    order = sorted(range(library.n_lines), key=lambda l: (-(np.inf if library.status[l] == 1 else weights[l]), l))
    uf = _UnionFind(n)
    w = np.zeros(library.n_lines, dtype=int)
    for l in order:
        if library.status[l] == 0:
            continue
        c = library.candidates[l]
        if uf.union(c.parent, c.child):
            w[l] = 1
    if not library.is_spanning_tree(w):
        raise StructuralError("library has no spanning tree under the known statuses")
    return w


def _greedy_swap(library, objective, w, max_rounds=100):
    """Best-improvement line swaps that keep a spanning tree."""
    f = objective(w.astype(float))
    for _ in range(max_rounds):
        best = (f, None)
        inside = [l for l in np.flatnonzero(w) if library.status[l] != 1]
        outside = [l for l in np.flatnonzero(w == 0) if library.status[l] != 0]
        for a in inside:
            for b in outside:
                trial = w.copy()
                trial[a], trial[b] = 0, 1
                if not library.is_spanning_tree(trial):
                    continue
                ft = objective(trial.astype(float))
                if ft < best[0] - 1e-12 * max(1.0, abs(best[0])):
                    best = (ft, trial)
        if best[1] is None:
            break
        f, w = best[0], best[1]
    return w, f


def ml_detect(
    S_hat,
    library: LineLibrary,
    model: InjectionModel,
    solver="enumerate",
    noise_sd=0.0,
    cap=10**6,
    max_iter=5000,
    tol=1e-10,
    compare=True,
) -> DetectionResult:
    """Maximum-likelihood line statuses from a sample voltage covariance.

    Minimizes ``trace(Sigma(w)^{-1} S_hat) - log det Sigma(w)^{-1}`` where
    ``Sigma(w)`` follows from the linear model, the injection ``model`` and
    ``R(w)``, ``X(w)``. ``solver="enumerate"`` scores every spanning tree.
    ``solver="pgd"`` runs projected gradient descent over the relaxation
    ``0 <= w <= 1, sum(w) = N`` with an Armijo search, rounds to the
    max-weight spanning tree and improves it by greedy line swaps. With
    ``compare`` the enumeration optimum is computed as well when the library
    is small enough, and ``info["matches_enumeration"]`` flags equality.
    """
    obj = _MLObjective(library, S_hat, model, noise_sd)
    if solver == "enumerate":
        return _ml_enumerate(obj, library, cap)
    if solver != "pgd":
        raise ValueError("solver must be 'enumerate' or 'pgd'")
    n_sel = library.n_nodes - 1
    lower, upper = _status_bounds(library)
    w = project_box_sum(np.full(library.n_lines, n_sel / library.n_lines), n_sel, lower, upper)
    f, g = obj.value(w, with_grad=True)
    if not np.isfinite(f):
        raise StructuralError("relaxed starting point gives a singular model covariance")
    step = 1.0 / max(np.abs(g).max(), 1e-300)
    trace = [f]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        while True:
            w_new = project_box_sum(w - step * g, n_sel, lower, upper)
            f_new = obj.value(w_new)
            if np.isfinite(f_new) and f_new <= f + 1e-4 * float(g @ (w_new - w)):
                break
            step *= 0.5
            if step < 1e-300:
                w_new, f_new = w, f
                break
        change = float(np.linalg.norm(w_new - w))
        w = w_new
        f, g = obj.value(w, with_grad=True)
        trace.append(f)
        step *= 2.0
        if change <= tol:
            converged = True
            break
    relaxed = w.copy()
    try:
        w_round = _round_to_tree(library, relaxed)
        w_round, f_round = _greedy_swap(library, obj.value, w_round)
    except StructuralError:
        log.warning("rounding failed; falling back to enumeration")
        res = _ml_enumerate(obj, library, cap)
        res.info["rounding_failed"] = True
        return res
    info = {"relaxed": relaxed, "relaxed_objective": f, "trace": np.array(trace), "iterations": it, "converged": converged}
    res = DetectionResult(w_round, f_round, "ml-detect-pgd", info=info)
    if compare:
        try:
            ref = _ml_enumerate(obj, library, cap)
            res.info["enumeration_objective"] = ref.objective
            res.info["matches_enumeration"] = bool(np.array_equal(ref.w, w_round))
        except EnumerationCapError:
            res.info["matches_enumeration"] = None
    return res


def _ml_enumerate(obj, library, cap) -> DetectionResult:
    best, table, count = None, [], 0
    for w in enumerate_spanning_trees(library, cap=cap):
        count += 1
        f = obj.value(w.astype(float))
        table.append((tuple(int(v) for v in w), f))
        if best is None or f < best[1]:
            best = (w.copy(), f)
    if best is None:
        raise StructuralError("library contains no spanning tree")
    return DetectionResult(best[0], best[1], "ml-detect-enum", count, table)


# --------------------------------------------------------------------------
# phi triple statistic
# --------------------------------------------------------------------------


def phi_sign_group(phi: PhiMatrix, anchor, candidates, rtol=1e-8) -> dict:
    """Group candidate buses by the sign of ``phi_ka + phi_la - phi_kl``.

    The statistic equals ``2 Cov(v_k - v_a, v_l - v_a)``. Buses are grouped
    by connected components of the strictly positive relation; entries with
    magnitude at most ``rtol`` times the largest one count as zero and are
    listed as ambiguous pairs.

    Returns ``{"groups", "sign", "statistic", "ambiguous", "labels"}``.
    """
    labels = [k for k in candidates if k != anchor]
    n = len(labels)
    stat = np.zeros((n, n))
    for i, k in enumerate(labels):
        for j, l in enumerate(labels):
            stat[i, j] = phi.value(k, anchor) + phi.value(l, anchor) - (phi.value(k, l) if k != l else 0.0)
    scale = float(np.abs(stat).max()) if n else 0.0
    tol = rtol * scale
    sign = np.where(stat > tol, 1, np.where(stat < -tol, -1, 0))
    uf = _UnionFind(n)
    for i in range(n):
        for j in range(i + 1, n):
            if sign[i, j] > 0:
                uf.union(i, j)
    groups = {}
    for i in range(n):
        groups.setdefault(uf.find(i), []).append(labels[i])
    ambiguous = [(labels[i], labels[j]) for i in range(n) for j in range(i + 1, n) if sign[i, j] == 0]
    return {
        "groups": sorted(sorted(g) for g in groups.values()),
        "sign": sign,
        "statistic": stat,
        "ambiguous": ambiguous,
        "labels": labels,
    }
