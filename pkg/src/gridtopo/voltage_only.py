"""Topology from voltage magnitudes alone: precision signatures and variance statistics.

Bus labels run ``1..N``; the substation (label 0) has constant voltage and
never appears in the covariance matrices. Edges to the substation are
attached per connected component at the bus with the smallest voltage
variance, which is the bus closest to the substation along every path.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, InsufficientDataError, NumericalError
from .graphs import TopologyEstimate, components, minimum_spanning_tree
from .simulate import CovarianceBundle, MeasurementSet

log = logging.getLogger(__name__)

ANALYTIC_ZERO_RTOL = 1e-8
CI_RTOL = 1e-6


@dataclass
class PrecisionEstimate:
    """Estimated inverse covariance; ``blocks`` holds J1, J2, J3 for joint (v, theta)."""

    S: np.ndarray
    lam: float
    method: str
    buses: list
    blocks: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def support(self, tol=0.0) -> set:
        """Off-diagonal bus pairs with ``|S_mn| > tol``."""
        n = len(self.buses)
        S = self.S[:n, :n]
        return {
            (self.buses[i], self.buses[j])
            for i in range(n)
            for j in range(i + 1, n)
            if abs(S[i, j]) > tol
        }


@dataclass
class PhiMatrix:
    """``phi[m, n] = Var(v_m - v_n)`` over labels ``0..N`` (0 is the substation)."""

    phi: np.ndarray
    labels: list
    kind: str = "sample"

    def __post_init__(self):
        self.phi = 0.5 * (self.phi + self.phi.T)
        np.fill_diagonal(self.phi, 0.0)

    def value(self, m, n) -> float:
        return float(self.phi[self.labels.index(m), self.labels.index(n)])


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _as_covariance(data, buses=None):
    """Return ``(Sigma_vv, buses, kind)`` from a bundle, measurement set or matrix."""
    if isinstance(data, CovarianceBundle):
        if data.vv is None:
            raise ValueError("covariance bundle has no voltage block")
        return np.asarray(data.vv, float), list(data.buses), data.kind
    if isinstance(data, MeasurementSet):
        V = data.V
        if V is None:
            raise ValueError("measurement set has no voltage magnitudes")
        Vc = V - V.mean(axis=1, keepdims=True)
        return Vc @ Vc.T / V.shape[1], list(data.buses), "sample"
    S = np.atleast_2d(np.asarray(data, float))
    if S.shape[0] != S.shape[1]:
        raise ValueError("covariance must be square")
    buses = list(range(1, S.shape[0] + 1)) if buses is None else list(buses)
    return S, buses, "sample"


def structural_tolerance(M, kind="sample") -> float:
    """Magnitude below which an off-diagonal entry counts as zero.

    ``1e-8`` times the largest off-diagonal magnitude for analytic moments,
    three median absolute deviations of the off-diagonal entries otherwise.
    """
    n = M.shape[0]
    off = M[~np.eye(n, dtype=bool)]
    if off.size == 0:
        return 0.0
    if kind == "analytic":
        return ANALYTIC_ZERO_RTOL * float(np.abs(off).max())
    return 3.0 * float(np.median(np.abs(off - np.median(off))))


def _allowed(edge_mask, m, n) -> bool:
    return edge_mask is None or tuple(sorted((m, n))) in edge_mask


def _normalize_mask(edge_mask):
    if edge_mask is None:
        return None
    return {tuple(sorted((int(a), int(b)))) for a, b in edge_mask}


def attach_substation(edges, buses, variances, edge_mask=None) -> list:
    """Connect every component of ``edges`` over ``buses`` to the substation.

    Each component is attached at its lowest-variance bus among those allowed
    by ``edge_mask``.
    """
    out = list(edges)
    var = dict(zip(buses, variances))
    for comp in components(buses, [e[:2] for e in edges]):
        allowed = [b for b in comp if _allowed(edge_mask, 0, b)]
        if not allowed:
            continue
        out.append((0, min(allowed, key=lambda b: (var[b], b))))
    return sorted(tuple(sorted(e)) for e in out)


def _invert_covariance(S, what):
    cond = np.linalg.cond(S)
    if not np.isfinite(cond) or cond > 1e14:
        raise NumericalError(
            f"{what} covariance is singular or ill-conditioned (cond {cond:.3g}); "
            "use graphical_lasso for a regularized precision estimate",
            condition=cond,
        )
    P = np.linalg.inv(S)
    return 0.5 * (P + P.T)


# --------------------------------------------------------------------------
# precision signatures
# --------------------------------------------------------------------------


def signature_identify(data, buses=None, edge_mask=None, tol=None, kind=None) -> TopologyEstimate:
    """Tree from the negative entries of the voltage precision matrix.

    Negative off-diagonal entries of ``inv(Sigma_vv)`` mark candidate lines;
    a minimum spanning tree on their partial correlations keeps one tree per
    component, which is then attached to the substation. ``edge_mask``
    restricts candidate pairs (substation pairs included).
    """
    S, buses, k = _as_covariance(data, buses)
    kind = kind or k
    n = len(buses)
    mask = _normalize_mask(edge_mask)
    if n == 1:
        return TopologyEstimate([(0, buses[0])], "sig-inv", info={"precision": np.array([[1.0 / S[0, 0]]])})
    if isinstance(data, MeasurementSet) and data.T < n:
        raise InsufficientDataError(
            f"{data.T} samples for {n} buses; use graphical_lasso for a regularized precision estimate"
        )
    P = _invert_covariance(S, "voltage")
    tol = structural_tolerance(P, kind) if tol is None else float(tol)
    est = precision_tree(P, buses, np.diag(S), tol, mask)
    est.method = "sig-inv"
    return est


def precision_tree(P, buses, variances, tol=0.0, edge_mask=None) -> TopologyEstimate:
    """Tree over ``buses`` from the negative entries of a precision matrix.

    A minimum spanning tree on partial correlations of the pairs with
    ``P_mn < -tol`` gives one tree per component; each component is attached
    to the substation at its lowest-variance bus.
    """
    mask = _normalize_mask(edge_mask)
    n = len(buses)
    d = np.sqrt(np.abs(np.diag(P)))
    weights = {}
    for i, j in itertools.combinations(range(n), 2):
        a, b = buses[i], buses[j]
        if P[i, j] < -tol and _allowed(mask, a, b):
            weights[(a, b)] = P[i, j] / (d[i] * d[j])
    forest = minimum_spanning_tree(buses, weights)
    edges = attach_substation(forest, buses, variances, mask)
    return TopologyEstimate(
        edges,
        "precision-tree",
        info={"precision": P, "tol": tol, "candidates": sorted(weights)},
    )


# --------------------------------------------------------------------------
# sparse inverse covariance
# --------------------------------------------------------------------------


def _soft(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def _lasso_cd(W, s, lam, beta, max_iter=1000, tol=1e-10):
    """Coordinate descent on ``0.5 b^T W b - s^T b + lam ||b||_1``."""
    p = len(s)
    if p == 0:
        return beta
    Wb = W @ beta
    for _ in range(max_iter):
        delta = 0.0
        for j in range(p):
            old = beta[j]
            r = s[j] - Wb[j] + W[j, j] * old
            new = _soft(r, lam) / W[j, j]
            if new != old:
                Wb += W[:, j] * (new - old)
                beta[j] = new
                delta = max(delta, abs(new - old) * np.sqrt(W[j, j]))
        if delta < tol:
            break
        # exact solve on the current support and signs; accept if it meets KKT
        act = np.flatnonzero(beta)
        if act.size:
            z = np.sign(beta[act])
            try:
                b_act = np.linalg.solve(W[np.ix_(act, act)], s[act] - lam * z)
            except np.linalg.LinAlgError:
                continue
            if np.all(np.sign(b_act) == z):
                cand = np.zeros(p)
                cand[act] = b_act
                slack = np.abs(s - W @ cand)
                slack[act] = 0.0
                if np.all(slack <= lam * (1 + 1e-12)):
                    return cand
    return beta


def _glasso_objective(S, Theta, lam):
    sign, logdet = np.linalg.slogdet(Theta)
    if sign <= 0:
        return np.inf
    return float(np.sum(S * Theta) + lam * np.abs(Theta).sum() - logdet)


def graphical_lasso(S, lam, max_iter=500, tol=1e-6, buses=None) -> PrecisionEstimate:
    """l1-penalized Gaussian maximum likelihood by block coordinate descent.

    Minimizes ``tr(S Theta) + lam ||Theta||_1 - log det Theta`` with the
    penalty on every entry. The covariance estimate ``W = inv(Theta)`` is
    updated one row/column at a time by a lasso solve; ``W`` stays dual
    feasible, ``|W - S| <= lam`` entrywise, so the duality gap
    ``f(Theta) - log det W - N`` certifies optimality. Iteration
    stops at ``gap <= tol``; hitting ``max_iter`` warns and reports the gap.
    """
    S, buses, _ = _as_covariance(S, buses)
    S = 0.5 * (S + S.T)
    n = S.shape[0]
    lam = float(lam)
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    # solve the equivalent problem for S / c, lam / c and rescale Theta
    c = float(np.mean(np.diag(S)))
    if not c > 0:
        raise ValueError("covariance needs a positive diagonal")
    S, lam = S / c, lam / c
    W = S + lam * np.eye(n)
    B = np.zeros((n, max(n - 1, 0)))
    gap = np.inf
    it = 0
    if n == 1:
        Theta = np.array([[1.0 / W[0, 0]]])
        return PrecisionEstimate(Theta / c, lam * c, "glasso", buses, info={"gap": 0.0, "iterations": 0})
    if lam == 0.0:
        Theta = _invert_covariance(S, "voltage")
        gap = float(np.sum(S * Theta) - n)
        return PrecisionEstimate(Theta / c, 0.0, "glasso", buses, info={"gap": abs(gap), "iterations": 0})
    for it in range(1, max_iter + 1):
        for j in range(n):
            idx = np.r_[0:j, j + 1 : n]
            W11 = W[np.ix_(idx, idx)]
            beta = _lasso_cd(W11, S[idx, j], lam, B[j].copy())
            B[j] = beta
            w12 = W11 @ beta
            W[idx, j] = w12
            W[j, idx] = w12
        Theta = _precision_from_w(W, B)
        gap = _glasso_objective(S, Theta, lam) - _glasso_dual(W)
        if abs(gap) <= tol:
            break
    else:
        warnings.warn(f"graphical_lasso stopped at {max_iter} iterations with duality gap {gap:.3g}", RuntimeWarning)
    return PrecisionEstimate(
        Theta / c,
        lam * c,
        "glasso",
        buses,
        info={"gap": gap, "iterations": it, "objective": _glasso_objective(S, Theta, lam) + n * np.log(c), "W": W * c},
    )


def _glasso_dual(W):
    sign, logdet = np.linalg.slogdet(W)
    return logdet + W.shape[0] if sign > 0 else -np.inf


def _precision_from_w(W, B):
    n = W.shape[0]
    Theta = np.zeros((n, n))
    for j in range(n):
        idx = np.r_[0:j, j + 1 : n]
        beta = B[j]
        tjj = 1.0 / (W[j, j] - W[idx, j] @ beta)
        Theta[j, j] = tjj
        Theta[idx, j] = -beta * tjj
    return 0.5 * (Theta + Theta.T)


def neighborhood_regression(V, lam, rule="or", buses=None, max_iter=5000, tol=1e-10) -> dict:
    """Per-bus lasso regression of each voltage series on all others.

    Solves ``min (1/2T) ||v_i - V_{-i}^T b||^2 + lam ||b||_1`` for each bus
    ``i`` by coordinate descent on the centered data. A pair is an edge of
    the estimate when either regression (``rule="or"``) or both
    (``rule="and"``) select it.

    Returns a dict with ``edges`` (sorted bus pairs), ``coef`` (row ``i``
    holds the coefficients of bus ``i``), ``rule`` and ``buses``.
    """
    if isinstance(V, MeasurementSet):
        buses = list(V.buses) if buses is None else buses
        V = V.V
    V = np.atleast_2d(np.asarray(V, float))
    n, T = V.shape
    buses = list(range(1, n + 1)) if buses is None else list(buses)
    if rule not in ("or", "and"):
        raise ValueError("rule must be 'or' or 'and'")
    Vc = V - V.mean(axis=1, keepdims=True)
    C = Vc @ Vc.T / T
    coef = np.zeros((n, n))
    for i in range(n):
        idx = np.r_[0:i, i + 1 : n]
        beta = _lasso_cd(C[np.ix_(idx, idx)], C[idx, i], lam, np.zeros(n - 1), max_iter, tol)
        coef[i, idx] = beta
    sel = coef != 0
    both = (sel | sel.T) if rule == "or" else (sel & sel.T)
    edges = [(buses[i], buses[j]) for i in range(n) for j in range(i + 1, n) if both[i, j]]
    return {"edges": edges, "coef": coef, "rule": rule, "buses": buses, "lam": float(lam)}


# --------------------------------------------------------------------------
# joint (v, theta) precision
# --------------------------------------------------------------------------


def joint_precision_threshold(bundle: CovarianceBundle, lam_thr=None, edge_mask=None) -> TopologyEstimate:
    """Edges from the joint magnitude/angle precision matrix.

    With ``J = inv(Sigma_(v,theta)) = [[J1, J2], [J2^T, J3]]`` the primary
    rule declares bus pair ``(m, n)`` an edge iff ``J1 + J3 < 0`` there (below
    minus the structural tolerance); the threshold rule keeps pairs with
    ``|J1| + |J3| > lam_thr``. The returned edges are the sign-rule pairs plus
    one substation link per component; ``info`` holds both bus-pair sets.
    """
    if bundle.vtheta is None:
        raise ValueError("bundle has no joint (v, theta) covariance")
    buses = list(bundle.buses)
    n = len(buses)
    J = _invert_covariance(np.asarray(bundle.vtheta, float), "joint (v, theta)")
    J1, J2, J3 = J[:n, :n], J[:n, n:], J[n:, n:]
    C = J1 + J3
    tol = structural_tolerance(C, bundle.kind)
    mask = _normalize_mask(edge_mask)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if _allowed(mask, buses[i], buses[j])]
    sign_edges = [(buses[i], buses[j]) for i, j in pairs if C[i, j] < -tol]
    thr_edges = None
    if lam_thr is not None:
        M = np.abs(J1) + np.abs(J3)
        thr_edges = [(buses[i], buses[j]) for i, j in pairs if M[i, j] > lam_thr]
    edges = attach_substation(sign_edges, buses, np.diag(bundle.vtheta)[:n], mask)
    blocks = {"J1": J1, "J2": J2, "J3": J3}
    return TopologyEstimate(
        edges,
        "ci-joint",
        info={"sign_edges": sign_edges, "threshold_edges": thr_edges, "blocks": blocks, "tol": tol},
    )


# --------------------------------------------------------------------------
# conditional-independence pruning
# --------------------------------------------------------------------------


def partial_covariance(S, targets, given) -> np.ndarray:
    """Covariance of ``targets`` conditioned on ``given`` (index lists)."""
    t, g = list(targets), list(given)
    Stt = S[np.ix_(t, t)]
    if not g:
        return Stt
    Stg = S[np.ix_(t, g)]
    Sgg = S[np.ix_(g, g)]
    return Stt - Stg @ np.linalg.solve(Sgg, Stg.T)


def ci_two_hop_prune(candidates, data, buses=None, rtol=CI_RTOL) -> TopologyEstimate:
    """Split one-hop from two-hop candidate pairs by conditional independence.

    ``candidates`` is the support of a voltage precision estimate (one-hop
    and two-hop pairs). A pair ``(m, n)`` is confirmed as a line when some
    non-candidate pair ``(k, l)``, with ``k`` a candidate neighbour of ``m``
    and ``l`` of ``n``, becomes conditionally independent given ``(v_m, v_n)``:
    its partial covariance is below ``rtol`` times the geometric mean of the
    conditioned variances. Only lines between non-leaf buses can pass this
    test. Leaf lines are resolved afterwards: confirmed lines are kept and
    each component is completed to a tree over the remaining candidates by a
    minimum spanning tree on precision partial correlations.

    Unconfirmed candidates with a negative partial correlation that the
    completion leaves out are kept and listed in ``info["ambiguous"]``.
    """
    S, buses, _ = _as_covariance(data, buses)
    pos = {b: i for i, b in enumerate(buses)}
    cand = {tuple(sorted(e)) for e in candidates}
    nbr = {b: set() for b in buses}
    for m, n in cand:
        nbr[m].add(n)
        nbr[n].add(m)
    confirmed = set()
    for m, n in sorted(cand):
        if _separates(S, pos, cand, nbr, m, n, rtol):
            confirmed.add((m, n))
    P = np.linalg.inv(S)
    d = np.sqrt(np.abs(np.diag(P)))
    rho = {(m, n): P[pos[m], pos[n]] / (d[pos[m]] * d[pos[n]]) for m, n in cand}
    weights = {e: (-np.inf if e in confirmed else rho[e]) for e in cand}
    forest = minimum_spanning_tree(buses, weights)
    resolved = sorted(set(forest) - confirmed)
    ambiguous = sorted(e for e in cand - confirmed - set(forest) if rho[e] < 0)
    edges = attach_substation(sorted(set(forest) | set(ambiguous)), buses, np.diag(S))
    return TopologyEstimate(
        edges,
        "ci-prune",
        info={
            "confirmed": sorted(confirmed),
            "leaf_resolved": resolved,
            "ambiguous": ambiguous,
            "pruned": sorted(cand - set(forest) - set(ambiguous)),
        },
    )


def _separates(S, pos, cand, nbr, m, n, rtol) -> bool:
    for k in sorted(nbr[m] - {n}):
        for l in sorted(nbr[n] - {m}):
            if k == l or tuple(sorted((k, l))) in cand:
                continue
            C = partial_covariance(S, [pos[k], pos[l]], [pos[m], pos[n]])
            scale = np.sqrt(max(C[0, 0], 0.0) * max(C[1, 1], 0.0))
            if abs(C[0, 1]) <= rtol * scale:
                return True
    return False


# --------------------------------------------------------------------------
# variance of voltage differences
# --------------------------------------------------------------------------


def phi_matrix(data, buses=None) -> PhiMatrix:
    """``Var(v_m - v_n)`` over the substation and ``buses``.

    Accepts a voltage series (``N x T`` array or measurement set), whose
    sample variance is used, or a covariance bundle / matrix via
    :func:`phi_from_covariance`.
    """
    if isinstance(data, CovarianceBundle):
        return phi_from_covariance(data.vv, data.buses, kind=data.kind)
    if isinstance(data, MeasurementSet):
        buses = list(data.buses)
        data = data.V
    V = np.atleast_2d(np.asarray(data, float))
    n, T = V.shape
    if T < 2:
        raise InsufficientDataError("phi needs at least two samples")
    buses = list(range(1, n + 1)) if buses is None else list(buses)
    Vc = V - V.mean(axis=1, keepdims=True)
    return phi_from_covariance(Vc @ Vc.T / T, buses, kind="sample")


def phi_from_covariance(S, buses=None, kind="analytic") -> PhiMatrix:
    """``phi`` from a voltage covariance; the substation is a zero-variance row."""
    S = np.atleast_2d(np.asarray(S, float))
    n = S.shape[0]
    buses = list(range(1, n + 1)) if buses is None else list(buses)
    full = np.zeros((n + 1, n + 1))
    full[1:, 1:] = S
    d = np.diag(full)
    phi = d[:, None] + d[None, :] - 2.0 * full
    return PhiMatrix(np.maximum(phi, 0.0), [0] + buses, kind)


def phi_mst(phi: PhiMatrix, edge_mask=None) -> TopologyEstimate:
    """Minimum spanning tree of the ``phi`` weights (ties by lowest pair)."""
    mask = _normalize_mask(edge_mask)
    labels = phi.labels
    weights = {
        (a, b): phi.phi[i, j]
        for (i, a), (j, b) in itertools.combinations(enumerate(labels), 2)
        if _allowed(mask, a, b)
    }
    tree = minimum_spanning_tree(labels, weights)
    if len(tree) != len(labels) - 1:
        raise ConvergenceError("edge mask leaves the phi graph disconnected", diagnostic={"edges": tree})
    return TopologyEstimate(tree, "phi-mst", info={"weights": {e: weights[e] for e in tree}})
