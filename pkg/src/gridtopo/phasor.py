"""Admittance estimation from voltage and current phasors.

All estimators fit the linear model ``I = Y U + noise`` where ``U`` holds the
bus voltages relative to the substation. Pass ``u0`` to subtract a
substation phasor from absolute readings.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .additive_tree import ReconstructedTree, complex_recursive_grouping
from .errors import RankDeficiencyError

log = logging.getLogger(__name__)

RANK_RTOL = 1e-8


@dataclass
class AdmittanceEstimate:
    """Estimated admittance matrix; unmeasured rows hold NaN."""

    Y: np.ndarray
    method: str
    residual: float
    weights: dict = field(default_factory=dict)
    rows: list | None = None
    info: dict = field(default_factory=dict)

    def symmetrized(self) -> "AdmittanceEstimate":
        return replace(self, Y=0.5 * (self.Y + self.Y.T))

    def laplacian_projected(self) -> "AdmittanceEstimate":
        """Clip off-diagonal conductances to be nonpositive (negative of line conductance)."""
        Y = 0.5 * (self.Y + self.Y.T)
        off = ~np.eye(Y.shape[0], dtype=bool)
        G, B = Y.real.copy(), Y.imag.copy()
        G[off] = np.minimum(G[off], 0.0)
        return replace(self, Y=G + 1j * B)

    def edges(self, rel_tol=1e-6, offset=1) -> set:
        """Bus pairs with an off-diagonal entry above ``rel_tol`` times the largest one."""
        Y = np.nan_to_num(self.Y)
        mag = np.abs(Y - np.diag(np.diag(Y)))
        thr = rel_tol * mag.max() if mag.size and mag.max() > 0 else np.inf
        n = Y.shape[0]
        return {(i + offset, j + offset) for i in range(n) for j in range(i + 1, n) if max(mag[i, j], mag[j, i]) > thr}


def _deviation(U, u0):
    U = np.asarray(U, dtype=complex)
    return U - u0 if u0 else U


def numerical_rank(M, rtol=RANK_RTOL) -> int:
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def _require_full_rank(U):
    n = U.shape[0]
    rank = numerical_rank(U)
    if rank < n:
        raise RankDeficiencyError(
            f"voltage matrix has rank {rank} < {n}; zero-injection buses cap the rank at "
            f"N - K, so the plain LS fit is undefined (try kron_ls_identify)",
            rank=rank,
            required=n,
        )


def _residual(Y, U, I):
    return float(np.linalg.norm(I - Y @ U))


def _lstsq_rows(U, I):
    """Solve ``Y U = I`` for ``Y`` in the least-squares sense."""
    return np.linalg.lstsq(U.T, I.T, rcond=None)[0].T


def prune_small_conductances(Y, rel=0.01):
    """Zero off-diagonal entries below ``rel`` times the median edge conductance.

    Edge entries are taken as the largest ``N - 1`` off-diagonal pairs by
    magnitude (the count a radial feeder has).
    """
    Y = np.array(Y, dtype=complex)
    n = Y.shape[0]
    iu = np.triu_indices(n, 1)
    mag = 0.5 * (np.abs(Y[iu]) + np.abs(Y.T[iu]))
    if mag.size == 0:
        return Y
    top = np.sort(mag)[::-1][: max(n - 1, 1)]
    thr = rel * float(np.median(top))
    small = mag < thr
    Y[iu[0][small], iu[1][small]] = 0
    Y[iu[1][small], iu[0][small]] = 0
    return Y


def ls_admittance(U, I, u0=0.0, prune=False) -> AdmittanceEstimate:
    """Least-squares admittance ``I U^H (U U^H)^{-1}``.

    Raises
    ------
    RankDeficiencyError
        If ``U`` does not have full row rank (e.g. zero-injection buses).
    """
    U = _deviation(U, u0)
    I = np.asarray(I, dtype=complex)
    _require_full_rank(U)
    Y = I @ U.conj().T @ np.linalg.inv(U @ U.conj().T)
    if prune:
        Y = prune_small_conductances(Y)
    return AdmittanceEstimate(Y, "ls", _residual(Y, U, I), info={"pruned": bool(prune)})


# --------------------------------------------------------------------------
# Recursive least squares
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RLSState:
    """Running estimate ``Y`` and inverse information matrix ``P``."""

    Y: np.ndarray
    P: np.ndarray
    forgetting: float = 1.0
    n_updates: int = 0

    @classmethod
    def initial(cls, n, delta=1e8, forgetting=1.0) -> "RLSState":
        """Zero estimate with prior covariance ``delta * I``."""
        return cls(np.zeros((n, n), complex), delta * np.eye(n, dtype=complex), forgetting, 0)

    @classmethod
    def from_batch(cls, U, I, forgetting=1.0, u0=0.0) -> "RLSState":
        """Exact start from an initial full-rank block of data."""
        U = _deviation(U, u0)
        I = np.asarray(I, dtype=complex)
        _require_full_rank(U)
        P = np.linalg.inv(U @ U.conj().T)
        return cls(I @ U.conj().T @ P, P, forgetting, U.shape[1])


def recursive_ls_update(state: RLSState, u, i) -> RLSState:
    """Fold one snapshot ``(u, i)`` into the running LS estimate."""
    u = np.asarray(u, dtype=complex).reshape(-1)
    i = np.asarray(i, dtype=complex).reshape(-1)
    lam = state.forgetting
    Pu = state.P @ u
    g = Pu / (lam + np.vdot(u, Pu))
    err = i - state.Y @ u
    Y = state.Y + np.outer(err, g.conj())
    P = (state.P - np.outer(g, u.conj() @ state.P)) / lam
    P = 0.5 * (P + P.conj().T)
    return RLSState(Y, P, lam, state.n_updates + 1)


def rls_admittance(U, I, u0=0.0, forgetting=1.0, warm=None) -> AdmittanceEstimate:
    """Stream the columns of ``(U, I)`` through the recursive LS update.

    The first ``warm`` columns (default ``N``) initialise the state exactly; the
    rest are processed one at a time.
    """
    U = _deviation(U, u0)
    I = np.asarray(I, dtype=complex)
    n = U.shape[0]
    warm = n if warm is None else warm
    state = RLSState.from_batch(U[:, :warm], I[:, :warm], forgetting)
    for t in range(warm, U.shape[1]):
        state = recursive_ls_update(state, U[:, t], I[:, t])
    return AdmittanceEstimate(state.Y, "rls", _residual(state.Y, U, I), {"forgetting": forgetting})


# --------------------------------------------------------------------------
# Sparse (l1-regularized) admittance
# --------------------------------------------------------------------------


def _soft(Z, thr):
    mag = np.abs(Z)
    scale = np.where(mag > thr, 1.0 - thr / np.where(mag > 0, mag, 1.0), 0.0)
    return Z * scale


def sparse_admittance(U, I, lam, u0=0.0, max_iter=10_000, tol=1e-9, Y0=None, penalize_diagonal=True) -> AdmittanceEstimate:
    """Minimize ``||I - Y U||_F^2 + lam * sum |Y_mn|`` by accelerated proximal gradient.

    The step is ``1 / (2 sigma_max(U)^2)``, the inverse Lipschitz constant of
    the fit gradient. Iteration stops on relative change below ``tol``; hitting
    ``max_iter`` issues a warning and records the final gradient norm in
    ``info``.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    U = _deviation(U, u0)
    I = np.asarray(I, dtype=complex)
    n = U.shape[0]
    UUh = U @ U.conj().T
    IUh = I @ U.conj().T
    L = 2.0 * float(np.linalg.eigvalsh(UUh)[-1])
    step = 1.0 / L
    mask = np.ones((n, n)) if penalize_diagonal else 1.0 - np.eye(n)
    Y = np.zeros((n, n), complex) if Y0 is None else np.array(Y0, dtype=complex)
    Z, t = Y.copy(), 1.0
    converged = False
    for it in range(1, max_iter + 1):
        grad = 2.0 * (Z @ UUh - IUh)
        Y_new = _soft(Z - step * grad, step * lam * mask)
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        Z = Y_new + ((t - 1) / t_new) * (Y_new - Y)
        change = np.linalg.norm(Y_new - Y) / max(np.linalg.norm(Y_new), 1e-300)
        Y, t = Y_new, t_new
        if change < tol:
            converged = True
            break
    grad = 2.0 * (Y @ UUh - IUh)
    info = {"iterations": it, "converged": converged, "gradient_norm": float(np.linalg.norm(grad))}
    if not converged:
        warnings.warn(f"sparse_admittance hit {max_iter} iterations (gradient norm {info['gradient_norm']:.3g})", RuntimeWarning)
    return AdmittanceEstimate(Y, "lasso", _residual(Y, U, I), {"lambda": lam}, info=info)


# --------------------------------------------------------------------------
# Total least squares
# --------------------------------------------------------------------------


def tls_admittance(U, I, u0=0.0, gap_rtol=1e-8) -> AdmittanceEstimate:
    """Row-wise total least squares, allowing errors in both ``U`` and ``I``.

    Row ``k`` solves ``(U + dU)^T y = i_k + di`` with minimal ``||[dU; di]||``
    from the smallest right singular vector of ``[U^T, i_k]``.
    """
    U = _deviation(U, u0)
    I = np.asarray(I, dtype=complex)
    n, T = U.shape
    if T <= n:
        raise RankDeficiencyError(f"TLS needs T > N (got T={T}, N={n})", rank=T, required=n + 1)
    Y = np.zeros((n, n), complex)
    gaps = np.zeros(n)
    for k in range(n):
        Zk = np.hstack([U.T, I[k][:, None]])
        _, s, Vh = np.linalg.svd(Zk, full_matrices=False)
        v = Vh[-1].conj()
        if abs(v[-1]) < 1e-14:
            raise RankDeficiencyError(f"TLS row {k} has no solution (nongeneric data)")
        Y[k] = -v[:n] / v[-1]
        gaps[k] = (s[-2] - s[-1]) / max(s[0], 1e-300)
    degenerate = bool(np.any(gaps < gap_rtol))
    if degenerate:
        warnings.warn("TLS singular-value gap is degenerate for some rows", RuntimeWarning)
    return AdmittanceEstimate(Y, "tls", _residual(Y, U, I), info={"singular_gap": gaps, "degenerate": degenerate})


# --------------------------------------------------------------------------
# Partial data
# --------------------------------------------------------------------------


def partial_injection_ls(U_full, I_S, rows, u0=0.0) -> AdmittanceEstimate:
    """LS estimate of the admittance rows of the current-metered buses.

    ``rows`` gives the matrix indices (bus - 1) of the rows of ``I_S``.
    Other rows of the returned matrix are NaN.
    """
    U = _deviation(U_full, u0)
    I_S = np.atleast_2d(np.asarray(I_S, dtype=complex))
    rows = list(rows)
    _require_full_rank(U)
    n = U.shape[0]
    Y = np.full((n, n), np.nan, dtype=complex)
    Y[rows] = I_S @ U.conj().T @ np.linalg.inv(U @ U.conj().T)
    res = float(np.linalg.norm(I_S - Y[rows] @ U))
    return AdmittanceEstimate(Y, "partial-ls", res, rows=rows)


def kron_ls_identify(U_S, I_S, buses, u0=0.0, n_buses=None, tol=None) -> tuple[AdmittanceEstimate, ReconstructedTree]:
    """Fit the Kron-reduced admittance on metered buses and rebuild the tree.

    Effective impedances among ``{0} + buses`` come from the inverse of the
    estimate and are passed to complex recursive grouping. Hidden buses of
    degree two cannot be seen and collapse into series lines; when
    ``n_buses`` is given, ``tree_info["collapsed"]`` reports whether that
    happened.
    """
    U = _deviation(U_S, u0)
    I = np.asarray(I_S, dtype=complex)
    est = ls_admittance(U, I)
    est.method = "kron-rg"
    est.rows = list(buses)
    Z = np.linalg.inv(est.Y)
    Z = 0.5 * (Z + Z.T)
    labels = [0] + list(buses)
    d = np.zeros((len(labels), len(labels)), complex)
    zd = np.concatenate([[0], np.diag(Z)])
    full = np.zeros((len(labels), len(labels)), complex)
    full[1:, 1:] = Z
    d = zd[:, None] + zd[None, :] - 2 * full
    np.fill_diagonal(d, 0)
    tree = complex_recursive_grouping(d.real, d.imag, tol=tol, labels=labels)
    if n_buses is not None:
        est.info["collapsed"] = len(tree.nodes) < n_buses + 1
    est.info["distances"] = d
    return est, tree
