"""Synthetic smart-meter and synchrophasor data under linearized power flow."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from .errors import DegenerateProbingError, InsufficientDataError, StructuralError
from .grid import Feeder, build_incidence, build_topology_matrices

DEFAULT_NOISE_SD = 1e-4


def as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _is_psd(M, tol=1e-12):
    if not np.allclose(M, M.T, atol=1e-12 * max(1.0, np.abs(M).max())):
        return False
    ev = np.linalg.eigvalsh(M)
    return ev.min() >= -tol * max(1.0, abs(ev).max())


@dataclass(frozen=True)
class InjectionModel:
    """Gaussian model for active/reactive injections at buses ``1..N``.

    ``cov_pp``, ``cov_qq``, ``cov_pq`` are N x N blocks of the joint covariance
    of ``[p; q]``, with ``cov_pq = E[p q^T]`` (centered).
    """

    mean_p: np.ndarray
    mean_q: np.ndarray
    cov_pp: np.ndarray
    cov_qq: np.ndarray
    cov_pq: np.ndarray

    def __post_init__(self):
        n = len(self.mean_p)
        for name in ("cov_pp", "cov_qq", "cov_pq"):
            if getattr(self, name).shape != (n, n):
                raise ValueError(f"{name} must be {n} x {n}")
        if not _is_psd(self.joint):
            raise ValueError("injection covariance is not symmetric positive semidefinite")

    @property
    def n_buses(self) -> int:
        return len(self.mean_p)

    @property
    def joint(self) -> np.ndarray:
        return np.block([[self.cov_pp, self.cov_pq], [self.cov_pq.T, self.cov_qq]])

    @property
    def identifiable(self) -> np.ndarray:
        """Per-bus flag ``E[p^2] E[q^2] > E[pq]^2``."""
        pp, qq, pq = np.diag(self.cov_pp), np.diag(self.cov_qq), np.diag(self.cov_pq)
        return pp * qq - pq**2 > 1e-12 * np.maximum(pp * qq, 1e-300)

    @property
    def is_diagonal(self) -> bool:
        return all(
            np.allclose(M, np.diag(np.diag(M))) for M in (self.cov_pp, self.cov_qq, self.cov_pq)
        )

    @classmethod
    def diagonal(cls, var_p, var_q, cov_pq=0.0, mean_p=0.0, mean_q=0.0, n=None):
        """Independent buses; scalars are broadcast to ``n`` buses."""
        arrs = [np.atleast_1d(np.asarray(a, dtype=float)) for a in (var_p, var_q, cov_pq, mean_p, mean_q)]
        n = n or max(a.size for a in arrs)
        vp, vq, cpq, mp, mq = (np.broadcast_to(a, (n,)).copy() for a in arrs)
        return cls(mp, mq, np.diag(vp), np.diag(vq), np.diag(cpq))

    @classmethod
    def random(cls, n, rng, pq_corr=(0.0, 0.5), sd_range=(0.5, 1.5), scale=0.01, solar=(), solar_corr=0.0):
        """Random independent-bus model; optional correlated 'solar' subset of p.

        ``solar`` lists bus labels (1..N) whose active injections share
        correlation ``solar_corr``.
        """
        rng = as_rng(rng)
        sp = scale * rng.uniform(*sd_range, size=n)
        sq = scale * rng.uniform(*sd_range, size=n)
        rho = rng.uniform(*pq_corr, size=n)
        cpp = np.diag(sp**2)
        idx = [b - 1 for b in solar]
        for a in idx:
            for b in idx:
                if a != b:
                    cpp[a, b] = solar_corr * sp[a] * sp[b]
        mp = -scale * rng.uniform(0.5, 1.5, size=n)
        mq = -0.5 * scale * rng.uniform(0.5, 1.5, size=n)
        return cls(mp, mq, cpp, np.diag(sq**2), np.diag(rho * sp * sq))

    def to_dict(self) -> dict:
        return {f.name: np.asarray(getattr(self, f.name)).tolist() for f in fields(self)}

    @classmethod
    def from_dict(cls, d) -> "InjectionModel":
        return cls(**{k: np.asarray(v, dtype=float) for k, v in d.items()})


def sample_injections(model: InjectionModel, T: int, seed=None):
    """Draw ``T`` i.i.d. injection snapshots; returns ``(P, Q)`` of shape N x T."""
    rng = as_rng(seed)
    n = model.n_buses
    w, V = np.linalg.eigh(model.joint)
    root = V * np.sqrt(np.clip(w, 0.0, None))
    Z = rng.standard_normal((2 * n, T))
    S = root @ Z + np.concatenate([model.mean_p, model.mean_q])[:, None]
    return S[:n], S[n:]


def simulate_voltages_linear(feeder: Feeder, P, Q, noise_sd=DEFAULT_NOISE_SD, v0=1.0, rng=None):
    """Voltage magnitudes ``R P + X Q + v0`` and angles ``X P - R Q`` plus noise."""
    rng = as_rng(rng)
    tm = build_topology_matrices(feeder)
    P, Q = np.atleast_2d(P), np.atleast_2d(Q)
    V = tm.R @ P + tm.X @ Q + v0
    theta = tm.X @ P - tm.R @ Q
    if noise_sd:
        V = V + noise_sd * rng.standard_normal(V.shape)
        theta = theta + noise_sd * rng.standard_normal(theta.shape)
    return V, theta


def simulate_voltages_ldf(feeder: Feeder, P, Q, noise_sd=DEFAULT_NOISE_SD, v0=1.0, rng=None):
    """Squared voltage magnitudes ``2 R P + 2 X Q + v0^2`` plus noise."""
    rng = as_rng(rng)
    tm = build_topology_matrices(feeder)
    V2 = 2 * tm.R @ np.atleast_2d(P) + 2 * tm.X @ np.atleast_2d(Q) + v0**2
    if noise_sd:
        V2 = V2 + noise_sd * rng.standard_normal(V2.shape)
    return V2


def forward_injections(feeder: Feeder, V, theta, v0=1.0):
    """Injections implied by voltages through the linearized admittance model."""
    A = build_incidence(feeder).reduced.astype(float)
    r, x = feeder.r, feeder.x
    g = r / (r**2 + x**2)
    b = x / (r**2 + x**2)
    Lg = A.T @ (g[:, None] * A)
    Lb = A.T @ (b[:, None] * A)
    P = Lg @ (V - v0) + Lb @ theta
    Q = Lb @ (V - v0) - Lg @ theta
    return P, Q


def simulate_phasors(feeder: Feeder, P, Q, noise_sd=DEFAULT_NOISE_SD, u0=1.0, rng=None, form="linear"):
    """Voltage and current phasors ``(U, I)`` with ``I = Y (U - u0) + noise``.

    ``form="linear"`` uses ``u = v + j theta`` (first order in the deviations,
    so zero-injection buses carry exactly zero current); ``form="polar"`` uses
    ``u = v exp(j theta)``. Noise is complex Gaussian on currents only.
    """
    rng = as_rng(rng)
    V, theta = simulate_voltages_linear(feeder, P, Q, noise_sd=0.0, v0=abs(u0))
    if form == "linear":
        U = V + 1j * theta
    elif form == "polar":
        U = V * np.exp(1j * theta)
    else:
        raise ValueError(f"unknown phasor form {form!r}")
    U = U * (u0 / abs(u0))
    Y = build_topology_matrices(feeder).Y
    I = Y @ (U - u0)
    if noise_sd:
        I = I + noise_sd * (rng.standard_normal(I.shape) + 1j * rng.standard_normal(I.shape))
    return U, I


# --------------------------------------------------------------------------
# Measurement containers
# --------------------------------------------------------------------------

_MATRIX_FIELDS = ("V", "theta", "P", "Q", "U", "I", "dV", "dP", "dQ")
_CSV_KINDS = {"V": "v", "theta": "theta", "P": "p", "Q": "q", "U": "u", "I": "i",
              "dV": "dv", "dP": "dp", "dQ": "dq"}


@dataclass
class MeasurementSet:
    """Time-indexed measurements; every matrix has one row per entry of ``buses``."""

    kind: str  # "phasor" | "magnitude" | "probing"
    buses: list
    V: np.ndarray | None = None
    theta: np.ndarray | None = None
    P: np.ndarray | None = None
    Q: np.ndarray | None = None
    U: np.ndarray | None = None
    I: np.ndarray | None = None
    dV: np.ndarray | None = None
    dP: np.ndarray | None = None
    dQ: np.ndarray | None = None
    noise_sd: float = 0.0
    seed: int | None = None
    probe_buses: list = field(default_factory=list)

    def __post_init__(self):
        for name in _MATRIX_FIELDS:
            M = getattr(self, name)
            if M is not None and M.shape[0] != len(self.buses):
                raise ValueError(f"{name} has {M.shape[0]} rows for {len(self.buses)} buses")

    @property
    def T(self) -> int:
        for name in _MATRIX_FIELDS:
            M = getattr(self, name)
            if M is not None:
                return M.shape[1]
        return 0

    def restrict(self, buses: Sequence[int]) -> "MeasurementSet":
        pos = [self.buses.index(b) for b in buses]
        upd = {n: getattr(self, n)[pos] for n in _MATRIX_FIELDS if getattr(self, n) is not None}
        return replace(self, buses=list(buses), **upd)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "bus", "kind", "value_re", "value_im"])
            for name in _MATRIX_FIELDS:
                M = getattr(self, name)
                if M is None:
                    continue
                for i, bus in enumerate(self.buses):
                    for t in range(M.shape[1]):
                        val = M[i, t]
                        w.writerow([t, bus, _CSV_KINDS[name], repr(float(np.real(val))),
                                    repr(float(np.imag(val)))])

    @classmethod
    def from_csv(cls, path, kind=None) -> "MeasurementSet":
        rows = {}
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                rows.setdefault(rec["kind"], []).append(
                    (int(rec["t"]), int(rec["bus"]), complex(float(rec["value_re"]), float(rec["value_im"])))
                )
        inverse = {v: k for k, v in _CSV_KINDS.items()}
        buses = sorted({b for recs in rows.values() for _, b, _ in recs})
        mats = {}
        for k, recs in rows.items():
            if k not in inverse:
                raise ValueError(f"unknown measurement kind {k!r}")
            T = max(t for t, _, _ in recs) + 1
            M = np.zeros((len(buses), T), dtype=complex)
            for t, b, val in recs:
                M[buses.index(b), t] = val
            name = inverse[k]
            mats[name] = M if name in ("U", "I") else M.real.copy()
        if kind is None:
            kind = "phasor" if "U" in mats else "probing" if "dV" in mats else "magnitude"
        return cls(kind=kind, buses=buses, **mats)


def generate_probing_sequence(
    feeder: Feeder,
    probe: Sequence[int],
    magnitudes,
    T: int,
    background: InjectionModel | None = None,
    noise_sd=DEFAULT_NOISE_SD,
    rng=None,
    pattern="random",
    v0=1.0,
) -> MeasurementSet:
    """Active-power probing at buses ``probe`` and the voltage response.

    Each of the ``T - 1`` steps changes the active injection of every probed
    bus by ``magnitude * xi`` with ``xi ~ N(0, 1)`` (``pattern="random"``) or
    steps one bus at a time by ``+magnitude`` (``pattern="cyclic"``). The
    background injections are drawn i.i.d. per time from ``background`` (none
    means frozen at zero). Reactive injections of probed buses follow the
    background only. Voltage differences are taken on the full noisy model.
    """
    rng = as_rng(rng)
    probe = list(probe)
    if not probe:
        raise ValueError("probe set must be nonempty")
    n = feeder.n_buses
    mags = np.broadcast_to(np.asarray(magnitudes, dtype=float), (len(probe),))
    if not np.any(mags):
        raise DegenerateProbingError("all probing magnitudes are zero")
    idx = np.array([b - 1 for b in probe])
    if background is not None:
        P, Q = sample_injections(background, T, rng)
    else:
        P, Q = np.zeros((n, T)), np.zeros((n, T))
    steps = np.zeros((len(probe), T - 1))
    if pattern == "random":
        steps = mags[:, None] * rng.standard_normal((len(probe), T - 1))
    elif pattern == "cyclic":
        for t in range(T - 1):
            steps[t % len(probe), t] = mags[t % len(probe)]
    else:
        raise ValueError(f"unknown probing pattern {pattern!r}")
    if background is not None:
        # Probed buses hold their background mean; probing drives their changes.
        P[idx] = background.mean_p[idx][:, None]
    P[idx, 1:] += np.cumsum(steps, axis=1)
    V, theta = simulate_voltages_linear(feeder, P, Q, noise_sd=noise_sd, v0=v0, rng=rng)
    return MeasurementSet(
        kind="probing",
        buses=list(range(1, n + 1)),
        V=V,
        P=P,
        Q=Q,
        dV=np.diff(V, axis=1),
        dP=np.diff(P, axis=1),
        dQ=np.diff(Q, axis=1),
        noise_sd=noise_sd,
        probe_buses=probe,
    )


# --------------------------------------------------------------------------
# Second moments
# --------------------------------------------------------------------------


@dataclass
class CovarianceBundle:
    """Centered second moments over ``buses``; ``vtheta`` is the joint (v, theta) block."""

    buses: list
    vv: np.ndarray | None = None
    vp: np.ndarray | None = None
    vq: np.ndarray | None = None
    pp: np.ndarray | None = None
    qq: np.ndarray | None = None
    pq: np.ndarray | None = None
    vtheta: np.ndarray | None = None
    kind: str = "sample"
    n_samples: int | None = None
    means: dict = field(default_factory=dict)

    _FIELDS = ("vv", "vp", "vq", "pp", "qq", "pq", "vtheta")

    def restrict(self, buses) -> "CovarianceBundle":
        pos = np.array([self.buses.index(b) for b in buses])
        n = len(self.buses)
        upd = {}
        for name in self._FIELDS:
            M = getattr(self, name)
            if M is None:
                continue
            if name == "vtheta":
                both = np.concatenate([pos, pos + n])
                upd[name] = M[np.ix_(both, both)]
            else:
                upd[name] = M[np.ix_(pos, pos)]
        return replace(self, buses=list(buses), **upd)

    def to_json(self) -> str:
        out = {"buses": list(self.buses), "kind": self.kind, "n_samples": self.n_samples}
        for name in self._FIELDS:
            M = getattr(self, name)
            out[name] = None if M is None else np.asarray(M).tolist()
        return json.dumps(out)

    @classmethod
    def from_json(cls, text) -> "CovarianceBundle":
        d = json.loads(text)
        mats = {k: (None if d.get(k) is None else np.asarray(d[k], dtype=float)) for k in cls._FIELDS}
        return cls(buses=d["buses"], kind=d["kind"], n_samples=d["n_samples"], **mats)


def _centered(M):
    return M - M.mean(axis=1, keepdims=True)


def sample_covariances(ms: MeasurementSet) -> CovarianceBundle:
    """Centered sample moments ``(1/T) sum x_t y_t^T`` of the available series."""
    T = ms.T
    if T < 2:
        raise InsufficientDataError(f"need at least 2 samples, got {T}")
    series = {k: getattr(ms, k) for k in ("V", "theta", "P", "Q") if getattr(ms, k) is not None}
    means = {k: M.mean(axis=1) for k, M in series.items()}
    c = {k: _centered(M) for k, M in series.items()}

    def cov(a, b):
        if a in c and b in c:
            return c[a] @ c[b].T / T
        return None

    joint = None
    if "V" in c and "theta" in c:
        S = np.vstack([c["V"], c["theta"]])
        joint = S @ S.T / T
    return CovarianceBundle(
        buses=list(ms.buses),
        vv=cov("V", "V"),
        vp=cov("V", "P"),
        vq=cov("V", "Q"),
        pp=cov("P", "P"),
        qq=cov("Q", "Q"),
        pq=cov("P", "Q"),
        vtheta=joint,
        kind="sample",
        n_samples=T,
        means=means,
    )


def analytic_covariances(feeder: Feeder, model: InjectionModel, noise_sd=0.0) -> CovarianceBundle:
    """Exact second moments implied by the linear model and injection statistics."""
    if model.n_buses != feeder.n_buses:
        raise StructuralError("injection model size does not match feeder")
    tm = build_topology_matrices(feeder)
    R, X = tm.R, tm.X
    Spp, Sqq, Spq = model.cov_pp, model.cov_qq, model.cov_pq
    Sqp = Spq.T
    n = feeder.n_buses
    noise = noise_sd**2 * np.eye(n)
    vp = R @ Spp + X @ Sqp
    vq = R @ Spq + X @ Sqq
    vv = R @ Spp @ R + X @ Sqp @ R + R @ Spq @ X + X @ Sqq @ X + noise
    tt = X @ Spp @ X - X @ Spq @ R - R @ Sqp @ X + R @ Sqq @ R + noise
    vt = R @ Spp @ X - R @ Spq @ R + X @ Sqp @ X - X @ Sqq @ R
    joint = np.block([[vv, vt], [vt.T, tt]])
    return CovarianceBundle(
        buses=list(range(1, n + 1)),
        vv=vv,
        vp=vp,
        vq=vq,
        pp=Spp.copy(),
        qq=Sqq.copy(),
        pq=Spq.copy(),
        vtheta=joint,
        kind="analytic",
    )
