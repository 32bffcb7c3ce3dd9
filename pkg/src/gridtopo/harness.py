"""Experiment configuration, method registry, scoring and seeded sweeps."""

from __future__ import annotations

import copy
import csv
import io
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import detection, meter, phasor, voltage_only
from .errors import ConfigError, GridTopoError
from .graphs import TopologyEstimate, collapse_hidden, minimum_spanning_tree, pairwise_matrix, splits
from .grid import Feeder, Line, LineLibrary, build_incidence, enumerate_spanning_trees, random_feeder
from .simulate import (
    InjectionModel,
    MeasurementSet,
    generate_probing_sequence,
    sample_covariances,
    sample_injections,
    simulate_phasors,
    simulate_voltages_linear,
)

THREADS_ENV = "GRIDTOPO_THREADS"


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

DEFAULTS = {
    "feeder": None,
    "random_feeder": {"n_buses": 8, "r_range": [0.1, 1.0], "x_range": [0.1, 1.0], "rx_ratio": None, "max_children": None},
    "injections": {"pq_corr": [0.0, 0.5], "scale": 0.01},
    "measurement": {"T": 200, "noise_sd": 0.0, "magnitude": 0.05},
    "observed": "all",
    "method": None,
    "params": {},
    "library": {"decoys": 3},
    "sweep": {"T": None, "noise_sd": None, "seeds": 1},
    "score_mode": None,
    "seed": None,
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    """Validated experiment description; build with :meth:`from_dict`."""

    data: dict

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(_merge(DEFAULTS, d))
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc

    def override(self, **fields) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(_merge(self.data, fields))

    def __getitem__(self, key):
        return self.data[key]

    def validate(self) -> None:
        d = self.data
        if d["seed"] is None:
            raise ConfigError("a seed is required")
        if not isinstance(d["seed"], int) or d["seed"] < 0:
            raise ConfigError("seed must be a nonnegative integer")
        if d["method"] not in METHODS:
            raise ConfigError(f"unknown method {d['method']!r}; choose from {sorted(METHODS)}")
        sw = d["sweep"]
        for axis in ("T", "noise_sd"):
            if sw[axis] is not None and len(sw[axis]) == 0:
                raise ConfigError(f"sweep axis {axis!r} is empty")
        seeds = sw["seeds"]
        n_seeds = seeds if isinstance(seeds, int) else len(seeds)
        if n_seeds < 1:
            raise ConfigError("sweep needs at least one seed")
        if d["feeder"] is None and int(d["random_feeder"]["n_buses"]) < 1:
            raise ConfigError("random feeder needs at least one bus")
        obs = d["observed"]
        if not (obs in ("all", "leaves") or isinstance(obs, list)):
            raise ConfigError("observed must be 'all', 'leaves' or a list of buses")
        if d["score_mode"] not in (None, "exact", "kron-collapsed"):
            raise ConfigError("score_mode must be 'exact' or 'kron-collapsed'")

    def trials(self) -> list:
        """``(index, T, noise_sd, seed_index)`` for every trial of the sweep."""
        d = self.data
        Ts = d["sweep"]["T"] or [d["measurement"]["T"]]
        noises = d["sweep"]["noise_sd"] or [d["measurement"]["noise_sd"]]
        seeds = d["sweep"]["seeds"]
        seeds = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
        out = []
        for T in Ts:
            for s in noises:
                for k in seeds:
                    out.append((len(out), int(T), float(s), int(k)))
        return out


# --------------------------------------------------------------------------
# scoring
# --------------------------------------------------------------------------


def _prf(est: set, truth: set) -> dict:
    tp = len(est & truth)
    precision = tp / len(est) if est else 1.0
    recall = tp / len(truth) if truth else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return {"precision": precision, "recall": recall, "f1": f1}


def score_topology(estimate, truth: Feeder, mode="exact", observed=None, lengths=None) -> dict:
    """Edge precision, recall and F1 of ``estimate`` against ``truth``.

    ``mode="exact"`` compares edge sets. ``mode="kron-collapsed"`` first
    removes unobserved truth nodes of degree at most 2 (merging series
    lines) and compares the observed-label bipartitions induced by each
    edge, so hidden-node naming does not matter. With ``lengths`` (estimate
    edges as ``(m, n, length)``) the largest relative error of pairwise
    observed path lengths against truth effective impedances is reported
    as ``distance_error``. An empty estimate has precision 1 and recall 0.
    """
    est_edges = estimate.edges if isinstance(estimate, TopologyEstimate) else [tuple(sorted(e[:2])) for e in estimate]
    est = {tuple(sorted(e)) for e in est_edges}
    if mode == "exact":
        out = _prf(est, truth.edges)
        out["mode"] = mode
        return out
    if mode != "kron-collapsed":
        raise ValueError("mode must be 'exact' or 'kron-collapsed'")
    observed = sorted(range(truth.n_nodes) if observed is None else set(observed) | {0})
    true_w = [(l.parent, l.child, l.r + 1j * l.x) for l in truth.lines]
    collapsed = collapse_hidden(true_w, observed)
    t_splits = splits(collapsed, observed) if collapsed else set()
    e_splits = splits([(m, n, 1.0) for m, n in est], observed) if est else set()
    out = _prf(e_splits, t_splits)
    out["mode"] = mode
    out["collapsed_truth"] = sorted(tuple(sorted(e[:2])) for e in collapsed)
    if lengths is not None:
        D_true = pairwise_matrix(collapsed, observed)
        D_est = pairwise_matrix(lengths, observed)
        scale = max(np.abs(D_true).max(), 1e-300)
        D_cmp = D_est if np.iscomplexobj(D_est) else D_est.astype(float)
        ref = D_true if np.iscomplexobj(D_est) else D_true.real
        out["distance_error"] = float(np.abs(D_cmp - ref).max() / scale)
    return out


def impedance_mape(impedances: dict, truth: Feeder) -> float | None:
    """Mean absolute percentage error of estimated line impedances on true edges."""
    true_z = {tuple(sorted((l.parent, l.child))): l.r + 1j * l.x for l in truth.lines}
    errs = [abs(z - true_z[e]) / abs(true_z[e]) for e, z in impedances.items() if e in true_z]
    return 100.0 * float(np.mean(errs)) if errs else None


# --------------------------------------------------------------------------
# data generation
# --------------------------------------------------------------------------


def _feeder_for(cfg, rng) -> Feeder:
    if cfg["feeder"] is not None:
        return Feeder.from_dict(cfg["feeder"])
    rf = cfg["random_feeder"]
    return random_feeder(
        int(rf["n_buses"]),
        rng,
        r_range=tuple(rf["r_range"]),
        x_range=tuple(rf["x_range"]),
        rx_ratio=rf["rx_ratio"],
        max_children=rf["max_children"],
    )


def _model_for(cfg, feeder, rng) -> InjectionModel:
    inj = cfg["injections"]
    return InjectionModel.random(feeder.n_buses, rng, pq_corr=tuple(inj["pq_corr"]), scale=float(inj["scale"]))


def observed_buses(cfg, feeder) -> list:
    obs = cfg["observed"]
    if obs == "all":
        return list(range(1, feeder.n_nodes))
    if obs == "leaves":
        return list(feeder.leaves)
    return sorted(int(b) for b in obs)


def random_library(feeder: Feeder, n_decoys: int, rng) -> LineLibrary:
    """Library of the feeder lines plus ``n_decoys`` random extra lines."""
    rng = np.random.default_rng(rng)
    existing = set(feeder.edges)
    extra = []
    pairs = [(a, b) for a in range(feeder.n_nodes) for b in range(a + 1, feeder.n_nodes) if (a, b) not in existing]
    n_decoys = min(n_decoys, len(pairs))
    for k in rng.choice(len(pairs), size=n_decoys, replace=False):
        a, b = pairs[int(k)]
        extra.append(Line(a, b, float(rng.uniform(0.1, 1.0)), float(rng.uniform(0.1, 1.0))))
    return LineLibrary.from_feeder(feeder, extra)


@dataclass
class TrialData:
    feeder: Feeder
    model: InjectionModel
    T: int
    noise_sd: float
    rng: np.random.Generator
    observed: list
    _cache: dict = field(default_factory=dict)

    def phasors(self):
        if "phasor" not in self._cache:
            P, Q = sample_injections(self.model, self.T, self.rng)
            # unobserved buses carry no injection, so hidden nodes are zero-injection buses
            hidden = [b - 1 for b in range(1, self.feeder.n_nodes) if b not in set(self.observed)]
            P[hidden] = 0.0
            Q[hidden] = 0.0
            self._cache["phasor"] = simulate_phasors(self.feeder, P, Q, noise_sd=self.noise_sd, u0=1.0, rng=self.rng)
        return self._cache["phasor"]

    def magnitudes(self) -> MeasurementSet:
        if "magnitude" not in self._cache:
            P, Q = sample_injections(self.model, self.T, self.rng)
            V, theta = simulate_voltages_linear(self.feeder, P, Q, noise_sd=self.noise_sd, rng=self.rng)
            buses = list(range(1, self.feeder.n_nodes))
            self._cache["magnitude"] = MeasurementSet("magnitude", buses, V=V, theta=theta, P=P, Q=Q, noise_sd=self.noise_sd)
        return self._cache["magnitude"]

    def probing(self, magnitude=0.05) -> MeasurementSet:
        if "probing" not in self._cache:
            leaves = list(self.feeder.leaves)
            T = max(self.T, len(leaves) + 1)
            self._cache["probing"] = generate_probing_sequence(
                self.feeder, leaves, magnitude, T, noise_sd=self.noise_sd, rng=self.rng
            )
        return self._cache["probing"]


# --------------------------------------------------------------------------
# method registry
# --------------------------------------------------------------------------


def admittance_tree(Y, method, lengths=True) -> TopologyEstimate:
    """Maximum spanning tree on ``|y|`` over buses and substation from a reduced ``Y``."""
    Y = 0.5 * (np.nan_to_num(Y) + np.nan_to_num(Y).T)
    n = Y.shape[0]
    weights = {}
    ground = Y.sum(axis=1)
    for i in range(n):
        weights[(0, i + 1)] = abs(ground[i])
        for j in range(i + 1, n):
            weights[(i + 1, j + 1)] = abs(Y[i, j])
    tree = minimum_spanning_tree(range(n + 1), weights, maximum=True)
    imp = {}
    for m, k in tree:
        y = ground[k - 1] if m == 0 else -Y[m - 1, k - 1]
        if y != 0:
            imp[(m, k)] = 1.0 / y
    return TopologyEstimate(tree, method, impedances=imp)


def _tree_estimate(tree, method, complex_lengths=False) -> TopologyEstimate:
    lengths = [(m, n, w) for m, n, w in tree.edges]
    est = TopologyEstimate([e[:2] for e in tree.edges], method, hidden=list(tree.hidden))
    est.info["lengths"] = lengths
    return est


def _m_ls(data, p):
    U, I = data.phasors()
    return admittance_tree(phasor.ls_admittance(U, I, u0=1.0).Y, "ls")


def _m_rls(data, p):
    U, I = data.phasors()
    return admittance_tree(phasor.rls_admittance(U, I, u0=1.0, forgetting=p.get("forgetting", 1.0)).Y, "rls")


def _m_lasso(data, p):
    U, I = data.phasors()
    lam = float(p.get("lam", 1e-6))
    return admittance_tree(phasor.sparse_admittance(U, I, lam, u0=1.0).Y, "lasso")


def _m_tls(data, p):
    U, I = data.phasors()
    return admittance_tree(phasor.tls_admittance(U, I, u0=1.0).Y, "tls")


def _m_partial_ls(data, p):
    U, I = data.phasors()
    rows = [b - 1 for b in data.observed]
    est = phasor.partial_injection_ls(U, I[rows], rows, u0=1.0)
    Y = np.nan_to_num(est.Y)
    n = Y.shape[0]
    ground = Y.sum(axis=1)
    weights = {}
    for i in rows:
        weights[(0, i + 1)] = abs(ground[i])
        for j in range(n):
            if j != i:
                key = tuple(sorted((i + 1, j + 1)))
                weights[key] = max(weights.get(key, 0.0), abs(Y[i, j]))
    mag = max(weights.values()) if weights else 0.0
    edges = [e for e, w in weights.items() if w > float(p.get("rel_tol", 1e-6)) * mag]
    out = TopologyEstimate(edges, "partial-ls")
    out.info["scope"] = sorted(data.observed)
    return out


def _m_kron_rg(data, p):
    U, I = data.phasors()
    obs = data.observed
    rows = [b - 1 for b in obs]
    _, tree = phasor.kron_ls_identify(U[rows], I[rows], obs, u0=1.0, n_buses=data.feeder.n_buses)
    return _tree_estimate(tree, "kron-rg")


def _bundle(data):
    return sample_covariances(data.magnitudes())


def _m_cov_rx(data, p):
    est = meter.covariance_rx(_bundle(data))
    R, X = est.square()
    G = np.linalg.inv(R)
    tree = meter.laplacian_tree(0.5 * (G + G.T))
    return TopologyEstimate(tree, "cov-rx")


def _m_cov_rx_partial(data, p):
    b = _bundle(data)
    _, tree = meter.partial_covariance_rx(b, data.observed, use_reactance=bool(p.get("use_reactance", False)), strict=False)
    return _tree_estimate(tree, "cov-rx-partial")


def _m_probe_fit(data, p):
    ms = data.probing(p.get("magnitude", 0.05))
    fit = meter.probing_laplacian_fit(ms.dV, ms.dP, lam=p.get("lam"), mu=p.get("mu"))
    return TopologyEstimate(fit.tree, "probe-fit", info={"polished": fit.info.get("polished")})


def _m_impedance_ls(data, p):
    ms = data.probing(p.get("magnitude", 0.05))
    A = build_incidence(data.feeder).reduced
    fit = meter.impedance_ls(A, ms.dV, ms.dP)
    imp = {}
    for l, line in enumerate(data.feeder.lines):
        imp[tuple(sorted((line.parent, line.child)))] = complex(1.0 / fit.rho[l], line.x)
    est = TopologyEstimate(list(data.feeder.edges), "impedance-ls", impedances=imp)
    est.info["resistance_error"] = float(np.max(np.abs(1.0 / fit.rho - data.feeder.r) / data.feeder.r))
    return est


def _library(data, p):
    if "library" not in data._cache:
        data._cache["library"] = random_library(data.feeder, int(p.get("decoys", 3)), data.rng)
    return data._cache["library"]


def _status_tree(lib, w, method):
    sel = [lib.candidates[l] for l in np.flatnonzero(w)]
    return TopologyEstimate([(c.parent, c.child) for c in sel], method, info={"w": [int(v) for v in w]})


def _m_milp_id(data, p):
    ms = data.probing(p.get("magnitude", 0.05))
    lib = _library(data, p)
    sol = meter.milp_identify(lib, ms.dV, ms.dP)
    return _status_tree(lib, sol.w, "milp-id")


def _m_sig_inv(data, p):
    return voltage_only.signature_identify(_bundle(data))


def _m_glasso(data, p):
    b = _bundle(data)
    S = b.vv
    lam = float(p.get("lam", 0.05)) * float(np.mean(np.diag(S)))
    est = voltage_only.graphical_lasso(S, lam, buses=b.buses)
    tree = voltage_only.precision_tree(est.S, b.buses, np.diag(S))
    tree.method = "glasso"
    return tree


def _m_nlasso(data, p):
    ms = data.magnitudes()
    scale = float(np.mean(np.var(ms.V, axis=1)))
    res = voltage_only.neighborhood_regression(ms.V, float(p.get("lam", 0.01)) * scale, buses=ms.buses)
    # positive regression weights correspond to negative precision entries
    C = -0.5 * (res["coef"] + res["coef"].T)
    np.fill_diagonal(C, 1.0)
    tree = voltage_only.precision_tree(C, ms.buses, np.var(ms.V, axis=1))
    tree.method = "nlasso"
    return tree


def _m_ci_joint(data, p):
    return voltage_only.joint_precision_threshold(_bundle(data), lam_thr=p.get("lam_thr"))


def _m_ci_prune(data, p):
    b = _bundle(data)
    P = np.linalg.inv(b.vv)
    tol = voltage_only.structural_tolerance(P, b.kind)
    n = len(b.buses)
    cand = [(b.buses[i], b.buses[j]) for i in range(n) for j in range(i + 1, n) if abs(P[i, j]) > tol]
    return voltage_only.ci_two_hop_prune(cand, b, rtol=float(p.get("rtol", 0.05)))


def _m_phi_mst(data, p):
    return voltage_only.phi_mst(voltage_only.phi_matrix(data.magnitudes()))


def _m_miqp_detect(data, p):
    U, I = data.phasors()
    lib = _library(data, p)
    res = detection.miqp_detect(U, I, lib, u0=1.0)
    return _status_tree(lib, res.w, "miqp-detect")


def _m_fit_detect(data, p):
    U, I = data.phasors()
    lib = _library(data, p)
    cands = list(enumerate_spanning_trees(lib, cap=int(p.get("cap", 10**5))))
    res = detection.candidate_fit_detect(U, I, lib, cands, criterion=p.get("criterion", "current"), u0=1.0)
    return _status_tree(lib, res.w, "fit-detect")


def _m_ml_detect(data, p):
    lib = _library(data, p)
    S = _bundle(data).vv
    res = detection.ml_detect(S, lib, data.model, solver=p.get("solver", "enumerate"), noise_sd=data.noise_sd, compare=False)
    return _status_tree(lib, res.w, "ml-detect")


def _m_phi_group(data, p):
    lib = _library(data, p)
    phi = voltage_only.phi_matrix(data.magnitudes())
    mask = {tuple(sorted((c.parent, c.child))) for c in lib.candidates}
    est = voltage_only.phi_mst(phi, edge_mask=mask)
    anchor = int(p.get("anchor", 0))
    cands = [b for b in phi.labels if b != anchor]
    est.info["groups"] = detection.phi_sign_group(phi, anchor, cands)["groups"]
    est.method = "phi-group"
    return est


METHODS = {
    "ls": (_m_ls, "exact"),
    "rls": (_m_rls, "exact"),
    "lasso": (_m_lasso, "exact"),
    "tls": (_m_tls, "exact"),
    "partial-ls": (_m_partial_ls, "exact"),
    "kron-rg": (_m_kron_rg, "kron-collapsed"),
    "cov-rx": (_m_cov_rx, "exact"),
    "cov-rx-partial": (_m_cov_rx_partial, "kron-collapsed"),
    "probe-fit": (_m_probe_fit, "exact"),
    "impedance-ls": (_m_impedance_ls, "exact"),
    "milp-id": (_m_milp_id, "exact"),
    "sig-inv": (_m_sig_inv, "exact"),
    "glasso": (_m_glasso, "exact"),
    "nlasso": (_m_nlasso, "exact"),
    "ci-joint": (_m_ci_joint, "exact"),
    "ci-prune": (_m_ci_prune, "exact"),
    "phi-mst": (_m_phi_mst, "exact"),
    "miqp-detect": (_m_miqp_detect, "exact"),
    "fit-detect": (_m_fit_detect, "exact"),
    "ml-detect": (_m_ml_detect, "exact"),
    "phi-group": (_m_phi_group, "exact"),
}

IDENTIFY_METHODS = [m for m in METHODS if m not in ("miqp-detect", "fit-detect", "ml-detect", "phi-group")]
DETECT_METHODS = ["miqp-detect", "fit-detect", "ml-detect", "phi-group"]


# --------------------------------------------------------------------------
# experiment runner
# --------------------------------------------------------------------------


def trial_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-mode child generator: depends only on ``(seed, index)``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def thread_count(threads=None) -> int:
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get(THREADS_ENV)
    if env is None:
        return 1
    try:
        return max(1, int(env))
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from exc


def run_trial(cfg: ExperimentConfig, index: int, T: int, noise_sd: float, seed_index: int) -> dict:
    """One seeded trial; estimator errors are captured in the record."""
    rng = trial_rng(cfg["seed"], seed_index)
    feeder = _feeder_for(cfg, rng)
    model = _model_for(cfg, feeder, rng)
    data = TrialData(feeder, model, T, noise_sd, rng, observed_buses(cfg, feeder))
    fn, default_mode = METHODS[cfg["method"]]
    mode = cfg["score_mode"] or default_mode
    record = {"trial": index, "T": T, "noise_sd": noise_sd, "seed_index": seed_index, "method": cfg["method"]}
    t0 = time.perf_counter()
    try:
        est = fn(data, cfg["params"])
    except (GridTopoError, np.linalg.LinAlgError, ValueError) as exc:
        record.update(status="failed", error=f"{type(exc).__name__}: {exc}", precision=None, recall=None, f1=None)
        record["runtime_s"] = time.perf_counter() - t0
        return record
    runtime = time.perf_counter() - t0
    truth = feeder
    scope = est.info.get("scope")
    if scope is not None:
        lines = [l for l in feeder.lines if l.parent in scope or l.child in scope]
        score = _prf(est.edge_set, {tuple(sorted((l.parent, l.child))) for l in lines})
        score["mode"] = "scoped"
    else:
        observed = data.observed if mode == "kron-collapsed" else None
        score = score_topology(est, truth, mode, observed=observed, lengths=est.info.get("lengths"))
    record.update(status="ok", precision=score["precision"], recall=score["recall"], f1=score["f1"], mode=score["mode"])
    if "distance_error" in score:
        record["distance_error"] = score["distance_error"]
    mape = impedance_mape(est.impedances, feeder) if est.impedances else None
    record["impedance_mape"] = mape
    record["edges"] = [list(e) for e in est.edges]
    record["runtime_s"] = runtime
    return record


@dataclass
class EvaluationReport:
    config: dict
    trials: list
    created: float = field(default_factory=time.time)

    def summary(self) -> list:
        """Mean and sd of F1 per ``(T, noise_sd)`` cell."""
        cells = {}
        for r in self.trials:
            cells.setdefault((r["T"], r["noise_sd"]), []).append(r)
        rows = []
        for (T, s), recs in sorted(cells.items()):
            f1 = [r["f1"] for r in recs if r["f1"] is not None]
            rows.append(
                {
                    "T": T,
                    "noise_sd": s,
                    "n_trials": len(recs),
                    "n_failed": sum(r["status"] != "ok" for r in recs),
                    "f1_mean": float(np.mean(f1)) if f1 else float("nan"),
                    "f1_sd": float(np.std(f1)) if f1 else float("nan"),
                }
            )
        return rows

    def to_json(self, timing=True) -> str:
        trials = self.trials if timing else [{k: v for k, v in r.items() if k != "runtime_s"} for r in self.trials]
        out = {"config": self.config, "trials": trials, "summary": self.summary()}
        if timing:
            out["created"] = self.created
        return json.dumps(out, indent=1, sort_keys=True, default=_json_default)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["T", "noise_sd", "n_trials", "n_failed", "f1_mean", "f1_sd"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in self.summary():
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def run_experiment(config, out_dir=None, threads=None) -> EvaluationReport:
    """Run every trial of ``config``; results depend only on the config and seed.

    Trials run on ``threads`` workers (default ``$GRIDTOPO_THREADS`` or 1)
    with per-trial generators derived from the master seed and the seed
    index, and are collected in trial order. With ``out_dir`` the JSON
    report and the CSV sweep table are written there.
    """
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    trials = cfg.trials()
    if not trials:
        raise ConfigError("sweep defines no trials")
    n_threads = thread_count(threads)
    if n_threads == 1:
        records = [run_trial(cfg, *t) for t in trials]
    else:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            records = list(pool.map(lambda t: run_trial(cfg, *t), trials))
    report = EvaluationReport(cfg.data, records)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            fh.write(report.to_json())
        with open(os.path.join(out_dir, "sweep.csv"), "w") as fh:
            fh.write(report.to_csv())
    return report
