"""Latent-tree reconstruction from additive distances by recursive grouping.

Distances may be real (effective resistances) or complex (effective
impedances, resistance in the real part and reactance in the imaginary part).
Complex inputs are handled componentwise: every constancy and parent test must
pass for both parts.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
import numpy as np

from .errors import ReconstructionError
from .graphs import adjacency, pairwise_matrix

log = logging.getLogger(__name__)

SIBLINGS = "siblings"
PARENT_CHILD = "parent-child"
UNRELATED = "unrelated"


def _components(D):
    """Stack a real or complex matrix as an (n, n, c) real array."""
    D = np.asarray(D)
    if np.iscomplexobj(D):
        return np.stack([D.real, D.imag], axis=-1)
    return D[..., None].astype(float)


def default_tolerance(D, max_quadruples=4000) -> float:
    """Noise-adaptive tolerance from four-point-condition residuals.

    For a tree metric the two largest of ``d_ij + d_kl``, ``d_ik + d_jl``,
    ``d_il + d_jk`` coincide; their gap measures distance noise. The tolerance
    is five times the median gap, floored at ``1e-9 * max |d|``.
    """
    C = _components(D)
    n = C.shape[0]
    scale = float(np.abs(C).max()) if C.size else 0.0
    floor = 1e-9 * max(scale, 1e-300)
    if n < 4:
        return floor
    quads = list(itertools.combinations(range(n), 4))
    if len(quads) > max_quadruples:
        pick = np.random.default_rng(0).choice(len(quads), max_quadruples, replace=False)
        quads = [quads[i] for i in sorted(pick)]
    gaps = [_four_point_gap(C, q) for q in quads]
    return max(5.0 * float(np.median(gaps)), floor)


def _four_point_gap(C, q):
    i, j, k, l = q
    sums = np.stack([C[i, j] + C[k, l], C[i, k] + C[j, l], C[i, l] + C[j, k]])  # (3, c)
    sums = np.sort(sums, axis=0)
    return float(np.max(sums[2] - sums[1]))


@dataclass
class DistanceMatrix:
    """Pairwise distances among ``labels``; ``tol=None`` selects the adaptive default."""

    labels: list
    d: np.ndarray
    tol: float | None = None

    def __post_init__(self):
        self.labels = list(self.labels)
        self.d = np.asarray(self.d)
        n = len(self.labels)
        if self.d.shape != (n, n):
            raise ValueError(f"distance matrix must be {n} x {n}")
        if not np.allclose(self.d, self.d.T, atol=1e-12 * max(1.0, np.abs(self.d).max())):
            raise ValueError("distance matrix must be symmetric")
        if self.tol is None:
            self.tol = default_tolerance(self.d)

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.d)

    def index(self, label) -> int:
        return self.labels.index(label)

    def four_point_violation(self):
        """Quadruple with the largest four-point gap and that gap."""
        C = _components(self.d)
        n = C.shape[0]
        best, worst = None, 0.0
        for q in itertools.combinations(range(n), 4):
            g = _four_point_gap(C, q)
            if g > worst:
                best, worst = q, g
        if best is None:
            return None, 0.0
        return tuple(self.labels[i] for i in best), worst


@dataclass
class ReconstructedTree:
    """Tree over observed labels plus hidden nodes (negative integers)."""

    observed: list
    edges: list  # (m, n, length); length float or complex
    hidden: list = field(default_factory=list)
    consistent: bool = True
    max_error: float = 0.0

    @property
    def nodes(self) -> list:
        return list(self.observed) + list(self.hidden)

    @property
    def edge_set(self) -> set:
        return {tuple(sorted((m, n))) for m, n, _ in self.edges}

    def degree(self, v) -> int:
        return sum(v in (m, n) for m, n, _ in self.edges)

    def pairwise(self, labels=None) -> np.ndarray:
        labels = list(self.observed if labels is None else labels)
        return pairwise_matrix(self.edges, labels)

    def rooted(self, root=0) -> list:
        """Edges oriented away from ``root`` as ``(parent, child, length)``."""
        adj = adjacency(self.edges)
        out, seen, stack = [], {root}, [root]
        while stack:
            u = stack.pop()
            for v in sorted(adj[u], key=lambda t: (t < 0, abs(t))):
                if v not in seen:
                    seen.add(v)
                    out.append((u, v, adj[u][v]))
                    stack.append(v)
        return out

    def to_dict(self) -> dict:
        """Feeder-style JSON; hidden nodes listed with ``"hidden": true``."""
        edges = []
        for m, n, w in self.rooted(self.observed[0] if 0 not in self.observed else 0):
            w = complex(w)
            edges.append({"from": m, "to": n, "r": w.real, "x": w.imag})
        return {
            "nodes": len(self.nodes),
            "node_list": [{"id": v, "hidden": v in self.hidden} for v in self.nodes],
            "edges": edges,
        }

    @classmethod
    def from_dict(cls, d) -> "ReconstructedTree":
        hidden = [n["id"] for n in d["node_list"] if n["hidden"]]
        observed = [n["id"] for n in d["node_list"] if not n["hidden"]]
        edges = [(e["from"], e["to"], complex(e["r"], e["x"]) if e["x"] else e["r"]) for e in d["edges"]]
        return cls(observed=observed, edges=edges, hidden=hidden)


@dataclass(frozen=True)
class SiblingVerdict:
    kind: str
    constant: float | complex
    spread: float
    parent: object = None  # set for parent-child verdicts


def _phi(dist, i, j, others):
    return np.stack([dist[i][k] - dist[j][k] for k in others])  # (K, c)


def _verdict(dist, i, j, others, tol):
    phi = _phi(dist, i, j, others)
    spread = float(np.max(phi.max(axis=0) - phi.min(axis=0)))
    const = phi.mean(axis=0)
    dij = dist[i][j]
    if spread > tol:
        return UNRELATED, const, spread, None
    # Parent-child when the constant difference equals +-d(i,j).
    up = float(np.max(np.abs(phi - dij)))
    down = float(np.max(np.abs(phi + dij)))
    if min(up, down) <= tol:
        return PARENT_CHILD, const, spread, (j if up <= down else i)
    return SIBLINGS, const, spread, None


def _as_scalar(vec):
    vec = np.asarray(vec)
    return complex(vec[0], vec[1]) if vec.size == 2 else float(vec[0])


def sibling_test(d: DistanceMatrix, m, n, tol=None) -> SiblingVerdict:
    """Classify ``(m, n)`` from the differences ``d(m,k) - d(n,k)`` over all other ``k``."""
    if len(d.labels) < 3:
        raise ValueError("sibling test needs at least three observed nodes")
    tol = d.tol if tol is None else tol
    dist = _dist_dict(d)
    others = [k for k in d.labels if k not in (m, n)]
    kind, const, spread, parent = _verdict(dist, m, n, others, tol)
    return SiblingVerdict(kind, _as_scalar(const), spread, parent)


def _dist_dict(d: DistanceMatrix):
    C = _components(d.d)
    return {a: {b: C[i, j] for j, b in enumerate(d.labels)} for i, a in enumerate(d.labels)}


def _families(active, dist, tol, allowed_pc):
    """Group active nodes; complete-linkage merging in order of increasing spread."""
    passing = {}
    for i, j in itertools.combinations(active, 2):
        others = [k for k in active if k not in (i, j)]
        kind, _, spread, parent = _verdict(dist, i, j, others, tol)
        if kind == UNRELATED:
            continue
        if kind == PARENT_CHILD and allowed_pc is not None and not allowed_pc(i, j):
            continue
        passing[(i, j)] = spread
    group = {v: (v,) for v in active}
    for (i, j), _ in sorted(passing.items(), key=lambda kv: (kv[1], active.index(kv[0][0]), active.index(kv[0][1]))):
        gi, gj = group[i], group[j]
        if gi is gj:
            continue
        if all((a, b) in passing or (b, a) in passing for a in gi for b in gj):
            merged = tuple(sorted(gi + gj, key=active.index))
            for v in merged:
                group[v] = merged
    fams, seen = [], set()
    for v in active:
        g = group[v]
        if id(g) not in seen:
            seen.add(id(g))
            fams.append(list(g))
    return fams, passing


def _family_parent(fam, active, dist, tol, allowed_pc):
    best, best_res = None, np.inf
    for j in fam:
        res = 0.0
        for i in fam:
            if i == j:
                continue
            if allowed_pc is not None and not allowed_pc(i, j):
                res = np.inf
                break
            others = [k for k in active if k not in (i, j)]
            phi = _phi(dist, i, j, others)
            res = max(res, float(np.max(np.abs(phi - dist[i][j]))))
        if res <= tol and res < best_res:
            best, best_res = j, res
    return best


def _grouping(d: DistanceMatrix, tol, edge_mask=None, strict=True) -> ReconstructedTree:
    dist = _dist_dict(d)
    observed = list(d.labels)
    obs_set = set(observed)
    allowed_pc = None
    if edge_mask is not None:
        mask = {frozenset(e) for e in edge_mask}

        def allowed_pc(i, j):
            if i in obs_set and j in obs_set:
                return frozenset((i, j)) in mask
            return True

    active = list(observed)
    edges, hidden = [], []
    next_hidden = -1
    forced = False
    while len(active) > 2:
        fams, passing = _families(active, dist, tol, allowed_pc)
        if all(len(f) == 1 for f in fams):
            # No pair passes at this tolerance; merge the most constant pair.
            forced = True
            best = min(
                itertools.combinations(active, 2),
                key=lambda p: float(np.max(np.ptp(_phi(dist, p[0], p[1], [k for k in active if k not in p]), axis=0))),
            )
            fams = [list(best)] + [[v] for v in active if v not in best]
            log.warning("recursive grouping forced merge of %s", best)
        new_active, new_hidden = [], {}
        for fam in fams:
            if len(fam) == 1:
                new_active.append(fam[0])
                continue
            parent = _family_parent(fam, active, dist, tol, allowed_pc)
            if parent is not None:
                for i in fam:
                    if i != parent:
                        edges.append((parent, i, dist[i][parent]))
                new_active.append(parent)
                continue
            h = next_hidden
            next_hidden -= 1
            hidden.append(h)
            dist[h] = {h: np.zeros_like(dist[fam[0]][fam[0]])}
            for i in fam:
                parts = []
                for j in fam:
                    if j == i:
                        continue
                    others = [k for k in active if k not in (i, j)]
                    parts.append(0.5 * (dist[i][j] + _phi(dist, i, j, others).mean(axis=0)))
                dih = np.mean(parts, axis=0)
                dist[h][i] = dih
                dist[i][h] = dih
                edges.append((h, i, dih))
            for k in active:
                if k in fam:
                    continue
                dkh = np.mean([dist[k][i] - dist[i][h] for i in fam], axis=0)
                dist[h][k] = dkh
                dist[k][h] = dkh
            new_hidden[h] = fam
            new_active.append(h)
        for h1, h2 in itertools.combinations(new_hidden, 2):
            f1, f2 = new_hidden[h1], new_hidden[h2]
            val = np.mean([dist[a][b] - dist[a][h1] - dist[b][h2] for a in f1 for b in f2], axis=0)
            dist[h1][h2] = val
            dist[h2][h1] = val
        active = new_active
    if len(active) == 2:
        a, b = active
        edges.append((a, b, dist[a][b]))

    edges = [(m, n, _as_scalar(w)) for m, n, w in edges]
    tree = ReconstructedTree(observed=observed, edges=edges, hidden=hidden)
    rec = tree.pairwise(observed)
    err = float(np.max(np.abs(rec - d.d))) if len(observed) > 1 else 0.0
    tree.max_error = err
    # a tree metric has nonnegative edge lengths in every component
    shortest = min((min(complex(w).real, complex(w).imag if d.is_complex else np.inf) for _, _, w in edges), default=0.0)
    tree.consistent = (not forced) and err <= 3 * tol and shortest >= -3 * tol
    if not tree.consistent and strict:
        quad, gap = d.four_point_violation()
        raise ReconstructionError(
            f"distances are not tree-consistent within tolerance {tol:.3g} "
            f"(max reconstruction error {err:.3g}; shortest edge {shortest:.3g}; worst quadruple {quad}, gap {gap:.3g})",
            quadruple=quad,
            violation=gap,
            tree=tree,
        )
    return tree


def recursive_grouping(d: DistanceMatrix, edge_mask=None, strict=True) -> ReconstructedTree:
    """Reconstruct a latent tree whose observed-node path lengths match ``d``.

    Hidden nodes of degree >= 3 are introduced as needed (negative labels);
    unobserved nodes of degree <= 2 in the generating tree cannot be resolved
    and appear merged into series edges. ``edge_mask`` restricts parent-child
    links between observed nodes to the listed pairs.
    """
    if np.iscomplexobj(d.d):
        raise TypeError("use complex_recursive_grouping for complex distances")
    return _grouping(d, d.tol, edge_mask, strict)


def complex_recursive_grouping(d_re, d_im, tol=None, labels=None, edge_mask=None, strict=True) -> ReconstructedTree:
    """Recursive grouping on effective impedances; tests must pass in both parts.

    Edge lengths in the result are complex ``r + jx``.
    """
    d_re, d_im = np.asarray(d_re, float), np.asarray(d_im, float)
    labels = list(range(d_re.shape[0])) if labels is None else list(labels)
    D = d_re + 1j * d_im
    if tol is None:
        tol = max(default_tolerance(d_re), default_tolerance(d_im))
    dm = DistanceMatrix(labels, D, tol)
    try:
        return _grouping(dm, tol, edge_mask, strict)
    except ReconstructionError as exc:
        t_re = _grouping(DistanceMatrix(labels, d_re, tol), tol, edge_mask, strict=False)
        t_im = _grouping(DistanceMatrix(labels, d_im, tol), tol, edge_mask, strict=False)
        from .graphs import splits

        if t_re.consistent and t_im.consistent and splits(t_re.edges, labels) != splits(t_im.edges, labels):
            raise ReconstructionError(
                "resistive and reactive distances imply different trees",
                quadruple=exc.quadruple,
                violation=exc.violation,
                tree=exc.tree,
            ) from None
        raise
