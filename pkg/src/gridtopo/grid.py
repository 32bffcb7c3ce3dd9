"""Radial feeder model and the matrices derived from it.

Buses are labelled ``0..N`` with bus 0 the substation. Reduced matrices
(``A``, ``Y``, ``R``, ``X``, ``G``, ``B``) drop the substation, so bus ``n``
sits at row/column ``n - 1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import EnumerationCapError, NumericalError, StructuralError


@dataclass(frozen=True)
class Line:
    """A line between buses ``parent`` and ``child`` with impedance ``r + jx``."""

    parent: int
    child: int
    r: float
    x: float

    @property
    def z(self) -> complex:
        return complex(self.r, self.x)

    @property
    def y(self) -> complex:
        return 1.0 / complex(self.r, self.x)


def _orient(n_nodes, edges, root=0):
    """Orient undirected edges away from ``root``; raise if not a spanning tree."""
    if len(edges) != n_nodes - 1:
        raise StructuralError(
            f"radial feeder with {n_nodes} nodes needs {n_nodes - 1} edges, got {len(edges)}"
        )
    adj = [[] for _ in range(n_nodes)]
    for a, b, r, x in edges:
        if not (0 <= a < n_nodes and 0 <= b < n_nodes) or a == b:
            raise StructuralError(f"invalid edge ({a}, {b})")
        adj[a].append((b, r, x))
        adj[b].append((a, r, x))
    parent = [-1] * n_nodes
    seen = [False] * n_nodes
    seen[root] = True
    stack = [root]
    oriented = []
    while stack:
        u = stack.pop()
        for v, r, x in adj[u]:
            if not seen[v]:
                seen[v] = True
                parent[v] = u
                oriented.append(Line(u, v, float(r), float(x)))
                stack.append(v)
    if not all(seen):
        raise StructuralError("feeder graph is disconnected")
    oriented.sort(key=lambda ln: ln.child)
    return tuple(oriented)


@dataclass(frozen=True)
class Feeder:
    """Rooted radial feeder.

    Parameters
    ----------
    n_nodes : int
        Number of buses ``N + 1`` including the substation (bus 0).
    lines : sequence of Line or (a, b, r, x) tuples
        Undirected lines; they are re-oriented away from bus 0 and sorted by
        child index, so ``lines[n - 1]`` is the line feeding bus ``n``.
    labels : sequence of str, optional
        Human-readable bus names.
    """

    n_nodes: int
    lines: tuple
    labels: tuple = field(default=())

    def __post_init__(self):
        raw = [
            (ln.parent, ln.child, ln.r, ln.x) if isinstance(ln, Line) else tuple(ln)
            for ln in self.lines
        ]
        for a, b, r, x in raw:
            if not (r > 0 and x > 0):
                raise StructuralError(f"line ({a}, {b}) needs r > 0 and x > 0")
        object.__setattr__(self, "lines", _orient(self.n_nodes, raw))
        if not self.labels:
            object.__setattr__(self, "labels", tuple(str(i) for i in range(self.n_nodes)))
        elif len(self.labels) != self.n_nodes:
            raise StructuralError("labels must have one entry per bus")

    @property
    def n_buses(self) -> int:
        """Number of non-substation buses ``N``."""
        return self.n_nodes - 1

    @property
    def parent(self) -> np.ndarray:
        p = np.full(self.n_nodes, -1, dtype=int)
        for ln in self.lines:
            p[ln.child] = ln.parent
        return p

    @property
    def r(self) -> np.ndarray:
        return np.array([ln.r for ln in self.lines])

    @property
    def x(self) -> np.ndarray:
        return np.array([ln.x for ln in self.lines])

    @property
    def edges(self) -> set:
        """Undirected edge set as sorted tuples."""
        return {tuple(sorted((ln.parent, ln.child))) for ln in self.lines}

    def neighbors(self, n: int) -> list:
        out = []
        for ln in self.lines:
            if ln.parent == n:
                out.append(ln.child)
            elif ln.child == n:
                out.append(ln.parent)
        return sorted(out)

    def degree(self, n: int) -> int:
        return len(self.neighbors(n))

    def children(self, n: int) -> list:
        return [ln.child for ln in self.lines if ln.parent == n]

    @property
    def leaves(self) -> list:
        """Buses other than the substation with no children."""
        has_child = {ln.parent for ln in self.lines}
        return [n for n in range(1, self.n_nodes) if n not in has_child]

    def path_to_root(self, n: int) -> list:
        """Buses fed by the lines on the path from ``n`` up to the root (line ids)."""
        p = self.parent
        out = []
        while n > 0:
            out.append(n)
            n = p[n]
        return out

    def line(self, child: int) -> Line:
        return self.lines[child - 1]

    def to_dict(self) -> dict:
        return {
            "nodes": self.n_nodes,
            "edges": [
                {"from": ln.parent, "to": ln.child, "r": ln.r, "x": ln.x} for ln in self.lines
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Feeder":
        try:
            lines = [(e["from"], e["to"], e["r"], e["x"]) for e in data["edges"]]
            return cls(int(data["nodes"]), tuple(lines))
        except KeyError as exc:
            raise StructuralError(f"feeder JSON missing field {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "Feeder":
        return cls.from_dict(json.loads(Path(path).read_text()))


def seven_bus_feeder(r=1.0, x=1.0) -> Feeder:
    """Seven-bus test feeder (plus the substation) with leaves 3, 5, 7.

    Edges are (0,1), (1,2), (2,3), (1,4), (4,5), (4,6), (6,7); scalar ``r``
    and ``x`` are applied to every line.
    """
    pairs = [(0, 1), (1, 2), (2, 3), (1, 4), (4, 5), (4, 6), (6, 7)]
    return Feeder(8, tuple((a, b, r, x) for a, b in pairs))


def random_feeder(
    n_buses: int,
    rng: np.random.Generator,
    r_range=(0.1, 1.0),
    x_range=(0.1, 1.0),
    rx_ratio: float | None = None,
    max_children: int | None = None,
) -> Feeder:
    """Random recursive tree on ``n_buses + 1`` nodes with uniform impedances.

    When ``rx_ratio`` is given every line gets ``x = r / rx_ratio``.
    """
    lines = []
    n_children = np.zeros(n_buses + 1, dtype=int)
    for k in range(1, n_buses + 1):
        allowed = np.arange(k)
        if max_children is not None:
            allowed = allowed[n_children[:k] < max_children]
        p = int(rng.choice(allowed))
        n_children[p] += 1
        r = float(rng.uniform(*r_range))
        x = r / rx_ratio if rx_ratio is not None else float(rng.uniform(*x_range))
        lines.append((p, k, r, x))
    return Feeder(n_buses + 1, tuple(lines))


# --------------------------------------------------------------------------
# Incidence and topology matrices
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class IncidenceMatrices:
    full: np.ndarray  # L x (N+1)
    reduced: np.ndarray  # L x N
    root: np.ndarray  # L

    @property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.reduced)


def incidence(n_nodes: int, pairs: Sequence) -> np.ndarray:
    """Branch-bus incidence with +1 at the first and -1 at the second bus."""
    A = np.zeros((len(pairs), n_nodes), dtype=int)
    for row, (a, b) in enumerate(pairs):
        A[row, a] = 1
        A[row, b] = -1
    return A


def build_incidence(feeder: Feeder) -> IncidenceMatrices:
    """Complete and reduced incidence matrices, rows ordered by child bus.

    ``-inv(reduced)`` is a 0/1 matrix whose row ``n - 1`` marks the lines on the
    path from bus ``n`` to the root (equivalently the ancestors of ``n``,
    ``n`` included, via the line feeding each).
    """
    full = incidence(feeder.n_nodes, [(ln.parent, ln.child) for ln in feeder.lines])
    reduced = full[:, 1:]
    if abs(np.linalg.det(reduced)) < 0.5:
        raise StructuralError("reduced incidence matrix is singular")
    return IncidenceMatrices(full=full, reduced=reduced, root=full[:, 0].copy())


@dataclass(frozen=True)
class TopologyMatrices:
    Y: np.ndarray
    R: np.ndarray
    X: np.ndarray
    G: np.ndarray
    B: np.ndarray

    @property
    def Z(self) -> np.ndarray:
        return self.R + 1j * self.X


def build_topology_matrices(feeder: Feeder) -> TopologyMatrices:
    inc = build_incidence(feeder)
    A = inc.reduced.astype(float)
    Ainv = np.linalg.inv(A)
    r, x = feeder.r, feeder.x
    y = 1.0 / (r + 1j * x)
    Y = A.T @ (y[:, None] * A)
    R = Ainv @ (r[:, None] * Ainv.T)
    X = Ainv @ (x[:, None] * Ainv.T)
    G = A.T @ ((1.0 / r)[:, None] * A)
    B = A.T @ ((1.0 / x)[:, None] * A)
    return TopologyMatrices(Y=Y, R=R, X=X, G=G, B=B)


def full_admittance(feeder: Feeder) -> np.ndarray:
    """(N+1) x (N+1) bus admittance matrix including the substation."""
    inc = build_incidence(feeder)
    A = inc.full.astype(float)
    y = 1.0 / (feeder.r + 1j * feeder.x)
    return A.T @ (y[:, None] * A)


def path_resistance(feeder: Feeder, m: int, n: int, *, reactance=False) -> float:
    """Total resistance of the lines shared by the root paths of ``m`` and ``n``."""
    if m == 0 or n == 0:
        return 0.0
    shared = set(feeder.path_to_root(m)) & set(feeder.path_to_root(n))
    vals = feeder.x if reactance else feeder.r
    return float(sum(vals[c - 1] for c in shared))


def effective_resistance(R: np.ndarray, m: int, n: int) -> float:
    """``R(m,m) + R(n,n) - 2 R(m,n)`` with bus labels; bus 0 has zero row."""

    def entry(a, b):
        if a == 0 or b == 0:
            return 0.0
        return R[a - 1, b - 1]

    return float(entry(m, m) + entry(n, n) - 2 * entry(m, n))


def effective_distances(Z: np.ndarray, buses: Sequence[int]) -> np.ndarray:
    """Matrix of effective resistances (or impedances) among ``buses``.

    ``Z`` is a reduced N x N matrix; bus 0 may appear in ``buses``.
    """
    buses = list(buses)
    idx = np.array([b - 1 for b in buses])
    diag = np.array([Z[i, i] if b > 0 else 0.0 for b, i in zip(buses, idx)])
    sub = np.zeros((len(buses), len(buses)), dtype=Z.dtype)
    for a, (ba, ia) in enumerate(zip(buses, idx)):
        for b, (bb, ib) in enumerate(zip(buses, idx)):
            if ba > 0 and bb > 0:
                sub[a, b] = Z[ia, ib]
    D = diag[:, None] + diag[None, :] - 2 * sub
    np.fill_diagonal(D, 0.0)
    return D


def kron_reduce(Y: np.ndarray, keep: Sequence[int]) -> np.ndarray:
    """Schur complement of ``Y`` onto the index set ``keep`` (matrix indices)."""
    keep = np.asarray(sorted(keep), dtype=int)
    n = Y.shape[0]
    drop = np.setdiff1d(np.arange(n), keep)
    if drop.size == 0:
        return Y[np.ix_(keep, keep)].copy()
    Ydd = Y[np.ix_(drop, drop)]
    cond = np.linalg.cond(Ydd)
    if not np.isfinite(cond) or cond > 1e14:
        raise NumericalError(f"eliminated block is singular (cond={cond:.3g})", condition=cond)
    Yks = Y[np.ix_(keep, drop)]
    return Y[np.ix_(keep, keep)] - Yks @ np.linalg.solve(Ydd, Y[np.ix_(drop, keep)])


# --------------------------------------------------------------------------
# Line libraries and spanning trees
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LineLibrary:
    """Candidate lines over a fixed bus set.

    ``status`` holds 1 (known energized), 0 (known open) or None (unknown).
    """

    n_nodes: int
    candidates: tuple  # of Line, orientation as given
    status: tuple = ()

    def __post_init__(self):
        cands = tuple(c if isinstance(c, Line) else Line(*c) for c in self.candidates)
        for c in cands:
            if not (0 <= c.parent < self.n_nodes and 0 <= c.child < self.n_nodes) or c.parent == c.child:
                raise StructuralError(f"candidate ({c.parent}, {c.child}) has invalid endpoints")
            if not (c.r > 0 and c.x > 0):
                raise StructuralError("candidate lines need r > 0 and x > 0")
        object.__setattr__(self, "candidates", cands)
        if not self.status:
            object.__setattr__(self, "status", tuple([None] * len(cands)))
        elif len(self.status) != len(cands):
            raise StructuralError("status vector length mismatch")

    @property
    def n_lines(self) -> int:
        return len(self.candidates)

    @property
    def n_buses(self) -> int:
        return self.n_nodes - 1

    @property
    def full_incidence(self) -> np.ndarray:
        return incidence(self.n_nodes, [(c.parent, c.child) for c in self.candidates])

    @property
    def reduced_incidence(self) -> np.ndarray:
        return self.full_incidence[:, 1:]

    @property
    def r(self) -> np.ndarray:
        return np.array([c.r for c in self.candidates])

    @property
    def x(self) -> np.ndarray:
        return np.array([c.x for c in self.candidates])

    @property
    def y(self) -> np.ndarray:
        return 1.0 / (self.r + 1j * self.x)

    def is_spanning_tree(self, w) -> bool:
        w = np.asarray(w)
        if w.sum() != self.n_nodes - 1:
            return False
        uf = _UnionFind(self.n_nodes)
        for c, wl in zip(self.candidates, w):
            if wl and not uf.union(c.parent, c.child):
                return False
        return True

    def feeder(self, w) -> Feeder:
        """Feeder induced by the selected lines; raises if not a spanning tree."""
        sel = [c for c, wl in zip(self.candidates, w) if wl]
        return Feeder(self.n_nodes, tuple((c.parent, c.child, c.r, c.x) for c in sel))

    def status_of(self, feeder: Feeder) -> np.ndarray:
        """Status vector selecting the lines of ``feeder`` (matching endpoints)."""
        target = feeder.edges
        w = np.array([int(tuple(sorted((c.parent, c.child))) in target) for c in self.candidates])
        return w

    @classmethod
    def from_feeder(cls, feeder: Feeder, extra=()) -> "LineLibrary":
        cands = list(feeder.lines) + [Line(*e) if not isinstance(e, Line) else e for e in extra]
        return cls(feeder.n_nodes, tuple(cands))

    def to_dict(self) -> dict:
        return {
            "nodes": self.n_nodes,
            "candidates": [
                {"from": c.parent, "to": c.child, "r": c.r, "x": c.x, "status": s}
                for c, s in zip(self.candidates, self.status)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LineLibrary":
        cands = [Line(e["from"], e["to"], e["r"], e["x"]) for e in data["candidates"]]
        status = tuple(e.get("status") for e in data["candidates"])
        return cls(int(data["nodes"]), tuple(cands), status)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "LineLibrary":
        return cls.from_dict(json.loads(Path(path).read_text()))


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[max(ra, rb)] = min(ra, rb)
        return True


def count_spanning_trees(library: LineLibrary) -> int:
    """Matrix-tree count honouring fixed statuses (forced-on lines contracted)."""
    uf = _UnionFind(library.n_nodes)
    for c, s in zip(library.candidates, library.status):
        if s == 1 and not uf.union(c.parent, c.child):
            return 0
    roots = sorted({uf.find(i) for i in range(library.n_nodes)})
    pos = {r: k for k, r in enumerate(roots)}
    n = len(roots)
    if n == 1:
        return 1
    L = np.zeros((n, n))
    for c, s in zip(library.candidates, library.status):
        if s is not None:
            continue
        a, b = pos[uf.find(c.parent)], pos[uf.find(c.child)]
        if a == b:
            continue
        L[a, a] += 1
        L[b, b] += 1
        L[a, b] -= 1
        L[b, a] -= 1
    sign, logdet = np.linalg.slogdet(L[1:, 1:])
    if sign <= 0:
        return 0
    return int(round(np.exp(logdet)))


def enumerate_spanning_trees(library: LineLibrary, cap: int = 10**6) -> Iterator[np.ndarray]:
    """Yield every status vector whose selected lines form a spanning tree.

    Include/exclude recursion over candidates in index order: including a line
    contracts its endpoints, excluding it deletes it, and a branch is pruned as
    soon as the remaining lines cannot connect the forest. Known statuses in
    ``library.status`` are honoured.
    """
    count = count_spanning_trees(library)
    if count > cap:
        raise EnumerationCapError(
            f"library spans {count} trees, above the cap of {cap}; prune candidates",
            count=count,
            cap=cap,
        )
    n, L = library.n_nodes, library.n_lines
    ends = [(c.parent, c.child) for c in library.candidates]
    status = library.status

    def connectable(chosen, start):
        uf = _UnionFind(n)
        for l in range(L):
            if chosen[l] or (l >= start and status[l] != 0):
                uf.union(*ends[l])
        root = uf.find(0)
        return all(uf.find(i) == root for i in range(n))

    w = np.zeros(L, dtype=int)

    def rec(l, uf_parent, n_sel):
        if n_sel == n - 1:
            if all(status[k] != 1 for k in range(l, L)):
                yield w.copy()
            return
        if l == L:
            return
        a, b = ends[l]
        uf = _UnionFind(n)
        uf.parent = list(uf_parent)
        if status[l] != 0 and uf.union(a, b):
            w[l] = 1
            yield from rec(l + 1, uf.parent, n_sel + 1)
            w[l] = 0
        if status[l] != 1 and connectable(w, l + 1):
            yield from rec(l + 1, uf_parent, n_sel)

    yield from rec(0, list(range(n)), 0)
