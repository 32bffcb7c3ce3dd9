"""Small graph utilities on edge lists: spanning trees, tree metrics, splits."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .grid import _UnionFind


@dataclass
class TopologyEstimate:
    """Recovered connectivity over node labels (substation is 0).

    ``edges`` are sorted pairs; ``impedances`` optionally maps an edge to an
    estimated impedance; ``hidden`` lists labels of inferred hidden nodes.
    """

    edges: list
    method: str
    impedances: dict = field(default_factory=dict)
    hidden: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.edges = sorted({tuple(sorted((int(m), int(n)))) for m, n in self.edges})

    @property
    def edge_set(self) -> set:
        return set(self.edges)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "edges": [list(e) for e in self.edges],
            "hidden": list(self.hidden),
            "impedances": [[m, n, float(np.real(z)), float(np.imag(z))] for (m, n), z in sorted(self.impedances.items())],
        }


def minimum_spanning_tree(nodes, weights: dict, maximum=False) -> list:
    """Kruskal on ``{(m, n): weight}``; ties broken by lexicographic ``(m, n)``.

    Returns a spanning forest if the candidate graph is disconnected.
    """
    nodes = sorted(nodes)
    index = {v: i for i, v in enumerate(nodes)}
    uf = _UnionFind(len(nodes))
    sign = -1.0 if maximum else 1.0
    order = sorted(
        (sign * w, tuple(sorted(e))) for e, w in weights.items() if e[0] != e[1]
    )
    tree = []
    for _, (m, n) in order:
        if uf.union(index[m], index[n]):
            tree.append((m, n))
    return sorted(tree)


def components(nodes, edges) -> list:
    nodes = sorted(nodes)
    index = {v: i for i, v in enumerate(nodes)}
    uf = _UnionFind(len(nodes))
    for m, n in edges:
        uf.union(index[m], index[n])
    groups = defaultdict(list)
    for v in nodes:
        groups[uf.find(index[v])].append(v)
    return sorted(groups.values())


def adjacency(edges) -> dict:
    adj = defaultdict(dict)
    for e in edges:
        m, n = e[0], e[1]
        w = e[2] if len(e) > 2 else 1.0
        adj[m][n] = w
        adj[n][m] = w
    return adj


def tree_distances(edges, sources: Iterable) -> dict:
    """Path lengths from each source over a weighted tree ``[(m, n, length)]``."""
    adj = adjacency(edges)
    out = {}
    for s in sources:
        dist = {s: 0.0}
        stack = [s]
        while stack:
            u = stack.pop()
            for v, w in adj[u].items():
                if v not in dist:
                    dist[v] = dist[u] + w
                    stack.append(v)
        out[s] = dist
    return out


def hop_distances(edges, nodes) -> dict:
    return tree_distances([(m, n, 1) for m, n, *_ in edges], nodes)


def collapse_hidden(edges, observed) -> list:
    """Remove unobserved nodes of degree <= 2, merging series edges.

    ``edges`` is ``[(m, n, length)]``; lengths may be numbers, complex, or
    numpy arrays. Unobserved leaves are pruned repeatedly; unobserved nodes of
    degree 2 are replaced by a single edge with the summed length.
    """
    observed = set(observed)
    adj = adjacency(edges)
    changed = True
    while changed:
        changed = False
        for v in sorted(adj, key=str):
            if v in observed or v not in adj:
                continue
            nb = adj[v]
            if len(nb) <= 1:
                for u in list(nb):
                    del adj[u][v]
                del adj[v]
                changed = True
            elif len(nb) == 2:
                (a, wa), (b, wb) = nb.items()
                del adj[a][v], adj[b][v]
                del adj[v]
                adj[a][b] = wa + wb
                adj[b][a] = wa + wb
                changed = True
    out = []
    seen = set()
    for m in adj:
        for n, w in adj[m].items():
            key = frozenset((m, n))
            if key not in seen:
                seen.add(key)
                out.append((m, n, w))
    return out


def splits(edges, observed) -> set:
    """Bipartitions of the observed labels induced by each tree edge.

    Each split is stored as the frozenset side that does not contain the
    smallest observed label, so equal trees give equal split sets regardless
    of hidden-node naming.
    """
    observed = sorted(observed)
    anchor = observed[0]
    adj = adjacency(edges)
    out = set()
    seen = set()
    for m in adj:
        for n in adj[m]:
            key = frozenset((m, n))
            if key in seen:
                continue
            seen.add(key)
            side = _side(adj, n, m)
            obs_side = frozenset(v for v in side if v in set(observed))
            if anchor in obs_side:
                obs_side = frozenset(observed) - obs_side
            out.add(obs_side)
    return out


def _side(adj, start, blocked) -> set:
    seen = {start}
    stack = [start]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v != blocked and v not in seen:
                seen.add(v)
                stack.append(v)
    return seen


def is_tree(nodes, edges) -> bool:
    nodes = list(nodes)
    if len(edges) != len(nodes) - 1:
        return False
    return len(components(nodes, [e[:2] for e in edges])) == 1


def pairwise_matrix(edges, labels) -> np.ndarray:
    """Observed-to-observed path lengths as a dense matrix."""
    d = tree_distances(edges, labels)
    n = len(labels)
    M = np.zeros((n, n), dtype=complex if any(isinstance(e[2], complex) for e in edges) else float)
    for i, a in enumerate(labels):
        for j, b in enumerate(labels):
            M[i, j] = d[a][b]
    return M
