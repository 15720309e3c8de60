"""Deterministic multilevel graph coarsening by matching contraction.

Each level contracts a maximal matching found in three stages: grow
vertex-disjoint paths by repeatedly following the heaviest incident edge,
solve the maximum-weight matching on each path exactly by dynamic
programming, then greedily extend with any remaining independent edges.
Every tie is broken by node id, so the result is a pure function of the
input graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import PartitionError, UsageError
from .graph import Graph


@dataclass
class Matching:
    """Vertex-disjoint edge set; pairs stored as (i, j) with i < j, sorted."""

    pairs: list

    def __post_init__(self):
        self.pairs = sorted(tuple(sorted(p)) for p in self.pairs)
        seen = set()
        for i, j in self.pairs:
            if i == j:
                raise PartitionError(f"matching pairs node {i} with itself")
            if i in seen or j in seen:
                raise PartitionError("matching reuses a node")
            seen.add(i)
            seen.add(j)

    def __len__(self) -> int:
        return len(self.pairs)

    def matched_nodes(self) -> set:
        return {v for p in self.pairs for v in p}

    def weight(self, g: Graph) -> float:
        total = 0.0
        for i, j in self.pairs:
            if g.weights[i, j] <= 0:
                raise PartitionError(f"matching uses absent edge ({i},{j})")
            total += g.weights[i, j]
        return total

    def is_maximal(self, g: Graph) -> bool:
        """No graph edge has both endpoints unmatched."""
        used = self.matched_nodes()
        for i, j, _ in g.edges():
            if i not in used and j not in used:
                return False
        return True


def _grow_paths(g: Graph):
    """Decompose the edge set into vertex-disjoint paths of (i, j, w) edges.

    Each path starts at the lowest-id vertex that still has an edge, walks to
    the heaviest incident neighbor (ties to the lower id), and removes the
    departed vertex so no vertex is revisited.
    """
    w = g.weights.copy()
    paths = []
    for start in range(g.n):
        if w[start].max(initial=0.0) <= 0:
            continue
        path = []
        v = start
        while w[v].max(initial=0.0) > 0:
            nbrs = np.nonzero(w[v] > 0)[0]
            best = nbrs[np.argmax(w[v, nbrs])]  # argmax keeps the lowest id on ties
            path.append((int(v), int(best), float(w[v, best])))
            w[v, :] = 0.0
            w[:, v] = 0.0
            v = best
        w[v, :] = 0.0
        w[:, v] = 0.0
        paths.append(path)
    return paths


def max_weight_matching_path(q) -> Matching:
    """Exact maximum-weight matching on a path of (i, j, w) edges.

    best[i] = max(best[i-1], best[i-2] + w_i); ties prefer skipping the edge,
    so the earliest optimal edge set is returned.
    """
    q = list(q)
    nodes = set()
    for idx, (i, j, _) in enumerate(q):
        if idx == 0:
            nodes.update((i, j))
        else:
            pi, pj, _ = q[idx - 1]
            if len({i, j} & {pi, pj}) != 1 or (i in nodes and j in nodes):
                raise UsageError("edge list is not a simple path")
            nodes.update((i, j))
    m = len(q)
    best = [0.0] * (m + 1)
    take = [False] * (m + 1)
    for i in range(1, m + 1):
        skip = best[i - 1]
        with_edge = (best[i - 2] if i >= 2 else 0.0) + q[i - 1][2]
        if with_edge > skip:
            best[i] = with_edge
            take[i] = True
        else:
            best[i] = skip
    pairs = []
    i = m
    while i >= 1:
        if take[i]:
            pairs.append((q[i - 1][0], q[i - 1][1]))
            i -= 2
        else:
            i -= 1
    return Matching(pairs)


def path_grow_select(g: Graph) -> Matching:
    """One coarsening step's matching.

    Grows heaviest-edge paths, matches each path optimally, then greedily
    completes to a maximal matching over the remaining edges in descending
    weight (ties by endpoint ids).
    """
    pairs = []
    used = set()
    for path in _grow_paths(g):
        for i, j in max_weight_matching_path(path).pairs:
            pairs.append((i, j))
            used.add(i)
            used.add(j)
    leftovers = sorted(g.edges(), key=lambda e: (-e[2], e[0], e[1]))
    for i, j, _ in leftovers:
        if i not in used and j not in used:
            pairs.append((i, j))
            used.add(i)
            used.add(j)
    return Matching(pairs)


def coarsen(g: Graph, matching: Matching):
    """Contract matched pairs into supernodes.

    Supernodes are numbered by ascending minimum member id; inter-super
    weights are the sums of crossing edge weights and intra-super weight is
    dropped. Returns (coarse graph, parent array of length g.n).
    """
    matching.weight(g)  # validates every pair is a real edge
    groups = list(matching.pairs) + [
        (v,) for v in range(g.n) if v not in matching.matched_nodes()
    ]
    groups.sort(key=min)
    parent = np.empty(g.n, dtype=np.int64)
    for s, grp in enumerate(groups):
        for v in grp:
            parent[v] = s
    n_coarse = len(groups)
    w = np.zeros((n_coarse, n_coarse))
    for i, j, wt in g.edges():
        a, b = parent[i], parent[j]
        if a != b:
            w[a, b] += wt
            w[b, a] += wt
    return Graph(w), parent


@dataclass
class PartitionMap:
    """Hierarchy of graphs with the node-to-supernode map at each level."""

    graphs: list  # graphs[0] finest, graphs[-1] coarsest
    parents: list  # parents[k][i] = supernode of node i when moving to level k+1

    @property
    def levels(self) -> int:
        return len(self.parents)

    def members(self, level: int) -> list:
        """Members (finer-level node ids) of each supernode at level+1."""
        return invert_map(self.parents[level], self.graphs[level + 1].n)

    def compose(self) -> np.ndarray:
        """Map from finest nodes straight to coarsest supernodes."""
        acc = np.arange(self.graphs[0].n, dtype=np.int64)
        for parent in self.parents:
            acc = parent[acc]
        return acc

    def to_text(self) -> str:
        lines = []
        for k, parent in enumerate(self.parents):
            for v, s in enumerate(parent):
                lines.append(f"level {k}: node {v} -> super {int(s)}")
        return "\n".join(lines)


def multilevel_partition(g: Graph, p: int) -> PartitionMap:
    """Coarsen ``p`` times, contracting one maximal matching per level."""
    if p < 1:
        raise UsageError("partition level must be >= 1")
    graphs = [g]
    parents = []
    cur = g
    for _ in range(p):
        m = path_grow_select(cur)
        cur, parent = coarsen(cur, m)
        graphs.append(cur)
        parents.append(parent)
    return PartitionMap(graphs=graphs, parents=parents)


def invert_map(parent: np.ndarray, n_super: int) -> list:
    """Supernode -> sorted member list for one level transition."""
    out = [[] for _ in range(n_super)]
    for v, s in enumerate(parent):
        if not 0 <= s < n_super:
            raise PartitionError(f"parent id {s} out of range")
        out[int(s)].append(int(v))
    for s, members in enumerate(out):
        if not members:
            raise PartitionError(f"supernode {s} has no members")
    return out


def brute_force_matching(g: Graph) -> Matching:
    """Exact maximum-weight matching by exhaustive search; n <= 12 only.

    Test oracle for matching quality.
    """
    if g.n > 12:
        raise UsageError("brute_force_matching is restricted to n <= 12")
    w = g.weights
    n = g.n
    full = (1 << n) - 1

    @lru_cache(maxsize=None)
    def solve(mask: int):
        if mask == full:
            return 0.0, ()
        v = 0
        while mask & (1 << v):
            v += 1
        best_w, best_pairs = solve(mask | (1 << v))
        for u in range(v + 1, n):
            if mask & (1 << u) or w[v, u] <= 0:
                continue
            sub_w, sub_pairs = solve(mask | (1 << v) | (1 << u))
            cand = w[v, u] + sub_w
            if cand > best_w:
                best_w, best_pairs = cand, ((v, u),) + sub_pairs
        return best_w, best_pairs

    _, pairs = solve(0)
    solve.cache_clear()
    return Matching([tuple(p) for p in pairs])
