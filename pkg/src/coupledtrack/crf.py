"""Binary pairwise energy minimization.

Both the observation fusion and the hypothesis selection reduce to picking a
subset of nodes that minimizes::

    E(s) = sum_i s_i * u_i + sum_{i<j} s_i * s_j * p_ij

subject to hard exclusion pairs that may never be selected together.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EXHAUSTIVE_LIMIT = 25
_EPS = 1e-12


@dataclass
class EnergyGraph:
    unaries: np.ndarray
    pairwise: dict = field(default_factory=dict)
    exclusions: set = field(default_factory=set)

    def __post_init__(self):
        self.unaries = np.asarray(self.unaries, dtype=float).reshape(-1)
        n = len(self.unaries)
        pw = {}
        for (i, j), v in self.pairwise.items():
            i, j = int(i), int(j)
            if i == j or not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"invalid pairwise key ({i}, {j}) for {n} nodes")
            key = (min(i, j), max(i, j))
            pw[key] = pw.get(key, 0.0) + float(v)
        ex = set()
        for i, j in self.exclusions:
            i, j = int(i), int(j)
            if i == j or not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"invalid exclusion ({i}, {j}) for {n} nodes")
            ex.add((min(i, j), max(i, j)))
        self.pairwise = pw
        self.exclusions = ex

    @property
    def n(self) -> int:
        return len(self.unaries)

    def dense(self, nodes=None):
        """Symmetric pairwise matrix and exclusion mask restricted to ``nodes``."""
        if nodes is None:
            nodes = np.arange(self.n)
        pos = {int(v): k for k, v in enumerate(nodes)}
        m = len(nodes)
        W = np.zeros((m, m))
        X = np.zeros((m, m), dtype=bool)
        for (i, j), v in self.pairwise.items():
            if i in pos and j in pos:
                W[pos[i], pos[j]] = W[pos[j], pos[i]] = v
        for i, j in self.exclusions:
            if i in pos and j in pos:
                X[pos[i], pos[j]] = X[pos[j], pos[i]] = True
        return W, X

    def components(self) -> list[np.ndarray]:
        """Connected components over pairwise and exclusion edges."""
        parent = list(range(self.n))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for i, j in list(self.pairwise) + list(self.exclusions):
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[max(ri, rj)] = min(ri, rj)
        groups: dict[int, list[int]] = {}
        for i in range(self.n):
            groups.setdefault(find(i), []).append(i)
        return [np.array(g) for g in groups.values()]


@dataclass
class Selection:
    selected: np.ndarray
    energy: float

    @property
    def indices(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.selected)]


def energy_of(graph: EnergyGraph, selected) -> float:
    s = np.asarray(selected, dtype=bool).reshape(-1)
    if len(s) != graph.n:
        raise ValueError(f"selection has length {len(s)}, graph has {graph.n} nodes")
    for i, j in graph.exclusions:
        if s[i] and s[j]:
            return float("inf")
    e = float(graph.unaries[s].sum())
    for (i, j), v in graph.pairwise.items():
        if s[i] and s[j]:
            e += v
    return e


def _better(e_a, bits_a, e_b, bits_b) -> bool:
    """Order: lower energy, then fewer selected nodes, then lexicographically smaller."""
    if e_a < e_b - _EPS:
        return True
    if e_a > e_b + _EPS:
        return False
    ca, cb = int(bits_a.sum()), int(bits_b.sum())
    if ca != cb:
        return ca < cb
    diff = np.flatnonzero(bits_a != bits_b)
    return bool(len(diff)) and not bits_a[diff[0]]


def solve_exhaustive(graph: EnergyGraph) -> Selection:
    """Enumerate all 2^n labelings. Test oracle; refuses more than 25 nodes."""
    n = graph.n
    if n > EXHAUSTIVE_LIMIT:
        raise ValueError(f"exhaustive search refused for {n} > {EXHAUSTIVE_LIMIT} nodes")
    if n == 0:
        return Selection(np.zeros(0, dtype=bool), 0.0)
    W, X = graph.dense()
    W_up = np.triu(W, 1)
    X_up = np.triu(X, 1).astype(float)
    u = graph.unaries
    # bit i of the state index is node n-1-i, so increasing index == lexicographic order
    shifts = np.arange(n - 1, -1, -1)
    best_e, best_bits = np.inf, None
    chunk = 1 << min(n, 18)
    for start in range(0, 1 << n, chunk):
        k = np.arange(start, start + chunk, dtype=np.int64)
        B = ((k[:, None] >> shifts[None, :]) & 1).astype(float)
        e = B @ u + np.einsum("ki,ki->k", B @ W_up, B)
        infeasible = np.einsum("ki,ki->k", B @ X_up, B) > 0
        e[infeasible] = np.inf
        emin = e.min()
        if emin > best_e + _EPS:
            continue
        for idx in np.flatnonzero(e <= emin + _EPS):
            bits = B[idx].astype(bool)
            if best_bits is None or _better(e[idx], bits, best_e, best_bits):
                best_e, best_bits = e[idx], bits
    return Selection(best_bits, energy_of(graph, best_bits))


def _beam(u, W, X, width):
    """Beam search over improving single-node additions from the empty set.

    Returns the best state and whether the beam was ever truncated (if not,
    any wider beam would explore exactly the same states).
    """
    m = len(u)
    Xi = X.astype(int)
    E = np.zeros(1)
    B = np.zeros((1, m), dtype=bool)
    D = u[None, :].copy()
    K = np.zeros((1, m), dtype=int)
    best_e, best_bits = 0.0, B[0]
    truncated = False
    while len(E):
        ok = ~B & (K == 0) & (D < -_EPS)
        rank, idx = np.nonzero(ok)
        if len(rank) == 0:
            break
        e_child = E[rank] + D[rank, idx]
        # order: energy, then parent rank, then node index
        order = np.lexsort((idx, rank, e_child))
        seen = set()
        keep = []
        last = len(order) - 1
        for pos, c in enumerate(order):
            child = B[rank[c]].copy()
            child[idx[c]] = True
            key = child.tobytes()
            if key in seen:
                continue
            seen.add(key)
            keep.append((c, child))
            if e_child[c] <= best_e + _EPS and _better(e_child[c], child, best_e, best_bits):
                best_e, best_bits = e_child[c], child
            if len(keep) == width:
                truncated = truncated or pos < last
                break
        cs = np.array([c for c, _ in keep])
        E = e_child[cs]
        B = np.array([child for _, child in keep])
        D = D[rank[cs]] + W[idx[cs]]
        K = K[rank[cs]] + Xi[idx[cs]]
    return best_bits, truncated


def _improve(u, W, X, bits):
    """Repeated best single-flip (add or remove) descent."""
    bits = bits.copy()
    for _ in range(4 * len(u) + 4):
        delta = u + W @ bits
        blocked = X.astype(int) @ bits
        gain = np.where(bits, -delta, delta)
        allowed = bits | (blocked == 0)
        gain = np.where(allowed, gain, np.inf)
        i = int(np.argmin(gain))
        if not gain[i] < -_EPS:
            break
        bits[i] = not bits[i]
    return bits


def _local_energy(u, W, bits):
    b = bits.astype(float)
    return float(b @ u + 0.5 * b @ W @ b)


def solve_multibranch(graph: EnergyGraph, branches: int = 8) -> Selection:
    """Approximate minimizer: beam search over single-node additions.

    Each connected component is solved on its own. Within a component a beam
    of ``branches`` partial selections is grown by strictly improving
    additions, the best state found is polished by single-flip descent, and
    the result is the best over all beam widths ``1..branches`` (so a wider
    beam never does worse).
    """
    if branches < 1:
        raise ValueError("branches must be >= 1")
    n = graph.n
    out = np.zeros(n, dtype=bool)
    for nodes in graph.components():
        u = graph.unaries[nodes]
        if len(nodes) == 1:
            out[nodes[0]] = u[0] < -_EPS
            continue
        W, X = graph.dense(nodes)
        best_bits = np.zeros(len(nodes), dtype=bool)
        best_e = 0.0
        tried = set()
        for width in range(1, branches + 1):
            found, truncated = _beam(u, W, X, width)
            bits = _improve(u, W, X, found)
            key = bits.tobytes()
            if key not in tried:
                tried.add(key)
                e = _local_energy(u, W, bits)
                if _better(e, bits, best_e, best_bits):
                    best_e, best_bits = e, bits
            if not truncated:
                break
        out[nodes] = best_bits
    return Selection(out, energy_of(graph, out))
