"""Minimum-weight perfect matching and the cross-match sample distance.

The cross-match distance between two equally sized point samples pools
them, computes a minimum-total-distance perfect matching of the pooled
points (coordinates standardized by the pooled per-dimension standard
deviation), counts the pairs that join the two samples, and returns

    d_cm = 1 - 2 * n_cm / n.

Samples from one distribution give d_cm near zero; fully separated
samples give d_cm = 1 (no cross pairs).

The exact matcher solves the matching LP by column generation with
lazily separated odd-set (blossom) inequalities. Odd-set cuts are always
valid for the perfect-matching polytope, so the separation heuristics
never compromise optimality: whenever the LP optimum comes out integral
it is a provably optimal matching. If the cutting plane stalls (not
observed in practice) the slow but exact blossom matcher from networkx
takes over. Weights receive a deterministic relative perturbation of
1e-9 to break ties, which only affects pair selection among equal-weight
optima. Beyond ``EXACT_LIMIT`` pooled points a greedy nearest-pair
matching is used instead and flagged in the result.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog
from scipy.sparse.csgraph import maximum_flow
from scipy.spatial.distance import pdist, squareform

#: largest pooled size matched exactly; above this, greedy matching
EXACT_LIMIT = 600


@dataclass
class MatchResult:
    pairs: list
    exact: bool
    lp_rounds: int = 0


def min_weight_perfect_matching(D, seed: int = 0, max_rounds: int = 400) -> MatchResult:
    """Exact minimum-weight perfect matching of a complete even graph.

    ``D`` is a symmetric distance matrix. Returns vertex-index pairs.
    """
    D = np.asarray(D, dtype=float)
    n = D.shape[0]
    if n % 2 != 0:
        raise ValueError(f"perfect matching needs an even vertex count, got {n}")
    if n == 0:
        return MatchResult([], True)
    if n == 2:
        return MatchResult([(0, 1)], True)
    try:
        return _matching_lp(D, seed, max_rounds)
    except RuntimeError:
        return _matching_networkx(D)


def greedy_matching(D) -> MatchResult:
    """Repeatedly pair the globally closest unmatched vertices."""
    D = np.asarray(D, dtype=float).copy()
    n = D.shape[0]
    if n % 2 != 0:
        raise ValueError(f"perfect matching needs an even vertex count, got {n}")
    np.fill_diagonal(D, np.inf)
    pairs = []
    for _ in range(n // 2):
        i, j = divmod(int(np.argmin(D)), n)
        pairs.append((min(i, j), max(i, j)))
        D[i, :] = D[:, i] = np.inf
        D[j, :] = D[:, j] = np.inf
    return MatchResult(pairs, False)


def cross_match_distance(sample_a, sample_b, seed: int = 0):
    """Cross-match distance in [-1, 1] between two equal-size samples."""
    a = np.atleast_2d(np.asarray(sample_a, dtype=float))
    b = np.atleast_2d(np.asarray(sample_b, dtype=float))
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("samples must be 2-D with equal dimension")
    n = len(a)
    if len(b) != n:
        raise ValueError(
            f"samples must have equal size ({len(a)} vs {len(b)}); "
            "subsample the larger one first"
        )
    if n < 1:
        raise ValueError("samples must be non-empty")
    pooled = np.vstack([a, b])
    sd = pooled.std(axis=0, ddof=1)
    sd[sd == 0] = 1.0  # constant dimensions carry no distance information
    D = squareform(pdist(pooled / sd))
    if len(pooled) <= EXACT_LIMIT:
        result = min_weight_perfect_matching(D, seed=seed)
    else:
        result = greedy_matching(D)
    n_cm = sum(1 for i, j in result.pairs if (i < n) != (j < n))
    return 1.0 - 2.0 * n_cm / n


# ---------------------------------------------------------------------------
# LP cutting-plane matcher
# ---------------------------------------------------------------------------


def _matching_lp(D, seed, max_rounds):
    n = D.shape[0]
    rng = np.random.default_rng(seed)
    scale = float(D.max()) + 1.0
    pert = rng.uniform(0.0, 1e-9 * scale, size=(n, n))
    D = D + np.triu(pert, 1) + np.triu(pert, 1).T
    iu_full, ju_full = np.triu_indices(n, k=1)

    E = _seed_edges(D, iu_full, ju_full)
    cuts = []
    rounds = 0
    for _ in range(max_rounds):
        rounds += 1
        iu, ju = iu_full[E], ju_full[E]
        w = D[iu, ju]
        m = len(E)
        A_eq = sp.csc_matrix(
            (np.ones(2 * m), (np.concatenate([iu, ju]), np.tile(np.arange(m), 2))),
            shape=(n, m),
        )
        if cuts:
            rows, cols = [], []
            for ci, S in enumerate(cuts):
                idx = np.flatnonzero(S[iu] ^ S[ju])
                rows.extend([ci] * len(idx))
                cols.extend(idx.tolist())
            A_ub = sp.csc_matrix(
                (-np.ones(len(rows)), (rows, cols)), shape=(len(cuts), m)
            )
            b_ub = -np.ones(len(cuts))
        else:
            A_ub, b_ub = None, None
        res = linprog(w, A_eq=A_eq, b_eq=np.ones(n), A_ub=A_ub, b_ub=b_ub,
                      bounds=(0, None), method="highs-ds")
        if not res.success:
            raise RuntimeError(f"matching LP failed: {res.message}")
        x = res.x
        # price all edges against the duals; add violated columns
        y = res.eqlin.marginals
        red = D - y[:, None] - y[None, :]
        if cuts:
            mu = res.ineqlin.marginals
            for ci, S in enumerate(cuts):
                red += mu[ci] * (S[:, None] ^ S[None, :])
        viol = np.flatnonzero(red[iu_full, ju_full] < -1e-9 * scale)
        new_cols = np.setdiff1d(viol, E)
        if len(new_cols):
            E = np.union1d(E, new_cols)
            continue
        tol = 1e-7
        frac = np.flatnonzero((x > tol) & (x < 1 - tol))
        if len(frac) == 0:
            sel = x > 0.5
            return MatchResult(list(zip(iu[sel].tolist(), ju[sel].tolist())),
                               True, rounds)
        new_cuts = _separate_odd_sets(n, x, iu, ju, frac)
        fresh = _dedupe_cuts(new_cuts, cuts)
        if not fresh:
            raise RuntimeError("odd-set separation stalled")
        cuts.extend(fresh)
    raise RuntimeError("matching LP round limit reached")


def _seed_edges(D, iu_full, ju_full):
    """k-nearest-neighbour edges plus a greedy matching for feasibility."""
    n = D.shape[0]
    k = min(n - 1, 8)
    Dd = D.copy()
    np.fill_diagonal(Dd, np.inf)
    order = np.argsort(Dd, axis=1)[:, :k]
    mask = np.zeros((n, n), bool)
    mask[np.repeat(np.arange(n), k), order.ravel()] = True
    mask |= mask.T
    D2 = Dd.copy()
    for _ in range(n // 2):
        i, j = divmod(int(np.argmin(D2)), n)
        mask[i, j] = mask[j, i] = True
        D2[i, :] = D2[:, i] = np.inf
        D2[j, :] = D2[:, j] = np.inf
    return np.flatnonzero(mask[iu_full, ju_full])


def _separate_odd_sets(n, x, iu, ju, frac):
    """Violated blossom inequalities x(delta(S)) >= 1 for odd |S|."""
    edges = [(int(iu[e]), int(ju[e])) for e in frac]
    comps, adj = _components(edges)

    def violated(S):
        return x[S[iu] ^ S[ju]].sum() < 1 - 1e-7

    candidates = []
    for comp in comps:
        if len(comp) % 2 == 1:
            S = np.zeros(n, bool)
            S[comp] = True
            candidates.append(S)
    for comp in comps:
        for cyc in _odd_fundamental_cycles(comp, adj):
            S = np.zeros(n, bool)
            S[cyc] = True
            candidates.append(S)
    cuts = [S for S in candidates if violated(S)]
    if cuts:
        return cuts
    return [S for S in _gomory_hu_odd_cuts(n, x, iu, ju) if violated(S)]


def _dedupe_cuts(new_cuts, cuts):
    sigs = {S.tobytes() for S in cuts}
    fresh = []
    for S in new_cuts:
        b = S.tobytes()
        if b not in sigs:
            fresh.append(S)
            sigs.add(b)
    return fresh


def _components(edges):
    adj = {}
    for u, v in edges:
        adj.setdefault(u, []).append(v)
        adj.setdefault(v, []).append(u)
    seen, comps = set(), []
    for v0 in adj:
        if v0 in seen:
            continue
        comp, stack = [], [v0]
        while stack:
            v = stack.pop()
            if v in seen:
                continue
            seen.add(v)
            comp.append(v)
            stack.extend(adj[v])
        comps.append(comp)
    return comps, adj


def _odd_fundamental_cycles(comp, adj):
    """Odd cycles from a spanning-tree cycle basis of one component."""
    root = comp[0]
    parent = {root: None}
    depth = {root: 0}
    stack = [root]
    while stack:
        v = stack.pop()
        for u in adj[v]:
            if u not in parent:
                parent[u] = v
                depth[u] = depth[v] + 1
                stack.append(u)
    tree = {
        (min(v, p), max(v, p)) for v, p in parent.items() if p is not None
    }
    odd = []
    seen_pairs = set()
    for v in comp:
        for u in adj[v]:
            key = (min(u, v), max(u, v))
            if key in tree or key in seen_pairs:
                continue
            seen_pairs.add(key)
            a, b = v, u
            pa, pb = [v], [u]
            while depth[a] > depth[b]:
                a = parent[a]
                pa.append(a)
            while depth[b] > depth[a]:
                b = parent[b]
                pb.append(b)
            while a != b:
                a = parent[a]
                pa.append(a)
                b = parent[b]
                pb.append(b)
            cyc = pa + pb[:-1][::-1]
            if len(cyc) % 2 == 1:
                odd.append(cyc)
    return odd


def _gomory_hu_odd_cuts(n, x, iu, ju, tol=1e-7):
    """Odd cuts below value 1 from a Gusfield Gomory-Hu tree.

    Capacities are the fractional edge values scaled to integers for the
    compiled max-flow; used only as a separation heuristic of last
    resort, so rounding can only delay termination, never corrupt the
    final matching.
    """
    sup = np.flatnonzero(x > tol)
    if len(sup) == 0:
        return []
    nodes = np.unique(np.concatenate([iu[sup], ju[sup]]))
    remap = -np.ones(n, dtype=int)
    remap[nodes] = np.arange(len(nodes))
    nn = len(nodes)
    SCALE = 10**9
    cap = sp.lil_matrix((nn, nn), dtype=np.int64)
    for e in sup:
        a, b = remap[iu[e]], remap[ju[e]]
        c = int(round(x[e] * SCALE))
        cap[a, b] += c
        cap[b, a] += c
    cap = sp.csr_matrix(cap)
    parent = np.zeros(nn, dtype=int)
    cuts = []
    for i in range(1, nn):
        res = maximum_flow(cap, i, int(parent[i]))
        residual = (cap - res.flow).tocsr()
        reach = np.zeros(nn, bool)
        stack = [i]
        reach[i] = True
        while stack:
            v = stack.pop()
            row = residual[v]
            for u, c in zip(row.indices, row.data):
                if c > 0 and not reach[u]:
                    reach[u] = True
                    stack.append(u)
        for j in range(i + 1, nn):
            if parent[j] == parent[i] and reach[j]:
                parent[j] = i
        if int(reach.sum()) % 2 == 1 and res.flow_value / SCALE < 1 - 1e-7:
            S = np.zeros(n, bool)
            S[nodes[reach]] = True
            cuts.append(S)
    return cuts


def _matching_networkx(D):
    """Exact fallback via networkx blossom (slow, rarely needed)."""
    import networkx as nx

    n = D.shape[0]
    G = nx.Graph()
    for i in range(n):
        for j in range(i + 1, n):
            G.add_edge(i, j, weight=float(D[i, j]))
    pairs = [(min(i, j), max(i, j)) for i, j in nx.min_weight_matching(G)]
    return MatchResult(sorted(pairs), True)
