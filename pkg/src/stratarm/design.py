"""Stratified randomization: matched k-tuples, complete, coarse and
varying-propensity designs, plus centroid pairing of groups."""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from .core import Propensity
from .exceptions import DesignError, EmptyInput, SingleGroup, StratumTooSmall

GENERATOR = "numpy.random.PCG64"
EXACT_PAIRING_MAX_GROUPS = 20


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------------------
# Matching units into homogeneous groups


def _sort_blocks(x, k):
    order = np.argsort(x, kind="stable")
    n_full = (len(order) // k) * k
    groups = [order[i:i + k] for i in range(0, n_full, k)]
    return groups, order[n_full:]


def _sorted_neighbours(dist, idx):
    # order each row by (distance, index) so ties go to the lowest index
    order = np.lexsort((idx, dist), axis=-1)
    return np.take_along_axis(idx, order, axis=-1), np.take_along_axis(dist, order, axis=-1)


def greedy_groups(points, k, stop=None):
    """Greedy nearest-neighbour agglomeration.

    Repeatedly takes the unmatched point whose nearest unmatched neighbour is
    farthest away and binds it to its ``k - 1`` nearest unmatched
    neighbours.  Ties go to the lowest index.  Stops when fewer than ``k``
    points remain, or once at most ``stop`` points remain.

    Returns ``(groups, leftover)`` as index arrays.
    """
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    n = X.shape[0]
    floor = k - 1 if stop is None else max(k - 1, stop)
    if n <= floor:
        return [], np.arange(n)

    K = min(n, max(4 * k, 16))
    tree = cKDTree(X)
    dist, idx = tree.query(X, k=K)
    dist = np.asarray(dist).reshape(n, K)
    idx = np.asarray(idx).reshape(n, K)
    idx, dist = _sorted_neighbours(dist, idx)
    cand = [None] * n  # per-unit overrides after a brute-force refresh
    ptr = np.zeros(n, dtype=np.int64)
    matched = np.zeros(n, dtype=bool)
    version = np.zeros(n, dtype=np.int64)
    nn = np.full(n, -1, dtype=np.int64)
    watchers = [[] for _ in range(n)]
    remaining = n

    def row(i):
        c = cand[i]
        return (idx[i], dist[i]) if c is None else c

    def refresh(i):
        live = np.flatnonzero(~matched)
        live = live[live != i]
        dd = np.sqrt(((X[live] - X[i]) ** 2).sum(axis=1))
        o = np.lexsort((live, dd))
        cand[i] = (live[o], dd[o])
        ptr[i] = 0

    def advance(i):
        # move ptr[i] to the nearest unmatched neighbour; returns its distance
        while True:
            ids, ds = row(i)
            p = ptr[i]
            while p < len(ids) and (ids[p] == i or matched[ids[p]]):
                p += 1
            if p < len(ids):
                ptr[i] = p
                return ids[p], ds[p]
            refresh(i)

    heap = []
    for i in range(n):
        j, dj = advance(i)
        nn[i] = j
        watchers[j].append(i)
        heap.append((-dj, i, 0))
    heapq.heapify(heap)

    groups = []
    while remaining >= k and remaining > floor:
        negd, i, ver = heapq.heappop(heap)
        if matched[i] or ver != version[i]:
            continue
        members = [i]
        ids, _ = row(i)
        p = ptr[i]
        while len(members) < k:
            if p >= len(ids):
                refresh(i)
                ids, _ = row(i)
                p = 0
                continue
            j = ids[p]
            if j != i and not matched[j] and j not in members:
                members.append(j)
            p += 1
        for j in members:
            matched[j] = True
        remaining -= k
        groups.append(np.array(sorted(members), dtype=np.int64))
        if remaining <= floor:
            break
        for j in members:
            for w in watchers[j]:
                if matched[w] or nn[w] != j:
                    continue
                nj, dnj = advance(w)
                nn[w] = nj
                watchers[nj].append(w)
                version[w] += 1
                heapq.heappush(heap, (-dnj, w, int(version[w])))
            watchers[j] = []
    leftover = np.flatnonzero(~matched)
    return groups, leftover


def match_units(psi, k):
    """Partition units into groups of ``k`` with similar ``psi``.

    One stratification variable: sort and cut into consecutive blocks.
    Several: :func:`greedy_groups`.
    """
    psi = np.asarray(psi, dtype=float)
    if psi.ndim == 1:
        psi = psi.reshape(-1, 1)
    if psi.shape[0] == 0:
        raise EmptyInput("no units to match")
    if psi.shape[1] == 1:
        return _sort_blocks(psi[:, 0], k)
    return greedy_groups(psi, k)


def homogeneity_score(psi, groups, n=None) -> float:
    """``(1/n) sum_g sum_{i,j in g} |psi_i - psi_j|^2`` over ordered pairs."""
    psi = np.asarray(psi, dtype=float)
    if psi.ndim == 1:
        psi = psi.reshape(-1, 1)
    n = psi.shape[0] if n is None else n
    total = 0.0
    for g in groups:
        pg = psi[g]
        total += 2.0 * len(g) * ((pg - pg.mean(axis=0)) ** 2).sum()
    return total / n


# ---------------------------------------------------------------------------
# Design


@dataclass
class Design:
    """A realised stratified randomization.

    ``groups`` partition the estimation sample; ``props`` holds the
    propensity of each group.  Units in ``leftover`` (the undersized
    remainder when group sizes do not divide the sample) are assigned
    treatment but excluded from estimation.
    """

    groups: List[np.ndarray]
    props: List[Propensity]
    treatment: np.ndarray
    homogeneity_score: float = 0.0
    seed: Optional[int] = None
    leftover: List[np.ndarray] = field(default_factory=list)
    kind: str = "matched"

    def __post_init__(self):
        self.groups = [np.asarray(g, dtype=np.int64) for g in self.groups]
        self.leftover = [np.asarray(g, dtype=np.int64) for g in self.leftover if len(g)]
        self.treatment = np.asarray(self.treatment).astype(np.int8)
        if len(self.props) != len(self.groups):
            raise DesignError("one propensity per group is required")

    @property
    def n(self) -> int:
        return len(self.treatment)

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @cached_property
    def labels(self) -> np.ndarray:
        """Group index of each unit, ``-1`` for excluded units."""
        lab = np.full(self.n, -1, dtype=np.int64)
        if self.groups:
            sizes = [len(g) for g in self.groups]
            lab[np.concatenate(self.groups)] = np.repeat(np.arange(len(self.groups)), sizes)
        lab.flags.writeable = False
        return lab

    @property
    def covered(self) -> np.ndarray:
        if not self.groups:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate(self.groups))

    @property
    def excluded(self) -> np.ndarray:
        if not self.leftover:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate(self.leftover))

    @property
    def is_constant(self) -> bool:
        return len(set(self.props)) <= 1

    @property
    def propensity(self) -> Propensity:
        if not self.props:
            raise DesignError("design has no groups")
        if not self.is_constant:
            raise DesignError("design has varying propensities")
        return self.props[0]

    @property
    def unit_propensity(self) -> np.ndarray:
        """Per-unit ``p`` (NaN for excluded units)."""
        out = np.full(self.n, np.nan)
        for g, pr in zip(self.groups, self.props):
            out[g] = pr.p
        return out

    def validate(self):
        seen = np.zeros(self.n, dtype=np.int64)
        for g, pr in zip(self.groups, self.props):
            if len(g) != pr.k:
                raise DesignError(f"group of size {len(g)} under propensity {pr}")
            if int(self.treatment[g].sum()) != pr.a:
                raise DesignError(f"group does not have exactly {pr.a} treated units")
            seen[g] += 1
        for g in self.leftover:
            seen[g] += 1
        if np.any(seen != 1):
            raise DesignError("groups must be disjoint and cover every unit")
        return self

    def relabel(self, treatment) -> "Design":
        """Same groups with a different realised treatment vector."""
        return Design(
            groups=self.groups,
            props=self.props,
            treatment=np.asarray(treatment),
            homogeneity_score=self.homogeneity_score,
            seed=self.seed,
            leftover=self.leftover,
            kind=self.kind,
        )

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind,
            "groups": [[int(i) for i in g] for g in self.groups],
            "treatment": [int(t) for t in self.treatment],
            "homogeneity_score": float(self.homogeneity_score),
            "seed": self.seed,
            "generator": GENERATOR,
            "leftover": [[int(i) for i in g] for g in self.leftover],
        }
        if self.is_constant and self.props:
            out["a"], out["k"] = int(self.props[0].a), int(self.props[0].k)
        else:
            out["props"] = [[int(p.a), int(p.k)] for p in self.props]
        return out

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, obj) -> "Design":
        groups = obj["groups"]
        if "props" in obj:
            props = [Propensity(int(a), int(k)) for a, k in obj["props"]]
        else:
            pr = Propensity(int(obj["a"]), int(obj["k"]))
            props = [pr] * len(groups)
        return cls(
            groups=groups,
            props=props,
            treatment=obj["treatment"],
            homogeneity_score=obj.get("homogeneity_score", 0.0),
            seed=obj.get("seed"),
            leftover=obj.get("leftover", []),
            kind=obj.get("kind", "matched"),
        )

    @classmethod
    def from_json(cls, text) -> "Design":
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_labels(cls, labels, treatment, kind="observed") -> "Design":
        """Rebuild a design from observed group labels and treatments.

        Every group must share one ``a/k``; groups are ordered by first
        appearance.
        """
        labels = list(labels)
        treatment = np.asarray(treatment).astype(np.int8)
        order = {}
        for i, lab in enumerate(labels):
            order.setdefault(lab, []).append(i)
        groups = [np.array(v) for v in order.values()]
        props = []
        for g in groups:
            a, k = int(treatment[g].sum()), len(g)
            if a == 0 or a == k:
                raise DesignError(f"group {labels[g[0]]!r} has no treated or no control unit")
            props.append(Propensity.from_counts(a, k))
            if props[-1].k != k:
                raise DesignError(f"group {labels[g[0]]!r}: {a} of {k} treated is not in lowest terms")
        return cls(groups=groups, props=props, treatment=treatment, kind=kind).validate()


def _draw_treatment(groups, props, leftover, leftover_props, n, rng):
    d = np.zeros(n, dtype=np.int8)
    by_shape = {}
    for g, pr in zip(groups, props):
        by_shape.setdefault((pr.a, pr.k), []).append(g)
    for (a, k), gs in sorted(by_shape.items()):
        idx = np.vstack(gs)
        keys = rng.random(idx.shape)
        pick = np.argsort(keys, axis=1)[:, :a]
        d[np.take_along_axis(idx, pick, axis=1).ravel()] = 1
    for g, pr in zip(leftover, leftover_props):
        m = int(np.floor(pr.p * len(g)))
        if m:
            d[rng.choice(g, size=m, replace=False)] = 1
    return d


def _coerce_prop(prop) -> Propensity:
    if isinstance(prop, Propensity):
        return prop
    return Propensity.parse(prop)


def assign_matched_tuples(psi, prop, rng_seed=0) -> Design:
    """Matched k-tuples: group units on ``psi`` and treat ``a`` of each ``k`` at random."""
    prop = _coerce_prop(prop)
    psi = np.asarray(psi, dtype=float)
    if psi.ndim == 1:
        psi = psi.reshape(-1, 1)
    if psi.shape[0] == 0:
        raise EmptyInput("no units")
    groups, rest = match_units(psi, prop.k)
    leftover = [rest] if len(rest) else []
    rng = make_rng(rng_seed)
    d = _draw_treatment(groups, [prop] * len(groups), leftover, [prop] * len(leftover), psi.shape[0], rng)
    return Design(
        groups=groups,
        props=[prop] * len(groups),
        treatment=d,
        homogeneity_score=homogeneity_score(psi, groups),
        seed=_seed_value(rng_seed),
        leftover=leftover,
        kind="matched",
    )


def _seed_value(seed):
    return int(seed) if isinstance(seed, (int, np.integer)) else None


def assign_complete(n, prop, rng_seed=0) -> Design:
    """Complete randomization written as randomly formed groups of ``k``."""
    prop = _coerce_prop(prop)
    n = int(n)
    if n <= 0:
        raise EmptyInput("no units")
    rng = make_rng(rng_seed)
    perm = rng.permutation(n)
    full = (n // prop.k) * prop.k
    groups = [np.sort(perm[i:i + prop.k]) for i in range(0, full, prop.k)]
    leftover = [np.sort(perm[full:])] if full < n else []
    d = _draw_treatment(groups, [prop] * len(groups), leftover, [prop] * len(leftover), n, rng)
    return Design(groups, [prop] * len(groups), d, 0.0, _seed_value(rng_seed), leftover, kind="complete")


def assign_coarse(strata_labels, prop, rng_seed=0, psi=None) -> Design:
    """Coarse stratification: random groups of ``k`` inside each stratum."""
    prop = _coerce_prop(prop)
    labels = np.asarray(strata_labels)
    n = labels.shape[0]
    if n == 0:
        raise EmptyInput("no units")
    rng = make_rng(rng_seed)
    groups, leftover = [], []
    for lab in _sorted_unique(labels):
        idx = np.flatnonzero(labels == lab)
        if len(idx) < prop.k:
            raise StratumTooSmall(lab.item() if hasattr(lab, "item") else lab)
        perm = idx[rng.permutation(len(idx))]
        full = (len(idx) // prop.k) * prop.k
        groups.extend(np.sort(perm[i:i + prop.k]) for i in range(0, full, prop.k))
        if full < len(idx):
            leftover.append(np.sort(perm[full:]))
    d = _draw_treatment(groups, [prop] * len(groups), leftover, [prop] * len(leftover), n, rng)
    score = homogeneity_score(psi, groups) if psi is not None else 0.0
    return Design(groups, [prop] * len(groups), d, score, _seed_value(rng_seed), leftover, kind="coarse")


def _sorted_unique(labels):
    uniq = list(dict.fromkeys(labels.tolist()))
    try:
        return sorted(uniq)
    except TypeError:
        return uniq


def assign_varying_propensity(
    psi, prop_fn: Union[Sequence, Callable[[int], Propensity]], rng_seed=0
) -> Design:
    """Double stratification: split units by propensity, then match within each split."""
    psi = np.asarray(psi, dtype=float)
    if psi.ndim == 1:
        psi = psi.reshape(-1, 1)
    n = psi.shape[0]
    if n == 0:
        raise EmptyInput("no units")
    unit_props = [_coerce_prop(prop_fn(i) if callable(prop_fn) else prop_fn[i]) for i in range(n)]
    strata = {}
    for i, pr in enumerate(unit_props):
        strata.setdefault(pr, []).append(i)
    groups, props, leftover, leftover_props = [], [], [], []
    for pr in sorted(strata, key=lambda q: (q.p, q.k)):
        idx = np.asarray(strata[pr])
        if len(idx) < pr.k:
            raise StratumTooSmall(str(pr))
        gs, rest = match_units(psi[idx], pr.k)
        groups.extend(idx[g] for g in gs)
        props.extend([pr] * len(gs))
        if len(rest):
            leftover.append(idx[rest])
            leftover_props.append(pr)
    rng = make_rng(rng_seed)
    d = _draw_treatment(groups, props, leftover, leftover_props, n, rng)
    kind = "matched" if len(strata) == 1 else "varying"
    return Design(groups, props, d, homogeneity_score(psi, groups), _seed_value(rng_seed), leftover, kind=kind)


# ---------------------------------------------------------------------------
# Pairing groups by centroid


@dataclass
class GroupPairing:
    """Pairs of groups (plus at most one triple) with similar centroids.

    ``partner[g]`` is the group paired with ``g`` (``-1`` for members of the
    triple).
    """

    partner: np.ndarray
    unions: List[tuple]
    centroid_score: float
    triple: Optional[tuple] = None

    def union_labels(self, design: Design) -> np.ndarray:
        """Union index of every unit (``-1`` for excluded units)."""
        glab = np.empty(design.n_groups, dtype=np.int64)
        for ui, u in enumerate(self.unions):
            glab[list(u)] = ui
        lab = design.labels
        out = np.full(design.n, -1, dtype=np.int64)
        mask = lab >= 0
        out[mask] = glab[lab[mask]]
        return out


def group_centroids(design: Design, psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=float)
    if psi.ndim == 1:
        psi = psi.reshape(-1, 1)
    return np.vstack([psi[g].mean(axis=0) for g in design.groups])


def _pair_cost(c, pairs):
    return sum(float(((c[i] - c[j]) ** 2).sum()) for i, j in pairs)


def _exact_pairs(c, nodes):
    import networkx as nx

    nodes = list(nodes)
    if len(nodes) == 2:
        return [tuple(sorted(nodes))]
    G = nx.Graph()
    for i, j in combinations(nodes, 2):
        G.add_edge(i, j, weight=float(((c[i] - c[j]) ** 2).sum()))
    m = nx.min_weight_matching(G)
    return sorted(tuple(sorted(e)) for e in m)


def _exact_unions(c):
    G = c.shape[0]
    if G % 2 == 0:
        return _exact_pairs(c, range(G)), None
    if G == 3:
        return [], (0, 1, 2)
    best = None
    for g in range(G):
        rest = [x for x in range(G) if x != g]
        pairs = _exact_pairs(c, rest)
        for pi, (i, j) in enumerate(pairs):
            extra = float(((c[g] - c[i]) ** 2).sum() + ((c[g] - c[j]) ** 2).sum())
            cost = _pair_cost(c, pairs) + extra
            if best is None or cost < best[0] - 1e-15:
                triple = tuple(sorted((g, i, j)))
                best = (cost, [p for q, p in enumerate(pairs) if q != pi], triple)
    return best[1], best[2]


def pair_groups(design: Design, psi) -> GroupPairing:
    """Match groups into pairs of similar centroids (one triple if the count is odd)."""
    G = design.n_groups
    if G < 2:
        raise SingleGroup("pairing needs at least two groups")
    c = group_centroids(design, psi)
    if G <= EXACT_PAIRING_MAX_GROUPS:
        pairs, triple = _exact_unions(c)
    else:
        stop = 3 if G % 2 else None
        gs, rest = greedy_groups(c, 2, stop=stop)
        pairs = [tuple(int(x) for x in g) for g in gs]
        triple = tuple(int(x) for x in rest) if len(rest) else None
    partner = np.full(G, -1, dtype=np.int64)
    for i, j in pairs:
        partner[i], partner[j] = j, i
    unions = [tuple(p) for p in pairs]
    if triple is not None:
        unions.append(tuple(triple))
    score = 0.0
    for u in unions:
        for i, j in combinations(u, 2):
            score += 2.0 * float(((c[i] - c[j]) ** 2).sum())
    return GroupPairing(partner, unions, score / design.n, triple)
