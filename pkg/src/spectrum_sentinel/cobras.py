"""Constraint-based interactive clustering: super-instances are refined by
2-means splits whose medoid pairs are posed to an oracle/user, and clusters
are merged according to the accumulated must-link / cannot-link answers.

The engine is an explicit resumable state machine: step() advances until it
either finishes one iteration (split of the largest super-instance plus a
merge pass) or needs an answer the channel cannot give yet, in which case the
outstanding QueryPair is returned and the state parks until the answer comes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .errors import InvalidArgument

AnswerChannel = Callable[[str, str], Optional[bool]]

_SPLIT_LLOYD_MAX_ITER = 100


@dataclass(frozen=True)
class FeaturePoint:
    point_id: str
    vector: np.ndarray
    provenance: tuple[str, int, int] = ("", 0, 0)  # (sensor, band, t_start)
    residual: np.ndarray | None = None             # display payload for queries

    def __post_init__(self):
        if not np.all(np.isfinite(self.vector)):
            raise InvalidArgument(f"feature vector of {self.point_id!r} is not finite")


@dataclass
class SuperInstance:
    si_id: int
    members: np.ndarray  # sorted point indices
    medoid: int          # point index
    pure: bool = False


@dataclass(frozen=True)
class QueryPair:
    a: str
    b: str
    a_payload: np.ndarray | None
    b_payload: np.ndarray | None
    phase: str  # "split" or "merge"

    def __post_init__(self):
        if self.a == self.b:
            raise InvalidArgument("query pair must name two distinct medoids")


@dataclass
class _Pending:
    phase: str
    a: int
    b: int
    context: tuple


class ClusteringState:
    """Single-owner COBRAS state; advance strictly sequentially via step()."""

    def __init__(self, points: Sequence[FeaturePoint], budget: int | None = None):
        if len(points) < 2:
            raise InvalidArgument(f"clustering needs >= 2 points, got {len(points)}")
        if budget is not None and budget < 0:
            raise InvalidArgument("budget must be >= 0")
        self.points = list(points)
        self.ids = [p.point_id for p in points]
        if len(set(self.ids)) != len(self.ids):
            raise InvalidArgument("duplicate point ids")
        raw = np.stack([np.asarray(p.vector, dtype=np.float64) for p in points])
        self.standardize_mu = raw.mean(axis=0)
        sd = raw.std(axis=0)
        sd[sd == 0] = 1.0
        self.standardize_sd = sd
        self.X = (raw - self.standardize_mu) / sd
        self.D = cdist(self.X, self.X)
        self.budget = budget
        self.queries_used = 0
        self.contradictions = 0

        members = np.arange(len(points))
        self.sis: dict[int, SuperInstance] = {
            0: SuperInstance(0, members, self._medoid_of(members))}
        self.clusters: dict[int, set[int]] = {0: {0}}
        self._next_si = 1
        self._next_cluster = 1

        # answer store: frozenset({i, j}) -> (answer, seq); latest wins
        self.answers: dict[frozenset, tuple[bool, int]] = {}
        self._answer_seq = 0
        self._uf_dirty = True
        self._uf: dict[int, int] = {}

        self.pending: _Pending | None = None
        self._phase = "idle"          # idle | split | merge
        self._split_stack: list[tuple[int, int]] = []  # (si_id, depth)
        self._depth_cap = 0
        self.done = False

    # ------------------------------------------------------------------
    # bookkeeping
    # ------------------------------------------------------------------

    @property
    def budget_exhausted(self) -> bool:
        return self.budget is not None and self.queries_used >= self.budget

    def _medoid_of(self, members: np.ndarray) -> int:
        sub = self.D[np.ix_(members, members)]
        return int(members[int(np.argmin(sub.sum(axis=1)))])

    def _record(self, a: int, b: int, answer: bool) -> None:
        key = frozenset((a, b))
        old = self.answers.get(key)
        if old is not None and old[0] != answer:
            self.contradictions += 1
        self._answer_seq += 1
        self.answers[key] = (answer, self._answer_seq)
        self._uf_dirty = True

    # union-find over must-link answers, rebuilt lazily
    def _components(self) -> dict[int, int]:
        if self._uf_dirty:
            parent = {}

            def find(x):
                while parent.get(x, x) != x:
                    parent[x] = parent.get(parent[x], parent[x])
                    x = parent[x]
                return x

            for key in sorted(self.answers, key=lambda k: tuple(sorted(k))):
                ans, _ = self.answers[key]
                if ans:
                    a, b = sorted(key)
                    ra, rb = find(a), find(b)
                    if ra != rb:
                        parent[max(ra, rb)] = min(ra, rb)
            self._uf = {i: find(i) for i in range(len(self.ids))}
            self._uf_dirty = False
        return self._uf

    def relation(self, a: int, b: int) -> bool | None:
        """Known same/different relation between two points, else None.

        A direct answer for the pair wins; otherwise must-link transitive
        closure, then cannot-link edges lifted to closure components."""
        direct = self.answers.get(frozenset((a, b)))
        if direct is not None:
            return direct[0]
        comp = self._components()
        if comp[a] == comp[b]:
            return True
        for key, (ans, _) in self.answers.items():
            if not ans:
                x, y = tuple(key)
                if {comp[x], comp[y]} == {comp[a], comp[b]}:
                    return False
        return None

    # ------------------------------------------------------------------
    # clustering readout
    # ------------------------------------------------------------------

    def current_clustering(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for cid in sorted(self.clusters):
            for si_id in sorted(self.clusters[cid]):
                for m in self.sis[si_id].members:
                    out[self.ids[int(m)]] = cid
        return out

    def cluster_members(self) -> dict[int, list[str]]:
        out: dict[int, list[str]] = {}
        for pid, cid in self.current_clustering().items():
            out.setdefault(cid, []).append(pid)
        return out

    # ------------------------------------------------------------------
    # split machinery
    # ------------------------------------------------------------------

    def _largest_splittable(self) -> int | None:
        cands = [si for si in self.sis.values() if not si.pure and len(si.members) >= 2]
        if not cands:
            return None
        return min(cands, key=lambda s: (-len(s.members), s.si_id)).si_id

    def _two_means(self, members: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
        """Deterministic 2-means: seeds are the farthest member pair; returns
        None when the members cannot be separated (all identical)."""
        sub = self.D[np.ix_(members, members)]
        if sub.max() == 0.0:
            return None
        i, j = np.unravel_index(int(np.argmax(sub)), sub.shape)
        pts = self.X[members]
        centroids = np.stack([pts[i], pts[j]])
        assign = None
        for _ in range(_SPLIT_LLOYD_MAX_ITER):
            d = cdist(pts, centroids)
            new_assign = (d[:, 1] < d[:, 0]).astype(int)
            if assign is not None and np.array_equal(new_assign, assign):
                break
            assign = new_assign
            for side in (0, 1):
                sel = pts[assign == side]
                if len(sel):
                    centroids[side] = sel.mean(axis=0)
        a = members[assign == 0]
        b = members[assign == 1]
        if len(a) == 0 or len(b) == 0:
            return None
        return np.sort(a), np.sort(b)

    def _cluster_of_si(self, si_id: int) -> int:
        for cid, sids in self.clusters.items():
            if si_id in sids:
                return cid
        raise KeyError(si_id)

    def _commit_split(self, si_id: int, part_a: np.ndarray, part_b: np.ndarray, depth: int) -> None:
        cid = self._cluster_of_si(si_id)
        self.clusters[cid].discard(si_id)
        if not self.clusters[cid]:
            del self.clusters[cid]
        del self.sis[si_id]
        for part in (part_a, part_b):
            new_si = SuperInstance(self._next_si, part, self._medoid_of(part))
            self.sis[new_si.si_id] = new_si
            self._next_si += 1
            self.clusters[self._next_cluster] = {new_si.si_id}
            self._next_cluster += 1
            if depth + 1 <= self._depth_cap and len(part) >= 2:
                self._split_stack.append((new_si.si_id, depth + 1))

    # ------------------------------------------------------------------
    # merge machinery
    # ------------------------------------------------------------------

    def _cluster_relation(self, ca: int, cb: int) -> tuple[bool | None, tuple[int, int] | None]:
        """(relation, closest-unknown-medoid-pair). relation None => queryable."""
        meds_a = sorted(self.sis[s].medoid for s in self.clusters[ca])
        meds_b = sorted(self.sis[s].medoid for s in self.clusters[cb])
        unknown: list[tuple[float, int, int]] = []
        any_unknown = False
        for ma in meds_a:
            for mb in meds_b:
                rel = self.relation(ma, mb)
                if rel is True:
                    return True, None
                if rel is None:
                    any_unknown = True
                    unknown.append((self.D[ma, mb], ma, mb))
        if not any_unknown:
            return False, None
        unknown.sort()
        _, ma, mb = unknown[0]
        return None, (ma, mb)

    def _merge_clusters(self, ca: int, cb: int) -> None:
        keep, drop = min(ca, cb), max(ca, cb)
        self.clusters[keep] |= self.clusters.pop(drop)

    def _merge_scan(self) -> tuple[int, int, int, int] | None:
        """Apply all derivable merges, then return the closest unknown pair as
        (cluster_a, cluster_b, medoid_a, medoid_b); None when nothing to ask."""
        changed = True
        while changed:
            changed = False
            for ca in sorted(self.clusters):
                for cb in sorted(self.clusters):
                    if cb <= ca:
                        continue
                    rel, _ = self._cluster_relation(ca, cb)
                    if rel is True:
                        self._merge_clusters(ca, cb)
                        changed = True
                        break
                if changed:
                    break
        best: tuple[float, int, int, int, int] | None = None
        for ca in sorted(self.clusters):
            for cb in sorted(self.clusters):
                if cb <= ca:
                    continue
                rel, pair = self._cluster_relation(ca, cb)
                if rel is None and pair is not None:
                    dist = self.D[pair[0], pair[1]]
                    cand = (dist, ca, cb, pair[0], pair[1])
                    if best is None or cand < best:
                        best = cand
        if best is None:
            return None
        _, ca, cb, ma, mb = best
        return ca, cb, ma, mb


def init(points: Sequence[FeaturePoint], budget: int | None = None) -> ClusteringState:
    """One super-instance holding every point, in one cluster."""
    return ClusteringState(points, budget=budget)


def current_clustering(state: ClusteringState) -> dict[str, int]:
    return state.current_clustering()


def _query_pair(state: ClusteringState, pending: _Pending) -> QueryPair:
    pa, pb = state.points[pending.a], state.points[pending.b]
    return QueryPair(a=pa.point_id, b=pb.point_id,
                     a_payload=pa.residual, b_payload=pb.residual, phase=pending.phase)


def step(state: ClusteringState, channel: AnswerChannel) -> tuple[ClusteringState, QueryPair | None]:
    """Advance one iteration (or resume a parked one).

    channel(id_a, id_b) -> True (same) / False (different) / None (no answer
    yet). On None the outstanding QueryPair is returned; call step again once
    the answer has been recorded or the channel can supply it.
    """
    if state.done or state.budget_exhausted:
        return state, None
    while True:
        if state.pending is None:
            advanced = _advance(state)
            if advanced is None:
                if state.done or state._phase == "idle":
                    return state, None
                continue
            state.pending = advanced
        p = state.pending
        known = state.relation(p.a, p.b)
        if known is None:
            if state.budget_exhausted:
                return state, None
            ans = channel(state.ids[p.a], state.ids[p.b])
            if ans is None:
                return state, _query_pair(state, p)
            state.queries_used += 1
            state._record(p.a, p.b, bool(ans))
            known = state.relation(p.a, p.b)
        state.pending = None
        _apply(state, p, bool(known))


def _advance(state: ClusteringState) -> _Pending | None:
    """Run the machine until a relation must be asked or the iteration ends."""
    while True:
        if state._phase == "idle":
            target = state._largest_splittable()
            if target is None:
                if state._merge_scan() is None:
                    state.done = True
                    return None
                state._phase = "merge"
                continue
            state._depth_cap = max(1, math.ceil(math.log2(len(state.sis[target].members))))
            state._split_stack = [(target, 0)]
            state._phase = "split"
            continue
        if state._phase == "split":
            if not state._split_stack:
                state._phase = "merge"
                continue
            si_id, depth = state._split_stack.pop()
            si = state.sis.get(si_id)
            if si is None or si.pure or len(si.members) < 2:
                continue
            split = state._two_means(si.members)
            if split is None:
                si.pure = True  # indistinguishable members; nothing to ask
                continue
            part_a, part_b = split
            ma = state._medoid_of(part_a)
            mb = state._medoid_of(part_b)
            return _Pending("split", ma, mb, (si_id, part_a, part_b, depth))
        if state._phase == "merge":
            nxt = state._merge_scan()
            if nxt is None:
                state._phase = "idle"
                return None
            ca, cb, ma, mb = nxt
            return _Pending("merge", ma, mb, (ca, cb))


def _apply(state: ClusteringState, pending: _Pending, answer: bool) -> None:
    if pending.phase == "split":
        si_id, part_a, part_b, depth = pending.context
        if answer:
            si = state.sis.get(si_id)
            if si is not None:
                si.pure = True
        else:
            if si_id in state.sis:
                state._commit_split(si_id, part_a, part_b, depth)
    else:
        ca, cb = pending.context
        if answer and ca in state.clusters and cb in state.clusters:
            state._merge_clusters(ca, cb)


def run_to_completion(state: ClusteringState, channel: AnswerChannel,
                      max_steps: int = 10_000) -> ClusteringState:
    """Drive step() with an always-answering channel until done or out of budget."""
    for _ in range(max_steps):
        if state.done or state.budget_exhausted:
            break
        before = (state.queries_used, len(state.sis), len(state.clusters), state._phase)
        state, query = step(state, channel)
        if query is not None:
            raise InvalidArgument("channel returned no answer during a simulated run")
        after = (state.queries_used, len(state.sis), len(state.clusters), state._phase)
        if state.done or state.budget_exhausted:
            break
        if before == after:
            break
    return state


def assign_by_nearest_medoid(state: ClusteringState, vectors: np.ndarray) -> np.ndarray:
    """Map new raw-feature points to the cluster of their nearest
    super-instance medoid (using the standardization learned at init)."""
    meds = sorted({si.medoid for si in state.sis.values()})
    clustering = state.current_clustering()
    med_cluster = {m: clustering[state.ids[m]] for m in meds}
    z = (np.asarray(vectors, dtype=np.float64) - state.standardize_mu) / state.standardize_sd
    nearest = np.argmin(cdist(z, state.X[meds]), axis=1)
    return np.array([med_cluster[meds[k]] for k in nearest])
