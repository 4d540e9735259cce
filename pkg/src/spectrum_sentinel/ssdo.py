"""Semi-supervised anomaly scoring over a clustering: an unsupervised score
built from point deviation, cluster deviation and cluster size, refined by
propagating user labels through k-neighborhoods.

The final score is s(x) = (u(x) + alpha*c(x)*p(x)) / (1 + alpha*c(x)) where
p(x) is the weighted vote of the k nearest labeled instances in x's cluster
(globally if the cluster has none) and c(x) is the labeled fraction of x's
k-neighborhood, so unlabeled regions fall back to the unsupervised score.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .errors import InvalidArgument

_ETA_SAMPLE_CAP = 1500  # pairwise-distance sample cap for the bandwidth


@dataclass(frozen=True)
class SsdoParams:
    alpha: float
    k: int

    def __post_init__(self):
        if not self.alpha > 0:
            raise InvalidArgument("alpha must be > 0")
        if self.k < 1:
            raise InvalidArgument("k must be >= 1")


@dataclass(frozen=True)
class LabelRecord:
    verdict: bool  # True = anomalous
    ts: float
    source: str
    seq: int


class LabelStore:
    """Latest-wins anomaly labels with provenance, NDJSON round-trippable."""

    def __init__(self):
        self._records: dict[str, LabelRecord] = {}
        self._seq = 0

    def add(self, instance_id: str, verdict: bool, source: str = "oracle",
            ts: float | None = None) -> LabelRecord:
        self._seq += 1
        rec = LabelRecord(verdict=bool(verdict), ts=time.time() if ts is None else ts,
                          source=source, seq=self._seq)
        self._records[instance_id] = rec
        return rec

    def verdict_of(self, instance_id: str) -> bool | None:
        rec = self._records.get(instance_id)
        return rec.verdict if rec else None

    def labeled_ids(self) -> list[str]:
        return sorted(self._records)

    def __len__(self):
        return len(self._records)

    def __contains__(self, instance_id):
        return instance_id in self._records

    def to_ndjson(self) -> str:
        lines = []
        for instance_id in sorted(self._records, key=lambda i: self._records[i].seq):
            rec = self._records[instance_id]
            lines.append(json.dumps({"ts": rec.ts, "id": instance_id,
                                     "verdict": "anomalous" if rec.verdict else "normal",
                                     "source": rec.source}))
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_ndjson(cls, text: str) -> "LabelStore":
        store = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            doc = json.loads(line)
            store.add(doc["id"], doc["verdict"] == "anomalous", source=doc["source"], ts=doc["ts"])
        return store


@dataclass
class ScoreSheet:
    ids: list[str]
    u: np.ndarray
    p: np.ndarray
    s: np.ndarray
    cluster: dict[str, int]

    def score_of(self, instance_id: str) -> float:
        return float(self.s[self.ids.index(instance_id)])

    def to_csv(self) -> str:
        lines = ["id,u,p,s,cluster"]
        for i, instance_id in enumerate(self.ids):
            lines.append(f"{instance_id},{self.u[i]:.9g},{self.p[i]:.9g},{self.s[i]:.9g},"
                         f"{self.cluster[instance_id]}")
        return "\n".join(lines) + "\n"


def _group_indices(ids: Sequence[str], clustering: Mapping[str, int]) -> dict[int, np.ndarray]:
    groups: dict[int, list[int]] = {}
    for i, instance_id in enumerate(ids):
        groups.setdefault(clustering[instance_id], []).append(i)
    return {c: np.array(v) for c, v in sorted(groups.items())}


def unsupervised_scores(ids: Sequence[str], X: np.ndarray,
                        clustering: Mapping[str, int]) -> np.ndarray:
    """Product of point deviation, cluster deviation and size factor, rescaled
    so the dataset maximum is 1. With fewer than two clusters the score
    degenerates to the point deviation alone."""
    if len(ids) == 0 or not clustering:
        raise InvalidArgument("empty clustering")
    if set(ids) != set(clustering):
        raise InvalidArgument("clustering must cover exactly the given ids")
    X = np.asarray(X, dtype=np.float64)
    groups = _group_indices(ids, clustering)
    centroids = {c: X[idx].mean(axis=0) for c, idx in groups.items()}
    n = len(ids)

    pointdev = np.zeros(n)
    for c, idx in groups.items():
        d = np.linalg.norm(X[idx] - centroids[c], axis=1)
        dmax = d.max()
        pointdev[idx] = d / dmax if dmax > 0 else 1.0

    if len(groups) < 2:
        u = pointdev
    else:
        cents = np.stack([centroids[c] for c in groups])
        cd = cdist(cents, cents)
        np.fill_diagonal(cd, np.inf)
        mean_inter = float(cd[np.isfinite(cd)].mean())
        clusterdev = {c: float(cd[k].min()) / mean_inter if mean_inter > 0 else 1.0
                      for k, c in enumerate(groups)}
        sizefactor = {c: 1.0 - len(idx) / n for c, idx in groups.items()}
        u = pointdev.copy()
        for c, idx in groups.items():
            u[idx] *= clusterdev[c] * sizefactor[c]
    top = u.max()
    return u / top if top > 0 else u


def add_label(store: LabelStore, instance_id: str, verdict: bool,
              known_ids: Iterable[str] | None = None, source: str = "user") -> LabelStore:
    """Latest-wins label; rejects ids outside the known universe when given."""
    if known_ids is not None and instance_id not in set(known_ids):
        raise InvalidArgument(f"unknown instance id {instance_id!r}")
    store.add(instance_id, verdict, source=source)
    return store


def propagate(u: np.ndarray, ids: Sequence[str], X: np.ndarray,
              clustering: Mapping[str, int], store: LabelStore,
              params: SsdoParams) -> ScoreSheet:
    """Fill the propagated and final scores for every instance."""
    if len(u) != len(ids):
        raise InvalidArgument("u must align with ids")
    X = np.asarray(X, dtype=np.float64)
    n = len(ids)
    index_of = {instance_id: i for i, instance_id in enumerate(ids)}
    labeled = [i for i in store.labeled_ids() if i in index_of]
    labeled_idx = np.array([index_of[i] for i in labeled], dtype=int)
    votes = np.array([1.0 if store.verdict_of(i) else 0.0 for i in labeled])

    if n > _ETA_SAMPLE_CAP:
        sel = np.random.default_rng(0).choice(n, size=_ETA_SAMPLE_CAP, replace=False)
        eta = float(pdist(X[sel]).mean())
    else:
        eta = float(pdist(X).mean()) if n > 1 else 1.0
    if eta <= 0:
        eta = 1.0

    D = cdist(X, X)
    k = min(params.k, n)
    # labeled fraction of each instance's k-neighborhood (self included)
    neighborhoods = np.argsort(D, axis=1, kind="stable")[:, :k]
    is_labeled = np.zeros(n, dtype=bool)
    is_labeled[labeled_idx] = True
    c = is_labeled[neighborhoods].sum(axis=1) / k

    p = np.full(n, 0.5)
    if len(labeled_idx):
        groups = _group_indices(ids, clustering)
        cluster_labeled = {cl: idx[np.isin(idx, labeled_idx)] for cl, idx in groups.items()}
        vote_of = {int(i): votes[j] for j, i in enumerate(labeled_idx)}
        for cl, idx in groups.items():
            pool = cluster_labeled[cl]
            if len(pool) == 0:
                pool = labeled_idx
            for i in idx:
                d = D[i, pool]
                order = np.argsort(d, kind="stable")[:params.k]
                sel = pool[order]
                w = np.exp(-np.square(D[i, sel]) / (eta * eta))
                v = np.array([vote_of[int(s)] for s in sel])
                p[i] = float(np.dot(w, v) / w.sum()) if w.sum() > 0 else float(v.mean())

    ac = params.alpha * c
    s = (u + ac * p) / (1.0 + ac)
    return ScoreSheet(ids=list(ids), u=np.asarray(u, dtype=float), p=p, s=s,
                      cluster=dict(clustering))


def classify(sheet: ScoreSheet, policy: tuple[str, float]) -> dict[str, bool]:
    """Deterministic thresholding of the final score.

    policy = ("threshold", t): flag s >= t.
    policy = ("top_fraction", q): flag the ceil(q*N) highest scores, breaking
    ties at the cutoff by lower id.
    """
    kind, value = policy
    if kind == "threshold":
        return {instance_id: bool(sheet.s[i] >= value) for i, instance_id in enumerate(sheet.ids)}
    if kind == "top_fraction":
        if not 0.0 < value <= 1.0:
            raise InvalidArgument("top_fraction requires q in (0, 1]")
        m = int(np.ceil(value * len(sheet.ids)))
        order = sorted(range(len(sheet.ids)), key=lambda i: (-sheet.s[i], sheet.ids[i]))
        chosen = set(order[:m])
        return {instance_id: (i in chosen) for i, instance_id in enumerate(sheet.ids)}
    raise InvalidArgument(f"unknown policy {kind!r}")


def round_robin_schedule(clustering: Mapping[str, int], n_queries: int,
                         rng: np.random.Generator,
                         already_labeled: Iterable[str] = ()) -> list[str]:
    """Pick label-query targets cluster by cluster in round-robin order,
    preferring unlabeled members; relabels randomly once a cluster is
    exhausted."""
    members: dict[int, list[str]] = {}
    for instance_id, cl in clustering.items():
        members.setdefault(cl, []).append(instance_id)
    for cl in members:
        members[cl].sort()
    clusters = sorted(members)
    labeled = set(already_labeled)
    out: list[str] = []
    for q in range(n_queries):
        cl = clusters[q % len(clusters)]
        pool = [i for i in members[cl] if i not in labeled]
        if not pool:
            pool = members[cl]
        pick = pool[int(rng.integers(0, len(pool)))]
        labeled.add(pick)
        out.append(pick)
    return out
