"""Clustering and detection metrics (ARI, TPR/FPR, CFAR thresholds) plus the
desk-scale experiment runner that sweeps SNR, query budgets, oracle noise and
SSDO parameters into a serializable report.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace as dc_replace
from typing import Mapping, Sequence

import numpy as np

from . import cobras, oracle, ssdo
from .errors import InsufficientData, InvalidArgument, StageError, UndefinedMetric


# ---------------------------------------------------------------------------
# Adjusted Rand index
# ---------------------------------------------------------------------------

def _comb2(n: np.ndarray | int):
    n = np.asarray(n, dtype=np.float64)
    return n * (n - 1.0) / 2.0


def ari(pred: Mapping[str, int], truth: Mapping[str, int]) -> float:
    """Adjusted Rand index via the pair-counting contingency table."""
    if set(pred) != set(truth):
        raise InvalidArgument("clusterings must cover the same instance ids")
    ids = sorted(pred)
    n = len(ids)
    if n == 0:
        raise InvalidArgument("empty clusterings")
    pred_labels = {c: i for i, c in enumerate(sorted(set(pred.values()), key=repr))}
    true_labels = {c: i for i, c in enumerate(sorted(set(truth.values()), key=repr))}
    table = np.zeros((len(pred_labels), len(true_labels)))
    for i in ids:
        table[pred_labels[pred[i]], true_labels[truth[i]]] += 1
    sum_cells = _comb2(table).sum()
    sum_rows = _comb2(table.sum(axis=1)).sum()
    sum_cols = _comb2(table.sum(axis=0)).sum()
    total = _comb2(n)
    expected = sum_rows * sum_cols / total if total else 0.0
    max_index = 0.5 * (sum_rows + sum_cols)
    if max_index == expected:
        return 1.0  # both clusterings degenerate identically
    return float((sum_cells - expected) / (max_index - expected))


# ---------------------------------------------------------------------------
# Detection metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DetectionMetrics:
    tpr: float
    fpr: float
    accuracy: float  # the true-positive rate; detection plots report it as accuracy
    n_anomalous: int
    n_clean: int


def detection_metrics(flags: Mapping[str, bool], truth: Mapping[str, bool]) -> DetectionMetrics:
    if set(flags) != set(truth):
        raise InvalidArgument("flags and truth must cover the same ids")
    anomalous = [i for i in truth if truth[i]]
    clean = [i for i in truth if not truth[i]]
    if not anomalous or not clean:
        raise UndefinedMetric(
            f"need both classes: {len(anomalous)} anomalous, {len(clean)} clean")
    tpr = sum(flags[i] for i in anomalous) / len(anomalous)
    fpr = sum(flags[i] for i in clean) / len(clean)
    return DetectionMetrics(tpr=tpr, fpr=fpr, accuracy=tpr,
                            n_anomalous=len(anomalous), n_clean=len(clean))


def cfar_threshold(scores_on_clean: Sequence[float], target_fpr: float) -> float:
    """Empirical (1 - target_fpr) quantile: the smallest clean score with at
    least that fraction of the mass at or below it. Flagging scores >= the
    threshold keeps the empirical FPR within one sample-quantile step of the
    target."""
    if not 0.0 < target_fpr <= 1.0:
        raise InvalidArgument("target_fpr must lie in (0, 1]")
    scores = np.sort(np.asarray(scores_on_clean, dtype=np.float64))
    n = len(scores)
    if n < 1.0 / target_fpr:
        raise InsufficientData(f"need >= {math.ceil(1.0 / target_fpr)} clean scores, got {n}")
    rank = math.ceil((1.0 - target_fpr) * n)
    rank = min(max(rank, 1), n)
    return float(scores[rank - 1])


# ---------------------------------------------------------------------------
# Report plumbing
# ---------------------------------------------------------------------------

@dataclass
class Report:
    config: dict
    seeds: dict
    detection: list[dict] = field(default_factory=list)
    threshold_sweep: list[dict] = field(default_factory=list)
    clustering: list[dict] = field(default_factory=list)
    ssdo: list[dict] = field(default_factory=list)
    stages_completed: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "config": self.config,
                "seeds": self.seeds,
                "detection": self.detection,
                "threshold_sweep": self.threshold_sweep,
                "clustering": self.clustering,
                "ssdo": self.ssdo,
                "stages_completed": self.stages_completed,
            },
            indent=2,
            sort_keys=True,
        )


def cell_seed(master: int, *coords) -> int:
    """Stable per-cell seed derived from the master seed and cell coordinates."""
    import zlib
    key = "/".join(str(c) for c in coords)
    ss = np.random.SeedSequence(entropy=master, spawn_key=(zlib.crc32(key.encode()),))
    return int(ss.generate_state(1)[0])


# ---------------------------------------------------------------------------
# Active-stage harness (shared by run_experiment and the acceptance suite)
# ---------------------------------------------------------------------------

def pair_channel(oracle_cfg):
    return lambda a, b: oracle.answer_pair(oracle_cfg, a, b)


def select_points(points: Sequence[cobras.FeaturePoint], kinds: Mapping[str, str],
                  snr: Mapping[str, float], snr_values: Sequence[float] | None = None,
                  sensors: Sequence[str] | None = None,
                  anomalous_only: bool = True) -> list[cobras.FeaturePoint]:
    out = []
    for p in points:
        if anomalous_only and kinds[p.point_id] == oracle.NORMAL_KIND:
            continue
        if snr_values is not None and snr[p.point_id] not in snr_values:
            continue
        if sensors is not None and p.provenance[0] not in sensors:
            continue
        out.append(p)
    return out


def _subsample(points: Sequence[cobras.FeaturePoint], max_points: int,
               rng: np.random.Generator) -> list[cobras.FeaturePoint]:
    if len(points) <= max_points:
        return list(points)
    idx = rng.choice(len(points), size=max_points, replace=False)
    return [points[i] for i in sorted(idx)]


def clustering_run(points: Sequence[cobras.FeaturePoint], kinds: Mapping[str, str],
                   budget: int, p_incorrect: float, seed: int,
                   max_points: int | None = None) -> tuple[cobras.ClusteringState, float]:
    """One COBRAS run against the simulated oracle; returns (state, ARI)."""
    rng = np.random.default_rng(seed)
    pts = _subsample(points, max_points, rng) if max_points else list(points)
    ocfg = oracle.make_oracle({p.point_id: kinds[p.point_id] for p in pts},
                              p_incorrect=p_incorrect, seed=seed)
    state = cobras.init(pts, budget=budget)
    state = cobras.run_to_completion(state, pair_channel(ocfg))
    pred = cobras.current_clustering(state)
    truth = {p.point_id: kinds[p.point_id] for p in pts}
    return state, ari(pred, truth)


def clustering_cell(points, kinds, budget, p_incorrect, seed, runs=10,
                    max_points=None) -> dict:
    scores = []
    queries = []
    for r in range(runs):
        state, value = clustering_run(points, kinds, budget, p_incorrect,
                                      cell_seed(seed, "clus", budget, p_incorrect, r),
                                      max_points=max_points)
        scores.append(value)
        queries.append(state.queries_used)
    return {"budget": budget, "p_incorrect": p_incorrect, "runs": runs,
            "mean_ari": float(np.mean(scores)), "std_ari": float(np.std(scores)),
            "mean_queries": float(np.mean(queries)), "n": len(points)}


def cross_sensor_run(points, kinds, query_sensor: str, budget: int, seed: int,
                     p_incorrect: float = 0.0) -> dict:
    """Cluster one sensor's points with the oracle, then generalize to the
    remaining sensors by nearest-medoid assignment."""
    own = [p for p in points if p.provenance[0] == query_sensor]
    others = [p for p in points if p.provenance[0] != query_sensor]
    if len(own) < 2 or not others:
        raise InvalidArgument("need points on both sides of the sensor split")
    ocfg = oracle.make_oracle({p.point_id: kinds[p.point_id] for p in own},
                              p_incorrect=p_incorrect, seed=seed)
    state = cobras.init(own, budget=budget)
    state = cobras.run_to_completion(state, pair_channel(ocfg))
    assigned = cobras.assign_by_nearest_medoid(state, np.stack([p.vector for p in others]))
    pred_others = {p.point_id: int(c) for p, c in zip(others, assigned)}
    truth_others = {p.point_id: kinds[p.point_id] for p in others}
    pred_all = dict(pred_others)
    pred_all.update(cobras.current_clustering(state))
    truth_all = {p.point_id: kinds[p.point_id] for p in points}
    return {"ari_others": ari(pred_others, truth_others),
            "ari_all": ari(pred_all, truth_all),
            "queries": state.queries_used}


def ssdo_run(points, kinds, normal_kind: str, alpha: float, k: int, n_queries: int,
             seed: int, p_incorrect: float = 0.0, cluster_budget: int = 60,
             max_points: int | None = None, policy=("threshold", 0.5)) -> dict:
    """Cluster, round-robin label queries against the oracle, propagate, and
    measure fraction-correct against the (re)designated anomaly truth."""
    rng = np.random.default_rng(seed)
    pts = _subsample(points, max_points, rng) if max_points else list(points)
    kind_map = {p.point_id: kinds[p.point_id] for p in pts}
    anomalous_kinds = frozenset(set(kind_map.values()) - {normal_kind, oracle.NORMAL_KIND})
    ocfg = oracle.make_oracle(kind_map, p_incorrect=p_incorrect, seed=seed,
                              anomalous_kinds=anomalous_kinds)
    state = cobras.init(pts, budget=cluster_budget)
    state = cobras.run_to_completion(state, pair_channel(ocfg))
    clustering = cobras.current_clustering(state)

    ids = [p.point_id for p in pts]
    X = np.stack([p.vector for p in pts])
    u = ssdo.unsupervised_scores(ids, X, clustering)
    store = ssdo.LabelStore()
    targets = ssdo.round_robin_schedule(clustering, n_queries, rng)
    for t in targets:
        store.add(t, oracle.answer_label(ocfg, t), source="oracle")
    sheet = ssdo.propagate(u, ids, X, clustering, store, ssdo.SsdoParams(alpha=alpha, k=k))
    flags = ssdo.classify(sheet, policy)
    truth = {i: kind_map[i] in anomalous_kinds for i in ids}
    accuracy = float(np.mean([flags[i] == truth[i] for i in ids]))
    return {"accuracy": accuracy, "n": len(ids), "labels": len(store),
            "cluster_queries": state.queries_used}


# ---------------------------------------------------------------------------
# Experiment runner
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    pipeline: "PipelineConfig"
    seed: int = 0
    n_sweep: tuple[float, ...] = (1.0, 2.0, 3.0, 4.0)
    clustering_budgets: tuple[int, ...] = (20, 60, 100)
    clustering_runs: int = 10
    p_incorrect_grid: tuple[float, ...] = (0.0, 0.1, 0.2, 0.4)
    clustering_snrs: tuple[float, ...] = (20.0,)
    max_cluster_points: int = 100
    ssdo_alphas: tuple[float, ...] = (0.5, 1.0, 2.0)
    ssdo_ks: tuple[int, ...] = (10, 50, 100)
    ssdo_queries: tuple[int, ...] = (10, 50, 100)
    ssdo_normal_kind: str = "wpulse"
    ssdo_p_incorrect: float = 0.05
    workers: int = 2

    @classmethod
    def from_json(cls, doc: Mapping) -> "ExperimentConfig":
        from .pipeline import PipelineConfig
        kwargs = dict(doc)
        kwargs["pipeline"] = PipelineConfig.from_json(kwargs.get("pipeline", {}))
        for key in ("n_sweep", "clustering_budgets", "p_incorrect_grid", "clustering_snrs",
                    "ssdo_alphas", "ssdo_ks", "ssdo_queries"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise InvalidArgument(str(e)) from None

    def to_json(self) -> dict:
        return {
            "pipeline": self.pipeline.to_json(),
            "seed": self.seed,
            "n_sweep": list(self.n_sweep),
            "clustering_budgets": list(self.clustering_budgets),
            "clustering_runs": self.clustering_runs,
            "p_incorrect_grid": list(self.p_incorrect_grid),
            "clustering_snrs": list(self.clustering_snrs),
            "max_cluster_points": self.max_cluster_points,
            "ssdo_alphas": list(self.ssdo_alphas),
            "ssdo_ks": list(self.ssdo_ks),
            "ssdo_queries": list(self.ssdo_queries),
            "ssdo_normal_kind": self.ssdo_normal_kind,
            "ssdo_p_incorrect": self.ssdo_p_incorrect,
            "workers": self.workers,
        }


def detection_tables(artifacts, n_values: Sequence[float]) -> tuple[list[dict], list[dict]]:
    """Per-(sensor, band, kind, snr) rates plus the n-threshold sweep."""
    from . import data_feature as df
    truth_rows = list(zip(artifacts.dataset.test, artifacts.dataset.truth))
    cells: dict[tuple, dict] = {}
    per_n: list[dict] = []
    for n in n_values:
        bank = df.ThresholdBank(artifacts.bank.r_l, artifacts.bank.d_lcont,
                                artifacts.bank.d_lcat, n=n)
        flags = {d.tile.key: df.is_anomalous(d.losses, bank) for d in artifacts.detections}
        truth_map = {t.key: g.is_anomalous for t, g in truth_rows}
        m = detection_metrics(flags, truth_map)
        per_n.append({"n": n, "tpr": m.tpr, "fpr": m.fpr,
                      "n_anomalous": m.n_anomalous, "n_clean": m.n_clean})
        if n == artifacts.bank.n:
            for (t, g), d in zip(truth_rows, artifacts.detections):
                if not g.is_anomalous:
                    continue
                key = (t.sensor_id, t.band_index, g.kind.value, g.snr_db)
                cell = cells.setdefault(key, {"sensor": t.sensor_id, "band": t.band_index,
                                              "kind": g.kind.value, "snr_db": g.snr_db,
                                              "flagged": 0, "n": 0})
                cell["n"] += 1
                cell["flagged"] += int(flags[t.key])
    detection = []
    for cell in cells.values():
        cell["tpr"] = cell["flagged"] / cell["n"]
        detection.append(cell)
    detection.sort(key=lambda c: (c["sensor"], c["band"], c["kind"], c["snr_db"]))
    return detection, per_n


def run_experiment(config: ExperimentConfig) -> Report:
    """Dataset -> training -> detection -> clustering curves -> SSDO curves.

    Any stage failure aborts with the stage name and the partial report."""
    from .pipeline import run_pipeline

    report = Report(config=config.to_json(), seeds={"master": config.seed})
    stage = "pipeline"
    try:
        artifacts = run_pipeline(config.pipeline, config.seed)
        report.stages_completed.append(stage)

        stage = "detection"
        detection, per_n = detection_tables(artifacts, config.n_sweep)
        report.detection = detection
        report.threshold_sweep = per_n
        report.stages_completed.append(stage)

        stage = "clustering"
        kinds = artifacts.kinds()
        snr_map = {pid: m.snr_db for pid, m in artifacts.meta.items()}
        jobs = []
        for snr in config.clustering_snrs:
            pool = select_points(artifacts.points, kinds, snr_map, snr_values=(snr,))
            if len(pool) < 6:
                continue
            for budget in config.clustering_budgets:
                for p_i in config.p_incorrect_grid:
                    jobs.append((snr, pool, budget, p_i))

        def _cell(job):
            snr, pool, budget, p_i = job
            row = clustering_cell(pool, kinds, budget, p_i, config.seed,
                                  runs=config.clustering_runs,
                                  max_points=config.max_cluster_points)
            row["snr_db"] = snr
            return row

        with ThreadPoolExecutor(max_workers=max(1, config.workers)) as pool_exec:
            report.clustering = list(pool_exec.map(_cell, jobs))
        report.stages_completed.append(stage)

        stage = "ssdo"
        pool = select_points(artifacts.points, kinds, snr_map,
                             snr_values=(10.0, 20.0) if 20.0 in config.pipeline.dataset.snr_grid_db else None)
        rows = []
        if len(pool) >= 6:
            for alpha in config.ssdo_alphas:
                for k in config.ssdo_ks:
                    for q in config.ssdo_queries:
                        out = ssdo_run(pool, kinds, config.ssdo_normal_kind, alpha, k, q,
                                       cell_seed(config.seed, "ssdo", alpha, k, q),
                                       p_incorrect=config.ssdo_p_incorrect,
                                       max_points=config.max_cluster_points)
                        rows.append({"alpha": alpha, "k": k, "queries": q,
                                     "p_incorrect": config.ssdo_p_incorrect, **out})
        report.ssdo = rows
        report.stages_completed.append(stage)
    except Exception as e:  # noqa: BLE001 - stage name must reach the caller
        raise StageError(stage, e, partial=report) from e
    return report


def report_csv_tables(report: Report) -> dict[str, str]:
    """One CSV per figure analog."""
    tables = {}

    def render(rows, columns):
        lines = [",".join(columns)]
        for row in rows:
            lines.append(",".join(str(row.get(c, "")) for c in columns))
        return "\n".join(lines) + "\n"

    if report.detection:
        tables["detection.csv"] = render(
            report.detection, ["sensor", "band", "kind", "snr_db", "flagged", "n", "tpr"])
    if report.threshold_sweep:
        tables["threshold_sweep.csv"] = render(
            report.threshold_sweep, ["n", "tpr", "fpr", "n_anomalous", "n_clean"])
    if report.clustering:
        tables["clustering.csv"] = render(
            report.clustering,
            ["snr_db", "budget", "p_incorrect", "runs", "mean_ari", "std_ari", "mean_queries", "n"])
    if report.ssdo:
        tables["ssdo.csv"] = render(
            report.ssdo,
            ["alpha", "k", "queries", "p_incorrect", "accuracy", "n", "labels", "cluster_queries"])
    return tables


def render_report_svgs(report: Report, out_dir) -> list[str]:
    """Static SVG plots per figure analog."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    if report.threshold_sweep:
        fig, axes = plt.subplots(1, 2, figsize=(8, 3))
        ns = [r["n"] for r in report.threshold_sweep]
        axes[0].plot(ns, [r["tpr"] * 100 for r in report.threshold_sweep], marker="o")
        axes[0].set_xlabel("n"), axes[0].set_ylabel("detection accuracy (%)")
        axes[1].plot(ns, [r["fpr"] * 100 for r in report.threshold_sweep], marker="o", color="tab:red")
        axes[1].set_xlabel("n"), axes[1].set_ylabel("false positive rate (%)")
        fig.tight_layout()
        path = out / "threshold_sweep.svg"
        fig.savefig(path)
        plt.close(fig)
        written.append(str(path))

    if report.detection:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        by_kind: dict[str, dict[float, list[float]]] = {}
        for row in report.detection:
            by_kind.setdefault(row["kind"], {}).setdefault(row["snr_db"], []).append(row["tpr"])
        for kind, series in sorted(by_kind.items()):
            snrs = sorted(series)
            ax.plot(snrs, [100 * np.mean(series[s]) for s in snrs], marker="o", label=kind)
        ax.set_xlabel("SNR (dB)"), ax.set_ylabel("detection accuracy (%)"), ax.legend()
        fig.tight_layout()
        path = out / "detection_accuracy.svg"
        fig.savefig(path)
        plt.close(fig)
        written.append(str(path))

    if report.clustering:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        by_pi: dict[float, dict[int, list[float]]] = {}
        for row in report.clustering:
            by_pi.setdefault(row["p_incorrect"], {}).setdefault(row["budget"], []).append(row["mean_ari"])
        for p_i, series in sorted(by_pi.items()):
            budgets = sorted(series)
            ax.plot(budgets, [np.mean(series[b]) for b in budgets], marker="o", label=f"P_i={p_i}")
        ax.set_xlabel("queries"), ax.set_ylabel("ARI"), ax.legend()
        fig.tight_layout()
        path = out / "clustering_ari.svg"
        fig.savefig(path)
        plt.close(fig)
        written.append(str(path))

    if report.ssdo:
        fig, ax = plt.subplots(figsize=(5.5, 3.5))
        by_ak: dict[tuple, dict[int, float]] = {}
        for row in report.ssdo:
            by_ak.setdefault((row["alpha"], row["k"]), {})[row["queries"]] = row["accuracy"]
        for (alpha, k), series in sorted(by_ak.items()):
            qs = sorted(series)
            ax.plot(qs, [100 * series[q] for q in qs], marker="o", label=f"a={alpha}, k={k}")
        ax.set_xlabel("label queries"), ax.set_ylabel("accuracy (%)")
        ax.legend(fontsize=6, ncol=3)
        fig.tight_layout()
        path = out / "ssdo_accuracy.svg"
        fig.savefig(path)
        plt.close(fig)
        written.append(str(path))
    return written
