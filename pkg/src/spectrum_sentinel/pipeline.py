"""End-to-end pipeline stages: dataset -> trained detector -> detections ->
anomaly features, plus artifact (de)serialization for the CLI and service.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import anomaly_feature as af
from . import data_feature as df
from . import simulate as sim
from .autoencoder import TrainConfig
from .cobras import FeaturePoint
from .errors import InsufficientData, InvalidConfig
from .oracle import NORMAL_KIND


@dataclass(frozen=True)
class PipelineConfig:
    dataset: sim.DatasetConfig = field(default_factory=sim.DatasetConfig)
    train_epochs: int = 100
    specialize_epochs: int = 20
    anomaly_epochs: int = 40
    label_fraction: float = 0.2
    n_sigma: float = 2.0
    batch_size: int = 32
    learning_rate: float = 0.001
    min_anomaly_residuals: int = 100

    def to_json(self) -> dict:
        doc = {
            "dataset": self.dataset.to_json(),
            "train_epochs": self.train_epochs,
            "specialize_epochs": self.specialize_epochs,
            "anomaly_epochs": self.anomaly_epochs,
            "label_fraction": self.label_fraction,
            "n_sigma": self.n_sigma,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "min_anomaly_residuals": self.min_anomaly_residuals,
        }
        return doc

    @classmethod
    def from_json(cls, doc: Mapping) -> "PipelineConfig":
        kwargs = dict(doc)
        if "dataset" in kwargs:
            kwargs["dataset"] = sim.DatasetConfig.from_json(kwargs["dataset"])
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise InvalidConfig(str(e)) from None


@dataclass
class PointMeta:
    kind: str          # anomaly kind name, or "normal" for flagged clean tiles
    snr_db: float
    sensor_id: str
    band_index: int
    t_start: int


@dataclass
class PipelineArtifacts:
    config: PipelineConfig
    seed: int
    dataset: sim.Dataset
    model: "df.AaeModel"
    bank: df.ThresholdBank
    detections: list[df.Detection]
    anomaly_model: af.AnomalyModel | None
    drift_stats: af.DriftStats | None
    points: list[FeaturePoint]
    meta: dict[str, PointMeta]
    flagged: dict[str, bool]  # every test tile key -> unsupervised flag

    def kinds(self) -> dict[str, str]:
        return {pid: m.kind for pid, m in self.meta.items()}


def _subseed(master: int, tag: int) -> int:
    return int(np.random.SeedSequence(entropy=master, spawn_key=(tag,)).generate_state(1)[0])


def run_pipeline(cfg: PipelineConfig, seed: int) -> PipelineArtifacts:
    """Dataset build, three-phase training, specialization, calibration,
    detection, anomaly-feature training and 108-dim feature extraction."""
    dataset = sim.build_dataset(replace(cfg.dataset, seed=_subseed(seed, 0)))
    labels = df.label_subset(dataset, cfg.label_fraction, seed=_subseed(seed, 1))
    train_cfg = TrainConfig(epochs=cfg.train_epochs, batch_size=cfg.batch_size,
                            learning_rate=cfg.learning_rate, seed=_subseed(seed, 2))
    model = df.train_global(dataset.train, labels, train_cfg)
    by_sensor: dict[str, list[sim.Tile]] = {}
    for t in dataset.train:
        by_sensor.setdefault(t.sensor_id, []).append(t)
    model = df.specialize_decoders(
        model, by_sensor,
        TrainConfig(epochs=cfg.specialize_epochs, batch_size=cfg.batch_size,
                    learning_rate=cfg.learning_rate, seed=_subseed(seed, 3)))
    bank = df.calibrate(model, dataset.train, n=cfg.n_sigma)
    detections = df.detect_batch(model, bank, dataset.test, dataset.expected_classes)
    flagged = {d.tile.key: d.flagged for d in detections}

    flagged_detections = [d for d in detections if d.flagged]
    anomaly_model = None
    drift_stats = None
    points: list[FeaturePoint] = []
    meta: dict[str, PointMeta] = {}
    if len(flagged_detections) >= cfg.min_anomaly_residuals:
        residuals = np.stack([d.residual for d in flagged_detections])
        anomaly_model = af.train_anomaly_model(
            residuals,
            TrainConfig(epochs=cfg.anomaly_epochs, batch_size=cfg.batch_size,
                        learning_rate=cfg.learning_rate, seed=_subseed(seed, 4)),
            min_residuals=cfg.min_anomaly_residuals)
        drift_stats = af.DriftStats.fit(anomaly_model.reconstruction_losses(residuals))

        f_a = anomaly_model.extract(residuals)
        tiles = [d.tile for d in flagged_detections]
        f_d, probs = df.extract_features(model, tiles)
        vectors = np.hstack([f_a, f_d, probs])
        truth_by_key = {t.key: g for t, g in zip(dataset.test, dataset.truth)}
        for i, d in enumerate(flagged_detections):
            key = d.tile.key
            g = truth_by_key[key]
            points.append(FeaturePoint(
                point_id=key, vector=vectors[i],
                provenance=(d.tile.sensor_id, d.tile.band_index, d.tile.t_start),
                residual=d.residual))
            meta[key] = PointMeta(
                kind=g.kind.value if g.is_anomalous else NORMAL_KIND,
                snr_db=g.snr_db if g.is_anomalous else 0.0,
                sensor_id=d.tile.sensor_id, band_index=d.tile.band_index,
                t_start=d.tile.t_start)
    return PipelineArtifacts(config=cfg, seed=seed, dataset=dataset, model=model,
                             bank=bank, detections=detections,
                             anomaly_model=anomaly_model, drift_stats=drift_stats,
                             points=points, meta=meta, flagged=flagged)


# ---------------------------------------------------------------------------
# Artifact files consumed by `serve`, `cluster`, `score` and `replay`
# ---------------------------------------------------------------------------

def save_feature_artifacts(artifacts: PipelineArtifacts, out_dir) -> Path:
    """features.npz + bank.json + session config; enough to run the active
    stages (and the service) without the heavy models."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = [p.point_id for p in artifacts.points]
    np.savez_compressed(
        out / "features.npz",
        ids=np.array(ids),
        vectors=np.stack([p.vector for p in artifacts.points]) if ids else np.zeros((0, 108)),
        residuals=np.stack([p.residual for p in artifacts.points]) if ids else np.zeros((0, 6, 300), dtype=np.float32),
        kinds=np.array([artifacts.meta[i].kind for i in ids]),
        snrs=np.array([artifacts.meta[i].snr_db for i in ids]),
        sensors=np.array([artifacts.meta[i].sensor_id for i in ids]),
        bands=np.array([artifacts.meta[i].band_index for i in ids]),
        t_starts=np.array([artifacts.meta[i].t_start for i in ids]),
        flagged_ids=np.array(sorted(artifacts.flagged)),
        flagged_vals=np.array([artifacts.flagged[k] for k in sorted(artifacts.flagged)]),
    )
    (out / "bank.json").write_text(json.dumps(artifacts.bank.to_json(), indent=2))
    (out / "pipeline.json").write_text(json.dumps(
        {"config": artifacts.config.to_json(), "seed": artifacts.seed}, indent=2))
    return out


@dataclass
class FeatureArtifacts:
    points: list[FeaturePoint]
    meta: dict[str, PointMeta]
    flagged: dict[str, bool]
    bank: df.ThresholdBank
    config: PipelineConfig
    seed: int


def load_feature_artifacts(in_dir) -> FeatureArtifacts:
    src = Path(in_dir)
    z = np.load(src / "features.npz", allow_pickle=False)
    ids = [str(s) for s in z["ids"]]
    points = []
    meta = {}
    for i, pid in enumerate(ids):
        points.append(FeaturePoint(
            point_id=pid, vector=z["vectors"][i],
            provenance=(str(z["sensors"][i]), int(z["bands"][i]), int(z["t_starts"][i])),
            residual=z["residuals"][i]))
        meta[pid] = PointMeta(kind=str(z["kinds"][i]), snr_db=float(z["snrs"][i]),
                              sensor_id=str(z["sensors"][i]), band_index=int(z["bands"][i]),
                              t_start=int(z["t_starts"][i]))
    flagged = {str(k): bool(v) for k, v in zip(z["flagged_ids"], z["flagged_vals"])}
    bank = df.ThresholdBank.from_json(json.loads((src / "bank.json").read_text()))
    doc = json.loads((src / "pipeline.json").read_text())
    return FeatureArtifacts(points=points, meta=meta, flagged=flagged, bank=bank,
                            config=PipelineConfig.from_json(doc["config"]), seed=doc["seed"])
