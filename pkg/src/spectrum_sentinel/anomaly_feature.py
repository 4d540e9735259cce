"""Anomaly-feature module: a single global AAE over residual tiles (input
minus reconstruction) of flagged detections, yielding the shared 50-dim
anomaly feature space and a reconstruction-loss drift signal for retraining.

Unlike the data-feature model there is no class head and no categorical
discriminator: residuals carry no technology label. The continuous prior
regularization is kept.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autoencoder import (
    GLOBAL_DECODER,
    AaeModel,
    TrainConfig,
    reconstruction_errors,
    train_aae,
)
from .errors import InsufficientData, InvalidArgument, InvalidState
from .simulate import TILE_COLS, TILE_ROWS

MIN_TRAIN_RESIDUALS = 100
DRIFT_SIGMA = 2.0


def center_residuals(residuals: np.ndarray) -> np.ndarray:
    """Circularly roll each residual so its energy centroid sits mid-tile.

    Where an anomaly lands inside a tile is arbitrary; two same-kind residuals
    at different offsets are as far apart cell-wise as different kinds.
    Centering removes that nuisance before encoding, so the feature space
    organizes by structure (rows vs stripe vs scattered pulses), not offset.
    The raw residual is untouched; this is model-input preprocessing on a par
    with amplitude normalization."""
    if residuals.ndim == 2:
        residuals = residuals[None]
    e = np.square(residuals - residuals.mean(axis=(1, 2), keepdims=True)).astype(np.float64)
    tot = e.sum(axis=(1, 2)) + 1e-12
    col_mu = (e.sum(axis=1) * np.arange(TILE_COLS)).sum(axis=1) / tot
    row_mu = (e.sum(axis=2) * np.arange(TILE_ROWS)).sum(axis=1) / tot
    out = np.empty_like(residuals)
    for i in range(len(residuals)):
        shift_c = TILE_COLS // 2 - int(round(col_mu[i]))
        shift_r = TILE_ROWS // 2 - int(round(row_mu[i]))
        out[i] = np.roll(np.roll(residuals[i], shift_r, axis=0), shift_c, axis=1)
    return out


@dataclass(frozen=True)
class ResidualTile:
    values: np.ndarray  # (6, 300) float32
    sensor_id: str
    band_index: int
    t_start: int

    def __post_init__(self):
        if self.values.shape != (TILE_ROWS, TILE_COLS):
            raise InvalidArgument(f"residual shape {self.values.shape} != ({TILE_ROWS}, {TILE_COLS})")
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgument("residual contains non-finite values")

    @property
    def key(self) -> str:
        return f"{self.sensor_id}/{self.band_index}/{self.t_start}"


class AnomalyModel:
    """Trained residual AAE; parameters are frozen after training."""

    def __init__(self, core: AaeModel):
        self._core = core
        self.trained = True

    @property
    def norm(self):
        return self._core.norm

    def encoder_tensors(self):
        return self._core.encoder_tensors()

    def extract(self, residuals: np.ndarray) -> np.ndarray:
        """(N, 6, 300) residuals -> (N, 50) anomaly features."""
        if not self.trained:
            raise InvalidState("anomaly model not trained")
        xn = self._core.norm.apply(center_residuals(residuals))
        f, _, _ = self._core.encode(xn)
        return f

    def reconstruction_losses(self, residuals: np.ndarray) -> np.ndarray:
        """Per-residual MSE through the frozen autoencoder (the R_la signal)."""
        xn = self._core.norm.apply(center_residuals(residuals))
        r, _ = reconstruction_errors(self._core, self._core.decoders[GLOBAL_DECODER], xn)
        return r

    @property
    def loss_trace(self):
        return self._core.loss_trace


def train_anomaly_model(residuals: Sequence[ResidualTile] | np.ndarray,
                        cfg: TrainConfig,
                        min_residuals: int = MIN_TRAIN_RESIDUALS) -> AnomalyModel:
    """Train the global residual AAE; weights are frozen afterwards."""
    if isinstance(residuals, np.ndarray):
        x = residuals
    else:
        x = np.stack([r.values for r in residuals]) if residuals else np.zeros((0, TILE_ROWS, TILE_COLS))
    if len(x) < min_residuals:
        raise InsufficientData(
            f"anomaly training needs >= {min_residuals} residual tiles, got {len(x)}")
    core = train_aae(center_residuals(x.astype(np.float32)), None, cfg, with_class_head=False)
    return AnomalyModel(core)


def extract(model: AnomalyModel, residual: np.ndarray) -> np.ndarray:
    """50-dim anomaly feature vector for one (6, 300) residual."""
    return model.extract(residual)[0]


@dataclass
class DriftStats:
    mu_rla: float
    sigma_rla: float
    drift_sigma: float = DRIFT_SIGMA
    window: deque = field(default_factory=lambda: deque(maxlen=256))
    calibrated: bool = False

    @classmethod
    def fit(cls, r_la_values: np.ndarray, drift_sigma: float = DRIFT_SIGMA) -> "DriftStats":
        if len(r_la_values) == 0:
            raise InvalidArgument("cannot calibrate drift stats on zero values")
        stats = cls(mu_rla=float(np.mean(r_la_values)), sigma_rla=float(np.std(r_la_values)),
                    drift_sigma=drift_sigma)
        stats.calibrated = True
        return stats


def drift_check(stats: DriftStats, r_la: float) -> bool:
    """True when the residual reconstruction loss exceeds mu + drift_sigma*sigma,
    meaning the anomaly model is seeing material it was not trained on."""
    if not stats.calibrated:
        raise InvalidState("drift stats not calibrated")
    stats.window.append(float(r_la))
    return r_la > stats.mu_rla + stats.drift_sigma * stats.sigma_rla
