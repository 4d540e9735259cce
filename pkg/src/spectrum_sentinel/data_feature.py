"""Data-feature module: globally-shared encoder with per-sensor decoders,
n-sigma threshold calibration, and the boolean anomaly score.

A tile is flagged when its reconstruction loss exceeds mu + n*sigma, either
discriminator loss leaves its [mu - n*sigma, mu + n*sigma] band, or the class
head disagrees with the band's expected occupant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .autoencoder import (
    GLOBAL_DECODER,
    AaeModel,
    Normalization,
    TrainConfig,
    disc_losses_per_sample,
    reconstruction_errors,
    train_aae,
    train_decoder_only,
)
from .errors import InsufficientData, InvalidArgument, InvalidConfig, MissingDecoder
from .simulate import Dataset, Tile

__all__ = [
    "DataFeatures", "Losses", "ThresholdBank", "TrainConfig",
    "train_global", "specialize_decoders", "calibrate", "score",
    "is_anomalous", "detect_batch", "label_subset", "extract_features",
    "save_model", "load_model",
]


@dataclass(frozen=True)
class DataFeatures:
    f_d: np.ndarray           # 50-dim continuous head
    class_probs: np.ndarray   # 8-dim simplex
    predicted_class: int


@dataclass(frozen=True)
class Losses:
    r_l: float
    d_lcont: float
    d_lcat: float
    predicted_class: int
    expected_class: int


@dataclass
class ThresholdBank:
    r_l: tuple[float, float]       # (mu, sigma)
    d_lcont: tuple[float, float]
    d_lcat: tuple[float, float]
    n: float = 2.0

    def __post_init__(self):
        if self.n <= 0:
            raise InvalidArgument("n must be > 0")
        for mu, sigma in (self.r_l, self.d_lcont, self.d_lcat):
            if sigma < 0:
                raise InvalidArgument("sigma must be >= 0")

    def to_json(self) -> dict:
        return {
            "r_l": {"mu": self.r_l[0], "sigma": self.r_l[1]},
            "d_lcont": {"mu": self.d_lcont[0], "sigma": self.d_lcont[1]},
            "d_lcat": {"mu": self.d_lcat[0], "sigma": self.d_lcat[1]},
            "n": self.n,
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "ThresholdBank":
        return cls(
            r_l=(doc["r_l"]["mu"], doc["r_l"]["sigma"]),
            d_lcont=(doc["d_lcont"]["mu"], doc["d_lcont"]["sigma"]),
            d_lcat=(doc["d_lcat"]["mu"], doc["d_lcat"]["sigma"]),
            n=doc["n"],
        )


@dataclass
class Detection:
    tile: Tile
    losses: Losses
    flagged: bool
    residual: np.ndarray | None  # (6, 300), only for flagged tiles


def _stack(tiles: Sequence[Tile]) -> np.ndarray:
    return np.stack([t.values for t in tiles])


def label_subset(dataset: Dataset, fraction: float = 0.2, seed: int = 0) -> list[int | None]:
    """Expected-class labels for a seeded fraction of the train tiles."""
    rng = np.random.default_rng(seed)
    labels: list[int | None] = [None] * len(dataset.train)
    n_label = max(1, int(round(fraction * len(dataset.train))))
    for i in rng.choice(len(dataset.train), size=n_label, replace=False):
        labels[i] = dataset.expected_class_of(dataset.train[i])
    return labels


def train_global(tiles: Sequence[Tile], labels: Sequence[int | None], cfg: TrainConfig) -> AaeModel:
    """Phase-1 training: one encoder, one shared decoder, both discriminators."""
    if not any(l is not None for l in labels):
        raise InvalidConfig("need at least one labeled tile for the semi-supervised phase")
    return train_aae(_stack(tiles), labels, cfg, with_class_head=True)


def specialize_decoders(
    model: AaeModel,
    tiles_by_sensor: Mapping[str, Sequence[Tile]],
    cfg: TrainConfig | None = None,
) -> AaeModel:
    """Clone the shared decoder per sensor and fine-tune it on that sensor's
    tiles only. Encoder weights are read-only throughout."""
    if not tiles_by_sensor:
        return model
    cfg = cfg or TrainConfig(epochs=20)
    rng = np.random.default_rng(cfg.seed)
    shared = model.decoders[GLOBAL_DECODER]
    for sensor_id in sorted(tiles_by_sensor):
        params = shared.copy()
        xn = model.norm.apply(_stack(tiles_by_sensor[sensor_id]))
        model.decoders[sensor_id] = train_decoder_only(model, params, xn, cfg, rng)
    model.specialized = True
    return model


def _batched_losses(model: AaeModel, tiles: Sequence[Tile], batch_size: int = 64):
    """Per-tile (r_l, d_lcont, d_lcat, predicted, probs, residual) grouped by sensor."""
    out_r = np.zeros(len(tiles))
    out_cont = np.zeros(len(tiles))
    out_cat = np.zeros(len(tiles))
    out_cls = np.zeros(len(tiles), dtype=int)
    residuals = [None] * len(tiles)
    by_sensor: dict[str, list[int]] = {}
    for i, t in enumerate(tiles):
        by_sensor.setdefault(t.sensor_id, []).append(i)
    for sensor_id, idxs in by_sensor.items():
        params = model.decoder_params_for(sensor_id)
        for lo in range(0, len(idxs), batch_size):
            sel = idxs[lo:lo + batch_size]
            xn = model.norm.apply(np.stack([tiles[i].values for i in sel]))
            f, probs, _ = model.encode(xn)
            z = model.latent(f, probs)
            xhat, _ = model.decode(params, z)
            res = xn - xhat
            out_r[sel] = np.mean(np.square(res.astype(np.float64)), axis=(1, 2))
            out_cont[sel] = disc_losses_per_sample(model.disc_cont, model.disc_cont_p, f[:, :5])
            out_cat[sel] = disc_losses_per_sample(model.disc_cat, model.disc_cat_p, probs)
            out_cls[sel] = probs.argmax(axis=1)
            for j, i in enumerate(sel):
                residuals[i] = res[j].astype(np.float32)
    return out_r, out_cont, out_cat, out_cls, residuals


def _mu_sigma(values: np.ndarray) -> tuple[float, float]:
    # identical inputs must yield exactly zero spread, not rounding residue
    sigma = 0.0 if np.ptp(values) == 0 else float(values.std())
    return float(values.mean()), sigma


def calibrate(model: AaeModel, train_tiles: Sequence[Tile], n: float = 2.0) -> ThresholdBank:
    """Population mean/std of each loss channel over the training tiles."""
    if len(train_tiles) < 30:
        raise InsufficientData(f"calibration needs >= 30 tiles, got {len(train_tiles)}")
    r, cont, cat, _, _ = _batched_losses(model, train_tiles)
    return ThresholdBank(r_l=_mu_sigma(r), d_lcont=_mu_sigma(cont), d_lcat=_mu_sigma(cat), n=n)


def score(model: AaeModel, tile: Tile, expected_class: int) -> Losses:
    r, cont, cat, cls, _ = _batched_losses(model, [tile])
    return Losses(r_l=float(r[0]), d_lcont=float(cont[0]), d_lcat=float(cat[0]),
                  predicted_class=int(cls[0]), expected_class=expected_class)


def extract_features(model: AaeModel, tiles: Sequence[Tile], batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """(f_d, class_probs) for a batch of tiles, in tile order."""
    xn = model.norm.apply(_stack(tiles))
    fs, ps = [], []
    for lo in range(0, len(tiles), batch_size):
        f, probs, _ = model.encode(xn[lo:lo + batch_size])
        fs.append(f)
        ps.append(probs)
    return np.vstack(fs), np.vstack(ps)


# -- the four A-score predicates, unit-testable in isolation -----------------

def reconstruction_exceeds(losses: Losses, bank: ThresholdBank) -> bool:
    mu, sigma = bank.r_l
    return losses.r_l > mu + bank.n * sigma


def cont_out_of_band(losses: Losses, bank: ThresholdBank) -> bool:
    mu, sigma = bank.d_lcont
    return not (mu - bank.n * sigma <= losses.d_lcont <= mu + bank.n * sigma)


def cat_out_of_band(losses: Losses, bank: ThresholdBank) -> bool:
    mu, sigma = bank.d_lcat
    return not (mu - bank.n * sigma <= losses.d_lcat <= mu + bank.n * sigma)


def class_mismatch(losses: Losses) -> bool:
    return losses.predicted_class != losses.expected_class


def is_anomalous(losses: Losses, bank: ThresholdBank) -> bool:
    return (
        reconstruction_exceeds(losses, bank)
        or cont_out_of_band(losses, bank)
        or cat_out_of_band(losses, bank)
        or class_mismatch(losses)
    )


def detect_batch(
    model: AaeModel,
    bank: ThresholdBank,
    tiles: Sequence[Tile],
    expected_classes: Mapping[tuple[str, int], int],
) -> list[Detection]:
    """Score + threshold every tile; residuals are kept only for flagged ones."""
    r, cont, cat, cls, residuals = _batched_losses(model, tiles)
    out = []
    for i, t in enumerate(tiles):
        losses = Losses(r_l=float(r[i]), d_lcont=float(cont[i]), d_lcat=float(cat[i]),
                        predicted_class=int(cls[i]),
                        expected_class=expected_classes[(t.sensor_id, t.band_index)])
        flag = is_anomalous(losses, bank)
        out.append(Detection(tile=t, losses=losses, flagged=flag,
                             residual=residuals[i] if flag else None))
    return out


# -- snapshots ----------------------------------------------------------------

def save_model(model: AaeModel, params_path, manifest_path) -> None:
    tensors: list[np.ndarray] = []
    layout: dict[str, tuple[int, int]] = {}

    def push(name: str, params: nn.Params):
        layout[name] = (len(tensors), len(params.tensors))
        tensors.extend(params.tensors)

    push("trunk", model.trunk_p)
    push("feat_head", model.feat_p)
    if model.cls_p is not None:
        push("cls_head", model.cls_p)
    push("disc_cont", model.disc_cont_p)
    if model.disc_cat_p is not None:
        push("disc_cat", model.disc_cat_p)
    for key in sorted(model.decoders):
        push(f"decoder/{key}", model.decoders[key])
    nn.save_tensors(params_path, tensors)
    manifest = {
        "with_class_head": model.with_class_head,
        "specialized": model.specialized,
        "norm": {"lo_db": model.norm.lo_db, "hi_db": model.norm.hi_db},
        "layout": {k: list(v) for k, v in layout.items()},
        "decoders": {k.split("/", 1)[1]: list(v) for k, v in layout.items() if k.startswith("decoder/")},
    }
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_model(params_path, manifest_path) -> AaeModel:
    with open(manifest_path) as f:
        manifest = json.load(f)
    tensors = nn.load_tensors(params_path)
    model = AaeModel(manifest["with_class_head"], np.random.default_rng(0))
    model.norm = Normalization(manifest["norm"]["lo_db"], manifest["norm"]["hi_db"])
    model.specialized = manifest["specialized"]

    def pull(name: str) -> nn.Params:
        start, count = manifest["layout"][name]
        return nn.Params([t.copy() for t in tensors[start:start + count]])

    model.trunk_p = pull("trunk")
    model.feat_p = pull("feat_head")
    if model.with_class_head:
        model.cls_p = pull("cls_head")
        model.disc_cat_p = pull("disc_cat")
    model.disc_cont_p = pull("disc_cont")
    model.decoders = {key: pull(f"decoder/{key}") for key in manifest["decoders"]}
    return model
