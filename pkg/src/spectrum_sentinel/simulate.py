"""Synthetic multi-sensor PSD spectrograms with ground-truth anomaly injection,
6x300 tiling, and the binary PSD dump container.

A spectrogram is an (n_frames, 300) float32 matrix of dB values for one
(sensor, band) stream. The dataset builder renders one stream per sensor/band
pair, injects anomalies into test-period tiles at requested SNRs, and keeps
train/test periods disjoint in time.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    DataError,
    FormatError,
    InjectionInfeasible,
    InvalidArgument,
    InvalidConfig,
)

TILE_ROWS = 6
TILE_COLS = 300
N_CLASSES = 8
NOISE_STD_DB = 1.0  # std of the background noise around the floor, in dB
SNR_MIN_DB = -20.0
SNR_MAX_DB = 20.0


class AnomalyKind(enum.Enum):
    SCONT = "scont"          # continuous narrowband carrier, random bandwidth
    RANDPULSES = "randpulses"  # >=3 disjoint on/off pulse rectangles
    WPULSE = "wpulse"        # full-width pulses on a subset of frames


@dataclass(frozen=True)
class Carrier:
    center_bin: int
    bandwidth_bins: int
    power_db: float
    duty_cycle: float

    def bins(self) -> range:
        lo = self.center_bin - self.bandwidth_bins // 2
        return range(lo, lo + self.bandwidth_bins)


@dataclass(frozen=True)
class BandSpec:
    freq_lo: int
    freq_hi: int
    expected_class: int
    carriers: tuple[Carrier, ...] = ()

    def __post_init__(self):
        if not (0 <= self.freq_lo < self.freq_hi <= TILE_COLS):
            raise InvalidArgument(f"band range [{self.freq_lo}, {self.freq_hi}) outside [0, {TILE_COLS})")
        if not 0 <= self.expected_class < N_CLASSES:
            raise InvalidArgument(f"expected_class {self.expected_class} outside [0, {N_CLASSES})")
        for c in self.carriers:
            if c.bandwidth_bins < 1:
                raise InvalidArgument("carrier bandwidth must be >= 1 bin")
            if not 0.0 <= c.duty_cycle <= 1.0:
                raise InvalidArgument("carrier duty cycle must lie in [0, 1]")
            b = c.bins()
            if b.start < 0 or b.stop > TILE_COLS:
                raise InvalidArgument(f"carrier bins [{b.start}, {b.stop}) outside [0, {TILE_COLS})")


@dataclass(frozen=True)
class SensorProfile:
    sensor_id: str
    noise_floor_db: float
    bands: tuple[BandSpec, ...]
    seed: int

    def __post_init__(self):
        if not self.bands:
            raise InvalidArgument("profile needs at least one band")
        if not np.isfinite(self.noise_floor_db):
            raise InvalidArgument("noise floor must be finite")


@dataclass(frozen=True)
class Tile:
    values: np.ndarray  # (6, 300) float32 dB
    sensor_id: str
    band_index: int
    t_start: int

    def __post_init__(self):
        if self.values.shape != (TILE_ROWS, TILE_COLS):
            raise InvalidArgument(f"tile shape {self.values.shape} != ({TILE_ROWS}, {TILE_COLS})")
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgument("tile contains non-finite values")

    @property
    def key(self) -> str:
        return f"{self.sensor_id}/{self.band_index}/{self.t_start}"


@dataclass(frozen=True)
class GroundTruth:
    is_anomalous: bool
    kind: AnomalyKind | None
    snr_db: float
    mask: np.ndarray  # boolean, same shape as the tile/spectrogram it refers to

    def __post_init__(self):
        if self.is_anomalous != (self.kind is not None):
            raise InvalidArgument("kind must be present iff is_anomalous")
        if self.is_anomalous != bool(self.mask.any()):
            raise InvalidArgument("mask must be nonzero iff is_anomalous")


# ---------------------------------------------------------------------------
# Background generation
# ---------------------------------------------------------------------------

def generate_background(profile: SensorProfile, n_frames: int) -> np.ndarray:
    """Render the profile's carriers over a noisy floor.

    Carrier cells sit power_db above the floor with 1 dB Gaussian shaping and
    are active per-frame with probability duty_cycle; everything else is
    floor + N(0, 1 dB). Deterministic for a fixed profile seed.
    """
    if n_frames < TILE_ROWS:
        raise InvalidArgument(f"n_frames must be >= {TILE_ROWS}, got {n_frames}")
    rng = np.random.default_rng(profile.seed)
    spec = profile.noise_floor_db + rng.normal(0.0, NOISE_STD_DB, size=(n_frames, TILE_COLS))
    for band in profile.bands:
        for carrier in band.carriers:
            bins = carrier.bins()
            active = rng.random(n_frames) < carrier.duty_cycle
            n_active = int(active.sum())
            if n_active == 0:
                continue
            level = profile.noise_floor_db + carrier.power_db
            spec[np.flatnonzero(active)[:, None], np.arange(bins.start, bins.stop)[None, :]] = (
                level + rng.normal(0.0, NOISE_STD_DB, size=(n_active, len(bins)))
            )
    return spec.astype(np.float32)


def carrier_bins(profile: SensorProfile) -> np.ndarray:
    """Boolean mask over the 300 bins that any carrier of the profile occupies."""
    occupied = np.zeros(TILE_COLS, dtype=bool)
    for band in profile.bands:
        for carrier in band.carriers:
            b = carrier.bins()
            occupied[b.start:b.stop] = True
    return occupied


# ---------------------------------------------------------------------------
# Anomaly injection
# ---------------------------------------------------------------------------

def _db_to_lin(v):
    return np.power(10.0, np.asarray(v, dtype=np.float64) / 10.0)


def measured_snr_db(spec: np.ndarray, mask: np.ndarray) -> float:
    """Linear-power ratio of masked over unmasked cells, in dB."""
    masked = _db_to_lin(spec[mask]).mean()
    clean = _db_to_lin(spec[~mask]).mean()
    return float(10.0 * np.log10(masked / clean))


def inject_anomaly(
    spec: np.ndarray,
    kind: AnomalyKind,
    snr_db: float,
    seed: int,
    occupied_bins: np.ndarray | None = None,
) -> tuple[np.ndarray, GroundTruth]:
    """Overwrite a region of the spectrogram with an anomalous signal.

    The injected level is chosen so the mean linear power of masked cells over
    the mean linear power of the remaining cells equals snr_db. occupied_bins
    marks carrier bins that scont must avoid when picking its center.
    """
    if not SNR_MIN_DB <= snr_db <= SNR_MAX_DB:
        raise InvalidArgument(f"snr_db {snr_db} outside [{SNR_MIN_DB}, {SNR_MAX_DB}]")
    n_frames = spec.shape[0]
    if n_frames < TILE_ROWS or spec.shape[1] != TILE_COLS:
        raise InvalidArgument(f"spectrogram shape {spec.shape} too small to inject into")
    rng = np.random.default_rng(seed)
    mask = np.zeros_like(spec, dtype=bool)

    if kind is AnomalyKind.SCONT:
        bw = int(rng.integers(8, 41))
        occupied = occupied_bins if occupied_bins is not None else np.zeros(TILE_COLS, dtype=bool)
        half = bw // 2
        candidates = [
            c for c in range(half, TILE_COLS - (bw - half) + 1)
            if not occupied[c]
        ]
        if not candidates:
            raise InjectionInfeasible("no free bins available for a continuous carrier")
        center = int(candidates[rng.integers(0, len(candidates))])
        mask[:, center - half:center - half + bw] = True
    elif kind is AnomalyKind.RANDPULSES:
        n_pulses = int(rng.integers(3, 7))
        rects: list[tuple[int, int, int, int]] = []
        attempts = 0
        while len(rects) < n_pulses and attempts < 500:
            attempts += 1
            th = int(rng.integers(1, max(2, n_frames // 2) + 1))
            t0 = int(rng.integers(0, n_frames - th + 1))
            fw = int(rng.integers(6, 31))
            f0 = int(rng.integers(0, TILE_COLS - fw + 1))
            if any(t0 < rt1 and rt0 < t0 + th and f0 < rf1 and rf0 < f0 + fw
                   for rt0, rt1, rf0, rf1 in rects):
                continue
            rects.append((t0, t0 + th, f0, f0 + fw))
            mask[t0:t0 + th, f0:f0 + fw] = True
        if len(rects) < 3:
            raise InjectionInfeasible("could not place 3 disjoint pulses")
    elif kind is AnomalyKind.WPULSE:
        n_rows = int(rng.integers(1, max(2, n_frames // 2) + 1))
        rows = rng.choice(n_frames, size=n_rows, replace=False)
        mask[np.sort(rows), :] = True
    else:
        raise InvalidArgument(f"unknown anomaly kind {kind!r}")

    reference_lin = _db_to_lin(spec[~mask]).mean()
    level_db = 10.0 * np.log10(reference_lin * 10.0 ** (snr_db / 10.0))
    out = spec.copy()
    out[mask] = (level_db + rng.normal(0.0, 0.25, size=int(mask.sum()))).astype(spec.dtype)
    truth = GroundTruth(is_anomalous=True, kind=kind, snr_db=float(snr_db), mask=mask)
    return out, truth


def clean_truth(shape=(TILE_ROWS, TILE_COLS)) -> GroundTruth:
    return GroundTruth(is_anomalous=False, kind=None, snr_db=0.0, mask=np.zeros(shape, dtype=bool))


# ---------------------------------------------------------------------------
# Tiling
# ---------------------------------------------------------------------------

def tile(spec: np.ndarray, sensor_id: str, band_index: int, t_offset: int = 0) -> list[Tile]:
    """Cut non-overlapping consecutive 6-frame windows; the trailing remainder
    under 6 frames is dropped."""
    tiles = []
    n_full = spec.shape[0] // TILE_ROWS
    for i in range(n_full):
        window = np.ascontiguousarray(spec[i * TILE_ROWS:(i + 1) * TILE_ROWS], dtype=np.float32)
        tiles.append(Tile(values=window, sensor_id=sensor_id, band_index=band_index,
                          t_start=t_offset + i * TILE_ROWS))
    return tiles


# ---------------------------------------------------------------------------
# PSD dump container
# ---------------------------------------------------------------------------

PSDT_MAGIC = b"PSDT"
RSDT_MAGIC = b"RSDT"  # residual archives reuse the container with this magic
_DUMP_VERSION = 1
_HEADER = struct.Struct("<4sHI")
_RECORD_META = struct.Struct("<QHI")
_RECORD_PAYLOAD = TILE_ROWS * TILE_COLS * 4


def sensor_hash(sensor_id: str) -> int:
    """Stable FNV-1a 64-bit hash of the sensor identifier."""
    h = 0xCBF29CE484222325
    for byte in sensor_id.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def write_dump(path, tiles: Sequence[Tile], magic: bytes = PSDT_MAGIC) -> None:
    with open(path, "wb") as f:
        f.write(_HEADER.pack(magic, _DUMP_VERSION, len(tiles)))
        for t in tiles:
            f.write(_RECORD_META.pack(sensor_hash(t.sensor_id), t.band_index, t.t_start))
            f.write(np.ascontiguousarray(t.values, dtype="<f4").tobytes())


def ingest_dump(path, sensor_names: Mapping[int, str] | None = None,
                magic: bytes = PSDT_MAGIC) -> list[Tile]:
    """Parse a PSD dump; malformed records are rejected with their position."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise FormatError(f"truncated header: file holds {len(blob)} bytes at offset 0")
    got_magic, version, count = _HEADER.unpack_from(blob, 0)
    if got_magic != magic:
        raise FormatError(f"bad magic {got_magic!r} at offset 0 (expected {magic!r})")
    if version != _DUMP_VERSION:
        raise FormatError(f"unsupported dump version {version}")
    off = _HEADER.size
    record_size = _RECORD_META.size + _RECORD_PAYLOAD
    tiles = []
    for rec in range(count):
        if off + record_size > len(blob):
            raise FormatError(f"truncated payload in record {rec + 1} at byte offset {off}")
        shash, band_index, t_start = _RECORD_META.unpack_from(blob, off)
        off += _RECORD_META.size
        values = np.frombuffer(blob, dtype="<f4", count=TILE_ROWS * TILE_COLS, offset=off)
        off += _RECORD_PAYLOAD
        if not np.all(np.isfinite(values)):
            raise DataError(f"non-finite value in record {rec + 1}")
        sensor_id = sensor_names.get(shash) if sensor_names else None
        if sensor_id is None:
            sensor_id = f"s{shash:016x}"
        tiles.append(Tile(values=values.reshape(TILE_ROWS, TILE_COLS).astype(np.float32),
                          sensor_id=sensor_id, band_index=band_index, t_start=t_start))
    return tiles


# ---------------------------------------------------------------------------
# Dataset construction
# ---------------------------------------------------------------------------

# Eight distinguishable per-class carrier layouts: (center, bandwidth, power_db,
# duty). Offsets are jittered per sensor so decoders have something
# sensor-specific to learn while the class pattern stays recognizable.
_CLASS_TEMPLATES: dict[int, tuple[tuple[int, int, float, float], ...]] = {
    0: ((60, 12, 18.0, 1.0), (150, 12, 16.0, 1.0), (240, 12, 18.0, 1.0)),
    1: ((75, 60, 15.0, 1.0),),
    2: ((225, 60, 15.0, 1.0),),
    3: ((90, 24, 17.0, 1.0), (210, 24, 17.0, 1.0)),
    4: ((40, 8, 19.0, 1.0), (110, 8, 19.0, 1.0), (180, 8, 19.0, 1.0), (250, 8, 19.0, 1.0)),
    5: ((150, 10, 21.0, 1.0),),
    6: ((30, 40, 14.0, 1.0), (270, 40, 14.0, 1.0)),
    7: ((120, 6, 20.0, 1.0), (135, 6, 20.0, 1.0), (150, 6, 20.0, 1.0), (165, 6, 20.0, 1.0), (180, 6, 20.0, 1.0)),
}


def band_for_class(cls: int, sensor_offset: int = 0, power_jitter_db: float = 0.0,
                   extra_carrier: Carrier | None = None) -> BandSpec:
    carriers = []
    for center, bw, power, duty in _CLASS_TEMPLATES[cls % N_CLASSES]:
        c = int(np.clip(center + sensor_offset, bw // 2, TILE_COLS - bw + bw // 2 - 1))
        carriers.append(Carrier(c, bw, power + power_jitter_db, duty))
    if extra_carrier is not None:
        carriers.append(extra_carrier)
    los = [c.bins().start for c in carriers]
    his = [c.bins().stop for c in carriers]
    return BandSpec(freq_lo=max(0, min(los) - 4), freq_hi=min(TILE_COLS, max(his) + 4),
                    expected_class=cls % N_CLASSES, carriers=tuple(carriers))


@dataclass(frozen=True)
class DatasetConfig:
    """Desk-scale dataset knobs. Defaults mirror a 1:7 train:test frame ratio
    over 4 sensors and the 8 band classes; tests shrink everything."""
    sensors: tuple[str, ...] = ("sensor-es", "sensor-dk", "sensor-ch", "sensor-si")
    classes: tuple[int, ...] = tuple(range(N_CLASSES))
    train_tiles_per_band: int = 504
    test_tiles_per_band: int = 3528
    anomaly_rate: float = 0.5
    snr_grid_db: tuple[float, ...] = (-20.0, -10.0, 0.0, 10.0, 20.0)
    kinds: tuple[AnomalyKind, ...] = (AnomalyKind.SCONT, AnomalyKind.RANDPULSES, AnomalyKind.WPULSE)
    noise_floor_db: float = -90.0
    gap_tiles: int = 2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.anomaly_rate <= 1.0:
            raise InvalidConfig("anomaly_rate must lie in [0, 1]")
        if self.train_tiles_per_band < 1 or self.test_tiles_per_band < 1:
            raise InvalidConfig("tile counts must be positive")
        if self.gap_tiles < 0:
            raise InvalidConfig("train period would overlap the test period")
        for s in self.snr_grid_db:
            if not SNR_MIN_DB <= s <= SNR_MAX_DB:
                raise InvalidConfig(f"snr {s} outside [{SNR_MIN_DB}, {SNR_MAX_DB}]")

    @classmethod
    def from_json(cls, doc: Mapping) -> "DatasetConfig":
        kwargs = dict(doc)
        if "sensors" in kwargs:
            kwargs["sensors"] = tuple(kwargs["sensors"])
        if "classes" in kwargs:
            kwargs["classes"] = tuple(kwargs["classes"])
        if "snr_grid_db" in kwargs:
            kwargs["snr_grid_db"] = tuple(float(s) for s in kwargs["snr_grid_db"])
        if "kinds" in kwargs:
            kwargs["kinds"] = tuple(AnomalyKind(k) for k in kwargs["kinds"])
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise InvalidConfig(str(e)) from None

    def to_json(self) -> dict:
        return {
            "sensors": list(self.sensors),
            "classes": list(self.classes),
            "train_tiles_per_band": self.train_tiles_per_band,
            "test_tiles_per_band": self.test_tiles_per_band,
            "anomaly_rate": self.anomaly_rate,
            "snr_grid_db": list(self.snr_grid_db),
            "kinds": [k.value for k in self.kinds],
            "noise_floor_db": self.noise_floor_db,
            "gap_tiles": self.gap_tiles,
            "seed": self.seed,
        }


@dataclass
class Dataset:
    train: list[Tile]
    test: list[Tile]
    truth: list[GroundTruth]  # aligned with test
    expected_classes: dict[tuple[str, int], int]
    config: DatasetConfig

    def expected_class_of(self, t: Tile) -> int:
        return self.expected_classes[(t.sensor_id, t.band_index)]


def _subseed(master: int, *parts: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=master, spawn_key=tuple(parts))


def build_profile(config: DatasetConfig, sensor_idx: int, band_index: int,
                  extra_carrier: Carrier | None = None) -> SensorProfile:
    cls = config.classes[band_index % len(config.classes)]
    offset = int((sensor_hash(config.sensors[sensor_idx]) >> 3) % 11) - 5
    jitter = float((sensor_hash(config.sensors[sensor_idx]) % 5) - 2)
    band = band_for_class(cls, sensor_offset=offset, power_jitter_db=jitter,
                          extra_carrier=extra_carrier)
    seed = int(_subseed(config.seed, 1, sensor_idx, band_index).generate_state(1)[0])
    return SensorProfile(sensor_id=config.sensors[sensor_idx],
                         noise_floor_db=config.noise_floor_db,
                         bands=(band,), seed=seed)


def build_dataset(config: DatasetConfig) -> Dataset:
    """Anomaly-free train tiles plus a clean/injected test mix, time-disjoint."""
    train: list[Tile] = []
    test: list[Tile] = []
    truth: list[GroundTruth] = []
    expected: dict[tuple[str, int], int] = {}
    n_bands = len(config.classes)
    for si, sensor in enumerate(config.sensors):
        for bi in range(n_bands):
            profile = build_profile(config, si, bi)
            expected[(sensor, bi)] = profile.bands[0].expected_class
            total_tiles = config.train_tiles_per_band + config.gap_tiles + config.test_tiles_per_band
            spec = generate_background(profile, total_tiles * TILE_ROWS)
            train_end = config.train_tiles_per_band * TILE_ROWS
            test_start = train_end + config.gap_tiles * TILE_ROWS
            train.extend(tile(spec[:train_end], sensor, bi))
            test_tiles = tile(spec[test_start:], sensor, bi, t_offset=test_start)

            inject_rng = np.random.default_rng(_subseed(config.seed, 2, si, bi))
            occupied = carrier_bins(profile)
            mix = [(kind, snr) for kind in config.kinds for snr in config.snr_grid_db]
            for t in test_tiles:
                if mix and inject_rng.random() < config.anomaly_rate:
                    kind, snr = mix[int(inject_rng.integers(0, len(mix)))]
                    seed = int(inject_rng.integers(0, 2 ** 63))
                    values, gt = inject_anomaly(t.values, kind, snr, seed, occupied_bins=occupied)
                    test.append(replace(t, values=values))
                    truth.append(gt)
                else:
                    test.append(t)
                    truth.append(clean_truth())
    return Dataset(train=train, test=test, truth=truth, expected_classes=expected, config=config)
