"""Simulator tests: background statistics, SNR calibration, tiling, dump io."""

import numpy as np
import pytest

from spectrum_sentinel import simulate as sim
from spectrum_sentinel.errors import (
    DataError,
    FormatError,
    InvalidArgument,
    InvalidConfig,
)


def quiet_profile(seed=1, floor=-90.0):
    band = sim.BandSpec(freq_lo=0, freq_hi=300, expected_class=0, carriers=())
    return sim.SensorProfile("quiet", floor, (band,), seed)


def carrier_profile(power=20.0, duty=1.0, seed=3):
    band = sim.BandSpec(0, 300, 0, (sim.Carrier(150, 20, power, duty),))
    return sim.SensorProfile("carrier", -90.0, (band,), seed)


class TestBackground:
    def test_zero_carriers_within_six_sigma(self):
        spec = sim.generate_background(quiet_profile(), 6)
        assert spec.shape == (6, 300)
        assert np.all(np.abs(spec - (-90.0)) <= 6 * sim.NOISE_STD_DB)

    def test_same_profile_and_seed_bit_identical(self):
        a = sim.generate_background(carrier_profile(), 24)
        b = sim.generate_background(carrier_profile(), 24)
        assert np.array_equal(a, b)

    def test_carrier_twenty_db_above_floor(self):
        profile = carrier_profile(power=20.0, duty=1.0)
        spec = sim.generate_background(profile, 60)
        bins = profile.bands[0].carriers[0].bins()
        on = spec[:, bins.start:bins.stop].mean()
        off = np.delete(spec, np.arange(bins.start, bins.stop), axis=1).mean()
        assert 18.0 <= on - off <= 22.0

    def test_duty_cycle_controls_active_fraction(self):
        profile = carrier_profile(power=30.0, duty=0.5, seed=11)
        spec = sim.generate_background(profile, 600)
        bins = profile.bands[0].carriers[0].bins()
        hot_rows = (spec[:, bins.start:bins.stop].mean(axis=1) > -80.0).mean()
        assert 0.4 <= hot_rows <= 0.6

    def test_too_few_frames_rejected(self):
        with pytest.raises(InvalidArgument):
            sim.generate_background(quiet_profile(), 5)


class TestInjection:
    def test_wpulse_mask_rows_all_or_nothing(self):
        spec = sim.generate_background(quiet_profile(), 6)
        for snr in (-20.0, 0.0, 20.0):
            _, truth = sim.inject_anomaly(spec, sim.AnomalyKind.WPULSE, snr, seed=5)
            per_row = truth.mask.sum(axis=1)
            assert np.all((per_row == 0) | (per_row == 300))
            assert truth.mask.any()

    def test_scont_power_ratio_near_unity_at_0db(self):
        spec = sim.generate_background(quiet_profile(seed=2), 6)
        out, truth = sim.inject_anomaly(spec, sim.AnomalyKind.SCONT, 0.0, seed=9)
        ratio = 10 ** (sim.measured_snr_db(out, truth.mask) / 10.0)
        assert 0.9 <= ratio <= 1.1

    @pytest.mark.parametrize("kind", list(sim.AnomalyKind))
    @pytest.mark.parametrize("snr", [-20.0, -10.0, 0.0, 10.0, 20.0])
    def test_power_calibration_within_half_db(self, kind, snr):
        spec = sim.generate_background(carrier_profile(seed=7), 12)
        occupied = sim.carrier_bins(carrier_profile(seed=7))
        out, truth = sim.inject_anomaly(spec, kind, snr, seed=21, occupied_bins=occupied)
        assert abs(sim.measured_snr_db(out, truth.mask) - snr) <= 0.5

    def test_randpulses_has_three_disjoint_regions(self):
        spec = sim.generate_background(quiet_profile(seed=4), 12)
        _, truth = sim.inject_anomaly(spec, sim.AnomalyKind.RANDPULSES, 10.0, seed=13)
        from scipy import ndimage
        labeled, n = ndimage.label(truth.mask)
        assert n >= 3
        # every component is a filled rectangle
        for comp in range(1, n + 1):
            rows, cols = np.where(labeled == comp)
            area = (rows.max() - rows.min() + 1) * (cols.max() - cols.min() + 1)
            assert area == len(rows)

    def test_mask_soundness_changes_only_inside_mask(self):
        spec = sim.generate_background(quiet_profile(seed=8), 6)
        out, truth = sim.inject_anomaly(spec, sim.AnomalyKind.SCONT, 10.0, seed=2)
        changed = out != spec
        assert np.all(changed <= truth.mask)

    def test_scont_infeasible_when_everything_occupied(self):
        spec = sim.generate_background(quiet_profile(seed=1), 6)
        occupied = np.ones(300, dtype=bool)
        with pytest.raises(sim.InjectionInfeasible):
            sim.inject_anomaly(spec, sim.AnomalyKind.SCONT, 0.0, seed=1, occupied_bins=occupied)

    def test_snr_out_of_range_rejected(self):
        spec = sim.generate_background(quiet_profile(), 6)
        with pytest.raises(InvalidArgument):
            sim.inject_anomaly(spec, sim.AnomalyKind.WPULSE, 25.0, seed=0)

    def test_truth_invariants(self):
        with pytest.raises(InvalidArgument):
            sim.GroundTruth(True, None, 0.0, np.ones((6, 300), dtype=bool))
        with pytest.raises(InvalidArgument):
            sim.GroundTruth(True, sim.AnomalyKind.WPULSE, 0.0, np.zeros((6, 300), dtype=bool))


class TestTiling:
    def test_twelve_frames_two_tiles(self):
        spec = sim.generate_background(quiet_profile(), 12)
        tiles = sim.tile(spec, "quiet", 0)
        assert [t.t_start for t in tiles] == [0, 6]
        assert np.array_equal(tiles[0].values, spec[:6])
        assert np.array_equal(tiles[1].values, spec[6:12])

    def test_seventeen_frames_drops_remainder(self):
        spec = sim.generate_background(quiet_profile(), 17)
        tiles = sim.tile(spec, "quiet", 0)
        assert len(tiles) == 2

    def test_six_frames_identity(self):
        spec = sim.generate_background(quiet_profile(), 6)
        tiles = sim.tile(spec, "quiet", 3)
        assert len(tiles) == 1
        assert np.array_equal(tiles[0].values, spec)
        assert tiles[0].band_index == 3

    def test_tiling_partitions_source(self):
        spec = sim.generate_background(carrier_profile(seed=5), 31)
        tiles = sim.tile(spec, "carrier", 0)
        rebuilt = np.vstack([t.values for t in tiles])
        assert np.array_equal(rebuilt, spec[: len(tiles) * 6])


class TestDump:
    def test_roundtrip_bit_equal(self, tmp_path):
        spec = sim.generate_background(carrier_profile(seed=6), 6)
        tiles = sim.tile(spec, "carrier", 2)
        path = tmp_path / "one.psdt"
        sim.write_dump(path, tiles)
        back = sim.ingest_dump(path, sensor_names={sim.sensor_hash("carrier"): "carrier"})
        assert len(back) == 1
        assert np.array_equal(back[0].values, tiles[0].values)
        assert back[0].sensor_id == "carrier"
        assert back[0].band_index == 2
        assert back[0].t_start == 0

    def test_truncated_payload_names_offset(self, tmp_path):
        spec = sim.generate_background(quiet_profile(), 6)
        tiles = sim.tile(spec, "quiet", 0)
        path = tmp_path / "trunc.psdt"
        sim.write_dump(path, tiles)
        data = path.read_bytes()
        path.write_bytes(data[:-100])
        with pytest.raises(FormatError, match="byte offset"):
            sim.ingest_dump(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.psdt"
        path.write_bytes(b"XXXX" + b"\x00" * 12)
        with pytest.raises(FormatError, match="magic"):
            sim.ingest_dump(path)

    def test_nan_names_record_two(self, tmp_path):
        spec = sim.generate_background(quiet_profile(), 12)
        tiles = sim.tile(spec, "quiet", 0)
        path = tmp_path / "nan.psdt"
        sim.write_dump(path, tiles)
        data = bytearray(path.read_bytes())
        # poison the first float of the second record's payload
        second_payload = 10 + (14 + 7200) + 14
        data[second_payload:second_payload + 4] = np.float32("nan").tobytes()
        path.write_bytes(bytes(data))
        with pytest.raises(DataError, match="record 2"):
            sim.ingest_dump(path)


class TestDataset:
    def small_config(self, **kw):
        defaults = dict(
            sensors=("a", "b"),
            classes=(0, 1),
            train_tiles_per_band=4,
            test_tiles_per_band=8,
            anomaly_rate=0.5,
            snr_grid_db=(-20.0, 0.0, 20.0),
            seed=5,
        )
        defaults.update(kw)
        return sim.DatasetConfig(**defaults)

    def test_train_test_time_disjoint(self):
        ds = sim.build_dataset(self.small_config())
        for sensor in ("a", "b"):
            for band in (0, 1):
                train_ts = {t.t_start for t in ds.train if t.sensor_id == sensor and t.band_index == band}
                test_ts = {t.t_start for t in ds.test if t.sensor_id == sensor and t.band_index == band}
                assert train_ts.isdisjoint(test_ts)
                assert max(train_ts) < min(test_ts)

    def test_zero_anomaly_rate_all_clean(self):
        ds = sim.build_dataset(self.small_config(anomaly_rate=0.0))
        assert all(not g.is_anomalous for g in ds.truth)

    def test_full_snr_grid_covered(self):
        cfg = self.small_config(
            snr_grid_db=(-20.0, -10.0, 0.0, 10.0, 20.0),
            test_tiles_per_band=40,
            anomaly_rate=0.9,
        )
        ds = sim.build_dataset(cfg)
        seen = {g.snr_db for g in ds.truth if g.is_anomalous}
        assert seen == {-20.0, -10.0, 0.0, 10.0, 20.0}

    def test_determinism(self):
        a = sim.build_dataset(self.small_config())
        b = sim.build_dataset(self.small_config())
        assert len(a.train) == len(b.train)
        for ta, tb in zip(a.train + a.test, b.train + b.test):
            assert np.array_equal(ta.values, tb.values)
        for ga, gb in zip(a.truth, b.truth):
            assert ga.is_anomalous == gb.is_anomalous
            assert np.array_equal(ga.mask, gb.mask)

    def test_measured_snr_within_half_db_for_injected(self):
        ds = sim.build_dataset(self.small_config(test_tiles_per_band=12))
        checked = 0
        for t, g in zip(ds.test, ds.truth):
            if g.is_anomalous:
                assert abs(sim.measured_snr_db(t.values, g.mask) - g.snr_db) <= 0.5
                checked += 1
        assert checked > 0

    def test_overlapping_periods_rejected(self):
        with pytest.raises(InvalidConfig):
            self.small_config(gap_tiles=-1)

    def test_train_tiles_are_clean_vs_background(self):
        cfg = self.small_config()
        ds = sim.build_dataset(cfg)
        # rebuild the same background and confirm train tiles are untouched slices
        profile = sim.build_profile(cfg, 0, 0)
        total = cfg.train_tiles_per_band + cfg.gap_tiles + cfg.test_tiles_per_band
        spec = sim.generate_background(profile, total * 6)
        first = next(t for t in ds.train if t.sensor_id == "a" and t.band_index == 0)
        assert np.array_equal(first.values, spec[:6].astype(np.float32))
