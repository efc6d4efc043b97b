"""Data pipeline tests: normalization round trips, splits, sampling
geometry, CSV ingestion, rasterization mass conservation, synthesis."""

import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metast.data import (
    BoundingBox,
    CityDataset,
    GridSeries,
    SynthCitySpec,
    SynthSpec,
    TripRecord,
    archetype_curve,
    denormalize,
    load_city,
    make_samples,
    normalize,
    rasterize,
    rasterize_measurements,
    read_measurement_csv,
    read_trip_csv,
    save_city,
    split,
    synth_cities,
    synth_city,
)
from metast.errors import ConfigError, DataError


def toy_series(rng, T=48, rows=3, cols=3, channels=1, city_id="toy"):
    vals = rng.uniform(0.0, 10.0, size=(T, rows, cols, channels))
    return GridSeries(city_id, rows, cols, "hour", 0, vals, ("volume",)[:channels])


# -------------------------------------------------------- normalization

def test_normalize_roundtrip_is_lossless():
    rng = np.random.default_rng(0)
    series = normalize(toy_series(rng), train_len=24)
    norm = series.normalized()
    back = denormalize(norm, series.norm)
    assert np.max(np.abs(back - series.values)) < 1e-12


def test_normalize_train_prefix_maps_into_unit_box():
    rng = np.random.default_rng(1)
    series = normalize(toy_series(rng), train_len=24)
    norm = series.normalized()
    assert norm[:24].min() >= -1.0 - 1e-12
    assert norm[:24].max() <= 1.0 + 1e-12
    # the fitted extremes hit the interval ends exactly
    assert norm[:24].min() == -1.0
    assert norm[:24].max() == 1.0


def test_normalize_constant_channel_maps_to_zero():
    vals = np.full((10, 2, 2, 1), 7.0)
    series = normalize(GridSeries("c", 2, 2, "hour", 0, vals, ("v",)), train_len=10)
    assert np.all(series.normalized() == 0.0)
    assert np.all(denormalize(series.normalized(), series.norm) == 7.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(6, 30))
def test_normalize_roundtrip_property(seed, train_len):
    rng = np.random.default_rng(seed)
    series = normalize(toy_series(rng, T=32), train_len=min(train_len, 32))
    back = denormalize(series.normalized(), series.norm)
    assert np.max(np.abs(back - series.values)) < 1e-9


# ---------------------------------------------------------------- split

def test_source_split_is_80_percent():
    rng = np.random.default_rng(2)
    series = toy_series(rng, T=100)
    (a, b), (c, d) = split(series, "source")
    assert (a, b, c, d) == (0, 80, 80, 100)


def test_target_splits_take_days():
    rng = np.random.default_rng(3)
    series = toy_series(rng, T=24 * 8)
    (_, k1), _ = split(series, "target-1")
    (_, k3), _ = split(series, "target-3")
    (_, k7), _ = split(series, "target-7")
    assert (k1, k3, k7) == (24, 72, 168)


def test_split_errors():
    rng = np.random.default_rng(4)
    with pytest.raises(ConfigError):
        split(toy_series(rng), "target-2.5")
    with pytest.raises(DataError):
        split(toy_series(rng, T=20), "target-1")  # 24 >= 20


# -------------------------------------------------------------- samples

def test_make_samples_counts_and_order():
    rng = np.random.default_rng(5)
    series = normalize(toy_series(rng, T=12, rows=2, cols=2), train_len=12)
    samples = make_samples(series, window=4, patch_size=3)
    # targets run t = 4..11, 4 regions each, time-major then row-major
    assert len(samples) == 8 * 4
    assert [s.timestamp for s in samples[:5]] == [4, 4, 4, 4, 5]
    assert [s.region_id for s in samples[:4]] == [0, 1, 2, 3]
    assert samples[0].patches.shape == (4, 3, 3, 1)


def test_make_samples_window_content_matches_series():
    rng = np.random.default_rng(6)
    series = normalize(toy_series(rng, T=10, rows=3, cols=3), train_len=10)
    norm = series.normalized()
    samples = make_samples(series, window=3, patch_size=3)
    s = next(x for x in samples if x.region_id == 4 and x.timestamp == 5)
    # region 4 is the center cell: its 3x3 patch needs no padding
    assert np.array_equal(s.patches, norm[2:5, 0:3, 0:3, :])
    assert np.array_equal(s.target, norm[5, 1, 1, :])


def test_make_samples_corner_patches_are_zero_padded():
    rng = np.random.default_rng(7)
    series = normalize(toy_series(rng, T=8, rows=3, cols=3), train_len=8)
    samples = make_samples(series, window=2, patch_size=3)
    corner = next(x for x in samples if x.region_id == 0)
    assert np.all(corner.patches[:, 0, :, :] == 0.0)
    assert np.all(corner.patches[:, :, 0, :] == 0.0)


def test_make_samples_validates():
    rng = np.random.default_rng(8)
    series = normalize(toy_series(rng, T=8), train_len=8)
    with pytest.raises(ConfigError):
        make_samples(series, window=2, patch_size=4)
    with pytest.raises(DataError):
        make_samples(series, window=9, patch_size=3)
    with pytest.raises(DataError):
        make_samples(toy_series(rng, T=8), window=2, patch_size=3)  # no norm


# ------------------------------------------------- batch access parity

class _Cfg:
    window_len = 3
    patch_size = 3
    channels = 1
    target_channels = 1


def test_prepared_batches_match_materialized_samples():
    rng = np.random.default_rng(9)
    city = CityDataset("c", toy_series(rng, T=30), role="source")
    city.set_split("source")
    cfg = _Cfg()
    city.prepare(cfg)
    samples = city.train_samples(cfg)
    batch = city.batch_slice("train", 0, len(samples))
    stacked = np.stack([s.patches for s in samples])
    assert np.array_equal(batch.patches, stacked)
    assert np.array_equal(batch.targets, np.stack([s.target for s in samples]))
    assert np.array_equal(batch.region_ids, np.array([s.region_id for s in samples]))


def test_sample_batch_draws_from_right_span():
    rng = np.random.default_rng(10)
    city = CityDataset("c", toy_series(rng, T=40), role="source")
    city.set_split("source")
    city.prepare(_Cfg())
    train = city.sample_batch(np.random.default_rng(0), "train", 16)
    query = city.sample_batch(np.random.default_rng(0), "query", 16)
    assert train.timestamps.max() < city.train_end
    assert query.timestamps.min() >= city.train_end


def test_sample_batch_requires_prepare():
    rng = np.random.default_rng(11)
    city = CityDataset("c", toy_series(rng), role="source")
    city.set_split("source")
    with pytest.raises(DataError):
        city.sample_batch(np.random.default_rng(0), "train", 4)


def test_raw_targets_align_with_batch():
    rng = np.random.default_rng(12)
    city = CityDataset("c", toy_series(rng, T=30), role="source")
    city.set_split("source")
    city.prepare(_Cfg())
    batch = city.batch_slice("query", 0, 10)
    raw = city.raw_targets(batch)
    for k in range(len(batch)):
        i, j = batch.region_ids[k] // 3, batch.region_ids[k] % 3
        assert raw[k, 0] == city.series.values[batch.timestamps[k], i, j, 0]


# ----------------------------------------------------------- ingestion

def write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(str(x) for x in r) + "\n")


TRIP_COLS = {"pickup_time": "t", "pickup_lat": "lat", "pickup_lon": "lon"}


def test_read_trip_csv_skips_malformed(tmp_path):
    p = tmp_path / "trips.csv"
    write_csv(p, ["t", "lat", "lon"], [
        [3600, 10.5, 20.5],
        ["oops", 10.5, 20.5],
        [7200, "", 20.5],
        [7200, 10.6, 20.6],
    ])
    records, stats = read_trip_csv(p, TRIP_COLS)
    assert stats == {"rows": 4, "malformed": 2}
    assert len(records) == 2
    assert records[0].pickup_time == 3600


def test_read_trip_csv_missing_column_raises(tmp_path):
    p = tmp_path / "trips.csv"
    write_csv(p, ["t", "lat"], [[1, 2]])
    with pytest.raises(DataError):
        read_trip_csv(p, TRIP_COLS)
    with pytest.raises(ConfigError):
        read_trip_csv(p, {"pickup_time": "t"})


def test_read_trip_csv_time_format(tmp_path):
    p = tmp_path / "trips.csv"
    write_csv(p, ["t", "lat", "lon"], [["1970-01-01 01:00:00", 10.5, 20.5]])
    records, _ = read_trip_csv(p, TRIP_COLS, time_format="%Y-%m-%d %H:%M:%S")
    assert records[0].pickup_time == 3600


def test_read_measurement_csv(tmp_path):
    p = tmp_path / "m.csv"
    write_csv(p, ["when", "y", "x", "v"], [
        [0, 10.5, 20.5, 3.2],
        [0, 10.5, 20.5, "bad"],
        [2678400, 10.5, 20.5, 4.0],
    ])
    rows, stats = read_measurement_csv(p, {"time": "when", "lat": "y", "lon": "x", "value": "v"})
    assert stats == {"rows": 3, "malformed": 1}
    assert rows[0] == (0, 10.5, 20.5, 3.2)


# -------------------------------------------------------- rasterization

BOX = BoundingBox(lat_min=10.0, lat_max=11.0, lon_min=20.0, lon_max=21.0)


def test_rasterize_conserves_accepted_mass():
    rng = np.random.default_rng(13)
    records = [
        TripRecord(pickup_time=int(rng.integers(0, 3600 * 24)),
                   pickup_lat=float(rng.uniform(9.8, 11.2)),
                   pickup_lon=float(rng.uniform(19.8, 21.2)))
        for _ in range(300)
    ]
    series, stats = rasterize(records, BOX, 4, 4, interval="hour")
    assert series.values[:, :, :, 0].sum() == stats["accepted"]
    assert stats["accepted"] + stats["out_of_bbox"] + stats["out_of_span"] == 300


def test_rasterize_places_event_in_right_cell():
    records = [TripRecord(pickup_time=3600 * 5 + 30, pickup_lat=10.05, pickup_lon=20.95)]
    series, stats = rasterize(records, BOX, 2, 2, interval="hour", t0=0)
    assert stats["accepted"] == 1
    # lat indexes rows from lat_min; lon near the maximum lands in the last column
    assert series.values[5, 0, 1, 0] == 1.0
    assert series.values.sum() == 1.0


def test_rasterize_dropoff_channel():
    records = [TripRecord(pickup_time=0, pickup_lat=10.5, pickup_lon=20.5,
                          dropoff_time=3600, dropoff_lat=10.5, dropoff_lon=20.5)]
    series, stats = rasterize(records, BOX, 2, 2)
    assert series.n_channels == 2
    assert stats["dropoffs"] == 1
    assert series.values[1, :, :, 1].sum() == 1.0


def test_rasterize_zero_records_raises():
    with pytest.raises(DataError):
        rasterize([], BOX, 2, 2)


def test_rasterize_measurements_fill_and_mask():
    rows_data = [
        (0, 10.5, 20.5, 5.0),
        (0, 10.5, 20.5, 7.0),  # same cell-month: median 6.0
        (86400 * 95, 10.5, 20.5, 9.0),  # ~3 months later
    ]
    series, stats = rasterize_measurements(rows_data, BOX, 1, 1)
    vals = series.values[:, 0, 0, 0]
    mask = series.values[:, 0, 0, 1]
    assert vals[0] == 6.0
    assert mask[0] == 1.0
    assert np.all(vals[1:3] == 6.0)  # carried forward
    assert np.all(mask[1:3] == 0.0)
    assert vals[3] == 9.0 and mask[3] == 1.0
    assert stats["out_of_bbox"] == 0


# ------------------------------------------------------------ synthesis

def test_synth_city_deterministic_and_shaped():
    spec = SynthCitySpec(city_id="s", rows=3, cols=4, periods=100)
    a = synth_city(spec, "traffic", np.random.default_rng(1), "source")
    b = synth_city(spec, "traffic", np.random.default_rng(1), "source")
    assert np.array_equal(a.series.values, b.series.values)
    assert a.series.values.shape == (100, 3, 4, 1)
    assert a.archetypes.shape == (12,)


def test_synth_noiseless_region_matches_scaled_curve():
    spec = SynthCitySpec(city_id="s", rows=2, cols=2, periods=48, noise_sigma=0.0,
                         scale_range=(1.0, 1.0), amp_range=(1.0, 1.0), phase_jitter=0.0)
    city = synth_city(spec, "traffic", np.random.default_rng(2), "source")
    names = ("flat", "am_peak", "pm_peak", "double_peak")
    t = np.arange(48)
    for rid in range(4):
        i, j = rid // 2, rid % 2
        curve = archetype_curve("traffic", names[city.archetypes[rid]], t % 24)
        assert np.max(np.abs(city.series.values[:, i, j, 0] - curve)) < 1e-12


def test_synth_cities_streams_are_independent():
    mk = lambda n: SynthSpec(
        sources=tuple(SynthCitySpec(city_id=f"s{k}", rows=2, cols=2, periods=60)
                      for k in range(n)),
        targets=(SynthCitySpec(city_id="t", rows=2, cols=2, periods=60),),
    )
    two = synth_cities(mk(2), seed=0)
    three = synth_cities(mk(3), seed=0)
    # adding a source city never changes the existing cities' draws
    assert np.array_equal(two[0].series.values, three[0].series.values)
    assert np.array_equal(two[1].series.values, three[1].series.values)


def test_synth_sources_arrive_split_and_normalized():
    spec = SynthSpec(
        sources=(SynthCitySpec(city_id="s", rows=2, cols=2, periods=60),),
        targets=(SynthCitySpec(city_id="t", rows=2, cols=2, periods=60),),
    )
    cities = synth_cities(spec, seed=1)
    src = cities[0]
    assert src.train_end == 48
    assert src.series.norm is not None
    tgt = cities[1]
    assert tgt.train_end is None


def test_synth_spec_validation():
    with pytest.raises(ConfigError):
        SynthCitySpec(city_id="x", rows=0)
    with pytest.raises(ConfigError):
        SynthCitySpec(city_id="x", noise_sigma=-1.0)
    with pytest.raises(ConfigError):
        SynthSpec(sources=(SynthCitySpec(city_id="a"),), targets=(SynthCitySpec(city_id="a"),))
    with pytest.raises(ConfigError):
        SynthSpec.from_dict({"preset": "bogus"})
    with pytest.raises(ConfigError):
        synth_city(SynthCitySpec(city_id="x", archetype_mix=(1.0, 0.0)), "traffic",
                   np.random.default_rng(0), "source")


def test_archetype_mix_controls_draws():
    spec = SynthCitySpec(city_id="s", rows=4, cols=4, periods=48,
                         archetype_mix=(0.0, 1.0, 0.0, 0.0))
    city = synth_city(spec, "traffic", np.random.default_rng(3), "source")
    assert np.all(city.archetypes == 1)


# ---------------------------------------------------------- persistence

def test_city_directory_roundtrip(tmp_path):
    spec = SynthCitySpec(city_id="s", rows=2, cols=3, periods=50)
    city = synth_city(spec, "traffic", np.random.default_rng(4), "source")
    city.set_split("source")
    from metast.clustering import build_profiles, kmeans
    _, assigns = kmeans(build_profiles(city.series, train_end=city.train_end), 3, seed=0)
    city.attach_assignments(assigns)
    d = os.path.join(tmp_path, "city")
    save_city(city, d)
    back = load_city(d)
    assert back.city_id == city.city_id
    assert back.train_end == city.train_end
    assert np.array_equal(back.series.values, city.series.values)
    assert np.array_equal(back.series.norm, city.series.norm)
    assert np.array_equal(back.archetypes, city.archetypes)
    assert [a.centroid_id for a in back.assignments] == [a.centroid_id for a in city.assignments]
    assert np.array_equal(back.onehots, city.onehots)


def test_attach_assignments_validates_cover():
    rng = np.random.default_rng(14)
    city = CityDataset("c", toy_series(rng, rows=2, cols=2), role="source")
    from metast.clustering import ClusterAssignment
    eye = np.eye(2)
    good = [ClusterAssignment(r, r % 2, eye[r % 2].copy()) for r in range(4)]
    city.attach_assignments(good)
    assert city.onehots.shape == (4, 2)
    with pytest.raises(DataError):
        city.attach_assignments(good[:3])
    bad = [ClusterAssignment(r + 1, 0, eye[0].copy()) for r in range(4)]
    with pytest.raises(DataError):
        city.attach_assignments(bad)
