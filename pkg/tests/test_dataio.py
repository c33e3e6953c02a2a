from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mobprivacy import dataio
from mobprivacy.dataio import (
    LocationRecord,
    SyntheticConfig,
    build_trajectories,
    generate_synthetic,
    load_records,
    make_sequences,
    resample_to_resolution,
    train_test_split,
    write_records,
)
from mobprivacy.errors import ConfigError, DataError
from mobprivacy.spatial import GeohashDiscretizer, build_vocab

MONDAY = datetime(2012, 4, 2)


def rec(user, ts, lat=46.55, lon=6.60):
    return LocationRecord(user, ts, lat, lon)


def weekly_records(users, weeks, points, step_minutes=60, start=MONDAY):
    out = []
    for u in users:
        for w in range(weeks):
            base = start + timedelta(weeks=w)
            out += [rec(u, base + timedelta(minutes=step_minutes * i), 46.5 + 0.001 * (i % 7)) for i in range(points)]
    return out


# --------------------------------------------------------------------------- load_records


def test_load_records_field_mapping(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("user_id,timestamp,latitude,longitude\nu1,2012-04-12T10:00:00,40.70,-74.00\n")
    assert load_records(p) == [LocationRecord("u1", datetime(2012, 4, 12, 10, 0), 40.70, -74.00)]


def test_load_records_empty_file_with_header(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("user_id,timestamp,latitude,longitude\n")
    assert load_records(p) == []


def test_load_records_all_rows_bad_is_fatal(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("user_id,timestamp,latitude,longitude\nu1,2012-04-12T10:00:00,91.0,0.0\n")
    with pytest.raises(DataError):
        load_records(p)


def test_load_records_skips_minority_bad_rows(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("user_id,timestamp,latitude,longitude\n"
                 "u1,2012-04-12T10:00:00,40.7,-74.0\nu1,not-a-time,40.7,-74.0\nu1,2012-04-12T09:00:00,40.7,-74.0\n")
    recs = load_records(p)
    assert [r.timestamp.hour for r in recs] == [9, 10]


def test_load_records_missing_column_named(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("user_id,timestamp,latitude\nu1,2012-04-12T10:00:00,40.7\n")
    with pytest.raises(DataError, match="longitude"):
        load_records(p)


def test_load_records_missing_file(tmp_path):
    with pytest.raises(DataError):
        load_records(tmp_path / "nope.csv")


def test_records_round_trip(tmp_path):
    recs = generate_synthetic(SyntheticConfig(num_users=2, days=1))
    write_records(tmp_path / "r.csv", recs)
    assert load_records(tmp_path / "r.csv") == sorted(recs, key=lambda r: (r.user_id, r.timestamp))


# --------------------------------------------------------------------------- resample


def test_resample_single_bin():
    out = resample_to_resolution([rec("u", MONDAY.replace(hour=10, minute=7))], 10)
    assert [r.timestamp for r in out] == [MONDAY.replace(hour=10)]


def test_resample_closest_to_bin_start_wins():
    a = rec("u", MONDAY.replace(hour=10, minute=1), lat=1.0)
    b = rec("u", MONDAY.replace(hour=10, minute=4), lat=2.0)
    out = resample_to_resolution([b, a], 10)
    assert len(out) == 1 and out[0].latitude == 1.0 and out[0].timestamp == MONDAY.replace(hour=10)


def test_resample_distinct_bins_kept():
    out = resample_to_resolution([rec("u", MONDAY.replace(hour=10, minute=1)),
                                  rec("u", MONDAY.replace(hour=10, minute=11))], 10)
    assert [r.timestamp.minute for r in out] == [0, 10]


def test_resample_rejects_nonpositive():
    with pytest.raises(ConfigError):
        resample_to_resolution([], 0)


# --------------------------------------------------------------------------- trajectories


def test_build_single_trajectory():
    ds = build_trajectories(weekly_records(["u"], 1, 12), 60, 10, 1)
    assert len(ds.trajectories) == 1 and len(ds.trajectories[0]) == 12


def test_build_all_filtered_is_fatal():
    with pytest.raises(DataError, match="filtered"):
        build_trajectories(weekly_records(["u"], 1, 5), 60, 10, 1)


def test_build_two_users_three_weeks():
    ds = build_trajectories(weekly_records(["a", "b"], 3, 20), 60, 10, 2)
    assert len(ds.trajectories) == 6 and ds.users == ["a", "b"]
    assert ds.user_index["a"] == ["a:2012-W14", "a:2012-W15", "a:2012-W16"]


def test_day_of_week_sunday_is_zero():
    assert dataio.day_of_week(datetime(2012, 4, 1)) == 0  # a Sunday
    assert dataio.day_of_week(datetime(2012, 4, 3)) == 2  # a Tuesday


def test_trajectory_invariants_on_synthetic():
    recs = generate_synthetic(SyntheticConfig(num_users=3, days=14, resolution_minutes=60))
    ds = build_trajectories(resample_to_resolution(recs, 60), 60, 10, 2)
    for t in ds.trajectories:
        ts = [p.timestamp for p in t.points]
        assert all(b - a >= timedelta(minutes=60) for a, b in zip(ts, ts[1:]))
        assert len({p.timestamp.isocalendar()[:2] for p in t.points}) == 1
        assert all(0 <= p.day_of_week < 7 and 0 <= p.hour_of_day < 24 for p in t.points)


# --------------------------------------------------------------------------- split


def _dataset_with(counts):
    recs = []
    for u, n in counts.items():
        recs += weekly_records([u], n, 10)
    return build_trajectories(recs, 60, 10, 2)


def test_split_seventy_thirty():
    train, test = train_test_split(_dataset_with({"u": 10}), 0.7, seed=3)
    assert len(train.trajectories) == 7 and len(test.trajectories) == 3


def test_split_two_trajectories_one_each():
    train, test = train_test_split(_dataset_with({"u": 2}), 0.7, seed=0)
    assert len(train.trajectories) == 1 and len(test.trajectories) == 1


def test_split_deterministic():
    ds = _dataset_with({"a": 5, "b": 7})
    ids = lambda d: [t.trajectory_id for t in d.trajectories]  # noqa: E731
    (a1, b1), (a2, b2) = train_test_split(ds, 0.7, 11), train_test_split(ds, 0.7, 11)
    assert ids(a1) == ids(a2) and ids(b1) == ids(b2)


def test_split_single_trajectory_user_is_fatal():
    ds = build_trajectories(weekly_records(["u"], 1, 10), 60, 10, 1)
    with pytest.raises(DataError):
        train_test_split(ds, 0.7, 0)


@pytest.mark.parametrize("f", [0.0, 1.0, -0.1, 1.5])
def test_split_fraction_range(f):
    with pytest.raises(ConfigError):
        train_test_split(_dataset_with({"u": 3}), f, 0)


@given(st.dictionaries(st.sampled_from("abcdef"), st.integers(2, 14), min_size=1), st.integers(0, 2**32))
def test_split_partition_properties(counts, seed):
    ds = _dataset_with(counts)
    train, test = train_test_split(ds, 0.7, seed)
    tr = {t.trajectory_id for t in train.trajectories}
    te = {t.trajectory_id for t in test.trajectories}
    assert tr | te == {t.trajectory_id for t in ds.trajectories} and not tr & te
    for u, n in counts.items():
        k = len(train.user_index[u])
        assert k >= 1 and len(test.user_index[u]) >= 1
        if n >= 10:
            assert abs(k - round(0.7 * n)) <= 1


# --------------------------------------------------------------------------- sequences


def _vocab_for(ds):
    return build_vocab(ds, GeohashDiscretizer(7))


def test_make_sequences_hand_enumeration():
    recs = (weekly_records(["u"], 1, 11) + weekly_records(["u"], 1, 15, start=MONDAY + timedelta(weeks=1))
            + weekly_records(["u"], 1, 5, start=MONDAY + timedelta(weeks=2)))
    ds = build_trajectories(recs, 60, 1, 1)
    assert [len(t) for t in ds.trajectories] == [11, 15, 5]
    assert len(make_sequences(ds, 10, _vocab_for(ds))) == 6


@pytest.mark.parametrize("m,expected", [(12, 2), (10, 0)])
def test_make_sequences_window_count(m, expected):
    ds = build_trajectories(weekly_records(["u"], 1, m), 60, 1, 1)
    assert len(make_sequences(ds, 10, _vocab_for(ds), allow_empty=True)) == expected


def test_make_sequences_empty_is_fatal():
    ds = build_trajectories(weekly_records(["u"], 1, 10), 60, 1, 1)
    with pytest.raises(DataError):
        make_sequences(ds, 10, _vocab_for(ds))


def test_make_sequences_target_is_next_record():
    ds = build_trajectories(weekly_records(["u", "v"], 2, 30), 60, 10, 2)
    vocab = _vocab_for(ds)
    by_id = ds.by_id()
    for ex in make_sequences(ds, 5, vocab):
        p = by_id[ex.trajectory_id].points[ex.window_start + 5]
        assert ex.next_location == vocab.locate(p.latitude, p.longitude)
        assert len(ex.context) == 5


def test_make_sequences_drops_unseen_cells():
    train = build_trajectories(weekly_records(["u"], 1, 20), 60, 1, 1)
    vocab = _vocab_for(train)
    far = [rec("u", MONDAY + timedelta(hours=i), lat=10.0 if i == 12 else 46.5) for i in range(20)]
    test = build_trajectories(far, 60, 1, 1)
    exs = make_sequences(test, 5, vocab)
    # windows whose span includes index 12 (as context or target) are gone
    assert all(not (ex.window_start <= 12 <= ex.window_start + 5) for ex in exs)
    assert len(exs) == 15 - 6


# --------------------------------------------------------------------------- synthetic


def test_synthetic_count():
    assert len(generate_synthetic(SyntheticConfig(num_users=1, days=1, resolution_minutes=60))) == 24


def test_synthetic_noiseless_support_is_anchors():
    cfg = SyntheticConfig(num_users=3, days=2)
    world = dataio.synthetic_world(cfg)
    for r in generate_synthetic(cfg):
        assert any(np.allclose([r.latitude, r.longitude], a) for a in world.anchors[r.user_id])


def test_synthetic_deterministic():
    cfg = SyntheticConfig(num_users=2, days=2, transition_noise=0.3, seed=5)
    assert dataio.records_to_csv(generate_synthetic(cfg)) == dataio.records_to_csv(generate_synthetic(cfg))


def test_synthetic_rejects_too_few_pois():
    with pytest.raises(ConfigError):
        SyntheticConfig(num_anchor_pois_per_user=5, total_pois=3)


def test_nearest_anchor_oracle_is_perfect_without_noise():
    cfg = SyntheticConfig(num_users=8, days=14)
    world = dataio.synthetic_world(cfg)
    recs = generate_synthetic(cfg)
    by_user = {}
    for r in recs:
        by_user.setdefault(r.user_id, []).append((r.latitude, r.longitude))
    for user, pts in by_user.items():
        for s in range(0, len(pts) - 5, 17):
            assert dataio.nearest_anchor_reidentify(np.array(pts[s: s + 5]), world) == user
