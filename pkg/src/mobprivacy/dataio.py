"""Raw record ingestion, user-week trajectories, stratified splitting,
fixed-length windows and a synthetic mobility generator."""

from __future__ import annotations

import csv
import io
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, DataError
from .spatial import BoundingBox, Vocab
from .utils import atomic_write, derive_seed

log = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("user_id", "timestamp", "latitude", "longitude")
TRAJECTORY_COLUMNS = ("trajectory_id", "day_of_week", "hour_of_day")
_EPOCH = datetime(1970, 1, 1)


@dataclass(frozen=True)
class LocationRecord:
    user_id: str
    timestamp: datetime
    latitude: float
    longitude: float
    extras: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if not (-90.0 <= self.latitude <= 90.0):
            raise ValueError(f"latitude {self.latitude} out of range")
        if not (-180.0 <= self.longitude <= 180.0):
            raise ValueError(f"longitude {self.longitude} out of range")


@dataclass(frozen=True)
class TrajectoryPoint:
    timestamp: datetime
    latitude: float
    longitude: float
    day_of_week: int  # 0 = Sunday
    hour_of_day: int


@dataclass
class Trajectory:
    trajectory_id: str
    user_id: str
    points: list[TrajectoryPoint]
    resolution_minutes: int

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class TrajectoryConfig:
    resolution_minutes: int = 10
    min_points: int = 10
    min_trajectories_per_user: int = 2

    def __post_init__(self):
        if min(self.resolution_minutes, self.min_points, self.min_trajectories_per_user) < 1:
            raise ConfigError(f"trajectory parameters must be positive: {self}")


@dataclass
class TrajectoryDataset:
    trajectories: list[Trajectory]
    config: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    user_index: dict[str, list[str]] = field(default=None)

    def __post_init__(self):
        if self.user_index is None:
            index: dict[str, list[str]] = OrderedDict()
            for t in self.trajectories:
                index.setdefault(t.user_id, []).append(t.trajectory_id)
            self.user_index = index

    @property
    def users(self) -> list[str]:
        return list(self.user_index)

    def by_id(self) -> dict[str, Trajectory]:
        return {t.trajectory_id: t for t in self.trajectories}


@dataclass(frozen=True)
class SequenceExample:
    """``SL`` context records ``(location, day, hour)`` plus the two targets."""

    context: tuple[tuple[int, int, int], ...]
    next_location: int
    user_label: int
    trajectory_id: str = ""
    window_start: int = 0

    @property
    def sequence_length(self) -> int:
        return len(self.context)


# --------------------------------------------------------------------------- csv io


def parse_timestamp(text: str) -> datetime:
    ts = datetime.fromisoformat(text.strip())
    if ts.tzinfo is not None:
        ts = ts.astimezone(timezone.utc).replace(tzinfo=None)
    return ts


def format_timestamp(ts: datetime) -> str:
    return ts.isoformat(timespec="seconds")


def _read_rows(path: Union[str, Path]) -> tuple[list[str], list[dict]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"input file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = list(reader.fieldnames or [])
        rows = list(reader)
    return header, rows


def load_records(path: Union[str, Path], fmt: str = "csv") -> list[LocationRecord]:
    """Read a record CSV (``user_id,timestamp,latitude,longitude[,extra...]``).

    Unparseable rows are skipped and counted; if more than half of the rows
    are bad the file is rejected as probably being in the wrong format.
    Output is sorted by ``(user_id, timestamp)``.
    """
    if fmt != "csv":
        raise ConfigError(f"unsupported record format {fmt!r}")
    header, rows = _read_rows(path)
    for col in REQUIRED_COLUMNS:
        if col not in header:
            raise DataError(f"{path}: missing required column {col!r}")
    extra_cols = [c for c in header if c not in REQUIRED_COLUMNS]
    records, skipped = [], 0
    for row in rows:
        try:
            user = (row["user_id"] or "").strip()
            if not user:
                raise ValueError("empty user_id")
            records.append(
                LocationRecord(
                    user,
                    parse_timestamp(row["timestamp"]),
                    float(row["latitude"]),
                    float(row["longitude"]),
                    tuple((c, row.get(c) or "") for c in extra_cols),
                )
            )
        except (ValueError, TypeError, AttributeError):
            skipped += 1
    if skipped:
        log.warning("%s: skipped %d unparseable row(s) of %d", path, skipped, len(rows))
    if rows and skipped / len(rows) > 0.5:
        raise DataError(f"{path}: {skipped} of {len(rows)} rows unparseable; wrong format?")
    records.sort(key=lambda r: (r.user_id, r.timestamp))
    return records


def records_to_csv(records: Iterable[LocationRecord]) -> str:
    records = list(records)
    extra_cols = [k for k, _ in records[0].extras] if records else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(REQUIRED_COLUMNS) + extra_cols)
    for r in records:
        w.writerow([r.user_id, format_timestamp(r.timestamp), repr(r.latitude), repr(r.longitude)] + [v for _, v in r.extras])
    return buf.getvalue()


def write_records(path: Union[str, Path], records: Iterable[LocationRecord]) -> Path:
    return atomic_write(path, records_to_csv(records))


def write_trajectories(path: Union[str, Path], dataset: TrajectoryDataset) -> Path:
    """Trajectory store: the record CSV plus ``trajectory_id,day_of_week,hour_of_day``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(REQUIRED_COLUMNS) + list(TRAJECTORY_COLUMNS))
    for t in dataset.trajectories:
        for p in t.points:
            w.writerow([t.user_id, format_timestamp(p.timestamp), repr(p.latitude), repr(p.longitude),
                        t.trajectory_id, p.day_of_week, p.hour_of_day])
    return atomic_write(path, buf.getvalue())


def load_trajectories(path: Union[str, Path], config: Optional[TrajectoryConfig] = None) -> TrajectoryDataset:
    header, rows = _read_rows(path)
    for col in REQUIRED_COLUMNS + TRAJECTORY_COLUMNS:
        if col not in header:
            raise DataError(f"{path}: missing trajectory column {col!r}")
    config = config or TrajectoryConfig(min_trajectories_per_user=1)
    groups: dict[str, Trajectory] = OrderedDict()
    for row in rows:
        tid = row["trajectory_id"]
        traj = groups.get(tid)
        if traj is None:
            traj = groups[tid] = Trajectory(tid, row["user_id"], [], config.resolution_minutes)
        traj.points.append(
            TrajectoryPoint(parse_timestamp(row["timestamp"]), float(row["latitude"]), float(row["longitude"]),
                            int(row["day_of_week"]), int(row["hour_of_day"]))
        )
    return TrajectoryDataset(list(groups.values()), config)


def is_trajectory_csv(path: Union[str, Path]) -> bool:
    header, _ = _read_rows(path)
    return all(c in header for c in TRAJECTORY_COLUMNS)


# --------------------------------------------------------------------------- preprocessing


def _bin_start(ts: datetime, minutes: int) -> datetime:
    step = minutes * 60
    secs = int((ts - _EPOCH).total_seconds() // 1)
    return _EPOCH + timedelta(seconds=secs - secs % step)


def resample_to_resolution(records: Sequence[LocationRecord], minutes: int) -> list[LocationRecord]:
    """Quantize timestamps to ``minutes``-wide bins, keeping the record nearest each bin start."""
    if minutes <= 0:
        raise ConfigError(f"resolution must be positive, got {minutes}")
    best: dict[tuple[str, datetime], tuple[float, int, LocationRecord]] = {}
    for i, r in enumerate(records):
        start = _bin_start(r.timestamp, minutes)
        key = (r.user_id, start)
        offset = (r.timestamp - start).total_seconds()
        if key not in best or (offset, i) < best[key][:2]:
            best[key] = (offset, i, r)
    out = [replace(r, timestamp=start) for (_, start), (_, _, r) in best.items()]
    out.sort(key=lambda r: (r.user_id, r.timestamp))
    return out


def day_of_week(ts: datetime) -> int:
    """0 = Sunday ... 6 = Saturday."""
    return ts.isoweekday() % 7


def build_trajectories(
    records: Sequence[LocationRecord],
    resolution_minutes: int = 10,
    min_points: int = 10,
    min_trajectories_per_user: int = 2,
) -> TrajectoryDataset:
    """Group resampled records into user-weeks (ISO weeks, Monday 00:00) and filter."""
    config = TrajectoryConfig(resolution_minutes, min_points, min_trajectories_per_user)
    weeks: dict[tuple[str, int, int], list[LocationRecord]] = OrderedDict()
    for r in records:
        iso = r.timestamp.isocalendar()
        weeks.setdefault((r.user_id, iso[0], iso[1]), []).append(r)

    per_user: dict[str, list[Trajectory]] = OrderedDict()
    n_short = 0
    for (user, year, week), recs in weeks.items():
        recs = sorted(recs, key=lambda r: r.timestamp)
        if len(recs) < min_points:
            n_short += 1
            continue
        points = [TrajectoryPoint(r.timestamp, r.latitude, r.longitude, day_of_week(r.timestamp), r.timestamp.hour)
                  for r in recs]
        per_user.setdefault(user, []).append(Trajectory(f"{user}:{year}-W{week:02d}", user, points, resolution_minutes))
    n_users_in = len({u for u, _, _ in weeks})
    kept = {u: ts for u, ts in per_user.items() if len(ts) >= min_trajectories_per_user}
    if not kept:
        raise DataError(
            "all users filtered out: "
            f"{n_users_in} users, {len(weeks)} user-weeks; {n_short} user-weeks had < {min_points} points; "
            f"{len(per_user)} users left, none with >= {min_trajectories_per_user} trajectories"
        )
    log.info("built %d trajectories for %d users (%d short user-weeks dropped, %d users dropped)",
             sum(map(len, kept.values())), len(kept), n_short, n_users_in - len(kept))
    return TrajectoryDataset([t for ts in kept.values() for t in ts], config)


def train_test_split(dataset: TrajectoryDataset, train_fraction: float = 0.7, seed: int = 0):
    """Stratified per-user split at trajectory granularity.

    Each user keeps at least one trajectory on each side; otherwise the train
    count is the nearest integer to ``train_fraction * n``.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    train_ids: set[str] = set()
    for user, ids in dataset.user_index.items():
        n = len(ids)
        if n < 2:
            raise DataError(f"user {user!r} has {n} trajectory; cannot stratify")
        n_train = min(max(int(math.floor(train_fraction * n + 0.5)), 1), n - 1)
        order = rng.permutation(n)
        train_ids.update(ids[i] for i in order[:n_train])
    child = replace(dataset.config, min_trajectories_per_user=1)
    train = TrajectoryDataset([t for t in dataset.trajectories if t.trajectory_id in train_ids], child)
    test = TrajectoryDataset([t for t in dataset.trajectories if t.trajectory_id not in train_ids], child)
    return train, test


def encode_trajectory(traj: Trajectory, vocab: Vocab) -> list[tuple[Optional[int], int, int]]:
    return [(vocab.locate(p.latitude, p.longitude), p.day_of_week, p.hour_of_day) for p in traj.points]


def make_sequences(dataset: TrajectoryDataset, sl: int, vocab: Vocab, allow_empty: bool = False) -> list[SequenceExample]:
    """Stride-1 windows of ``sl`` records inside each trajectory; target is the next record.

    Windows touching a location outside the (train-fitted) vocabulary are
    dropped, as are trajectories whose user is unknown to the vocabulary.
    """
    if sl < 1:
        raise ConfigError("sequence length must be >= 1")
    out: list[SequenceExample] = []
    dropped = 0
    for traj in dataset.trajectories:
        user = vocab.user_index(traj.user_id)
        n_windows = max(0, len(traj.points) - sl)
        if user is None:
            dropped += n_windows
            continue
        enc = encode_trajectory(traj, vocab)
        for start in range(n_windows):
            window = enc[start : start + sl + 1]
            if any(loc is None for loc, _, _ in window):
                dropped += 1
                continue
            out.append(SequenceExample(tuple(window[:-1]), window[-1][0], user, traj.trajectory_id, start))
    if dropped:
        log.info("make_sequences dropped %d window(s) with out-of-vocabulary locations or users", dropped)
    if not out and not allow_empty:
        raise DataError(f"no sequence examples of length {sl} could be built")
    return out


# --------------------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticConfig:
    num_users: int = 8
    num_anchor_pois_per_user: int = 3
    total_pois: int = 12
    days: int = 14
    resolution_minutes: int = 60
    transition_noise: float = 0.0
    bounding_box: BoundingBox = BoundingBox(46.50, 46.61, 6.58, 6.73)
    seed: int = 0
    start: datetime = datetime(2012, 4, 2)  # a Monday

    def __post_init__(self):
        counts = (self.num_users, self.num_anchor_pois_per_user, self.total_pois, self.days, self.resolution_minutes)
        if min(counts) < 1:
            raise ConfigError(f"synthetic counts must be positive: {self}")
        if not 0.0 <= self.transition_noise <= 1.0:
            raise ConfigError("transition_noise must be in [0, 1]")
        if self.total_pois < self.num_anchor_pois_per_user:
            raise ConfigError("total_pois must be >= num_anchor_pois_per_user")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        if "bounding_box" in d:
            d["bounding_box"] = BoundingBox.from_dict(d["bounding_box"])
        if "start" in d:
            d["start"] = parse_timestamp(d["start"])
        return cls(**d)


@dataclass(frozen=True)
class SyntheticWorld:
    global_pois: np.ndarray  # (total_pois, 2)
    anchors: dict[str, np.ndarray]  # user -> (k, 2)
    schedules: dict[str, np.ndarray]  # user -> (24, k, k) transition matrices per hour


def _user_ids(n: int) -> list[str]:
    width = len(str(n - 1))
    return [f"u{i:0{width}d}" for i in range(n)]


def synthetic_world(config: SyntheticConfig) -> SyntheticWorld:
    """Draw the POIs, per-user anchors and hour-dependent transition matrices."""
    rng = np.random.default_rng(derive_seed(config.seed, "synth/world"))
    b = config.bounding_box
    lo, hi = np.array([b.lat_min, b.lon_min]), np.array([b.lat_max, b.lon_max])
    global_pois = lo + rng.random((config.total_pois, 2)) * (hi - lo)
    k = config.num_anchor_pois_per_user
    anchors, schedules = {}, {}
    for user in _user_ids(config.num_users):
        anchors[user] = lo + rng.random((k, 2)) * (hi - lo)
        # daily routine: anchor 0 overnight, anchor 1 during a working block,
        # the remaining anchors share the evening
        leave, back = int(rng.integers(6, 10)), int(rng.integers(16, 20))
        preferred = np.zeros(24, dtype=np.int64)
        if k > 1:
            preferred[leave:back] = 1
        if k > 2:
            evening = list(range(back, 23))
            for j, h in enumerate(evening):
                preferred[h] = 2 + (j * (k - 2)) // max(1, len(evening))
        P = np.empty((24, k, k))
        for h in range(24):
            P[h] = 0.15 * rng.dirichlet(np.ones(k), size=k)
            P[h, :, preferred[h]] += 0.85
        schedules[user] = P
    return SyntheticWorld(global_pois, anchors, schedules)


def generate_synthetic(config: SyntheticConfig) -> list[LocationRecord]:
    """Time-inhomogeneous Markov walks over per-user anchors with uniform POI noise.

    Users get distinct, independently drawn anchor coordinates, so identity is
    recoverable from locations; ``transition_noise`` is the per-step chance of
    emitting a uniformly random global POI instead of the current anchor.
    """
    world = synthetic_world(config)
    rng = np.random.default_rng(derive_seed(config.seed, "synth/walk"))
    steps = config.days * 24 * 60 // config.resolution_minutes
    step = timedelta(minutes=config.resolution_minutes)
    records = []
    for user in _user_ids(config.num_users):
        anchors, P = world.anchors[user], world.schedules[user]
        state = 0
        for i in range(steps):
            ts = config.start + i * step
            if i:
                state = int(rng.choice(len(anchors), p=P[ts.hour, state]))
            lat, lon = anchors[state]
            if config.transition_noise > 0 and rng.random() < config.transition_noise:
                lat, lon = world.global_pois[int(rng.integers(len(world.global_pois)))]
            records.append(LocationRecord(user, ts, float(lat), float(lon)))
    return records


def nearest_anchor_reidentify(points: np.ndarray, world: SyntheticWorld) -> str:
    """Attribute a window of ``(lat, lon)`` points to the user whose anchors are
    closest in total (sum over points of the distance to that user's nearest anchor)."""
    points = np.asarray(points, dtype=np.float64)
    best_user, best = None, np.inf
    for user, anchors in world.anchors.items():
        d = np.sqrt(((points[:, None, :] - anchors[None, :, :]) ** 2).sum(-1)).min(1).sum()
        if d < best:
            best_user, best = user, d
    return best_user
