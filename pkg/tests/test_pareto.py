import json
import random

import pytest
from hypothesis import given, strategies as st

from oracles import pareto_bruteforce
from mobprivacy import pareto
from mobprivacy.dataio import SyntheticConfig, generate_synthetic
from mobprivacy.errors import ConfigError, DataError
from mobprivacy.model import LagrangeWeights
from mobprivacy.pareto import (
    DEFAULT_LAMBDA_GRID,
    DOMINATED,
    ON_FRONT,
    SWEEP_COLUMNS,
    ParetoPoint,
    PointConfig,
    SweepConfig,
    classify_external,
    dominates,
    front_indices,
    load_external,
    pareto_front,
    plot_front,
    run_sweep,
    sweep_configs,
    sweep_csv,
    sweep_summary,
)
from mobprivacy.pipeline import PrepConfig
from mobprivacy.training import TrainConfig

coords = st.tuples(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]))
point_sets = st.lists(coords, min_size=0, max_size=40)


# --------------------------------------------------------------------------- dominance and front


def test_dominates_examples():
    assert dominates((0.9, 0.5), (0.8, 0.4))
    assert not dominates((0.9, 0.5), (0.9, 0.5))
    assert not dominates((0.9, 0.3), (0.8, 0.4))
    assert dominates(ParetoPoint(0.9, 0.5), ParetoPoint(0.9, 0.4))


def test_front_examples():
    pts = [(1, 1), (2, 2), (1, 2), (3, 0)]
    assert pareto_front(pts) == [(2, 2), (3, 0)]
    assert pareto_front(pts) == [pts[i] for i in pareto_bruteforce(pts)]
    assert pareto_front([(0.4, 0.4)]) == [(0.4, 0.4)]
    assert pareto_front([(0.5, 0.5)] * 4) == [(0.5, 0.5)] * 4
    assert pareto_front([]) == []


def test_error_points_never_on_front():
    pts = [ParetoPoint(0.2, 0.2), ParetoPoint(float("nan"), float("nan"), error="boom")]
    assert front_indices(pts) == [0]


@given(point_sets)
def test_front_matches_bruteforce(pts):
    assert front_indices(pts) == pareto_bruteforce(pts)


@given(point_sets)
def test_front_properties(pts):
    front = pareto_front(pts)
    assert pareto_front(front) == front
    assert not any(dominates(a, b) for a in front for b in front)
    for i, p in enumerate(pts):
        if i not in front_indices(pts):
            assert any(dominates(f, p) for f in front)


@given(point_sets.filter(bool), st.data())
def test_front_insertion_rules(pts, data):
    front = pareto_front(pts)
    member = data.draw(st.sampled_from(front))
    worse = (member[0] - 0.1, member[1] - 0.1)
    assert pareto_front(pts + [worse]) == front
    better = (member[0] + 0.1, member[1])
    new_front = pareto_front(pts + [better])
    assert member not in new_front and better in new_front


def test_classify_external_examples():
    front = [(0.5, 0.5), (0.8, 0.2)]
    assert classify_external((0.5, 0.5), front) == ON_FRONT
    assert classify_external((0.4, 0.4), front) == DOMINATED
    assert classify_external((0.9, 0.0), front) == ON_FRONT


def test_point_range_validated():
    with pytest.raises(ValueError):
        ParetoPoint(1.2, 0.5)
    assert not ParetoPoint(float("nan"), float("nan"), error="x").ok


def test_point_dict_round_trip():
    p = ParetoPoint(0.4, 0.6, PointConfig(LagrangeWeights(0.1, 0.6, 0.3), 5, 10, 3), label="a")
    assert ParetoPoint.from_dict(json.loads(json.dumps(p.to_dict()))) == p


# --------------------------------------------------------------------------- sweep config


def test_default_grid_contains_reference_weights():
    grid = [w.as_tuple() for w in DEFAULT_LAMBDA_GRID]
    assert (0.1, 0.6, 0.3) in grid and (0.1, 0.8, 0.1) in grid
    s = SweepConfig()
    assert s.sl_values == (5, 10) and s.granularity_values == (10,)


def test_sweep_cell_count():
    s = SweepConfig(lambda_grid=DEFAULT_LAMBDA_GRID[:3], sl_values=(5, 10), granularity_values=(10,), repeats=1)
    cells = sweep_configs(s, base_seed=7)
    assert s.cell_count == len(cells) == 6
    assert {c.seed for c in cells} == {7}
    assert len(sweep_configs(SweepConfig(repeats=3), 0)) == SweepConfig(repeats=3).cell_count == 24


@pytest.mark.parametrize("kw", [{"lambda_grid": ()}, {"sl_values": ()}, {"granularity_values": ()}, {"repeats": 0}])
def test_sweep_config_rejects_empty(kw):
    with pytest.raises(ConfigError):
        SweepConfig(**kw)


def test_sweep_config_round_trip():
    s = SweepConfig(sl_values=(3,), repeats=2)
    assert SweepConfig.from_dict(json.loads(json.dumps(s.to_dict()))) == s


# --------------------------------------------------------------------------- run_sweep

TINY_TRAIN = TrainConfig(epochs=3, batch_size=64)
TINY_PREP = PrepConfig(resolution_minutes=60, sequence_length=4)


@pytest.fixture(scope="module")
def records():
    return generate_synthetic(SyntheticConfig(num_users=3, total_pois=8, days=14, resolution_minutes=60))


def _small_sweep():
    return SweepConfig(lambda_grid=DEFAULT_LAMBDA_GRID[:3], sl_values=(3, 4), granularity_values=(60,))


def test_run_sweep_counts_cache_and_outputs(records, tmp_path, monkeypatch):
    sweep = _small_sweep()
    pts = run_sweep(records, TINY_PREP, sweep, TINY_TRAIN, cache_dir=tmp_path / "cache")
    assert len(pts) == 6 and all(p.ok for p in pts)
    assert all(p.report.utility_decline_pct and p.report.privacy_gain_pct for p in pts)
    assert [p.config.sequence_length for p in pts] == [3, 3, 3, 4, 4, 4]
    assert len(list((tmp_path / "cache").glob("*.json"))) == 6 + 4

    def no_training(*args):
        raise AssertionError("retrained a cached cell")

    monkeypatch.setattr(pareto, "_run_job", no_training)
    again = run_sweep(records, TINY_PREP, sweep, TINY_TRAIN, cache_dir=tmp_path / "cache")
    assert [p.to_dict() for p in again] == [p.to_dict() for p in pts]

    lines = sweep_csv(pts).splitlines()
    assert lines[0] == ",".join(SWEEP_COLUMNS) and len(lines) == 7
    flags = [line.rsplit(",", 1)[1] for line in lines[1:]]
    assert [i for i, f in enumerate(flags) if f == "true"] == front_indices(pts)
    summary = sweep_summary(pts, sweep, [ParetoPoint(0.0, 0.0, label="ext")])
    assert summary["external"][0]["verdict"] in (ON_FRONT, DOMINATED) and summary["cells"] == 6
    json.dumps(summary)


def test_failed_cell_is_marked_and_sweep_continues(records, monkeypatch):
    real = pareto._run_job

    def flaky(kind, recs, prep_d, train_d, seed):
        if kind == "pae" and train_d["weights"] == [0.0, 0.5, 0.5]:
            raise DataError("synthetic failure")
        return real(kind, recs, prep_d, train_d, seed)

    monkeypatch.setattr(pareto, "_run_job", flaky)
    sweep = SweepConfig(lambda_grid=DEFAULT_LAMBDA_GRID[:3], sl_values=(4,), granularity_values=(60,))
    pts = run_sweep(records, TINY_PREP, sweep, TINY_TRAIN)
    assert [p.ok for p in pts] == [True, True, False]
    assert "synthetic failure" in pts[2].error
    assert 2 not in front_indices(pts)
    assert sweep_csv(pts).splitlines()[3].startswith(",,0.0,0.5,0.5")


def test_parallel_workers_match_serial(records):
    sweep = SweepConfig(lambda_grid=DEFAULT_LAMBDA_GRID[:2], sl_values=(4,), granularity_values=(60,))
    serial = run_sweep(records, TINY_PREP, sweep, TINY_TRAIN, with_baselines=False)
    parallel = run_sweep(records, TINY_PREP, sweep, TINY_TRAIN, with_baselines=False, workers=2)
    assert [p.to_dict() for p in serial] == [p.to_dict() for p in parallel]


@pytest.mark.slow
def test_utility_only_weights_maximise_utility():
    recs = generate_synthetic(SyntheticConfig(num_users=8, total_pois=12, days=14, resolution_minutes=60))
    prep = PrepConfig(resolution_minutes=60, sequence_length=5)
    grid = (LagrangeWeights(0, 1, 0), LagrangeWeights(0.1, 0.6, 0.3), LagrangeWeights(0, 0.5, 0.5))
    sweep = SweepConfig(lambda_grid=grid, sl_values=(5,), granularity_values=(60,))
    pts = run_sweep(recs, prep, sweep, TrainConfig(epochs=300))
    utilities = [p.utility for p in pts]
    assert utilities[0] >= max(utilities) - 0.05
    # the standalone predictor is the reference: top-1 decline within noise of zero
    assert abs(pts[0].report.utility_decline_pct[1]) <= 5.0


# --------------------------------------------------------------------------- external points and plotting


def test_load_external(tmp_path):
    p = tmp_path / "ext.csv"
    p.write_text("utility,privacy,label\n0.5,0.4,gan\n0.7,0.1,\n")
    pts = load_external(p)
    assert [(q.utility, q.privacy, q.label) for q in pts] == [(0.5, 0.4, "gan"), (0.7, 0.1, "external-1")]
    p.write_text("utility\n0.5\n")
    with pytest.raises(ConfigError):
        load_external(p)
    with pytest.raises(ConfigError):
        load_external(tmp_path / "missing.csv")


def test_plot_front_is_deterministic(tmp_path):
    rng = random.Random(0)
    pts = [ParetoPoint(rng.random(), rng.random()) for _ in range(10)]
    a = plot_front(tmp_path / "a.png", pts, [ParetoPoint(0.5, 0.5)]).read_bytes()
    b = plot_front(tmp_path / "b.png", pts, [ParetoPoint(0.5, 0.5)]).read_bytes()
    assert a[:8] == b"\x89PNG\r\n\x1a\n" and a == b
