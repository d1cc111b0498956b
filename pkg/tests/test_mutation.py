import csv
import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from scenariofuzz.errors import SeedHasNoPaths
from scenariofuzz.mutation import (
    NEIGHBOR_STEPS,
    RANDOM,
    WEATHER_SPACE,
    AttributeMeta,
    ConcreteScenario,
    MutationOptions,
    Neighbor,
    ObjectKind,
    ScenarioSpace,
    Strategy,
    crossing_pairs,
    export_attributes_csv,
    maneuver_segments,
    mutate_scenario,
    sample_attribute,
    segment_maneuver_path,
    spawn_rng,
)

SEEDS = st.integers(min_value=0, max_value=2**32 - 1)


def assert_valid(scenario, seed, options=MutationOptions()):
    assert scenario.seed_id == seed.seed_id
    assert scenario.mission.path in {p.waypoints for p in seed.paths}
    assert scenario.mission.start == scenario.mission.path[0]
    assert len(scenario.objects) <= options.max_objects
    assert len(scenario.puddles) <= options.max_puddles
    spawns = [o.spawn for o in scenario.objects]
    assert len(set(spawns)) == len(spawns)
    assert scenario.mission.start not in spawns
    for obj in scenario.objects:
        assert seed.has_waypoint(obj.spawn)
        assert obj.spawn in obj.path
        assert obj.appearance.kind == obj.kind
        if obj.kind == ObjectKind.VEHICLE.value:
            assert seed.waypoint(obj.spawn).junction is None
    for puddle in scenario.puddles:
        assert seed.has_waypoint(puddle.waypoint)
    for name, meta in WEATHER_SPACE.items():
        assert meta.accepts(getattr(scenario.weather, name))
    for attr in scenario.attributes:
        assert attr.meta.accepts(attr.value), attr.name


@settings(max_examples=30, deadline=None)
@given(SEEDS)
def test_random_mutants_are_valid(cross_seed, value):
    scenario = mutate_scenario(cross_seed, Strategy.RANDOM, None, np.random.default_rng(value))
    assert_valid(scenario, cross_seed)


@settings(max_examples=30, deadline=None)
@given(SEEDS, SEEDS)
def test_neighbor_mutants_stay_within_five_steps(cross_seed, first, second):
    reference = mutate_scenario(cross_seed, Strategy.RANDOM, None, np.random.default_rng(first))
    mutant = mutate_scenario(cross_seed, Strategy.NEIGHBOR, reference, np.random.default_rng(second))
    assert_valid(mutant, cross_seed)
    before = {a.name: a.value for a in reference.attributes}
    for attr in mutant.attributes:
        if attr.name not in before or not attr.meta.accepts(before[attr.name]):
            continue
        if attr.meta.is_discrete:
            distance = abs(attr.meta.choices.index(attr.value) - attr.meta.choices.index(before[attr.name]))
            assert distance <= NEIGHBOR_STEPS, attr.name
        else:
            assert abs(attr.value - before[attr.name]) <= NEIGHBOR_STEPS * attr.meta.step + 1e-9, attr.name


def test_neighbor_weather_moves_at_most_five_units(cross_seed):
    rng = np.random.default_rng(3)
    reference = mutate_scenario(cross_seed, Strategy.RANDOM, None, rng)
    for _ in range(20):
        mutant = mutate_scenario(cross_seed, Strategy.NEIGHBOR, reference, rng)
        deltas = np.abs(np.subtract(mutant.weather.vector(), reference.weather.vector()))
        assert deltas.max() <= 5.0 + 1e-9


def test_random_continuous_draws_are_uniform():
    rng = np.random.default_rng(11)
    meta = AttributeMeta.continuous(3.0, 10.0, 0.1)
    draws = [sample_attribute(meta, RANDOM, rng) for _ in range(2000)]
    assert stats.kstest(draws, "uniform", args=(3.0, 7.0)).pvalue > 1e-3


def test_neighbor_continuous_draws_are_uniform_in_window():
    rng = np.random.default_rng(12)
    meta = AttributeMeta.continuous(0.0, 100.0, 1.0)
    draws = [sample_attribute(meta, Neighbor(50.0), rng) for _ in range(2000)]
    assert min(draws) >= 45.0 and max(draws) <= 55.0
    assert stats.kstest(draws, "uniform", args=(45.0, 10.0)).pvalue > 1e-3


def test_neighbor_window_is_clipped_at_the_range_edge():
    rng = np.random.default_rng(13)
    meta = AttributeMeta.continuous(0.0, 100.0, 1.0)
    draws = [sample_attribute(meta, Neighbor(1.0), rng) for _ in range(500)]
    assert min(draws) >= 0.0 and max(draws) <= 6.0


def test_discrete_draws_are_uniform():
    rng = np.random.default_rng(14)
    meta = AttributeMeta.discrete(range(20))
    counts = np.bincount([sample_attribute(meta, Neighbor(10), rng) for _ in range(5500)], minlength=20)
    assert counts[:5].sum() == 0 and counts[16:].sum() == 0
    assert stats.chisquare(counts[5:16]).pvalue > 1e-3


def test_neighbor_outside_the_range_falls_back_to_random():
    rng = np.random.default_rng(15)
    meta = AttributeMeta.discrete(("a", "b", "c"))
    assert {sample_attribute(meta, Neighbor("z"), rng) for _ in range(100)} == {"a", "b", "c"}


def test_mutation_is_deterministic(cross_seed):
    a = mutate_scenario(cross_seed, Strategy.RANDOM, None, spawn_rng(0, 1, 2))
    b = mutate_scenario(cross_seed, Strategy.RANDOM, None, spawn_rng(0, 1, 2))
    c = mutate_scenario(cross_seed, Strategy.RANDOM, None, spawn_rng(0, 1, 3))
    assert a.to_json() == b.to_json()
    assert a.digest() == b.digest()
    assert a.digest() != c.digest()


def test_scenario_json_restores_equal_value(cross_seed):
    scenario = mutate_scenario(cross_seed, Strategy.RANDOM, None, np.random.default_rng(21))
    assert ConcreteScenario.from_json(scenario.to_json()) == scenario


def test_neighbor_needs_reference(cross_seed):
    with pytest.raises(ValueError):
        mutate_scenario(cross_seed, Strategy.NEIGHBOR, None, np.random.default_rng(0))


def test_seed_without_paths(cross_seed):
    bare = dataclasses.replace(cross_seed, seed_id="bare", paths=())
    with pytest.raises(SeedHasNoPaths):
        mutate_scenario(bare, Strategy.RANDOM, None, np.random.default_rng(0))


def test_direction_option(cross_seed):
    options = MutationOptions(direction="Left")
    for value in range(10):
        scenario = mutate_scenario(cross_seed, Strategy.RANDOM, None, np.random.default_rng(value), options)
        assert scenario.mission.direction == "Left"
    with pytest.raises(SeedHasNoPaths):
        mutate_scenario(cross_seed, Strategy.RANDOM, None, np.random.default_rng(0), MutationOptions(direction="Unknown"))


def test_limits_on_objects_and_puddles(cross_seed):
    options = MutationOptions(max_objects=0, max_puddles=0)
    scenario = mutate_scenario(cross_seed, Strategy.RANDOM, None, np.random.default_rng(5), options)
    assert scenario.objects == () and scenario.puddles == ()


def test_maneuver_segments_follow_the_path():
    line = np.array([[x, 0.0, 0.0] for x in range(0, 41, 5)], dtype=float)
    segments = maneuver_segments(line)
    assert len(segments) == 5
    assert all(label == "Straight" and length == pytest.approx(8.0) for label, _, length in segments)

    radius = 10.0
    angles = np.linspace(0.0, math.pi / 2.0, 50)
    arc = np.column_stack([radius * np.sin(angles), radius * (1 - np.cos(angles)), angles])
    segments = maneuver_segments(arc)
    assert len(segments) == 1
    label, delta, _ = segments[0]
    assert label == "Left"
    assert delta == pytest.approx(90.0, abs=0.5)


def test_maneuver_plan_for_a_25_m_path():
    line = np.array([[x, 0.0, 0.0] for x in (0.0, 10.0, 20.0, 25.0)])
    plan = segment_maneuver_path(line, np.random.default_rng(2))
    assert len(plan) == 3
    for segment in plan:
        assert segment.direction == "Straight"
        assert segment.length == pytest.approx(25.0 / 3)
        assert -20.0 <= segment.turn <= 20.0
        assert 3.0 <= segment.speed <= 10.0


def test_maneuver_plan_uses_the_given_draw():
    seen = []

    def draw(name, meta):
        seen.append(name)
        return meta.low

    line = np.array([[x, 0.0, 0.0] for x in range(0, 17, 4)], dtype=float)
    plan = segment_maneuver_path(line, np.random.default_rng(0), draw)
    assert seen == ["segment.0.turn", "segment.0.speed", "segment.1.turn", "segment.1.speed"]
    assert [s.turn for s in plan] == [-20.0, -20.0]
    assert [s.speed for s in plan] == [3.0, 3.0]


def test_crossing_pairs_join_opposite_lanes(straight_seed):
    pairs = crossing_pairs(straight_seed)
    assert len(pairs) == len(straight_seed.waypoints)
    for a, b in pairs:
        wa, wb = straight_seed.waypoint(a), straight_seed.waypoint(b)
        assert (wa.lane > 0) != (wb.lane > 0)
        assert math.hypot(wa.x - wb.x, wa.y - wb.y) == pytest.approx(3.5)


def test_export_attributes_csv(tmp_path, cross_seed):
    scenario = mutate_scenario(cross_seed, Strategy.RANDOM, None, np.random.default_rng(8))
    path = tmp_path / "attributes.csv"
    export_attributes_csv(scenario, path)
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["name", "value", "low", "high", "step", "choices"]
    assert [r[0] for r in rows[1:]] == [a.name for a in scenario.attributes]
    assert "weather.fog" in {r[0] for r in rows}


def test_speed_ranges():
    assert ScenarioSpace.PEDESTRIAN_SPEED == (1.0, 4.0)
    assert ScenarioSpace.VEHICLE_SPEED == (3.0, 10.0)
