import json
import math
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from scenariofuzz.corpus import (
    CorpusParams,
    Direction,
    RoadType,
    SeedCorpus,
    SeedFilter,
    build_corpus,
    cluster_points,
    direction_label,
    enumerate_paths,
    load_corpus,
    save_corpus,
    select_seed,
)
from scenariofuzz.errors import NoMatch

GOLDEN = json.loads((Path(__file__).parent / "data" / "corpus_golden.json").read_text(encoding="utf-8"))


@pytest.mark.parametrize("name", sorted(GOLDEN))
def test_corpus_matches_golden(name, corpora, topologies):
    expected = GOLDEN[name]
    corpus = corpora[name]
    assert len(topologies[name]) == expected["waypoints"]
    assert len(corpus.seeds) == len(expected["seeds"])
    for k, (seed, want) in enumerate(zip(corpus.seeds, expected["seeds"])):
        assert seed.seed_id == f"{name}-{k:03d}"
        assert seed.road_type == want["road_type"]
        assert len(seed.traffic_lights) == want["lights"]
        assert Counter(p.direction for p in seed.paths) == want["directions"]
        if "waypoints" in want:
            assert len(seed.waypoints) == want["waypoints"]
        if "path_lengths" in want:
            assert sorted(p.length for p in seed.paths) == pytest.approx(want["path_lengths"])


def test_cross_seed_paths(cross_seed, topologies):
    g = topologies["cross_small"]
    assert cross_seed.light_ids == ("101", "102", "103", "104")
    straight = [p for p in cross_seed.paths if p.direction == "Straight"]
    assert all(p.length == pytest.approx(74.0) for p in straight)
    west = next(p for p in straight if g.waypoint(p.waypoints[0]).road == "1")
    assert g.waypoint(west.waypoints[0]).x == pytest.approx(-37.0)
    assert cross_seed.center[:2] == pytest.approx((0.0, 0.0), abs=1e-6)


def test_every_path_stays_inside_its_seed(corpora):
    for corpus in corpora.values():
        for seed in corpus.seeds:
            for path in seed.paths:
                assert all(seed.has_waypoint(w) for w in path.waypoints)
                assert len(set(path.waypoints)) == len(path.waypoints)


def test_seeds_partition_claimed_waypoints(corpora, topologies):
    for name, corpus in corpora.items():
        ids = [w for seed in corpus.seeds for w in seed.waypoint_ids]
        assert len(ids) == len(set(ids))
        assert set(ids) <= set(range(len(topologies[name])))


def test_curved_road_directions(corpora):
    seed, = corpora["curved"].seeds
    assert seed.road_type == RoadType.STRAIGHT.value
    by_lane = {seed.waypoint(p.waypoints[0]).lane: p.direction for p in seed.paths}
    assert by_lane == {-1: "Left", 1: "Right"}


def test_mini_town_signs(corpora):
    corpus = corpora["mini_town"]
    assert sorted(s.road_type for s in corpus.seeds) == [
        "CrossRoad", "StraightRoad", "StraightRoad", "StraightRoad", "TIntersection",
    ]
    cross = corpus.seeds[0]
    assert cross.road_type == "CrossRoad"
    assert sorted(cross.light_ids) == ["101", "102", "103", "104"]
    assert "speedLimit" in {s.kind for s in cross.extras.signs}
    tee = next(s for s in corpus.seeds if s.road_type == "TIntersection")
    assert {"stop", "yield"} <= {s.kind for s in tee.extras.signs}
    assert not tee.traffic_lights


def test_single_lane_roads_forbid_lane_change(cross_seed):
    assert len(cross_seed.extras.lane_change) == 8
    assert not any(c.allowed for c in cross_seed.extras.lane_change)


@pytest.mark.parametrize(
    "change, length, expected",
    [
        (math.radians(90), 20.0, Direction.LEFT),
        (math.radians(-90), 20.0, Direction.RIGHT),
        (math.radians(19), 20.0, Direction.STRAIGHT),
        (0.0, 100.0, Direction.STRAIGHT),
        (0.0, 144.0, Direction.UNKNOWN),
        (math.radians(350), 20.0, Direction.STRAIGHT),
    ],
)
def test_direction_label(change, length, expected):
    assert direction_label(change, length) == expected


def test_cluster_points_single_linkage():
    points = [(0, 0), (10, 0), (20, 0), (100, 0), (5, 50)]
    assert cluster_points(points, 12.0) == [[0, 1, 2], [3], [4]]
    assert cluster_points([], 1.0) == []
    with pytest.raises(ValueError):
        cluster_points(points, 0.0)


def test_enumerate_paths_rejects_bad_hops(topologies):
    with pytest.raises(ValueError):
        enumerate_paths(topologies["straight"], [0, 1], max_hops=0)


def test_select_seed_filters(corpora):
    corpus = corpora["cross_small"]
    rng = np.random.default_rng(0)
    seed = select_seed(corpus, SeedFilter(road_type="CrossRoad"), rng)
    assert seed.road_type == "CrossRoad"
    picks = {select_seed(corpus, SeedFilter(traffic_light=False), rng).seed_id for _ in range(50)}
    assert picks == {s.seed_id for s in corpus.seeds if not s.traffic_lights}
    with pytest.raises(NoMatch):
        select_seed(corpus, SeedFilter(road_type="TIntersection"), rng)
    with pytest.raises(NoMatch):
        select_seed(corpus, SeedFilter(sign_kind="stop"), rng)


def test_select_seed_is_deterministic(corpora):
    corpus = corpora["mini_town"]
    a = [select_seed(corpus, None, np.random.default_rng(7)).seed_id for _ in range(3)]
    b = [select_seed(corpus, None, np.random.default_rng(7)).seed_id for _ in range(3)]
    assert a == b


def test_corpus_save_and_load(tmp_path, corpora):
    corpus = corpora["mini_town"]
    path = save_corpus(corpus, tmp_path)
    assert path.name == "mini_town.json"
    loaded = load_corpus(path)
    assert loaded.seeds == corpus.seeds
    assert loaded.spacing == corpus.spacing
    assert SeedCorpus.from_json(loaded.to_json()).to_json() == loaded.to_json()


def test_saved_corpus_keeps_its_build_time(tmp_path, corpora):
    corpus = corpora["cross_small"]
    assert corpus.build_seconds > 0.0
    loaded = load_corpus(save_corpus(corpus, tmp_path))
    assert loaded.build_seconds == corpus.build_seconds
    assert "build_seconds" not in corpus.to_json()
    assert loaded.to_json() == corpus.to_json()


def test_corpus_is_reproducible(maps, topologies):
    a = build_corpus(maps["tee_small"], topologies["tee_small"], CorpusParams())
    b = build_corpus(maps["tee_small"], topologies["tee_small"], CorpusParams())
    assert a.to_json() == b.to_json()
