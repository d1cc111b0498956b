import json
import math
import shlex
import sys

import pytest

from scenariofuzz.agents import AgentControl, BasicAgent, StdioAgent, weak_agent
from scenariofuzz.errors import AgentFault, EmptyTrace, SpawnCollision
from scenariofuzz.map_model import normalize_angle
from scenariofuzz.mutation import COLORS, Action, ConcreteScenario, ManeuverSegment, Mission, ObjectSpec
from scenariofuzz.sim import (
    HEADWAY,
    EgoState,
    Limits,
    ObjectState,
    Outcome,
    Trace,
    WorldState,
    detect_misbehavior,
    driving_score,
    instantiate_scenario,
    light_phase,
    run_scenario,
    step_world,
)

DT = 0.05


def drive(y, speeds, start_x=5.0, tick0=0, objects=()):
    """Frames of an ego driving along +x at the given per-tick speeds."""
    frames, x = [], start_x
    for k, v in enumerate(speeds):
        tick = tick0 + k
        frames.append(WorldState(tick, tick * DT, EgoState(x, y, 0.0, v), tuple(objects)))
        x += v * DT
    return frames


def parked_car(x, y=-1.75):
    return ObjectState(0, "Vehicle", x, y, 0.0, 0.0, 4.6, 1.8, 1.45)


def crash(close):
    car = parked_car(14.0 if close else 17.0)
    frames = [
        WorldState(0, 0.0, EgoState(5.0, -1.75, 0.0, 5.0), (car,)),
        WorldState(1, DT, EgoState(10.0, -1.75, 0.0, 5.0), (car,)),
    ]
    return "straight", frames, Limits()


def red_light(red):
    time = 20.0 if red else 5.0
    tick = int(round(time / DT))
    frames = [
        WorldState(tick - 1, time - DT, EgoState(-14.5, -1.75, 0.0, 10.0)),
        WorldState(tick, time, EgoState(-13.5, -1.75, 0.0, 10.0)),
    ]
    return "cross_small", frames, Limits()


def speeding(over):
    return "straight", drive(-1.75, [16.0 if over else 14.0] * 22), Limits()


def lane_invasion(over):
    return "straight", drive(-3.0 if over else -2.4, [5.0] * 2), Limits()


def stuck(full):
    speeds = [0.0] * 21 if full else [0.0] * 20 + [1.0]
    return "straight", drive(-1.75, speeds), Limits(stuck_timeout=1.0)


ORACLES = [
    ("Crash", crash),
    ("RedLight", red_light),
    ("Speeding", speeding),
    ("LaneInvasion", lane_invasion),
    ("Stuck", stuck),
]


@pytest.mark.parametrize("kind, build", ORACLES, ids=[k for k, _ in ORACLES])
def test_oracle_trace_triggers(kind, build, scenes):
    scene, frames, limits = build(True)
    found = detect_misbehavior(frames, scenes[scene], limits)
    assert [m.kind for m in found] == [kind]
    assert found[0].tick == frames[-1].tick


@pytest.mark.parametrize("kind, build", ORACLES, ids=[f"near-{k}" for k, _ in ORACLES])
def test_near_miss_twin_is_clean(kind, build, scenes):
    scene, frames, limits = build(False)
    assert detect_misbehavior(frames, scenes[scene], limits) == []


def test_crash_detail_names_the_object(scenes):
    _, frames, limits = crash(True)
    m, = detect_misbehavior(frames, scenes["straight"], limits)
    assert m.detail == {"entity": "object.0", "object_kind": "Vehicle"}


def test_empty_frames_detect_nothing(scenes):
    assert detect_misbehavior([], scenes["straight"]) == []


def test_light_phases():
    assert light_phase(0.0, 0.0) == "Green"
    assert light_phase(13.0, 0.0) == "Yellow"
    assert light_phase(20.0, 0.0) == "Red"
    assert light_phase(31.0, 0.0) == "Green"
    assert light_phase(0.0, 15.0) == "Red"


def test_stop_lines_carry_their_lights(scenes):
    governed = sorted(line.light for line in scenes["cross_small"].stop_lines.values() if line.light is not None)
    assert governed == ["101", "102", "103", "104"]
    assert scenes["straight"].stop_lines == {}


def test_full_brake_stops_the_ego():
    world = WorldState(0, 0.0, EgoState(0.0, 0.0, 0.0, 10.0))
    for _ in range(40):
        world = step_world(world, AgentControl(brake=1.0))
    assert world.ego.speed == 0.0
    # v^2 / (2 * 8 m/s^2) plus one tick of discretisation
    assert 6.0 <= world.ego.x <= 6.25 + 10.0 * DT


def test_throttle_and_steer_turn_left():
    world = WorldState(0, 0.0, EgoState(0.0, 0.0, 0.0, 5.0))
    for _ in range(20):
        world = step_world(world, AgentControl(throttle=0.5, steer=0.5))
    assert world.ego.speed == pytest.approx(5.0 + 20 * 0.5 * 4.0 * DT)
    assert world.ego.heading > 0.0 and world.ego.y > 0.0


def lane_path(seed, lane=-1):
    return next(p for p in seed.paths if seed.waypoint(p.waypoints[0]).lane == lane)


def straight_mission(seed, objects=()):
    path = lane_path(seed)
    return ConcreteScenario(seed.seed_id, Mission(path.waypoints[0], path.waypoints, path.direction), tuple(objects))


def parked_on_route(seed, index, color="red"):
    path = lane_path(seed)
    return ObjectSpec("Vehicle", 0, COLORS[color], Action("Immobile"), path.waypoints, path.waypoints[index])


def test_basic_agent_completes_an_empty_road(straight_seed, scenes):
    trace, outcome = run_scenario(straight_mission(straight_seed), BasicAgent(), scenes["straight"], Limits(horizon=40.0))
    assert outcome.status == "Completed"
    assert not outcome.is_error
    assert 0.0 <= outcome.score <= 100.0
    assert trace.frames[0].tick == 0 and trace.frames[-1].tick == outcome.ticks


def test_horizon_expires(straight_seed, scenes):
    _, outcome = run_scenario(straight_mission(straight_seed), BasicAgent(), scenes["straight"], Limits(horizon=2.0))
    assert outcome.status == "HorizonExpired"
    assert outcome.ticks == 40


def test_basic_agent_waits_behind_a_parked_car(straight_seed, scenes):
    sc = straight_mission(straight_seed, [parked_on_route(straight_seed, 10)])
    _, outcome = run_scenario(sc, BasicAgent(), scenes["straight"], Limits(horizon=40.0, stuck_timeout=3.0))
    assert outcome.kinds == ("Stuck",)


def test_weak_agent_hits_a_red_car(straight_seed, scenes):
    sc = straight_mission(straight_seed, [parked_on_route(straight_seed, 10)])
    trace, outcome = run_scenario(sc, weak_agent(), scenes["straight"], Limits(horizon=40.0, stuck_timeout=3.0))
    assert outcome.kinds == ("Crash",)
    assert outcome.score is None
    assert any(e["type"] == "Crash" for e in trace.events)
    assert trace.agent == "weak"


def test_spawn_collision(straight_seed, scenes):
    sc = straight_mission(straight_seed, [parked_on_route(straight_seed, 0)])
    with pytest.raises(SpawnCollision):
        instantiate_scenario(sc, scenes["straight"])


class _BrokenAgent:
    name = "broken"
    version = "0"

    def reset(self):
        pass

    def act(self, obs):
        raise RuntimeError("sensor offline")


def test_agent_exception_becomes_agent_fault(straight_seed, scenes):
    with pytest.raises(AgentFault) as info:
        run_scenario(straight_mission(straight_seed), _BrokenAgent(), scenes["straight"])
    assert info.value.tick == 0


def test_runs_are_deterministic(straight_seed, scenes):
    sc = straight_mission(straight_seed, [parked_on_route(straight_seed, 10)])
    a, _ = run_scenario(sc, weak_agent(), scenes["straight"], Limits(horizon=10.0), rng_seed=4)
    b, _ = run_scenario(sc, weak_agent(), scenes["straight"], Limits(horizon=10.0), rng_seed=4)
    assert [f.to_json() for f in a.frames] == [f.to_json() for f in b.frames]


def test_trace_written_and_read_back(tmp_path, straight_seed, scenes):
    sc = straight_mission(straight_seed, [parked_on_route(straight_seed, 10)])
    limits = Limits(horizon=40.0, stuck_timeout=3.0)
    trace, outcome = run_scenario(sc, weak_agent(), scenes["straight"], limits, rng_seed=9)
    trace.write(tmp_path, outcome)
    loaded, loaded_outcome = Trace.read(tmp_path)
    assert [f.to_json() for f in loaded.frames] == [f.to_json() for f in trace.frames]
    assert loaded_outcome.to_dict() == outcome.to_dict()
    assert loaded.scenario == sc
    assert loaded.rng_seed == 9
    assert Limits(**loaded.limits) == limits
    sidecar = json.loads((tmp_path / "events.json").read_text(encoding="utf-8"))
    assert sidecar["scenario"] == sc.digest()


def test_outcome_round_trip():
    outcome = Outcome("HorizonExpired", (), 12, 87.5)
    assert Outcome.from_dict(outcome.to_dict()) == outcome


def test_driving_score_needs_frames(straight_seed):
    empty = Trace([], [], straight_mission(straight_seed), 0, "basic", "1.0")
    with pytest.raises(EmptyTrace):
        driving_score(empty)


def scored(frames, seed):
    return driving_score(Trace(frames, [], straight_mission(seed), 0, "basic", "1.0"))


def test_smooth_run_scores_full_marks(straight_seed):
    assert scored(drive(-1.75, [5.0] * 40), straight_seed) == 100.0


def test_each_hard_brake_episode_costs_five(straight_seed):
    accels = [0.0, 0.0, -4.0, -4.0, 0.0, 0.0, -5.0, 0.0, 0.0]
    frames = [WorldState(k, k * DT, EgoState(5.0 + 0.25 * k, -1.75, 0.0, 5.0, accel=a)) for k, a in enumerate(accels)]
    assert scored(frames, straight_seed) == 90.0


def test_near_miss_at_one_metre_scores_sixty(straight_seed):
    # ego front at 2.25, car rear at 5.55 - 2.3
    car = parked_car(5.55, y=0.0)
    frames = [WorldState(k, k * DT, EgoState(0.0, 0.0, 0.0, 0.0), (car,)) for k in range(3)]
    assert scored(frames, straight_seed) == pytest.approx(60.0, abs=1e-6)


def braked(world, ticks):
    for _ in range(ticks):
        world = step_world(world, AgentControl(brake=1.0))
    return world


def moving_on_route(seed, index, action):
    path = lane_path(seed)
    return ObjectSpec("Vehicle", 0, None, action, path.waypoints, path.waypoints[index])


def test_linear_object_holds_its_speed(straight_seed, scenes):
    linear = moving_on_route(straight_seed, 10, Action("Linear", 5.0))
    world = instantiate_scenario(straight_mission(straight_seed, [linear]), scenes["straight"])
    start = world.objects[0]
    speeds = []
    for _ in range(20):
        world = step_world(world, AgentControl(brake=1.0))
        speeds.append(world.objects[0].speed)
    moved = world.objects[0]
    assert speeds == [5.0] * 20
    assert math.hypot(moved.x - start.x, moved.y - start.y) == pytest.approx(5.0)
    assert moved.heading == pytest.approx(start.heading)


def test_maneuver_object_follows_its_segments(straight_seed, scenes):
    plan = (ManeuverSegment("Straight", 0.0, 4.0, 8.0), ManeuverSegment("Left", 90.0, 4.0, 8.0))
    world = instantiate_scenario(
        straight_mission(straight_seed, [moving_on_route(straight_seed, 4, Action("Maneuver", segments=plan))]), scenes["straight"]
    )
    start = world.objects[0]

    straight = braked(world, 40).objects[0]
    assert straight.heading == pytest.approx(start.heading)
    assert math.hypot(straight.x - start.x, straight.y - start.y) == pytest.approx(8.0)
    assert straight.speed == 4.0

    done = braked(world, 100).objects[0]
    assert abs(normalize_angle(done.heading - start.heading) - math.pi / 2) < 0.05
    assert done.speed == 0.0
    assert done.progress == pytest.approx(16.0, abs=0.25)


def test_autopilot_keeps_headway_behind_a_parked_car(straight_seed, scenes):
    leader = moving_on_route(straight_seed, 12, Action("Immobile"))
    follower = moving_on_route(straight_seed, 2, Action("Autopilot"))
    world = braked(instantiate_scenario(straight_mission(straight_seed, [leader, follower]), scenes["straight"]), 400)
    parked, cruiser = world.objects
    gap = math.hypot(parked.x - cruiser.x, parked.y - cruiser.y) - (parked.length + cruiser.length) / 2.0
    assert cruiser.progress > 20.0
    assert cruiser.speed < 0.1
    assert HEADWAY - 0.5 <= gap <= HEADWAY + 0.5


def test_autopilot_stops_before_a_red_light(cross_seed, scenes):
    scene = scenes["cross_small"]

    def first_light(path):
        return next((scene.stop_lines[w].light for w in path.waypoints if w in scene.stop_lines and scene.stop_lines[w].light), None)

    red = next(
        p for p in cross_seed.paths
        if first_light(p) is not None and all(scene.phase(first_light(p), t) == "Red" for t in (0.0, 5.0, 10.0))
    )
    origin = cross_seed.waypoint(red.waypoints[0])
    mission = next(
        p for p in cross_seed.paths
        if math.hypot(cross_seed.waypoint(p.waypoints[0]).x - origin.x, cross_seed.waypoint(p.waypoints[0]).y - origin.y) > 10.0
    )
    cruiser = ObjectSpec("Vehicle", 0, None, Action("Autopilot"), red.waypoints, red.waypoints[0])
    sc = ConcreteScenario(cross_seed.seed_id, Mission(mission.waypoints[0], mission.waypoints, mission.direction), (cruiser,))
    world = instantiate_scenario(sc, scene)
    station, _ = world.context.stations[0][0]

    stopped = braked(world, 200).objects[0]
    assert stopped.progress > 0.0
    assert stopped.speed < 0.1
    assert stopped.progress + stopped.length / 2.0 <= station


def test_stdio_agent_round_trip(tmp_path, straight_seed, scenes):
    script = tmp_path / "cruise.py"
    script.write_text(
        "import json, sys\n"
        "for line in sys.stdin:\n"
        "    json.loads(line)\n"
        "    print(json.dumps({'throttle': 0.3, 'brake': 0.0, 'steer': 0.0}), flush=True)\n",
        encoding="utf-8",
    )
    agent = StdioAgent(f"{shlex.quote(sys.executable)} {shlex.quote(str(script))}")
    trace, outcome = run_scenario(straight_mission(straight_seed), agent, scenes["straight"], Limits(horizon=1.0))
    assert outcome.status == "HorizonExpired"
    assert len(trace.frames) == 21
    assert trace.frames[-1].ego.speed == pytest.approx(20 * 0.3 * 4.0 * DT)
    assert trace.agent.startswith("stdio:")
    assert agent._proc is None


def test_stdio_agent_that_cannot_start_is_a_fault(straight_seed, scenes):
    with pytest.raises(AgentFault) as info:
        run_scenario(straight_mission(straight_seed), StdioAgent("/nonexistent/agent-binary"), scenes["straight"])
    assert info.value.tick == 0


def test_stdio_agent_that_goes_silent_is_a_fault(tmp_path, straight_seed, scenes):
    script = tmp_path / "silent.py"
    script.write_text("import sys\nsys.stdin.readline()\n", encoding="utf-8")
    agent = StdioAgent(f"{shlex.quote(sys.executable)} {shlex.quote(str(script))}")
    with pytest.raises(AgentFault) as info:
        run_scenario(straight_mission(straight_seed), agent, scenes["straight"])
    assert info.value.tick == 0
