import dataclasses
from pathlib import Path

import numpy as np
import pytest

from scenariofuzz.agents import weak_agent
from scenariofuzz.config import DEFAULT_CONFIG, load_config
from scenariofuzz.corpus import SeedFilter
from scenariofuzz.errors import ConfigError
from scenariofuzz.fuzzer import (
    MAX_CONSECUTIVE_FAULTS,
    Budget,
    FuzzConfig,
    Fuzzer,
    check_frequency,
    execution_seed,
    run_campaign,
)
from scenariofuzz.logdb import read_events
from scenariofuzz.mutation import MutationOptions
from scenariofuzz.sim import Limits
from scenariofuzz.state import CampaignState

ACCEPTANCE = Path(__file__).parent.parent / "configs" / "acceptance.yaml"


@pytest.fixture
def small_cfg(tiny_sem):
    return FuzzConfig(
        strategy="2SMS",
        cycles=2,
        mutants=2,
        executed=2,
        rng_seed=5,
        seed_filter=SeedFilter(road_type="CrossRoad"),
        limits=Limits(horizon=8.0, stuck_timeout=4.0),
        sem=tiny_sem,
        mutation=MutationOptions(max_objects=4, max_puddles=2),
    )


def test_check_frequency_matches_roulette_odds():
    rng = np.random.default_rng(0)
    assert all(check_frequency(0, rng) for _ in range(100))
    hits = sum(check_frequency(3, rng) for _ in range(4000))
    assert abs(hits / 4000 - 0.25) < 0.03
    with pytest.raises(ValueError):
        check_frequency(-1, rng)


@pytest.mark.parametrize(
    "text, executions, seconds",
    [("200", 200, None), ("0", 0, None), ("90s", None, 90.0), ("10m", None, 600.0), ("1.5h", None, 5400.0)],
)
def test_budget_parse(text, executions, seconds):
    budget = Budget.parse(text)
    assert budget.executions == executions
    assert budget.seconds == seconds


@pytest.mark.parametrize("text", ["ten", "10d", "-5", ""])
def test_budget_parse_rejects_garbage(text):
    with pytest.raises(ConfigError):
        Budget.parse(text)


def test_budget_zero():
    assert Budget.parse("0").is_zero()
    assert Budget.parse("0s").is_zero()
    assert not Budget.parse("1").is_zero()


def test_fuzz_config_defaults_and_validation():
    assert FuzzConfig(strategy="2SMS+SEM").mutants == 100
    assert FuzzConfig(strategy="RMS").mutants == 3
    with pytest.raises(ConfigError):
        FuzzConfig(strategy="GREEDY")
    with pytest.raises(ConfigError):
        FuzzConfig(strategy="RMS", mutants=2, executed=3)
    with pytest.raises(ConfigError):
        FuzzConfig(strategy="RMS", cycles=0)


def test_fuzz_config_from_default_config():
    cfg = FuzzConfig.from_config(DEFAULT_CONFIG)
    assert cfg.strategy == "2SMS+SEM"
    assert cfg.sem.seed == DEFAULT_CONFIG["campaign"]["rng_seed"]
    assert cfg.limits == Limits()


def test_acceptance_config_loads(tmp_path):
    cfg = FuzzConfig.from_config(load_config(ACCEPTANCE, project_dir=tmp_path))
    assert cfg.strategy == "2SMS+SEM"
    assert cfg.seed_filter.road_type == "CrossRoad"
    assert cfg.seed_filter.map_name == "cross_small"
    assert (cfg.mutants, cfg.executed, cfg.retrain_every) == (100, 3, 50)


def test_execution_seed_is_stable():
    assert execution_seed(0, 1) == execution_seed(0, 1)
    assert execution_seed(0, 1) != execution_seed(0, 2)


def test_zero_budget_writes_nothing(tmp_path, small_cfg, corpora, scenes):
    state_dir = tmp_path / "state"
    report = run_campaign(small_cfg, corpora["cross_small"], weak_agent(), scenes["cross_small"], state_dir, Budget(executions=0))
    assert report.executions == 0
    assert not state_dir.exists()


def test_budget_counts_executions(tmp_path, small_cfg, corpora, scenes):
    state_dir = tmp_path / "state"
    report = run_campaign(small_cfg, corpora["cross_small"], weak_agent(), scenes["cross_small"], state_dir, Budget(executions=5))
    state = CampaignState.load(state_dir)
    assert report.executions == len(state.entries) == 5
    assert report.errors == state.errors
    assert sum(report.by_kind.values()) >= len(report.errors)
    for eid in state.errors:
        assert (state.error_dir(eid) / "meta.json").exists()
        assert (state.error_dir(eid) / "trace.jsonl").exists()


def test_campaign_is_deterministic(tmp_path, small_cfg, corpora, scenes):
    contents = []
    for name in ("a", "b"):
        state_dir = tmp_path / name
        run_campaign(small_cfg, corpora["cross_small"], weak_agent(), scenes["cross_small"], state_dir, Budget(executions=4))
        contents.append((state_dir / "records.jsonl").read_text(encoding="utf-8"))
    assert contents[0] == contents[1]


def test_journal_reload_matches_memory(tmp_path, small_cfg, corpora, scenes):
    state = CampaignState(tmp_path / "state")
    Fuzzer(small_cfg, corpora["cross_small"], scenes["cross_small"], weak_agent(), state).run(Budget(executions=5))
    assert CampaignState.load(state.state_dir).snapshot() == state.snapshot()


def test_existing_history_needs_resume(tmp_path, small_cfg, corpora, scenes):
    state_dir = tmp_path / "state"
    run_campaign(small_cfg, corpora["cross_small"], weak_agent(), scenes["cross_small"], state_dir, Budget(executions=1))
    with pytest.raises(ConfigError):
        run_campaign(small_cfg, corpora["cross_small"], weak_agent(), scenes["cross_small"], state_dir, Budget(executions=1))
    resumed = dataclasses.replace(small_cfg, resume=True)
    run_campaign(resumed, corpora["cross_small"], weak_agent(), scenes["cross_small"], state_dir, Budget(executions=2))
    assert len(CampaignState.load(state_dir).entries) == 3


def test_sem_strategy_trains_and_swaps(tmp_path, small_cfg, corpora, scenes):
    cfg = dataclasses.replace(
        small_cfg, strategy="2SMS+SEM", mutants=4, executed=2, retrain_every=2,
        sem=dataclasses.replace(small_cfg.sem, epochs=5),
    )
    state = CampaignState(tmp_path / "state")
    Fuzzer(cfg, corpora["cross_small"], scenes["cross_small"], weak_agent(), state).run(Budget(executions=4))
    assert state.sem_trained_on >= 2
    assert sorted(p.name for p in (state.state_dir / "sem").glob("*.ckpt"))
    cycles = read_events(state.campaign_path, "cycle")
    assert all(len(c["data"]["chosen"]) <= 2 for c in cycles)


class _FaultyAgent:
    name = "faulty"
    version = "0"

    def reset(self):
        pass

    def act(self, obs):
        raise RuntimeError("planner crashed")


def test_faults_draw_from_the_execution_budget(tmp_path, small_cfg, corpora, scenes):
    state = CampaignState(tmp_path / "state")
    report = Fuzzer(small_cfg, corpora["cross_small"], scenes["cross_small"], _FaultyAgent(), state).run(Budget(executions=1))
    assert report.executions == 0
    assert report.faults == 1
    assert state.entries == []
    assert not report.aborted


def test_consecutive_faults_stop_the_campaign(tmp_path, small_cfg, corpora, scenes):
    state = CampaignState(tmp_path / "state")
    report = Fuzzer(small_cfg, corpora["cross_small"], scenes["cross_small"], _FaultyAgent(), state).run(Budget(executions=500))
    assert report.aborted
    assert report.faults == MAX_CONSECUTIVE_FAULTS
    abort, = read_events(state.campaign_path, "abort")
    assert abort["data"] == {"reason": "agent_faults", "consecutive": MAX_CONSECUTIVE_FAULTS}
    assert read_events(state.campaign_path, "finish")[-1]["data"]["aborted"] is True


def acceptance_cfg(tmp_path, strategy, rng_seed):
    cfg = FuzzConfig.from_config(load_config(ACCEPTANCE, project_dir=tmp_path))
    mutants = 100 if strategy.endswith("+SEM") else 3
    return dataclasses.replace(
        cfg, strategy=strategy, mutants=mutants, rng_seed=rng_seed, sem=dataclasses.replace(cfg.sem, seed=rng_seed)
    )


@pytest.mark.slow
def test_acceptance_campaign_finds_crash_and_stuck(tmp_path, corpora, scenes):
    cfg = FuzzConfig.from_config(load_config(ACCEPTANCE, project_dir=tmp_path))
    report = run_campaign(cfg, corpora["cross_small"], weak_agent(), scenes["cross_small"], tmp_path / "state", Budget(executions=200))
    assert report.executions == 200
    assert report.by_kind["Crash"] >= 1
    assert report.by_kind["Stuck"] >= 1


@pytest.mark.slow
def test_two_stage_and_sem_order_the_median_error_counts(tmp_path, corpora, scenes):
    found = {s: [] for s in ("RMS", "2SMS", "2SMS+SEM")}
    for rng_seed in range(5):
        for strategy in found:
            cfg = acceptance_cfg(tmp_path, strategy, rng_seed)
            state_dir = tmp_path / f"{strategy}-{rng_seed}"
            report = run_campaign(cfg, corpora["cross_small"], weak_agent(), scenes["cross_small"], state_dir, Budget(executions=200))
            found[strategy].append(len(report.errors))
    median = {s: float(np.median(counts)) for s, counts in found.items()}
    assert median["2SMS+SEM"] >= median["2SMS"] >= median["RMS"], found
