"""
Campaign loop: seed queue, two-stage mutation cycles, SEM filtering,
execution, best-seed propagation, roulette re-queueing and incremental
SEM retraining.
"""
from __future__ import annotations

import logging
import math
import re
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .corpus import SeedCorpus, SeedFilter, ScenarioSeed, select_seed
from .errors import AgentFault, ConfigError, SpawnCollision
from .mutation import ConcreteScenario, MutationOptions, Strategy, mutate_scenario, spawn_rng
from .sem import (
    SemConfig,
    SemModel,
    TestRecord,
    build_model,
    filter_seeds,
    latest_checkpoint,
    load_checkpoint,
    save_checkpoint,
    score_mutants,
    train,
)
from .sim import MISBEHAVIOR_KINDS, Limits, Scene, run_scenario
from .state import SEM_DIR, CampaignState

logger = logging.getLogger(__name__)

STRATEGIES = ("RMS", "2SMS", "RMS+SEM", "2SMS+SEM")
MAX_CONSECUTIVE_FAULTS = 20
MAX_CONSECUTIVE_SKIPS = 200


@dataclass
class FuzzConfig:
    strategy: str = "2SMS+SEM"
    cycles: int = 3
    mutants: Optional[int] = None
    executed: int = 3
    retrain_every: int = 1000
    rng_seed: int = 0
    seed_filter: SeedFilter = field(default_factory=SeedFilter)
    limits: Limits = field(default_factory=Limits)
    sem: SemConfig = field(default_factory=SemConfig)
    mutation: MutationOptions = field(default_factory=MutationOptions)
    resume: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"campaign.strategy must be one of {', '.join(STRATEGIES)}, got {self.strategy!r}")
        if self.mutants is None:
            self.mutants = 100 if self.use_sem else 3
        for name in ("cycles", "mutants", "executed", "retrain_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"campaign.{name} must be >= 1")
        if self.executed > self.mutants:
            raise ConfigError(f"campaign.executed ({self.executed}) must not exceed campaign.mutants ({self.mutants})")

    @property
    def use_sem(self) -> bool:
        return self.strategy.endswith("+SEM")

    @property
    def two_stage(self) -> bool:
        return self.strategy.startswith("2SMS")

    @classmethod
    def from_config(cls, config: dict) -> "FuzzConfig":
        c = config["campaign"]
        f = config["filter"]
        sem = dict(config["sem"])
        sem.setdefault("seed", c["rng_seed"])
        return cls(
            strategy=c["strategy"],
            cycles=c["cycles"],
            mutants=c["mutants"],
            executed=c["executed"],
            retrain_every=c["retrain_every"],
            rng_seed=c["rng_seed"],
            seed_filter=SeedFilter(c.get("map"), f["road_type"], f["traffic_light"], f["sign_kind"]),
            limits=Limits(**config["limits"]),
            sem=SemConfig(**sem),
            mutation=MutationOptions(**config["mutation"]),
            resume=c["resume"],
        )


@dataclass
class Budget:
    executions: Optional[int] = None
    seconds: Optional[float] = None

    _UNITS = {"s": 1.0, "m": 60.0, "h": 3600.0}

    @classmethod
    def parse(cls, text: str) -> "Budget":
        """`200` is an execution count; `90s`, `10m`, `2h` are wall-clock durations."""
        text = str(text).strip()
        if text.isdigit():
            return cls(executions=int(text))
        m = re.fullmatch(r"(\d+(?:\.\d+)?)([smh])", text)
        if not m:
            raise ConfigError(f"budget must be a count or a duration like 10m, got {text!r}")
        return cls(seconds=float(m.group(1)) * cls._UNITS[m.group(2)])

    def is_zero(self) -> bool:
        return self.executions == 0 or self.seconds == 0


@dataclass
class CampaignReport:
    executions: int = 0
    errors: List[str] = field(default_factory=list)
    by_kind: Dict[str, int] = field(default_factory=lambda: {k: 0 for k in MISBEHAVIOR_KINDS})
    by_system: Dict[str, Dict[str, int]] = field(default_factory=dict)
    timeline: List[Tuple[int, str]] = field(default_factory=list)
    faults: int = 0
    skipped: int = 0
    aborted: bool = False
    mean_seconds: float = 0.0

    def to_dict(self) -> dict:
        """Deterministic part of the report; timings live in timing.json."""
        return {
            "executions": self.executions,
            "errors": list(self.errors),
            "by_kind": dict(self.by_kind),
            "by_system": {k: dict(v) for k, v in self.by_system.items()},
            "timeline": [list(t) for t in self.timeline],
            "faults": self.faults,
            "skipped": self.skipped,
            "aborted": self.aborted,
        }


def check_frequency(frequency: int, rng: np.random.Generator) -> bool:
    """Roulette re-queue with probability 1 / (1 + f), f = earlier selections of the seed."""
    if frequency < 0:
        raise ValueError("frequency must be >= 0")
    return bool(rng.random() < 1.0 / (1.0 + frequency))


def execution_seed(campaign_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(campaign_seed), int(index)]).generate_state(1)[0])


class Fuzzer:
    """Single-owner campaign driver over one corpus and one agent."""

    def __init__(self, cfg: FuzzConfig, corpus: SeedCorpus, scene: Scene, agent, state: CampaignState):
        self.cfg = cfg
        self.corpus = corpus
        self.scene = scene
        self.agent = agent
        self.state = state
        self.seeds = {s.seed_id: s for s in corpus.seeds}
        self.model: Optional[SemModel] = None
        self._pool: Optional[ThreadPoolExecutor] = None
        self._training: Optional[Future] = None
        self._report = CampaignReport()
        self._budget = Budget()
        self._deadline = math.inf
        self._budget_start = 0
        self._consecutive_faults = 0
        self._consecutive_skips = 0

    # -------------------------------------------------------------- SEM

    def _initial_model(self) -> SemModel:
        ckpt = latest_checkpoint(self.state.state_dir / SEM_DIR)
        if ckpt is not None and self.state.sem_trained_on:
            model, trained_on = load_checkpoint(ckpt)
            logger.info("Resuming with SEM checkpoint %s (trained on %d records)", ckpt, trained_on)
            return model
        return build_model(self.cfg.sem)

    def _train_job(self, records: List[TestRecord]):
        model = build_model(self.cfg.sem)
        model, metrics = train(model, records, self.seeds)
        path = save_checkpoint(model, self.state.state_dir / SEM_DIR / f"{len(records)}.ckpt", len(records))
        return model, metrics, len(records), path

    def _maybe_retrain(self) -> None:
        n = len(self.state.entries)
        if not self.cfg.use_sem or n % self.cfg.retrain_every != 0:
            return
        records = [r for r, e in zip(self.state.records, self.state.entries) if e.seed_id in self.seeds]
        if len(records) < 2:
            return
        if self._training is not None:
            self._swap_model()
        logger.info("Submitting SEM training on %d records", len(records))
        self._training = self._pool.submit(self._train_job, records)

    def _swap_model(self) -> None:
        """Wait for pending training and publish the new snapshot."""
        if self._training is None:
            return
        model, metrics, trained_on, path = self._training.result()
        self._training = None
        self.model = model
        self.state.sem_swapped(trained_on, path, {k: v for k, v in metrics.as_dict().items() if k != "train_loss"})
        logger.info("SEM snapshot swapped (trained on %d records, val acc %.3f)", trained_on, metrics.accuracy)

    # -------------------------------------------------------------- budget

    def _attempts(self) -> int:
        """Executions and agent faults draw from the budget; spawn clashes never ran the agent."""
        return len(self.state.entries) - self._budget_start + self._report.faults

    def _exhausted(self) -> bool:
        if self._report.aborted:
            return True
        if self._budget.executions is not None and self._attempts() >= self._budget.executions:
            return True
        return time.monotonic() >= self._deadline

    # -------------------------------------------------------------- fuzzing

    def _abort(self, reason: str, count: int) -> None:
        logger.error("Stopping campaign after %d consecutive %s", count, reason.replace("_", " "))
        self.state.log("abort", {"reason": reason, "consecutive": count})
        self._report.aborted = True

    def _execute(self, seed: ScenarioSeed, cycle: int, mutant: ConcreteScenario):
        index = len(self.state.entries)
        rng_seed = execution_seed(self.cfg.rng_seed, index + self._report.skipped + self._report.faults)
        started = time.perf_counter()
        try:
            trace, outcome = run_scenario(mutant, self.agent, self.scene, self.cfg.limits, rng_seed)
        except SpawnCollision as e:
            logger.warning("Skipping mutant %s: %s", mutant.digest()[:10], e)
            self.state.log("skip", {"seed": seed.seed_id, "scenario": mutant.digest(), "reason": str(e)})
            self._report.skipped += 1
            self._consecutive_skips += 1
            if self._consecutive_skips >= MAX_CONSECUTIVE_SKIPS:
                self._abort("spawn_clashes", self._consecutive_skips)
            return None
        except AgentFault as e:
            logger.error("Agent fault on %s at tick %d: %s", mutant.digest()[:10], e.tick, e)
            self.state.log("fault", {"seed": seed.seed_id, "scenario": mutant.digest(), "tick": e.tick, "message": str(e)})
            self._report.faults += 1
            self._consecutive_faults += 1
            if self._consecutive_faults >= MAX_CONSECUTIVE_FAULTS:
                self._abort("agent_faults", self._consecutive_faults)
            return None
        self._consecutive_faults = self._consecutive_skips = 0
        record = TestRecord(mutant, outcome.is_error, self.agent.name, outcome.score)
        entry = self.state.record_test(seed.seed_id, cycle, record, outcome, trace, time.perf_counter() - started)
        self._report.executions += 1
        if entry.error_id is not None:
            self._report.errors.append(entry.error_id)
            self._report.timeline.append((entry.index, entry.error_id))
            per_system = self._report.by_system.setdefault(self.agent.name, {k: 0 for k in MISBEHAVIOR_KINDS})
            for kind in entry.kinds:
                self._report.by_kind[kind] += 1
                per_system[kind] += 1
        self._maybe_retrain()
        return outcome, entry

    def fuzz_one_seed(self, seed: ScenarioSeed) -> Optional[str]:
        """Up to N_c mutation cycles on one seed; returns the first error id found."""
        reference: Optional[ConcreteScenario] = None
        best = math.inf
        for cycle in range(self.cfg.cycles):
            self._swap_model()
            neighbor = self.cfg.two_stage and cycle > 0 and reference is not None
            strategy = Strategy.NEIGHBOR if neighbor else Strategy.RANDOM
            number = self.state.cycles_run
            mutants = [
                mutate_scenario(seed, strategy, reference, spawn_rng(self.cfg.rng_seed, number, i), self.cfg.mutation)
                for i in range(self.cfg.mutants)
            ]
            if self.cfg.use_sem:
                chosen = filter_seeds(score_mutants(self.model, mutants, seed), self.cfg.executed)
            else:
                chosen = list(range(len(mutants)))
            self.state.start_cycle(seed.seed_id, cycle, strategy.value, [m.digest() for m in mutants], chosen)
            for i in chosen:
                if self._exhausted():
                    return None
                result = self._execute(seed, cycle, mutants[i])
                if result is None:
                    continue
                outcome, entry = result
                if entry.error_id is not None:
                    return entry.error_id
                if outcome.score is not None and outcome.score < best:
                    best, reference = outcome.score, mutants[i]
        return None

    def run(self, budget: Budget) -> CampaignReport:
        """Drain and replenish the seed queue until the budget is spent."""
        self._report = CampaignReport()
        self._consecutive_faults = self._consecutive_skips = 0
        if budget.is_zero():
            return self._report
        self._budget = budget
        self._budget_start = len(self.state.entries)
        self._deadline = time.monotonic() + budget.seconds if budget.seconds is not None else math.inf
        rng = np.random.default_rng([int(self.cfg.rng_seed), self.state.cycles_run])
        self.model = self._initial_model() if self.cfg.use_sem else None
        self.state.log("start", {"strategy": self.cfg.strategy, "agent": self.agent.name, "rng_seed": self.cfg.rng_seed})
        with ThreadPoolExecutor(max_workers=1, thread_name_prefix="sem-train") as pool:
            self._pool = pool
            try:
                while not self._exhausted():
                    if not self.state.queue:
                        self.state.enqueue(select_seed(self.corpus, self.cfg.seed_filter, rng).seed_id, "replenish")
                    seed_id = self.state.dequeue()
                    found = self.fuzz_one_seed(self.seeds[seed_id])
                    if found is not None and check_frequency(self.state.frequency[seed_id] - 1, rng):
                        self.state.enqueue(seed_id, "roulette")
            finally:
                self._swap_model()
                self._pool = None
        if self.state.exec_seconds:
            self._report.mean_seconds = float(np.mean(self.state.exec_seconds[self._budget_start:] or [0.0]))
        self.state.log("finish", self._report.to_dict())
        logger.info(
            "Campaign finished: %d executions, %d errors %s",
            self._report.executions, len(self._report.errors), {k: v for k, v in self._report.by_kind.items() if v},
        )
        return self._report


def run_campaign(
    cfg: FuzzConfig,
    corpus: SeedCorpus,
    agent,
    scene: Scene,
    state_dir: Path,
    budget: Budget,
) -> CampaignReport:
    state_dir = Path(state_dir)
    if budget.is_zero():
        return CampaignReport()
    state = CampaignState.load(state_dir) if cfg.resume else CampaignState(state_dir)
    if not cfg.resume and state.has_history():
        raise ConfigError(f"{state_dir} already holds a campaign; pass --resume or pick another --state-dir")
    return Fuzzer(cfg, corpus, scene, agent, state).run(budget)
