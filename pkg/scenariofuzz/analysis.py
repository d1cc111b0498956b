"""
Post-campaign analysis: deterministic replay of stored error scenarios and
clustering of collision scenarios by the trajectories the ego and the struck
object shared before impact.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.spatial.distance import cdist
from sklearn.cluster import KMeans
from sklearn.metrics import silhouette_score
from sklearn.preprocessing import StandardScaler
from torch import nn

from .agents import make_agent
from .corpus import ScenarioSeed, corpus_path, load_corpus
from .errors import InsufficientData, MissingArtifacts, NoCollision, ShapeMismatch
from .mutation import ConcreteScenario
from .sem import DTYPE, SemConfig, SemModel, build_model, latest_checkpoint, load_checkpoint, preprocess_batch, scenario_to_graph
from .sim import Limits, Outcome, Trace, run_scenario
from .state import ERRORS_DIR, SEM_DIR, CampaignState, load_scene

logger = logging.getLogger(__name__)

WINDOW_SECONDS = 8.0
RESAMPLE_POINTS = 32
LATENT_DIM = 16
MIN_ENCODER_PAIRS = 16
MAX_CLUSTERS = 12
CLUSTERS_FILE = "clusters.json"


# ---------------------------------------------------------------- collision trajectories


@dataclass(frozen=True, eq=False)
class CollisionTrajectoryPair:
    error_id: str
    ego: np.ndarray
    obj: np.ndarray
    tick: int
    object_kind: str
    appearance: str

    def flat(self) -> np.ndarray:
        return np.concatenate([self.ego.ravel(), self.obj.ravel()])


def resample_polyline(points: np.ndarray, n: int = RESAMPLE_POINTS) -> np.ndarray:
    """`n` points equally spaced by arc length; a polyline that never moves gives `n` copies of its point."""
    points = np.asarray(points, dtype=float)
    steps = np.hypot(*np.diff(points, axis=0).T) if len(points) > 1 else np.zeros(0)
    keep = np.concatenate([[True], steps > 0.0])
    points = points[keep]
    if len(points) == 1:
        return np.repeat(points, n, axis=0)
    cum = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(points, axis=0).T))])
    stations = np.linspace(0.0, cum[-1], n)
    return np.column_stack([np.interp(stations, cum, points[:, 0]), np.interp(stations, cum, points[:, 1])])


def to_ego_frame(points: np.ndarray, x: float, y: float, heading: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    rel = np.asarray(points, dtype=float) - np.array([x, y])
    return rel @ np.array([[c, -s], [s, c]])


def _crash(trace: Trace, outcome: Outcome) -> Tuple[int, str]:
    for m in outcome.misbehaviors:
        if m.kind == "Crash":
            return m.tick, m.detail["entity"]
    for event in trace.events:
        if event.get("type") == "Crash":
            return event["tick"], event["entity"]
    raise NoCollision("trace holds no Crash")


def extract_collision_pair(trace: Trace, outcome: Outcome, error_id: str = "") -> CollisionTrajectoryPair:
    """Ego and struck-object paths over the last 8 s before impact, in the ego's starting frame."""
    tick, entity = _crash(trace, outcome)
    index = int(entity.split(".")[1])
    first = tick - int(round(WINDOW_SECONDS / trace.dt))
    frames = [f for f in trace.frames if first <= f.tick <= tick]
    if not frames:
        raise NoCollision(f"trace has no frames around the crash at tick {tick}")
    ego = np.array([[f.ego.x, f.ego.y] for f in frames])
    objs = [next(o for o in f.objects if o.index == index) for f in frames]
    obj = np.array([[o.x, o.y] for o in objs])
    origin = frames[0].ego
    spec = trace.scenario.objects[index]
    return CollisionTrajectoryPair(
        error_id=error_id,
        ego=resample_polyline(to_ego_frame(ego, origin.x, origin.y, origin.heading)),
        obj=resample_polyline(to_ego_frame(obj, origin.x, origin.y, origin.heading)),
        tick=tick,
        object_kind=spec.kind,
        appearance=spec.appearance.name,
    )


# ---------------------------------------------------------------- self-supervised encoder


class TrajectoryAutoencoder(nn.Module):
    def __init__(self, input_dim: int = 4 * RESAMPLE_POINTS, latent_dim: int = LATENT_DIM, hidden: int = 64):
        super().__init__()
        self.encoder = nn.Sequential(nn.Linear(input_dim, hidden), nn.Tanh(), nn.Linear(hidden, latent_dim))
        self.decoder = nn.Sequential(nn.Linear(latent_dim, hidden), nn.Tanh(), nn.Linear(hidden, input_dim))
        self.to(DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))


@dataclass(eq=False)
class TrajectoryEncoder:
    model: TrajectoryAutoencoder
    scaler: StandardScaler
    loss: float
    target: float
    epochs: int

    def _inputs(self, pairs: Sequence[CollisionTrajectoryPair]) -> torch.Tensor:
        return torch.as_tensor(self.scaler.transform(np.stack([p.flat() for p in pairs])), dtype=DTYPE)

    def encode(self, pairs: Sequence[CollisionTrajectoryPair]) -> np.ndarray:
        self.model.eval()
        with torch.no_grad():
            return self.model.encoder(self._inputs(pairs)).numpy()

    def reconstruction_error(self, pairs: Sequence[CollisionTrajectoryPair]) -> float:
        self.model.eval()
        x = self._inputs(pairs)
        with torch.no_grad():
            return float(torch.mean((self.model(x) - x) ** 2))


def train_trajectory_encoder(
    pairs: Sequence[CollisionTrajectoryPair],
    seed: int = 0,
    max_epochs: int = 3000,
    min_epochs: int = 300,
    lr: float = 1e-3,
) -> TrajectoryEncoder:
    """Fit the autoencoder until its MSE is at most half the input variance (after `min_epochs`)."""
    if len(pairs) < MIN_ENCODER_PAIRS:
        raise InsufficientData(f"trajectory encoder needs at least {MIN_ENCODER_PAIRS} collision pairs, got {len(pairs)}")
    raw = np.stack([p.flat() for p in pairs])
    scaler = StandardScaler().fit(raw)
    x = torch.as_tensor(scaler.transform(raw), dtype=DTYPE)
    variance = float(x.var(dim=0, unbiased=False).mean())
    target = 0.5 * variance if variance > 0 else 1e-6

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = TrajectoryAutoencoder()
        optimizer = torch.optim.Adam(model.parameters(), lr=lr)
        model.train()
        loss = math.inf
        epoch = 0
        for epoch in range(1, max_epochs + 1):
            optimizer.zero_grad()
            err = torch.mean((model(x) - x) ** 2)
            err.backward()
            optimizer.step()
            loss = float(err.item())
            if epoch >= min_epochs and loss <= target:
                break
    model.eval()
    if loss > target:
        logger.warning("Trajectory encoder stopped at MSE %.5f above target %.5f after %d epochs", loss, target, epoch)
    else:
        logger.info("Trajectory encoder reached MSE %.5f (target %.5f) in %d epochs", loss, target, epoch)
    return TrajectoryEncoder(model, scaler, loss, target, epoch)


def sem_features(model: SemModel, scenarios: Sequence[ConcreteScenario], seeds: Mapping[str, ScenarioSeed]) -> np.ndarray:
    """Pooled SEM graph vectors, one row per scenario."""
    graphs = [scenario_to_graph(sc, seeds[sc.seed_id]) for sc in scenarios]
    model.eval()
    with torch.no_grad():
        return model.embed(preprocess_batch(graphs)).numpy()


def fuse_features(latents: np.ndarray, embeddings: np.ndarray) -> np.ndarray:
    latents, embeddings = np.asarray(latents, dtype=float), np.asarray(embeddings, dtype=float)
    if latents.ndim != 2 or embeddings.ndim != 2 or len(latents) != len(embeddings):
        raise ShapeMismatch(f"cannot fuse {latents.shape} latents with {embeddings.shape} embeddings")
    fused = np.hstack([latents, embeddings])
    if not np.all(np.isfinite(fused)):
        raise ShapeMismatch("fused features hold non-finite values")
    return fused


# ---------------------------------------------------------------- clustering


@dataclass
class Cluster:
    label: int
    members: List[str]
    medoid: str


@dataclass
class ClusterResult:
    k: int
    labels: List[int]
    clusters: List[Cluster]
    silhouette: Optional[float] = None
    degenerate: bool = False
    scores: Dict[int, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "silhouette": self.silhouette,
            "degenerate": self.degenerate,
            "silhouette_by_k": {str(k): v for k, v in sorted(self.scores.items())},
            "clusters": [
                {
                    "label": c.label,
                    "size": len(c.members),
                    "members": c.members,
                    "medoid": c.medoid,
                    "medoid_trace": f"{ERRORS_DIR}/{c.medoid}/trace.jsonl",
                }
                for c in self.clusters
            ],
        }


def _kmeans(x: np.ndarray, k: int, seed: int) -> np.ndarray:
    return KMeans(n_clusters=k, init="k-means++", n_init=10, random_state=seed).fit_predict(x)


def _first_seen(labels: np.ndarray) -> np.ndarray:
    order: Dict[int, int] = {}
    for label in labels:
        order.setdefault(int(label), len(order))
    return np.array([order[int(label)] for label in labels])


def cluster_error_scenarios(
    features: np.ndarray,
    ids: Sequence[str],
    k: Optional[int] = None,
    seed: int = 0,
) -> ClusterResult:
    """k-means over standardized features; k by best silhouette in [2, min(12, n-1)] unless given."""
    x = np.asarray(features, dtype=float)
    if x.ndim != 2 or len(x) < 2:
        raise InsufficientData(f"clustering needs at least 2 feature vectors, got {len(x)}")
    if len(ids) != len(x):
        raise ShapeMismatch(f"{len(ids)} ids for {len(x)} feature vectors")
    x = StandardScaler().fit_transform(x)
    n = len(x)
    distinct = len(np.unique(np.round(x, 12), axis=0))

    scores: Dict[int, float] = {}
    if distinct == 1:
        labels = np.zeros(n, dtype=int)
    elif k is not None:
        labels = _kmeans(x, min(max(k, 1), distinct), seed)
    else:
        candidates = range(2, max(2, min(MAX_CLUSTERS, n - 1, distinct)) + 1)
        best: Optional[Tuple[float, int, np.ndarray]] = None
        for candidate in candidates:
            found = _kmeans(x, candidate, seed)
            if not 2 <= len(set(found)) <= n - 1:
                best = best or (-math.inf, candidate, found)
                continue
            scores[candidate] = float(silhouette_score(x, found))
            if best is None or scores[candidate] > best[0]:
                best = (scores[candidate], candidate, found)
        labels = best[2]
    labels = _first_seen(labels)

    clusters = []
    for label in range(int(labels.max()) + 1):
        idx = np.flatnonzero(labels == label)
        within = cdist(x[idx], x[idx]).sum(axis=1)
        clusters.append(Cluster(label, [ids[i] for i in idx], ids[idx[int(np.argmin(within))]]))
    k_found = len(clusters)
    silhouette = float(silhouette_score(x, labels)) if 2 <= k_found <= n - 1 else None
    degenerate = distinct == 1
    if degenerate:
        logger.warning("All %d feature vectors coincide; reporting a single degenerate cluster", n)
    logger.info("Clustered %d error scenarios into %d clusters (silhouette %s)", n, k_found, silhouette)
    return ClusterResult(k_found, labels.tolist(), clusters, silhouette, degenerate, scores)


def _seed_table(state_dir: Path, scenarios: Sequence[ConcreteScenario]) -> Dict[str, ScenarioSeed]:
    seeds: Dict[str, ScenarioSeed] = {}
    for map_name in sorted({sc.seed_id.rsplit("-", 1)[0] for sc in scenarios}):
        path = corpus_path(state_dir, map_name)
        if not path.exists():
            raise MissingArtifacts(f"{path} is missing; rebuild it with `scenariofuzz corpus build`")
        seeds.update({s.seed_id: s for s in load_corpus(path).seeds})
    return seeds


def _sem_model(state_dir: Path, seed: int) -> SemModel:
    ckpt = latest_checkpoint(Path(state_dir) / SEM_DIR)
    if ckpt is None:
        logger.warning("No SEM checkpoint in %s; using an untrained model for SEM features", state_dir)
        return build_model(SemConfig(seed=seed))
    return load_checkpoint(ckpt)[0]


def analyze_errors(
    state_dir: Path,
    system: Optional[str] = None,
    k: Optional[int] = None,
    seed: int = 0,
) -> ClusterResult:
    """Cluster every stored collision scenario (optionally of one agent) and write clusters.json."""
    state_dir = Path(state_dir)
    state = CampaignState.load(state_dir)
    pairs, scenarios = [], []
    for entry in state.entries:
        if entry.error_id is None or "Crash" not in entry.kinds:
            continue
        if system is not None and entry.record.system != system:
            continue
        trace, outcome = Trace.read(state.error_dir(entry.error_id))
        pairs.append(extract_collision_pair(trace, outcome, entry.error_id))
        scenarios.append(trace.scenario)
    logger.info("Found %d collision scenarios to cluster", len(pairs))

    encoder = train_trajectory_encoder(pairs, seed=seed)
    features = fuse_features(encoder.encode(pairs), sem_features(_sem_model(state_dir, seed), scenarios, _seed_table(state_dir, scenarios)))
    result = cluster_error_scenarios(features, [p.error_id for p in pairs], k=k, seed=seed)
    body = result.to_dict()
    body["system"] = system
    (state_dir / CLUSTERS_FILE).write_text(json.dumps(body, sort_keys=True, indent=1), encoding="utf-8")
    return result


# ---------------------------------------------------------------- replay


@dataclass
class ReplayReport:
    error_id: str
    passed: bool
    frames_compared: int
    first_divergence: Optional[int] = None
    max_deviation: float = 0.0
    version_mismatch: bool = False
    outcome_match: bool = True

    def to_dict(self) -> dict:
        return {
            "error_id": self.error_id,
            "passed": self.passed,
            "frames_compared": self.frames_compared,
            "first_divergence": self.first_divergence,
            "max_deviation": self.max_deviation,
            "version_mismatch": self.version_mismatch,
            "outcome_match": self.outcome_match,
        }


def _deviation(a, b) -> float:
    worst = math.hypot(a.ego.x - b.ego.x, a.ego.y - b.ego.y)
    for oa, ob in zip(a.objects, b.objects):
        worst = max(worst, math.hypot(oa.x - ob.x, oa.y - ob.y))
    return worst


def replay(error_id: str, state_dir: Path, agent_settings: Optional[Dict] = None, agent=None) -> ReplayReport:
    """Re-run a stored error scenario with its rng seed and compare every frame with the stored trace."""
    state_dir = Path(state_dir)
    directory = state_dir / ERRORS_DIR / error_id
    if not (directory / "meta.json").exists():
        raise MissingArtifacts(f"{directory} lacks meta.json")
    meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
    stored, stored_outcome = Trace.read(directory)
    scene = load_scene(state_dir, meta["map"])
    if agent is None:
        agent = make_agent(meta["system"].split(":", 1)[0], agent_settings)
    mismatch = agent.version != stored.agent_version
    if mismatch:
        logger.warning("Replaying %s with agent version %s, recorded with %s", error_id, agent.version, stored.agent_version)
    limits = Limits(**stored.limits) if stored.limits else Limits(dt=stored.dt)
    fresh, fresh_outcome = run_scenario(stored.scenario, agent, scene, limits, stored.rng_seed)

    first, worst = None, 0.0
    for a, b in zip(stored.frames, fresh.frames):
        worst = max(worst, _deviation(a, b))
        if first is None and a.to_json() != b.to_json():
            first = b.tick
    compared = min(len(stored.frames), len(fresh.frames))
    if first is None and len(stored.frames) != len(fresh.frames):
        first = compared
    outcome_match = stored_outcome.to_dict() == json.loads(json.dumps(fresh_outcome.to_dict()))
    passed = first is None and outcome_match
    report = ReplayReport(error_id, passed, compared, first, worst, mismatch, outcome_match)
    logger.info("Replay %s: %s (max deviation %.3g m)", error_id, "PASS" if passed else "FAIL", worst)
    return report
