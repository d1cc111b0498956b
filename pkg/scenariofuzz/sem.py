"""
Scenario Evaluation Model.

A concrete scenario is turned into a graph over its seed's waypoints and
traffic lights: entity placements become node features, the paths the ego and
the objects use become featured edges, and the weather travels alongside as a
global vector. A small graph-attention network scores each graph with the
confidence that executing it will end in a misbehavior.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import ScenarioSeed, direction_label
from .errors import ConfigError, DegenerateLabels, InconsistentSeed, InsufficientData, ShapeMismatch
from .mutation import ActionKind, ConcreteScenario, ObjectKind

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
DTYPE = torch.float64

NODE_DEFAULT, NODE_LIGHT, NODE_EGO_START, NODE_EGO_END, NODE_VEHICLE, NODE_PEDESTRIAN = range(6)
NODE_TYPES = 6
SIGN_CODES = {"speedLimit": 1, "stop": 2, "yield": 3}
SIGN_TYPES = 4
APPEARANCE_CODES = 27
EDGE_DEFAULT, EDGE_EGO, EDGE_VEHICLE, EDGE_PEDESTRIAN = range(4)
EDGE_TYPES = 4
DIRECTION_CODES = {"Left": 0, "Right": 1, "Straight": 2, "Unknown": 3}
WEATHER_DIM = 8
EDGE_FEATURES = 1 + EDGE_TYPES + len(DIRECTION_CODES)


@dataclass(eq=False)
class ScenarioGraph:
    node_keys: Tuple[str, ...]
    rel_pos: np.ndarray
    node_type: np.ndarray
    sign_type: np.ndarray
    appearance: np.ndarray
    edge_index: np.ndarray
    distance: np.ndarray
    edge_type: np.ndarray
    direction: np.ndarray
    weather: np.ndarray

    @property
    def num_nodes(self) -> int:
        return len(self.node_keys)

    @property
    def num_edges(self) -> int:
        return int(self.edge_index.shape[1])

    def permuted(self, order: Sequence[int]) -> "ScenarioGraph":
        """The same graph with nodes listed in `order` (new position i holds old node order[i])."""
        order = np.asarray(order, dtype=int)
        inverse = np.empty_like(order)
        inverse[order] = np.arange(len(order))
        return ScenarioGraph(
            node_keys=tuple(self.node_keys[i] for i in order),
            rel_pos=self.rel_pos[order],
            node_type=self.node_type[order],
            sign_type=self.sign_type[order],
            appearance=self.appearance[order],
            edge_index=inverse[self.edge_index],
            distance=self.distance.copy(),
            edge_type=self.edge_type.copy(),
            direction=self.direction.copy(),
            weather=self.weather.copy(),
        )


@dataclass
class TestRecord:
    scenario: ConcreteScenario
    label: bool
    system: str = "basic"
    score: Optional[float] = None

    __test__ = False

    def digest(self) -> str:
        return self.scenario.digest()


def _check_membership(sc: ConcreteScenario, seed: ScenarioSeed) -> None:
    if sc.seed_id != seed.seed_id:
        raise InconsistentSeed(f"scenario belongs to seed {sc.seed_id}, not {seed.seed_id}")
    used = list(sc.mission.path) + [sc.mission.start]
    for obj in sc.objects:
        used.extend(obj.path)
        used.append(obj.spawn)
    used.extend(p.waypoint for p in sc.puddles)
    missing = sorted({w for w in used if not seed.has_waypoint(w)})
    if missing:
        raise InconsistentSeed(f"scenario references waypoints outside seed {seed.seed_id}: {missing[:5]}")


def _legs(path: Sequence[int], cuts: set) -> List[Tuple[int, int]]:
    """Split a path into legs ending at every node in `cuts` and at the path end."""
    legs, start = [], 0
    for i in range(1, len(path)):
        if path[i] in cuts or i == len(path) - 1:
            legs.append((start, i))
            start = i
    return legs


def scenario_to_graph(sc: ConcreteScenario, seed: ScenarioSeed) -> ScenarioGraph:
    _check_membership(sc, seed)
    ego = seed.waypoint(sc.mission.start)
    keys = [f"w{w.id}" for w in seed.waypoints] + [f"l{t.id}" for t in seed.traffic_lights]
    index = {w.id: i for i, w in enumerate(seed.waypoints)}
    n = len(keys)

    pos = np.array(
        [[w.x, w.y, w.z] for w in seed.waypoints] + [[t.x, t.y, t.z] for t in seed.traffic_lights], dtype=float
    ).reshape(n, 3)
    rel_pos = pos - np.array([ego.x, ego.y, ego.z])
    node_type = np.full(n, NODE_DEFAULT, dtype=np.int64)
    node_type[len(seed.waypoints):] = NODE_LIGHT
    sign_type = np.zeros(n, dtype=np.int64)
    appearance = np.zeros(n, dtype=np.int64)

    for sign in seed.extras.signs:
        sign_type[index[sign.waypoint]] = SIGN_CODES.get(sign.kind, 0)
    for obj in sc.objects:
        k = index[obj.spawn]
        node_type[k] = NODE_PEDESTRIAN if obj.kind == ObjectKind.PEDESTRIAN.value else NODE_VEHICLE
        appearance[k] = obj.appearance_id + 1
    for wid, code in ((sc.mission.start, NODE_EGO_START), (sc.mission.path[-1], NODE_EGO_END)):
        k = index[wid]
        if node_type[k] in (NODE_VEHICLE, NODE_PEDESTRIAN):
            logger.warning("Waypoint %d hosts both the ego mission and an object; keeping the ego role", wid)
            appearance[k] = 0
        node_type[k] = code

    cuts = {seed.waypoints[i].id for i in range(len(seed.waypoints)) if node_type[i] != NODE_DEFAULT or sign_type[i] != 0}
    used = [(sc.mission.path, EDGE_EGO)]
    for obj in sc.objects:
        if obj.action.kind == ActionKind.IMMOBILE.value:
            continue
        if obj.kind == ObjectKind.PEDESTRIAN.value:
            used.append((obj.path, EDGE_PEDESTRIAN))
        else:
            used.append((obj.route_from_spawn(), EDGE_VEHICLE))

    src, dst, dist, etype, direction = [], [], [], [], []
    for path, code in used:
        for a, b in _legs(path, cuts):
            u, v = index[path[a]], index[path[b]]
            d = float(np.linalg.norm(pos[v] - pos[u]))
            if d <= 0.0:
                continue
            arc = float(sum(np.linalg.norm(pos[index[path[i + 1]]] - pos[index[path[i]]]) for i in range(a, b)))
            turn = seed.waypoint(path[b]).heading - seed.waypoint(path[a]).heading
            src.append(u)
            dst.append(v)
            dist.append(d)
            etype.append(code)
            direction.append(DIRECTION_CODES[direction_label(turn, arc).value])

    return ScenarioGraph(
        node_keys=tuple(keys),
        rel_pos=rel_pos,
        node_type=node_type,
        sign_type=sign_type,
        appearance=appearance,
        edge_index=np.array([src, dst], dtype=np.int64).reshape(2, len(src)),
        distance=np.array(dist, dtype=float),
        edge_type=np.array(etype, dtype=np.int64),
        direction=np.array(direction, dtype=np.int64),
        weather=np.array(sc.weather.vector(), dtype=float),
    )


# ---------------------------------------------------------------- batching


@dataclass(eq=False)
class GraphBatch:
    pos: torch.Tensor
    node_type: torch.Tensor
    sign_type: torch.Tensor
    appearance: torch.Tensor
    edge_index: torch.Tensor
    edge_attr: torch.Tensor
    batch: torch.Tensor
    weather: torch.Tensor
    num_graphs: int
    stats: Dict[str, np.ndarray] = field(default_factory=dict)

    def restore_positions(self) -> np.ndarray:
        return self.pos.detach().numpy() * self.stats["pos_std"] + self.stats["pos_mean"]

    def restore_weather(self) -> np.ndarray:
        return self.weather.detach().numpy() * self.stats["weather_std"] + self.stats["weather_mean"]

    def restore_distances(self) -> np.ndarray:
        return self.edge_attr[:, 0].detach().numpy() * self.stats["dist_max"]


def _standardize(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    safe = np.where(std > 0, std, 1.0)
    out = np.where(std > 0, (values - mean) / safe, 0.0)
    # zero-variance dims restore to the mean
    return out, mean, np.where(std > 0, std, 0.0)


def preprocess_batch(graphs: Sequence[ScenarioGraph]) -> GraphBatch:
    """Stack graphs, z-score positions and weather across the batch, scale distances into (0, 1]."""
    if not graphs:
        raise ValueError("cannot preprocess an empty batch")
    offsets = np.cumsum([0] + [g.num_nodes for g in graphs[:-1]])
    pos, pos_mean, pos_std = _standardize(np.concatenate([g.rel_pos for g in graphs]))
    weather, w_mean, w_std = _standardize(np.stack([g.weather for g in graphs]))
    distance = np.concatenate([g.distance for g in graphs])
    dist_max = float(distance.max()) if distance.size else 1.0
    edge_index = np.concatenate([g.edge_index + off for g, off in zip(graphs, offsets)], axis=1)
    edge_attr = np.concatenate(
        [
            (distance / dist_max)[:, None],
            np.eye(EDGE_TYPES)[np.concatenate([g.edge_type for g in graphs])].reshape(-1, EDGE_TYPES),
            np.eye(len(DIRECTION_CODES))[np.concatenate([g.direction for g in graphs])].reshape(-1, len(DIRECTION_CODES)),
        ],
        axis=1,
    )
    return GraphBatch(
        pos=torch.as_tensor(pos, dtype=DTYPE),
        node_type=torch.as_tensor(np.concatenate([g.node_type for g in graphs]), dtype=torch.long),
        sign_type=torch.as_tensor(np.concatenate([g.sign_type for g in graphs]), dtype=torch.long),
        appearance=torch.as_tensor(np.concatenate([g.appearance for g in graphs]), dtype=torch.long),
        edge_index=torch.as_tensor(edge_index, dtype=torch.long),
        edge_attr=torch.as_tensor(edge_attr, dtype=DTYPE),
        batch=torch.as_tensor(np.repeat(np.arange(len(graphs)), [g.num_nodes for g in graphs]), dtype=torch.long),
        weather=torch.as_tensor(weather, dtype=DTYPE),
        num_graphs=len(graphs),
        stats={"pos_mean": pos_mean, "pos_std": pos_std, "weather_mean": w_mean, "weather_std": w_std, "dist_max": dist_max},
    )


# ---------------------------------------------------------------- model


@dataclass
class SemConfig:
    hidden: int = 64
    heads: int = 4
    dropout: float = 0.1
    lr: float = 1e-3
    epochs: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigError(f"sem.hidden ({self.hidden}) must be divisible by sem.heads ({self.heads})")


def _segment_softmax(logits: torch.Tensor, index: torch.Tensor, size: int) -> torch.Tensor:
    expanded = index.unsqueeze(-1).expand_as(logits)
    peak = torch.full((size, logits.size(1)), -math.inf, dtype=logits.dtype).scatter_reduce(
        0, expanded, logits, reduce="amax", include_self=True
    )
    exp = torch.exp(logits - peak.detach()[index])
    total = torch.zeros((size, logits.size(1)), dtype=logits.dtype).index_add(0, index, exp)
    return exp / total[index]


class GraphAttentionLayer(nn.Module):
    """Multi-head attention message passing with edge features in the attention logits."""

    def __init__(self, in_dim: int, out_dim: int, heads: int, edge_dim: int, dropout: float):
        super().__init__()
        self.heads, self.channels = heads, out_dim // heads
        self.edge_dim = edge_dim
        self.dropout = dropout
        self.lin = nn.Linear(in_dim, heads * self.channels, bias=False)
        self.lin_edge = nn.Linear(edge_dim, heads, bias=False)
        self.att_src = nn.Parameter(torch.empty(1, heads, self.channels))
        self.att_dst = nn.Parameter(torch.empty(1, heads, self.channels))
        self.bias = nn.Parameter(torch.zeros(heads * self.channels))
        nn.init.xavier_uniform_(self.att_src)
        nn.init.xavier_uniform_(self.att_dst)

    def forward(self, x: torch.Tensor, edge_index: torch.Tensor, edge_attr: torch.Tensor) -> torch.Tensor:
        n = x.size(0)
        loops = torch.arange(n)
        src = torch.cat([edge_index[0], loops])
        dst = torch.cat([edge_index[1], loops])
        edge_attr = torch.cat([edge_attr, torch.zeros((n, self.edge_dim), dtype=x.dtype)])

        h = self.lin(x).view(n, self.heads, self.channels)
        score_src = (h * self.att_src).sum(-1)
        score_dst = (h * self.att_dst).sum(-1)
        logits = F.leaky_relu(score_src[src] + score_dst[dst] + self.lin_edge(edge_attr), 0.2)
        alpha = _segment_softmax(logits, dst, n)
        alpha = F.dropout(alpha, p=self.dropout, training=self.training)
        out = torch.zeros((n, self.heads, self.channels), dtype=x.dtype).index_add(0, dst, h[src] * alpha.unsqueeze(-1))
        return out.reshape(n, self.heads * self.channels) + self.bias


class SemModel(nn.Module):
    def __init__(self, config: Optional[SemConfig] = None):
        super().__init__()
        self.config = config or SemConfig()
        hidden = self.config.hidden
        self.type_emb = nn.Embedding(NODE_TYPES, 8)
        self.sign_emb = nn.Embedding(SIGN_TYPES, 4)
        self.appearance_emb = nn.Embedding(APPEARANCE_CODES, 8)
        self.input = nn.Linear(8 + 4 + 8 + 3, hidden)
        self.convs = nn.ModuleList(
            GraphAttentionLayer(hidden, hidden, self.config.heads, EDGE_FEATURES, self.config.dropout) for _ in range(2)
        )
        self.norms = nn.ModuleList(nn.BatchNorm1d(hidden) for _ in range(2))
        self.head = nn.Sequential(
            nn.Linear(hidden + WEATHER_DIM, hidden),
            nn.ReLU(),
            nn.Dropout(self.config.dropout),
            nn.Linear(hidden, 1),
        )
        self.to(DTYPE)

    def _check(self, batch: GraphBatch) -> None:
        n = batch.pos.size(0)
        if batch.pos.dim() != 2 or batch.pos.size(1) != 3:
            raise ShapeMismatch(f"node positions must be (N, 3), got {tuple(batch.pos.shape)}")
        if batch.weather.shape != (batch.num_graphs, WEATHER_DIM):
            raise ShapeMismatch(f"weather must be ({batch.num_graphs}, {WEATHER_DIM}), got {tuple(batch.weather.shape)}")
        if batch.edge_attr.size(1) != EDGE_FEATURES or batch.edge_attr.size(0) != batch.edge_index.size(1):
            raise ShapeMismatch(f"edge features must be (E, {EDGE_FEATURES}), got {tuple(batch.edge_attr.shape)}")
        for name in ("node_type", "sign_type", "appearance", "batch"):
            if getattr(batch, name).size(0) != n:
                raise ShapeMismatch(f"{name} has {getattr(batch, name).size(0)} entries for {n} nodes")

    def embed(self, batch: GraphBatch) -> torch.Tensor:
        """Mean-pooled graph vectors before the weather head, shape (graphs, hidden)."""
        self._check(batch)
        x = torch.cat(
            [self.type_emb(batch.node_type), self.sign_emb(batch.sign_type), self.appearance_emb(batch.appearance), batch.pos],
            dim=1,
        )
        x = self.input(x)
        for conv, norm in zip(self.convs, self.norms):
            x = conv(x, batch.edge_index, batch.edge_attr)
            x = F.dropout(F.elu(norm(x)), p=self.config.dropout, training=self.training)
        pooled = torch.zeros((batch.num_graphs, x.size(1)), dtype=x.dtype).index_add(0, batch.batch, x)
        counts = torch.bincount(batch.batch, minlength=batch.num_graphs).clamp(min=1).to(x.dtype)
        return pooled / counts.unsqueeze(1)

    def logits(self, batch: GraphBatch) -> torch.Tensor:
        return self.head(torch.cat([self.embed(batch), batch.weather], dim=1)).squeeze(1)

    def forward(self, batch: GraphBatch) -> torch.Tensor:
        return torch.sigmoid(self.logits(batch))


def build_model(config: Optional[SemConfig] = None) -> SemModel:
    config = config or SemConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return SemModel(config)


def predict(model: SemModel, graphs: Sequence[ScenarioGraph]) -> np.ndarray:
    """Confidences for a list of graphs, with dropout off."""
    model.eval()
    with torch.no_grad():
        return model(preprocess_batch(graphs)).numpy().astype(float)


# ---------------------------------------------------------------- metrics


@dataclass
class SemMetrics:
    accuracy: float
    precision: float
    recall: float
    loss: float
    brier: float
    pearson: float
    size: int
    undefined: List[str] = field(default_factory=list)
    degenerate_labels: bool = False
    train_loss: List[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def metrics_from_scores(scores: Sequence[float], labels: Sequence[bool]) -> SemMetrics:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=float)
    pred = scores > 0.5
    positive = labels > 0.5
    undefined = []
    tp = float(np.sum(pred & positive))
    precision = recall = pearson = 0.0
    if pred.sum() > 0:
        precision = tp / float(pred.sum())
    else:
        undefined.append("precision")
    if positive.sum() > 0:
        recall = tp / float(positive.sum())
    else:
        undefined.append("recall")
    if scores.std() > 0 and labels.std() > 0:
        pearson = float(np.corrcoef(scores, labels)[0, 1])
    else:
        undefined.append("pearson")
    degenerate = bool(labels.size and (positive.all() or (~positive).all()))
    if degenerate:
        warnings.warn("labels hold a single class; recall/pearson are not meaningful", DegenerateLabels, stacklevel=2)
    clipped = np.clip(scores, 1e-12, 1 - 1e-12)
    loss = float(-np.mean(labels * np.log(clipped) + (1 - labels) * np.log(1 - clipped))) if scores.size else 0.0
    return SemMetrics(
        accuracy=float(np.mean(pred == positive)) if scores.size else 0.0,
        precision=precision,
        recall=recall,
        loss=loss,
        brier=float(np.mean((scores - labels) ** 2)) if scores.size else 0.0,
        pearson=pearson,
        size=int(scores.size),
        undefined=undefined,
        degenerate_labels=degenerate,
    )


def _graphs(records: Sequence[TestRecord], seeds: Mapping[str, ScenarioSeed]) -> List[ScenarioGraph]:
    out = []
    for r in records:
        if r.scenario.seed_id not in seeds:
            raise InconsistentSeed(f"no seed {r.scenario.seed_id} for record {r.digest()[:10]}")
        out.append(scenario_to_graph(r.scenario, seeds[r.scenario.seed_id]))
    return out


def evaluate_metrics(model: SemModel, records: Sequence[TestRecord], seeds: Mapping[str, ScenarioSeed]) -> SemMetrics:
    if not records:
        raise InsufficientData("no records to evaluate")
    scores = predict(model, _graphs(records, seeds))
    return metrics_from_scores(scores, [r.label for r in records])


# ---------------------------------------------------------------- training


def split_records(records: Sequence[TestRecord]) -> Tuple[List[TestRecord], List[TestRecord]]:
    """Deterministic 80/20 split: sort by scenario hash, hold out the first ceil(20%)."""
    ordered = sorted(enumerate(records), key=lambda item: (item[1].digest(), item[0]))
    held = math.ceil(0.2 * len(ordered))
    return [r for _, r in ordered[held:]], [r for _, r in ordered[:held]]


def train(
    model: SemModel,
    records: Sequence[TestRecord],
    seeds: Mapping[str, ScenarioSeed],
    epochs: Optional[int] = None,
) -> Tuple[SemModel, SemMetrics]:
    """Full-batch Adam on binary cross-entropy; returns the model and validation metrics."""
    if len(records) < 2:
        raise InsufficientData(f"training needs at least 2 records, got {len(records)}")
    cfg = model.config
    epochs = cfg.epochs if epochs is None else epochs
    train_set, val_set = split_records(records)
    labels = [r.label for r in records]
    degenerate = all(labels) or not any(labels)
    if degenerate:
        warnings.warn("training labels hold a single class", DegenerateLabels, stacklevel=2)

    batch = preprocess_batch(_graphs(train_set, seeds))
    target = torch.as_tensor([float(r.label) for r in train_set], dtype=DTYPE)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    history = []
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model.train()
        for epoch in range(epochs):
            optimizer.zero_grad()
            loss = F.binary_cross_entropy_with_logits(model.logits(batch), target)
            loss.backward()
            optimizer.step()
            history.append(float(loss.item()))
            if epoch % 200 == 0:
                logger.debug("SEM epoch %d loss %.5f", epoch, history[-1])
    model.eval()

    metrics = evaluate_metrics(model, val_set, seeds)
    metrics.degenerate_labels = metrics.degenerate_labels or degenerate
    metrics.train_loss = history
    logger.info(
        "SEM trained on %d records (%d validation): acc=%.3f loss=%.4f",
        len(train_set), len(val_set), metrics.accuracy, metrics.loss,
    )
    return model, metrics


def filter_seeds(confidences: Sequence[float], n_e: int) -> List[int]:
    """Indices of mutants to execute: confident ones first, else the top-N_e fallback."""
    if len(confidences) == 0:
        raise ValueError("no mutants to filter")
    ranked = sorted(range(len(confidences)), key=lambda i: (-confidences[i], i))
    confident = [i for i in ranked if confidences[i] > 0.5]
    return (confident or ranked)[:n_e]


def score_mutants(model: SemModel, mutants: Sequence[ConcreteScenario], seed: ScenarioSeed) -> np.ndarray:
    return predict(model, [scenario_to_graph(m, seed) for m in mutants])


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: SemModel, path: Path, trained_on: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {"version": CHECKPOINT_VERSION, "config": asdict(model.config), "state_dict": model.state_dict(), "trained_on": trained_on},
        path,
    )
    logger.info("Saved SEM checkpoint %s (trained on %d records)", path, trained_on)
    return path


def load_checkpoint(path: Path) -> Tuple[SemModel, int]:
    blob = torch.load(Path(path), map_location="cpu")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported SEM checkpoint version {blob.get('version')!r} in {path}")
    model = SemModel(SemConfig(**blob["config"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, int(blob["trained_on"])


def latest_checkpoint(sem_dir: Path) -> Optional[Path]:
    found = sorted(Path(sem_dir).glob("*.ckpt"), key=lambda p: int(p.stem) if p.stem.isdigit() else -1)
    return found[-1] if found else None
