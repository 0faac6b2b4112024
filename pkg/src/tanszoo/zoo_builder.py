"""Greedy model-zoo construction by expected hypervolume improvement.

Each (dataset, network) pair maps to a point in the unit cube of maximized
objectives: accuracy, 1 - normalized latency, 1 - normalized params. The
value of a dataset's slice of the zoo is the hypervolume its points
dominate (reference point at the origin). Starting from a small random seed
set, the builder repeatedly adds the candidate whose Monte-Carlo-dropout
accuracy samples promise the largest expected gain, then evaluates it.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import diffmath as dm
from .contrastive import TrainConfig, init_model
from .encoders import encode_model, encode_query
from .predictor import PredictorParams, init_predictor, predict_many, predict_tensor, surrogate_loss
from .synth import evaluate_network, generic_network
from .zoo import ModelZoo, ZooEntry

log = logging.getLogger(__name__)

STRATEGIES = ("greedy", "random", "largest-param")
ORIENTATIONS = ("inverse", "raw")


def _area_2d(xy: list[tuple[float, float]]) -> float:
    """Area of the union of boxes [0, x] x [0, y]."""
    area, ymax = 0.0, 0.0
    xy = sorted(xy, reverse=True)
    for i, (x, y) in enumerate(xy):
        ymax = max(ymax, y)
        x_next = xy[i + 1][0] if i + 1 < len(xy) else 0.0
        area += (x - x_next) * ymax
    return area


def _hv(points: list[tuple[float, float, float]]) -> float:
    pts = sorted(points, key=lambda p: -p[2])
    vol = 0.0
    for i in range(len(pts)):
        z_next = pts[i + 1][2] if i + 1 < len(pts) else 0.0
        if z_next < pts[i][2]:
            vol += _area_2d([(p[0], p[1]) for p in pts[:i + 1]]) * (pts[i][2] - z_next)
    return vol


def hypervolume(points: Iterable[Sequence[float]]) -> float:
    """Exact volume of the union of boxes [0, p] for points p in the unit cube.

    Sweeps the third coordinate from the top; each slab contributes its
    height times the 2-D dominated area of the points at or above it.
    """
    P = np.asarray(list(points), dtype=np.float64).reshape(-1, 3)
    if P.size == 0:
        return 0.0
    if not np.all(np.isfinite(P)) or np.any(P < 0.0) or np.any(P > 1.0):
        raise ValueError("hypervolume points must lie in [0, 1]^3")
    return _hv([tuple(map(float, p)) for p in P])


def hv_gain(points: Sequence[tuple], new: tuple) -> float:
    """Hypervolume added by ``new``: its box minus the part already covered."""
    clipped = [tuple(min(a, b) for a, b in zip(p, new)) for p in points]
    return new[0] * new[1] * new[2] - _hv(clipped)


def objective_point(accuracy: float, entry: ZooEntry, orientation: str = "inverse") -> tuple:
    if orientation == "inverse":
        return (accuracy, 1.0 - entry.norm_latency, 1.0 - entry.norm_params)
    if orientation == "raw":
        return (accuracy, entry.norm_latency, entry.norm_params)
    raise ValueError(f"unknown orientation {orientation!r}")


@dataclass
class ZooState:
    """Evaluated entries grouped by dataset, with each dataset's hypervolume."""

    orientation: str = "inverse"
    points: dict[str, list[tuple]] = field(default_factory=dict)
    entries: list[ZooEntry] = field(default_factory=list)
    volumes: dict[str, float] = field(default_factory=dict)

    def add(self, entry: ZooEntry) -> None:
        self.entries.append(entry)
        pts = self.points.setdefault(entry.dataset_id, [])
        pts.append(objective_point(entry.accuracy, entry, self.orientation))
        # max() absorbs last-ulp noise when a dominated point reorders the sweep
        old = self.volumes.get(entry.dataset_id, 0.0)
        self.volumes[entry.dataset_id] = max(old, hypervolume(pts))

    def keys(self) -> set:
        return {e.key for e in self.entries}

    def total(self) -> float:
        return sum(g_D(self, d) for d in sorted(self.points))


def g_D(state: ZooState, dataset_id: str) -> float:
    """Hypervolume of one dataset's evaluated points (0 if it has none)."""
    return state.volumes.get(dataset_id, 0.0)


# (entry, rng, n) -> n accuracy samples in [0, 1]
AccuracySampler = Callable[[ZooEntry, np.random.Generator, int], np.ndarray]


def pair_seed(mc_seed: int, entry: ZooEntry) -> list[int]:
    h = hashlib.sha256(f"{entry.dataset_id}\x00{entry.network_id}".encode()).digest()
    return [mc_seed, int.from_bytes(h[:8], "little")]


def f_zoo(entry: ZooEntry, state: ZooState, sampler: AccuracySampler, mc_seed: int = 0,
          mc_samples: int = 10) -> float:
    """Expected hypervolume gain of adding ``entry`` with sampled accuracies.

    Only the candidate's resource costs are read from ``entry``; its accuracy
    comes from ``sampler``.
    """
    rng = np.random.default_rng(pair_seed(mc_seed, entry))
    current = state.points.get(entry.dataset_id, [])
    accs = np.clip(np.asarray(sampler(entry, rng, mc_samples), dtype=np.float64), 0.0, 1.0)
    gains = [hv_gain(current, objective_point(float(a), entry, state.orientation)) for a in accs]
    return max(0.0, float(np.mean(gains)))


@dataclass
class BuilderConfig:
    budget: int
    n_init: int | None = None
    n_train: int = 64
    mc_samples: int = 10
    candidate_pool_size: int | None = None
    rng_seed: int = 0
    strategy: str = "greedy"
    hv_orientation: str = "inverse"
    dropout_p: float = 0.5
    predictor_epochs: int = 300
    predictor_lr: float = 1e-2
    embedding_dim: int = 128

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.hv_orientation not in ORIENTATIONS:
            raise ValueError(f"hv_orientation must be one of {ORIENTATIONS}")
        for name in ("budget", "n_train", "mc_samples", "predictor_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_init is not None and self.n_init < 1:
            raise ValueError("n_init must be positive")
        if self.candidate_pool_size is not None and self.candidate_pool_size < 1:
            raise ValueError("candidate_pool_size must be positive")

    def initial_size(self, n_datasets: int, n_pairs: int) -> int:
        if self.n_init is not None:
            return self.n_init
        return max(2 * n_datasets, math.ceil(0.05 * n_pairs))


class SurrogateSampler:
    """MC-dropout accuracy sampler over frozen, untrained encoders.

    Networks are embedded with their generic (untrained-head) weights so no
    candidate has to be fitted before it is scored.
    """

    def __init__(self, universe: ModelZoo, cfg: BuilderConfig):
        feature_dim = next(iter(universe.datasets.values())).feature_dim
        model = init_model(TrainConfig(rng_seed=cfg.rng_seed, embedding_dim=cfg.embedding_dim,
                                       dropout_p=cfg.dropout_p), feature_dim)
        self.q = {d: encode_query(ds.probe_set, model.query) for d, ds in universe.datasets.items()}
        self.m = {n: encode_model(generic_network(net), model.model)
                  for n, net in universe.networks.items()}
        self.cfg = cfg
        self.params: PredictorParams | None = None

    def fit(self, entries: Sequence[ZooEntry], round_index: int) -> None:
        """Re-initialize from a fixed seed and fit to ``entries`` with dropout."""
        cfg = self.cfg
        rng = np.random.default_rng([cfg.rng_seed, 21])
        params = init_predictor(cfg.embedding_dim, rng, dropout_p=cfg.dropout_p)
        Q = dm.Tensor(np.stack([self.q[e.dataset_id] for e in entries]))
        M = dm.Tensor(np.stack([self.m[e.network_id] for e in entries]))
        y = np.array([e.accuracy for e in entries])
        mask_rng = np.random.default_rng([cfg.rng_seed, 22, round_index])
        plist = params.parameters()
        for t in range(1, cfg.predictor_epochs + 1):
            dm.zero_grad(plist)
            mask = (mask_rng.random((len(entries), params.fc_w.shape[1])) >= cfg.dropout_p) \
                / (1.0 - cfg.dropout_p)
            dm.mean(surrogate_loss(predict_tensor(Q, M, params, mask), y)).backward()
            dm.adam_step(plist, cfg.predictor_lr, t=t)
        self.params = params

    def __call__(self, entry: ZooEntry, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        q = np.repeat(self.q[entry.dataset_id][None, :], n, axis=0)
        m = np.repeat(self.m[entry.network_id][None, :], n, axis=0)
        return predict_many(q, m, self.params, rng)


def initial_pairs(pairs: Sequence[ZooEntry], n: int, seed: int) -> list[ZooEntry]:
    """``n`` pairs spread as evenly as possible over datasets, chosen at random."""
    rng = np.random.default_rng([seed, 31])
    by_ds: dict[str, list[ZooEntry]] = {}
    for e in sorted(pairs, key=lambda e: e.key):
        by_ds.setdefault(e.dataset_id, []).append(e)
    queues = {d: [v[i] for i in rng.permutation(len(v))] for d, v in by_ds.items()}
    order = [d for d in sorted(queues)]
    order = [order[i] for i in rng.permutation(len(order))]
    chosen: list[ZooEntry] = []
    while len(chosen) < n:
        progressed = False
        for d in order:
            if queues[d] and len(chosen) < n:
                chosen.append(queues[d].pop())
                progressed = True
        if not progressed:
            break
    return chosen


@dataclass
class ConstructionResult:
    zoo: ModelZoo
    trace: list[float]
    selected: list[ZooEntry]


def construct_zoo(universe: ModelZoo, cfg: BuilderConfig,
                  sampler: AccuracySampler | None = None) -> ConstructionResult:
    """Select ``cfg.budget`` pairs from ``universe`` and evaluate them.

    Accuracies stored in ``universe`` are never read for selection; chosen
    pairs are scored afresh with :func:`synth.evaluate_network`.
    """
    pairs = sorted(universe.entries, key=lambda e: e.key)
    if cfg.budget > len(pairs):
        raise ValueError(f"budget {cfg.budget} exceeds the {len(pairs)} available pairs")
    n_init = min(cfg.initial_size(len(universe.datasets), len(pairs)), cfg.budget)

    def evaluate(e: ZooEntry) -> ZooEntry:
        acc = evaluate_network(universe.networks[e.network_id], universe.datasets[e.dataset_id])
        return ZooEntry(e.dataset_id, e.network_id, acc, e.norm_latency, e.norm_params)

    state = ZooState(cfg.hv_orientation)
    for e in initial_pairs(pairs, n_init, cfg.rng_seed):
        state.add(evaluate(e))
    trace = [state.total()]
    rng = np.random.default_rng([cfg.rng_seed, 41])
    surrogate = None
    if cfg.strategy == "greedy" and sampler is None:
        surrogate = SurrogateSampler(universe, cfg)
    t = 0
    while len(state.entries) < cfg.budget:
        taken = state.keys()
        remaining = [e for e in pairs if e.key not in taken]
        if cfg.candidate_pool_size is not None and cfg.candidate_pool_size < len(remaining):
            pick = np.sort(rng.choice(len(remaining), cfg.candidate_pool_size, replace=False))
            remaining = [remaining[i] for i in pick]
        if cfg.strategy == "random":
            choice = remaining[int(rng.integers(len(remaining)))]
        elif cfg.strategy == "largest-param":
            choice = min(remaining, key=lambda e: (-universe.networks[e.network_id].param_count,
                                                   e.key))
        else:
            if surrogate is not None and t % cfg.n_train == 0:
                surrogate.fit(state.entries, t)
            score_fn = sampler or surrogate
            scores = [f_zoo(e, state, score_fn, cfg.rng_seed * 100003 + t, cfg.mc_samples)
                      for e in remaining]
            best = max(range(len(remaining)), key=lambda i: (scores[i], _neg_key(remaining[i])))
            choice = remaining[best]
        state.add(evaluate(choice))
        trace.append(state.total())
        t += 1
    zoo = universe.subset(state.entries)
    return ConstructionResult(zoo, trace, list(state.entries))


def _neg_key(e: ZooEntry) -> tuple:
    # max() with this key prefers the lexicographically smallest pair on ties
    # the trailing 1 ranks a prefix above its extensions
    return tuple(tuple(-ord(c) for c in s) + (1,) for s in e.key)
