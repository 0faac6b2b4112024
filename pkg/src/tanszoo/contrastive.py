"""Meta-contrastive objective and the joint training loop.

For a batch of tasks (one dataset and one of its networks each), the model
loss pulls a dataset's query embedding toward its own network and pushes it
away from the networks of every other task in the batch; the query loss is
the same hinge with the roles swapped. A surrogate MSE term trains the
accuracy predictor jointly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor
from .encoders import (
    EncoderConfig,
    ModelEncoderParams,
    QueryEncoderParams,
    init_model_encoder,
    init_query_encoder,
    model_input,
    model_tensor,
    query_batch_tensor,
)
from .metrics import pair_rank, rank_metrics
from .predictor import PredictorParams, init_predictor, predict_tensor, surrogate_loss
from .synth import evaluate_network
from .zoo import ModelZoo, ZooEntry

log = logging.getLogger(__name__)

AGGREGATIONS = ("sum", "mean")
OBJECTIVES = ("contrastive", "cosine")
SURROGATE_PAIRS = ("matched", "cross")
DIVERGENCE_LIMIT = 1e6


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 140
    margin: float = 0.5
    surrogate_weight: float = 1.0
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = dm.ADAM_EPS
    epochs: int = 200
    neg_aggregation: str = "mean"
    objective: str = "contrastive"
    rng_seed: int = 0
    queries_per_class: int = 10
    embedding_dim: int = 128
    functional_dim: int = 64
    noise_batch: int = 16
    noise_seed: int = 0
    sigma_hidden: bool = False
    predictor_hidden: int = 256
    dropout_p: float = 0.5
    model_inputs: str = "both"
    holdout_fraction: float = 0.0
    surrogate_pairs: str = "matched"

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError("margin must be positive")
        if self.surrogate_weight < 0:
            raise ValueError("surrogate_weight must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.neg_aggregation not in AGGREGATIONS:
            raise ValueError(f"neg_aggregation must be one of {AGGREGATIONS}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.surrogate_pairs not in SURROGATE_PAIRS:
            raise ValueError(f"surrogate_pairs must be one of {SURROGATE_PAIRS}")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must be in [0, 1)")

    def fingerprint(self) -> bytes:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()

    def encoder_config(self, feature_dim: int) -> EncoderConfig:
        return EncoderConfig(feature_dim, self.embedding_dim, self.functional_dim,
                             self.noise_batch, self.noise_seed, self.sigma_hidden,
                             self.model_inputs)


@dataclass
class TansModel:
    """All learned parameters: query encoder, model encoder and predictor."""

    encoder: EncoderConfig
    query: QueryEncoderParams
    model: ModelEncoderParams
    predictor: PredictorParams

    def parameters(self) -> list[dm.Parameter]:
        return [*self.query.parameters(), *self.model.parameters(), *self.predictor.parameters()]

    def model_input(self, net) -> np.ndarray:
        return model_input(net, self.model.noise, self.encoder.functional_dim,
                           self.encoder.model_inputs)


def init_model(cfg: TrainConfig, feature_dim: int) -> TansModel:
    enc = cfg.encoder_config(feature_dim)
    rng = np.random.default_rng([cfg.rng_seed, 7])
    return TansModel(enc, init_query_encoder(enc, rng), init_model_encoder(enc, rng),
                     init_predictor(enc.embedding_dim, rng, cfg.predictor_hidden, cfg.dropout_p))


# --------------------------------------------------------------------------
# losses

def _hinge(alpha: float, pos: Tensor, neg: Tensor) -> Tensor:
    return dm.relu(dm.add(dm.sub(neg, pos), alpha))


def _aggregate(sims: Sequence[Tensor], agg: str) -> Tensor:
    if agg not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation {agg!r}")
    if not sims:
        raise ValueError("need at least one negative")
    acc = sims[0]
    for s in sims[1:]:
        acc = dm.add(acc, s)
    return dm.mul(acc, 1.0 / len(sims)) if agg == "mean" else acc


def loss_m(q, m_pos, m_negs: Sequence, alpha: float = 0.5, agg: str = "sum") -> Tensor:
    """Hinge ``max(0, alpha - cos(q, m+) + A)`` with A the sum (or mean) of negative cosines.

    The log-ratio of exponentials in the original form reduces exactly to
    this difference of similarities.
    """
    q, m_pos = dm.constant(q), dm.constant(m_pos)
    negs = [dm.cosine(q, dm.constant(m)) for m in m_negs]
    return _hinge(alpha, dm.cosine(q, m_pos), _aggregate(negs, agg))


def loss_q(m, q_pos, q_negs: Sequence, alpha: float = 0.5, agg: str = "sum") -> Tensor:
    """Mirror of :func:`loss_m`: the model embedding is the anchor."""
    return loss_m(m, q_pos, q_negs, alpha, agg)


def loss_m_literal(f_pos: float, f_negs: Sequence[float], alpha: float) -> float:
    """The hinge written with the log of an exponential ratio, for cross-checking."""
    return max(0.0, alpha - math.log(math.exp(f_pos) / math.exp(sum(f_negs))))


def batch_contrastive(Q: Tensor, M: Tensor, alpha: float, agg: str = "sum") -> tuple[Tensor, Tensor]:
    """Per-task model and query hinge losses for a batch of unit embeddings.

    Row i of ``Q`` and ``M`` is task i's positive pair; every other row acts
    as a negative. Returns two (b,) tensors.
    """
    b = Q.shape[0]
    if b < 2:
        raise ValueError("a batch needs at least two tasks")
    S = dm.matmul(Q, dm.transpose(M))
    pos = dm.diag(S)
    neg_m = dm.sub(dm.total(S, axis=1), pos)
    neg_q = dm.sub(dm.total(S, axis=0), pos)
    if agg == "mean":
        neg_m, neg_q = dm.mul(neg_m, 1.0 / (b - 1)), dm.mul(neg_q, 1.0 / (b - 1))
    return _hinge(alpha, pos, neg_m), _hinge(alpha, pos, neg_q)


@dataclass
class TaskBatch:
    query_sets: list[np.ndarray]
    model_inputs: np.ndarray
    accuracies: np.ndarray
    dataset_ids: list[str] = field(default_factory=list)
    network_ids: list[str] = field(default_factory=list)
    # cross_accuracies[i, j]: accuracy of network j on dataset i
    cross_accuracies: np.ndarray | None = None

    def __post_init__(self):
        if self.dataset_ids and len(set(self.dataset_ids)) != len(self.dataset_ids):
            raise ValueError("dataset ids within a batch must be distinct")


def batch_objective(batch: TaskBatch, model: TansModel, cfg: TrainConfig,
                    dropout_rng: np.random.Generator | None = None) -> tuple[Tensor, dict]:
    """Mean over tasks of L_m + L_q + lambda * L_s, plus the mean of each part."""
    Q = query_batch_tensor(batch.query_sets, model.query)
    M = model_tensor(batch.model_inputs, model.model)
    b = Q.shape[0]
    if cfg.objective == "contrastive":
        lm, lq = batch_contrastive(Q, M, cfg.margin, cfg.neg_aggregation)
    else:
        # plain cosine regression: pull positives together, no negatives
        lm = dm.sub(Tensor(np.ones(b)), dm.diag(dm.matmul(Q, dm.transpose(M))))
        lq = Tensor(np.zeros(b))
    mask = None
    if dropout_rng is not None:
        mask = (dropout_rng.random((b, model.predictor.fc_w.shape[1])) >= cfg.dropout_p) \
            / (1.0 - cfg.dropout_p)
    ls = surrogate_loss(predict_tensor(Q, M, model.predictor, mask), batch.accuracies)
    if cfg.surrogate_pairs == "cross" and b > 1:
        if batch.cross_accuracies is None:
            raise ValueError("cross surrogate pairs need batch.cross_accuracies")
        ls = dm.add(ls, _cross_surrogate(Q, M, model.predictor, batch.cross_accuracies))
    per_task = dm.add(dm.add(lm, lq), dm.mul(ls, cfg.surrogate_weight))
    parts = {"L_m": float(lm.data.mean()), "L_q": float(lq.data.mean()),
             "L_s": float(ls.data.mean())}
    total = dm.mean(per_task)
    parts["total"] = total.item()
    return total, parts


def _cross_surrogate(Q: Tensor, M: Tensor, predictor: PredictorParams,
                     acc: np.ndarray) -> Tensor:
    """Per-task mean squared error over the mismatched pairs (i, j != i)."""
    b = Q.shape[0]
    ii, jj = np.nonzero(~np.eye(b, dtype=bool))
    pick_q = np.zeros((ii.size, b))
    pick_q[np.arange(ii.size), ii] = 1.0
    pick_m = np.zeros((jj.size, b))
    pick_m[np.arange(jj.size), jj] = 1.0
    pred = predict_tensor(dm.matmul(dm.constant(pick_q), Q), dm.matmul(dm.constant(pick_m), M),
                          predictor)
    err = surrogate_loss(pred, acc[ii, jj])
    # average each task's b-1 errors back onto its row
    spread = dm.constant(pick_q.T / (b - 1))
    return dm.total(dm.matmul(spread, dm.transpose(dm.stack([err]))), axis=1)


# --------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    model: TansModel
    trace: list[dict]
    metrics: dict
    train_entries: list[ZooEntry]
    heldout_entries: list[ZooEntry]


def split_entries(zoo: ModelZoo, fraction: float, seed: int) -> tuple[list[ZooEntry], list[ZooEntry]]:
    """Hold out ``fraction`` of each dataset's entries (at least one stays in training)."""
    if fraction == 0.0:
        return list(zoo.entries), []
    rng = np.random.default_rng([seed, 11])
    train, held = [], []
    for d in sorted(zoo.datasets):
        ents = sorted(zoo.entries_for(d), key=lambda e: e.network_id)
        n_out = min(len(ents) - 1, int(round(fraction * len(ents))))
        out = set(rng.choice(len(ents), size=n_out, replace=False).tolist()) if n_out > 0 else set()
        for i, e in enumerate(ents):
            (held if i in out else train).append(e)
    return train, held


def sample_query(dataset, rng: np.random.Generator, per_class: int) -> np.ndarray:
    """Random training-split instances, ``per_class`` per class (fewer if unavailable)."""
    idx = dataset.train_indices
    labels = dataset.labels[idx]
    chosen = []
    for c in range(dataset.class_count):
        pool = idx[labels == c]
        if pool.size:
            chosen.append(rng.choice(pool, size=min(per_class, pool.size), replace=False))
    return dataset.features[np.sort(np.concatenate(chosen))].astype(np.float64)


def heldout_metrics(zoo: ModelZoo, model: TansModel) -> dict:
    """Same-pair retrieval metrics using each dataset's held-out probe set."""
    net_ids = sorted(zoo.networks)
    M = model_tensor(np.stack([model.model_input(zoo.networks[n]) for n in net_ids]),
                     model.model).data
    sources = [zoo.networks[n].source_dataset_id for n in net_ids]
    ds_ids = sorted(zoo.datasets)
    Q = query_batch_tensor([zoo.datasets[d].probe_set for d in ds_ids], model.query).data
    ranks = [pair_rank(M @ Q[i], net_ids, sources, d) for i, d in enumerate(ds_ids)]
    return rank_metrics(ranks)


def meta_train(zoo: ModelZoo, cfg: TrainConfig, model: TansModel | None = None) -> TrainResult:
    """Train encoders and predictor jointly with Adam; deterministic given ``cfg.rng_seed``."""
    if len(zoo.datasets) < 2:
        raise ValueError("meta-training needs at least two datasets")
    feature_dim = next(iter(zoo.datasets.values())).feature_dim
    model = model or init_model(cfg, feature_dim)
    params = model.parameters()
    train, held = split_entries(zoo, cfg.holdout_fraction, cfg.rng_seed)
    by_dataset: dict[str, list[ZooEntry]] = {}
    for e in sorted(train, key=lambda e: e.key):
        by_dataset.setdefault(e.dataset_id, []).append(e)
    ds_ids = sorted(by_dataset)
    if len(ds_ids) < 2:
        raise ValueError("meta-training needs at least two datasets with entries")
    inputs = {e.network_id: model.model_input(zoo.networks[e.network_id]) for e in train}

    cross = None
    if cfg.surrogate_pairs == "cross":
        cross = {(d, e.network_id): evaluate_network(zoo.networks[e.network_id], zoo.datasets[d])
                 for d in ds_ids for e in train}
    rng = np.random.default_rng([cfg.rng_seed, 3])
    per_batch = min(cfg.batch_size, len(ds_ids))
    steps_per_epoch = max(1, math.ceil(len(train) / per_batch))
    trace, t = [], 0
    for epoch in range(1, cfg.epochs + 1):
        sums = {"L_m": 0.0, "L_q": 0.0, "L_s": 0.0, "total": 0.0}
        for _ in range(steps_per_epoch):
            chosen = ds_ids if per_batch == len(ds_ids) else \
                sorted(rng.choice(ds_ids, size=per_batch, replace=False).tolist())
            ents = [by_dataset[d][rng.integers(len(by_dataset[d]))] for d in chosen]
            batch = TaskBatch(
                [sample_query(zoo.datasets[d], rng, cfg.queries_per_class) for d in chosen],
                np.stack([inputs[e.network_id] for e in ents]),
                np.array([e.accuracy for e in ents]),
                list(chosen), [e.network_id for e in ents],
                None if cross is None else
                np.array([[cross[d, e.network_id] for e in ents] for d in chosen]))
            dm.zero_grad(params)
            loss, parts = batch_objective(batch, model, cfg)
            if not math.isfinite(parts["total"]) or parts["total"] > DIVERGENCE_LIMIT:
                raise TrainingDivergence(f"epoch {epoch}: loss {parts['total']!r} diverged")
            loss.backward()
            t += 1
            dm.adam_step(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, t)
            for k in sums:
                sums[k] += parts[k]
        trace.append({"epoch": epoch, **{k: v / steps_per_epoch for k, v in sums.items()}})
        log.debug("epoch %d: %s", epoch, trace[-1])
    metrics = heldout_metrics(zoo, model)
    log.info("training done: %s", metrics)
    return TrainResult(model, trace, metrics, train, held)
