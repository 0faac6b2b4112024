"""Amortized retrieval over a precomputed embedding index.

Every network in the zoo is embedded once. A query costs a single query
encoder pass followed by a brute-force cosine scan, optional constraint
filtering and an optional predictor rerank of the head of the list.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffmath as dm
from .contrastive import TansModel, TrainConfig, init_model, meta_train
from .encoders import (
    EncoderConfig,
    ModelEncoderParams,
    QueryEncoderParams,
    encode_query,
    model_tensor,
    query_batch_tensor,
)
from .metrics import pair_rank, rank_metrics, rank_order
from .predictor import DEFAULT_RERANK_K, PredictorParams, predict_many, rerank_topk
from .zoo import Constraints, Hit, ModelZoo, ZooEntry, ZooFormatError

MAGIC = b"TANS"
VERSION = 1


@dataclass
class EmbeddingIndex:
    model_ids: list[str]
    embeddings: np.ndarray  # (n, d) float32, unit rows
    source_ids: list[str]
    params: np.ndarray  # int64 parameter counts
    macs: np.ndarray  # int64
    latency: np.ndarray  # float64 seconds
    model: TansModel
    rng_seed: int = 0
    fingerprint: bytes = b"\x00" * 32

    def __post_init__(self):
        if len(set(self.model_ids)) != len(self.model_ids):
            raise ValueError("duplicate model ids in index")
        if list(self.model_ids) != sorted(self.model_ids):
            raise ValueError("index rows must be in lexicographic id order")
        n = len(self.model_ids)
        if self.embeddings.shape[0] != n or not (len(self.source_ids) == len(self.params)
                                                 == len(self.macs) == len(self.latency) == n):
            raise ValueError("index columns disagree in length")

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def noise_seed(self) -> int:
        return self.model.encoder.noise_seed

    def row(self, model_id: str) -> int:
        i = int(np.searchsorted(self.model_ids, model_id))
        if i >= len(self.model_ids) or self.model_ids[i] != model_id:
            raise KeyError(model_id)
        return i


@dataclass
class RetrievalResult:
    hits: list[Hit] = field(default_factory=list)
    empty: bool = False

    @property
    def model_ids(self) -> list[str]:
        return [h.model_id for h in self.hits]

    def to_json(self) -> dict:
        return {"empty": self.empty, "hits": [asdict(h) for h in self.hits]}


def build_index(zoo: ModelZoo, model: TansModel, cfg: TrainConfig | None = None) -> EmbeddingIndex:
    """Embed every zoo network with the trained model encoder."""
    ids = sorted(zoo.networks)
    nets = [zoo.networks[i] for i in ids]
    if nets:
        X = np.stack([model.model_input(n) for n in nets])
        emb = model_tensor(X, model.model).data.astype(np.float32)
    else:
        emb = np.zeros((0, model.encoder.embedding_dim), dtype=np.float32)
    return EmbeddingIndex(
        ids, emb, [n.source_dataset_id for n in nets],
        np.array([n.param_count for n in nets], dtype=np.int64),
        np.array([n.macs for n in nets], dtype=np.int64),
        np.array([n.latency for n in nets], dtype=np.float64),
        model, cfg.rng_seed if cfg else 0,
        cfg.fingerprint() if cfg else b"\x00" * 32)


# --------------------------------------------------------------------------
# binary format

def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _model_arrays(model: TansModel) -> dict[str, np.ndarray]:
    out = {"rho_w": model.query.rho_w.data, "rho_b": model.query.rho_b.data,
           "sigma_w": model.model.sigma_w.data, "sigma_b": model.model.sigma_b.data,
           "noise": model.model.noise,
           "fc_w": model.predictor.fc_w.data, "fc_b": model.predictor.fc_b.data,
           "head_w": model.predictor.head_w.data, "head_b": model.predictor.head_b.data}
    for i, p in enumerate(model.model.hidden):
        out[f"hidden{i}"] = p.data
    return out


def save_index(index: EmbeddingIndex, path: str | os.PathLike) -> None:
    """Write the little-endian binary index (see README for the layout)."""
    buf = io.BytesIO()
    n, d = index.embeddings.shape
    buf.write(MAGIC)
    buf.write(struct.pack("<IIIQQ", VERSION, n, d, index.rng_seed, index.noise_seed))
    buf.write(index.fingerprint)
    meta = {"encoder": asdict(index.model.encoder),
            "dropout_p": index.model.predictor.dropout_p,
            "hidden_activation": "relu"}
    buf.write(_pack_str(json.dumps(meta, sort_keys=True)))
    for i in index.model_ids:
        buf.write(_pack_str(i))
    for s in index.source_ids:
        buf.write(_pack_str(s))
    buf.write(np.ascontiguousarray(index.embeddings, dtype="<f4").tobytes())
    buf.write(np.asarray(index.params, dtype="<i8").tobytes())
    buf.write(np.asarray(index.macs, dtype="<i8").tobytes())
    buf.write(np.asarray(index.latency, dtype="<f8").tobytes())
    arrays = _model_arrays(index.model)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        buf.write(_pack_str(name))
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ZooFormatError(f"index truncated at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()


def load_index(path: str | os.PathLike) -> EmbeddingIndex:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise ZooFormatError(f"{path}: not an index file (bad magic)")
    version, n, d, rng_seed, noise_seed = r.unpack("<IIIQQ")
    if version != VERSION:
        raise ZooFormatError(f"{path}: unsupported index version {version}")
    fingerprint = r.take(32)
    meta = json.loads(r.string())
    ids = [r.string() for _ in range(n)]
    sources = [r.string() for _ in range(n)]
    emb = r.array("<f4", n * d).reshape(n, d).astype(np.float32)
    params = r.array("<i8", n).astype(np.int64)
    macs = r.array("<i8", n).astype(np.int64)
    latency = r.array("<f8", n).astype(np.float64)
    (n_arrays,) = r.unpack("<I")
    arrays = {}
    for _ in range(n_arrays):
        name = r.string()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I")
        arrays[name] = r.array("<f8", int(np.prod(shape))).reshape(shape).astype(np.float64)
    if r.pos != len(r.data):
        raise ZooFormatError(f"{path}: {len(r.data) - r.pos} trailing bytes")
    enc = EncoderConfig(**meta["encoder"])
    hidden = [dm.Parameter(arrays[f"hidden{i}"]) for i in range(2) if f"hidden{i}" in arrays]
    model = TansModel(
        enc,
        QueryEncoderParams(dm.Parameter(arrays["rho_w"]), dm.Parameter(arrays["rho_b"])),
        ModelEncoderParams(dm.Parameter(arrays["sigma_w"]), dm.Parameter(arrays["sigma_b"]),
                           arrays["noise"], hidden),
        PredictorParams(dm.Parameter(arrays["fc_w"]), dm.Parameter(arrays["fc_b"]),
                        dm.Parameter(arrays["head_w"]), dm.Parameter(arrays["head_b"]),
                        float(meta["dropout_p"])))
    return EmbeddingIndex(ids, emb, sources, params, macs, latency, model, rng_seed, fingerprint)


# --------------------------------------------------------------------------
# queries

def feasible_mask(index: EmbeddingIndex, constraints: Constraints | None) -> np.ndarray:
    if constraints is None:
        return np.ones(len(index.model_ids), dtype=bool)
    return np.array([constraints.admits(int(p), int(f), float(l))
                     for p, f, l in zip(index.params, index.macs, index.latency)], dtype=bool)


def retrieve(index: EmbeddingIndex, probe_set: np.ndarray, k: int = 10,
             constraints: Constraints | None = None, rerank: bool = False,
             predict_fn: Callable[[str], float] | None = None) -> RetrievalResult:
    """Top-``k`` models for a probe set, filtered by ``constraints`` first.

    Ties in similarity go to the lexicographically smaller model id. With
    ``rerank`` the first ``min(k, 10)`` hits are reordered by predicted
    accuracy; ``predict_fn`` may stand in for the learned predictor.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    probe_set = np.asarray(probe_set, dtype=np.float64)
    if probe_set.ndim != 2 or probe_set.shape[0] == 0:
        raise ValueError("empty probe set")
    q = encode_query(probe_set, index.model.query)
    keep = np.flatnonzero(feasible_mask(index, constraints))
    if keep.size == 0:
        return RetrievalResult([], empty=True)
    sims = index.embeddings[keep].astype(np.float64) @ q
    order = rank_order(sims, [index.model_ids[i] for i in keep])[:k]
    hits = [Hit(index.model_ids[keep[j]], float(sims[j])) for j in order]
    if rerank:
        emb = {h.model_id: index.embeddings[index.row(h.model_id)] for h in hits}
        hits = rerank_topk(hits, q, index.model.predictor, min(k, DEFAULT_RERANK_K), emb,
                           predict_fn)
    return RetrievalResult(hits)


PROBE_POLICIES = ("heldout", "train")


def _probe(zoo: ModelZoo, dataset_id: str, policy: str) -> np.ndarray:
    ds = zoo.datasets[dataset_id]
    if policy == "heldout":
        if ds.probe_indices.size == 0:
            raise ValueError(f"dataset {dataset_id} has no held-out probe instances")
        return ds.probe_set
    if policy == "train":
        return ds.features[ds.train_indices]
    raise ValueError(f"unknown probe policy {policy!r}")


def query_embeddings(index: EmbeddingIndex, zoo: ModelZoo, policy: str = "heldout") -> np.ndarray:
    ds_ids = sorted(zoo.datasets)
    return query_batch_tensor([_probe(zoo, d, policy) for d in ds_ids], index.model.query).data


def evaluate_retrieval(index: EmbeddingIndex, zoo: ModelZoo,
                       probe_policy: str = "heldout") -> dict[str, float]:
    """R@1/5/10 and mean/median rank of each dataset's own networks."""
    ds_ids = sorted(zoo.datasets)
    Q = query_embeddings(index, zoo, probe_policy)
    E = index.embeddings.astype(np.float64)
    ranks = [pair_rank(E @ Q[i], index.model_ids, index.source_ids, d)
             for i, d in enumerate(ds_ids)]
    return rank_metrics(ranks)


def ranking_metrics(score_fn: Callable[[str], np.ndarray], index: EmbeddingIndex,
                    zoo: ModelZoo) -> dict[str, float]:
    """Metrics for an arbitrary scorer mapping a dataset id to per-model scores."""
    ranks = [pair_rank(score_fn(d), index.model_ids, index.source_ids, d)
             for d in sorted(zoo.datasets)]
    return rank_metrics(ranks)


def baseline_retrievers(zoo: ModelZoo, index: EmbeddingIndex, seed: int = 0,
                        cosine_cfg: TrainConfig | None = None) -> dict[str, Callable[[str], np.ndarray]]:
    """Scorers for the comparison rows of the benchmark.

    ``random`` draws a fresh seeded score vector per dataset,
    ``largest_parameter`` ignores the query, and ``cosine_pretraining``
    retrains the encoders with positive-only cosine regression.
    """
    n = len(index.model_ids)

    def random_scores(d: str) -> np.ndarray:
        return np.random.default_rng([seed, 51, sorted(zoo.datasets).index(d)]).random(n)

    def largest(d: str) -> np.ndarray:
        return index.params.astype(np.float64)

    cfg = cosine_cfg or TrainConfig(rng_seed=seed)
    cfg = TrainConfig(**{**asdict(cfg), "objective": "cosine"})
    cos_index = build_index(zoo, meta_train(zoo, cfg).model, cfg)
    Qc = dict(zip(sorted(zoo.datasets), query_embeddings(cos_index, zoo)))

    def cosine(d: str) -> np.ndarray:
        return cos_index.embeddings.astype(np.float64) @ Qc[d]

    return {"random": random_scores, "largest_parameter": largest, "cosine_pretraining": cosine}


def predictor_mse(index: EmbeddingIndex, zoo: ModelZoo, entries: Sequence[ZooEntry],
                  drop: str | None = None) -> float:
    """Mean squared error of the deterministic predictor on ``entries``.

    ``drop="query"`` or ``drop="model"`` zeroes that half of the input.
    """
    if not entries:
        raise ValueError("no entries to evaluate")
    ds_ids = sorted(zoo.datasets)
    Qd = dict(zip(ds_ids, query_embeddings(index, zoo)))
    Q = np.stack([Qd[e.dataset_id] for e in entries])
    M = np.stack([index.embeddings[index.row(e.network_id)] for e in entries]).astype(np.float64)
    if drop == "query":
        Q = np.zeros_like(Q)
    elif drop == "model":
        M = np.zeros_like(M)
    elif drop is not None:
        raise ValueError(f"unknown input to drop {drop!r}")
    pred = predict_many(Q, M, index.model.predictor)
    y = np.array([e.accuracy for e in entries])
    return float(np.mean((pred - y) ** 2))


def constant_mse(train: Sequence[ZooEntry], test: Sequence[ZooEntry]) -> float:
    """MSE of always predicting the mean training accuracy."""
    mu = float(np.mean([e.accuracy for e in train]))
    return float(np.mean([(e.accuracy - mu) ** 2 for e in test]))


def untrained_index(zoo: ModelZoo, cfg: TrainConfig) -> EmbeddingIndex:
    feature_dim = next(iter(zoo.datasets.values())).feature_dim
    return build_index(zoo, init_model(cfg, feature_dim), cfg)
