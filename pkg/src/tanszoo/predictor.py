"""Performance surrogate: predicts a network's accuracy on a dataset from [q; m]."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import Parameter, Tensor
from .zoo import Hit

DEFAULT_RERANK_K = 10


@dataclass
class PredictorParams:
    fc_w: Parameter
    fc_b: Parameter
    head_w: Parameter
    head_b: Parameter
    dropout_p: float = 0.5

    def parameters(self) -> list[Parameter]:
        return [self.fc_w, self.fc_b, self.head_w, self.head_b]

    @property
    def input_dim(self) -> int:
        return self.fc_w.shape[0]


def init_predictor(embedding_dim: int, rng: np.random.Generator, hidden: int = 256,
                   dropout_p: float = 0.5) -> PredictorParams:
    n_in = 2 * embedding_dim
    return PredictorParams(
        Parameter(rng.normal(0.0, np.sqrt(2.0 / n_in), (n_in, hidden))),
        Parameter(np.zeros(hidden)),
        Parameter(rng.normal(0.0, np.sqrt(1.0 / hidden), (hidden, 1))),
        Parameter(np.zeros(1)),
        dropout_p)


def zero_predictor(embedding_dim: int, hidden: int = 256) -> PredictorParams:
    n_in = 2 * embedding_dim
    return PredictorParams(Parameter(np.zeros((n_in, hidden))), Parameter(np.zeros(hidden)),
                           Parameter(np.zeros((hidden, 1))), Parameter(np.zeros(1)))


def dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: kept units scaled by 1/(1-p)."""
    return (rng.random(shape) >= p) / (1.0 - p)


def predict_tensor(q: Tensor, m: Tensor, params: PredictorParams,
                   mask: np.ndarray | None = None) -> Tensor:
    """Batched prediction for rows of ``q`` and ``m`` (both (b, d)); returns (b,)."""
    x = dm.concat([q, m], axis=1)
    if x.shape[1] != params.input_dim:
        raise ValueError(f"predictor expects {params.input_dim}-dim [q; m], got {x.shape[1]}")
    h = dm.relu(dm.linear(x, params.fc_w, params.fc_b))
    if mask is not None:
        h = dm.mul(h, mask)
    out = dm.sigmoid(dm.linear(h, params.head_w, params.head_b))
    return dm.total(out, axis=1)


def predict_many(Q: np.ndarray, M: np.ndarray, params: PredictorParams,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Plain-numpy batched predictions; dropout is applied when ``rng`` is given."""
    x = np.hstack([np.atleast_2d(Q), np.atleast_2d(M)])
    if x.shape[1] != params.input_dim:
        raise ValueError(f"predictor expects {params.input_dim}-dim [q; m], got {x.shape[1]}")
    h = np.maximum(x @ params.fc_w.data + params.fc_b.data, 0.0)
    if rng is not None:
        h = h * dropout_mask(h.shape, params.dropout_p, rng)
    return dm._sigmoid((h @ params.head_w.data + params.head_b.data)[:, 0])


def predict(q: np.ndarray, m: np.ndarray, params: PredictorParams, mode: str = "deterministic",
            seed: int | None = None) -> float:
    """Predicted accuracy in (0, 1).

    ``mode="dropout"`` draws one Monte-Carlo dropout sample using ``seed``.
    """
    if mode not in ("deterministic", "dropout"):
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed) if mode == "dropout" else None
    return float(predict_many(q, m, params, rng)[0])


def surrogate_loss(pred: Tensor, s_acc) -> Tensor:
    """Squared error between predicted and true accuracy (elementwise)."""
    pred = dm.constant(pred)
    target = np.broadcast_to(np.asarray(s_acc, dtype=np.float64), pred.shape)
    return dm.square(dm.sub(pred, Tensor(target)))


def rerank_topk(candidates: Sequence[Hit], q: np.ndarray, params: PredictorParams | None,
                K: int = DEFAULT_RERANK_K, embeddings: dict[str, np.ndarray] | None = None,
                predict_fn: Callable[[str], float] | None = None) -> list[Hit]:
    """Reorder the first ``K`` candidates by predicted accuracy, descending.

    Candidates past ``K`` keep their place. Equal predictions keep the
    incoming (similarity) order. ``predict_fn`` replaces the surrogate, e.g.
    with an oracle, and receives a model id.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    head, tail = list(candidates[:K]), list(candidates[K:])
    if not head:
        return []
    if predict_fn is not None:
        preds = [float(predict_fn(h.model_id)) for h in head]
    else:
        M = np.stack([embeddings[h.model_id] for h in head]).astype(np.float64)
        Q = np.repeat(np.asarray(q, dtype=np.float64)[None, :], len(head), axis=0)
        preds = predict_many(Q, M, params).tolist()
    order = sorted(range(len(head)), key=lambda i: (-preds[i], i))
    return [dataclasses.replace(head[i], predicted_accuracy=preds[i]) for i in order] + tail
