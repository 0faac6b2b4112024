"""Query (dataset) and model (network) encoders.

Both encoders emit unit-norm vectors in a shared embedding space. The query
encoder is a set encoder: a learned linear map applied to every probe
instance, mean-pooled, then L2-normalized. The model encoder projects the
normalized concatenation of a network's topology vector and its functional
embedding (outputs on a fixed Gaussian probe batch).
"""

from __future__ import annotations

import collections
from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .diffmath import Parameter, Tensor
from .zoo import (
    DEPTH_CHOICES,
    EXPANSION_CHOICES,
    KERNEL_CHOICES,
    N_UNITS,
    TOPOLOGY_DIM,
    NetworkRecord,
    TopologyDescriptor,
)

# Number of query-encoder forward passes, keyed by call site.
forward_calls: collections.Counter = collections.Counter()

_N_LAYER_SLOTS = (TOPOLOGY_DIM - N_UNITS) // 2
_SLOT_SCALE = np.array([max(DEPTH_CHOICES)] * N_UNITS
                       + [max(KERNEL_CHOICES)] * _N_LAYER_SLOTS
                       + [max(EXPANSION_CHOICES)] * _N_LAYER_SLOTS, dtype=np.float64)

MODEL_INPUT_MODES = ("both", "topology", "functional")


@dataclass
class EncoderConfig:
    feature_dim: int
    embedding_dim: int = 128
    functional_dim: int = 64
    noise_batch: int = 16
    noise_seed: int = 0
    sigma_hidden: bool = False
    model_inputs: str = "both"

    def __post_init__(self):
        if self.model_inputs not in MODEL_INPUT_MODES:
            raise ValueError(f"model_inputs must be one of {MODEL_INPUT_MODES}")

    @property
    def model_input_dim(self) -> int:
        return TOPOLOGY_DIM + self.functional_dim


@dataclass
class QueryEncoderParams:
    rho_w: Parameter
    rho_b: Parameter

    def parameters(self) -> list[Parameter]:
        return [self.rho_w, self.rho_b]


@dataclass
class ModelEncoderParams:
    sigma_w: Parameter
    sigma_b: Parameter
    noise: np.ndarray
    hidden: list[Parameter] = field(default_factory=list)

    def parameters(self) -> list[Parameter]:
        return [*self.hidden, self.sigma_w, self.sigma_b]


def _glorot(rng: np.random.Generator, n_in: int, n_out: int) -> Parameter:
    return Parameter(rng.normal(0.0, np.sqrt(2.0 / (n_in + n_out)), (n_in, n_out)))


def init_query_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> QueryEncoderParams:
    return QueryEncoderParams(_glorot(rng, cfg.feature_dim, cfg.embedding_dim),
                              Parameter(np.zeros(cfg.embedding_dim)))


def gaussian_probes(cfg: EncoderConfig) -> np.ndarray:
    return np.random.default_rng(cfg.noise_seed).normal(size=(cfg.noise_batch, cfg.feature_dim))


def init_model_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> ModelEncoderParams:
    n_in = cfg.model_input_dim
    hidden = []
    if cfg.sigma_hidden:
        hidden = [_glorot(rng, n_in, n_in), Parameter(np.zeros(n_in))]
    return ModelEncoderParams(_glorot(rng, n_in, cfg.embedding_dim),
                              Parameter(np.zeros(cfg.embedding_dim)),
                              gaussian_probes(cfg), hidden)


def canonical_order(X: np.ndarray) -> np.ndarray:
    """Row order sorted by each row's float64 byte encoding."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    return np.array(sorted(range(len(X)), key=lambda i: X[i].tobytes()), dtype=np.int64)


def query_tensor(probe_set: np.ndarray, params: QueryEncoderParams) -> Tensor:
    """Differentiable query embedding of one probe set (shape (d,))."""
    X = np.asarray(probe_set, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("query encoder needs a non-empty (n, F) probe set")
    if X.shape[1] != params.rho_w.shape[0]:
        raise ValueError(f"probe dimension {X.shape[1]} != encoder input {params.rho_w.shape[0]}")
    X = X[canonical_order(X)]
    return dm.l2_normalize(dm.mean_pool(dm.linear(Tensor(X), params.rho_w, params.rho_b)))


def query_batch_tensor(probe_sets: list[np.ndarray], params: QueryEncoderParams) -> Tensor:
    """Embeddings for several probe sets at once, shape (b, d)."""
    sets = [np.asarray(s, dtype=np.float64) for s in probe_sets]
    sets = [s[canonical_order(s)] for s in sets]
    Z = dm.linear(Tensor(np.concatenate(sets)), params.rho_w, params.rho_b)
    return dm.l2_normalize(dm.segment_mean(Z, [len(s) for s in sets]))


def encode_query(probe_set: np.ndarray, params: QueryEncoderParams) -> np.ndarray:
    """Unit query embedding; invariant to the order of ``probe_set`` rows."""
    forward_calls["query"] += 1
    return query_tensor(probe_set, params).data


def topology_vector(topology: TopologyDescriptor) -> np.ndarray:
    """The 45-slot descriptor with every slot divided by its largest legal value."""
    return topology.flatten() / _SLOT_SCALE


def functional_embedding(net: NetworkRecord, noise: np.ndarray, dim: int = 64) -> np.ndarray:
    """Network outputs on the probe batch, flattened and zero-padded/truncated to ``dim``."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.ndim != 2 or noise.shape[1] != net.input_dim:
        raise ValueError(f"noise shape {noise.shape} does not match network input {net.input_dim}")
    out = net.forward(noise).reshape(-1)
    v = np.zeros(dim)
    n = min(dim, out.size)
    v[:n] = out[:n]
    return v


def _join(vt: np.ndarray, vf: np.ndarray) -> np.ndarray:
    x = np.concatenate([vt, vf])
    n = np.linalg.norm(x)
    return x / n if n > 0 else x


def model_input(net: NetworkRecord, noise: np.ndarray, functional_dim: int,
                mode: str = "both") -> np.ndarray:
    """Normalized ``[v_t; v_f]`` with one half zeroed for the ablation modes."""
    if mode not in MODEL_INPUT_MODES:
        raise ValueError(f"unknown model input mode {mode!r}")
    vt = topology_vector(net.topology) if mode != "functional" else np.zeros(TOPOLOGY_DIM)
    vf = functional_embedding(net, noise, functional_dim) if mode != "topology" \
        else np.zeros(functional_dim)
    return _join(vt, vf)


def model_tensor(inputs: np.ndarray | Tensor, params: ModelEncoderParams) -> Tensor:
    """Differentiable model embeddings for rows of pre-built model inputs."""
    x = dm.constant(np.atleast_2d(inputs) if not isinstance(inputs, Tensor) else inputs)
    if params.hidden:
        x = dm.relu(dm.linear(x, params.hidden[0], params.hidden[1]))
    return dm.l2_normalize(dm.linear(x, params.sigma_w, params.sigma_b))


def _functional_dim(params: ModelEncoderParams) -> int:
    first = params.hidden[0] if params.hidden else params.sigma_w
    return first.shape[0] - TOPOLOGY_DIM


def encode_model(net: NetworkRecord, params: ModelEncoderParams, mode: str = "both") -> np.ndarray:
    x = model_input(net, params.noise, _functional_dim(params), mode)
    return model_tensor(x, params).data[0]


def encode_model_topology_only(topology: TopologyDescriptor,
                               params: ModelEncoderParams) -> np.ndarray:
    """Embedding from the architecture alone; the functional half is zero."""
    x = _join(topology_vector(topology), np.zeros(_functional_dim(params)))
    return model_tensor(x, params).data[0]


def encode_model_functional_only(net: NetworkRecord, params: ModelEncoderParams) -> np.ndarray:
    return encode_model(net, params, "functional")
