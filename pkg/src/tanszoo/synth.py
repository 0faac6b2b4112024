"""Synthetic model-zoo generator.

Datasets are Gaussian-cluster classification tasks; networks are small
rectifier MLPs whose shape comes from a 45-slot topology descriptor. Hidden
layers are seeded random features, the input standardization of the target
dataset is folded into the first layer, and the output layer is fitted in
closed form by ridge regression on one-hot labels. Latency is an affine
function of the multiply-accumulate count.
"""

from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .zoo import (
    DatasetRecord,
    ModelZoo,
    NetworkRecord,
    TopologyDescriptor,
    ZooEntry,
    count_layer_params,
    normalize_resources,
)

log = logging.getLogger(__name__)

RIDGE = 1e-3
RIDGE_FALLBACK = 1e-1
PROBES_PER_CLASS = 10


@dataclass(frozen=True)
class SynthConfig:
    n_datasets: int = 20
    min_classes: int = 2
    max_classes: int = 5
    min_per_class: int = 50
    max_per_class: int = 100
    feature_dim: int = 16
    networks_per_dataset: int = 10
    rng_seed: int = 0
    center_scale: float = 0.0
    min_separation: float = 0.4
    max_separation: float = 1.2
    latency_per_mac: float = 1e-9
    latency_offset: float = 1e-5
    hidden_bias: float = 2.0

    def __post_init__(self):
        for name in ("n_datasets", "min_classes", "min_per_class", "networks_per_dataset"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.min_classes < 2 or self.max_classes < self.min_classes:
            raise ValueError("need 2 <= min_classes <= max_classes")
        if self.max_per_class < self.min_per_class:
            raise ValueError("max_per_class < min_per_class")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")
        if self.latency_per_mac <= 0 or self.latency_offset < 0:
            raise ValueError("latency model must give positive latencies")


def dataset_id(k: int) -> str:
    return f"ds{k:03d}"


def network_id(k: int, j: int) -> str:
    return f"ds{k:03d}-net{j:02d}"


def gen_dataset(cfg: SynthConfig, k: int) -> DatasetRecord:
    rng = np.random.default_rng([cfg.rng_seed, 0, k])
    F = cfg.feature_dim
    n_classes = int(rng.integers(cfg.min_classes, cfg.max_classes + 1))
    center = rng.normal(0.0, cfg.center_scale, F)
    separation = rng.uniform(cfg.min_separation, cfg.max_separation)
    means = center + separation * rng.normal(size=(n_classes, F))
    mixing = np.eye(F) + 0.3 * rng.normal(size=(F, F)) / math.sqrt(F)

    feats, labels, train, val, probe = [], [], [], [], []
    start = 0
    for c in range(n_classes):
        n_c = int(rng.integers(cfg.min_per_class, cfg.max_per_class + 1))
        feats.append(means[c] + rng.normal(size=(n_c, F)) @ mixing.T)
        labels.append(np.full(n_c, c))
        order = start + rng.permutation(n_c)
        n_val = int(round(0.2 * n_c))
        val.append(order[:n_val])
        train.append(order[n_val:])
        probe.append(order[:min(PROBES_PER_CLASS, n_val)])
        start += n_c
    # shuffle instance order so class blocks are not contiguous
    perm = rng.permutation(start)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(start)
    X = np.concatenate(feats)[perm]
    y = np.concatenate(labels)[perm]
    return DatasetRecord(
        dataset_id(k), n_classes, X.astype(np.float32), y,
        np.sort(inv[np.concatenate(probe)]),
        np.sort(inv[np.concatenate(train)]),
        np.sort(inv[np.concatenate(val)]))


def hidden_widths(topology: TopologyDescriptor) -> list[int]:
    """Hidden layer widths: ceil((sum(depths) - 5) / 4) layers, min 1.

    Layer j takes its width ``4 * kernel + 2 * expansion`` from the j-th
    active slot of the descriptor.
    """
    n_layers = max(1, math.ceil((sum(topology.depths) - 5) / 4))
    slots = topology.active_slots()[:n_layers]
    return [4 * topology.kernels[s] + 2 * topology.expansions[s] for s in slots]


def init_seed(topology: TopologyDescriptor, dataset_id: str) -> int:
    h = hashlib.sha256(topology.flatten().tobytes() + dataset_id.encode()).digest()
    return int.from_bytes(h[:8], "little")


def init_layers(layer_sizes: list[int], seed: int,
                bias_shift: float = 0.0) -> list[tuple[np.ndarray, np.ndarray]]:
    """He-normal random layers. The last layer is the generic (untrained) head.

    Hidden biases are drawn around ``bias_shift``.
    """
    rng = np.random.default_rng(seed)
    layers = []
    for i, (a, b) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        shift = bias_shift if i < len(layer_sizes) - 2 else 0.0
        layers.append((rng.normal(0.0, math.sqrt(2.0 / a), (a, b)),
                       rng.normal(shift, 0.1, b)))
    return layers


def _flatten(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([W.reshape(-1), b]) for W, b in layers])


def _hidden(layers, X: np.ndarray) -> np.ndarray:
    h = X
    for W, b in layers:
        h = np.maximum(h @ W + b, 0.0)
    return h


def _ridge(H: np.ndarray, Y: np.ndarray, lam: float) -> np.ndarray:
    A = H.T @ H + lam * np.eye(H.shape[1])
    sol = np.linalg.solve(A, H.T @ Y)
    if not np.all(np.isfinite(sol)) or np.linalg.cond(A) > 1e12:
        raise np.linalg.LinAlgError("ill-conditioned ridge system")
    return sol


def pretrain_network(topology: TopologyDescriptor, dataset: DatasetRecord, net_id: str,
                     cfg: SynthConfig | None = None) -> NetworkRecord:
    """Fit a network of the given topology to ``dataset``.

    Deterministic in (topology, dataset id): the same pair always yields the
    same float32 weights.
    """
    cfg = cfg or SynthConfig(feature_dim=dataset.feature_dim)
    seed = init_seed(topology, dataset.id)
    sizes = [dataset.feature_dim, *hidden_widths(topology), dataset.class_count]
    layers = init_layers(sizes, seed, cfg.hidden_bias)[:-1]

    Xtr = dataset.features[dataset.train_indices].astype(np.float64)
    ytr = dataset.labels[dataset.train_indices]
    mu = Xtr.mean(axis=0)
    sd = Xtr.std(axis=0) + 1e-6
    W1, b1 = layers[0]
    layers[0] = (W1 / sd[:, None], b1 - (mu / sd) @ W1)
    layers = [(W.astype(np.float32).astype(np.float64), b.astype(np.float32).astype(np.float64))
              for W, b in layers]

    H = _hidden(layers, Xtr)
    H1 = np.hstack([H, np.ones((H.shape[0], 1))])
    Y = np.eye(dataset.class_count)[ytr]
    try:
        sol = _ridge(H1, Y, RIDGE)
    except np.linalg.LinAlgError:
        log.warning("ridge system for %s singular; retrying with lambda=%g", net_id, RIDGE_FALLBACK)
        sol = _ridge(H1, Y, RIDGE_FALLBACK)
    layers.append((sol[:-1], sol[-1]))

    params = _flatten(layers).astype(np.float32)
    assert params.size == count_layer_params(sizes)
    net = NetworkRecord(net_id, topology, tuple(sizes), params, 1.0, dataset.id, seed)
    net.latency = measure_latency(net, cfg)
    return net


def generic_network(net: NetworkRecord, bias_shift: float = 0.0) -> NetworkRecord:
    """The same architecture with its seeded, untrained weights (no dataset fit)."""
    layers = init_layers(list(net.layer_sizes), net.init_seed, bias_shift)
    return NetworkRecord(net.id, net.topology, net.layer_sizes,
                         _flatten(layers).astype(np.float32), net.latency,
                         net.source_dataset_id, net.init_seed)


def predict_labels(net: NetworkRecord, X: np.ndarray, n_classes: int | None = None) -> np.ndarray:
    """Argmax class with ties going to the lower index.

    When ``n_classes`` differs from the network's output width, logits are
    truncated or padded with -inf so networks can be scored on other tasks.
    """
    logits = net.forward(X)
    if n_classes is not None and n_classes != logits.shape[1]:
        if n_classes < logits.shape[1]:
            logits = logits[:, :n_classes]
        else:
            pad = np.full((logits.shape[0], n_classes - logits.shape[1]), -np.inf)
            logits = np.hstack([logits, pad])
    return np.argmax(logits, axis=1)


def evaluate_network(net: NetworkRecord, dataset: DatasetRecord) -> float:
    """Validation accuracy of ``net`` on ``dataset``."""
    idx = dataset.validation_indices
    if idx.size == 0:
        return 0.0
    pred = predict_labels(net, dataset.features[idx], dataset.class_count)
    return float(np.mean(pred == dataset.labels[idx]))


def count_params(net: NetworkRecord) -> int:
    return count_layer_params(net.layer_sizes)


def measure_latency(net: NetworkRecord, cfg: SynthConfig) -> float:
    """Simulated latency in seconds: ``latency_per_mac * MACs + latency_offset``."""
    return cfg.latency_per_mac * net.macs + cfg.latency_offset


def gen_network(cfg: SynthConfig, dataset: DatasetRecord, k: int, j: int) -> NetworkRecord:
    rng = np.random.default_rng([cfg.rng_seed, 1, k, j])
    return pretrain_network(TopologyDescriptor.sample(rng), dataset, network_id(k, j), cfg)


def build_full_zoo(cfg: SynthConfig, jobs: int = 1) -> ModelZoo:
    """Generate every dataset, fit every network on it, and normalize costs."""
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        datasets = list(pool.map(lambda k: gen_dataset(cfg, k), range(cfg.n_datasets)))
        pairs = [(k, j) for k in range(cfg.n_datasets) for j in range(cfg.networks_per_dataset)]
        nets = list(pool.map(lambda kj: gen_network(cfg, datasets[kj[0]], *kj), pairs))
    entries = [ZooEntry(datasets[k].id, net.id, evaluate_network(net, datasets[k]))
               for (k, _), net in zip(pairs, nets)]
    return normalize_resources(entries, {d.id: d for d in datasets}, {n.id: n for n in nets})
