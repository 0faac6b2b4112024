"""Domain records for the model zoo and its JSON-Lines file format.

A zoo file is JSON Lines. The first line is a header holding the format
version and the min/max statistics used to normalize latency and parameter
counts. Every following line is one zoo entry; the first entry that mentions
a dataset or network embeds its record, later entries refer to it by id.
Bulk arrays (dataset instances, network weights) live in a sidecar file of
little-endian float32 values next to the JSON file, referenced by relative
path, element offset and element count.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FORMAT_VERSION = 1

DEPTH_CHOICES = (2, 3, 4)
KERNEL_CHOICES = (3, 5, 7)
EXPANSION_CHOICES = (3, 4, 6)
N_UNITS = 5
LAYERS_PER_UNIT = 4
TOPOLOGY_DIM = N_UNITS + 2 * N_UNITS * LAYERS_PER_UNIT  # 45


class ZooError(Exception):
    """Base class for zoo validation failures."""


class ZooFormatError(ZooError):
    pass


class ZooIntegrityError(ZooError):
    pass


@dataclass(frozen=True)
class TopologyDescriptor:
    depths: tuple[int, ...]
    kernels: tuple[int, ...]
    expansions: tuple[int, ...]

    def __post_init__(self):
        if len(self.depths) != N_UNITS or len(self.kernels) != N_UNITS * LAYERS_PER_UNIT \
                or len(self.expansions) != N_UNITS * LAYERS_PER_UNIT:
            raise ValueError("topology must have 5 depths, 20 kernels and 20 expansions")
        for u, d in enumerate(self.depths):
            if d not in DEPTH_CHOICES:
                raise ValueError(f"unit {u}: illegal depth {d}")
            for j in range(LAYERS_PER_UNIT):
                s = u * LAYERS_PER_UNIT + j
                k, e = self.kernels[s], self.expansions[s]
                if j < d:
                    if k not in KERNEL_CHOICES or e not in EXPANSION_CHOICES:
                        raise ValueError(f"slot {s}: illegal kernel/expansion {k}/{e}")
                elif k != 0 or e != 0:
                    raise ValueError(f"slot {s}: inactive layer must be 0")

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "TopologyDescriptor":
        depths = [int(rng.choice(DEPTH_CHOICES)) for _ in range(N_UNITS)]
        kernels, expansions = [], []
        for d in depths:
            for j in range(LAYERS_PER_UNIT):
                if j < d:
                    kernels.append(int(rng.choice(KERNEL_CHOICES)))
                    expansions.append(int(rng.choice(EXPANSION_CHOICES)))
                else:
                    kernels.append(0)
                    expansions.append(0)
        return cls(tuple(depths), tuple(kernels), tuple(expansions))

    def flatten(self) -> np.ndarray:
        """The raw 45-slot vector (depths, kernels, expansions)."""
        return np.array(self.depths + self.kernels + self.expansions, dtype=np.float64)

    def active_slots(self) -> list[int]:
        return [u * LAYERS_PER_UNIT + j for u, d in enumerate(self.depths) for j in range(d)]

    def to_json(self) -> dict:
        return {"depths": list(self.depths), "kernels": list(self.kernels),
                "expansions": list(self.expansions)}

    @classmethod
    def from_json(cls, obj: dict) -> "TopologyDescriptor":
        return cls(tuple(obj["depths"]), tuple(obj["kernels"]), tuple(obj["expansions"]))


@dataclass(eq=False)
class DatasetRecord:
    """A labeled classification task plus the probe instances used as its query."""

    id: str
    class_count: int
    features: np.ndarray  # (n, F) float32
    labels: np.ndarray  # (n,) int64
    probe_indices: np.ndarray
    train_indices: np.ndarray
    validation_indices: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        for name in ("probe_indices", "train_indices", "validation_indices"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64))

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def probe_set(self) -> np.ndarray:
        return self.features[self.probe_indices]

    def validate(self) -> None:
        if self.class_count < 2:
            raise ZooIntegrityError(f"dataset {self.id}: class_count < 2")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ZooIntegrityError(f"dataset {self.id}: label out of range")
        if np.intersect1d(self.train_indices, self.validation_indices).size:
            raise ZooIntegrityError(f"dataset {self.id}: train and validation overlap")
        n = len(self.labels)
        for arr in (self.probe_indices, self.train_indices, self.validation_indices):
            if arr.size and (arr.min() < 0 or arr.max() >= n):
                raise ZooIntegrityError(f"dataset {self.id}: index out of range")

    def __eq__(self, other):
        if not isinstance(other, DatasetRecord):
            return NotImplemented
        return (self.id == other.id and self.class_count == other.class_count
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("features", "labels", "probe_indices",
                                  "train_indices", "validation_indices")))


@dataclass(eq=False)
class NetworkRecord:
    """A small fully-connected network with measured resource costs.

    ``parameters`` is the flat float32 weight vector: for each layer the
    (in, out) weight matrix in row-major order followed by its bias.
    Hidden layers use a rectifier; the last layer emits class logits.
    """

    id: str
    topology: TopologyDescriptor
    layer_sizes: tuple[int, ...]
    parameters: np.ndarray
    latency: float
    source_dataset_id: str
    init_seed: int = 0

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        self.parameters = np.asarray(self.parameters, dtype=np.float32)
        expected = count_layer_params(self.layer_sizes)
        if self.parameters.size != expected:
            raise ZooIntegrityError(
                f"network {self.id}: {self.parameters.size} parameters, layers need {expected}")

    @property
    def param_count(self) -> int:
        return int(self.parameters.size)

    @property
    def macs(self) -> int:
        return sum(a * b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        out, pos = [], 0
        for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            W = self.parameters[pos:pos + a * b].reshape(a, b)
            pos += a * b
            out.append((W, self.parameters[pos:pos + b]))
            pos += b
        return out

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        layers = self.layers()
        for i, (W, b) in enumerate(layers):
            h = h @ W.astype(np.float64) + b.astype(np.float64)
            if i < len(layers) - 1:
                h = np.maximum(h, 0.0)
        return h

    def __eq__(self, other):
        if not isinstance(other, NetworkRecord):
            return NotImplemented
        return (self.id == other.id and self.topology == other.topology
                and self.layer_sizes == other.layer_sizes
                and np.array_equal(self.parameters, other.parameters)
                and self.latency == other.latency
                and self.source_dataset_id == other.source_dataset_id
                and self.init_seed == other.init_seed)


def count_layer_params(layer_sizes: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(layer_sizes[:-1], layer_sizes[1:]))


@dataclass(frozen=True)
class ZooEntry:
    dataset_id: str
    network_id: str
    accuracy: float
    norm_latency: float = 0.0
    norm_params: float = 0.0

    def __post_init__(self):
        for name in ("accuracy", "norm_latency", "norm_params"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ZooIntegrityError(
                    f"entry ({self.dataset_id}, {self.network_id}): {name}={v} outside [0, 1]")

    @property
    def key(self) -> tuple[str, str]:
        return (self.dataset_id, self.network_id)


@dataclass(frozen=True)
class Constraints:
    max_params: int | None = None
    max_flops: int | None = None
    max_latency: float | None = None

    def __post_init__(self):
        for name in ("max_params", "max_flops", "max_latency"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive, got {v}")

    def admits(self, params: int, flops: int, latency: float) -> bool:
        return ((self.max_params is None or params <= self.max_params)
                and (self.max_flops is None or flops <= self.max_flops)
                and (self.max_latency is None or latency <= self.max_latency))


@dataclass(frozen=True)
class Hit:
    """One ranked retrieval candidate."""

    model_id: str
    similarity: float
    predicted_accuracy: float | None = None
    meets_constraints: bool = True


@dataclass
class ModelZoo:
    entries: list[ZooEntry] = field(default_factory=list)
    datasets: dict[str, DatasetRecord] = field(default_factory=dict)
    networks: dict[str, NetworkRecord] = field(default_factory=dict)
    normalization_stats: dict[str, list[float]] = field(default_factory=dict)

    def validate(self) -> None:
        seen = set()
        for e in self.entries:
            if e.key in seen:
                raise ZooIntegrityError(f"duplicate entry {e.key}")
            seen.add(e.key)
            if e.dataset_id not in self.datasets:
                raise ZooIntegrityError(f"entry refers to unknown dataset id {e.dataset_id!r}")
            if e.network_id not in self.networks:
                raise ZooIntegrityError(f"entry refers to unknown network id {e.network_id!r}")
        for d in self.datasets.values():
            d.validate()
        for n in self.networks.values():
            if not n.latency > 0:
                raise ZooIntegrityError(f"network {n.id}: latency must be positive")
        if self.entries:
            lat = self.normalization_stats.get("latency")
            par = self.normalization_stats.get("params")
            if lat is None or par is None:
                raise ZooIntegrityError("missing normalization_stats")
            for e in self.entries:
                net = self.networks[e.network_id]
                if abs(min_max_scale(net.latency, *lat) - e.norm_latency) > 1e-9 \
                        or abs(min_max_scale(net.param_count, *par) - e.norm_params) > 1e-9:
                    raise ZooIntegrityError(
                        f"entry {e.key}: normalized resources disagree with stored stats")

    def entries_for(self, dataset_id: str) -> list[ZooEntry]:
        return [e for e in self.entries if e.dataset_id == dataset_id]

    def entry(self, dataset_id: str, network_id: str) -> ZooEntry:
        for e in self.entries:
            if e.key == (dataset_id, network_id):
                return e
        raise KeyError((dataset_id, network_id))

    def subset(self, entries: Iterable[ZooEntry]) -> "ModelZoo":
        """A zoo holding only ``entries`` and the records they reference; stats kept."""
        entries = list(entries)
        ds = {e.dataset_id for e in entries}
        nets = {e.network_id for e in entries}
        return ModelZoo(entries,
                        {k: v for k, v in self.datasets.items() if k in ds},
                        {k: v for k, v in self.networks.items() if k in nets},
                        {k: list(v) for k, v in self.normalization_stats.items()})


def min_max_scale(value: float, lo: float, hi: float) -> float:
    if hi == lo:
        return 0.0
    return (value - lo) / (hi - lo)


def min_max(values: Sequence[float]) -> tuple[list[float], list[float]]:
    """Affine-rescale to [0, 1]; constant inputs map to 0. Returns (scaled, [min, max])."""
    if len(values) == 0:
        raise ValueError("cannot normalize an empty sequence")
    lo, hi = float(min(values)), float(max(values))
    return [min_max_scale(float(v), lo, hi) for v in values], [lo, hi]


def normalize_resources(entries: Sequence[ZooEntry], datasets: dict[str, DatasetRecord],
                        networks: dict[str, NetworkRecord],
                        stats: dict[str, list[float]] | None = None) -> ModelZoo:
    """Fill norm_latency / norm_params from the networks' raw costs.

    Statistics are taken over the networks referenced by ``entries`` unless
    ``stats`` is given, in which case they are reused verbatim.
    """
    if not entries:
        raise ValueError("cannot normalize an empty zoo")
    if stats is None:
        used = sorted({e.network_id for e in entries})
        _, lat = min_max([networks[n].latency for n in used])
        _, par = min_max([networks[n].param_count for n in used])
        stats = {"latency": lat, "params": par}
    out = []
    for e in entries:
        net = networks[e.network_id]
        out.append(dataclasses.replace(
            e,
            norm_latency=min_max_scale(net.latency, *stats["latency"]),
            norm_params=min_max_scale(net.param_count, *stats["params"])))
    zoo = ModelZoo(out, dict(datasets), dict(networks), {k: list(v) for k, v in stats.items()})
    zoo.validate()
    return zoo


# --------------------------------------------------------------------------
# serialization

class _Sidecar:
    def __init__(self, name: str):
        self.name = name
        self.chunks: list[bytes] = []
        self.offset = 0

    def put(self, arr: np.ndarray) -> dict:
        flat = np.ascontiguousarray(arr, dtype="<f4").reshape(-1)
        ref = {"path": self.name, "offset": self.offset, "count": int(flat.size)}
        self.chunks.append(flat.tobytes())
        self.offset += flat.size
        return ref


def _dataset_json(d: DatasetRecord, side: _Sidecar) -> dict:
    return {
        "id": d.id,
        "class_count": d.class_count,
        "shape": list(d.features.shape),
        "instances": side.put(d.features),
        "labels": d.labels.tolist(),
        "probe_indices": d.probe_indices.tolist(),
        "train_indices": d.train_indices.tolist(),
        "validation_indices": d.validation_indices.tolist(),
    }


def _network_json(n: NetworkRecord, side: _Sidecar) -> dict:
    return {
        "id": n.id,
        "source_dataset_id": n.source_dataset_id,
        "topology": n.topology.to_json(),
        "layer_sizes": list(n.layer_sizes),
        "param_count": n.param_count,
        "latency": n.latency,
        "init_seed": n.init_seed,
        "parameters": side.put(n.parameters),
    }


def save_zoo(zoo: ModelZoo, path: str | os.PathLike) -> None:
    zoo.validate()
    path = Path(path)
    ds_used = {e.dataset_id for e in zoo.entries}
    net_used = {e.network_id for e in zoo.entries}
    orphans = (set(zoo.datasets) - ds_used) | (set(zoo.networks) - net_used)
    if orphans:
        raise ZooIntegrityError(f"records not referenced by any entry: {sorted(orphans)}")
    side = _Sidecar(path.name + ".bin")
    lines = [json.dumps({"format_version": FORMAT_VERSION,
                         "normalization_stats": zoo.normalization_stats}, sort_keys=True)]
    done_ds, done_net = set(), set()
    for e in zoo.entries:
        obj = {"dataset_id": e.dataset_id, "network_id": e.network_id, "accuracy": e.accuracy,
               "norm_latency": e.norm_latency, "norm_params": e.norm_params}
        if e.dataset_id not in done_ds:
            obj["dataset"] = _dataset_json(zoo.datasets[e.dataset_id], side)
            done_ds.add(e.dataset_id)
        if e.network_id not in done_net:
            obj["network"] = _network_json(zoo.networks[e.network_id], side)
            done_net.add(e.network_id)
        lines.append(json.dumps(obj, sort_keys=True))
    path.write_text("\n".join(lines) + "\n")
    side_path = path.with_name(side.name)
    if side.chunks:
        side_path.write_bytes(b"".join(side.chunks))
    elif side_path.exists():
        side_path.unlink()


def _read_ref(ref: dict, base: Path, cache: dict) -> np.ndarray:
    p = base / ref["path"]
    if p not in cache:
        cache[p] = np.fromfile(p, dtype="<f4")
    data = cache[p]
    start, count = int(ref["offset"]), int(ref["count"])
    if start + count > data.size:
        raise ZooFormatError(f"sidecar {p} too short for reference {ref}")
    return data[start:start + count].astype(np.float32)


def load_zoo(path: str | os.PathLike) -> ModelZoo:
    path = Path(path)
    text = path.read_text()
    lines = text.splitlines()
    if not lines or not any(l.strip() for l in lines):
        return ModelZoo()
    cache: dict = {}
    zoo = ModelZoo()
    for lineno, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ZooFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
        try:
            if lineno == 1:
                if obj.get("format_version") != FORMAT_VERSION:
                    raise ZooFormatError(f"line 1: unsupported format_version "
                                         f"{obj.get('format_version')!r}")
                zoo.normalization_stats = {k: [float(x) for x in v]
                                           for k, v in obj["normalization_stats"].items()}
                continue
            if "dataset" in obj:
                d = obj["dataset"]
                feats = _read_ref(d["instances"], path.parent, cache).reshape(d["shape"])
                zoo.datasets[d["id"]] = DatasetRecord(
                    d["id"], int(d["class_count"]), feats, d["labels"], d["probe_indices"],
                    d["train_indices"], d["validation_indices"])
            if "network" in obj:
                n = obj["network"]
                net = NetworkRecord(
                    n["id"], TopologyDescriptor.from_json(n["topology"]), n["layer_sizes"],
                    _read_ref(n["parameters"], path.parent, cache), float(n["latency"]),
                    n["source_dataset_id"], int(n.get("init_seed", 0)))
                if net.param_count != n["param_count"]:
                    raise ZooIntegrityError(f"network {net.id}: param_count mismatch")
                zoo.networks[n["id"]] = net
            entry = ZooEntry(obj["dataset_id"], obj["network_id"], float(obj["accuracy"]),
                             float(obj["norm_latency"]), float(obj["norm_params"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ZooFormatError(f"line {lineno}: malformed record ({exc!r})") from None
        zoo.entries.append(entry)
    zoo.validate()
    return zoo
