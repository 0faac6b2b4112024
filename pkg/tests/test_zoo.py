import json

import numpy as np
import pytest

from tanszoo.synth import SynthConfig, build_full_zoo
from tanszoo.zoo import (
    TOPOLOGY_DIM,
    Constraints,
    ModelZoo,
    TopologyDescriptor,
    ZooEntry,
    ZooFormatError,
    ZooIntegrityError,
    load_zoo,
    min_max,
    save_zoo,
)


class TestTopology:
    def test_flatten_has_45_slots(self):
        t = TopologyDescriptor.sample(np.random.default_rng(0))
        assert t.flatten().shape == (TOPOLOGY_DIM,)

    def test_inactive_slots_zero(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            t = TopologyDescriptor.sample(rng)
            for u, d in enumerate(t.depths):
                for j in range(d, 4):
                    assert t.kernels[4 * u + j] == 0 and t.expansions[4 * u + j] == 0

    def test_illegal_choice_rejected(self):
        t = TopologyDescriptor.sample(np.random.default_rng(2))
        bad = list(t.kernels)
        bad[0] = 4
        with pytest.raises(ValueError):
            TopologyDescriptor(t.depths, tuple(bad), t.expansions)

    def test_nonzero_inactive_rejected(self):
        depths = (2,) * 5
        kernels = tuple(3 if j < 2 else 0 for _ in range(5) for j in range(4))
        exps = list(kernels)
        exps[3] = 3  # slot 3 is beyond depth 2
        with pytest.raises(ValueError):
            TopologyDescriptor(depths, kernels, tuple(exps))

    def test_json_round_trip(self):
        t = TopologyDescriptor.sample(np.random.default_rng(3))
        assert TopologyDescriptor.from_json(json.loads(json.dumps(t.to_json()))) == t


class TestNormalization:
    def test_latencies(self):
        assert min_max([2, 4, 6])[0] == [0.0, 0.5, 1.0]

    def test_constant(self):
        assert min_max([3.0, 3.0, 3.0])[0] == [0.0, 0.0, 0.0]

    def test_params(self):
        assert min_max([1000, 3000, 2000])[0] == [0.0, 1.0, 0.5]

    def test_empty(self):
        with pytest.raises(ValueError):
            min_max([])

    def test_entry_range_checked(self):
        with pytest.raises(ZooIntegrityError):
            ZooEntry("d", "n", 1.2)


class TestConstraints:
    def test_positive_bounds(self):
        with pytest.raises(ValueError):
            Constraints(max_params=0)

    def test_admits(self):
        c = Constraints(max_params=100, max_flops=50)
        assert c.admits(100, 50, 1.0)
        assert not c.admits(101, 50, 1.0)
        assert not c.admits(10, 51, 1.0)
        assert Constraints().admits(10**9, 10**9, 1e9)


@pytest.fixture(scope="module")
def zoo50():
    z = build_full_zoo(SynthConfig(n_datasets=5, networks_per_dataset=10, rng_seed=11))
    assert len(z.entries) == 50
    return z


class TestPersistence:
    def test_empty_file(self, tmp_path):
        p = tmp_path / "z.jsonl"
        p.write_text("")
        assert len(load_zoo(p).entries) == 0

    def test_empty_zoo_writes_header_only(self, tmp_path):
        p = tmp_path / "z.jsonl"
        save_zoo(ModelZoo(), p)
        lines = p.read_text().splitlines()
        assert len(lines) == 1 and "format_version" in json.loads(lines[0])
        assert load_zoo(p).entries == []

    def test_round_trip_byte_identical(self, zoo50, tmp_path):
        (tmp_path / "a").mkdir()
        (tmp_path / "b").mkdir()
        a, b = tmp_path / "a" / "z.jsonl", tmp_path / "b" / "z.jsonl"
        save_zoo(zoo50, a)
        save_zoo(load_zoo(a), b)
        assert a.read_bytes() == b.read_bytes()
        assert (tmp_path / "a" / "z.jsonl.bin").read_bytes() == (tmp_path / "b" / "z.jsonl.bin").read_bytes()

    def test_round_trip_equal(self, zoo50, tmp_path):
        p = tmp_path / "z.jsonl"
        save_zoo(zoo50, p)
        z = load_zoo(p)
        assert z.entries == zoo50.entries
        assert z.datasets == zoo50.datasets
        assert z.networks == zoo50.networks

    def test_accuracy_one_exact(self, zoo50, tmp_path):
        e = zoo50.entries[0]
        z = zoo50.subset([ZooEntry(e.dataset_id, e.network_id, 1.0, e.norm_latency, e.norm_params)])
        p = tmp_path / "z.jsonl"
        save_zoo(z, p)
        assert '"accuracy": 1.0' in p.read_text()
        assert load_zoo(p).entries[0].accuracy == 1.0

    def test_dangling_network(self, zoo50, tmp_path):
        p = tmp_path / "z.jsonl"
        save_zoo(zoo50.subset(zoo50.entries[:2]), p)
        lines = p.read_text().splitlines()
        rec = json.loads(lines[2])
        rec["network_id"] = "missing-net"
        rec.pop("network", None)
        lines[2] = json.dumps(rec)
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(ZooIntegrityError, match="missing-net"):
            load_zoo(p)

    def test_parse_error_line_number(self, zoo50, tmp_path):
        p = tmp_path / "z.jsonl"
        save_zoo(zoo50.subset(zoo50.entries[:3]), p)
        lines = p.read_text().splitlines()
        lines[2] = "{not json"
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(ZooFormatError, match="line 3"):
            load_zoo(p)

    def test_orphan_records_refused(self, zoo50, tmp_path):
        z = ModelZoo(zoo50.entries[:1], dict(zoo50.datasets), dict(zoo50.networks),
                     zoo50.normalization_stats)
        with pytest.raises(ZooIntegrityError):
            save_zoo(z, tmp_path / "z.jsonl")

    def test_duplicate_entry(self, zoo50):
        z = zoo50.subset(zoo50.entries[:2])
        z.entries.append(z.entries[0])
        with pytest.raises(ZooIntegrityError, match="duplicate"):
            z.validate()

    def test_stats_must_reproduce(self, zoo50):
        z = zoo50.subset(zoo50.entries)
        z.normalization_stats["latency"][1] *= 2
        with pytest.raises(ZooIntegrityError):
            z.validate()
