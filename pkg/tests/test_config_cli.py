import json

import numpy as np
import pytest

from tanszoo.cli import main, read_probe
from tanszoo.config import ConfigError, build, default_seed, load_config, parse_config
from tanszoo.contrastive import TrainConfig
from tanszoo.synth import SynthConfig


class TestConfig:
    def test_parse(self):
        cfg = parse_config("# comment\nepochs = 5\nlr=0.1  # inline\n\nname = 'x'\n"
                           "flag = true\nnothing = none\nlist = [1, 2]\n")
        assert cfg == {"epochs": 5, "lr": 0.1, "name": "x", "flag": True, "nothing": None,
                       "list": [1, 2]}

    @pytest.mark.parametrize("text", ["just words", " = 3"])
    def test_parse_errors(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_precedence(self, monkeypatch):
        monkeypatch.setenv("TANSZOO_SEED", "7")
        assert build(TrainConfig, {}, {}).rng_seed == 7
        assert build(TrainConfig, {"rng_seed": 8}, {}).rng_seed == 8
        assert build(TrainConfig, {"rng_seed": 8}, {"rng_seed": 9}).rng_seed == 9
        assert build(TrainConfig, {"rng_seed": 8}, {"rng_seed": None}).rng_seed == 8
        monkeypatch.delenv("TANSZOO_SEED")
        assert build(TrainConfig, {}, {}).rng_seed == 0

    def test_unknown_keys_ignored_and_ints_coerced(self):
        cfg = build(TrainConfig, {"lr": 1, "not_a_field": 3}, {"command": "train"})
        assert cfg.lr == 1.0 and isinstance(cfg.lr, float)

    def test_bad_env_seed(self, monkeypatch):
        monkeypatch.setenv("TANSZOO_SEED", "abc")
        with pytest.raises(ConfigError):
            default_seed()

    def test_invalid_value_surfaces(self):
        with pytest.raises(ValueError):
            build(TrainConfig, {"margin": -1.0}, {})
        with pytest.raises(ValueError):
            build(SynthConfig, {"n_datasets": 0}, {})

    def test_load_config_none(self):
        assert load_config(None) == {}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("TANSZOO_SEED", raising=False)
    return tmp_path


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def trained(workdir, capsys):
    assert run(capsys, "gen", "--out", "zoo.json", "--n-datasets", "3",
               "--networks-per-dataset", "3", "--seed", "2", "--jobs", "1")[0] == 0
    assert run(capsys, "train", "--zoo", "zoo.json", "--out", "model.idx", "--epochs", "3")[0] == 0
    return workdir


class TestCommands:
    def test_gen_writes_manifest(self, workdir, capsys):
        code, out, _ = run(capsys, "gen", "--out", "zoo.json", "--n-datasets", "2",
                           "--networks-per-dataset", "2", "--jobs", "1")
        assert code == 0
        assert json.loads(out) == {"datasets": 2, "networks": 4, "entries": 4}
        man = json.loads((workdir / "zoo.json.manifest.json").read_text())
        assert man["command"] == "gen" and man["seeds"] == {"rng_seed": 0}
        assert {o["path"] for o in man["outputs"]} == {"zoo.json", "zoo.json.bin"}
        assert all(len(o["sha256"]) == 64 for o in man["outputs"])
        assert man["config"]["synth"]["n_datasets"] == 2

    def test_gen_deterministic(self, workdir, capsys):
        for d in ("a", "b"):
            (workdir / d).mkdir()
            run(capsys, "gen", "--out", f"{d}/zoo.json", "--n-datasets", "2",
                "--networks-per-dataset", "2", "--seed", "4")
        assert (workdir / "a/zoo.json.bin").read_bytes() == (workdir / "b/zoo.json.bin").read_bytes()

    def test_config_file_and_env_seed(self, workdir, capsys, monkeypatch):
        (workdir / "c.cfg").write_text("n_datasets = 2\nnetworks_per_dataset = 2\nrng_seed = 5\n")
        monkeypatch.setenv("TANSZOO_SEED", "11")
        run(capsys, "gen", "--out", "z.json", "--config", "c.cfg", "--manifest", "m.json")
        assert json.loads((workdir / "m.json").read_text())["seeds"]["rng_seed"] == 5
        run(capsys, "gen", "--out", "z.json", "--config", "c.cfg", "--seed", "6", "--manifest", "m.json")
        assert json.loads((workdir / "m.json").read_text())["seeds"]["rng_seed"] == 6
        (workdir / "c.cfg").write_text("n_datasets = 2\nnetworks_per_dataset = 2\n")
        run(capsys, "gen", "--out", "z.json", "--config", "c.cfg", "--manifest", "m.json")
        assert json.loads((workdir / "m.json").read_text())["seeds"]["rng_seed"] == 11

    def test_train_retrieve_predict_eval(self, trained, capsys):
        assert (trained / "model.idx.trace.csv").read_text().startswith("epoch,L_m,L_q,L_s,total")
        from tanszoo.zoo import load_zoo
        zoo = load_zoo(trained / "zoo.json")
        d = sorted(zoo.datasets)[0]
        probe = zoo.datasets[d].probe_set
        (trained / "p.jsonl").write_text(
            "\n".join(json.dumps(r) for r in probe.tolist()[:-1])
            + "\n" + json.dumps({"features": probe[-1].tolist()}) + "\n")
        code, out, _ = run(capsys, "retrieve", "--index", "model.idx", "--probe", "p.jsonl",
                           "--k", "3", "--rerank")
        assert code == 0
        res = json.loads(out)
        assert len(res["hits"]) == 3 and not res["empty"]
        assert all(h["predicted_accuracy"] is not None for h in res["hits"])
        assert (trained / "retrieve.manifest.json").exists()

        code, out, _ = run(capsys, "retrieve", "--index", "model.idx", "--probe", "p.jsonl",
                           "--max-params", "1")
        assert code == 0 and json.loads(out) == {"empty": True, "hits": []}

        net = sorted(zoo.networks)[0]
        code, out, _ = run(capsys, "predict", "--index", "model.idx", "--zoo", "zoo.json",
                           "--dataset", d, "--model", net)
        assert code == 0 and 0 < json.loads(out)["predicted_accuracy"] < 1

        code, out, _ = run(capsys, "eval", "--index", "model.idx", "--zoo", "zoo.json")
        assert code == 0 and out.splitlines()[0].split() == ["metric", "value"]
        assert any(line.startswith("R@1") for line in out.splitlines())
        code, out, _ = run(capsys, "eval", "--index", "model.idx", "--zoo", "zoo.json", "--json")
        assert set(json.loads(out)) >= {"R@1", "R@5", "R@10", "mean_rank", "median_rank"}

    def test_index_matches_train_output(self, trained, capsys):
        assert run(capsys, "index", "--params", "model.idx", "--zoo", "zoo.json",
                   "--out", "again.idx")[0] == 0
        assert (trained / "again.idx").read_bytes() == (trained / "model.idx").read_bytes()

    def test_construct_zoo(self, trained, capsys):
        code, out, _ = run(capsys, "construct-zoo", "--universe", "zoo.json", "--budget", "5",
                           "--out", "small.json", "--strategy", "random", "--n-init", "3")
        assert code == 0 and json.loads(out)["selected"] == 5
        rows = (trained / "small.json.trace.csv").read_text().splitlines()
        assert rows[0] == "step,total_hypervolume" and len(rows) == 4

    def test_predict_unknown_ids(self, trained, capsys):
        code, _, err = run(capsys, "predict", "--index", "model.idx", "--zoo", "zoo.json",
                           "--dataset", "nope", "--model", "x")
        assert code == 3 and json.loads(err)["error"] == "validation"


class TestExitCodes:
    def test_usage(self, workdir, capsys):
        assert run(capsys, "gen", "--bogus")[0] == 1
        assert run(capsys)[0] == 1
        assert run(capsys, "train", "--zoo", "z.json")[0] == 1

    def test_missing_file(self, workdir, capsys):
        code, _, err = run(capsys, "train", "--zoo", "missing.json", "--out", "m.idx")
        assert code == 2 and json.loads(err)["error"] == "io"

    def test_bad_file(self, workdir, capsys):
        (workdir / "bad.json").write_text("{not json")
        assert run(capsys, "train", "--zoo", "bad.json", "--out", "m.idx")[0] == 3
        (workdir / "bad.idx").write_bytes(b"NOPE")
        (workdir / "p.jsonl").write_text("[1, 2]\n")
        assert run(capsys, "retrieve", "--index", "bad.idx", "--probe", "p.jsonl")[0] == 3

    def test_bad_config(self, workdir, capsys):
        (workdir / "c.cfg").write_text("this is not a config\n")
        assert run(capsys, "gen", "--out", "z.json", "--config", "c.cfg")[0] == 3
        (workdir / "c.cfg").write_text("n_datasets = -1\n")
        assert run(capsys, "gen", "--out", "z.json", "--config", "c.cfg")[0] == 3

    def test_divergence(self, trained, capsys):
        (trained / "w.cfg").write_text("surrogate_weight = 1e9\n")
        code, _, err = run(capsys, "train", "--zoo", "zoo.json", "--out", "d.idx",
                           "--lr", "1e12", "--epochs", "20", "--config", "w.cfg")
        assert code == 4 and json.loads(err)["error"] == "divergence"

    def test_probe_reader(self, tmp_path):
        p = tmp_path / "p.jsonl"
        p.write_text("[1, 2]\n\n{\"features\": [3, 4]}\n")
        np.testing.assert_array_equal(read_probe(p), [[1, 2], [3, 4]])
        p.write_text("")
        with pytest.raises(ValueError):
            read_probe(p)
        p.write_text("[1, 2]\n[3]\n")
        with pytest.raises(ValueError):
            read_probe(p)


def test_eval_on_standard_zoo(workdir, capsys):
    assert run(capsys, "gen", "--out", "zoo.json", "--seed", "0")[0] == 0
    assert run(capsys, "train", "--zoo", "zoo.json", "--out", "model.idx")[0] == 0
    code, out, _ = run(capsys, "eval", "--index", "model.idx", "--zoo", "zoo.json")
    r1 = float(next(l.split()[1] for l in out.splitlines() if l.startswith("R@1 ")))
    assert code == 0 and r1 >= 0.8
