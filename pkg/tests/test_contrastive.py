import dataclasses
import math

import numpy as np
import pytest

from tanszoo import diffmath as dm
from tanszoo.contrastive import (
    TaskBatch,
    TrainConfig,
    TrainingDivergence,
    batch_contrastive,
    batch_objective,
    init_model,
    loss_m,
    loss_m_literal,
    loss_q,
    meta_train,
)
from tanszoo.synth import SynthConfig, build_full_zoo

TINY = TrainConfig(embedding_dim=8, functional_dim=8, noise_batch=4, predictor_hidden=16)
F = 6


def with_cos(c: float, axis: int, dim: int = 6) -> np.ndarray:
    v = np.zeros(dim)
    v[0], v[axis] = c, math.sqrt(1 - c * c)
    return v


def random_batch(rng, b=4, cross=False):
    return TaskBatch([rng.normal(size=(int(rng.integers(2, 6)), F)) for _ in range(b)],
                     rng.normal(size=(b, 45 + TINY.functional_dim)),
                     rng.uniform(0.1, 0.9, b), [f"d{i}" for i in range(b)],
                     cross_accuracies=rng.uniform(0, 1, (b, b)) if cross else None)


class TestLossExamples:
    q = np.eye(6)[0]

    def test_separated_is_zero(self):
        l = loss_m(self.q, with_cos(0.9, 1), [with_cos(0.2, 2), with_cos(-0.1, 3)], 0.5, "sum")
        assert l.item() == pytest.approx(0.0, abs=1e-12)

    def test_violation(self):
        l = loss_m(self.q, with_cos(0.1, 1), [with_cos(0.3, 2)], 0.5, "sum")
        assert l.item() == pytest.approx(0.7, abs=1e-12)

    def test_loss_q_mirrors(self):
        l = loss_q(self.q, with_cos(0.1, 1), [with_cos(0.3, 2)], 0.5, "sum")
        assert l.item() == pytest.approx(0.7, abs=1e-12)
        l = loss_q(self.q, with_cos(0.9, 1), [with_cos(0.2, 2), with_cos(-0.1, 3)], 0.5, "sum")
        assert l.item() == pytest.approx(0.0, abs=1e-12)

    def test_mean_aggregation(self):
        l = loss_m(self.q, with_cos(0.1, 1), [with_cos(0.3, 2), with_cos(0.5, 3)], 0.5, "mean")
        assert l.item() == pytest.approx(0.5 - 0.1 + 0.4, abs=1e-12)

    def test_matches_literal_form(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            q, mp = rng.normal(size=6), rng.normal(size=6)
            negs = [rng.normal(size=6) for _ in range(int(rng.integers(1, 5)))]
            cos = lambda a, b: a @ b / np.linalg.norm(a) / np.linalg.norm(b)
            lit = loss_m_literal(cos(q, mp), [cos(q, m) for m in negs], 0.5)
            assert loss_m(q, mp, negs, 0.5, "sum").item() == pytest.approx(lit, abs=1e-9)

    def test_non_negative_and_monotone(self):
        rng = np.random.default_rng(1)
        q = np.eye(6)[0]
        for _ in range(100):
            c_pos, c_neg = rng.uniform(-1, 1, 2)
            base = loss_m(q, with_cos(c_pos, 1), [with_cos(c_neg, 2)]).item()
            assert base >= 0
            up = min(1.0, c_pos + 0.1)
            assert loss_m(q, with_cos(up, 1), [with_cos(c_neg, 2)]).item() <= base + 1e-12
            up = min(1.0, c_neg + 0.1)
            assert loss_m(q, with_cos(c_pos, 1), [with_cos(up, 2)]).item() >= base - 1e-12

    def test_empty_negatives(self):
        with pytest.raises(ValueError):
            loss_m(self.q, self.q, [])

    def test_bad_aggregation(self):
        with pytest.raises(ValueError):
            loss_m(self.q, self.q, [self.q], agg="max")


class TestBatchLosses:
    def test_matches_per_pair_losses(self):
        rng = np.random.default_rng(2)
        Q = rng.normal(size=(5, 6))
        M = rng.normal(size=(5, 6))
        Q /= np.linalg.norm(Q, axis=1, keepdims=True)
        M /= np.linalg.norm(M, axis=1, keepdims=True)
        for agg in ("sum", "mean"):
            lm, lq = batch_contrastive(dm.Tensor(Q), dm.Tensor(M), 0.5, agg)
            for i in range(5):
                others = [j for j in range(5) if j != i]
                assert lm.data[i] == pytest.approx(loss_m(Q[i], M[i], M[others], 0.5, agg).item())
                assert lq.data[i] == pytest.approx(loss_q(M[i], Q[i], Q[others], 0.5, agg).item())

    def test_perfect_separation_zero(self):
        E = np.eye(4)
        lm, lq = batch_contrastive(dm.Tensor(E), dm.Tensor(E), 0.5, "sum")
        assert np.all(lm.data == 0) and np.all(lq.data == 0)

    def test_single_task_rejected(self):
        with pytest.raises(ValueError):
            batch_contrastive(dm.Tensor(np.eye(1)), dm.Tensor(np.eye(1)), 0.5)

    def test_lambda_zero_is_contrastive_only(self):
        rng = np.random.default_rng(3)
        cfg = dataclasses.replace(TINY, surrogate_weight=0.0)
        model = init_model(cfg, F)
        loss, parts = batch_objective(random_batch(rng), model, cfg)
        assert loss.item() == pytest.approx(parts["L_m"] + parts["L_q"], abs=1e-12)

    def test_duplicate_datasets_rejected(self):
        with pytest.raises(ValueError):
            TaskBatch([np.zeros((1, F))] * 2, np.zeros((2, 3)), np.zeros(2), ["d", "d"])

    def test_config_validation(self):
        for bad in ({"margin": 0.0}, {"surrogate_weight": -1.0}, {"batch_size": 1},
                    {"neg_aggregation": "max"}, {"surrogate_pairs": "all"}):
            with pytest.raises(ValueError):
                TrainConfig(**bad)


class TestGradients:
    @pytest.mark.parametrize("agg", ["sum", "mean"])
    @pytest.mark.parametrize("pairs", ["matched", "cross"])
    def test_full_objective(self, agg, pairs):
        rng = np.random.default_rng(4)
        cfg = dataclasses.replace(TINY, neg_aggregation=agg, surrogate_pairs=pairs)
        model = init_model(cfg, F)
        batch = random_batch(rng, cross=pairs == "cross")
        err = dm.check_gradients(lambda: batch_objective(batch, model, cfg)[0],
                                 model.parameters(), coords_per_param=6, rng=rng)
        assert err < 1e-4

    def test_loss_m_gradient(self):
        rng = np.random.default_rng(5)
        q = dm.Parameter(rng.normal(size=6))
        mp = dm.Parameter(rng.normal(size=6))
        negs = [dm.Parameter(rng.normal(size=6)) for _ in range(3)]
        err = dm.check_gradients(lambda: loss_m(q, mp, negs, 2.0), [q, mp, *negs])
        assert err < 1e-4


@pytest.fixture(scope="module")
def six_entry_zoo():
    return build_full_zoo(SynthConfig(n_datasets=3, networks_per_dataset=2, rng_seed=5))


class TestMetaTrain:
    def test_smoke(self, six_entry_zoo):
        res = meta_train(six_entry_zoo, dataclasses.replace(TINY, epochs=50))
        assert len(res.trace) == 50
        assert all(math.isfinite(r["total"]) for r in res.trace)
        assert res.trace[-1]["total"] < res.trace[0]["total"]

    def test_deterministic(self, six_entry_zoo):
        cfg = dataclasses.replace(TINY, epochs=5)
        a, b = meta_train(six_entry_zoo, cfg), meta_train(six_entry_zoo, cfg)
        assert a.trace == b.trace
        for p, r in zip(a.model.parameters(), b.model.parameters()):
            assert p.data.tobytes() == r.data.tobytes()

    def test_divergence_detected(self, six_entry_zoo):
        cfg = dataclasses.replace(TINY, epochs=20, lr=1e12, surrogate_weight=1e9)
        with pytest.raises(TrainingDivergence):
            meta_train(six_entry_zoo, cfg)

    def test_trained_beats_untrained(self, small_trained, small_zoo):
        zoo, result, _ = small_trained
        untrained = meta_train(zoo, dataclasses.replace(TrainConfig(), epochs=0)).metrics
        assert result.metrics["R@1"] > untrained["R@1"]

    def test_holdout_split(self, small_zoo):
        cfg = dataclasses.replace(TINY, epochs=1, holdout_fraction=0.25)
        res = meta_train(small_zoo, cfg)
        keys = {e.key for e in res.train_entries}
        assert keys.isdisjoint(e.key for e in res.heldout_entries)
        assert len(keys) + len(res.heldout_entries) == len(small_zoo.entries)
        assert {e.dataset_id for e in res.train_entries} == set(small_zoo.datasets)

    def test_needs_two_datasets(self):
        zoo = build_full_zoo(SynthConfig(n_datasets=1, networks_per_dataset=2))
        with pytest.raises(ValueError):
            meta_train(zoo, TINY)
