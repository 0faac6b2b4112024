import numpy as np
import pytest

from tanszoo import diffmath as dm
from tanszoo.predictor import (
    init_predictor,
    predict,
    predict_many,
    predict_tensor,
    rerank_topk,
    surrogate_loss,
    zero_predictor,
)
from tanszoo.zoo import Hit

D = 8


@pytest.fixture
def params():
    return init_predictor(D, np.random.default_rng(0), hidden=32)


def vecs(seed, n=1):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, D)), rng.normal(size=(n, D))


def test_zero_params_give_half():
    q, m = vecs(1)
    assert predict(q, m, zero_predictor(D)) == 0.5


def test_deterministic_is_stable(params):
    q, m = vecs(2)
    assert predict(q, m, params) == predict(q, m, params)


def test_output_in_unit_interval(params):
    rng = np.random.default_rng(3)
    for scale in (1.0, 100.0):
        p = predict_many(scale * rng.normal(size=(200, D)), scale * rng.normal(size=(200, D)), params)
        assert np.all((p >= 0) & (p <= 1))


def test_dropout_seeded_and_unbiased_mean(params):
    q, m = vecs(4)
    assert predict(q, m, params, "dropout", seed=7) == predict(q, m, params, "dropout", seed=7)
    many = predict_many(np.repeat(q, 10000, 0), np.repeat(m, 10000, 0), params,
                        np.random.default_rng(8))
    mean10 = np.mean([predict(q, m, params, "dropout", seed=s) for s in range(10)])
    assert abs(mean10 - many.mean()) < 3 * many.std() / np.sqrt(10)


def test_bad_mode(params):
    q, m = vecs(5)
    with pytest.raises(ValueError):
        predict(q, m, params, "bayes")


def test_dimension_mismatch(params):
    with pytest.raises(ValueError):
        predict_many(np.zeros((1, D)), np.zeros((1, D + 1)), params)


def test_surrogate_loss_example():
    assert surrogate_loss(dm.Tensor(np.array(0.2)), 0.7).item() == pytest.approx(0.25)


def test_surrogate_gradient(params):
    q, m = vecs(6, 3)
    acc = np.array([0.2, 0.5, 0.9])
    err = dm.check_gradients(
        lambda: dm.mean(surrogate_loss(predict_tensor(dm.Tensor(q), dm.Tensor(m), params), acc)),
        params.parameters(), coords_per_param=10)
    assert err < 1e-6


def test_tensor_and_numpy_paths_agree(params):
    q, m = vecs(9, 5)
    np.testing.assert_allclose(predict_tensor(dm.Tensor(q), dm.Tensor(m), params).data,
                               predict_many(q, m, params), atol=1e-12)


def hits(n):
    return [Hit(f"m{i}", 1.0 - 0.1 * i) for i in range(n)]


def test_rerank_k1_unchanged(params):
    emb = {f"m{i}": np.random.default_rng(i).normal(size=D) for i in range(5)}
    out = rerank_topk(hits(5), np.ones(D), params, K=1, embeddings=emb)
    assert [h.model_id for h in out] == [f"m{i}" for i in range(5)]


def test_rerank_constant_predictor_unchanged():
    emb = {f"m{i}": np.random.default_rng(i).normal(size=D) for i in range(5)}
    out = rerank_topk(hits(5), np.ones(D), zero_predictor(D), K=5, embeddings=emb)
    assert [h.model_id for h in out] == [f"m{i}" for i in range(5)]


def test_rerank_oracle_sorts_by_accuracy():
    acc = {"m0": 0.3, "m1": 0.9, "m2": 0.5, "m3": 0.99}
    out = rerank_topk(hits(4), np.ones(D), None, K=3, predict_fn=acc.get)
    assert [h.model_id for h in out] == ["m1", "m2", "m0", "m3"]
    assert out[0].predicted_accuracy == 0.9


def test_rerank_bad_k(params):
    with pytest.raises(ValueError):
        rerank_topk(hits(3), np.ones(D), params, K=0, embeddings={})
