"""scikit-learn style front end."""

import dataclasses

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from hgch import HGCHRecommender
from hgch.graph import split
from hgch.model import ModelConfig, score_values
from hgch.synthetic import power_law_hcg
from hgch.training import TrainConfig


@pytest.fixture(scope="module")
def fitted():
    data = split(power_law_hcg(n_users=60, n_items=90, n_clusters=4, min_degree=4, max_degree=20, seed=1), seed=0)
    est = HGCHRecommender(dim=8, lr=0.01, max_epochs=3, batch_size=128).fit(data)
    return est, data


class TestParams:
    def test_defaults_match_configs(self):
        params = HGCHRecommender().get_params()
        for cls in (ModelConfig, TrainConfig):
            for f in dataclasses.fields(cls):
                if f.name in params:
                    assert params[f.name] == f.default, f.name

    def test_clone_and_set_params(self):
        est = HGCHRecommender(dim=16, fusion="gate")
        twin = clone(est).set_params(dim=4)
        assert twin.get_params()["dim"] == 4 and twin.fusion == "gate"
        assert est.dim == 16

    def test_invalid_params_raise_on_fit(self, fitted):
        _, data = fitted
        with pytest.raises(ValueError):
            HGCHRecommender(fusion="max").fit(data)
        with pytest.raises(TypeError):
            HGCHRecommender().fit(np.zeros((3, 2)))

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            HGCHRecommender().transform()


class TestFitted:
    def test_attributes(self, fitted):
        est, data = fitted
        assert est.transform().shape == (data.hcg.n_nodes, 8)
        assert est.n_params_ == data.hcg.n_nodes * 8 + len(est.context_.gate_pairs) * 64
        assert 1 <= est.best_epoch_ <= 3 and len(est.history_) == 3

    def test_predict_matches_scores(self, fitted):
        est, data = fitted
        pairs = data.test[:5]
        emb = est.transform()
        expected = score_values(emb[pairs[:, 0]], emb[data.hcg.offset("item") + pairs[:, 1]])
        np.testing.assert_array_equal(est.predict(pairs), expected)
        with pytest.raises(ValueError):
            est.predict([[0, data.n_items]])

    def test_recommend_excludes_seen(self, fitted):
        est, data = fitted
        top = est.recommend(np.arange(data.n_users), k=10)
        seen = data.positives("seen")
        for u in range(data.n_users):
            assert not np.isin(top[u], seen[u]).any()
        # best-scoring unseen item comes first
        u = 0
        cands = np.setdiff1d(np.arange(data.n_items), seen[u])
        scores = est.predict(np.stack([np.zeros_like(cands), cands], axis=1))
        assert top[u, 0] == cands[np.argmax(scores)]

    def test_score_is_test_ndcg(self, fitted):
        est, _ = fitted
        rep = est.evaluate("test", (10,))
        assert est.score() == rep.get("ndcg", 10)
        assert 0.0 <= est.score() <= 1.0
