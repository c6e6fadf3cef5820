import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from qwrlab import AWR, QWR
from qwrlab.envs import BitFlipEnv, PointEnv
from qwrlab.experiment import write_mixed_point_dataset
from qwrlab.training import train

TINY = dict(hidden=(8,), batch_size=16, n_actor_steps=3, n_critic_steps=3,
            interactions_per_iteration=50, n_iterations=2, eval_episodes=2)


class TestParams:
    def test_get_set_params(self):
        est = QWR(beta=2.0)
        assert est.get_params()["beta"] == 2.0
        est.set_params(k=8)
        assert est.k == 8

    def test_clone_keeps_params(self):
        est = AWR(**TINY, random_state=4)
        twin = clone(est)
        assert twin.get_params() == est.get_params()
        assert not hasattr(twin, "actor_")

    def test_bad_param_raises_at_fit(self):
        with pytest.raises(ValueError):
            QWR(**{**TINY, "batch_size": 0}).fit(BitFlipEnv(5))


class TestFitPredict:
    def test_discrete(self):
        est = QWR(**TINY).fit({"env": "bitflip", "n": 6})
        obs = np.random.default_rng(0).integers(2, size=(4, 7)).astype(float)
        actions = est.predict(obs)
        assert actions.shape == (4,) and actions.dtype.kind == "i"
        proba = est.predict_proba(obs)
        np.testing.assert_allclose(proba.sum(axis=1), 1.0, rtol=0, atol=1e-12)
        np.testing.assert_array_equal(np.argmax(proba, axis=1), actions)
        assert len(est.metrics_) == 2 and est.n_features_in_ == 7
        assert -5 <= est.score(BitFlipEnv(6), episodes=3) <= 5

    def test_continuous(self):
        est = AWR(**TINY).fit(PointEnv())
        pred = est.predict(np.zeros((3, 2)))
        assert pred.shape == (3, 1)
        with pytest.raises(AttributeError):
            est.predict_proba(np.zeros((3, 2)))

    def test_matches_trainer(self):
        est = QWR(**TINY, random_state=3).fit(PointEnv())
        direct = train(est.config_, env=PointEnv(), algorithm="qwr")
        np.testing.assert_array_equal(est.actor_.net.params, direct.actor.net.params)

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            QWR().predict(np.zeros((1, 2)))

    def test_wrong_width(self):
        est = AWR(**TINY).fit(PointEnv())
        with pytest.raises(ValueError):
            est.predict(np.zeros((2, 5)))

    def test_offline_from_path(self, tmp_path):
        path = tmp_path / "d.jsonl"
        write_mixed_point_dataset(path, n_trajectories=4)
        est = QWR(**TINY).fit(str(path), eval_env="point")
        assert est.config_.offline
        assert len(est.metrics_) == 2

    def test_unusable_input(self):
        with pytest.raises(TypeError):
            QWR(**TINY).fit(42)
