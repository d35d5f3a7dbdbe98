import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from lps.envs import generate_demos, make_env
from lps.estimator import LatentPolicySteering


def small(**kw):
    return LatentPolicySteering(train_steps=5, batch_size=16, eval_episodes=3, **kw)


def test_params_and_clone():
    est = small(agent="BC_MF")
    assert est.get_params()["agent"] == "BC_MF"
    c = clone(est).set_params(alpha=3.0)
    assert c.alpha == 3.0 and est.alpha == 1.0


def test_fit_predict_dataset():
    ds = generate_demos(make_env("pointmass_nav"), 5, rng=0)
    est = small().fit(ds)
    out = est.predict(ds.observations[:4])
    assert out.shape == (4, 10) and np.all(np.abs(out) <= 1)
    assert np.array_equal(out, est.predict(ds.observations[:4]))
    assert -100 <= est.score() <= 0


def test_fit_arrays():
    rng = np.random.default_rng(0)
    X = np.ones((30, 1))
    y = rng.uniform(-1, 1, (30, 2))
    est = small(agent="BC_FM", env="corner_bandit").fit(X, y, rewards=np.zeros(30), episode_lengths=np.ones(30, int))
    assert est.predict(X[:3]).shape == (3, 2)
    with pytest.raises(ValueError):
        est.predict(np.ones((2, 3)))
    with pytest.raises(ValueError):
        small().fit(X, y)


def test_not_fitted():
    with pytest.raises(NotFittedError):
        small().predict(np.ones((1, 2)))


def test_bad_params():
    with pytest.raises(ValueError):
        small(agent="PPO").fit(generate_demos(make_env("pointmass_nav"), 2, rng=0))
    with pytest.raises(ValueError):
        small(random_state=np.random.default_rng(0)).fit(generate_demos(make_env("pointmass_nav"), 2, rng=0))
