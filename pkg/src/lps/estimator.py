"""scikit-learn style wrapper around a single training run."""
from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .agents import init_train_state, policy_chunks, train_step
from .config import ExperimentConfig
from .envs import OfflineDataset, evaluate_policy, make_env, sample_chunk_batch


class LatentPolicySteering(BaseEstimator):
    """Offline RL agent with the ``fit`` / ``predict`` / ``score`` protocol.

    ``fit`` takes either an :class:`OfflineDataset` or plain arrays: ``X``
    observations, ``y`` actions, plus per-step ``rewards`` and the
    ``episode_lengths`` that split them into episodes. ``predict`` returns
    one flattened action chunk per observation row.
    """

    def __init__(self, agent="LPS", env="pointmass_nav", train_steps=5000, batch_size=256,
                 horizon=None, alpha=1.0, base_loss_scale=1.0, geometry=None, preset="toy",
                 eval_episodes=50, random_state=0):
        self.agent = agent
        self.env = env
        self.train_steps = train_steps
        self.batch_size = batch_size
        self.horizon = horizon
        self.alpha = alpha
        self.base_loss_scale = base_loss_scale
        self.geometry = geometry
        self.preset = preset
        self.eval_episodes = eval_episodes
        self.random_state = random_state

    def _config(self):
        seed = self.random_state if self.random_state is not None else 0
        if not isinstance(seed, (int, np.integer)):
            raise ValueError("random_state must be an int or None")
        return replace(
            ExperimentConfig(), agent=self.agent, env=self.env, train_steps=int(self.train_steps),
            eval_interval=int(self.train_steps), batch_size=int(self.batch_size), horizon=self.horizon,
            alpha=float(self.alpha), base_loss_scale=float(self.base_loss_scale), geometry=self.geometry,
            preset=self.preset, eval_episodes=int(self.eval_episodes), seed=int(seed),
        ).resolved()

    @staticmethod
    def _dataset(X, y, rewards, episode_lengths, terminals):
        if isinstance(X, OfflineDataset):
            return X
        if y is None or rewards is None:
            raise ValueError("array input needs actions (y) and rewards")
        X, y = check_X_y(X, y, multi_output=True, dtype=np.float64)
        y = y.reshape(len(y), -1)
        rewards = check_array(np.asarray(rewards).reshape(-1, 1), dtype=np.float64).ravel()
        if len(rewards) != len(X):
            raise ValueError("need one reward per observation")
        lengths = np.asarray([len(X)] if episode_lengths is None else episode_lengths)
        if terminals is None:
            terminals = np.ones(len(lengths), dtype=bool)
        return OfflineDataset(X, y, rewards, lengths, terminals)

    def fit(self, X, y=None, rewards=None, episode_lengths=None, terminals=None):
        cfg = self._config()
        ds = self._dataset(X, y, rewards, episode_lengths, terminals)
        ts = init_train_state(cfg, ds.obs_dim, ds.action_dim)
        for _ in range(cfg.train_steps):
            train_step(ts, sample_chunk_batch(ds, cfg.horizon, cfg.gamma, cfg.batch_size, ts.rng))
        self.state_ = ts
        self.config_ = cfg
        self.n_features_in_ = ds.obs_dim
        self.chunk_dim_ = ts.chunk_dim
        return self

    def predict(self, X):
        check_is_fitted(self, "state_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return policy_chunks(self.state_, X, np.random.default_rng(self.config_.seed))

    def score(self, X=None, y=None):
        """Mean evaluation return in the configured environment (inputs are ignored)."""
        check_is_fitted(self, "state_")
        ts = self.state_
        ret, _, _ = evaluate_policy(lambda o, r: policy_chunks(ts, o, r), make_env(self.env),
                                    self.eval_episodes, np.random.default_rng(self.config_.seed))
        return ret
