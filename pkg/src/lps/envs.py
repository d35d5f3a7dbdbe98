"""Toy environments, scripted demonstrations, offline datasets and evaluation.

Two tasks are provided:

``pointmass_nav``
    A 2-D point driven by velocity commands toward a goal disc, with a
    semi-sparse reward (-1 per step, 0 on the step that reaches the goal).
``corner_bandit``
    A one-step task whose reward peaks at the top-right corner of the
    action square. Its demonstrations come from Gaussian clusters that stay
    away from the peak.
``two_mode``
    A one-step, 1-D task whose demonstrations sit on two points. It exists
    to check how faithfully a sampler reproduces a multimodal dataset.
"""
import struct
from dataclasses import dataclass, field

import numpy as np

from .critic import chunk_returns


ENV_KINDS = ("pointmass_nav", "corner_bandit", "two_mode")
SINGLE_STEP_KINDS = ("corner_bandit", "two_mode")
TWO_MODES = (-0.5, 0.5)


@dataclass(frozen=True)
class EnvSpec:
    kind: str
    obs_dim: int
    action_dim: int
    horizon: int
    goal: tuple = (0.0, 0.0)
    goal_radius: float = 0.1
    dt: float = 0.1
    bound: float = 1.0
    start: tuple = (0.0, 0.0)
    start_noise: float = 0.0
    reward_width: float = 0.5
    reward_mode: str = "semi_sparse"

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.kind not in ENV_KINDS:
            raise ValueError(f"unknown environment kind {self.kind!r}")


ENV_PRESETS = {
    "pointmass_nav": EnvSpec(
        kind="pointmass_nav", obs_dim=2, action_dim=2, horizon=100,
        goal=(0.7, 0.7), goal_radius=0.1, dt=0.1, start=(-0.7, -0.7), start_noise=0.1,
    ),
    "corner_bandit": EnvSpec(kind="corner_bandit", obs_dim=1, action_dim=2, horizon=1),
    "two_mode": EnvSpec(kind="two_mode", obs_dim=1, action_dim=1, horizon=1, goal_radius=0.1),
}


def make_env(name):
    try:
        return ENV_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENV_PRESETS)}") from None


# Suboptimal teleoperation-style demonstrations. Per-episode speed varies,
# actions are jittered, the operator pauses and takes a detour.
ARTIFACT_PROFILES = {
    "teleop": dict(noise=0.1, pause_prob=0.05, pause_len=(1, 5), detours=1,
                   detour_offset=(0.3, 0.6), speed=(0.4, 0.8)),
    "clean": dict(noise=0.0, pause_prob=0.0, pause_len=(1, 1), detours=0,
                  detour_offset=(0.0, 0.0), speed=(0.8, 0.8)),
}

# Action clusters for corner_bandit demonstrations.
CORNER_PRESETS = {
    "default": dict(
        centers=((-0.6, -0.6), (-0.6, 0.3), (0.3, -0.6), (0.15, 0.15)),
        weights=(0.3, 0.25, 0.25, 0.2),
        std=0.1,
    ),
}


# --- dynamics --------------------------------------------------------------

def pointmass_step(state, action, spec, t=0):
    """Advance one step. ``t`` is the index of this step within the episode.

    Returns ``(next_state, reward, done)``; ``reward == 0`` marks success.
    """
    state = np.asarray(state, dtype=np.float64)
    action = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    nxt = np.clip(state + spec.dt * action, -spec.bound, spec.bound)
    success = np.linalg.norm(nxt - np.asarray(spec.goal)) <= spec.goal_radius
    reward = 0.0 if success else -1.0
    return nxt, reward, bool(success or t + 1 >= spec.horizon)


def corner_bandit_eval(action, spec=None):
    """``exp(-||a - (1, 1)||^2 / width)`` for actions in the unit square."""
    width = 0.5 if spec is None else spec.reward_width
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    return np.exp(-np.sum((a - 1.0) ** 2, axis=-1) / width)


def two_mode_eval(action, spec=None):
    """1 when the action lies within ``goal_radius`` of either mode, else 0."""
    radius = 0.1 if spec is None else spec.goal_radius
    a = np.asarray(action, dtype=np.float64)[..., 0]
    near = np.min(np.abs(a[..., None] - np.asarray(TWO_MODES)), axis=-1) <= radius
    return near.astype(np.float64)


def mode_mass(actions, modes=TWO_MODES, radius=0.1):
    """Fraction of 1-D samples within ``radius`` of each mode."""
    a = np.asarray(actions, dtype=np.float64).reshape(-1)
    return [float(np.mean(np.abs(a - m) <= radius)) for m in modes]


def _single_step_reward(spec, actions):
    if spec.kind == "corner_bandit":
        return corner_bandit_eval(actions, spec)
    return two_mode_eval(actions, spec)


# --- datasets --------------------------------------------------------------

@dataclass
class ChunkBatch:
    states: np.ndarray
    chunks: np.ndarray
    returns: np.ndarray
    next_states: np.ndarray
    mask: np.ndarray

    def __len__(self):
        return self.states.shape[0]


@dataclass
class OfflineDataset:
    """Concatenated episodes with their boundaries.

    ``terminals[i]`` is true when episode ``i`` ended in a true terminal
    state (goal reached, or the single step of a bandit) rather than a
    timeout; those chunk targets are not bootstrapped.
    """

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    episode_lengths: np.ndarray
    terminals: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float32)
        self.actions = np.asarray(self.actions, dtype=np.float32)
        self.rewards = np.asarray(self.rewards, dtype=np.float32)
        self.episode_lengths = np.asarray(self.episode_lengths, dtype=np.int64)
        self.terminals = np.asarray(self.terminals, dtype=bool)
        n = self.observations.shape[0]
        if self.actions.shape[0] != n or self.rewards.shape[0] != n:
            raise ValueError("observations, actions and rewards must share their first dimension")
        if self.episode_lengths.sum() != n:
            raise ValueError("episode lengths do not add up to the number of steps")
        if np.any(self.episode_lengths < 1):
            raise ValueError("episodes must have at least one step")
        if self.terminals.shape[0] != self.episode_lengths.shape[0]:
            raise ValueError("need one terminal flag per episode")
        if np.any(np.abs(self.actions) > 1.0):
            raise ValueError("dataset actions must lie in [-1, 1]")
        self._starts_cache = {}

    @property
    def obs_dim(self):
        return self.observations.shape[1]

    @property
    def action_dim(self):
        return self.actions.shape[1]

    @property
    def n_steps(self):
        return self.observations.shape[0]

    @property
    def n_episodes(self):
        return self.episode_lengths.shape[0]

    @property
    def episode_starts(self):
        return np.concatenate([[0], np.cumsum(self.episode_lengths)[:-1]])

    def valid_starts(self, h):
        """Start indices whose length-``h`` chunk stays inside one episode.

        Chunks of timed-out episodes also need the following observation,
        so they must end strictly before the episode does.
        """
        if h not in self._starts_cache:
            starts = []
            for begin, length, term in zip(self.episode_starts, self.episode_lengths, self.terminals):
                last = length - h if term else length - h - 1
                if last >= 0:
                    starts.append(begin + np.arange(last + 1))
            idx = np.concatenate(starts) if starts else np.zeros(0, dtype=np.int64)
            ends = np.repeat(self.episode_starts + self.episode_lengths, self.episode_lengths)
            term = np.repeat(self.terminals, self.episode_lengths)
            self._starts_cache[h] = (idx, ends[idx], term[idx])
        return self._starts_cache[h]

    def chunk_batch(self, idx, h, gamma, ends=None, term=None):
        """Assemble the chunk batch for explicit start indices."""
        idx = np.asarray(idx, dtype=np.int64)
        if ends is None:
            ends_all = np.repeat(self.episode_starts + self.episode_lengths, self.episode_lengths)
            term_all = np.repeat(self.terminals, self.episode_lengths)
            ends, term = ends_all[idx], term_all[idx]
        steps = idx[:, None] + np.arange(h)
        chunks = self.actions[steps].reshape(len(idx), h * self.action_dim)
        returns = chunk_returns(self.rewards[steps].astype(np.float64), gamma)
        finished = term & (idx + h >= ends)
        nxt = np.minimum(idx + h, ends - 1)
        return ChunkBatch(
            states=self.observations[idx],
            chunks=chunks,
            returns=returns,
            next_states=self.observations[nxt],
            mask=np.where(finished, 0.0, 1.0),
        )


def sample_chunk_batch(dataset, h, gamma, batch_size, rng):
    """Uniformly sample chunks lying entirely within single episodes."""
    if dataset.n_steps == 0:
        raise ValueError("empty dataset")
    starts, ends, term = dataset.valid_starts(h)
    if starts.size == 0:
        raise ValueError(f"no episode is long enough for chunks of length {h}")
    pick = rng.integers(0, starts.size, size=batch_size)
    return dataset.chunk_batch(starts[pick], h, gamma, ends[pick], term[pick])


DATASET_MAGIC = b"LPS1"
DATASET_VERSION = 1


def dataset_bytes(ds):
    """The exact bytes :func:`save_dataset` writes."""
    parts = [
        DATASET_MAGIC,
        struct.pack("<III", DATASET_VERSION, ds.obs_dim, ds.action_dim),
        struct.pack("<QQ", ds.n_steps, ds.n_episodes),
        ds.episode_lengths.astype("<u4").tobytes(),
        ds.observations.astype("<f4").tobytes(),
        ds.actions.astype("<f4").tobytes(),
        ds.rewards.astype("<f4").tobytes(),
        ds.terminals.astype("u1").tobytes(),
    ]
    return b"".join(parts)


def save_dataset(path, ds):
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(ds))


def load_dataset(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file (magic {raw[:4]!r})")
    version, obs_dim, act_dim = struct.unpack_from("<III", raw, 4)
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    n_steps, n_eps = struct.unpack_from("<QQ", raw, 16)
    off = 32
    sizes = [(n_eps, "<u4"), (n_steps * obs_dim, "<f4"), (n_steps * act_dim, "<f4"),
             (n_steps, "<f4"), (n_eps, "u1")]
    arrays = []
    for count, dt in sizes:
        nbytes = count * np.dtype(dt).itemsize
        if off + nbytes > len(raw):
            raise ValueError(f"{path}: truncated dataset file")
        arrays.append(np.frombuffer(raw, dtype=dt, count=count, offset=off))
        off += nbytes
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    lengths, obs, acts, rews, terms = arrays
    return OfflineDataset(obs.reshape(n_steps, obs_dim), acts.reshape(n_steps, act_dim), rews,
                          lengths, terms.astype(bool))


# --- demonstrations --------------------------------------------------------

def _pointmass_episode(spec, profile, rng):
    goal = np.asarray(spec.goal, dtype=np.float64)
    pos = np.asarray(spec.start, dtype=np.float64) + rng.uniform(-spec.start_noise, spec.start_noise, 2)
    waypoints = []
    for k in range(profile["detours"]):
        frac = (k + 1) / (profile["detours"] + 1)
        base = pos + frac * (goal - pos)
        direction = goal - pos
        perp = np.array([-direction[1], direction[0]]) / (np.linalg.norm(direction) + 1e-12)
        offset = rng.uniform(*profile["detour_offset"]) * rng.choice([-1.0, 1.0])
        waypoints.append(np.clip(base + offset * perp, -0.9, 0.9))
    waypoints.append(goal)
    speed = rng.uniform(*profile["speed"])
    obs, acts, rews = [], [], []
    pause_left = 0
    for t in range(spec.horizon):
        target = waypoints[0]
        delta = target - pos
        dist = np.linalg.norm(delta)
        if len(waypoints) > 1 and dist < 0.1:
            waypoints.pop(0)
            target = waypoints[0]
            delta = target - pos
            dist = np.linalg.norm(delta)
        if pause_left == 0 and rng.uniform() < profile["pause_prob"]:
            lo, hi = profile["pause_len"]
            pause_left = int(rng.integers(lo, hi + 1))
        if pause_left > 0:
            action = np.zeros(2)
            pause_left -= 1
        else:
            step = min(speed, dist / spec.dt)
            action = step * delta / (dist + 1e-12) + profile["noise"] * rng.standard_normal(2)
        action = np.clip(action, -1.0, 1.0)
        obs.append(pos)
        acts.append(action)
        pos, reward, done = pointmass_step(pos, action, spec, t)
        rews.append(reward)
        if done:
            return obs, acts, rews, reward == 0.0
    return obs, acts, rews, False


def generate_demos(spec, n_episodes, profile="teleop", rng=None, corner_preset="default"):
    """Scripted demonstrations; pointmass datasets keep successful episodes only."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    rng = np.random.default_rng(rng)
    if spec.kind == "two_mode":
        # exactly balanced modes (up to one sample), in shuffled order
        pick = rng.permutation(np.arange(n_episodes) % len(TWO_MODES))
        acts = np.asarray(TWO_MODES)[pick][:, None]
        return OfflineDataset(
            observations=np.ones((n_episodes, spec.obs_dim)),
            actions=acts,
            rewards=two_mode_eval(acts, spec),
            episode_lengths=np.ones(n_episodes, dtype=np.int64),
            terminals=np.ones(n_episodes, dtype=bool),
            metadata=dict(env=spec.kind, n_episodes=n_episodes),
        )
    if spec.kind == "corner_bandit":
        preset = CORNER_PRESETS[corner_preset]
        centers = np.asarray(preset["centers"])
        comp = rng.choice(len(centers), size=n_episodes, p=np.asarray(preset["weights"]))
        acts = np.clip(centers[comp] + preset["std"] * rng.standard_normal((n_episodes, 2)), -1.0, 1.0)
        return OfflineDataset(
            observations=np.ones((n_episodes, spec.obs_dim)),
            actions=acts,
            rewards=corner_bandit_eval(acts, spec),
            episode_lengths=np.ones(n_episodes, dtype=np.int64),
            terminals=np.ones(n_episodes, dtype=bool),
            metadata=dict(env=spec.kind, preset=corner_preset, n_episodes=n_episodes),
        )
    prof = ARTIFACT_PROFILES[profile] if isinstance(profile, str) else profile
    obs, acts, rews, lengths = [], [], [], []
    while len(lengths) < n_episodes:
        o, a, r, success = _pointmass_episode(spec, prof, rng)
        if not success:
            continue
        obs += o
        acts += a
        rews += r
        lengths.append(len(o))
    return OfflineDataset(
        observations=np.asarray(obs), actions=np.asarray(acts), rewards=np.asarray(rews),
        episode_lengths=np.asarray(lengths), terminals=np.ones(len(lengths), dtype=bool),
        metadata=dict(env=spec.kind, profile=profile if isinstance(profile, str) else "custom",
                      n_episodes=n_episodes),
    )


# --- evaluation --------------------------------------------------------------

def ood_fraction(actions, centers, std, threshold=3.0):
    """Share of actions farther than ``threshold`` cluster stds from every center."""
    actions = np.asarray(actions, dtype=np.float64).reshape(-1, np.shape(centers)[1])
    d = np.linalg.norm(actions[:, None, :] - np.asarray(centers)[None], axis=-1) / std
    return float(np.mean(d.min(axis=1) > threshold))


def evaluate_policy(policy, spec, n_episodes, rng, h=None):
    """Roll out ``policy`` open loop, one chunk query per ``h`` steps.

    ``policy(observations, rng)`` maps a batch of observations to flattened
    chunks. All episodes run side by side. Returns
    ``(mean_return, success_rate, records)``.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    rng = np.random.default_rng(rng)
    if spec.kind in SINGLE_STEP_KINDS:
        obs = np.ones((n_episodes, spec.obs_dim))
        chunk = np.clip(np.asarray(policy(obs, rng)), -1.0, 1.0)
        actions = chunk[:, :spec.action_dim]
        rewards = _single_step_reward(spec, actions)
        records = [dict(episode=i, ret=float(r), length=1, success=bool(r >= 0.5),
                        action=[float(x) for x in a]) for i, (r, a) in enumerate(zip(rewards, actions))]
        return float(rewards.mean()), float(np.mean(rewards >= 0.5)), records

    pos = np.asarray(spec.start, dtype=np.float64) + rng.uniform(
        -spec.start_noise, spec.start_noise, size=(n_episodes, 2))
    goal = np.asarray(spec.goal)
    returns = np.zeros(n_episodes)
    lengths = np.zeros(n_episodes, dtype=np.int64)
    success = np.zeros(n_episodes, dtype=bool)
    active = np.ones(n_episodes, dtype=bool)
    while active.any():
        live = np.flatnonzero(active)
        chunk = np.clip(np.asarray(policy(pos[live], rng), dtype=np.float64), -1.0, 1.0)
        h_eff = chunk.shape[1] // spec.action_dim if h is None else h
        chunk = chunk.reshape(len(live), -1, spec.action_dim)
        for k in range(h_eff):
            if not active.any():
                break
            still = active[live]
            ids = live[still]
            nxt = np.clip(pos[ids] + spec.dt * chunk[still, k], -spec.bound, spec.bound)
            reached = np.linalg.norm(nxt - goal, axis=1) <= spec.goal_radius
            pos[ids] = nxt
            returns[ids] += np.where(reached, 0.0, -1.0)
            lengths[ids] += 1
            success[ids] |= reached
            timeout = lengths[ids] >= spec.horizon
            active[ids] = ~(reached | timeout)
    records = [dict(episode=i, ret=float(returns[i]), length=int(lengths[i]), success=bool(success[i]))
               for i in range(n_episodes)]
    return float(returns.mean()), float(success.mean()), records
