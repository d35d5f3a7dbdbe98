"""Generative base policies: MeanFlow (one step) and flow matching (Euler).

Paths run from data at ``t = 0`` to the latent prior at ``t = 1``::

    z_t = (1 - t) * action + t * noise,    v = noise - action

With the noise-to-action reformulation the network predicts the action and
the average velocity is ``u = z_t - net(s, z_t, r, t)``.
"""
from collections import namedtuple
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .latent import sample_prior, _check_geometry
from .nn import MlpSpec, init_mlp, mlp_forward

BACKBONES = ("meanflow", "flow_matching")

PathSample = namedtuple("PathSample", ["action", "noise", "t", "z_t", "v"])


@dataclass
class BasePolicy:
    """Network layout and sampling conventions of a generative base policy.

    Parameters are kept outside the object so that losses can be
    differentiated with respect to them.
    """

    state_dim: int
    chunk_dim: int
    hidden_widths: tuple = (64, 64)
    backbone: str = "meanflow"
    reformulated: bool = True
    geometry: str = "sphere"
    activation: str = "gelu"
    time_features: int = 0
    flow_steps: int = 10

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}")
        _check_geometry(self.geometry)
        if self.flow_steps < 1:
            raise ValueError("flow_steps must be >= 1")

    @property
    def n_times(self):
        return 2 if self.backbone == "meanflow" else 1

    @property
    def spec(self):
        per_time = 1 + 2 * self.time_features
        return MlpSpec(self.state_dim + self.chunk_dim + self.n_times * per_time,
                       self.hidden_widths, self.chunk_dim, self.activation)

    def init(self, rng, dtype=np.float64):
        return init_mlp(self.spec, rng, dtype)

    def _time_columns(self, t):
        if not self.time_features:
            return [t]
        cols = [t]
        for k in range(self.time_features):
            freq = float(np.pi * 2 ** k)
            cols += [ad.sin(ad.mul(t, freq)), ad.cos(ad.mul(t, freq))]
        return cols

    def network(self, params, states, z_t, r=None, t=None):
        """Raw network output on ``[s, z_t, (r), t]``."""
        cols = [states, z_t]
        if self.backbone == "meanflow":
            cols += self._time_columns(r)
        cols += self._time_columns(t)
        return mlp_forward(params, ad.concat(*cols, axis=-1), self.activation)

    def sample_prior(self, n, rng, dtype=np.float64):
        return sample_prior(self.geometry, self.chunk_dim, rng, size=n).astype(dtype)


def _col(value, n, dtype):
    if isinstance(value, (ad.Tensor, ad.Dual)):
        return value
    if np.isscalar(value):
        return np.full((n, 1), value, dtype=dtype)
    return np.asarray(value, dtype=dtype).reshape(n, 1)


def _dtype(params):
    return ad.value_of(params[0]).dtype


def sample_rt(rng, p_equal=0.5, size=None):
    """Draw ``(r, t)`` with ``r <= t``; with probability ``p_equal`` set ``r = t``."""
    if not 0.0 <= p_equal <= 1.0:
        raise ValueError("p_equal must lie in [0, 1]")
    shape = () if size is None else (size,)
    u1 = rng.uniform(size=shape)
    u2 = rng.uniform(size=shape)
    equal = rng.uniform(size=shape) < p_equal
    r = np.where(equal, u1, np.minimum(u1, u2))
    t = np.where(equal, u1, np.maximum(u1, u2))
    if size is None:
        return float(r), float(t)
    return r, t


def interpolate(action, noise, t):
    action = np.asarray(action)
    noise = np.asarray(noise)
    if action.shape != noise.shape:
        raise ValueError(f"action shape {action.shape} != noise shape {noise.shape}")
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ValueError("t must lie in [0, 1]")
    z_t = (1 - t) * action + t * noise
    return PathSample(action, noise, t, z_t, noise - action)


def u_of(policy, params, states, z_t, r, t):
    """Average velocity u(z_t, r, t) implied by the network."""
    n = ad.value_of(z_t).shape[0]
    dt = _dtype(params)
    out = policy.network(params, states, z_t, _col(r, n, dt), _col(t, n, dt))
    if policy.reformulated:
        return ad.sub(z_t, out)
    return out


def velocity(policy, params, states, z_t, t):
    """Instantaneous velocity of a flow-matching policy."""
    n = ad.value_of(z_t).shape[0]
    out = policy.network(params, states, z_t, None, _col(t, n, _dtype(params)))
    if policy.reformulated:
        return ad.sub(z_t, out)
    return out


def draw_flow_inputs(policy, n, rng, p_equal=0.5, dtype=np.float64):
    noise = policy.sample_prior(n, rng, dtype)
    if policy.backbone == "meanflow":
        r, t = sample_rt(rng, p_equal, size=n)
    else:
        t = rng.uniform(size=n)
        r = t
    return noise, r.reshape(n, 1).astype(dtype), t.reshape(n, 1).astype(dtype)


def meanflow_target(policy, params, states, actions, noise, r, t):
    """``u_tgt = v - (t - r) du/dt`` with du/dt from a JVP along ``(v, 0, 1)``.

    Always a plain array: the target never carries gradient.
    """
    n = actions.shape[0]
    dt = _dtype(params)
    r = _col(r, n, dt)
    t = _col(t, n, dt)
    path = interpolate(actions, noise, t)
    frozen = [ad.value_of(p) for p in params]

    def net(p, z, rr, tt):
        return policy.network(p, states, z, rr, tt)

    _, d_net = ad.jvp(net, frozen, [path.z_t, r, t], [path.v, np.zeros_like(r), np.ones_like(t)])
    du_dt = path.v - d_net if policy.reformulated else d_net
    return path.v - (t - r) * du_dt


def meanflow_objective(policy, params, states, actions, noise, r, t, target=None):
    """Squared error between u and the stop-gradient MeanFlow target.

    ``params`` may hold Tensors (for gradients) or arrays (for values).
    ``target`` overrides the target, e.g. to hold it fixed in a derivative check.
    """
    n = actions.shape[0]
    dt = _dtype(params)
    r = _col(r, n, dt)
    t = _col(t, n, dt)
    if target is None:
        target = meanflow_target(policy, params, states, actions, noise, r, t)
    z_t = interpolate(actions, noise, t).z_t
    u = u_of(policy, params, states, z_t, r, t)
    return ad.mean(ad.sum(ad.square(ad.sub(u, target)), axis=-1))


def meanflow_loss(policy, params, states, actions, rng, p_equal=0.5):
    n = actions.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    noise, r, t = draw_flow_inputs(policy, n, rng, p_equal, _dtype(params))
    value = float(meanflow_objective(policy, params, states, actions, noise, r, t))
    if not np.isfinite(value):
        raise FloatingPointError("non-finite MeanFlow loss")
    return value


def fm_objective(policy, params, states, actions, noise, t):
    n = actions.shape[0]
    t = _col(t, n, _dtype(params))
    path = interpolate(actions, noise, t)
    pred = velocity(policy, params, states, path.z_t, t)
    return ad.mean(ad.sum(ad.square(ad.sub(pred, path.v)), axis=-1))


def fm_loss(policy, params, states, actions, rng):
    n = actions.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    noise, _, t = draw_flow_inputs(policy, n, rng, dtype=_dtype(params))
    value = float(fm_objective(policy, params, states, actions, noise, t))
    if not np.isfinite(value):
        raise FloatingPointError("non-finite flow-matching loss")
    return value


def base_objective(policy, params, states, actions, noise, r, t):
    """Backbone-appropriate generative loss on pre-drawn path inputs."""
    if policy.backbone == "meanflow":
        return meanflow_objective(policy, params, states, actions, noise, r, t)
    return fm_objective(policy, params, states, actions, noise, t)


def one_step_action(policy, params, states, z):
    """``z - u(z, 0, 1)``; the reformulated network output is returned as is."""
    n = ad.value_of(z).shape[0]
    dt = _dtype(params)
    zeros, ones = np.zeros((n, 1), dt), np.ones((n, 1), dt)
    out = policy.network(params, states, z, zeros, ones)
    if policy.reformulated:
        return out
    return ad.sub(z, out)


def fm_sample_euler(policy, params, states, z, steps):
    """Euler integration of the velocity field from t = 1 down to t = 0."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = z
    dt = 1.0 / steps
    for k in range(steps):
        x = ad.sub(x, ad.mul(velocity(policy, params, states, x, 1.0 - k * dt), dt))
    return x


def generate(policy, params, states, z):
    """Decode latents into action chunks with the policy's own sampler."""
    if policy.backbone == "meanflow":
        return one_step_action(policy, params, states, z)
    return fm_sample_euler(policy, params, states, z, policy.flow_steps)
