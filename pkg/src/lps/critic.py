"""Action-chunked Q ensemble with h-step bootstrapped targets."""
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .nn import MlpSpec, init_mlp, mlp_forward, polyak_update

AGGREGATIONS = ("min", "mean")


def chunk_return(rewards, gamma):
    """Discounted within-chunk reward sum ``sum_i gamma**i * r_i``."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size == 0:
        raise ValueError("empty reward list")
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    return float(np.sum(gamma ** np.arange(rewards.shape[-1]) * rewards, axis=-1))


def chunk_returns(rewards, gamma):
    """Row-wise :func:`chunk_return` for a ``(batch, h)`` reward matrix."""
    rewards = np.asarray(rewards, dtype=np.float64)
    return rewards @ (gamma ** np.arange(rewards.shape[-1]))


def aggregate(heads, mode):
    """Combine per-head values (a list of arrays or Tensors)."""
    if mode not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation {mode!r}")
    out = heads[0]
    if mode == "min":
        for h in heads[1:]:
            out = ad.minimum(out, h)
        return out
    for h in heads[1:]:
        out = ad.add(out, h)
    return ad.mul(out, 1.0 / len(heads)) if len(heads) > 1 else out


@dataclass
class CriticEnsemble:
    """K online Q networks plus their Polyak-averaged targets."""

    state_dim: int
    chunk_dim: int
    hidden_widths: tuple = (64, 64)
    n_heads: int = 2
    activation: str = "gelu"
    target_agg: str = "min"
    actor_agg: str = "mean"
    online: list = field(default_factory=list)
    target: list = field(default_factory=list)

    def __post_init__(self):
        if self.n_heads < 1:
            raise ValueError("ensemble needs at least one head")

    @property
    def spec(self):
        return MlpSpec(self.state_dim + self.chunk_dim, self.hidden_widths, 1, self.activation)

    def init(self, rng, dtype=np.float64):
        self.online = [init_mlp(self.spec, rng, dtype) for _ in range(self.n_heads)]
        self.target = [[p.copy() for p in head] for head in self.online]
        return self

    def heads(self, head_params, states, chunks):
        """Per-head values, each of shape ``(batch,)``."""
        x = ad.concat(states, chunks, axis=-1)
        return [ad.reshape(mlp_forward(p, x, self.activation), (-1,)) for p in head_params]

    def q_value(self, states, chunks, mode=None, use_target=False, head_params=None):
        if head_params is None:
            head_params = self.target if use_target else self.online
        return aggregate(self.heads(head_params, states, chunks), mode or self.actor_agg)

    def soft_update(self, tau):
        self.target = [polyak_update(t, o, tau) for t, o in zip(self.target, self.online)]


def q_value(ensemble, states, chunks, mode="mean", use_target=False):
    return ensemble.q_value(states, chunks, mode, use_target)


def td_targets(ensemble, next_states, next_chunks, returns, mask, gamma, h):
    """``R + mask * gamma**h * Q_target(s', a')`` with target aggregation."""
    q_next = np.asarray(ensemble.q_value(next_states, next_chunks, ensemble.target_agg, use_target=True))
    y = returns + mask * (gamma ** h) * q_next
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("non-finite TD target")
    return y


def critic_objective(ensemble, head_params, states, chunks, targets):
    """Mean over batch and heads of ``(Q_k(s, a) - y)**2`` with ``y`` held fixed."""
    losses = [ad.mean(ad.square(ad.sub(q, targets))) for q in ensemble.heads(head_params, states, chunks)]
    total = losses[0]
    for l in losses[1:]:
        total = ad.add(total, l)
    return ad.mul(total, 1.0 / len(losses)) if len(losses) > 1 else total


def critic_loss(ensemble, batch, next_chunks, gamma, h):
    y = td_targets(ensemble, batch.next_states, next_chunks, batch.returns, batch.mask, gamma, h)
    return float(critic_objective(ensemble, ensemble.online, batch.states, batch.chunks, y))
