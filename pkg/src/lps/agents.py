"""Policy extraction agents sharing one Q-chunking critic.

``LPS``      latent actor on the sphere, trained by backpropagating the
             action-space critic through the one-step base policy.
``QC_MFQL``  one-step extraction policy distilled toward a MeanFlow
``QC_FQL``   (resp. flow-matching) behavior policy, weighted by ``alpha``.
``DSRL_NA``  latent actor trained against a distilled latent-space critic.
``LPSD``     stochastic latent actor with an action-space distillation term.
``BC_MF``    base policy only (no RL).
``BC_FM``
"""
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import ExperimentConfig
from .critic import CriticEnsemble, critic_objective, td_targets
from .latent import actor_head
from .meanflow import BasePolicy, base_objective, draw_flow_inputs, generate
from .nn import MlpSpec, adam_init, adam_step, init_mlp, load_params, mlp_forward, save_params

LATENT_ACTOR_KINDS = ("LPS", "DSRL_NA", "LPSD")
QC_KINDS = ("QC_MFQL", "QC_FQL")
BC_KINDS = ("BC_MF", "BC_FM")


class TrainingDiverged(FloatingPointError):
    def __init__(self, step, phase, cause):
        super().__init__(f"step {step}, phase {phase!r}: {cause}")
        self.step = step
        self.phase = phase
        self.cause = cause


@dataclass
class LatentMonitor:
    """Running statistics of latent actor outputs since the last reset."""

    chunk_dim: int
    count: int = 0
    norm_sum: float = 0.0
    norm_max: float = 0.0
    sq_dev_max: float = 0.0

    def update(self, z):
        sq = np.sum(np.asarray(z, dtype=np.float64) ** 2, axis=-1)
        norms = np.sqrt(sq)
        self.count += sq.size
        self.norm_sum += float(norms.sum())
        self.norm_max = max(self.norm_max, float(norms.max()))
        self.sq_dev_max = max(self.sq_dev_max, float(np.max(np.abs(sq - self.chunk_dim))))

    def summary(self):
        if self.count == 0:
            return dict(latent_norm_mean=None, latent_norm_max=None, latent_sqnorm_dev_max=None)
        return dict(latent_norm_mean=self.norm_sum / self.count, latent_norm_max=self.norm_max,
                    latent_sqnorm_dev_max=self.sq_dev_max)

    def reset(self):
        self.count = 0
        self.norm_sum = self.norm_max = self.sq_dev_max = 0.0


@dataclass
class TrainState:
    config: ExperimentConfig
    obs_dim: int
    action_dim: int
    policy: BasePolicy
    beta: list
    beta_opt: object
    critic: CriticEnsemble = None
    critic_opt: object = None
    actor_spec: MlpSpec = None
    phi: list = None
    phi_opt: object = None
    latent_critic_spec: MlpSpec = None
    psi: list = None
    psi_opt: object = None
    step: int = 0
    rng: np.random.Generator = None
    monitor: LatentMonitor = None
    last: dict = field(default_factory=dict)

    @property
    def kind(self):
        return self.config.agent

    @property
    def chunk_dim(self):
        return self.policy.chunk_dim

    @property
    def dtype(self):
        return self.beta[0].dtype


def init_train_state(config, obs_dim, action_dim):
    cfg = config.resolved()
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng(cfg.seed)
    d = cfg.horizon * action_dim
    opt = dict(learning_rate=cfg.lr, schedule=cfg.lr_schedule, total_steps=cfg.train_steps)
    policy = BasePolicy(obs_dim, d, cfg.policy_widths, cfg.backbone, cfg.reformulated, cfg.geometry,
                        cfg.activation, cfg.time_features, cfg.flow_steps)
    beta = policy.init(rng, dtype)
    ts = TrainState(cfg, obs_dim, action_dim, policy, beta, adam_init(beta, **opt), rng=rng,
                    monitor=LatentMonitor(d))
    if cfg.agent in BC_KINDS:
        return ts
    ts.critic = CriticEnsemble(obs_dim, d, cfg.critic_widths, cfg.n_heads, cfg.activation,
                               cfg.target_agg, cfg.actor_agg).init(rng, dtype)
    ts.critic_opt = adam_init(_flat(ts.critic.online), **opt)
    if cfg.agent in ("LPS", "DSRL_NA"):
        ts.actor_spec = MlpSpec(obs_dim, cfg.actor_widths, d, cfg.activation)
    elif cfg.agent == "LPSD":
        ts.actor_spec = MlpSpec(obs_dim + d, cfg.actor_widths, d, cfg.activation)
    else:
        ts.actor_spec = MlpSpec(obs_dim + d, cfg.policy_widths, d, cfg.activation)
    ts.phi = init_mlp(ts.actor_spec, rng, dtype)
    ts.phi_opt = adam_init(ts.phi, **opt)
    if cfg.agent == "DSRL_NA":
        ts.latent_critic_spec = MlpSpec(obs_dim + d, cfg.critic_widths, 1, cfg.activation)
        ts.psi = init_mlp(ts.latent_critic_spec, rng, dtype)
        ts.psi_opt = adam_init(ts.psi, **opt)
    return ts


def _flat(heads):
    return [p for head in heads for p in head]


def _unflat(flat, like):
    out, i = [], 0
    for head in like:
        out.append(list(flat[i:i + len(head)]))
        i += len(head)
    return out


# --- objectives ------------------------------------------------------------------
# Each takes the parameters being trained first so it can be handed to
# reverse_grad; every other parameter set enters as a plain array.

def normalized_q_loss(q, normalize=True, scale=None):
    """``-mean(Q) / sg(mean|Q|)``; the scale never carries gradient.

    A given ``scale`` replaces the batch statistic (derivative checks use
    this to hold the stop-gradient factor fixed).
    """
    loss = ad.mul(ad.mean(q), -1.0)
    if not normalize:
        return loss
    if scale is None:
        scale = q_scale(q)
    return ad.mul(loss, 1.0 / scale)


def q_scale(q):
    return max(float(np.mean(np.abs(ad.value_of(q)))), 1e-8)


def latent_actor_output(ts, phi, states, z=None):
    """Latent chosen by the actor; ``z`` is the noise input of stochastic actors."""
    x = states if z is None else ad.concat(states, z, axis=-1)
    return actor_head(ts.policy.geometry, mlp_forward(phi, x, ts.actor_spec.activation))


def composed_q(ts, states, z, beta=None, critic_heads=None):
    """``Q(s, clip(pi_beta(s, z)))`` with the actor-side ensemble aggregation.

    Chunks are clipped like the ones the environment executes, so the actor
    cannot chase critic extrapolation outside the action box.
    """
    a = ad.clip(generate(ts.policy, ts.beta if beta is None else beta, states, z))
    return ts.critic.q_value(states, a, ts.critic.actor_agg, head_params=critic_heads)


def _unit_scale(loss):
    return ad.mul(loss, 1.0 / max(float(ad.value_of(loss)), 1e-8))


def _q_term(ts, q, scale):
    return normalized_q_loss(q, ts.config.q_normalization == "actor", scale)


def lps_actor_objective(ts, phi, states, scale=None):
    z = latent_actor_output(ts, phi, states)
    ts.monitor.update(ad.value_of(z))
    return _q_term(ts, composed_q(ts, states, z), scale)


def qc_actor_objective(ts, phi, states, z, behavior_actions, scale=None):
    a = mlp_forward(phi, ad.concat(states, z, axis=-1), ts.actor_spec.activation)
    q = ts.critic.q_value(states, ad.clip(a), ts.critic.actor_agg)
    reg = ad.mean(ad.sum(ad.square(ad.sub(a, behavior_actions)), axis=-1))
    return ad.add(_q_term(ts, q, scale), ad.mul(reg, ts.config.alpha))


def latent_q(ts, psi, states, z):
    x = ad.concat(states, z, axis=-1)
    return ad.reshape(mlp_forward(psi, x, ts.latent_critic_spec.activation), (-1,))


def dsrl_distill_objective(ts, psi, states, z, q_targets):
    return ad.mean(ad.square(ad.sub(latent_q(ts, psi, states, z), q_targets)))


def dsrl_actor_objective(ts, phi, states, scale=None):
    z = latent_actor_output(ts, phi, states)
    ts.monitor.update(ad.value_of(z))
    return _q_term(ts, latent_q(ts, ts.psi, states, z), scale)


def lpsd_actor_objective(ts, phi, states, z, base_actions, scale=None):
    z_phi = latent_actor_output(ts, phi, states, z)
    ts.monitor.update(ad.value_of(z_phi))
    a = generate(ts.policy, ts.beta, states, z_phi)
    q = ts.critic.q_value(states, ad.clip(a), ts.critic.actor_agg)
    reg = ad.mean(ad.sum(ad.square(ad.sub(a, base_actions)), axis=-1))
    return ad.add(_q_term(ts, q, scale), ad.mul(reg, ts.config.alpha))


def _prior(ts, n, rng):
    return ts.policy.sample_prior(n, rng, ts.dtype)


def _as(ts, x):
    return np.asarray(x, dtype=ts.dtype)


def lps_actor_loss(ts, states):
    if ts.kind != "LPS":
        raise ValueError(f"lps_actor_loss needs an LPS agent, got {ts.kind}")
    return float(lps_actor_objective(ts, ts.phi, _as(ts, states)))


def qcfql_actor_loss(ts, states, rng):
    if ts.kind not in QC_KINDS:
        raise ValueError(f"qcfql_actor_loss needs a QC agent, got {ts.kind}")
    states = _as(ts, states)
    z = _prior(ts, len(states), rng)
    target = generate(ts.policy, ts.beta, states, z)
    return float(qc_actor_objective(ts, ts.phi, states, z, target))


def dsrl_losses(ts, states, rng):
    """``(distill_loss, latent_actor_loss)`` on prior latents."""
    if ts.kind != "DSRL_NA":
        raise ValueError(f"dsrl_losses needs a DSRL_NA agent, got {ts.kind}")
    states = _as(ts, states)
    z = _prior(ts, len(states), rng)
    q_t = np.asarray(composed_q(ts, states, z))
    return (float(dsrl_distill_objective(ts, ts.psi, states, z, q_t)),
            float(dsrl_actor_objective(ts, ts.phi, states)))


def lpsd_actor_loss(ts, states, rng):
    if ts.kind != "LPSD":
        raise ValueError(f"lpsd_actor_loss needs an LPSD agent, got {ts.kind}")
    states = _as(ts, states)
    z = _prior(ts, len(states), rng)
    base = generate(ts.policy, ts.beta, states, z)
    return float(lpsd_actor_objective(ts, ts.phi, states, z, base))


# --- acting ---------------------------------------------------------------------

def policy_chunks(ts, states, rng, monitor=False):
    """Action chunks of the agent's current policy, clipped to [-1, 1]."""
    states = _as(ts, states)
    n = states.shape[0]
    kind = ts.kind
    if kind in ("LPS", "DSRL_NA"):
        z = latent_actor_output(ts, ts.phi, states)
        if monitor:
            ts.monitor.update(z)
        a = generate(ts.policy, ts.beta, states, z)
    elif kind == "LPSD":
        z = latent_actor_output(ts, ts.phi, states, _prior(ts, n, rng))
        if monitor:
            ts.monitor.update(z)
        a = generate(ts.policy, ts.beta, states, z)
    elif kind in QC_KINDS:
        z = _prior(ts, n, rng)
        a = mlp_forward(ts.phi, np.concatenate([states, z], axis=-1), ts.actor_spec.activation)
    else:
        a = generate(ts.policy, ts.beta, states, _prior(ts, n, rng))
    return np.clip(a, -1.0, 1.0)


def act(ts, observations, rng=None):
    """Chunk(s) for one observation or a batch; LPS ignores ``rng``."""
    obs = np.asarray(observations)
    single = obs.ndim == 1
    chunks = policy_chunks(ts, obs[None] if single else obs, np.random.default_rng(rng))
    return chunks[0] if single else chunks


# --- training -------------------------------------------------------------------

def _update(ts, phase, objective, params, opt):
    try:
        loss, grads = ad.reverse_grad(objective, params)
        opt, params = adam_step(opt, params, grads)
    except (FloatingPointError, ValueError) as exc:
        raise TrainingDiverged(ts.step + 1, phase, exc) from exc
    return loss, params, opt


def train_step(ts, batch):
    """Base policy, then actor, then critic: one Adam step each.

    Updates ``ts`` in place (parameter lists are replaced, never mutated)
    and returns it.
    """
    cfg = ts.config
    rng = ts.rng
    s = _as(ts, batch.states)
    a = _as(ts, batch.chunks)
    n = s.shape[0]

    # 1. generative base policy
    noise, r, t = draw_flow_inputs(ts.policy, n, rng, cfg.p_equal, ts.dtype)
    scale = cfg.base_loss_scale

    def base_loss(p):
        return ad.mul(base_objective(ts.policy, p, s, a, noise, r, t), scale)

    ts.last["loss_mf"], ts.beta, ts.beta_opt = _update(ts, "base", base_loss, ts.beta, ts.beta_opt)

    if ts.kind in BC_KINDS:
        ts.step += 1
        return ts

    # 2. actor
    kind = ts.kind
    if kind == "LPS":
        obj = lambda p: lps_actor_objective(ts, p, s)
    elif kind in QC_KINDS:
        z = _prior(ts, n, rng)
        behavior = generate(ts.policy, ts.beta, s, z)
        obj = lambda p: qc_actor_objective(ts, p, s, z, behavior)
    elif kind == "DSRL_NA":
        z = _prior(ts, n, rng)
        q_t = np.asarray(composed_q(ts, s, z))
        distill = lambda p: dsrl_distill_objective(ts, p, s, z, q_t)
        ts.last["loss_distill"], ts.psi, ts.psi_opt = _update(ts, "distill", distill, ts.psi, ts.psi_opt)
        obj = lambda p: dsrl_actor_objective(ts, p, s)
    else:
        z = _prior(ts, n, rng)
        base = generate(ts.policy, ts.beta, s, z)
        obj = lambda p: lpsd_actor_objective(ts, p, s, z, base)
    ts.last["loss_actor"], ts.phi, ts.phi_opt = _update(ts, "actor", obj, ts.phi, ts.phi_opt)

    # 3. critic
    critic = ts.critic
    try:
        next_a = policy_chunks(ts, batch.next_states, rng, monitor=True)
        y = td_targets(critic, _as(ts, batch.next_states), next_a, batch.returns, batch.mask,
                       cfg.gamma, cfg.horizon).astype(ts.dtype)
    except (FloatingPointError, ValueError) as exc:
        raise TrainingDiverged(ts.step + 1, "critic", exc) from exc
    objective = lambda flat: critic_objective(critic, _unflat(flat, critic.online), s, a, y)
    raw_loss = []
    if cfg.q_normalization == "critic":
        # unit-scale TD loss: divide by its own stop-gradient value
        raw = objective

        def objective(flat):
            value = raw(flat)
            raw_loss.append(float(ad.value_of(value)))
            return _unit_scale(value)
    loss, flat, ts.critic_opt = _update(ts, "critic", objective, _flat(critic.online), ts.critic_opt)
    critic.online = _unflat(flat, critic.online)
    critic.soft_update(cfg.tau)
    ts.last["loss_critic"] = raw_loss[0] if raw_loss else loss
    ts.step += 1
    return ts


# --- checkpoints ------------------------------------------------------------------

def _param_sets(ts):
    sets = {"beta": ts.beta}
    if ts.critic is not None:
        sets["critic"] = _flat(ts.critic.online)
        sets["critic_target"] = _flat(ts.critic.target)
    if ts.phi is not None:
        sets["phi"] = ts.phi
    if ts.psi is not None:
        sets["psi"] = ts.psi
    return sets


def save_checkpoint(ts, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sets = _param_sets(ts)
    for name, arrays in sets.items():
        save_params(directory / f"{name}.lpsw", arrays)
    header = dict(agent=ts.kind, step=ts.step, config_hash=ts.config.digest(),
                  obs_dim=ts.obs_dim, action_dim=ts.action_dim,
                  param_sets=sorted(sets), config=ts.config.to_dict())
    (directory / "header.json").write_text(json.dumps(header, indent=1, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory, dtype=None):
    """Rebuild a TrainState (fresh optimizer moments) from ``save_checkpoint`` output."""
    directory = Path(directory)
    header_path = directory / "header.json"
    if not header_path.exists():
        raise FileNotFoundError(f"no checkpoint header in {directory}")
    header = json.loads(header_path.read_text())
    cfg_dict = header["config"]
    for k, v in cfg_dict.items():
        if isinstance(v, list):
            cfg_dict[k] = tuple(v)
    cfg = ExperimentConfig(**cfg_dict)
    if dtype is not None:
        cfg = replace(cfg, dtype=np.dtype(dtype).name)
    ts = init_train_state(cfg, header["obs_dim"], header["action_dim"])
    dt = ts.dtype
    for name in header["param_sets"]:
        arrays = load_params(directory / f"{name}.lpsw", dt)
        if name == "beta":
            ts.beta = arrays
        elif name == "critic":
            ts.critic.online = _unflat(arrays, ts.critic.online)
        elif name == "critic_target":
            ts.critic.target = _unflat(arrays, ts.critic.target)
        elif name == "phi":
            ts.phi = arrays
        elif name == "psi":
            ts.psi = arrays
    ts.step = header["step"]
    return ts
