"""Training runs, alpha sweeps, diagnostics and seed aggregation."""
import hashlib
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .agents import (
    LATENT_ACTOR_KINDS, QC_KINDS, TrainingDiverged, composed_q, init_train_state, latent_q,
    load_checkpoint, normalized_q_loss, latent_actor_output, policy_chunks, save_checkpoint,
    train_step,
)
from .envs import (
    CORNER_PRESETS, dataset_bytes, evaluate_policy, generate_demos, load_dataset, make_env,
    ood_fraction, sample_chunk_batch, save_dataset,
)
from .meanflow import generate
from .metrics import MetricsWriter, make_record, read_metrics

SPHERE_TOLERANCE = 1e-5


class InvariantViolation(RuntimeError):
    """A run broke one of its own guarantees (for instance the sphere constraint)."""


def _dump_lines(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(dict(type="header", **header), sort_keys=True, separators=(",", ":")) + "\n")
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")
    return path


def _finite_or_none(x):
    if x is None:
        return None
    x = float(x)
    return x if np.isfinite(x) else None


# --- data ---------------------------------------------------------------------

def demo_dataset(cfg, seed=None):
    spec = make_env(cfg.env)
    return generate_demos(spec, cfg.n_demos, cfg.demo_profile,
                          cfg.data_seed if seed is None else seed, cfg.corner_preset)


def obtain_dataset(cfg):
    """Load ``cfg.dataset`` if set, otherwise regenerate demos from ``data_seed``."""
    if cfg.dataset:
        path = Path(cfg.dataset)
        if not path.exists():
            raise FileNotFoundError(f"dataset {path} does not exist")
        return load_dataset(path)
    return demo_dataset(cfg)


def dataset_digest(ds):
    return hashlib.sha256(dataset_bytes(ds)).hexdigest()


def run_gen_data(cfg, out):
    """Write ``dataset.lps1`` plus a one-record summary file into ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ds = demo_dataset(cfg, seed=cfg.seed)
    path = out / "dataset.lps1"
    save_dataset(path, ds)
    if load_dataset(path).actions.tobytes() != ds.actions.tobytes():
        raise InvariantViolation("dataset did not survive a save/load round trip")
    stats = dict(
        n_steps=int(ds.n_steps), n_episodes=int(ds.n_episodes),
        mean_episode_length=float(ds.episode_lengths.mean()),
        terminal_fraction=float(ds.terminals.mean()),
        reward_mean=float(ds.rewards.mean()), sha256=dataset_digest(ds),
    )
    if cfg.env == "pointmass_nav" and not set(np.unique(ds.rewards)) <= {-1.0, 0.0}:
        raise InvariantViolation("semi-sparse rewards must be -1 or 0")
    _dump_lines(out / "gen_data.jsonl", dict(config=cfg.to_dict()), [stats])
    return dict(path=str(path), **stats)


# --- training -------------------------------------------------------------------

def _policy_fn(ts):
    return lambda obs, rng: policy_chunks(ts, obs, rng)


def policy_ood_fraction(ts, cfg, rng):
    """3-sigma OOD share of policy actions on corner_bandit; ``None`` elsewhere."""
    if cfg.env != "corner_bandit":
        return None
    preset = CORNER_PRESETS[cfg.corner_preset]
    obs = np.ones((cfg.ood_samples, ts.obs_dim))
    chunks = policy_chunks(ts, obs, rng)
    return ood_fraction(chunks[:, :ts.action_dim], preset["centers"], preset["std"])


def check_sphere(ts, stats):
    cfg = ts.config
    if cfg.geometry != "sphere" or cfg.agent not in LATENT_ACTOR_KINDS:
        return
    dev = stats.get("latent_sqnorm_dev_max")
    if dev is not None and dev >= SPHERE_TOLERANCE * ts.chunk_dim:
        raise InvariantViolation(f"step {ts.step}: latent |norm^2 - d| = {dev:.3g} breaks the sphere constraint")


def _record(ts, cfg, spec, batch, t0):
    step = ts.step
    eval_rng = np.random.default_rng([cfg.seed, step])
    ret, success, _ = evaluate_policy(_policy_fn(ts), spec, cfg.eval_episodes, eval_rng)
    q_mean = None
    if ts.critic is not None:
        chunks = policy_chunks(ts, batch.states, np.random.default_rng([cfg.seed, step, 1]))
        q_mean = float(np.mean(ts.critic.q_value(np.asarray(batch.states, ts.dtype), chunks, "mean")))
    stats = ts.monitor.summary()
    ts.monitor.reset()
    rec = make_record(
        step,
        loss_mf=ts.last.get("loss_mf"), loss_actor=ts.last.get("loss_actor"),
        loss_critic=ts.last.get("loss_critic"), q_mean=q_mean,
        eval_return_mean=ret, eval_success_rate=success,
        ood_fraction=policy_ood_fraction(ts, cfg, np.random.default_rng([cfg.seed, step, 2])),
        wall_time_s=(time.perf_counter() - t0) if cfg.record_wall_time else None,
        **stats,
    )
    return rec, stats


def run_train(cfg, out, dataset=None, checkpoint_every_record=True):
    """Train one agent, writing ``metrics.jsonl``, ``summary.json`` and ``checkpoint/``.

    On divergence the checkpoint directory keeps the last state that was
    recorded without error and :class:`TrainingDiverged` propagates.
    """
    cfg = cfg.resolved()
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ds = obtain_dataset(cfg) if dataset is None else dataset
    spec = make_env(cfg.env)
    if (ds.obs_dim, ds.action_dim) != (spec.obs_dim, spec.action_dim):
        raise ValueError(f"dataset dims {(ds.obs_dim, ds.action_dim)} do not match env {cfg.env}")
    ts = init_train_state(cfg, ds.obs_dim, ds.action_dim)
    ckpt = out / "checkpoint"
    save_checkpoint(ts, ckpt)
    header = dict(config=cfg.to_dict(), config_digest=cfg.digest(), dataset_sha256=dataset_digest(ds),
                  obs_dim=ds.obs_dim, action_dim=ds.action_dim)
    t0 = time.perf_counter()
    last = None
    with MetricsWriter(out / "metrics.jsonl", header) as writer:
        for _ in range(cfg.train_steps):
            batch = sample_chunk_batch(ds, cfg.horizon, cfg.gamma, cfg.batch_size, ts.rng)
            try:
                train_step(ts, batch)
            except TrainingDiverged as exc:
                (out / "diverged.json").write_text(json.dumps(
                    dict(step=exc.step, phase=exc.phase, error=str(exc.cause)), sort_keys=True) + "\n")
                raise
            if ts.step % cfg.eval_interval == 0 or ts.step == cfg.train_steps:
                last, stats = _record(ts, cfg, spec, batch, t0)
                writer.emit(last)
                check_sphere(ts, stats)
                if checkpoint_every_record or ts.step == cfg.train_steps:
                    save_checkpoint(ts, ckpt)
    summary = dict(agent=cfg.agent, steps=ts.step, final_return=last["eval_return_mean"],
                   final_success_rate=last["eval_success_rate"], final_ood_fraction=last["ood_fraction"])
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    return dict(summary, metrics=str(out / "metrics.jsonl"), checkpoint=str(ckpt), state=ts)


def run_eval(checkpoint, out, episodes=50, seed=0):
    """Evaluate a saved agent; writes ``eval.jsonl`` and ``episodes.jsonl``."""
    ts = load_checkpoint(checkpoint)
    cfg = ts.config
    spec = make_env(cfg.env)
    rng = np.random.default_rng([seed, ts.step])
    ret, success, records = evaluate_policy(_policy_fn(ts), spec, episodes, rng)
    ood = policy_ood_fraction(ts, replace(cfg, seed=seed), np.random.default_rng([seed, ts.step, 2]))
    rec = make_record(ts.step, eval_return_mean=ret, eval_success_rate=success, ood_fraction=ood)
    out = Path(out)
    header = dict(config=cfg.to_dict(), episodes=episodes, eval_seed=seed)
    with MetricsWriter(out / "eval.jsonl", header) as writer:
        writer.emit(rec)
    _dump_lines(out / "episodes.jsonl", header, records)
    return rec


# --- sweeps -----------------------------------------------------------------------

def default_scale_target(agent):
    return "regularizer" if agent in QC_KINDS + ("LPSD",) else "base_loss"


def sweep_config(cfg, alpha, scale_target):
    if scale_target == "regularizer":
        return replace(cfg, alpha=float(alpha))
    if scale_target == "base_loss":
        return replace(cfg, base_loss_scale=float(alpha))
    raise ValueError(f"unknown scale target {scale_target!r}")


def run_sweep(cfg, alphas, out, scale_target=None, dataset=None):
    """One training run per alpha; returns (and writes) one summary row per alpha."""
    alphas = list(alphas)
    if not alphas:
        raise ValueError("alpha list is empty")
    cfg = cfg.resolved()
    target = scale_target or default_scale_target(cfg.agent)
    ds = obtain_dataset(cfg) if dataset is None else dataset
    out = Path(out)
    rows = []
    for i, a in enumerate(alphas):
        res = run_train(sweep_config(cfg, a, target), out / f"alpha_{i:02d}_{a:g}", ds,
                        checkpoint_every_record=False)
        rows.append(dict(alpha=float(a), scale_target=target, final_return=res["final_return"],
                         final_success_rate=res["final_success_rate"],
                         final_ood_fraction=res["final_ood_fraction"]))
    _dump_lines(out / "sweep.jsonl", dict(config=cfg.to_dict(), alphas=[float(a) for a in alphas],
                                          scale_target=target), rows)
    return rows


# --- diagnostics ----------------------------------------------------------------

def probe_states(ts, n):
    """States the diagnostics are evaluated at: the env's start (or constant) observation."""
    spec = make_env(ts.config.env)
    if spec.kind == "pointmass_nav":
        s = np.asarray(spec.start, dtype=ts.dtype)
    else:
        s = np.ones(spec.obs_dim, dtype=ts.dtype)
    return np.tile(s, (n, 1))


def latent_grid(ts, n_grid, seed=0):
    """Latents on which gradient directions are compared.

    A 2-D sphere is swept by angle; otherwise fixed-seed prior draws are used.
    """
    d = ts.chunk_dim
    if ts.config.geometry == "sphere" and d == 2:
        ang = np.linspace(0.0, 2 * np.pi, n_grid, endpoint=False)
        return (np.sqrt(2.0) * np.stack([np.cos(ang), np.sin(ang)], axis=1)).astype(ts.dtype)
    if d == 2:
        side = max(int(round(np.sqrt(n_grid))), 2)
        g = np.linspace(-2.0, 2.0, side)
        xx, yy = np.meshgrid(g, g, indexing="ij")
        return np.stack([xx.ravel(), yy.ravel()], axis=1).astype(ts.dtype)
    return ts.policy.sample_prior(n_grid, np.random.default_rng(seed), ts.dtype)


def _input_grad(fn, states, z):
    _, _, (gz,) = ad.reverse_grad(lambda _p, zz: ad.sum(fn(states, zz)), [], (z,), wrt_inputs=True)
    return np.asarray(gz, dtype=np.float64)


def composed_latent_grad(ts, states, z):
    """d/dz of Q(s, pi_beta(s, z)): the exact gradient the LPS actor follows."""
    return _input_grad(lambda s, zz: composed_q(ts, s, zz), states, z)


def distilled_latent_grad(ts, states, z):
    if ts.psi is None:
        raise ValueError("checkpoint has no distilled latent critic; use self_test or a DSRL_NA run")
    return _input_grad(lambda s, zz: latent_q(ts, ts.psi, s, zz), states, z)


def tangential(g, z):
    """Drop the radial component, which the sphere projection discards anyway."""
    z = np.asarray(z, dtype=np.float64)
    return g - np.sum(g * z, axis=-1, keepdims=True) / np.sum(z * z, axis=-1, keepdims=True) * z


def cosine_rows(a, b, eps=1e-12):
    """Row-wise cosine; rows where either vector vanishes come back as NaN."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    ok = (na > eps) & (nb > eps)
    cos = np.full(a.shape[0], np.nan)
    cos[ok] = np.clip(np.sum(a[ok] * b[ok], axis=-1) / (na[ok] * nb[ok]), -1.0, 1.0)
    return cos


def cosine_grid(ts, n_grid=64, self_test=False, seed=0):
    z = latent_grid(ts, n_grid, seed)
    states = probe_states(ts, len(z))
    true_g = composed_latent_grad(ts, states, z)
    other = true_g if self_test else distilled_latent_grad(ts, states, z)
    if ts.config.geometry == "sphere":
        true_g, other = tangential(true_g, z), tangential(other, z)
    cos = cosine_rows(other, true_g)
    rows = [dict(cell=i, z=[float(v) for v in zi], cosine=_finite_or_none(c), defined=bool(np.isfinite(c)))
            for i, (zi, c) in enumerate(zip(z, cos))]
    defined = cos[np.isfinite(cos)]
    mean = float(defined.mean()) if defined.size else None
    return rows, mean


def lps_path_fd_error(checkpoint, n_states=4):
    """Finite-difference check of the actor gradient through pi_beta on a float64 copy."""
    ts = load_checkpoint(checkpoint, dtype="float64")
    if ts.phi is None or ts.config.agent not in ("LPS", "DSRL_NA"):
        return None
    states = probe_states(ts, n_states)

    def objective(phi):
        z = latent_actor_output(ts, phi, states)
        # the normalizer is stop-gradient, so it is left out of the comparison
        return normalized_q_loss(composed_q(ts, states, z), normalize=False)

    return float(ad.finite_diff_check(objective, ts.phi))


def norm_trajectory(metrics_path):
    _, records = read_metrics(metrics_path)
    keys = ("step", "latent_norm_mean", "latent_norm_max", "latent_sqnorm_dev_max")
    return [{k: r.get(k) for k in keys} for r in records]


def ood_map(ts, n_samples=1000, bins=20, seed=0):
    """Histogram of policy actions with a per-cell in-support flag (corner_bandit only)."""
    cfg = ts.config
    if cfg.env != "corner_bandit":
        return [], None
    preset = CORNER_PRESETS[cfg.corner_preset]
    centers = np.asarray(preset["centers"])
    rng = np.random.default_rng([seed, 3])
    acts = policy_chunks(ts, np.ones((n_samples, ts.obs_dim)), rng)[:, :ts.action_dim]
    counts, edges, _ = np.histogram2d(acts[:, 0], acts[:, 1], bins=bins, range=[[-1, 1], [-1, 1]])
    mids = 0.5 * (edges[:-1] + edges[1:])
    rows = []
    for i, x in enumerate(mids):
        for j, y in enumerate(mids):
            dist = np.min(np.linalg.norm(centers - [x, y], axis=1)) / preset["std"]
            rows.append(dict(x=float(x), y=float(y), count=int(counts[i, j]), in_support=bool(dist <= 3.0)))
    return rows, ood_fraction(acts, centers, preset["std"])


def run_diagnostics(checkpoint=None, out=".", metrics=None, n_grid=64, self_test=False, seed=0):
    """Cosine map, latent-norm trajectory and OOD map; each written as its own table."""
    if checkpoint is None and metrics is None:
        raise ValueError("diagnostics need a checkpoint, a metrics file, or both")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {}
    if checkpoint is not None:
        if not (Path(checkpoint) / "header.json").exists():
            raise FileNotFoundError(f"missing checkpoint {checkpoint}")
        ts = load_checkpoint(checkpoint)
        header = dict(agent=ts.kind, step=ts.step, config=ts.config.to_dict())
        _, self_mean = cosine_grid(ts, n_grid, self_test=True, seed=seed)
        summary.update(agent=ts.kind, step=ts.step, self_test_mean_cosine=self_mean)
        if ts.psi is not None or self_test:
            rows, mean = cosine_grid(ts, n_grid, self_test=self_test, seed=seed)
            _dump_lines(out / "cosine_grid.jsonl", dict(header, self_test=self_test), rows)
            summary.update(mean_cosine=mean, undefined_cells=sum(not r["defined"] for r in rows))
        summary["lps_path_fd_error"] = lps_path_fd_error(checkpoint)
        rows, frac = ood_map(ts, ts.config.ood_samples, seed=seed)
        if rows:
            _dump_lines(out / "ood_map.jsonl", header, rows)
            summary["ood_fraction"] = frac
    if metrics is not None:
        rows = norm_trajectory(metrics)
        _dump_lines(out / "norm_trajectory.jsonl", dict(source=Path(metrics).name), rows)
        devs = [r["latent_sqnorm_dev_max"] for r in rows if r["latent_sqnorm_dev_max"] is not None]
        summary["latent_sqnorm_dev_max"] = max(devs) if devs else None
    _dump_lines(out / "diagnostics.jsonl", dict(checkpoint_given=checkpoint is not None,
                                                metrics_given=metrics is not None), [summary])
    return summary


# --- aggregation ------------------------------------------------------------------

def summarize(values, n_boot=1000, confidence=0.95, seed=0):
    """Mean with a percentile-bootstrap confidence interval."""
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("nothing to summarize")
    rng = np.random.default_rng(seed)
    means = x[rng.integers(0, x.size, size=(n_boot, x.size))].mean(axis=1)
    tail = (1.0 - confidence) / 2 * 100
    lo, hi = np.percentile(means, [tail, 100 - tail])
    return dict(mean=float(x.mean()), ci_low=float(lo), ci_high=float(hi), n=int(x.size))
