"""Experiment configuration with preset, file and flag layering."""
import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

AGENT_KINDS = ("LPS", "QC_MFQL", "QC_FQL", "DSRL_NA", "LPSD", "BC_MF", "BC_FM")

# Geometry each agent uses unless overridden.
DEFAULT_GEOMETRY = {
    "LPS": "sphere", "DSRL_NA": "sphere", "BC_MF": "sphere", "BC_FM": "sphere",
    "QC_MFQL": "normal", "QC_FQL": "normal", "LPSD": "normal",
}
DEFAULT_BACKBONE = {
    "LPS": "meanflow", "QC_MFQL": "meanflow", "LPSD": "meanflow", "BC_MF": "meanflow",
    "QC_FQL": "flow_matching", "DSRL_NA": "flow_matching", "BC_FM": "flow_matching",
}

NETWORK_PRESETS = {
    "toy": dict(policy_widths=(64, 64), critic_widths=(64, 64), actor_widths=(64, 64),
                train_steps=50_000, eval_interval=1_000),
    "paper": dict(policy_widths=(512,) * 4, critic_widths=(256,) * 4, actor_widths=(256,) * 2,
                  train_steps=1_000_000, eval_interval=10_000),
}

# Chunk length per environment: single-step tasks can only hold h = 1.
DEFAULT_HORIZON = {"pointmass_nav": 5, "corner_bandit": 1, "two_mode": 1}

ALPHA_GRID = (0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0, 300.0)


@dataclass(frozen=True)
class ExperimentConfig:
    agent: str = "LPS"
    env: str = "pointmass_nav"
    dataset: str = ""
    seed: int = 0
    data_seed: int = 0
    preset: str = "toy"
    batch_size: int = 256
    gamma: float = 0.99
    tau: float = 5e-3
    lr: float = 3e-4
    lr_schedule: str = "constant"
    n_heads: int = 2
    horizon: int = None
    flow_steps: int = 10
    train_steps: int = None
    eval_interval: int = None
    eval_episodes: int = 50
    alpha: float = 1.0
    base_loss_scale: float = 1.0
    geometry: str = None
    backbone: str = None
    reformulated: bool = True
    p_equal: float = 0.5
    activation: str = "gelu"
    time_features: int = 0
    policy_widths: tuple = None
    critic_widths: tuple = None
    actor_widths: tuple = None
    target_agg: str = "min"
    actor_agg: str = "mean"
    q_normalization: str = "actor"
    dtype: str = "float32"
    n_demos: int = 200
    demo_profile: str = "teleop"
    corner_preset: str = "default"
    ood_samples: int = 1000
    record_wall_time: bool = False

    def resolved(self):
        """Fill every ``None`` field from the network preset and agent defaults."""
        if self.agent not in AGENT_KINDS:
            raise ValueError(f"unknown agent {self.agent!r}; choose from {AGENT_KINDS}")
        if self.preset not in NETWORK_PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        updates = {k: v for k, v in NETWORK_PRESETS[self.preset].items() if getattr(self, k) is None}
        if self.geometry is None:
            updates["geometry"] = DEFAULT_GEOMETRY[self.agent]
        if self.backbone is None:
            updates["backbone"] = DEFAULT_BACKBONE[self.agent]
        if self.horizon is None:
            updates["horizon"] = DEFAULT_HORIZON.get(self.env, 5)
        cfg = replace(self, **updates)
        for name in ("policy_widths", "critic_widths", "actor_widths"):
            cfg = replace(cfg, **{name: tuple(int(w) for w in getattr(cfg, name))})
        if cfg.alpha <= 0 and cfg.agent in ("QC_MFQL", "QC_FQL", "LPSD"):
            raise ValueError("alpha must be positive")
        checks = [
            (cfg.env in DEFAULT_HORIZON, f"unknown env {cfg.env!r}"),
            (cfg.horizon >= 1 and cfg.batch_size >= 1, "horizon and batch_size must be >= 1"),
            (cfg.train_steps >= 1 and cfg.eval_interval >= 1, "train_steps and eval_interval must be >= 1"),
            (cfg.eval_episodes >= 1 and cfg.n_demos >= 1, "eval_episodes and n_demos must be >= 1"),
            (0.0 < cfg.gamma <= 1.0, "gamma must lie in (0, 1]"),
            (0.0 < cfg.tau <= 1.0, "tau must lie in (0, 1]"),
            (cfg.lr > 0 and cfg.base_loss_scale > 0, "lr and base_loss_scale must be positive"),
            (cfg.dtype in ("float32", "float64"), "dtype must be float32 or float64"),
            (cfg.q_normalization in ("actor", "critic", "none"),
             "q_normalization must be 'actor', 'critic' or 'none'"),
        ]
        for ok, message in checks:
            if not ok:
                raise ValueError(message)
        return cfg

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def config_fields():
    return {f.name: f for f in fields(ExperimentConfig)}


def _coerce(name, value):
    f = config_fields()[name]
    default = f.default
    if value is None:
        return None
    if name.endswith("_widths"):
        if isinstance(value, str):
            value = [v for v in value.replace("x", ",").split(",") if v]
        return tuple(int(v) for v in value)
    if isinstance(default, bool):
        if isinstance(value, str):
            key = value.strip().lower()
            if key not in ("1", "true", "yes", "on", "0", "false", "no", "off"):
                raise ValueError(f"{name} expects a boolean, got {value!r}")
            return key in ("1", "true", "yes", "on")
        return bool(value)
    if isinstance(default, int) or name in ("train_steps", "eval_interval", "horizon"):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value) if value is not None else None


def load_config_file(path):
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        import yaml
        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    unknown = set(data) - set(config_fields())
    if unknown:
        raise ValueError(f"{path}: unknown config keys {sorted(unknown)}")
    return data


def build_config(file_path=None, overrides=None, base=None):
    """Defaults < config file < explicit overrides."""
    values = {}
    if file_path:
        values.update(load_config_file(file_path))
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    base = base or ExperimentConfig()
    return replace(base, **{k: _coerce(k, v) for k, v in values.items()}).resolved()
