"""MLPs, Adam and Polyak averaging over flat lists of numpy arrays.

A parameter set is a list ``[W0, b0, W1, b1, ...]``. Weights have shape
``(fan_in, fan_out)`` and act on row-batched inputs.
"""
import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad

ACTIVATIONS = {"gelu": ad.gelu, "relu": ad.relu}


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_widths: tuple = (64, 64)
    output_dim: int = 1
    activation: str = "gelu"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        dims = (self.input_dim, *self.hidden_widths, self.output_dim)
        if any(int(d) < 1 for d in dims):
            raise ValueError(f"all layer sizes must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def layer_dims(self):
        return (self.input_dim, *self.hidden_widths, self.output_dim)


def init_mlp(spec, rng, dtype=np.float64):
    """He-uniform fan-in weights, zero biases."""
    params = []
    dims = spec.layer_dims
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
        params.append(np.zeros(fan_out, dtype=dtype))
    return params


def mlp_forward(params, x, activation="gelu"):
    """Affine/activation stack with a linear last layer.

    Works on arrays, ``Tensor`` and ``Dual`` inputs alike.
    """
    act = ACTIVATIONS[activation]
    n_layers = len(params) // 2
    in_dim = ad.value_of(params[0]).shape[0]
    if x.shape[-1] != in_dim:
        raise ValueError(f"input has {x.shape[-1]} features, network expects {in_dim}")
    h = x
    for i in range(n_layers):
        h = ad.affine(h, params[2 * i], params[2 * i + 1])
        if i < n_layers - 1:
            h = act(h)
    return h


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    schedule: str = "constant"
    total_steps: int = 1

    def current_lr(self):
        if self.schedule == "constant":
            return self.learning_rate
        if self.schedule == "cosine":
            frac = min(self.step, self.total_steps) / max(self.total_steps, 1)
            return self.learning_rate * 0.5 * (1.0 + np.cos(np.pi * frac))
        raise ValueError(f"unknown schedule {self.schedule!r}")


def adam_init(params, learning_rate=3e-4, **kwargs):
    return AdamState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        learning_rate=learning_rate,
        **kwargs,
    )


def adam_step(state, params, grads):
    """One bias-corrected Adam update. Returns ``(new_state, new_params)``."""
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ValueError("gradient shapes do not match parameters")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient passed to adam_step")
    lr = state.current_lr()
    step = state.step + 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        new_m.append(m)
        new_v.append(v)
        new_p.append((p - lr * update).astype(p.dtype, copy=False))
    return replace(state, m=new_m, v=new_v, step=step), new_p


def polyak_update(target, online, tau):
    """``(1 - tau) * target + tau * online`` for every array."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    if len(target) != len(online) or any(a.shape != b.shape for a, b in zip(target, online)):
        raise ValueError("target and online parameter shapes differ")
    if tau == 1.0:
        return [np.array(o, copy=True) for o in online]
    return [((1.0 - tau) * t + tau * o).astype(t.dtype, copy=False) for t, o in zip(target, online)]


# --- checkpoint files -------------------------------------------------------

WEIGHTS_MAGIC = b"LPSW"
WEIGHTS_VERSION = 1


def write_params(fh, arrays):
    fh.write(WEIGHTS_MAGIC)
    fh.write(struct.pack("<II", WEIGHTS_VERSION, len(arrays)))
    for a in arrays:
        a = np.asarray(a)
        fh.write(struct.pack("<I", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
        fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_params(fh, dtype=np.float32):
    magic = fh.read(4)
    if magic != WEIGHTS_MAGIC:
        raise ValueError(f"bad weights magic {magic!r}")
    version, count = struct.unpack("<II", fh.read(8))
    if version != WEIGHTS_VERSION:
        raise ValueError(f"unsupported weights version {version}")
    arrays = []
    for _ in range(count):
        (rank,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
        n = int(np.prod(shape)) if rank else 1
        buf = fh.read(4 * n)
        if len(buf) != 4 * n:
            raise ValueError("truncated weights file")
        arrays.append(np.frombuffer(buf, dtype="<f4").reshape(shape).astype(dtype))
    return arrays


def save_params(path, arrays):
    with open(path, "wb") as fh:
        write_params(fh, arrays)


def load_params(path, dtype=np.float32):
    with open(path, "rb") as fh:
        return read_params(fh, dtype)


def params_to_bytes(arrays):
    buf = io.BytesIO()
    write_params(buf, arrays)
    return buf.getvalue()
