"""Latent priors and actor output heads.

The default geometry is the sphere of radius ``sqrt(d)``: both the base
policy's prior and the latent actor's outputs live on it. ``normal`` and
``truncated`` exist for the geometry ablation.
"""
import numpy as np

from . import autodiff as ad

GEOMETRIES = ("sphere", "normal", "truncated")
TRUNCATION = 2.0
MIN_LOGIT_NORM = 1e-12


class DegenerateLatentError(ValueError):
    """Actor logits too close to zero to project onto the sphere."""


def _check_geometry(geometry):
    if geometry not in GEOMETRIES:
        raise ValueError(f"unknown latent geometry {geometry!r}; expected one of {GEOMETRIES}")


def sample_sphere(d, rng, size=None):
    """Uniform draws from the sphere of radius sqrt(d); shape ``(d,)`` or ``(size, d)``."""
    if d < 1:
        raise ValueError("d must be >= 1")
    shape = (d,) if size is None else (size, d)
    eps = rng.standard_normal(shape)
    norms = np.linalg.norm(eps, axis=-1, keepdims=True)
    while np.any(norms == 0.0):
        bad = (norms == 0.0)[..., 0]
        eps[bad] = rng.standard_normal(eps[bad].shape)
        norms = np.linalg.norm(eps, axis=-1, keepdims=True)
    return np.sqrt(d) * eps / norms


def _truncated_normal(shape, rng):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > TRUNCATION
    while np.any(bad):
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > TRUNCATION
    return out


def sample_prior(geometry, d, rng, size=None):
    _check_geometry(geometry)
    if geometry == "sphere":
        return sample_sphere(d, rng, size)
    shape = (d,) if size is None else (size, d)
    if geometry == "normal":
        return rng.standard_normal(shape)
    return _truncated_normal(shape, rng)


def project_sphere(logits):
    """Scale each row of ``logits`` to norm sqrt(d). Differentiable for Tensor inputs."""
    raw = ad.value_of(logits)
    d = raw.shape[-1]
    if np.any(np.linalg.norm(raw, axis=-1) <= MIN_LOGIT_NORM):
        raise DegenerateLatentError("latent actor produced a (near) zero logit vector")
    if isinstance(logits, (ad.Tensor, ad.Dual)):
        return ad.mul(ad.div(logits, ad.norm(logits)), float(np.sqrt(d)))
    raw = np.asarray(raw)
    return raw / np.linalg.norm(raw, axis=-1, keepdims=True) * np.sqrt(d)


def actor_head(geometry, logits):
    """Map raw actor outputs into the latent space of ``geometry``."""
    _check_geometry(geometry)
    if geometry == "sphere":
        return project_sphere(logits)
    if geometry == "normal":
        return logits
    return ad.mul(ad.tanh(logits), TRUNCATION)
