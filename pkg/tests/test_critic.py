import numpy as np
import pytest

from lps import autodiff as ad
from lps.critic import (
    CriticEnsemble, aggregate, chunk_return, chunk_returns, critic_loss, critic_objective, q_value, td_targets,
)
from lps.envs import ChunkBatch


def test_chunk_return_examples():
    assert chunk_return([1, 2, 3], 1.0) == 6
    assert chunk_return([-1] * 5, 0.99) == pytest.approx(-4.90099501, abs=1e-12)
    assert chunk_return([2.5], 0.7) == 2.5
    with pytest.raises(ValueError):
        chunk_return([], 0.9)
    with pytest.raises(ValueError):
        chunk_return([1.0], 0.0)


def test_chunk_returns_rowwise(rng):
    r = rng.standard_normal((20, 5))
    np.testing.assert_allclose(chunk_returns(r, 0.95), [chunk_return(row, 0.95) for row in r], atol=1e-13)


def test_aggregate():
    heads = [np.array([-2.0]), np.array([-4.0])]
    assert aggregate(heads, "min")[0] == -4.0
    assert aggregate(heads, "mean")[0] == -3.0
    assert aggregate(heads[:1], "mean")[0] == -2.0
    with pytest.raises(ValueError):
        aggregate(heads, "max")


def fake_ensemble(values, state_dim=1, chunk_dim=1):
    """Heads that output constants: zero weights and a bias per head."""
    ens = CriticEnsemble(state_dim, chunk_dim, (3,), n_heads=len(values)).init(np.random.default_rng(0))
    for head, v in zip(ens.online, values):
        for p in head:
            p[...] = 0.0
        head[-1][...] = v
    ens.target = [[p.copy() for p in head] for head in ens.online]
    return ens


def test_single_head_ignores_mode(rng):
    ens = CriticEnsemble(2, 3, (4,), n_heads=1).init(rng)
    s, a = rng.standard_normal((5, 2)), rng.standard_normal((5, 3))
    np.testing.assert_array_equal(q_value(ens, s, a, "min"), q_value(ens, s, a, "mean"))


def test_batched_equals_per_sample(rng):
    ens = CriticEnsemble(2, 3, (8, 8), n_heads=2).init(rng)
    s, a = rng.standard_normal((6, 2)), rng.standard_normal((6, 3))
    batched = q_value(ens, s, a, "min")
    single = [q_value(ens, s[i:i + 1], a[i:i + 1], "min")[0] for i in range(6)]
    np.testing.assert_allclose(batched, single, rtol=1e-13, atol=1e-14)


def test_td_examples():
    ens = fake_ensemble([-10.0, -8.0])
    one = np.ones((1, 1))
    y = td_targets(ens, one, one, np.array([-1.0]), np.array([1.0]), 0.99, 1)
    assert y[0] == pytest.approx(-10.9, abs=1e-12)
    y = td_targets(ens, one, one, np.array([-3.0]), np.array([0.0]), 0.99, 1)
    assert y[0] == -3.0
    ens = fake_ensemble([-50.0, -50.0])
    R = chunk_return([-1.0] * 5, 0.99)
    y = td_targets(ens, one, one, np.array([R]), np.array([1.0]), 0.99, 5)
    assert y[0] == pytest.approx(-52.45049751, abs=1e-8)


def test_h1_is_one_step_td(rng):
    ens = CriticEnsemble(2, 2, (6,), n_heads=2).init(rng)
    s, a, s2, a2 = (rng.standard_normal((8, 2)) for _ in range(4))
    r = rng.standard_normal(8)
    mask = (rng.uniform(size=8) < 0.7).astype(float)
    y = td_targets(ens, s2, a2, chunk_returns(r[:, None], 0.9), mask, 0.9, 1)
    q_next = np.minimum(*[q_value(ens, s2, a2, "mean", use_target=True) * 0 + h
                          for h in ens.heads(ens.target, s2, a2)])
    np.testing.assert_allclose(y, r + 0.9 * mask * q_next, atol=1e-14)


def test_critic_loss_gradient_and_target_untouched(rng):
    ens = CriticEnsemble(2, 3, (5,), n_heads=2).init(rng)
    batch = ChunkBatch(rng.standard_normal((6, 2)), rng.standard_normal((6, 3)), rng.standard_normal(6),
                       rng.standard_normal((6, 2)), np.ones(6))
    next_a = rng.standard_normal((6, 3))
    before = [p.copy() for head in ens.target for p in head]
    loss = critic_loss(ens, batch, next_a, 0.99, 5)
    assert np.isfinite(loss)
    assert all(np.array_equal(a, b) for a, b in zip(before, [p for h in ens.target for p in h]))
    y = td_targets(ens, batch.next_states, next_a, batch.returns, batch.mask, 0.99, 5)
    err = ad.finite_diff_check(lambda heads: critic_objective(ens, heads, batch.states, batch.chunks, y),
                               ens.online)
    assert err < 1e-4


def test_nan_target_rejected():
    ens = fake_ensemble([np.nan, 0.0])
    one = np.ones((1, 1))
    with pytest.raises(FloatingPointError):
        td_targets(ens, one, one, np.zeros(1), np.ones(1), 0.99, 1)


def test_ensemble_needs_a_head():
    with pytest.raises(ValueError):
        CriticEnsemble(1, 1, n_heads=0)
