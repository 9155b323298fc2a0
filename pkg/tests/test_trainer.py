import csv

import numpy as np
import pytest

from mddl.core import TransitionArrays
from mddl.qfunc import QModel
from mddl.trainer import (ConfigError, TrainConfig, UsageError, combined_loss, combined_step,
                          il_loss, rl_loss, train, train_variant, write_loss_trace)

D, N, T = 4, 8, 3


def make_batch(rng, n=12, strategy=None, terminal_frac=0.3) -> TransitionArrays:
    if strategy is None:
        strategy = rng.random(n) < 0.5
    return TransitionArrays(
        states=rng.normal(size=(n, D)),
        t=rng.integers(T, size=n),
        actions=rng.integers(N, size=n),
        rewards=rng.uniform(0, 2, size=n),
        next_states=rng.normal(size=(n, D)),
        terminal=rng.random(n) < terminal_frac,
        is_strategy=np.asarray(strategy, dtype=bool) & np.ones(n, dtype=bool),
        episode_ids=np.arange(n),
    )


def wer_tab(rng):
    return rng.uniform(0, 0.5, size=(T, N))


def constant_model(value, n_out=N, seed=0):
    m = QModel((D, 5, n_out), seed=seed)
    m.flat[:] = 0.0
    m.params[-1][:] = value
    m.sync_target()
    return m


# -- imitation loss -------------------------------------------------------------

def test_il_single_sample_hand_value():
    m = constant_model(0.0, n_out=2)
    batch = make_batch(np.random.default_rng(0), n=1, strategy=[True])
    batch = TransitionArrays(batch.states, np.array([0]), np.array([0]), batch.rewards,
                             batch.next_states, batch.terminal, batch.is_strategy,
                             batch.episode_ids)
    wtab = np.array([[0.3, 0.7]])
    # equal Q values: soft estimate is the mean WER 0.5
    loss, _ = il_loss(m, batch, wtab, beta=1.0)
    assert loss == pytest.approx(0.04, abs=1e-15)


def test_il_beta_zero_equal_wers_has_no_gradient():
    rng = np.random.default_rng(1)
    m = QModel((D, 6, N), seed=1)
    batch = make_batch(rng, strategy=np.ones(12, dtype=bool))
    wtab = np.full((T, N), 0.25)
    loss, grads = il_loss(m, batch, wtab, beta=0.0)
    assert loss == pytest.approx(0.0, abs=1e-30)
    assert all(np.all(g == 0) for g in grads)


def test_il_perfect_imitation_fixed_point():
    rng = np.random.default_rng(2)
    m = QModel((D, 6, N), seed=2)
    batch = make_batch(rng, strategy=np.ones(12, dtype=bool))
    batch = TransitionArrays(batch.states, batch.t, np.zeros(12, dtype=np.int64), *[
        getattr(batch, f) for f in ("rewards", "next_states", "terminal", "is_strategy",
                                    "episode_ids")])
    wtab = np.full((T, N), 0.1)
    loss, grads = il_loss(m, batch, wtab, beta=10.0)
    # softmax weights sum to one only up to rounding
    assert loss < 1e-30
    assert all(np.abs(g).max() < 1e-14 for g in grads)


def test_il_rejects_random_rows():
    rng = np.random.default_rng(3)
    with pytest.raises(UsageError):
        il_loss(QModel((D, 6, N)), make_batch(rng, strategy=[False] * 12), wer_tab(rng), 10.0)


# -- Bellman loss ---------------------------------------------------------------

def test_rl_single_sample_hand_value():
    m = constant_model(2.0)
    rng = np.random.default_rng(4)
    b = make_batch(rng, n=1, strategy=[False], terminal_frac=0.0)
    b = TransitionArrays(b.states, b.t, b.actions, np.array([1.0]), b.next_states,
                         np.array([False]), b.is_strategy, b.episode_ids)
    loss, _ = rl_loss(m, b, gamma=0.9)
    assert loss == pytest.approx(0.64, abs=1e-12)


def test_rl_terminal_at_reward_contributes_nothing():
    m = constant_model(1.5)
    rng = np.random.default_rng(5)
    b = make_batch(rng, n=3, strategy=[False] * 3)
    b = TransitionArrays(b.states, b.t, b.actions, np.full(3, 1.5), b.next_states,
                         np.ones(3, dtype=bool), b.is_strategy, b.episode_ids)
    loss, grads = rl_loss(m, b, gamma=0.9)
    assert loss == 0.0 and all(np.all(g == 0) for g in grads)


def test_rl_gamma_zero_is_regression():
    rng = np.random.default_rng(6)
    m = QModel((D, 6, N), seed=6)
    b = make_batch(rng, strategy=[False] * 12)
    loss, _ = rl_loss(m, b, gamma=0.0)
    q = m.forward(b.states)[np.arange(12), b.actions]
    assert loss == pytest.approx(np.mean((b.rewards - q) ** 2), rel=1e-12)


def test_rl_gradient_ignores_target_network():
    rng = np.random.default_rng(7)
    m = QModel((D, 6, N), seed=7, sync_at_init=False)
    b = make_batch(rng, strategy=[False] * 12)
    _, before = rl_loss(m, b, gamma=0.9)
    target_before = m.target_flat.copy()
    m2 = m.copy()
    m2.target_flat[:] += 0.5
    _, after = rl_loss(m2, b, gamma=0.9)
    assert np.array_equal(m.target_flat, target_before)
    # the target only enters through y, so the gradient changes but stays defined
    assert len(after) == len(before)


def test_rl_rejects_strategy_rows():
    rng = np.random.default_rng(8)
    with pytest.raises(UsageError):
        rl_loss(QModel((D, 6, N)), make_batch(rng, strategy=[True] * 12), 0.9)


# -- gating -----------------------------------------------------------------------

def _perturbed(batch, mask, **fields):
    values = {f: getattr(batch, f).copy() for f in batch.__dataclass_fields__}
    for name, new in fields.items():
        values[name][mask] = new[mask]
    return TransitionArrays(**values)


@pytest.mark.parametrize("seed", range(5))
def test_gating_is_exact_per_source(seed):
    rng = np.random.default_rng(seed)
    m = QModel((D, 6, 6, N), seed=seed, sync_at_init=False)
    wtab = wer_tab(rng)
    batch = make_batch(rng, n=20)
    cfg = TrainConfig(alpha1=0.7, alpha2=1.3)
    ref_losses, ref = combined_loss(m, batch, cfg, wtab)

    # Imitation inputs of random rows must not matter at all.
    other = make_batch(rng, n=20)
    r = ~batch.is_strategy
    mod = _perturbed(batch, r, t=other.t)
    losses, grads = combined_loss(m, mod, cfg, wtab)
    assert losses == ref_losses and all(np.array_equal(a, b) for a, b in zip(grads, ref))

    # Bellman inputs of strategy rows must not matter at all.
    s = batch.is_strategy
    mod = _perturbed(batch, s, rewards=other.rewards, next_states=other.next_states,
                     terminal=other.terminal)
    losses, grads = combined_loss(m, mod, cfg, wtab)
    assert losses == ref_losses and all(np.array_equal(a, b) for a, b in zip(grads, ref))


def test_combined_equals_weighted_parts():
    rng = np.random.default_rng(11)
    m = QModel((D, 6, N), seed=11)
    wtab = wer_tab(rng)
    batch = make_batch(rng, n=30)
    cfg = TrainConfig(alpha1=0.4, alpha2=2.5)
    losses, grads = combined_loss(m, batch, cfg, wtab)
    l_rl, g_rl = rl_loss(m, batch.take(~batch.is_strategy), cfg.gamma)
    l_il, g_il = il_loss(m, batch.take(batch.is_strategy), wtab, cfg.beta)
    assert losses.total == pytest.approx(0.4 * l_rl + 2.5 * l_il, rel=1e-12)
    for g, a, b in zip(grads, g_rl, g_il):
        assert np.allclose(g, 0.4 * a + 2.5 * b, rtol=1e-10, atol=1e-14)


def test_single_source_batches_reduce_to_one_loss():
    rng = np.random.default_rng(12)
    m = QModel((D, 6, N), seed=12)
    wtab = wer_tab(rng)
    strat = make_batch(rng, strategy=[True] * 12)
    losses, _ = combined_loss(m, strat, TrainConfig(), wtab)
    assert losses.rl == 0.0 and losses.total == pytest.approx(il_loss(m, strat, wtab, 10.0)[0])
    rand = make_batch(rng, strategy=[False] * 12)
    losses, _ = combined_loss(m, rand, TrainConfig(), wtab)
    assert losses.il == 0.0 and losses.total == pytest.approx(rl_loss(m, rand, 0.9)[0])


def test_rl_all_routing_ignores_sources():
    rng = np.random.default_rng(13)
    m = QModel((D, 6, N), seed=13)
    batch = make_batch(rng, strategy=[True] * 12)
    losses, _ = combined_loss(m, batch, TrainConfig(alpha2=0.0), wer_tab(rng), routing="rl_all")
    assert losses.total == pytest.approx(rl_loss(m, batch, 0.9, enforce_source=False)[0])


def test_zero_alphas_only_advance_step():
    rng = np.random.default_rng(14)
    m = QModel((D, 6, N), seed=14)
    before = m.flat.copy()
    combined_step(m, make_batch(rng), TrainConfig(alpha1=0.0, alpha2=0.0), wer_tab(rng))
    assert np.array_equal(m.flat, before) and m.step == 1


def test_empty_batch_rejected():
    rng = np.random.default_rng(15)
    with pytest.raises(UsageError):
        combined_loss(QModel((D, 6, N)), make_batch(rng).take(np.arange(0)), TrainConfig(),
                      wer_tab(rng))


def test_target_sync_schedule():
    rng = np.random.default_rng(16)
    m = QModel((D, 6, N), seed=16)
    cfg = TrainConfig(target_sync_period=3)
    wtab = wer_tab(rng)
    for step in range(1, 7):
        combined_step(m, make_batch(rng), cfg, wtab)
        synced = np.array_equal(m.flat, m.target_flat)
        assert synced == (step % 3 == 0)


# -- training loop ----------------------------------------------------------------

def _datasets():
    from mddl.collect import collect_random
    from mddl.feedsim import EnvConfig
    from mddl.core import with_source, Source
    env = EnvConfig()
    d_r = collect_random(env, 30, seed=1)
    d_m = with_source(collect_random(env, 30, seed=2, first_episode_id=30), Source.STRATEGY)
    return env, d_m, d_r


def test_train_zero_steps_is_identity():
    env, d_m, d_r = _datasets()
    m = QModel.for_env(env.state_dim, env.n_actions, (16, 16), seed=0)
    before = m.flat.copy()
    from mddl.feedsim import position_table
    m, trace = train(m, d_m, d_r, TrainConfig(steps=0), position_table(env), T_max=env.T_max)
    assert trace == [] and np.array_equal(m.flat, before)


def test_train_deterministic_and_finite(tmp_path):
    from mddl.feedsim import position_table
    env, d_m, d_r = _datasets()
    cfg = TrainConfig(steps=40, batch_size=32, seed=3)
    runs = []
    for _ in range(2):
        m = QModel.for_env(env.state_dim, env.n_actions, (16, 16), seed=0)
        m, trace = train(m, d_m, d_r, cfg, position_table(env), T_max=env.T_max)
        runs.append((m.flat.copy(), trace))
    assert np.array_equal(runs[0][0], runs[1][0]) and runs[0][1] == runs[1][1]
    assert all(np.isfinite(runs[0][1]))
    write_loss_trace(tmp_path / "trace.csv", runs[0][1])
    rows = list(csv.reader(open(tmp_path / "trace.csv")))
    assert rows[0] == ["step", "loss"] and len(rows) == 41
    assert float(rows[-1][1]) == runs[0][1][-1]


def test_train_dimension_mismatch():
    from mddl.feedsim import position_table
    env, d_m, d_r = _datasets()
    m = QModel((5, 8, 32))
    with pytest.raises(ConfigError):
        train(m, d_m, d_r, TrainConfig(steps=1), position_table(env), T_max=env.T_max)


def test_variant_requires_its_data():
    from mddl.feedsim import position_table
    env, d_m, d_r = _datasets()
    m = QModel.for_env(env.state_dim, env.n_actions, (8,), seed=0)
    with pytest.raises(UsageError):
        train_variant("mixed_rl", m, d_m, None, TrainConfig(steps=1), position_table(env),
                      T_max=env.T_max)
    with pytest.raises(UsageError):
        train_variant("bogus", m, d_m, d_r, TrainConfig(steps=1), position_table(env))


def test_random_rl_variant_equals_plain_dqn():
    from mddl.feedsim import position_table
    env, d_m, d_r = _datasets()
    cfg = TrainConfig(steps=15, batch_size=16, seed=1)
    a = QModel.for_env(env.state_dim, env.n_actions, (8,), seed=0)
    b = a.copy()
    a, _ = train_variant("random_rl", a, d_m, d_r, cfg, position_table(env), T_max=env.T_max)
    b, _ = train(b, None, d_r, cfg.replace(alpha2=0.0), position_table(env), T_max=env.T_max,
                 routing="gated")
    assert np.array_equal(a.flat, b.flat)


@pytest.mark.parametrize("kw", [{"alpha1": -1}, {"beta": -0.1}, {"gamma": 1.5},
                                {"sampler": "lifo"}, {"routing": "x"}])
def test_invalid_train_config(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)
