import numpy as np
import pytest

from regiontsc.agent import (
    ABDQAgent,
    AgentConfig,
    EpsilonSchedule,
    ReplayBuffer,
    build_observation,
    compute_targets,
    greedy_actions,
    regional_reward,
    select_joint_action,
)
from regiontsc.net import Turn, make_grid
from regiontsc.neural import forward, init_params, masked_loss
from regiontsc.partition import Region, construct_regions, solve_min_dominating_set
from regiontsc.sim import FlowSpec, SimConfig, observe, reset

K, N_ACT = 5, 4
EMPTY = FlowSpec(vehicles=[])


def tiny_cfg(**kw):
    base = dict(trunk=(16, 12), value_hidden=8, adv_hidden=8, warmup=4, batch_size=4, seed=0)
    base.update(kw)
    return AgentConfig(**base)


def tiny_net(input_dim, seed=0):
    return init_params(input_dim, K, N_ACT, trunk=(10, 8), value_hidden=6, adv_hidden=6, seed=seed)


def queue_on(state, v, d, n):
    net = state.net
    k = next(l for l in net.lanes_of(net.incoming(v, d).key) if Turn.STRAIGHT in net.lanes[l].turns)
    for _ in range(n):
        state.add_vehicle(k, Turn.STRAIGHT)


def reference_targets(target_net, online_net, batch, gamma, mask):
    """Loop-by-loop evaluation of the activated-branch double target."""
    qt = forward(target_net, batch["next_obs"]).Q
    qo = forward(online_net, batch["next_obs"]).Q
    ys = []
    for b in range(len(batch["rewards"])):
        vals = []
        for k in range(K):
            if mask[b, k]:
                best = int(np.argmax(qo[b, k]))
                vals.append(qt[b, k, best])
        ys.append(batch["rewards"][b] + gamma * sum(vals) / len(vals))
    return np.array(ys)


def random_batch(rng, batch, dim, full=False):
    mask = np.ones((batch, K), bool) if full else rng.random((batch, K)) < 0.5
    mask[np.arange(batch), rng.integers(0, K, size=batch)] = True
    return {
        "obs": rng.normal(size=(batch, dim)),
        "actions": rng.integers(0, N_ACT, size=(batch, K)),
        "rewards": rng.normal(scale=5, size=batch),
        "next_obs": rng.normal(size=(batch, dim)),
        "masks": mask,
    }


# -- observations and rewards ----------------------------------------------------


def test_full_region_empty_observation():
    g = make_grid(3, 3)
    s = reset(g, EMPTY, SimConfig())
    region = Region("2-2", ("2-2", "1-2", "2-3", "3-2", "2-1"))
    obs = build_observation(s, region)
    assert np.array_equal(obs, np.tile(observe(s, "2-2"), 5))


def test_fictitious_slots_are_zero():
    g = make_grid(1, 3)
    s = reset(g, EMPTY, SimConfig())
    queue_on(s, "1-2", "N", 2)
    region = Region("1-2", ("1-2", None, "1-3", None, "1-1"))
    obs = build_observation(s, region).reshape(5, -1)
    assert not obs[1].any() and not obs[3].any()
    assert obs[0, :12].sum() == 2


def test_slot_order_matters():
    g = make_grid(1, 3)
    s = reset(g, EMPTY, SimConfig())
    queue_on(s, "1-3", "N", 1)
    a = build_observation(s, Region("1-2", ("1-2", None, "1-3", None, "1-1")))
    b = build_observation(s, Region("1-2", ("1-2", None, "1-1", None, "1-3")))
    assert not np.array_equal(a, b)


def test_regional_reward_sums_members_only():
    g = make_grid(1, 4)
    s = reset(g, EMPTY, SimConfig())
    region = Region("1-2", ("1-2", None, "1-3", None, "1-1"))
    assert regional_reward(s, region) == 0
    queue_on(s, "1-2", "N", 6)
    queue_on(s, "1-3", "S", 3)
    queue_on(s, "1-4", "S", 8)  # outside the region
    assert regional_reward(s, region) == -9


# -- action selection --------------------------------------------------------------


def test_greedy_tie_break_first_max():
    Q = np.array([[1.0, 5.0, 5.0, 2.0]] * K)
    assert greedy_actions(Q, [True] * K).tolist() == [1] * K
    assert greedy_actions(Q, [True, False, True, False, False]).tolist() == [1, 0, 1, 0, 0]


def test_eps_zero_is_deterministic_and_shift_invariant():
    net = tiny_net(7)
    x = np.random.default_rng(0).normal(size=7)
    mask = [True, True, False, True, True]
    rng = np.random.default_rng(0)
    a = select_joint_action(net, x, mask, 0.0, rng)
    assert np.array_equal(a, select_joint_action(net, x, mask, 0.0, rng))
    assert np.array_equal(a, greedy_actions(forward(net, x).Q[0], mask))
    net.arrays["ba2"][3] += 123.0
    assert np.array_equal(a, select_joint_action(net, x, mask, 0.0, rng))


def test_eps_one_uniform_frequencies():
    net = tiny_net(7)
    rng = np.random.default_rng(42)
    mask = [True, False, True, True, True]
    draws = np.array([select_joint_action(net, np.zeros(7), mask, 1.0, rng) for _ in range(10_000)])
    for k in (0, 2, 3, 4):
        freq = np.bincount(draws[:, k], minlength=4) / len(draws)
        assert np.all(np.abs(freq - 0.25) <= 0.02)
    assert np.all(draws[:, 1] == 0)


def test_eps_out_of_range():
    with pytest.raises(ValueError):
        select_joint_action(tiny_net(3), np.zeros(3), [True] * K, 1.5, np.random.default_rng())


def test_epsilon_schedule_endpoints():
    sched = EpsilonSchedule(1.0, 0.001, 20_000)
    assert sched(0) == 1.0
    assert sched(20_000) == 0.001 and sched(10**7) == 0.001
    assert sched(10_000) == pytest.approx(0.5005, abs=1e-15)
    vals = [sched(t) for t in range(0, 25_000, 500)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


# -- targets -----------------------------------------------------------------------


def test_gamma_zero_gives_reward():
    rng = np.random.default_rng(0)
    net = tiny_net(6)
    batch = random_batch(rng, 8, 6)
    assert np.array_equal(compute_targets(net, net, batch, 0.0), batch["rewards"])


def test_single_branch_hand_value():
    online = tiny_net(3, seed=1)
    target = tiny_net(3, seed=2)
    p = target.arrays
    for name in p:
        p[name][...] = 0.0
    p["bv2"][0] = 10.0  # every target-net Q equals 10
    batch = {"obs": np.zeros((1, 3)), "actions": np.zeros((1, K), int), "rewards": np.array([0.0]),
             "next_obs": np.ones((1, 3)), "masks": np.array([[False, False, True, False, False]])}
    assert compute_targets(target, online, batch, 0.9)[0] == pytest.approx(9.0, abs=1e-12)


@pytest.mark.parametrize("full", [False, True])
def test_targets_match_loop_reference(full):
    rng = np.random.default_rng(3)
    online, target = tiny_net(6, 1), tiny_net(6, 2)
    for _ in range(20):
        batch = random_batch(rng, 16, 6, full)
        ours = compute_targets(target, online, batch, 0.9)
        ref = reference_targets(target, online, batch, 0.9, batch["masks"])
        assert np.max(np.abs(ours - ref)) <= 1e-12


def test_all_true_mask_equals_unmasked_bdq():
    rng = np.random.default_rng(4)
    online, target = tiny_net(6, 1), tiny_net(6, 2)
    batch = random_batch(rng, 16, 6, full=True)
    masked = compute_targets(target, online, batch, 0.9, masked=True)
    plain = compute_targets(target, online, batch, 0.9, masked=False)
    assert np.max(np.abs(masked - plain)) <= 1e-12


def test_double_flag_uses_target_argmax():
    rng = np.random.default_rng(5)
    online, target = tiny_net(6, 1), tiny_net(6, 2)
    batch = random_batch(rng, 8, 6, full=True)
    qt = forward(target, batch["next_obs"]).Q
    expected = batch["rewards"] + 0.9 * qt.max(axis=2).mean(axis=1)
    got = compute_targets(target, online, batch, 0.9, double=False)
    assert np.max(np.abs(got - expected)) <= 1e-12


def test_idle_branch_independence():
    rng = np.random.default_rng(6)
    online, target = tiny_net(6, 1), tiny_net(6, 2)
    batch = random_batch(rng, 8, 6)
    batch["masks"][:, 4] = False
    batch["masks"][:, 0] = True
    y = compute_targets(target, online, batch, 0.9)
    # perturb idle-branch actions and the idle head's Q values
    batch2 = dict(batch, actions=batch["actions"].copy())
    batch2["actions"][:, 4] = (batch2["actions"][:, 4] + 1) % N_ACT
    target2 = target.copy()
    target2.arrays["ba2"][4] += np.array([3.0, -1.0, 0.5, 2.0])
    online2 = online.copy()
    online2.arrays["ba2"][4] += np.array([-2.0, 4.0, 0.0, 1.0])
    y2 = compute_targets(target2, online2, batch2, 0.9)
    assert np.array_equal(y, y2)
    l1 = masked_loss(forward(online, batch["obs"]).Q, batch["actions"], y, batch["masks"])[0]
    l2 = masked_loss(forward(online2, batch["obs"]).Q, batch2["actions"], y2, batch["masks"])[0]
    assert l1 == l2


def test_all_idle_mask_rejected():
    net = tiny_net(3)
    batch = {"obs": np.zeros((1, 3)), "actions": np.zeros((1, K), int), "rewards": np.zeros(1),
             "next_obs": np.zeros((1, 3)), "masks": np.zeros((1, K), bool)}
    with pytest.raises(ValueError):
        compute_targets(net, net, batch, 0.9)


# -- replay and learning -----------------------------------------------------------


def test_replay_capacity_and_ring():
    buf = ReplayBuffer(5, 2, K, seed=0)
    for i in range(8):
        buf.add([i, i], [0] * K, float(i), [i, i], [True] * K)
    assert len(buf) == 5
    assert sorted(buf.rewards[:5].tolist()) == [3, 4, 5, 6, 7]


def test_replay_sample_without_replacement_and_uniform():
    buf = ReplayBuffer(10, 1, K, seed=1)
    for i in range(10):
        buf.add([i], [0] * K, float(i), [i], [True] * K)
    counts = np.zeros(10)
    for _ in range(3000):
        r = buf.sample(4)["rewards"]
        assert len(set(r.tolist())) == 4
        counts[r.astype(int)] += 1
    assert np.all(np.abs(counts / counts.sum() - 0.1) < 0.01)
    with pytest.raises(ValueError):
        buf.sample(11)


def test_replay_grows_past_initial_allocation():
    buf = ReplayBuffer(10_000, 1, K)
    for i in range(5000):
        buf.add([i], [0] * K, float(i), [i], [True] * K)
    assert len(buf) == 5000 and buf.rewards[4999] == 4999


def test_learn_below_warmup_is_noop():
    agent = ABDQAgent(tiny_cfg(warmup=10), 6)
    before = agent.online.copy()
    for _ in range(9):
        agent.store(np.ones(6), [1] * K, -1.0, np.ones(6), [True] * K)
    assert agent.learn_step() is None
    assert agent.learn_steps == 0
    assert all(np.array_equal(before.arrays[k], agent.online.arrays[k]) for k in before.arrays)


def test_single_transition_regression_converges():
    agent = ABDQAgent(tiny_cfg(warmup=1, batch_size=1, lr=1e-3, gamma=0.0), 6)
    obs = np.linspace(-1, 1, 6)
    agent.store(obs, [2, 0, 1, 3, 0], 5.0, obs, [True, False, True, True, True])
    losses = [agent.learn_step() for _ in range(100)]
    assert all(b <= a for a, b in zip(losses[5:], losses[6:]))
    assert losses[-1] < 0.5 * losses[0]


def test_learning_is_seeded():
    def run():
        agent = ABDQAgent(tiny_cfg(), 6)
        rng = np.random.default_rng(0)
        for _ in range(20):
            agent.store(rng.normal(size=6), rng.integers(0, 4, K), rng.normal(), rng.normal(size=6),
                        [True] * K)
        return [agent.learn_step() for _ in range(10)]

    assert run() == run()


def test_shared_agent_across_regions():
    """Transitions from one region change the Q-values another region sees."""
    g = make_grid(4, 4)
    config = construct_regions(g, solve_min_dominating_set(g))
    a, b = config.regions[0], config.regions[1]
    s = reset(g, EMPTY, SimConfig())
    dim = build_observation(s, a).size
    agent = ABDQAgent(tiny_cfg(), dim)
    queue_on(s, a.center, "N", 4)
    obs_a = build_observation(s, a)
    obs_b = build_observation(s, b)
    q_before = forward(agent.online, obs_b).Q.copy()
    for _ in range(8):
        agent.store(obs_a, [1] * K, -20.0, obs_a, a.mask)
    agent.learn_step()
    assert not np.array_equal(q_before, forward(agent.online, obs_b).Q)
    assert len(agent.buffer) == 8


def test_config_roundtrip_and_unknown_keys():
    cfg = AgentConfig(trunk=(32, 16), gamma=0.99)
    assert AgentConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        AgentConfig.from_dict({"learning_rate": 1.0})


def test_default_hyperparameters():
    cfg = AgentConfig()
    assert (cfg.lr, cfg.batch_size, cfg.tau, cfg.buffer_size) == (1e-4, 32, 0.001, 200_000)
    assert (cfg.eps_max, cfg.eps_min, cfg.eps_decay_steps) == (1.0, 0.001, 20_000)


def test_obs_scale_applies_to_network_input_only():
    scaled = ABDQAgent(tiny_cfg(obs_scale=0.1), 6)
    plain = ABDQAgent(tiny_cfg(), 6)
    x = np.arange(6.0)
    mask = [True] * K
    assert np.array_equal(scaled.act(x, mask, 0.0), plain.act(0.1 * x, mask, 0.0))
    scaled.store(x, [1] * K, -1.0, x, mask)
    assert np.array_equal(scaled.buffer.obs[0], x.astype(np.float32))


