import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from partition_hrl.envs import (AGENT, DOWN, GOAL, GRID_SPECS, HAS_KEY, KEY, LEFT, RIGHT, UP, WALL, EpisodeOver,
                                GridSpec, GridState, GridWorld, MountainCar, ReplayMemory, collect_trajectories,
                                energy_pumping_policy, enumerate_states, make_env, mountaincar_step,
                                random_policy, sample_batch, task_free_view)


def test_keydoor_layouts_start_at_one_one():
    for name in ("KeyDoor0", "KeyDoor", "NineRooms1", "NineRooms2", "NineRooms3", "FourRooms"):
        for seed in (0, 5, 99):
            env = make_env(name)
            env.reset(seed=seed)
            assert env.state[:2] == (1, 1)


def test_grid_sizes():
    assert (GRID_SPECS["KeyDoor0"].width, GRID_SPECS["KeyDoor0"].height) == (10, 10)
    assert (GRID_SPECS["NineRooms0"].width, GRID_SPECS["NineRooms0"].height) == (19, 19)
    assert GRID_SPECS["NineRooms0"].n_rooms == 9
    assert GRID_SPECS["KeyDoor"].max_steps == 40
    assert all(GRID_SPECS[f"NineRooms{i}"].max_steps == 200 for i in (1, 2, 3))


def test_nine_rooms_reset_is_deterministic_per_seed():
    a, b = make_env("NineRooms0"), make_env("NineRooms0")
    np.testing.assert_array_equal(a.reset(seed=7), b.reset(seed=7))
    starts = {make_env("NineRooms0").reset(seed=s).tobytes() for s in range(20)}
    assert len(starts) > 1


def test_wall_blocks_movement():
    env = make_env("NineRooms1")
    env.reset()
    obs, r, done = env.step(UP)
    assert env.state[:2] == (1, 1) and r == 0 and not done
    assert obs[AGENT, 1, 1] == 1


def test_reaching_goal():
    env = make_env("NineRooms1")
    env.reset()
    env.set_state(GridState(8, 3, False))
    _, r, done = env.step(RIGHT)
    assert (r, done, env.terminal, env.event) == (1.0, True, True, "goal")
    with pytest.raises(EpisodeOver):
        env.step(LEFT)


def test_door_needs_key():
    env = make_env("KeyDoor")
    env.reset()
    env.set_state(GridState(7, 1, False))
    _, r, done = env.step(RIGHT)
    assert r == 0 and not done and env.state[:2] == (8, 1)
    env.set_state(GridState(7, 1, True))
    _, r, done = env.step(RIGHT)
    assert (r, done, env.event) == (1.0, True, "door")


def test_key_pickup_sets_flag_plane():
    env = make_env("KeyDoor0")
    kx, ky = env.spec.key
    env.reset()
    env.set_state(GridState(kx - 1, ky, False))
    obs, _, _ = env.step(RIGHT)
    assert env.has_key and obs[HAS_KEY].all() and not obs[KEY].any()


def test_step_cap_and_episode_over():
    env = make_env("KeyDoor")
    env.reset()
    for t in range(40):
        _, r, done = env.step(UP)
        assert done == (t == 39) and r == 0
    assert not env.terminal
    with pytest.raises(EpisodeOver):
        env.step(UP)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(sorted(GRID_SPECS)), st.integers(0, 2**31 - 1),
       st.lists(st.integers(0, 3), min_size=1, max_size=300))
def test_agent_never_in_wall_and_replay_is_exact(name, seed, actions):
    def play():
        env = make_env(name)
        trace = [env.reset(seed=seed)]
        for a in actions:
            if env.done:
                break
            obs, r, done = env.step(a)
            assert env.pos not in env.spec.walls
            assert obs[AGENT].sum() == 1 and obs[AGENT, env.pos[1], env.pos[0]] == 1
            assert env.steps <= env.spec.max_steps
            trace.append(obs)
        return trace
    first, second = play(), play()
    assert all(np.array_equal(a, b) for a, b in zip(first, second))


def test_spec_validation():
    walls = frozenset({(0, 0)})
    with pytest.raises(ValueError):
        GridSpec("tiny", 2, 5, walls)
    with pytest.raises(ValueError):
        GridSpec("bad-start", 5, 5, walls, start=(0, 0))


def test_room_assignment_and_doorways():
    spec = GRID_SPECS["NineRooms0"]
    assert spec.room_of(1, 1) == 0 and spec.room_of(17, 17) == 8 and spec.room_of(9, 1) == 1
    assert len(spec.doorways) == 12
    assert all(cell not in spec.walls for cell in spec.doorways)


def test_enumeration_and_task_free_view():
    env = make_env("KeyDoor0")
    states = enumerate_states(env)
    assert len(states) == 2 * len(env.spec.free_cells)
    env = make_env("NineRooms3")
    obs = env.reset()
    assert obs[GOAL].sum() == 1
    view = task_free_view(obs)
    assert not view[GOAL].any() and np.array_equal(view[WALL], obs[WALL]) and obs[GOAL].sum() == 1


# ---------------------------------------------------------------- mountain car


def test_mountaincar_equilibrium_and_reward():
    # cos(3p) = 0 at the valley floor p = -pi/6, so coasting from rest stays at rest
    (p, v), r, done = mountaincar_step((-math.pi / 6, 0.0), 1)
    assert abs(v) < 1e-12 and p == pytest.approx(-math.pi / 6) and r == -1.0 and not done
    # +pi/6 has zero slope too but lies past the goal at 0.5
    _, _, done = mountaincar_step((math.pi / 6, 0.0), 1)
    assert done


def test_mountaincar_matches_reference_formula():
    rng = np.random.default_rng(0)
    for _ in range(200):
        p, v, a = rng.uniform(-1.2, 0.6), rng.uniform(-0.07, 0.07), int(rng.integers(3))
        v2 = np.clip(v + (a - 1) * 0.001 - 0.0025 * math.cos(3 * p), -0.07, 0.07)
        p2 = np.clip(p + v2, -1.2, 0.6)
        if p2 == -1.2 and v2 < 0:
            v2 = 0.0
        (gp, gv), r, done = mountaincar_step((p, v), a)
        assert (gp, gv) == pytest.approx((p2, v2), abs=1e-15)
        assert done == (p2 >= 0.5) and r == -1


def test_mountaincar_determinism():
    a, b = MountainCar(seed=3), MountainCar(seed=3)
    np.testing.assert_array_equal(a.reset(), b.reset())
    for act in (0, 2, 2, 1, 0):
        np.testing.assert_array_equal(a.step(act)[0], b.step(act)[0])


def test_energy_policy_reaches_goal():
    env = MountainCar(seed=0)
    mem = collect_trajectories(env, energy_pumping_policy(), 10, 200, seed=0, restart_on_done=True)
    assert mem.done.any()


# ---------------------------------------------------------------- collection and replay


def test_collection_counts():
    env = make_env("NineRooms0")
    mem = collect_trajectories(env, random_policy(4), 50, 100, seed=0)
    assert len(mem) == 5000
    assert len(collect_trajectories(env, random_policy(4), 0, 100, seed=0)) == 0
    car = collect_trajectories(MountainCar(), energy_pumping_policy(), 20, 200, seed=0, restart_on_done=True)
    assert len(car) == 4000


@pytest.mark.slow
def test_full_pretraining_memory_size():
    env = make_env("NineRooms0")
    assert len(collect_trajectories(env, random_policy(4), 1000, 100, seed=1)) == 100_000
    car = collect_trajectories(MountainCar(), energy_pumping_policy(), 200, 200, seed=0, restart_on_done=True)
    assert len(car) == 40_000


def test_collection_is_seeded():
    a = collect_trajectories(make_env("NineRooms0"), random_policy(4), 5, 30, seed=4)
    b = collect_trajectories(make_env("NineRooms0"), random_policy(4), 5, 30, seed=4)
    np.testing.assert_array_equal(a.s, b.s)
    np.testing.assert_array_equal(a.a, b.a)


def test_episodes_end_on_task_completion():
    env = make_env("FourRooms")
    mem = collect_trajectories(env, random_policy(4), 200, 100, seed=0)
    assert len(mem) < 200 * 100
    ends = np.flatnonzero(mem.done)
    assert np.all(mem.r[mem.r > 0] == 1.0) and np.all(mem.done[mem.r > 0])
    assert len(ends) == 200


@given(st.integers(1, 20), st.integers(0, 60))
def test_replay_fifo_eviction(capacity, n):
    mem = ReplayMemory(capacity, (2,))
    for i in range(n):
        mem.add(np.full(2, i), i % 4, float(i), np.full(2, i + 1), False)
    assert len(mem) == min(n, capacity)
    kept = sorted(mem.stamp[:len(mem)].tolist())
    assert kept == list(range(max(0, n - capacity), n))
    for slot in range(len(mem)):
        assert mem.r[slot] == mem.stamp[slot]


def test_replay_save_load_round_trip(tmp_path):
    mem = collect_trajectories(make_env("KeyDoor0"), random_policy(4), 3, 20, seed=0, capacity=50)
    for i in range(30):        # wrap around the ring
        mem.add(mem.s[0], 1, float(i), mem.s2[0], True)
    path = tmp_path / "m.hrlm"
    mem.save(path)
    assert path.read_bytes()[:4] == b"HRLM"
    back = ReplayMemory.load(path)
    order = np.argsort(mem.stamp[:len(mem)])
    np.testing.assert_array_equal(back.s, mem.s[order])
    np.testing.assert_array_equal(back.r, mem.r[order])
    np.testing.assert_array_equal(back.done, mem.done[order])
    path.write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(ValueError):
        ReplayMemory.load(path)


def test_sample_batch_examples():
    mem = ReplayMemory(10, (1,))
    with pytest.raises(ValueError):
        sample_batch(mem, 3, np.random.default_rng(0))
    mem.add(np.array([5.0]), 2, 1.0, np.array([6.0]), True)
    b = sample_batch(mem, 3, np.random.default_rng(0))
    assert len(b) == 3 and np.all(b.s == 5.0) and np.all(b.a == 2)


def test_sample_batch_uniformity_chi_square():
    mem = ReplayMemory(50, (1,))
    for i in range(50):
        mem.add(np.array([i]), 0, 0.0, np.array([i]), False)
    idx = sample_batch(mem, 100_000, np.random.default_rng(11)).indices
    counts = np.bincount(idx, minlength=50)
    assert chisquare(counts).pvalue > 0.001
