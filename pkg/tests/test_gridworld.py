from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latent_rhe.errors import LayoutError, UnreachableError, UsageError
from latent_rhe.gridworld import (
    AGENT,
    BLOCK,
    FLOOR,
    GOAL,
    HOLE,
    SPIDER,
    VARIANTS,
    GridLayout,
    SimulatorModel,
    TaskVariant,
    default_layout,
    downsample,
    format_map,
    load_map,
    local_cell_colors,
    parse_map,
    render_global,
    render_local,
    reset,
    shortest_path_actions,
    shortest_path_length,
    step,
)

DET_GLOBAL = TaskVariant(False, False)
DET_LOCAL = TaskVariant(False, True)
STOCH_GLOBAL = TaskVariant(True, False)
UP, DOWN, LEFT, RIGHT = range(4)


def empty_layout(**kw) -> GridLayout:
    args = dict(width=7, height=7, block_cells=frozenset(), agent_start=(0, 0), goal_cell=(6, 6), hole_cell=(6, 0), spider_start=(3, 3))
    args.update(kw)
    return GridLayout(**args)


def brute_force_distance(layout: GridLayout, start, goal) -> int:
    """Bellman-Ford style relaxation over all cells (independent of the BFS under test)."""
    inf = 10**9
    dist = {(x, y): inf for x in range(layout.width) for y in range(layout.height)}
    dist[start] = 0
    for _ in range(layout.width * layout.height):
        for (x, y), d in list(dist.items()):
            if d == inf:
                continue
            for dx, dy in ((0, 1), (0, -1), (1, 0), (-1, 0)):
                nxt = (x + dx, y + dy)
                if layout.is_open(nxt) and nxt != layout.hole_cell and dist[nxt] > d + 1:
                    dist[nxt] = d + 1
    return dist[goal]


def test_four_variants():
    assert len(set(VARIANTS)) == 4
    assert {v.name for v in VARIANTS} == {"det-global", "det-local", "stoch-global", "stoch-local"}
    for v in VARIANTS:
        assert TaskVariant.from_name(v.name) == v
    with pytest.raises(UsageError):
        TaskVariant.from_name("det-wide")


def test_observation_shapes():
    _, obs = reset(DET_GLOBAL, default_layout(), 0)
    assert obs.shape == (3, 64, 64)
    _, obs = reset(DET_LOCAL, default_layout(), 0)
    assert obs.shape == (3, 28, 28)
    for v in VARIANTS:
        _, obs = reset(v, default_layout(), 3)
        assert obs.min() >= 0.0 and obs.max() <= 1.0


def test_equal_seeds_give_identical_observations():
    for v in VARIANTS:
        _, a = reset(v, default_layout(), 11)
        _, b = reset(v, default_layout(), 11)
        assert np.array_equal(a, b)


def test_goal_reward():
    layout = empty_layout(agent_start=(5, 6))
    state, _ = reset(DET_GLOBAL, layout, 0)
    state, res = step(state, RIGHT)
    assert (res.reward, res.done) == (1.0, True)
    assert state.terminal
    with pytest.raises(UsageError):
        step(state, UP)


def test_hole_reward():
    layout = empty_layout(agent_start=(5, 0))
    state, _ = reset(DET_GLOBAL, layout, 0)
    _, res = step(state, RIGHT)
    assert (res.reward, res.done) == (-1.0, True)


def test_block_move_is_identity():
    state, _ = reset(DET_GLOBAL, empty_layout(agent_start=(1, 1), block_cells={(2, 1)}), 0)
    nxt, res = step(state, RIGHT)
    assert nxt.agent_pos == (1, 1)
    assert res.reward == 0.0 and not res.done
    # walls behave like blocks
    nxt, _ = step(reset(DET_GLOBAL, empty_layout(), 0)[0], UP)
    assert nxt.agent_pos == (0, 0)


def test_time_limit():
    state, _ = reset(DET_GLOBAL, default_layout(), 0, global_size=8)
    for t in range(1, 501):
        state, res = step(state, UP)
        assert res.done == (t == 500)
        assert res.reward == 0.0
    assert state.step_count == 500


def test_invalid_action():
    state, _ = reset(DET_GLOBAL, default_layout(), 0)
    with pytest.raises(UsageError):
        step(state, 4)


def test_layout_validation():
    with pytest.raises(LayoutError):
        empty_layout(goal_cell=(0, 0))
    with pytest.raises(LayoutError):
        empty_layout(block_cells={(6, 6)})
    with pytest.raises(LayoutError):
        empty_layout(hole_cell=(7, 0))


def test_map_round_trip(tmp_path):
    layout = default_layout()
    text = format_map(layout)
    assert text.splitlines()[0] == "A.....H"
    assert parse_map(text) == layout
    path = tmp_path / "level.txt"
    path.write_text(text)
    assert load_map(path) == layout
    with pytest.raises(LayoutError):
        parse_map("A.G\nH.S\n..X\n")
    with pytest.raises(LayoutError):
        parse_map("A.G\nH..\n")
    with pytest.raises(LayoutError):
        parse_map("A.G\nH.SS\n")


def test_constant_image_downsamples_to_constant():
    img = np.full((3, 168, 168), 0.37)
    out = downsample(img, 64)
    assert out.shape == (3, 64, 64)
    np.testing.assert_allclose(out, 0.37, atol=1e-12)


def test_downsample_preserves_mean():
    img = np.random.default_rng(0).random((3, 168, 168))
    # 168 -> 64 is not an integer ratio, but area averaging conserves total mass
    np.testing.assert_allclose(downsample(img, 64).mean(axis=(1, 2)), img.mean(axis=(1, 2)), rtol=1e-12)


def test_global_render_colors():
    state, obs = reset(DET_GLOBAL, default_layout(), 0)
    scale = 64 / 7

    def centre(cell):
        x, y = cell
        return obs[:, int((y + 0.5) * scale), int((x + 0.5) * scale)]

    np.testing.assert_allclose(centre((1, 0)), FLOOR, atol=1e-6)
    np.testing.assert_allclose(centre((0, 0)), AGENT, atol=1e-6)
    np.testing.assert_allclose(centre((6, 6)), GOAL, atol=1e-6)
    np.testing.assert_allclose(centre((6, 0)), HOLE, atol=1e-6)
    np.testing.assert_allclose(centre((2, 2)), BLOCK, atol=1e-6)
    # a whole floor cell interior is uniform
    inner = obs[:, 1:8, 11:17]
    np.testing.assert_allclose(inner, np.broadcast_to(np.asarray(FLOOR)[:, None, None], inner.shape), atol=1e-6)
    assert np.array_equal(render_global(state), obs)


def test_stochastic_render_shows_spider():
    state, obs = reset(STOCH_GLOBAL, default_layout(), 0)
    x = int(3.5 * 64 / 7)
    np.testing.assert_allclose(obs[:, x, x], SPIDER, atol=1e-6)


def test_local_corner_padding():
    state, obs = reset(DET_LOCAL, default_layout(), 0)
    colors = local_cell_colors(obs)
    assert sum(np.allclose(c, BLOCK) for c in colors) == 5
    np.testing.assert_allclose(colors[4], AGENT)
    assert np.array_equal(render_local(state), obs)


def test_local_view_hides_distant_spider():
    state, obs = reset(TaskVariant(True, True), default_layout(), 0)
    assert not any(np.allclose(c, SPIDER) for c in local_cell_colors(obs))
    assert not np.any(np.all(np.isclose(obs, np.asarray(SPIDER, dtype=np.float32)[:, None, None]), axis=0))


def test_local_view_shows_adjacent_spider():
    layout = empty_layout(agent_start=(3, 2), spider_start=(3, 3))
    state, obs = reset(TaskVariant(True, True), layout, 0)
    np.testing.assert_allclose(local_cell_colors(obs)[7], SPIDER)


def test_shortest_paths():
    assert shortest_path_length(empty_layout()) == 12
    layout = default_layout()
    assert shortest_path_length(layout) == brute_force_distance(layout, layout.agent_start, layout.goal_cell)
    assert shortest_path_length(layout, start=layout.goal_cell) == 0
    # the returned actions really reach the goal
    state, _ = reset(DET_GLOBAL, layout, 0, global_size=8)
    for a in shortest_path_actions(layout):
        state, res = step(state, a)
    assert res.reward == 1.0


def test_unreachable_goal():
    walled = empty_layout(block_cells={(5, 6), (6, 5), (5, 5)})
    with pytest.raises(UnreachableError):
        shortest_path_length(walled)


def test_spider_reproducible_and_confined():
    layout = default_layout()
    trajectories = []
    for _ in range(2):
        state, _ = reset(STOCH_GLOBAL, layout, 5, global_size=8)
        spiders = []
        for t in range(200):
            if state.terminal:
                break
            state, _ = step(state, [UP, LEFT][t % 2])
            spiders.append(state.spider_pos)
        trajectories.append(spiders)
    assert trajectories[0] == trajectories[1]
    forbidden = set(layout.block_cells) | {layout.goal_cell, layout.hole_cell}
    assert not forbidden.intersection(trajectories[0])
    moves = [abs(a[0] - b[0]) + abs(a[1] - b[1]) for a, b in zip(trajectories[0], trajectories[0][1:])]
    assert set(moves) <= {1}


def test_spider_collision_and_swap():
    # top row A . S G; from (2,0) the spider's only legal move is onto (1,0)
    layout = GridLayout(
        width=4, height=2, block_cells=frozenset({(1, 1), (2, 1), (3, 1)}),
        agent_start=(0, 0), goal_cell=(3, 0), hole_cell=(0, 1), spider_start=(2, 0),
    )
    outcomes = set()
    for seed in range(30):
        state, _ = reset(TaskVariant(True, False), layout, seed, global_size=8)
        state, res = step(state, RIGHT)
        outcomes.add((state.agent_pos, state.spider_pos, res.reward, res.done))
    assert outcomes == {((1, 0), (1, 0), -1.0, True)}


def test_swap_through_does_not_collide():
    layout = GridLayout(
        width=4, height=2, block_cells=frozenset({(1, 1), (2, 1)}),
        agent_start=(1, 0), goal_cell=(3, 1), hole_cell=(0, 1), spider_start=(2, 0),
    )
    swaps = 0
    for seed in range(40):
        state, _ = reset(TaskVariant(True, False), layout, seed, global_size=8)
        nxt, res = step(state, RIGHT)
        if nxt.spider_pos == (1, 0):
            swaps += 1
            assert not res.done and res.reward == 0.0
    assert swaps > 0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=600), st.booleans(), st.integers(0, 2**16))
def test_episode_invariants(actions, stochastic, seed):
    layout = default_layout()
    state, _ = reset(TaskVariant(stochastic, False), layout, seed, global_size=8)
    total, steps = 0.0, 0
    for a in actions:
        if state.terminal:
            break
        state, res = step(state, a)
        steps += 1
        total += res.reward
        assert layout.is_open(state.agent_pos)
        assert res.reward == 0.0 or res.done
        if res.reward == 1.0:
            assert state.agent_pos == layout.goal_cell
    assert steps <= 500
    assert total in (-1.0, 0.0, 1.0)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=30))
def test_simulator_model_matches_environment(actions):
    """Until termination the oracle model's rewards equal the real environment's."""
    layout = default_layout()
    state, _ = reset(DET_GLOBAL, layout, 0, global_size=8)
    model = SimulatorModel(layout)
    predicted = model.rollout_rewards(state, np.array([actions]), np.zeros((1, 2, len(actions), 0)))
    assert predicted.shape == (1, 2, len(actions))
    real = []
    for a in actions:
        state, res = step(state, a)
        real.append(res.reward)
        if res.done:
            break
    np.testing.assert_array_equal(predicted[0, 0, : len(real)], real)
    if state.terminal:  # absorbing terminal keeps paying its reward
        assert np.all(predicted[0, 0, len(real) :] == real[-1])


def test_simulator_model_rejects_stochastic():
    state, _ = reset(STOCH_GLOBAL, default_layout(), 0, global_size=8)
    with pytest.raises(UsageError):
        SimulatorModel(default_layout()).rollout_rewards(state, np.zeros((1, 3), int), np.zeros((1, 1, 3, 0)))
