import numpy as np
import pytest

from mazenav import harness
from mazenav import map_planner as mp
from mazenav import maze_world as mw
from mazenav import numerics as nx
from mazenav.errors import InvalidBatch


def make_params(seed=0, grad=False):
    raw = mp.init_params(np.random.default_rng(seed))
    return {k: nx.Tensor(v, requires_grad=grad) for k, v in raw.items()}


class TestRewardMap:
    def test_zero_weights_zero_output(self):
        params = {k: nx.Tensor(np.zeros_like(v.data)) for k, v in make_params().items()}
        maze = mw.generate_maze(5, 1)
        assert np.all(mp.reward_map(maze.raster, params).data == 0.0)

    def test_spatial_dims_preserved(self):
        maze = mw.generate_maze(9, 2)
        out = mp.reward_map(maze.raster, make_params(2))
        assert out.data.shape == (3, 27, 27)

    def test_outputs_nonnegative(self):
        maze = mw.generate_maze(7, 3)
        assert np.all(mp.reward_map(maze.raster, make_params(3)).data >= 0.0)

    def test_gradcheck(self):
        params = make_params(4, grad=True)
        maze = mw.generate_maze(5, 4)

        def f():
            return nx.norm2(mp.reward_map(maze.raster, params))

        err = harness._subsampled_gradcheck(f, list(params.values()),
                                            np.random.default_rng(0), 15)
        assert err < 1e-4


class TestClassify:
    def _rm(self, means, width=5):
        # build a reward map whose block means are exactly `means` (3, w, w)
        return np.kron(means, np.ones((3, 3)))

    def test_navigable_channel_dominates(self):
        means = np.zeros((3, 5, 5))
        means[mp.CLASS_NAV] = 10.0
        vals = mp.classify(self._rm(means), 5)
        assert np.allclose(vals, 0.99)

    def test_wall_channel_dominates(self):
        means = np.zeros((3, 5, 5))
        means[mp.CLASS_WALL] = 10.0
        vals = mp.classify(self._rm(means), 5)
        assert np.allclose(vals, 0.0, atol=1e-12)

    def test_three_way_tie_mixes_values(self):
        vals = mp.classify(np.ones((3, 15, 15)), 5)
        assert np.allclose(vals, (1.0 + 0.99 + 0.0) / 3.0)

    def test_block_broadcast(self):
        means = np.zeros((3, 5, 5))
        means[mp.CLASS_TARGET, 2, 3] = 50.0
        means[mp.CLASS_NAV] += 1.0
        vals = mp.classify(self._rm(means), 5)
        assert np.allclose(vals[6:9, 9:12], 1.0)
        block = vals[0:3, 0:3]
        assert np.all(block == block[0, 0])

    def test_averages_within_maze_cell(self):
        rm = np.zeros((3, 15, 15))
        # one hot fine cell inside block (1,1) still moves that block's mean
        rm[mp.CLASS_TARGET, 4, 4] = 90.0
        rm[mp.CLASS_NAV] += 1.0
        vals = mp.classify(rm, 5)
        assert np.allclose(vals[3:6, 3:6], 1.0)


class TestPlan:
    def test_cell_adjacent_to_target_points_at_it(self):
        maze = mw.maze_from_text([
            "#####",
            "#.X.#",
            "#.#.#",
            "#S..#",
            "#####",
        ])
        grid = mp.plan(mp.ground_truth_values(maze))
        side = 15
        # fine cell (4, 5): its east neighbor (4, 6) is a target fine cell
        cell = 4 * side + 5
        sttd = grid.sttd[cell]
        assert int(np.argmax(sttd)) == 1   # East
        assert grid.dist[cell] == pytest.approx(0.01, abs=1e-9)

    def test_wall_cell_enclosed_is_uniform_and_far(self):
        maze = mw.generate_maze(7, 5)
        grid = mp.plan(mp.ground_truth_values(maze))
        side = maze.width * 3
        cell = 0   # map corner: neighbors are walls or out of bounds
        assert np.allclose(grid.sttd[cell], 0.25)
        assert grid.dist[cell] == 1.0

    def test_target_cells_have_zero_distance(self):
        maze = mw.generate_maze(9, 6)
        grid = mp.plan(mp.ground_truth_values(maze))
        side = maze.width * 3
        targets = np.nonzero(maze.fine_targets.ravel())[0]
        assert np.allclose(grid.dist[targets], 0.0)

    def test_no_target_returns_degenerate_plan(self):
        vals = np.full((9, 9), 0.99)
        grid = mp.plan(vals)
        assert not grid.has_target
        assert np.allclose(grid.sttd, 0.25)
        assert np.allclose(grid.dist, 1.0)

    def test_argmax_direction_reduces_bfs_distance(self):
        for seed in (7, 8):
            maze = mw.generate_maze(9, seed)
            ok, checked = harness.plan_matches_bfs(maze)
            assert checked > 0 and ok == checked

    def test_log_values_monotone_in_iterations(self):
        maze = mw.generate_maze(7, 9)
        vals = mp.ground_truth_values(maze)
        prev = None
        for k in (1, 2, 4, 8, 16):
            log_v = mp.plan(vals, iterations=k).log_v
            if prev is not None:
                assert np.all(log_v <= prev + 1e-12)
            prev = log_v

    def test_distance_monotone_in_bfs_distance(self):
        maze = mw.generate_maze(9, 10)
        grid = mp.plan(mp.ground_truth_values(maze))
        side = maze.width * 3
        bfs = mp.bfs_distance_grid(~maze.fine_walls, maze.fine_targets).ravel()
        reachable = bfs >= 0
        order = np.argsort(bfs[reachable])
        d_sorted = grid.dist[reachable][order]
        assert np.all(np.diff(d_sorted) >= -1e-12)


class TestQueryPlan:
    def test_one_hot_belief_extracts_row(self):
        maze = mw.generate_maze(7, 11)
        grid = mp.plan(mp.ground_truth_values(maze))
        n = grid.sttd.shape[0]
        p = np.zeros(n)
        p[120] = 1.0
        sttd, dist = mp.query_plan(grid, p)
        assert np.allclose(sttd, grid.sttd[120])
        assert dist == pytest.approx(grid.dist[120])

    def test_agreeing_cells_reinforce(self):
        grid = mp.PlanGrid(sttd=np.array([[0.0, 1.0, 0.0, 0.0],
                                          [0.05, 0.9, 0.05, 0.0],
                                          [0.25, 0.25, 0.25, 0.25]]),
                           dist=np.array([0.2, 0.3, 1.0]), log_v=np.zeros(3))
        p = np.array([0.5, 0.5, 0.0])
        sttd, dist = mp.query_plan(grid, p)
        assert int(np.argmax(sttd)) == 1
        assert sttd[1] > 0.9
        assert dist == pytest.approx(0.25)

    def test_four_way_split_is_uniform(self):
        grid = mp.PlanGrid(sttd=np.eye(4), dist=np.full(4, 0.5), log_v=np.zeros(4))
        sttd, _ = mp.query_plan(grid, np.full(4, 0.25))
        assert np.allclose(sttd, 0.25)

    def test_size_mismatch_raises(self):
        grid = mp.PlanGrid(sttd=np.eye(4), dist=np.full(4, 0.5), log_v=np.zeros(4))
        with pytest.raises(ValueError):
            mp.query_plan(grid, np.ones(5) / 5)


class TestRewardMapLoss:
    def test_confident_correct_prediction_near_zero(self):
        maze = mw.generate_maze(5, 12)
        params = make_params(12)
        rm = mp.reward_map(maze.raster, params).data
        n = rm.shape[1] * rm.shape[2]
        # pick the cell and class the current network is most confident about,
        # with a one-hot belief there the loss is -log(that confidence)
        sm = np.exp(rm.reshape(3, n)) / np.exp(rm.reshape(3, n)).sum(axis=0)
        flat = sm.max(axis=0)
        cell = int(np.argmax(flat))
        cls = int(np.argmax(sm[:, cell]))
        p = np.zeros(n)
        p[cell] = 1.0
        got = float(mp.reward_map_loss([(maze.raster, p, cls)], params).data)
        assert got == pytest.approx(-np.log(sm[cls, cell]), abs=1e-9)

    def test_uniform_channels_give_log3(self):
        params = {k: nx.Tensor(np.zeros_like(v.data)) for k, v in make_params().items()}
        maze = mw.generate_maze(5, 13)
        n = (maze.width * 3) ** 2
        p = np.full(n, 1.0 / n)
        frames = [(maze.raster, p, mp.CLASS_NAV)] * 4
        got = float(mp.reward_map_loss(frames, params).data)
        assert got == pytest.approx(4 * np.log(3.0), rel=1e-9)

    def test_nonnegative(self):
        maze = mw.generate_maze(7, 14)
        params = make_params(14)
        rng = np.random.default_rng(14)
        n = (maze.width * 3) ** 2
        frames = []
        for cls in (0, 1, 2):
            p = rng.random(n)
            p /= p.sum()
            frames.append((maze.raster, p, cls))
        assert float(mp.reward_map_loss(frames, params).data) >= 0.0

    def test_empty_batch_raises(self):
        with pytest.raises(InvalidBatch):
            mp.reward_map_loss([], make_params())

    def test_gradcheck(self):
        maze = mw.generate_maze(5, 15)
        params = make_params(15, grad=True)
        rng = np.random.default_rng(15)
        n = (maze.width * 3) ** 2
        p = rng.random(n)
        p /= p.sum()
        frames = [(maze.raster, p, mp.CLASS_WALL), (maze.raster, p, mp.CLASS_TARGET)]

        def f():
            return mp.reward_map_loss(frames, params)

        err = harness._subsampled_gradcheck(f, list(params.values()),
                                            np.random.default_rng(1), 15)
        assert err < 1e-4


class TestBfsOracle:
    def test_distances_on_hand_maze(self):
        maze = mw.maze_from_text([
            "#####",
            "#X..#",
            "###.#",
            "#S..#",
            "#####",
        ])
        bfs = mp.bfs_distance_grid(~maze.fine_walls, maze.fine_targets)
        assert bfs[4, 4] == 0          # inside the target block
        assert bfs[4, 10] == 5         # five cells east of the block edge
        assert bfs[0, 0] == -1         # wall is unreachable
