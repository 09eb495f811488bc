import numpy as np
import pytest

from mazenav import localization as loc
from mazenav import maze_world as mw
from mazenav import numerics as nx
from mazenav import visible_map as vm
from mazenav.config import TrainConfig
from mazenav.errors import InvalidBatch

CFG = TrainConfig()


def make_params(seed=0, grad=False):
    raw = vm.init_params(np.random.default_rng(seed), CFG)
    return {k: nx.Tensor(v, requires_grad=grad) for k, v in raw.items()}


def sample_obs(seed=0):
    maze = mw.generate_maze(5, seed)
    st = mw.reset(maze, heading=float(np.random.default_rng(seed).uniform(0, 360)))
    return maze, st, mw.render(maze, st.pose, CFG.obs_size)


class TestForward:
    def test_gate_closed_kills_output(self):
        params = make_params()
        params["vlm/gate_w"] = nx.Tensor(np.zeros_like(params["vlm/gate_w"].data))
        params["vlm/gate_b"] = nx.Tensor(np.full(225, -1.0))
        _, _, obs = sample_obs(1)
        out = vm.forward(obs.image, obs.angle_bits, params, CFG)
        assert np.all(out.gate.data == 0.0)
        assert np.all(out.value.data == 0.0)

    def test_gate_open_passes_excerpt(self):
        params = make_params()
        params["vlm/gate_w"] = nx.Tensor(np.zeros_like(params["vlm/gate_w"].data))
        params["vlm/gate_b"] = nx.Tensor(np.full(225, +1.0))
        _, _, obs = sample_obs(2)
        out = vm.forward(obs.image, obs.angle_bits, params, CFG)
        assert np.all(out.gate.data == 1.0)
        assert np.array_equal(out.value.data, out.excerpt.data)

    def test_output_range_over_random_inputs(self):
        rng = np.random.default_rng(3)
        for trial in range(50):
            params = make_params(seed=trial)
            image = rng.random((CFG.obs_size, CFG.obs_size, 3))
            angle = mw.discretize_angle(float(rng.uniform(0, 360)))
            out = vm.forward(image, angle, params, CFG)
            assert np.all(np.abs(out.value.data) <= 0.5 + 1e-12)
            assert np.all((out.gate.data >= 0.0) & (out.gate.data <= 1.0))
            assert np.all(np.abs(out.excerpt.data) <= 0.5)

    def test_shapes(self):
        params = make_params()
        _, _, obs = sample_obs(4)
        out = vm.forward(obs.image, obs.angle_bits, params, CFG)
        assert out.value.data.shape == (15, 15)


class TestLoss:
    def test_zero_when_output_matches_target(self):
        params = make_params(5)
        maze, st, obs = sample_obs(5)
        out = vm.forward(obs.image, obs.angle_bits, params, CFG)
        batch = [(obs.image, obs.angle_bits, out.value.data.copy())] * 3
        assert float(vm.loss(batch, params, CFG).data) < 1e-9

    def test_two_entry_difference_closed_form(self):
        # ||diff||_2 with two entries of 0.3 = 0.3 * sqrt(2)
        params = make_params(6)
        maze, st, obs = sample_obs(6)
        out = vm.forward(obs.image, obs.angle_bits, params, CFG)
        target = out.value.data.copy()
        target[0, 0] += 0.3
        target[3, 4] -= 0.3
        got = float(vm.loss([(obs.image, obs.angle_bits, target)], params, CFG).data)
        assert got == pytest.approx(0.3 * np.sqrt(2.0), abs=1e-9)

    def test_nonnegative(self):
        params = make_params(7)
        rng = np.random.default_rng(7)
        batch = []
        for k in range(4):
            maze, st, obs = sample_obs(10 + k)
            batch.append((obs.image, obs.angle_bits,
                          mw.true_visible_local_map(maze, st.pose)))
        assert float(vm.loss(batch, params, CFG).data) >= 0.0

    def test_empty_batch_raises(self):
        with pytest.raises(InvalidBatch):
            vm.loss([], make_params(), CFG)

    def test_gradient_reaches_all_parameters(self):
        params = make_params(8, grad=True)
        maze, st, obs = sample_obs(8)
        target = mw.true_visible_local_map(maze, st.pose)
        vm.loss([(obs.image, obs.angle_bits, target)], params, CFG).backward()
        for name, tensor in params.items():
            assert tensor.grad is not None, name
            assert np.abs(tensor.grad).sum() > 0.0, name


class TestOracleSubstitution:
    def test_localizer_accepts_ground_truth_visible_map(self):
        # interface compatibility: the truth oracle output slots in for the
        # network output with no downstream change
        maze, st, obs = sample_obs(9)
        lparams = {k: nx.Tensor(v) for k, v in
                   loc.init_params(np.random.default_rng(9)).items()}
        truth = mw.true_visible_local_map(maze, st.pose)
        state = loc.initial_state(15)
        state2, belief = loc.rlc_step(state, truth, maze.raster, obs.angle_bits,
                                      0, 0.0, lparams)
        assert belief.p.data.shape == (15 * 15,)
        assert abs(belief.p.data.sum() - 1.0) < 1e-9
