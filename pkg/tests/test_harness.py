import json

import numpy as np
import pytest

from mazenav import cli, harness, training
from mazenav import maze_world as mw
from mazenav import numerics as nx
from mazenav.config import TrainConfig


def fresh_params(cfg=None, seed=0):
    cfg = cfg or TrainConfig()
    return {k: nx.Tensor(v) for k, v in training.init_all_params(cfg, seed=seed).items()}


class TestGenerateTestset:
    def test_counts_and_layout(self, tmp_path):
        harness.generate_testset(tmp_path, [5, 7], 4, seed=1)
        sets = harness.list_maze_set(tmp_path)
        assert sorted(sets) == [5, 7]
        assert all(len(v) == 4 for v in sets.values())
        maze = mw.load_maze(sets[5][0])
        mw.validate_maze(maze)

    def test_paper_scale_testset_is_900_files(self, tmp_path):
        written = harness.generate_testset(tmp_path, range(5, 22, 2), 100, seed=2)
        assert len(written) == 900

    def test_same_seed_identical_files(self, tmp_path):
        harness.generate_testset(tmp_path / "a", [5], 3, seed=3)
        harness.generate_testset(tmp_path / "b", [5], 3, seed=3)
        for i in range(3):
            a = (tmp_path / "a" / "5" / f"{i:03d}.maze").read_text()
            b = (tmp_path / "b" / "5" / f"{i:03d}.maze").read_text()
            assert a == b

    def test_zero_count_empty_set(self, tmp_path):
        written = harness.generate_testset(tmp_path, [5], 0, seed=4)
        assert written == []
        assert harness.list_maze_set(tmp_path)[5] == []


class TestEvaluate:
    def test_scripted_follower_with_oracle_inputs_finds_all_5x5(self, tmp_path):
        paths = harness.generate_testset(tmp_path, [5], 10, seed=5)
        params = fresh_params()
        stats, rows = harness.oracle_eval(params, TrainConfig(), paths, mode="both",
                                          policy="scripted", jobs=2, seed=0)
        assert stats[5].targets_found_pct == 100.0
        assert all(r[2] == 1 for r in rows)

    def test_zero_cap_finds_nothing(self, tmp_path):
        paths = harness.generate_testset(tmp_path, [5], 5, seed=6)
        params = fresh_params()
        stats, _ = harness.oracle_eval(params, TrainConfig(), paths, mode="both",
                                       policy="scripted", cap=0, jobs=1)
        assert stats[5].targets_found_pct == 0.0

    def test_success_percentage_arithmetic(self):
        st = harness.EvalStats()
        for success, steps in ((1, 10), (0, 0), (1, 30), (1, 20)):
            st.episodes += 1
            if success:
                st.successes += 1
                st.steps_successful.append(steps)
                st.steps_no_rot_successful.append(steps // 2)
        assert st.targets_found_pct == pytest.approx(75.0)
        assert st.mean_steps == pytest.approx(20.0)
        assert st.mean_steps_no_rot == pytest.approx(10.0)

    def test_moves_never_exceed_steps(self, tmp_path):
        paths = harness.generate_testset(tmp_path, [5], 6, seed=7)
        params = fresh_params()
        _, rows = harness.evaluate(params, TrainConfig(), paths, cap=120,
                                   policy="sample", jobs=2, seed=1)
        for _, _, _, steps, moves in rows:
            assert moves <= steps

    def test_bit_exact_reproducibility(self, tmp_path):
        paths = harness.generate_testset(tmp_path, [5], 6, seed=8)
        params = fresh_params()
        cfg = TrainConfig()
        a = harness.evaluate(params, cfg, paths, cap=100, seed=9, jobs=3)[1]
        b = harness.evaluate(params, cfg, paths, cap=100, seed=9, jobs=1)[1]
        assert a == b

    def test_untrained_oracle_agent_no_better_than_follower(self, tmp_path):
        # sanity: an untrained policy with oracle inputs cannot beat the
        # deterministic follower's success rate
        paths = harness.generate_testset(tmp_path, [5], 8, seed=10)
        params = fresh_params()
        cfg = TrainConfig()
        sampled, _ = harness.oracle_eval(params, cfg, paths, mode="both",
                                         policy="sample", cap=300, jobs=2)
        scripted, _ = harness.oracle_eval(params, cfg, paths, mode="both",
                                          policy="scripted", cap=300, jobs=2)
        assert sampled[5].targets_found_pct <= scripted[5].targets_found_pct

    def test_oracle_mode_flags(self, tmp_path):
        paths = harness.generate_testset(tmp_path, [5], 2, seed=11)
        params = fresh_params()
        cfg = TrainConfig()
        for mode in ("perfect_position", "perfect_sttd", "both"):
            stats, rows = harness.oracle_eval(params, cfg, paths, mode=mode,
                                              cap=40, jobs=1)
            assert stats[5].episodes == 2
        with pytest.raises(ValueError):
            harness.oracle_eval(params, cfg, paths, mode="bogus")


class TestTrace:
    def test_trace_lines_parse_and_validate(self, tmp_path):
        paths = harness.generate_testset(tmp_path, [5], 1, seed=12)
        params = fresh_params()
        out = tmp_path / "trace.jsonl"
        summary = harness.export_trace(params, TrainConfig(), paths[0], 13, out, cap=50)
        lines = out.read_text().strip().splitlines()
        meta = json.loads(lines[0])
        assert meta["type"] == "meta" and meta["width"] == 5
        end = json.loads(lines[-1])
        assert end["type"] == "end" and end["steps"] == summary["steps"]
        steps = [json.loads(s) for s in lines[1:-1]]
        assert len(steps) == summary["steps"]
        for rec in steps:
            assert rec["type"] == "step"
            assert 0 <= rec["action"] < 6
            probs = [p for _, p in rec["belief_topk"]]
            assert sorted(probs, reverse=True) == probs
            assert sum(probs) <= 1.0 + 1e-9
            assert 0.0 <= rec["entropy"] <= 1.0
            assert len(rec["sttd"]) == 4

    def test_replaying_actions_reproduces_poses(self, tmp_path):
        paths = harness.generate_testset(tmp_path, [5], 1, seed=14)
        params = fresh_params()
        out = tmp_path / "trace.jsonl"
        harness.export_trace(params, TrainConfig(), paths[0], 15, out, cap=60)
        lines = [json.loads(s) for s in out.read_text().strip().splitlines()]
        steps = [r for r in lines if r["type"] == "step"]
        maze = mw.load_maze(paths[0])
        rng = np.random.default_rng(np.random.SeedSequence([15, 0]))
        env = mw.reset(maze, heading=float(rng.uniform(0.0, 360.0)))
        for rec in steps:
            assert rec["pose"][0] == pytest.approx(env.pose.row)
            assert rec["pose"][1] == pytest.approx(env.pose.col)
            assert rec["pose"][2] == pytest.approx(env.pose.heading)
            env, _, _ = mw.env_step(env, mw.Action(rec["action"]))


class TestSelfcheck:
    def test_quick_selfcheck_passes(self):
        results = harness.selfcheck(quick=True)
        for r in results:
            assert r.ok, (r.name, r.detail)

    def test_corrupted_gradient_detected(self):
        def broken():
            p = nx.tensor(np.array([1.0, 2.0]), requires_grad=True)

            def f():
                return nx.tsum(nx.mul(nx.stop_gradient(p), p))   # wrong analytic grad

            err = nx.finite_diff_check(f, [p])
            return harness.CheckResult("grad/broken_fixture", err < 1e-4,
                                       f"max rel err {err:.2e}")

        results = harness.selfcheck(quick=True, extra_checks=[broken])
        assert any(not r.ok and r.name == "grad/broken_fixture" for r in results)


class TestCli:
    def test_gen_mazes_and_eval_roundtrip(self, tmp_path, capsys):
        mazes = tmp_path / "mazes"
        assert cli.main(["gen-mazes", "--out", str(mazes), "--sizes", "5",
                         "--count", "2", "--seed", "1"]) == 0
        cfg = TrainConfig(step_budget=0, workers=1, start_sizes=(5,),
                          curriculum_sizes=(5,))
        ckpt = training.train(cfg, tmp_path / "run")
        out_csv = tmp_path / "eval.csv"
        code = cli.main(["eval", "--checkpoint", str(ckpt), "--mazes", str(mazes),
                         "--cap", "30", "--seed", "2", "--jobs", "1",
                         "--out", str(out_csv)])
        assert code == 0
        assert out_csv.exists()
        lines = out_csv.read_text().strip().splitlines()
        assert lines[0] == "maze,size,success,steps,steps_no_rot"
        assert len(lines) == 3

    def test_oracle_eval_without_checkpoint(self, tmp_path):
        mazes = tmp_path / "mazes"
        cli.main(["gen-mazes", "--out", str(mazes), "--sizes", "5", "--count", "1"])
        code = cli.main(["oracle-eval", "--mazes", str(mazes), "--mode", "both",
                         "--policy", "scripted", "--cap", "200", "--jobs", "1"])
        assert code == 0

    def test_trace_command(self, tmp_path):
        mazes = tmp_path / "mazes"
        cli.main(["gen-mazes", "--out", str(mazes), "--sizes", "5", "--count", "1"])
        cfg = TrainConfig(step_budget=0, workers=1, start_sizes=(5,),
                          curriculum_sizes=(5,))
        ckpt = training.train(cfg, tmp_path / "run")
        out = tmp_path / "t.jsonl"
        maze_file = str(next((mazes / "5").glob("*.maze")))
        assert cli.main(["trace", "--checkpoint", str(ckpt), "--maze", maze_file,
                         "--seed", "3", "--out", str(out), "--cap", "20"]) == 0
        assert out.exists()

    def test_bad_size_exits_2(self, tmp_path):
        assert cli.main(["gen-mazes", "--out", str(tmp_path), "--sizes", "6"]) == 2

    def test_missing_checkpoint_exits_2(self, tmp_path):
        mazes = tmp_path / "mazes"
        cli.main(["gen-mazes", "--out", str(mazes), "--sizes", "5", "--count", "1"])
        code = cli.main(["eval", "--checkpoint", str(tmp_path / "nope.bin"),
                         "--mazes", str(mazes)])
        assert code == 2

    def test_train_command_smoke(self, tmp_path):
        cfg_file = tmp_path / "cfg.txt"
        TrainConfig(step_budget=60, workers=1, start_sizes=(5,),
                    curriculum_sizes=(5,), train_mazes_per_size=2).save(cfg_file)
        code = cli.main(["train", "--config", str(cfg_file),
                         "--out", str(tmp_path / "run")])
        assert code == 0
        assert (tmp_path / "run" / "checkpoint.bin").exists()


class TestConfigFile:
    def test_roundtrip(self, tmp_path):
        cfg = TrainConfig(seed=9, workers=2, start_sizes=(5, 7), lr=1e-3)
        path = tmp_path / "c.cfg"
        cfg.save(path)
        loaded = TrainConfig.from_file(path)
        assert loaded == cfg

    def test_key_value_text_with_comments(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("# comment\nseed = 4\nworkers = 2\n"
                        "start_sizes = 5, 5\ncurriculum_sizes = 5, 7\n"
                        "oracle_mode = both\n")
        cfg = TrainConfig.from_file(path)
        assert cfg.seed == 4 and cfg.workers == 2
        assert cfg.start_sizes == (5, 5)
        assert cfg.oracle_mode == "both"

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("definitely_not_a_key = 1\n")
        with pytest.raises(KeyError):
            TrainConfig.from_file(path)
