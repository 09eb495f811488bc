"""Actor-learner training: rollouts, replay history, curriculum, loop.

Each worker owns an environment, a recurrent localization state and an
experience history. A training iteration rolls out up to 20 steps recording
the localization and acting graphs, samples the history for the off-policy
visible-map and reward-map losses, and applies RMSProp per parameter to the
shared store. Gradients never cross module boundaries: the visible map
enters the localizer as a constant, beliefs and plan queries enter the agent
and the reward-map loss as constants.
"""

from __future__ import annotations

import csv
import pickle
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import agent as ag
from . import localization as loc
from . import map_planner as mp
from . import maze_world as mw
from . import numerics as nx
from . import visible_map as vm
from .config import CURRICULUM_THRESHOLDS, CURRICULUM_WINDOW, TrainConfig


def classify_reward(reward: float) -> int:
    if reward > 0:
        return mp.CLASS_TARGET
    if reward < 0:
        return mp.CLASS_WALL
    return mp.CLASS_NAV


def onehot_belief(n: int, index: int) -> np.ndarray:
    p = np.zeros(n)
    p[index] = 1.0
    return p


@dataclass
class ExperienceFrame:
    """Everything needed to replay one step through the networks off-policy."""

    image: np.ndarray
    angle_bits: np.ndarray
    last_action: int
    last_reward: float
    reward_class: int
    true_cell: int
    true_center: np.ndarray
    maze_id: int
    visible_target: np.ndarray          # ground-truth visible local map
    rlc_state: tuple                    # (s, lm_est, lm_mfb) before this frame
    raster: np.ndarray                  # shared reference, not copied


class ExperienceHistory:
    """Fixed-capacity ring buffer with per-class slot sets for skewed draws."""

    def __init__(self, capacity: int = 2000):
        self.capacity = capacity
        self._frames: list[ExperienceFrame | None] = [None] * capacity
        self._pos = 0
        self._size = 0
        self._class_slots = {mp.CLASS_WALL: set(), mp.CLASS_NAV: set(), mp.CLASS_TARGET: set()}

    def __len__(self) -> int:
        return self._size

    def push(self, frame: ExperienceFrame) -> None:
        old = self._frames[self._pos]
        if old is not None:
            self._class_slots[old.reward_class].discard(self._pos)
        self._frames[self._pos] = frame
        self._class_slots[frame.reward_class].add(self._pos)
        self._pos = (self._pos + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def frames(self) -> list[ExperienceFrame]:
        return [f for f in self._frames if f is not None]

    def class_counts(self) -> dict[int, int]:
        return {c: len(s) for c, s in self._class_slots.items()}

    def sample_uniform(self, rng: np.random.Generator, count: int = 20) -> list[ExperienceFrame]:
        """Without replacement when the history is large enough, else with."""
        if self._size == 0:
            return []
        replace = self._size < count
        idx = rng.choice(self._size, size=count, replace=replace)
        live = self.frames()
        return [live[i] for i in idx]

    def sample_reward_skewed(self, rng: np.random.Generator, count: int = 20
                             ) -> list[ExperienceFrame]:
        """Pick a class uniformly among those present, then a uniform member."""
        present = [c for c in (mp.CLASS_WALL, mp.CLASS_NAV, mp.CLASS_TARGET)
                   if self._class_slots[c]]
        if not present:
            return []
        slots = {c: sorted(self._class_slots[c]) for c in present}
        out = []
        for _ in range(count):
            cls = present[int(rng.integers(len(present)))]
            pool = slots[cls]
            out.append(self._frames[pool[int(rng.integers(len(pool)))]])
        return out


@dataclass
class CurriculumState:
    sizes: tuple
    size_idx: int = 0
    recent: deque = field(default_factory=lambda: deque(maxlen=CURRICULUM_WINDOW))
    done: bool = False

    @property
    def size(self) -> int:
        return self.sizes[self.size_idx]


def curriculum_update(state: CurriculumState, episode_steps: int) -> CurriculumState:
    """Promote after >=50 recorded episodes whose mean beats the size threshold."""
    if state.done:
        return state
    state.recent.append(episode_steps)
    if len(state.recent) >= CURRICULUM_WINDOW and \
            float(np.mean(state.recent)) < CURRICULUM_THRESHOLDS[state.size]:
        if state.size_idx + 1 >= len(state.sizes):
            state.done = True
        else:
            state.size_idx += 1
            state.recent.clear()
    return state


def init_all_params(cfg: TrainConfig, seed=None) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {}
    params.update(vm.init_params(rng, cfg))
    params.update(loc.init_params(rng, cfg.rlc_hidden, cfg.lambda_init))
    params.update(mp.init_params(rng))
    params.update(ag.init_params(rng, cfg.agent_hidden))
    return params


def fresh_store(cfg: TrainConfig, dtype=np.float32) -> nx.ParamStore:
    store = nx.ParamStore(dtype=dtype)
    store.register_dict(init_all_params(cfg))
    return store


def make_training_pools(cfg: TrainConfig) -> dict[int, list[mw.MazeSpec]]:
    sizes = sorted(set(cfg.start_sizes) | set(cfg.curriculum_sizes))
    pools = {}
    for size in sizes:
        seeds = np.random.SeedSequence([cfg.seed, size, 0xA11CE]).generate_state(
            cfg.train_mazes_per_size)
        pools[size] = [mw.generate_maze(size, int(s)) for s in seeds]
    return pools


@dataclass
class _ModulePass:
    belief_np: np.ndarray
    entropy: float
    s_np: np.ndarray
    sttd: np.ndarray
    dist: float
    belief: loc.Belief | None       # recorded tensors (None in oracle mode)
    state_after: loc.RlcState | None
    logits: nx.Tensor | None
    value: nx.Tensor | None
    true_cell: int
    true_local: np.ndarray | None


class Worker:
    """One actor-learner: environment, recurrent state, history, curriculum."""

    def __init__(self, wid: int, cfg: TrainConfig, pools, start_size: int):
        self.wid = wid
        self.cfg = cfg
        self.pools = pools
        self.oracle = cfg.oracle_mode
        if self.oracle not in ("none", "both"):
            raise ValueError(f"training supports oracle_mode none|both, got {self.oracle!r}")
        sizes = tuple(s for s in cfg.curriculum_sizes if s >= start_size) or (start_size,)
        self.curriculum = CurriculumState(sizes=sizes)
        self.history = ExperienceHistory(cfg.history_capacity)
        self.rng_policy = np.random.default_rng(np.random.SeedSequence([cfg.seed, wid, 1]))
        self.rng_maze = np.random.default_rng(np.random.SeedSequence([cfg.seed, wid, 2]))
        self.rng_reset = np.random.default_rng(np.random.SeedSequence([cfg.seed, wid, 3]))
        self.rng_vlm = np.random.default_rng(np.random.SeedSequence([cfg.seed, wid, 4]))
        self.rng_rm = np.random.default_rng(np.random.SeedSequence([cfg.seed, wid, 5]))
        self.episode_index = 0
        self.episode_rows: list[tuple] = []
        self._gt_plans: dict[int, mp.PlanGrid] = {}
        self._needs_reset = True
        self.env: mw.EnvState | None = None

    # -- episode plumbing ---------------------------------------------------

    def _start_episode(self) -> None:
        pool = self.pools[self.curriculum.size]
        self.maze = pool[int(self.rng_maze.integers(len(pool)))]
        self.maze_id = id(self.maze)
        self.env = mw.reset(self.maze, heading=float(self.rng_reset.uniform(0.0, 360.0)))
        self.raster = self.maze.raster
        self.side = self.maze.width * mw.FINE
        self.rlc_np = (np.array([[0., 0, 0], [0, 1, 0], [0, 0, 0]]),
                       np.zeros((self.cfg.local_window,) * 2),
                       np.zeros((self.cfg.local_window,) * 2))
        self.obs = mw.render(self.maze, self.env.pose, self.cfg.obs_size)
        self.last_action = -1
        self.last_ext_reward = 0.0
        self.episode_steps = 0
        self.episode_intrinsic = 0.0
        self.plan: mp.PlanGrid | None = None
        self._needs_reset = False

    def _oracle_plan(self) -> mp.PlanGrid:
        cached = self._gt_plans.get(self.maze_id)
        if cached is None:
            cached = mp.plan(mp.ground_truth_values(self.maze), self.cfg.plan_iterations)
            self._gt_plans[self.maze_id] = cached
        return cached

    def _refresh_plan(self, params) -> None:
        if self.oracle == "both":
            self.plan = self._oracle_plan()
            return
        with nx.no_grad():
            rm = mp.reward_map(self.raster, params).data
        self.plan = mp.plan(mp.classify(rm, self.maze.width, self.cfg.classify_temperature),
                            self.cfg.plan_iterations)

    def _module_pass(self, params, state: loc.RlcState | None, record: bool) -> _ModulePass:
        pose = self.env.pose
        true_cell = mw.true_cell_index(pose, self.maze)
        if self.oracle == "both":
            belief_np = onehot_belief(self.side * self.side, true_cell)
            entropy = 0.0
            sttd = self.plan.sttd[true_cell]
            dist = float(self.plan.dist[true_cell])
            s_np = np.zeros((3, 3))   # replaced by true displacement at reward time
            belief = state_after = None
            true_local = None
        else:
            with nx.no_grad():
                out = vm.forward(self.obs.image, self.obs.angle_bits, params, self.cfg)
            vmap = out.value.data
            if record:
                state_after, belief = loc.rlc_step(
                    state, vmap, self.raster, self.obs.angle_bits, self.last_action,
                    self.last_ext_reward, params, self.cfg.belief_temperature)
            else:
                with nx.no_grad():
                    state_after, belief = loc.rlc_step(
                        state, vmap, self.raster, self.obs.angle_bits, self.last_action,
                        self.last_ext_reward, params, self.cfg.belief_temperature)
            belief_np = belief.p.data
            entropy = belief.entropy
            s_np = state_after.s_prev.data
            sttd, dist = mp.query_plan(self.plan, belief_np)
            true_local = mw.true_local_map(self.maze, pose, self.cfg.local_window)
        inp = ag.build_input(self.obs.angle_bits, self.last_ext_reward, entropy, sttd, dist)
        if record:
            logits, value = ag.forward(inp, params)
        else:
            with nx.no_grad():
                logits, value = ag.forward(inp, params)
        return _ModulePass(belief_np=belief_np, entropy=entropy, s_np=s_np, sttd=sttd,
                           dist=dist, belief=belief if self.oracle == "none" else None,
                           state_after=state_after if self.oracle == "none" else None,
                           logits=logits, value=value, true_cell=true_cell,
                           true_local=true_local)

    def _push_frame(self, action: int, ext_reward: float, state_np: tuple) -> None:
        pose = self.env.pose
        frame = ExperienceFrame(
            image=self.obs.image, angle_bits=self.obs.angle_bits,
            last_action=action, last_reward=ext_reward,
            reward_class=classify_reward(ext_reward),
            true_cell=mw.true_cell_index(pose, self.maze),
            true_center=np.array([int(pose.row) + 0.5, int(pose.col) + 0.5]),
            maze_id=self.maze_id,
            visible_target=mw.true_visible_local_map(self.maze, pose, self.cfg.local_window),
            rlc_state=state_np, raster=self.raster)
        self.history.push(frame)

    # -- one training iteration ----------------------------------------------

    def iteration(self, store: nx.ParamStore) -> int:
        """Roll out, build the four losses, apply gradients. Returns env steps."""
        cfg = self.cfg
        params = store.tensors(requires_grad=True)
        if self._needs_reset:
            self._start_episode()
        if self.plan is None or self.oracle == "none":
            self._refresh_plan(params)

        state = loc.RlcState(*(nx.Tensor(a.copy()) for a in self.rlc_np))
        steps_done = 0
        agent_steps: list[ag.AgentStep] = []
        beliefs, true_cells = [], []
        last_state_after = None
        last_true_local = None
        episode_ended = False
        success = False
        prev_pass: _ModulePass | None = None
        prev_cell = None

        for _ in range(cfg.rollout_len):
            out = self._module_pass(params, state, record=True)
            if prev_pass is not None:
                self._complete_reward(agent_steps[-1], prev_pass, out, prev_cell)
            if self.oracle == "none":
                beliefs.append(out.belief)
                true_cells.append(out.true_cell)
                state = out.state_after
                last_state_after = out.state_after
                last_true_local = out.true_local
            action = ag.sample_action(out.logits.data, self.rng_policy)
            prev_cell = (int(self.env.pose.row), int(self.env.pose.col))
            self.env, ext_reward, done = mw.env_step(self.env, mw.Action(action))
            steps_done += 1
            self.episode_steps += 1
            self.obs = mw.render(self.maze, self.env.pose, cfg.obs_size)
            if self.oracle == "none":
                self.rlc_np = tuple(a.data.copy() for a in
                                    (state.s_prev, state.lm_est, state.lm_mfb))
                self._push_frame(action, ext_reward, self.rlc_np)
            agent_steps.append(ag.AgentStep(out.logits, out.value, action, ext_reward))
            self.last_action = action
            self.last_ext_reward = ext_reward
            prev_pass = out
            if done or self.episode_steps >= cfg.episode_cap:
                episode_ended = True
                success = done
                break

        # closing pass: intrinsics for the final action plus the bootstrap value
        final_state = loc.RlcState(*(nx.Tensor(a.copy()) for a in self.rlc_np)) \
            if self.oracle == "none" else None
        closing = self._module_pass(params, final_state, record=False)
        self._complete_reward(agent_steps[-1], prev_pass, closing, prev_cell)
        bootstrap = 0.0 if episode_ended else float(closing.value.data)

        grads = self._apply_losses(params, agent_steps, bootstrap, beliefs, true_cells,
                                   last_state_after, last_true_local)
        store.apply_gradients(grads, cfg.lr, cfg.rms_decay, cfg.rms_eps)

        if episode_ended:
            intr_mean = self.episode_intrinsic / max(self.episode_steps, 1)
            self.episode_rows.append((self.wid, self.curriculum.size, self.episode_index,
                                      self.episode_steps, int(success), intr_mean))
            curriculum_update(self.curriculum, self.episode_steps)
            self.episode_index += 1
            self._needs_reset = True
        return steps_done

    def _complete_reward(self, step: ag.AgentStep, before: _ModulePass,
                         after: _ModulePass, prev_cell) -> None:
        """Fold the intrinsic rewards of the transition into the step reward."""
        if self.oracle == "both":
            now = (int(self.env.pose.row), int(self.env.pose.col))
            ego = np.zeros((3, 3))
            ego[now[0] - prev_cell[0] + 1, now[1] - prev_cell[1] + 1] = 1.0
        else:
            ego = after.s_np
        explor, exploit = ag.intrinsic_rewards(before.entropy, after.entropy,
                                               ego, before.sttd)
        intrinsic = self.cfg.w_explor * explor + self.cfg.w_exploit * exploit
        step.reward += intrinsic
        self.episode_intrinsic += intrinsic

    def _apply_losses(self, params, agent_steps, bootstrap, beliefs, true_cells,
                      last_state_after, last_true_local) -> dict[str, np.ndarray]:
        cfg = self.cfg
        total = None

        def accumulate(term, weight):
            nonlocal total
            if term is None or weight == 0.0:
                return
            weighted = nx.mul(term, weight)
            total = weighted if total is None else nx.add(total, weighted)

        loss_a, _ = ag.a3c_loss(agent_steps, bootstrap, cfg.gamma,
                                cfg.entropy_beta, cfg.value_coef)
        accumulate(loss_a, cfg.loss_weight_agent)

        if self.oracle == "none" and beliefs and cfg.loss_weight_loc:
            xent, dist, lm = loc.localization_loss(
                beliefs, true_cells, self.side, last_state_after.lm_est, last_true_local)
            accumulate(nx.add(nx.add(xent, dist), lm), cfg.loss_weight_loc)

        if self.oracle == "none" and len(self.history) and cfg.loss_weight_vlm:
            frames = self.history.sample_uniform(self.rng_vlm, 20)
            batch = [(f.image, f.angle_bits, f.visible_target) for f in frames]
            accumulate(vm.loss(batch, params, cfg), cfg.loss_weight_vlm)

        if self.oracle == "none" and len(self.history) and cfg.loss_weight_rm:
            frames = self.history.sample_reward_skewed(self.rng_rm, 20)
            rm_batch = []
            for f in frames:
                with nx.no_grad():
                    out = vm.forward(f.image, f.angle_bits, params, self.cfg)
                    fstate = loc.RlcState(*(nx.Tensor(a) for a in f.rlc_state))
                    _, belief = loc.rlc_step(fstate, out.value.data, f.raster,
                                             f.angle_bits, f.last_action, f.last_reward,
                                             params, cfg.belief_temperature)
                rm_batch.append((f.raster, belief.p.data, f.reward_class))
            accumulate(mp.reward_map_loss(rm_batch, params), cfg.loss_weight_rm)

        total.backward()
        return {name: t.grad for name, t in params.items() if t.grad is not None}


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

class _Budget:
    def __init__(self, limit: int):
        self.limit = limit
        self.used = 0
        self._lock = threading.Lock()

    def consume(self, steps: int) -> None:
        with self._lock:
            self.used += steps

    def exhausted(self) -> bool:
        return self.used >= self.limit


def train(cfg: TrainConfig, out_dir, resume_from=None, progress=None) -> Path:
    """Run workers until every curriculum finishes or the step budget runs out.

    Writes checkpoint files and a per-episode metrics CSV under out_dir and
    returns the final checkpoint path. With workers == 1 the run is strictly
    deterministic and a resumable state file is written next to the
    checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if resume_from is not None:
        store, workers, budget_used = _load_train_state(resume_from, cfg)
        budget = _Budget(cfg.step_budget)
        budget.used = budget_used
    else:
        store = fresh_store(cfg)
        pools = make_training_pools(cfg)
        if len(cfg.start_sizes) != cfg.workers:
            raise ValueError("start_sizes must have one entry per worker")
        workers = [Worker(w, cfg, pools, cfg.start_sizes[w]) for w in range(cfg.workers)]
        budget = _Budget(cfg.step_budget)

    csv_path = out_dir / "episodes.csv"
    csv_lock = threading.Lock()
    new_csv = resume_from is None or not csv_path.exists()
    csv_file = open(csv_path, "w" if new_csv else "a", newline="")
    writer = csv.writer(csv_file)
    if new_csv:
        writer.writerow(["worker", "size", "episode", "steps", "success", "intrinsic_mean"])

    ckpt_path = out_dir / "checkpoint.bin"
    save_lock = threading.RLock()
    next_save = [cfg.checkpoint_every]

    def flush_worker(worker: Worker) -> None:
        with csv_lock:
            rows, worker.episode_rows = worker.episode_rows, []
            for row in rows:
                writer.writerow(row)
            csv_file.flush()

    def save(converged: bool) -> None:
        meta = {"config": cfg.to_dict(), "steps": budget.used, "converged": converged,
                "worker_sizes": [w.curriculum.size for w in workers],
                "workers_done": [w.curriculum.done for w in workers]}
        with save_lock:
            store.save(ckpt_path, meta=meta)

    def loop(worker: Worker) -> None:
        while not worker.curriculum.done and not budget.exhausted():
            steps = worker.iteration(store)
            budget.consume(steps)
            if worker.episode_rows:
                flush_worker(worker)
                if progress is not None:
                    progress(worker, budget.used)
            if budget.used >= next_save[0]:
                with save_lock:
                    if budget.used >= next_save[0]:
                        next_save[0] += cfg.checkpoint_every
                        save(False)

    if cfg.workers == 1:
        loop(workers[0])
    else:
        threads = [threading.Thread(target=loop, args=(w,), daemon=True) for w in workers]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    converged = all(w.curriculum.done for w in workers)
    save(converged)
    if cfg.workers == 1:
        _save_train_state(out_dir / "train_state.pkl", store, workers, budget.used)
    csv_file.close()
    return ckpt_path


def _save_train_state(path, store: nx.ParamStore, workers, budget_used: int) -> None:
    state = {
        "params": {k: v.copy() for k, v in store._params.items()},
        "accum": {k: v.copy() for k, v in store._accum.items()},
        "version": store.version,
        "budget_used": budget_used,
        "workers": [{
            "wid": w.wid,
            "rngs": [g.bit_generator.state for g in
                     (w.rng_policy, w.rng_maze, w.rng_reset, w.rng_vlm, w.rng_rm)],
            "curriculum": (w.curriculum.sizes, w.curriculum.size_idx,
                           list(w.curriculum.recent), w.curriculum.done),
            "episode_index": w.episode_index,
            "needs_reset": w._needs_reset,
            "worker_blob": pickle.dumps(_worker_episode_blob(w)),
        } for w in workers],
    }
    with open(path, "wb") as fh:
        pickle.dump(state, fh)


def _worker_episode_blob(w: Worker):
    if w._needs_reset or w.env is None:
        return None
    return {"maze": (w.maze.width, w.maze.seed, w.maze.grid.copy()),
            "pose": (w.env.pose.row, w.env.pose.col, w.env.pose.heading, w.env.pose.vel.copy()),
            "steps": w.env.steps, "rlc_np": tuple(a.copy() for a in w.rlc_np),
            "last_action": w.last_action, "last_ext_reward": w.last_ext_reward,
            "episode_steps": w.episode_steps, "episode_intrinsic": w.episode_intrinsic,
            "history": w.history, "obs_image": w.obs.image, "obs_bits": w.obs.angle_bits}


def _load_train_state(path, cfg: TrainConfig):
    with open(path, "rb") as fh:
        state = pickle.load(fh)
    store = nx.ParamStore(dtype=np.float32)
    store.register_dict(state["params"])
    for k, v in state["accum"].items():
        store._accum[k] = np.ascontiguousarray(v, dtype=store.dtype)
    store.version = state["version"]
    pools = make_training_pools(cfg)
    workers = []
    for wstate in state["workers"]:
        w = Worker(wstate["wid"], cfg, pools, cfg.start_sizes[wstate["wid"]])
        for gen, gstate in zip((w.rng_policy, w.rng_maze, w.rng_reset, w.rng_vlm, w.rng_rm),
                               wstate["rngs"]):
            gen.bit_generator.state = gstate
        sizes, idx, recent, done = wstate["curriculum"]
        w.curriculum = CurriculumState(sizes=tuple(sizes), size_idx=idx, done=done)
        w.curriculum.recent.extend(recent)
        w.episode_index = wstate["episode_index"]
        w._needs_reset = wstate["needs_reset"]
        blob = pickle.loads(wstate["worker_blob"]) if wstate["worker_blob"] else None
        if blob is not None:
            width, seed, grid = blob["maze"]
            w.maze = mw.MazeSpec(width=width, grid=grid, seed=seed)
            w.maze_id = id(w.maze)
            w.raster = w.maze.raster
            w.side = w.maze.width * mw.FINE
            row, col, heading, vel = blob["pose"]
            pose = mw.Pose(row=row, col=col, heading=heading, vel=vel)
            w.env = mw.EnvState(maze=w.maze, pose=pose, steps=blob["steps"])
            w.rlc_np = blob["rlc_np"]
            w.last_action = blob["last_action"]
            w.last_ext_reward = blob["last_ext_reward"]
            w.episode_steps = blob["episode_steps"]
            w.episode_intrinsic = blob["episode_intrinsic"]
            w.history = blob["history"]
            w.obs = mw.Observation(image=blob["obs_image"], angle_bits=blob["obs_bits"])
            w.plan = None
        workers.append(w)
    return store, workers, state["budget_used"]
