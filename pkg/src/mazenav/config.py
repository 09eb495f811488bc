"""Run configuration: dataclass, key=value file format, (de)serialization.

Config files are plain text, one `key = value` per line, '#' comments.
Values are parsed as python literals where possible (ints, floats, booleans,
tuples like `5, 5, 7, 7`), otherwise kept as strings.
"""

from __future__ import annotations

import ast
from dataclasses import asdict, dataclass, fields
from pathlib import Path

CURRICULUM_THRESHOLDS = {5: 60.0, 7: 100.0, 9: 140.0, 11: 180.0, 13: 220.0}
CURRICULUM_WINDOW = 50


@dataclass
class TrainConfig:
    seed: int = 1
    workers: int = 4
    start_sizes: tuple = (5, 5, 7, 7)
    curriculum_sizes: tuple = (5, 7)
    rollout_len: int = 20
    episode_cap: int = 4500
    history_capacity: int = 2000
    train_mazes_per_size: int = 20
    step_budget: int = 20_000_000
    checkpoint_every: int = 250_000

    lr: float = 2e-4
    rms_decay: float = 0.99
    rms_eps: float = 0.01
    gamma: float = 0.99
    entropy_beta: float = 0.01
    value_coef: float = 0.5
    w_explor: float = 1.0
    w_exploit: float = 0.5
    loss_weight_agent: float = 1.0
    loss_weight_loc: float = 1.0
    loss_weight_vlm: float = 1.0
    loss_weight_rm: float = 1.0

    obs_size: int = 32
    local_window: int = 15
    conv1_filters: int = 8
    conv1_kernel: int = 5
    conv1_stride: int = 2
    conv2_filters: int = 16
    conv2_kernel: int = 3
    conv2_stride: int = 2
    fc_visual: int = 128
    fc_merge: int = 128
    rlc_hidden: int = 32
    lambda_init: float = 0.25
    belief_temperature: float = 1.0
    classify_temperature: float = 0.01
    plan_iterations: int = 200
    agent_hidden: int = 64

    oracle_mode: str = "none"   # none | perfect_position | perfect_sttd | both

    def to_dict(self) -> dict:
        d = asdict(self)
        d["start_sizes"] = list(self.start_sizes)
        d["curriculum_sizes"] = list(self.curriculum_sizes)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            if key not in known:
                raise KeyError(f"unknown config key {key!r}")
            if key in ("start_sizes", "curriculum_sizes"):
                value = tuple(int(v) for v in value) if not isinstance(value, int) else (value,)
            kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        data = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            try:
                data[key] = ast.literal_eval(value)
            except (ValueError, SyntaxError):
                data[key] = value
        return cls.from_dict(data)

    def save(self, path) -> None:
        lines = [f"{k} = {v!r}" for k, v in self.to_dict().items()]
        Path(path).write_text("\n".join(lines) + "\n")
