"""Reactive policy/value network and the intrinsic reward shaping.

The agent never sees pixels; its input is the compass code, the last
extrinsic reward, the localization entropy and the planner's direction/
distance query. Exploration is rewarded by entropy decrease of the belief,
exploitation by egomotion aligning with the previously suggested direction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import InvalidBatch

N_ACTIONS = 6
INPUT_SIZE = 30 + 1 + 1 + 4 + 1

# egomotion grid -> (east, north) displacement components
_EGO_EAST = np.tile(np.array([-1.0, 0.0, 1.0]), (3, 1))
_EGO_NORTH = np.tile(np.array([1.0, 0.0, -1.0])[:, None], (1, 3))


def init_params(rng: np.random.Generator, hidden: int = 64) -> dict[str, np.ndarray]:
    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    return {
        "agent/fc1_w": he((INPUT_SIZE, hidden), INPUT_SIZE),
        "agent/fc1_b": np.zeros(hidden),
        "agent/fc2_w": he((hidden, hidden), hidden),
        "agent/fc2_b": np.zeros(hidden),
        "agent/policy_w": rng.normal(0.0, 0.01, size=(hidden, N_ACTIONS)),
        "agent/policy_b": np.zeros(N_ACTIONS),
        "agent/value_w": rng.normal(0.0, 0.01, size=(hidden, 1)),
        "agent/value_b": np.zeros(1),
    }


def build_input(angle_bits, last_reward: float, entropy: float,
                sttd: np.ndarray, target_dist: float) -> np.ndarray:
    return np.concatenate([np.asarray(angle_bits, dtype=float),
                           [last_reward, entropy], np.asarray(sttd, dtype=float),
                           [target_dist]])


def forward(inp, params) -> tuple[nx.Tensor, nx.Tensor]:
    """Policy logits (6,) and state value (scalar)."""
    h = nx.dense(nx.as_tensor(inp), params["agent/fc1_w"], params["agent/fc1_b"],
                 activation="relu")
    h = nx.dense(h, params["agent/fc2_w"], params["agent/fc2_b"], activation="relu")
    logits = nx.dense(h, params["agent/policy_w"], params["agent/policy_b"])
    value = nx.reshape(nx.dense(h, params["agent/value_w"], params["agent/value_b"]), ())
    return logits, value


def sample_action(logits: np.ndarray, rng: np.random.Generator) -> int:
    z = logits - logits.max()
    probs = np.exp(z)
    probs /= probs.sum()
    return int(rng.choice(N_ACTIONS, p=probs))


def greedy_action(logits: np.ndarray) -> int:
    return int(np.argmax(logits))


def intrinsic_rewards(entropy_prev: float, entropy_now: float,
                      egomotion: np.ndarray, sttd_prev: np.ndarray
                      ) -> tuple[float, float]:
    """(exploration, exploitation) intrinsic rewards.

    Exploration pays for belief entropy decrease. Exploitation is the dot
    product of the 2D egomotion vector and the previously suggested
    direction vector, positive iff they are within 90 degrees.
    """
    explor = entropy_prev - entropy_now
    e_east = float((egomotion * _EGO_EAST).sum())
    e_north = float((egomotion * _EGO_NORTH).sum())
    d_east = float(sttd_prev[1] - sttd_prev[3])
    d_north = float(sttd_prev[0] - sttd_prev[2])
    return explor, e_east * d_east + e_north * d_north


@dataclass
class AgentStep:
    logits: nx.Tensor     # recorded policy logits
    value: nx.Tensor      # recorded value estimate
    action: int
    reward: float         # extrinsic plus weighted intrinsic


def a3c_loss(steps, bootstrap_value: float, gamma: float = 0.99,
             entropy_beta: float = 0.01, value_coef: float = 0.5,
             frozen_advantages=None) -> tuple[nx.Tensor, dict]:
    """Advantage actor-critic loss over one rollout.

    Discounted returns bootstrap from the final value; the advantage is a
    constant in the policy term (no gradient through the critic there).
    frozen_advantages pins those constants explicitly, which finite
    difference checks need (re-evaluations must not drift the advantage).
    """
    if not steps:
        raise InvalidBatch("a3c loss needs at least one step")
    returns = []
    acc = bootstrap_value
    for step in reversed(steps):
        acc = step.reward + gamma * acc
        returns.append(acc)
    returns.reverse()
    total = None
    parts = {"policy": 0.0, "value": 0.0, "entropy": 0.0, "returns": returns}
    for i, (step, ret) in enumerate(zip(steps, returns)):
        log_pi = nx.log_softmax(step.logits)
        advantage = ret - float(step.value.data) if frozen_advantages is None \
            else frozen_advantages[i]
        policy_term = nx.mul(nx.pick(log_pi, step.action), -advantage)
        diff = nx.sub(ret, step.value)
        value_term = nx.mul(nx.mul(diff, diff), value_coef)
        entropy = nx.mul(nx.tsum(nx.mul(nx.exp(log_pi), log_pi)), -1.0)
        term = nx.sub(nx.add(policy_term, value_term), nx.mul(entropy, entropy_beta))
        total = term if total is None else nx.add(total, term)
        parts["policy"] += float(policy_term.data)
        parts["value"] += float(value_term.data)
        parts["entropy"] += float(entropy.data)
    return total, parts
