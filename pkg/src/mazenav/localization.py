"""Recurrent localization: egomotion, local map integration, map correlation.

One step estimates the agent's per-step displacement as a 3x3 distribution,
shifts the accumulated egocentric local map accordingly, folds in the fresh
visible excerpt, correlates the result against the full map raster and
normalizes the correlation into a belief over all fine cells. A belief
weighted sum of map windows feeds back into the next step to complete unseen
parts of the local map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import InvalidBatch

N_ACTIONS = 6


@dataclass
class RlcState:
    s_prev: nx.Tensor     # (3, 3) egomotion distribution
    lm_est: nx.Tensor     # (L, L) accumulated local map in [-0.5, 0.5]
    lm_mfb: nx.Tensor     # (L, L) map feedback from the previous belief

    def detached(self) -> "RlcState":
        return RlcState(nx.Tensor(self.s_prev.data.copy()),
                        nx.Tensor(self.lm_est.data.copy()),
                        nx.Tensor(self.lm_mfb.data.copy()))


@dataclass
class Belief:
    p: nx.Tensor          # (N,) probabilities
    log_p: nx.Tensor      # (N,) log probabilities
    entropy: float        # normalized, in [0, 1]


def initial_state(window: int = 15) -> RlcState:
    s = np.zeros((3, 3))
    s[1, 1] = 1.0
    zeros = np.zeros((window, window))
    return RlcState(nx.Tensor(s), nx.Tensor(zeros), nx.Tensor(zeros.copy()))


def init_params(rng: np.random.Generator, hidden: int = 32,
                lambda_init: float = 0.1) -> dict[str, np.ndarray]:
    fan_in = 9 + 30 + N_ACTIONS + 1
    return {
        "loc/f1_w": rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, hidden)),
        "loc/f1_b": np.zeros(hidden),
        "loc/f2_w": rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, 9)),
        "loc/f2_b": np.zeros(9),
        "loc/lam": np.array([lambda_init]),
    }


def _motion_features(state: RlcState, angle_bits, last_action: int, last_reward: float):
    onehot = np.zeros(N_ACTIONS)
    onehot[int(last_action)] = 1.0
    return nx.concat([nx.reshape(state.s_prev, (9,)), nx.as_tensor(angle_bits),
                      nx.Tensor(onehot), nx.Tensor(np.array([last_reward]))])


def egomotion(state: RlcState, vmap, angle_bits, last_action, last_reward,
              params) -> nx.Tensor:
    """3x3 displacement distribution: softmax(f(...) + lm_est-vs-excerpt match)."""
    match = nx.correlate_shifts(state.lm_est, nx.as_tensor(vmap), 1)
    feats = _motion_features(state, angle_bits, last_action, last_reward)
    hidden = nx.dense(feats, params["loc/f1_w"], params["loc/f1_b"], activation="relu")
    logits = nx.reshape(nx.dense(hidden, params["loc/f2_w"], params["loc/f2_b"]), (3, 3))
    return nx.softmax(nx.add(logits, match))


def shift(grid, s) -> nx.Tensor:
    """Translate a grid by the 3x3 offset-weight kernel (row 0 = moved north)."""
    return nx.correlate2d(grid, s, "same")


def normalized_entropy(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum() / np.log(p.size))


def rlc_step(state: RlcState, vmap, raster, angle_bits, last_action, last_reward,
             params, temperature: float = 1.0, ego_override=None
             ) -> tuple[RlcState, Belief]:
    """One localization step; returns the new recurrent state and the belief.

    vmap enters as a constant (module boundary); gradients flow only through
    the motion network f, the feedback weight lambda and the recurrent state.
    ego_override replaces the estimated egomotion with a given distribution
    (oracle mode).
    """
    vmap_t = nx.as_tensor(vmap)
    raster_t = nx.as_tensor(raster)
    if ego_override is not None:
        s = nx.as_tensor(ego_override)
    else:
        s = egomotion(state, vmap_t, angle_bits, last_action, last_reward, params)
    lm_est = nx.clip_unit(nx.add(shift(state.lm_est, s), vmap_t))
    fed_back = nx.mul(params["loc/lam"], shift(state.lm_mfb, s))
    combined = nx.clip_unit(nx.add(lm_est, fed_back))
    logits = nx.correlate2d(raster_t, combined, "same")
    log_p = nx.log_softmax(nx.reshape(logits, (-1,)), temperature)
    p = nx.exp(log_p)
    window = state.lm_est.data.shape[0]
    lm_mfb = nx.correlate_shifts(raster_t, nx.reshape(p, raster_t.data.shape), window // 2)
    belief = Belief(p=p, log_p=log_p, entropy=normalized_entropy(p.data))
    return RlcState(s_prev=s, lm_est=lm_est, lm_mfb=lm_mfb), belief


_CENTER_CACHE: dict[int, np.ndarray] = {}


def cell_centers(side: int) -> np.ndarray:
    """(N, 2) row/col center coordinates of every fine cell, row-major."""
    centers = _CENTER_CACHE.get(side)
    if centers is None:
        rr, cc = np.mgrid[0:side, 0:side]
        centers = np.stack([rr.ravel() + 0.5, cc.ravel() + 0.5], axis=1)
        _CENTER_CACHE[side] = centers
    return centers


def localization_loss(beliefs, true_cells, side, final_lm_est, final_true_local
                      ) -> tuple[nx.Tensor, nx.Tensor, nx.Tensor]:
    """(cross entropy, centroid distance, final local map) loss components.

    The distance term compares each step's true cell center against the
    belief-weighted centroid of all cell centers. The local map term is
    evaluated once, on the rollout's last step.
    """
    if not beliefs:
        raise InvalidBatch("localization loss needs at least one step")
    centers = nx.Tensor(cell_centers(side))
    xent = None
    dist = None
    for belief, true_cell in zip(beliefs, true_cells):
        term = nx.mul(nx.pick(belief.log_p, true_cell), -1.0)
        xent = term if xent is None else nx.add(xent, term)
        centroid = nx.matmul(belief.p, centers)
        offset = nx.norm2(nx.sub(nx.Tensor(cell_centers(side)[true_cell]), centroid))
        dist = offset if dist is None else nx.add(dist, offset)
    lm = nx.norm2(nx.sub(final_lm_est, nx.as_tensor(final_true_local)))
    return xent, dist, lm
