"""Visible local map network: one RGB frame + compass code -> map excerpt.

Two heads share a trunk: one estimates the local map excerpt, the other an
estimate of the currently visible field which multiplicatively gates the
excerpt. The gate has no direct supervision; it is shaped end to end by the
excerpt matching loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import TrainConfig
from .errors import InvalidBatch


@dataclass
class VisibleLocalMap:
    excerpt: nx.Tensor    # (L, L) in [-0.5, 0.5]
    gate: nx.Tensor       # (L, L) in [0, 1]
    value: nx.Tensor      # excerpt * gate


def feature_size(cfg: TrainConfig) -> int:
    s = nx.conv_output_size(cfg.obs_size, cfg.conv1_kernel, cfg.conv1_stride)
    s = nx.conv_output_size(s, cfg.conv2_kernel, cfg.conv2_stride)
    return s * s * cfg.conv2_filters


def init_params(rng: np.random.Generator, cfg: TrainConfig) -> dict[str, np.ndarray]:
    c1, k1 = cfg.conv1_filters, cfg.conv1_kernel
    c2, k2 = cfg.conv2_filters, cfg.conv2_kernel
    flat = feature_size(cfg)
    merged_in = cfg.fc_visual + 30
    out = cfg.local_window ** 2

    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    return {
        "vlm/conv1_w": he((c1, 3, k1, k1), 3 * k1 * k1),
        "vlm/conv1_b": np.zeros(c1),
        "vlm/conv2_w": he((c2, c1, k2, k2), c1 * k2 * k2),
        "vlm/conv2_b": np.zeros(c2),
        "vlm/fc1_w": he((flat, cfg.fc_visual), flat),
        "vlm/fc1_b": np.zeros(cfg.fc_visual),
        "vlm/fc2_w": he((merged_in, cfg.fc_merge), merged_in),
        "vlm/fc2_b": np.zeros(cfg.fc_merge),
        "vlm/excerpt_w": rng.normal(0.0, np.sqrt(1.0 / cfg.fc_merge), size=(cfg.fc_merge, out)),
        "vlm/excerpt_b": np.zeros(out),
        "vlm/gate_w": rng.normal(0.0, np.sqrt(1.0 / cfg.fc_merge), size=(cfg.fc_merge, out)),
        "vlm/gate_b": np.zeros(out),
    }


def forward(image, angle_bits, params, cfg: TrainConfig) -> VisibleLocalMap:
    """conv stack -> FC -> concat angle -> FC -> excerpt head, gate head."""
    feats = nx.conv_stack(image, [
        (params["vlm/conv1_w"], params["vlm/conv1_b"], cfg.conv1_stride),
        (params["vlm/conv2_w"], params["vlm/conv2_b"], cfg.conv2_stride),
    ])
    vis = nx.dense(feats, params["vlm/fc1_w"], params["vlm/fc1_b"], activation="relu")
    merged = nx.dense(nx.concat([vis, nx.as_tensor(angle_bits)]),
                      params["vlm/fc2_w"], params["vlm/fc2_b"], activation="relu")
    window = (cfg.local_window, cfg.local_window)
    excerpt = nx.reshape(nx.clip_unit(
        nx.dense(merged, params["vlm/excerpt_w"], params["vlm/excerpt_b"])), window)
    # rectified pseudo-sigmoid: clip to [-0.5, 0.5] then add 0.5, so the gate
    # can fully close (0) and fully open (1)
    gate = nx.reshape(nx.add(nx.clip_unit(
        nx.dense(merged, params["vlm/gate_w"], params["vlm/gate_b"])), 0.5), window)
    return VisibleLocalMap(excerpt=excerpt, gate=gate, value=nx.mul(excerpt, gate))


def loss(frames, params, cfg: TrainConfig) -> nx.Tensor:
    """Sum of per-frame L2 distances between predicted and true visible maps.

    Each frame supplies (image, angle_bits, target) with the target produced
    by the world's visibility oracle.
    """
    if not frames:
        raise InvalidBatch("visible-map loss needs at least one frame")
    total = None
    for image, angle_bits, target in frames:
        out = forward(image, angle_bits, params, cfg)
        dist = nx.norm2(nx.sub(out.value, nx.as_tensor(target)))
        total = dist if total is None else nx.add(total, dist)
    return total
