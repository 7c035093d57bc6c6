"""Whole-volume segmentation from non-overlapping output tiles."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from itertools import product
from typing import Sequence

import numpy as np

from .network import Network, forward

TILE = 17


@dataclass(frozen=True)
class TilingPlan:
    volume_shape: tuple[int, int, int]
    padded_shape: tuple[int, int, int]
    pad: tuple[tuple[int, int], ...]
    tiles_per_axis: tuple[int, int, int]
    tile: int
    margin: int

    @property
    def window(self) -> int:
        return self.tile + 2 * self.margin

    @property
    def origins(self) -> list[tuple[int, int, int]]:
        """Input-window origins in padded coordinates, lexicographic order.

        The window at origin ``o`` produces output voxels ``o .. o+tile`` of the
        (uncropped) output grid, which maps 1:1 onto the original volume.
        """
        return [tuple(i * self.tile for i in idx)
                for idx in product(*(range(n) for n in self.tiles_per_axis))]

    @property
    def num_tiles(self) -> int:
        return math.prod(self.tiles_per_axis)


def plan_tiling(volume_shape: Sequence[int], tile=TILE, margin=9) -> TilingPlan:
    """Mirror-pad each axis to ``2*margin + tile*ceil(n/tile)`` and cut it into tiles."""
    shape = tuple(int(n) for n in volume_shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ValueError(f"volume shape must be three positive ints, got {volume_shape}")
    counts = tuple(math.ceil(n / tile) for n in shape)
    padded = tuple(2 * margin + tile * c for c in counts)
    pad = tuple((margin, p - n - margin) for n, p in zip(shape, padded))
    return TilingPlan(shape, padded, pad, counts, tile, margin)


def pad_volume(volume: np.ndarray, plan: TilingPlan) -> np.ndarray:
    return np.pad(volume, plan.pad, mode="symmetric")


def segment_volume(net: Network, volumes: Sequence[np.ndarray], tile=TILE):
    """Tiled inference.  Returns ``(labels (D,H,W), probabilities (C,D,H,W))``.

    Labels are the per-voxel arg-max, ties resolved to the lowest class index.
    """
    labels, probs, _ = timed_segment(net, volumes, tile)
    return labels, probs


def timed_segment(net: Network, volumes: Sequence[np.ndarray], tile=TILE):
    """As :func:`segment_volume` plus ``{"tiles", "ms_total", "ms_per_tile"}``."""
    if len(volumes) != net.spec.num_modalities:
        raise ValueError(f"expected {net.spec.num_modalities} modalities, got {len(volumes)}")
    shape = volumes[0].shape
    for i, v in enumerate(volumes):
        if v.shape != shape:
            raise ValueError(f"modality {i} shape {v.shape} != {shape}")
    t0 = time.perf_counter()
    plan = plan_tiling(shape, tile, net.depth)
    padded = [pad_volume(np.asarray(v, dtype=net.dtype), plan) for v in volumes]
    out_shape = tuple(tile * c for c in plan.tiles_per_axis)
    probs = np.empty((net.spec.num_classes,) + out_shape, dtype=net.dtype)
    w = plan.window
    for o in plan.origins:
        win = tuple(slice(a, a + w) for a in o)
        inputs = [p[win][None, None] for p in padded]
        out = forward(net, inputs, mode="inference")
        probs[(slice(None),) + tuple(slice(a, a + tile) for a in o)] = out[0]
    probs = probs[(slice(None),) + tuple(slice(0, n) for n in shape)]
    labels = np.argmax(probs, axis=0).astype(np.uint8 if net.spec.num_classes <= 256 else np.int64)
    ms = (time.perf_counter() - t0) * 1000
    report = {"tiles": plan.num_tiles, "ms_total": ms, "ms_per_tile": ms / plan.num_tiles}
    return labels, np.ascontiguousarray(probs), report
