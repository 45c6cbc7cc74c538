"""Overlapping-tile decomposition and per-voxel majority-vote label fusion.

A volume is covered by a grid of equally sized, evenly spaced tiles
(3x3x3 = 27 by default). Per-tile predictions are fused by taking, at each
voxel, the most frequent label among all tiles covering it; ties break to
the smallest label id so fusion is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .volio import LabelMap, Volume3D, VolumeHeader


@dataclass
class TilePlan:
    volume_dims: tuple[int, int, int]
    tiles_per_axis: tuple[int, int, int]
    tile_shape: tuple[int, int, int]
    origins: list[tuple[int, int, int]]

    @property
    def num_tiles(self) -> int:
        return len(self.origins)


def _axis_origins(d: int, k: int, t: int) -> list[int]:
    if t < 1 or k < 1:
        raise ValueError(f"tiles_per_axis and tile_shape must be >= 1, got k={k}, t={t}")
    if t > d:
        raise ValueError(f"tile extent {t} exceeds volume extent {d}")
    if k * t < d:
        raise ValueError(f"coverage impossible: {k} tiles of {t} cannot cover {d}")
    if k == 1:
        return [0]
    # evenly spaced positions i*(d-t)/(k-1), rounded half-up in exact integer
    # arithmetic; spacing <= t whenever k*t >= d, so coverage is guaranteed
    return [(2 * i * (d - t) + (k - 1)) // (2 * (k - 1)) for i in range(k)]


def plan_tiles(volume_dims, tiles_per_axis=(3, 3, 3), tile_shape=None) -> TilePlan:
    """Place k evenly spaced tiles of the given shape along each axis."""
    if tile_shape is None:
        raise ValueError("tile_shape is required")
    volume_dims = tuple(int(d) for d in volume_dims)
    tiles_per_axis = tuple(int(k) for k in tiles_per_axis)
    tile_shape = tuple(int(t) for t in tile_shape)
    per_axis = [_axis_origins(d, k, t)
                for d, k, t in zip(volume_dims, tiles_per_axis, tile_shape)]
    origins = [tuple(o) for o in product(*per_axis)]
    return TilePlan(volume_dims=volume_dims, tiles_per_axis=tiles_per_axis,
                    tile_shape=tile_shape, origins=origins)


def _check_bounds(origin, tile_shape, dims) -> None:
    for o, t, d in zip(origin, tile_shape, dims):
        if o < 0 or o + t > d:
            raise ValueError(
                f"tile at {tuple(origin)} with shape {tuple(tile_shape)} "
                f"exceeds volume dims {tuple(dims)}"
            )


def crop_grid(grid: np.ndarray, origin, tile_shape) -> np.ndarray:
    """Copy the sub-grid of extent tile_shape starting at origin."""
    _check_bounds(origin, tile_shape, grid.shape)
    sl = tuple(slice(o, o + t) for o, t in zip(origin, tile_shape))
    return np.ascontiguousarray(grid[sl])


def extract_tile(volume: Volume3D, origin, tile_shape) -> Volume3D:
    """Extract a tile as a standalone volume; voxel size is preserved."""
    data = crop_grid(volume.data, origin, tile_shape)
    header = VolumeHeader(
        dims=tuple(int(t) for t in tile_shape),
        voxel_size=volume.header.voxel_size,
        datatype=volume.header.datatype,
        endianness=volume.header.endianness,
    )
    return Volume3D(header=header, data=data)


def fuse_label_grids(plan: TilePlan, grids, label_ids) -> np.ndarray:
    """Majority-vote fusion of per-tile label grids aligned to plan.origins.

    ``grids[i]`` holds the prediction for the tile at ``plan.origins[i]``.
    Ties break to the smallest label id. Returns an int32 grid of
    ``plan.volume_dims``.
    """
    label_ids = sorted(int(i) for i in label_ids)
    index_of = {lab: i for i, lab in enumerate(label_ids)}
    counts = np.zeros((len(label_ids),) + tuple(plan.volume_dims), dtype=np.int32)
    t = plan.tile_shape
    for origin, grid in zip(plan.origins, grids):
        if tuple(grid.shape) != tuple(t):
            raise ValueError(
                f"tile grid at {origin} has shape {grid.shape}, expected {t}"
            )
        sl = tuple(slice(o, o + e) for o, e in zip(origin, t))
        for lab in np.unique(grid):
            counts[(index_of[int(lab)],) + sl] += (grid == lab)
        # every voxel is covered by construction of the plan
    winners = counts.argmax(axis=0)  # argmax takes the first max: smallest id wins
    lut = np.array(label_ids, dtype=np.int32)
    return lut[winners]


def fuse_predictions(tile_maps, plan: TilePlan) -> LabelMap:
    """Fuse per-tile LabelMaps (origin, map) into a whole-volume LabelMap."""
    if len(tile_maps) != len(plan.origins):
        raise ValueError(
            f"expected {len(plan.origins)} tile maps, got {len(tile_maps)}"
        )
    given = sorted(tuple(o) for o, _ in tile_maps)
    planned = sorted(plan.origins)
    if given != planned:
        raise ValueError("tile map origins do not match the plan")

    vocab: dict[int, str] = {}
    for _, lm in tile_maps:
        if tuple(lm.dims) != tuple(plan.tile_shape):
            raise ValueError(
                f"tile map dims {lm.dims} do not match tile shape {plan.tile_shape}"
            )
        for lab, name in lm.vocabulary:
            vocab.setdefault(int(lab), name)
    label_ids = sorted(vocab)

    # order doesn't matter: vote counting is commutative
    by_plan_order: dict[tuple, list] = {}
    for origin, lm in tile_maps:
        by_plan_order.setdefault(tuple(origin), []).append(lm.labels)
    grids = []
    for origin in plan.origins:
        grids.append(by_plan_order[tuple(origin)].pop(0))
    fused = fuse_label_grids(plan, grids, label_ids)

    first = tile_maps[0][1]
    return LabelMap(
        dims=plan.volume_dims,
        voxel_size=first.voxel_size,
        labels=fused,
        vocabulary=[(i, vocab[i]) for i in label_ids],
        background_id=first.background_id,
    )
