import numpy as np
import pytest

from tileseg.tiling import (
    TilePlan,
    crop_grid,
    extract_tile,
    fuse_label_grids,
    fuse_predictions,
    plan_tiles,
)
from tileseg.volio import LabelMap, Volume3D, VolumeHeader


def make_volume(data):
    data = np.asarray(data, dtype=np.float32)
    hdr = VolumeHeader(dims=data.shape, voxel_size=(1, 1, 1), datatype="float32")
    return Volume3D(header=hdr, data=data)


def make_labelmap(labels, vocab=None):
    labels = np.asarray(labels, dtype=np.int32)
    if vocab is None:
        vocab = [(int(i), f"label_{i}") for i in np.unique(labels)]
        if 0 not in [v[0] for v in vocab]:
            vocab = [(0, "background")] + vocab
    return LabelMap(dims=labels.shape, voxel_size=(1, 1, 1), labels=labels,
                    vocabulary=vocab)


def covered(plan):
    """Brute-force coverage mask over the volume."""
    mask = np.zeros(plan.volume_dims, dtype=bool)
    for o in plan.origins:
        sl = tuple(slice(a, a + t) for a, t in zip(o, plan.tile_shape))
        mask[sl] = True
    return mask


class TestPlanTiles:
    def test_origin_formula_96_3_40(self):
        plan = plan_tiles((96, 96, 96), (3, 3, 3), (40, 40, 40))
        per_axis = sorted({o[0] for o in plan.origins})
        assert per_axis == [0, 28, 56]
        assert covered(plan).all()

    def test_identity_tiling(self):
        plan = plan_tiles((32, 32, 32), (1, 1, 1), (32, 32, 32))
        assert plan.origins == [(0, 0, 0)]

    def test_default_gives_27_tiles(self):
        plan = plan_tiles((32, 32, 32), (3, 3, 3), (12, 12, 12))
        assert plan.num_tiles == 27

    def test_coverage_impossible(self):
        with pytest.raises(ValueError, match="coverage"):
            plan_tiles((32, 32, 32), (3, 3, 3), (10, 10, 10))

    def test_tile_larger_than_volume(self):
        with pytest.raises(ValueError, match="exceeds"):
            plan_tiles((8, 8, 8), (1, 1, 1), (9, 9, 9))

    def test_exhaustive_coverage_small(self):
        # every valid (D, k, t) with D in [4, 32], k in {1, 2, 3}
        for d in range(4, 33):
            for k in (1, 2, 3):
                for t in range(1, d + 1):
                    if k * t < d:
                        continue
                    plan = plan_tiles((d, 4, 4), (k, 1, 1), (t, 4, 4))
                    assert covered(plan).all(), (d, k, t)
                    for o in plan.origins:
                        assert 0 <= o[0] and o[0] + t <= d

    def test_origins_lexicographic(self):
        plan = plan_tiles((20, 20, 20), (2, 2, 2), (12, 12, 12))
        assert plan.origins == sorted(plan.origins)


class TestExtractTile:
    def test_whole_volume_copy(self):
        rng = np.random.default_rng(0)
        v = make_volume(rng.normal(size=(5, 6, 7)))
        tile = extract_tile(v, (0, 0, 0), (5, 6, 7))
        np.testing.assert_array_equal(tile.data, v.data)
        assert tile.voxel_size == v.voxel_size

    def test_single_voxel(self):
        rng = np.random.default_rng(1)
        v = make_volume(rng.normal(size=(4, 4, 4)))
        tile = extract_tile(v, (2, 1, 3), (1, 1, 1))
        assert tile.data[0, 0, 0] == v.data[2, 1, 3]

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(2)
        v = make_volume(rng.normal(size=(9, 8, 7)))
        for _ in range(10):
            shape = tuple(int(s) for s in rng.integers(1, 5, size=3))
            origin = tuple(int(rng.integers(0, d - s + 1))
                           for d, s in zip((9, 8, 7), shape))
            tile = extract_tile(v, origin, shape)
            oracle = np.empty(shape, np.float32)
            for x in range(shape[0]):
                for y in range(shape[1]):
                    for z in range(shape[2]):
                        oracle[x, y, z] = v.data[origin[0] + x, origin[1] + y,
                                                 origin[2] + z]
            np.testing.assert_array_equal(tile.data, oracle)

    def test_out_of_bounds(self):
        v = make_volume(np.zeros((4, 4, 4)))
        with pytest.raises(ValueError, match="exceeds"):
            extract_tile(v, (2, 0, 0), (3, 3, 3))


def fusion_oracle(plan, tile_maps):
    """Per-voxel histogram oracle for majority-vote fusion."""
    votes = {}
    for origin, lm in tile_maps:
        t = plan.tile_shape
        for x in range(t[0]):
            for y in range(t[1]):
                for z in range(t[2]):
                    key = (origin[0] + x, origin[1] + y, origin[2] + z)
                    votes.setdefault(key, []).append(int(lm.labels[x, y, z]))
    out = np.zeros(plan.volume_dims, np.int32)
    for (x, y, z), vs in votes.items():
        counts = {}
        for v in vs:
            counts[v] = counts.get(v, 0) + 1
        best = max(counts.values())
        out[x, y, z] = min(l for l, c in counts.items() if c == best)
    return out


class TestFusePredictions:
    def plan(self, dims=(12, 12, 12), k=(2, 2, 2), t=(8, 8, 8)):
        return plan_tiles(dims, k, t)

    def tile_maps(self, plan, rng, num_labels=4):
        vocab = [(i, f"label_{i}") for i in range(num_labels)]
        return [(o, make_labelmap(rng.integers(0, num_labels, size=plan.tile_shape),
                                  vocab)) for o in plan.origins]

    def test_unanimous(self):
        plan = self.plan()
        maps = [(o, make_labelmap(np.full(plan.tile_shape, 2),
                                  [(0, "bg"), (2, "roi")])) for o in plan.origins]
        fused = fuse_predictions(maps, plan)
        assert (fused.labels == 2).all()

    def test_tie_breaks_to_smallest_label(self):
        plan = plan_tiles((12, 1, 1), (2, 1, 1), (8, 1, 1))
        vocab = [(0, "bg"), (3, "a"), (5, "b")]
        m0 = make_labelmap(np.full((8, 1, 1), 3), vocab)
        m1 = make_labelmap(np.full((8, 1, 1), 5), vocab)
        fused = fuse_predictions([(plan.origins[0], m0), (plan.origins[1], m1)], plan)
        # voxels 4..7 are covered by both tiles: tie between 3 and 5
        assert (fused.labels[4:8, 0, 0] == 3).all()
        assert (fused.labels[:4, 0, 0] == 3).all()
        assert (fused.labels[8:, 0, 0] == 5).all()

    def test_against_histogram_oracle(self):
        rng = np.random.default_rng(11)
        plan = self.plan()
        for _ in range(5):
            maps = self.tile_maps(plan, rng)
            fused = fuse_predictions(maps, plan)
            np.testing.assert_array_equal(fused.labels, fusion_oracle(plan, maps))

    def test_permutation_invariance(self):
        rng = np.random.default_rng(12)
        plan = self.plan()
        maps = self.tile_maps(plan, rng)
        fused_a = fuse_predictions(maps, plan)
        order = rng.permutation(len(maps))
        fused_b = fuse_predictions([maps[i] for i in order], plan)
        np.testing.assert_array_equal(fused_a.labels, fused_b.labels)

    def test_extract_then_fuse_is_identity(self):
        rng = np.random.default_rng(13)
        for _ in range(5):
            labels = rng.integers(0, 5, size=(13, 12, 11)).astype(np.int32)
            lm = make_labelmap(labels, [(i, f"label_{i}") for i in range(5)])
            plan = plan_tiles((13, 12, 11), (2, 3, 2), (8, 6, 7))
            maps = [(o, make_labelmap(crop_grid(labels, o, plan.tile_shape),
                                      lm.vocabulary)) for o in plan.origins]
            fused = fuse_predictions(maps, plan)
            np.testing.assert_array_equal(fused.labels, labels)

    def test_strict_majority_wins(self):
        plan = plan_tiles((8, 1, 1), (3, 1, 1), (4, 1, 1))
        # origins 0, 2, 4: voxel 3 covered by all three tiles
        vocab = [(0, "bg"), (1, "a"), (9, "b")]
        grids = [np.full((4, 1, 1), 9), np.full((4, 1, 1), 9), np.full((4, 1, 1), 1)]
        maps = [(o, make_labelmap(g, vocab)) for o, g in zip(plan.origins, grids)]
        fused = fuse_predictions(maps, plan)
        # 9 holds a 2-of-3 majority at voxel 3 despite the larger label id
        assert fused.labels[3, 0, 0] == 9

    def test_missing_tile_map(self):
        plan = self.plan()
        rng = np.random.default_rng(14)
        maps = self.tile_maps(plan, rng)[:-1]
        with pytest.raises(ValueError, match="expected"):
            fuse_predictions(maps, plan)

    def test_misshapen_tile_map(self):
        plan = self.plan()
        rng = np.random.default_rng(15)
        maps = self.tile_maps(plan, rng)
        bad = make_labelmap(np.zeros((4, 4, 4), np.int32))
        maps[0] = (maps[0][0], bad)
        with pytest.raises(ValueError, match="dims"):
            fuse_predictions(maps, plan)

    def test_fuse_label_grids_low_level(self):
        plan = plan_tiles((10, 10, 10), (2, 2, 2), (6, 6, 6))
        rng = np.random.default_rng(16)
        grids = [rng.integers(0, 3, size=plan.tile_shape).astype(np.int32)
                 for _ in plan.origins]
        fused = fuse_label_grids(plan, grids, [0, 1, 2])
        maps = [(o, make_labelmap(g, [(0, "a"), (1, "b"), (2, "c")]))
                for o, g in zip(plan.origins, grids)]
        np.testing.assert_array_equal(fused, fusion_oracle(plan, maps))
