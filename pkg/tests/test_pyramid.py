import numpy as np
import pytest

from mralign import pyramid as pyr
from mralign.pyramid import GenConfig, PatchId, PatchIndex, Slide


@pytest.fixture(scope="module")
def slide():
    return pyr.synth_slide(3, 1, GenConfig(), slide_id=7)


def brute_otsu(hist):
    scores = [pyr.between_class_variance(hist, t) for t in range(256)]
    best = max(scores)
    return scores, next(t for t, s in enumerate(scores) if s >= best - 1e-12 * max(best, 1e-300))


class TestSynth:
    def test_deterministic(self, slide):
        again = pyr.synth_slide(3, 1, GenConfig(), slide_id=7)
        assert slide.raster.tobytes() == again.raster.tobytes()
        assert slide.raster.shape == (2, 4096, 4096) and slide.raster.dtype == np.float32

    def test_classes_differ(self, slide):
        other = pyr.synth_slide(3, 2, GenConfig(), slide_id=7)
        assert not np.array_equal(slide.raster, other.raster)

    def test_invalid_class(self):
        with pytest.raises(ValueError):
            pyr.synth_slide(0, 4, GenConfig())

    def test_bad_side(self):
        with pytest.raises(ValueError):
            GenConfig(slide_side=5000)

    def test_zero_amplitude_is_constant_and_maskless(self):
        s = pyr.synth_slide(0, 0, GenConfig(texture_amplitude=0.0))
        assert np.ptp(s.raster[0]) == 0 and np.ptp(s.raster[1]) == 0
        assert pyr.tissue_mask(s).fraction == 0.0

    def test_factorial_class_parts(self):
        cfg = GenConfig()
        assert [cfg.class_parts(c) for c in range(4)] == [(0, 0), (0, 1), (1, 0), (1, 1)]
        assert GenConfig(paired=True, n_layouts=4, n_textures=4).class_parts(3) == (3, 3)


class TestOtsu:
    def test_matches_exhaustive_search(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            hist = rng.integers(0, 50, size=256) * (rng.random(256) < rng.uniform(0.05, 1))
            if hist.sum() == 0:
                hist[rng.integers(256)] = 1
            scores, t = brute_otsu(hist)
            got = pyr.otsu_threshold(hist)
            assert got == t
            assert scores[got] == pytest.approx(max(scores), rel=1e-12)

    def test_bimodal(self):
        hist = np.zeros(256)
        hist[10], hist[200] = 40, 60
        t = pyr.otsu_threshold(hist)
        assert 10 <= t < 200
        assert pyr.between_class_variance(hist, t) == pytest.approx(max(pyr.between_class_variance(hist, k) for k in range(256)))

    def test_single_bin_ties_low(self):
        hist = np.zeros(256)
        hist[77] = 5
        assert pyr.otsu_threshold(hist) == 0

    def test_uniform(self):
        hist = np.ones(256)
        assert pyr.otsu_threshold(hist) == brute_otsu(hist)[1]

    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            pyr.otsu_threshold(np.zeros(256))
        with pytest.raises(ValueError):
            pyr.otsu_threshold(np.ones(10))


class TestMask:
    def test_half_tissue(self):
        raster = np.full((2, 4096, 4096), 0.92, np.float32)
        raster[0, :, :2048] = 0.45
        m = pyr.tissue_mask(Slide(0, raster, 0, {}))
        assert abs(m.fraction - 0.5) <= 0.02

    def test_constant_slide_is_uniform(self):
        for value in (0.2, 0.9):
            m = pyr.tissue_mask(Slide(0, np.full((2, 4096, 4096), value, np.float32), 0, {}))
            assert m.mask.all() or not m.mask.any()

    def test_reproducible(self, slide):
        a, b = pyr.tissue_mask(slide), pyr.tissue_mask(slide)
        assert a.fraction == b.fraction and a.threshold_level == b.threshold_level

    def test_threshold_equals_brute_force(self, slide):
        q = pyr.quantize(pyr.block_mean(slide.raster[0], 8))
        assert pyr.tissue_mask(slide).threshold_level == brute_otsu(np.bincount(q.ravel(), minlength=256))[1]


class TestAnchors:
    def full_mask(self, side):
        return pyr.TissueMask(np.ones((side, side), bool), 0)

    def test_full_tissue_twenty(self):
        s = pyr.sample_anchors(0, self.full_mask(512 * 5), 20, seed=1)
        assert len(s.anchors) == 20 and s.shortfall == 0
        assert all(c == 1.0 for c in s.coverage)

    def test_empty_mask_shortfall(self):
        s = pyr.sample_anchors(0, pyr.TissueMask(np.zeros((512, 512), bool), 0), 3)
        assert s.anchors == [] and s.shortfall == 3

    def test_non_overlapping_and_deterministic(self):
        a = pyr.sample_anchors(0, self.full_mask(2048), 12, seed=4)
        b = pyr.sample_anchors(0, self.full_mask(2048), 12, seed=4)
        assert a.origins == b.origins
        for i, (y1, x1) in enumerate(a.origins):
            for y2, x2 in a.origins[i + 1 :]:
                assert abs(y1 - y2) >= 4096 or abs(x1 - x2) >= 4096

    def test_coverage_by_pixel_count(self):
        rng = np.random.default_rng(0)
        for seed in range(5):
            sl = pyr.synth_slide(seed, int(rng.integers(4)), GenConfig(slide_side=8192))
            mask = pyr.tissue_mask(sl)
            s = pyr.sample_anchors(0, mask, 4, 0.7, seed=seed)
            for (y, x), cov in zip(s.origins, s.coverage):
                count = mask.mask[y // 8 : y // 8 + 512, x // 8 : x // 8 + 512].sum()
                assert count / 512**2 >= 0.7
                assert count / 512**2 == pytest.approx(cov)

    def test_rejects_zero_request(self):
        with pytest.raises(ValueError):
            pyr.sample_anchors(0, self.full_mask(512), 0)


class TestQuadtree:
    anchor = PatchId(2, 0, 5)

    def test_counts(self):
        nodes = pyr.expand_children(self.anchor)
        assert len(nodes) == 85
        hist = {lv: sum(p.level == lv for p, _ in nodes) for lv in pyr.LEVELS}
        assert hist == {5: 1, 10: 4, 20: 16, 40: 64}

    def test_rejects_non_anchor(self):
        with pytest.raises(ValueError):
            pyr.expand_children(PatchId(0, 0, 10, 1, 1))

    def test_invalid_grid_position(self):
        with pytest.raises(ValueError):
            PatchId(0, 0, 10, 2, 0)
        with pytest.raises(ValueError):
            PatchId(0, 0, 7)

    def test_adjacency(self):
        for p, parent in pyr.expand_children(self.anchor):
            assert p.parent() == parent
            if parent is not None:
                assert p in parent.children()

    def test_children_partition_parent(self):
        for p in pyr.bag_members(self.anchor):
            kids = p.children()
            if not kids:
                continue
            y, x, size = p.footprint()
            cover = np.zeros((size, size), int)
            for k in kids:
                ky, kx, ks = k.footprint()
                assert ks * 2 == size
                cover[ky - y : ky - y + ks, kx - x : kx - x + ks] += 1
            assert (cover == 1).all()

    def test_edges(self):
        edges = pyr.bag_edges()
        assert len(edges) == 84
        members = pyr.bag_members(self.anchor)
        for pr, cr in edges:
            assert members[cr].parent() == members[pr]
        assert len(pyr.bag_edges(hierarchical=False)) == 4 + 4 * 16 + 16 * 64

    def test_edges_subset(self):
        e = pyr.bag_edges((10, 40))
        members = pyr.bag_members(self.anchor, (10, 40))
        assert len(e) == 64
        for pr, cr in e:
            assert members[cr].parent().parent() == members[pr]

    def test_index_roundtrip(self, tmp_path):
        idx = PatchIndex()
        idx.add_anchor(self.anchor, (0, 0))
        idx.add_anchor(PatchId(3, 1, 5), (4096, 0))
        pyr.write_index(idx, tmp_path / "index.txt", "abc123")
        back, h = pyr.read_index(tmp_path / "index.txt")
        assert h == "abc123"
        assert back.anchors() == idx.anchors()
        for a in idx.anchors():
            members = back.members(a)
            assert len(members) == 85
            for p in members:
                assert back.parent(p) == p.parent()
        assert back.origin(PatchId(3, 1, 40, 7, 7)) == (4096, 0)

    def test_index_missing_parent_rejected(self, tmp_path):
        idx = PatchIndex()
        idx.add_anchor(self.anchor, (0, 0))
        path = tmp_path / "index.txt"
        pyr.write_index(idx, path, "h")
        lines = path.read_text().splitlines()
        path.write_text("\n".join(l for l in lines if not l.startswith("2 0 10 0 0")) + "\n")
        with pytest.raises(ValueError):
            pyr.read_index(path)


class TestReadPatch:
    def test_native_crop(self, slide):
        p = PatchId(7, 0, 40, 3, 5)
        np.testing.assert_array_equal(pyr.read_patch(slide, p, (0, 0)), slide.raster[:, 1536:2048, 2560:3072])

    def test_anchor_is_block_average(self, slide):
        patch = pyr.read_patch(slide, PatchId(7, 0, 5), (0, 0))
        u, v = 100, 37
        block = slide.raster[:, 8 * u : 8 * u + 8, 8 * v : 8 * v + 8].astype(np.float64)
        np.testing.assert_allclose(patch[:, u, v], block.mean(axis=(1, 2)), atol=1e-6)

    def test_parent_mean_conservation(self):
        for seed in range(10):
            sl = pyr.synth_slide(seed, seed % 4, GenConfig())
            for p in pyr.bag_members(PatchId(0, 0, 5))[:21]:
                kids = p.children()
                parent_mean = pyr.read_patch(sl, p, (0, 0)).mean(dtype=np.float64)
                kid_mean = np.mean([pyr.read_patch(sl, k, (0, 0)).mean(dtype=np.float64) for k in kids])
                assert parent_mean == pytest.approx(kid_mean, abs=1e-4)

    def test_out_of_range(self, slide):
        with pytest.raises(ValueError):
            pyr.read_patch(slide, PatchId(7, 0, 40), (4000, 0))

    def test_pooled_bag_matches_read_patch(self, slide):
        bag = pyr.pooled_bag(pyr.anchor_pyramid(slide, (0, 0)))
        assert bag.shape == (85, 2 * 64 * 64)
        for p in (PatchId(7, 0, 5), PatchId(7, 0, 10, 1, 0), PatchId(7, 0, 20, 2, 3), PatchId(7, 0, 40, 6, 1)):
            ref = pyr.block_mean(pyr.read_patch(slide, p, (0, 0)), 8).reshape(-1)
            np.testing.assert_allclose(bag[pyr.bag_row(p)], ref, atol=1e-5)


class TestRaster:
    def test_roundtrip(self, tmp_path):
        a = np.random.default_rng(0).normal(size=(2, 5, 7)).astype(np.float32)
        pyr.write_raster(tmp_path / "r.f32", a)
        np.testing.assert_array_equal(pyr.read_raster(tmp_path / "r.f32"), a)

    def test_truncated(self, tmp_path):
        pyr.write_raster(tmp_path / "r.f32", np.ones((3, 3), np.float32))
        blob = (tmp_path / "r.f32").read_bytes()
        (tmp_path / "r.f32").write_bytes(blob[:-4])
        with pytest.raises(ValueError):
            pyr.read_raster(tmp_path / "r.f32")
