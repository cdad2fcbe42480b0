import numpy as np
import pytest

from mralign import bags as B
from mralign import model as M
from mralign import pyramid as pyr
from mralign.bags import CaptionConfig, Vocabulary
from mralign.dataset import build_dataset, load_dataset, save_dataset
from mralign.pyramid import GenConfig, PatchId, PatchIndex


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary.build()


class TestVocabulary:
    def test_default_layout(self, vocab):
        assert len(vocab) == 64
        assert len(vocab.noise) == 64 - 4 * 12
        groups = [set(vocab.coarse[c]) for c in range(4)] + [set(vocab.fine[c]) for c in range(4)] + [set(vocab.noise)]
        assert sum(len(g) for g in groups) == 64
        assert set().union(*groups) == set(range(64))

    def test_encode_decode(self, vocab):
        words = ["c1_coarse2", "noise3", "c0_fine0"]
        assert vocab.decode(vocab.encode(words)) == words

    def test_unknown_token(self, vocab):
        with pytest.raises(KeyError):
            vocab.encode(["nope"])

    def test_too_small(self):
        with pytest.raises(ValueError):
            Vocabulary.build(size=10)


class TestCaptions:
    def test_level5_noise_free_is_coarse(self, vocab):
        cfg = CaptionConfig(noise_rate=0.0)
        for s in range(50):
            pid = PatchId(s, 0, 5)
            cap = B.synth_caption(pid, s % 4, vocab, B.caption_rng(0, pid), cfg)
            assert cap and set(cap) <= set(vocab.coarse[s % 4])

    def test_level40_noise_free_is_fine(self, vocab):
        cfg = CaptionConfig(noise_rate=0.0)
        pid = PatchId(0, 0, 40, 3, 3)
        assert set(B.synth_caption(pid, 2, vocab, B.caption_rng(1, pid), cfg)) <= set(vocab.fine[2])

    def test_same_seed_same_caption(self, vocab):
        pid = PatchId(3, 0, 20, 1, 2)
        a = B.synth_caption(pid, 1, vocab, B.caption_rng(9, pid))
        b = B.synth_caption(pid, 1, vocab, B.caption_rng(9, pid))
        assert a == b

    def test_no_duplicate_signal(self, vocab):
        for s in range(30):
            pid = PatchId(s, 0, 10, 1, 0)
            cap = B.synth_caption(pid, 0, vocab, B.caption_rng(0, pid), CaptionConfig(n_signal=6))
            assert len(cap) == len(set(cap))

    def test_focus_shifts_with_level(self, vocab):
        caps = {}
        for s in range(40):
            for p in pyr.bag_members(PatchId(s, 0, 5)):
                caps[p] = B.synth_caption(p, s % 4, vocab, B.caption_rng(0, p))
        counts = B.level_keyword_counts(caps, lambda p: p.slide_id % 4, vocab)
        frac = {lv: c / max(c + f, 1) for lv, (c, f) in counts.items()}
        assert frac[5] == 1.0 and frac[40] == 0.0
        assert frac[5] > frac[10] > frac[20] > frac[40]


class TestDedup:
    def test_order_preserving(self):
        assert B.dedup([[1, 2], [2, 3]]) == [1, 2, 3]
        assert B.dedup([[5], [], [4, 5, 4]]) == [5, 4]

    def test_bound(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            caps = [list(rng.integers(0, 10, size=rng.integers(0, 5))) for _ in range(6)]
            out = B.dedup(caps)
            assert len(out) == len(set(out)) <= sum(map(len, caps))
            assert set(out) == {int(t) for c in caps for t in c}


class TestBags:
    def test_text_bag_rows(self, small_params):
        P = M.const_params(small_params)
        anchor = PatchId(0, 0, 5)
        caps = {anchor: [3, 7], PatchId(0, 0, 10, 0, 1): [7, 9]}
        bag = B.make_text_bag(anchor, caps, lambda t: M.text_encode(P, t).data)
        assert bag.keywords == [3, 7, 9]
        for b, t in enumerate(bag.keywords):
            np.testing.assert_array_equal(bag.T[b], M.text_encode(P, t).data)

    def test_empty_text_bag(self):
        with pytest.raises(ValueError):
            B.make_text_bag(PatchId(0, 0, 5), {PatchId(0, 0, 5): []}, lambda t: np.zeros(2))

    def test_visual_bag_recompute(self):
        cfg = M.ModelConfig(d=8, vis_hidden=8)
        P = M.const_params(M.init_params(cfg, 0))
        slide = pyr.synth_slide(5, 1, GenConfig())
        idx = PatchIndex()
        anchor = PatchId(0, 0, 5)
        idx.add_anchor(anchor, (0, 0))
        bag = B.make_visual_bag(anchor, idx, slide, lambda x: M.vision_encode(P, x).data)
        assert bag.V.shape == (85, 8)
        assert bag.members == pyr.bag_members(anchor)
        np.testing.assert_array_equal(bag.V[0], M.vision_encode(P, pyr.read_patch(slide, anchor, (0, 0))).data)
        np.testing.assert_allclose(
            bag.V[50], M.vision_encode(P, pyr.read_patch(slide, bag.members[50], (0, 0))).data, rtol=0, atol=0
        )

    def test_visual_bag_matches_pooled_path(self):
        cfg = M.ModelConfig(d=8, vis_hidden=8)
        P = M.const_params(M.init_params(cfg, 0))
        slide = pyr.synth_slide(5, 1, GenConfig())
        idx = PatchIndex()
        anchor = PatchId(0, 0, 5)
        idx.add_anchor(anchor, (0, 0))
        bag = B.make_visual_bag(anchor, idx, slide, lambda x: M.vision_encode(P, x).data)
        pooled = pyr.pooled_bag(pyr.anchor_pyramid(slide, (0, 0)))
        np.testing.assert_allclose(M.encode_pooled(P, pooled).data, bag.V, atol=1e-4)

    def test_missing_anchor(self):
        with pytest.raises(ValueError):
            B.make_visual_bag(PatchId(0, 0, 5), PatchIndex(), None, lambda x: x)


class TestCaptionFiles:
    def test_roundtrip(self, tmp_path, vocab):
        caps = {PatchId(0, 0, 5): [1, 2, 60], PatchId(0, 0, 40, 7, 7): [], PatchId(3, 1, 10, 1, 1): [13]}
        B.write_captions(tmp_path / "c.txt", caps, vocab)
        assert B.read_captions(tmp_path / "c.txt", vocab) == caps

    def test_malformed(self, tmp_path, vocab):
        (tmp_path / "c.txt").write_text("0 0 5 : noise1\n0 0 : noise2\n")
        with pytest.raises(ValueError):
            B.read_captions(tmp_path / "c.txt", vocab)


class TestDataset:
    def test_shapes_and_labels(self, tiny_ds):
        assert len(tiny_ds) == 8
        assert sorted(tiny_ds.labels.values()) == [0, 0, 1, 1, 2, 2, 3, 3]
        for r in tiny_ds.records:
            assert r.pooled.shape == (85, M.IN_DIM)
            assert len(r.captions) == 85
            assert tiny_ds.index.members(r.anchor) == pyr.bag_members(r.anchor)

    def test_deterministic(self, tiny_ds):
        again = build_dataset(8, seed=0)
        for a, b in zip(tiny_ds.records, again.records):
            assert a.anchor == b.anchor and a.captions == b.captions
            np.testing.assert_array_equal(a.pooled, b.pooled)

    def test_save_load_roundtrip(self, tiny_ds, tmp_path):
        save_dataset(tiny_ds, tmp_path)
        back = load_dataset(tmp_path)
        assert back.labels == tiny_ds.labels and back.seed == tiny_ds.seed
        assert back.gen == tiny_ds.gen
        for a, b in zip(tiny_ds.records, back.records):
            assert a.anchor == b.anchor and a.captions == b.captions and a.label == b.label
            np.testing.assert_array_equal(a.pooled, b.pooled)

    def test_save_idempotent(self, tiny_ds, tmp_path):
        save_dataset(tiny_ds, tmp_path / "a")
        save_dataset(tiny_ds, tmp_path / "b")
        for f in ("manifest.json", "index.txt", "captions.txt", "labels.txt", "pooled.f32"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_corruption_detected(self, tiny_ds, tmp_path):
        save_dataset(tiny_ds, tmp_path)
        blob = bytearray((tmp_path / "pooled.f32").read_bytes())
        blob[-1] ^= 1
        (tmp_path / "pooled.f32").write_bytes(bytes(blob))
        with pytest.raises(ValueError):
            load_dataset(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path)

    def test_subset(self, tiny_ds):
        sub = tiny_ds.subset([0, 3])
        assert sorted(sub.labels) == [0, 3]
        assert {r.anchor.slide_id for r in sub.records} == {0, 3}
