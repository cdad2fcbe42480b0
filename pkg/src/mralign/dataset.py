"""Synthetic dataset assembly and on-disk layout.

A dataset directory holds:

    index.txt      patch quadtree (one record per patch)
    captions.txt   caption corpus (one record per patch)
    labels.txt     ``slide_id label`` per slide
    pooled.f32     encoder inputs, (n_anchors, 85, 2*64*64), raster format
    manifest.json  generation config, seed and file hashes
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bags import CaptionConfig, Vocabulary, caption_rng, read_captions, synth_caption, write_captions
from .pyramid import (
    GenConfig,
    PatchId,
    PatchIndex,
    anchor_pyramid,
    bag_members,
    config_hash,
    pooled_bag,
    read_index,
    read_raster,
    sample_anchors,
    synth_slide,
    tissue_mask,
    write_index,
    write_raster,
)

FORMAT_VERSION = 1


@dataclass
class AnchorRecord:
    anchor: PatchId
    label: int
    pooled: np.ndarray  # (85, in_dim), level-major
    captions: list[list[int]]  # aligned with bag_members(anchor)


@dataclass
class Dataset:
    vocab: Vocabulary
    gen: GenConfig
    captions_cfg: CaptionConfig
    index: PatchIndex
    records: list[AnchorRecord]
    labels: dict[int, int]
    seed: int
    shortfall: dict[int, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, slide_ids) -> Dataset:
        keep = set(slide_ids)
        return Dataset(
            self.vocab,
            self.gen,
            self.captions_cfg,
            self.index,
            [r for r in self.records if r.anchor.slide_id in keep],
            {s: l for s, l in self.labels.items() if s in keep},
            self.seed,
            {s: v for s, v in self.shortfall.items() if s in keep},
        )


def slide_seed(seed: int, slide_id: int) -> int:
    return int(np.random.SeedSequence([seed, 11, slide_id]).generate_state(1)[0])


def balanced_labels(n_slides: int, n_classes: int, seed: int) -> list[int]:
    labels = np.arange(n_slides) % n_classes
    return [int(x) for x in np.random.default_rng([seed, 3]).permutation(labels)]


def build_dataset(
    n_slides: int,
    seed: int,
    gen: GenConfig | None = None,
    captions_cfg: CaptionConfig | None = None,
    n_anchors: int = 1,
    min_coverage: float = 0.7,
    vocab: Vocabulary | None = None,
    first_slide_id: int = 0,
) -> Dataset:
    if n_slides < 1:
        raise ValueError("n_slides must be >= 1")
    gen = gen or GenConfig()
    captions_cfg = captions_cfg or CaptionConfig()
    vocab = vocab or Vocabulary.build(gen.n_classes)
    labels = balanced_labels(n_slides, gen.n_classes, seed)
    index = PatchIndex()
    records, label_map, short = [], {}, {}
    for i, label in enumerate(labels):
        sid = first_slide_id + i
        slide = synth_slide(slide_seed(seed, sid), label, gen, slide_id=sid)
        mask = tissue_mask(slide, gen.tissue_darker)
        sample = sample_anchors(sid, mask, n_anchors, min_coverage, seed=slide_seed(seed, sid))
        label_map[sid] = label
        if sample.shortfall:
            short[sid] = sample.shortfall
        for anchor, origin in zip(sample.anchors, sample.origins):
            index.add_anchor(anchor, origin)
            pooled = pooled_bag(anchor_pyramid(slide, origin))
            caps = [synth_caption(p, label, vocab, caption_rng(seed, p), captions_cfg) for p in bag_members(anchor)]
            records.append(AnchorRecord(anchor, label, pooled, caps))
        del slide
    return Dataset(vocab, gen, captions_cfg, index, records, label_map, seed, short)


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def dataset_config(ds: Dataset) -> dict:
    return {
        "seed": ds.seed,
        "n_slides": len(ds.labels),
        "gen": asdict(ds.gen),
        "captions": {**asdict(ds.captions_cfg), "coarse_prob": {str(k): v for k, v in ds.captions_cfg.coarse_prob.items()}},
        "vocab_size": len(ds.vocab),
    }


def save_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = dataset_config(ds)
    chash = config_hash(json.dumps(cfg, sort_keys=True))
    write_index(ds.index, out / "index.txt", chash)
    caps = {}
    for r in ds.records:
        for p, c in zip(bag_members(r.anchor), r.captions):
            caps[p] = c
    write_captions(out / "captions.txt", caps, ds.vocab)
    (out / "labels.txt").write_text("".join(f"{s} {l}\n" for s, l in sorted(ds.labels.items())))
    pooled = np.stack([r.pooled for r in ds.records]) if ds.records else np.zeros((0, 85, 1), np.float32)
    write_raster(out / "pooled.f32", pooled)
    files = ["index.txt", "captions.txt", "labels.txt", "pooled.f32"]
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": cfg,
        "config_hash": chash,
        "vocab": ds.vocab.tokens,
        "shortfall": {str(k): v for k, v in ds.shortfall.items()},
        "files": {f: _sha(out / f) for f in files},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out / "manifest.json"


def manifest_hash(out_dir) -> str:
    return _sha(Path(out_dir) / "manifest.json")


def load_dataset(out_dir) -> Dataset:
    out = Path(out_dir)
    mpath = out / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"{out}: no dataset manifest")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{out}: dataset format {manifest.get('format_version')} != {FORMAT_VERSION}")
    for f, digest in manifest["files"].items():
        if _sha(out / f) != digest:
            raise ValueError(f"{out / f}: content hash does not match manifest")
    cfg = manifest["config"]
    gen_kw = dict(cfg["gen"])
    gen_kw["background_band"] = tuple(gen_kw["background_band"])
    gen = GenConfig(**gen_kw)
    cap_kw = dict(cfg["captions"])
    cap_kw["coarse_prob"] = {int(k): v for k, v in cap_kw["coarse_prob"].items()}
    cap = CaptionConfig(**cap_kw)
    tokens = manifest["vocab"]
    vocab = Vocabulary.build(gen.n_classes, size=len(tokens))
    if vocab.tokens != tokens:
        raise ValueError(f"{out}: vocabulary does not match the generator layout")
    index, ihash = read_index(out / "index.txt")
    if ihash != manifest["config_hash"]:
        raise ValueError(f"{out}: index config hash {ihash} != manifest {manifest['config_hash']}")
    caps = read_captions(out / "captions.txt", vocab)
    labels = {}
    for line in (out / "labels.txt").read_text().split("\n"):
        if line.strip():
            s, l = map(int, line.split())
            labels[s] = l
    pooled = read_raster(out / "pooled.f32")
    anchors = index.anchors()
    records = [
        AnchorRecord(a, labels[a.slide_id], pooled[i], [caps[p] for p in bag_members(a)])
        for i, a in enumerate(anchors)
    ]
    short = {int(k): v for k, v in manifest.get("shortfall", {}).items()}
    return Dataset(vocab, gen, cap, index, records, labels, cfg["seed"], short)
