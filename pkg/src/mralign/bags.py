"""Keyword vocabulary, synthetic captions, and visual/textual bags."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .pyramid import LEVELS, N_BAG, PatchId, PatchIndex, Slide, read_patch

# probability that a signal keyword comes from the coarse group, per level
COARSE_PROB = {5: 1.0, 10: 0.8, 20: 0.2, 40: 0.0}


@dataclass
class Vocabulary:
    tokens: list[str]
    coarse: dict[int, list[int]]
    fine: dict[int, list[int]]
    noise: list[int]

    def __post_init__(self):
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise ValueError("duplicate token strings")

    @classmethod
    def build(cls, n_classes: int = 4, n_coarse: int = 6, n_fine: int = 6, size: int = 64) -> Vocabulary:
        tokens, coarse, fine = [], {}, {}
        for c in range(n_classes):
            coarse[c] = list(range(len(tokens), len(tokens) + n_coarse))
            tokens += [f"c{c}_coarse{i}" for i in range(n_coarse)]
            fine[c] = list(range(len(tokens), len(tokens) + n_fine))
            tokens += [f"c{c}_fine{i}" for i in range(n_fine)]
        if size < len(tokens):
            raise ValueError(f"vocabulary size {size} too small for {len(tokens)} signal tokens")
        noise = list(range(len(tokens), size))
        tokens += [f"noise{i}" for i in range(size - len(tokens))]
        return cls(tokens, coarse, fine, noise)

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: Sequence[str]) -> list[int]:
        try:
            return [self.ids[w] for w in words]
        except KeyError as exc:
            raise KeyError(f"unknown token {exc.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def class_keywords(self, c: int) -> list[int]:
        return self.coarse[c] + self.fine[c]


@dataclass
class CaptionConfig:
    n_signal: int = 3
    noise_rate: float = 1.0
    coarse_prob: dict[int, float] = field(default_factory=lambda: dict(COARSE_PROB))


def caption_rng(seed: int, pid: PatchId) -> np.random.Generator:
    return np.random.default_rng([seed, 7, pid.slide_id, pid.anchor_idx, pid.level, pid.row, pid.col])


def synth_caption(pid: PatchId, label: int, vocab: Vocabulary, rng: np.random.Generator, cfg: CaptionConfig | None = None) -> list[int]:
    """Keyword caption for one patch.

    Signal keywords are drawn without replacement, each from the class's
    coarse group with the level's coarse probability and from the fine group
    otherwise; a Poisson(noise_rate) number of noise keywords is appended and
    the caption shuffled.
    """
    cfg = cfg or CaptionConfig()
    p_coarse = cfg.coarse_prob[pid.level]
    pools = {"coarse": list(vocab.coarse[label]), "fine": list(vocab.fine[label])}
    out = []
    for _ in range(cfg.n_signal):
        group = "coarse" if rng.random() < p_coarse else "fine"
        pool = pools[group]
        if not pool:
            continue
        out.append(pool.pop(int(rng.integers(len(pool)))))
    n_noise = int(rng.poisson(cfg.noise_rate)) if cfg.noise_rate > 0 else 0
    if n_noise and vocab.noise:
        out += [int(t) for t in rng.choice(vocab.noise, size=min(n_noise, len(vocab.noise)), replace=False)]
    rng.shuffle(out)
    return [int(t) for t in out]


def dedup(captions: Sequence[Sequence[int]]) -> list[int]:
    """Order-preserving dedup of the concatenated captions."""
    seen: dict[int, None] = {}
    for cap in captions:
        for t in cap:
            seen.setdefault(int(t), None)
    return list(seen)


@dataclass
class VisualBag:
    anchor: PatchId
    members: list[PatchId]
    V: np.ndarray


@dataclass
class TextBag:
    anchor: PatchId
    keywords: list[int]
    per_patch_keywords: dict[PatchId, list[int]]
    T: np.ndarray


def make_visual_bag(
    anchor: PatchId,
    index: PatchIndex,
    slide: Slide,
    vision_encode: Callable[[np.ndarray], np.ndarray],
) -> VisualBag:
    try:
        members = index.members(anchor)
    except KeyError:
        raise ValueError(f"anchor {anchor} has no quadtree in the index") from None
    if len(members) != N_BAG:
        raise ValueError(f"anchor {anchor} has {len(members)} quadtree nodes, expected {N_BAG}")
    origin = index.origin(anchor)
    V = np.stack([np.asarray(vision_encode(read_patch(slide, p, origin))) for p in members])
    return VisualBag(anchor, members, V)


def make_text_bag(
    anchor: PatchId,
    captions: dict[PatchId, list[int]],
    text_encode: Callable[[int], np.ndarray],
) -> TextBag:
    keywords = dedup(captions.values())
    if not keywords:
        raise ValueError(f"empty text bag for anchor {anchor}: no caption keywords")
    T = np.stack([np.asarray(text_encode(t)) for t in keywords])
    return TextBag(anchor, keywords, {p: list(c) for p, c in captions.items()}, T)


# -- caption corpus files ----------------------------------------------------------
def write_captions(path, captions: dict[PatchId, list[int]], vocab: Vocabulary) -> None:
    lines = [
        f"{p.slide_id} {p.anchor_idx} {p.level} {p.row} {p.col} : {' '.join(vocab.decode(toks))}".rstrip()
        for p, toks in captions.items()
    ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_captions(path, vocab: Vocabulary) -> dict[PatchId, list[int]]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        head, _, body = line.partition(":")
        f = head.split()
        if len(f) != 5:
            raise ValueError(f"{path}:{n}: malformed caption record")
        out[PatchId(*map(int, f))] = vocab.encode(body.split())
    return out


def level_keyword_counts(captions: dict[PatchId, list[int]], label_of: Callable[[PatchId], int], vocab: Vocabulary) -> dict[int, tuple[int, int]]:
    """(coarse, fine) signal keyword counts per level."""
    counts = {lv: [0, 0] for lv in LEVELS}
    for p, toks in captions.items():
        c = label_of(p)
        cs, fs = set(vocab.coarse[c]), set(vocab.fine[c])
        counts[p.level][0] += sum(t in cs for t in toks)
        counts[p.level][1] += sum(t in fs for t in toks)
    return {lv: (a, b) for lv, (a, b) in counts.items()}
