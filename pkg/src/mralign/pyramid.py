"""Synthetic multi-resolution slides, tissue masking and the patch quadtree.

A slide is a two-channel raster at native (40x) scale: channel 0 is grayscale
intensity carrying the coarse layout, channel 1 is a zero-mean texture
channel carrying the fine pattern. A 5x anchor is 512 px at 5x, i.e. a
4096 px square of native pixels, and its descendants tile it as a quadtree:

    5x: 1 patch (4096 native px)   10x: 2x2 (2048)
    20x: 4x4 (1024)                40x: 8x8 (512, native crops)

Every patch is returned as 512x512 by area-averaging its native footprint.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

LEVELS = (5, 10, 20, 40)
GRID = {5: 1, 10: 2, 20: 4, 40: 8}
PATCH_PX = 512
ANCHOR_NATIVE = 4096
SLIDE_UNIT = 4096
DOWN_5X = 8  # native px per 5x px
N_BAG = sum(g * g for g in GRID.values())  # 85


@dataclass
class GenConfig:
    n_classes: int = 4
    n_layouts: int = 2
    n_textures: int = 2
    slide_side: int = 4096
    texture_amplitude: float = 1.0
    background: float = 0.92
    tissue_base: float = 0.45
    layout_contrast: float = 0.05
    layout_field_contrast: float = 0.25  # layout added to channel 1
    texture_contrast: float = 0.25
    texture_period: int = 32
    layout_cell: int = 1024
    noise_std: float = 0.02
    background_band: tuple[float, float] = (0.08, 0.25)
    tissue_darker: bool = True
    paired: bool = False  # class c uses layout c and texture c

    def __post_init__(self):
        if self.slide_side <= 0 or self.slide_side % SLIDE_UNIT:
            raise ValueError(f"slide_side must be a positive multiple of {SLIDE_UNIT}, got {self.slide_side}")
        if self.paired and not self.n_classes == self.n_layouts == self.n_textures:
            raise ValueError("paired classes need n_classes == n_layouts == n_textures")
        if not self.paired and self.n_classes != self.n_layouts * self.n_textures:
            raise ValueError("n_classes must equal n_layouts * n_textures")
        if self.n_layouts > 4 or self.n_textures > 4:
            raise ValueError("at most 4 layouts and 4 textures are defined")

    def class_parts(self, class_id: int) -> tuple[int, int]:
        """class id -> (layout id, texture id)."""
        if self.paired:
            return class_id, class_id
        return divmod(class_id, self.n_textures)


@dataclass
class Slide:
    slide_id: int
    raster: np.ndarray  # (2, H, W) float32
    label: int
    gen_params: dict = field(default_factory=dict)

    @property
    def side(self) -> int:
        return self.raster.shape[-1]


# -- generation ----------------------------------------------------------------
def _layout_map(layout_id: int, n_cells: int) -> np.ndarray:
    """+-1 pattern on a grid of layout cells."""
    r, c = np.mgrid[0:n_cells, 0:n_cells]
    if layout_id == 0:  # checkerboard
        pat = (r + c) % 2
    elif layout_id == 1:  # horizontal bands
        pat = r % 2
    elif layout_id == 2:  # vertical bands
        pat = c % 2
    else:  # 2x2 blocks
        pat = (r // 2 + c // 2) % 2
    return np.where(pat == 1, 1.0, -1.0)


def _texture_tile(texture_id: int, period: int) -> np.ndarray:
    """One period x period tile of a zero-mean fine pattern."""
    t = np.arange(period) + 0.5
    s = np.sin(2 * np.pi * t / period)
    if texture_id == 0:  # horizontal stripes
        tile = np.repeat(s[:, None], period, axis=1)
    elif texture_id == 1:  # vertical stripes
        tile = np.repeat(s[None, :], period, axis=0)
    elif texture_id == 2:  # checker
        tile = np.outer(s, s) * 2
    else:  # diagonal
        tt = (t[:, None] + t[None, :]) % period
        tile = np.sin(2 * np.pi * tt / period)
    return tile


def synth_slide(seed: int, class_id: int, cfg: GenConfig, slide_id: int = 0) -> Slide:
    """Deterministic synthetic slide for ``class_id``.

    Intensity and texture are constant over 8x8 native blocks except for the
    texture pattern itself, so 5x-scale quantities are exact block means.
    """
    if not 0 <= class_id < cfg.n_classes:
        raise ValueError(f"class_id {class_id} outside [0, {cfg.n_classes})")
    rng = np.random.default_rng([seed, class_id])
    layout_id, texture_id = cfg.class_parts(class_id)
    side = cfg.slide_side
    blk = side // DOWN_5X  # 5x-scale side

    band_frac = rng.uniform(*cfg.background_band)
    edge = int(rng.integers(4))
    band = int(round(band_frac * blk))
    tissue = np.ones((blk, blk), dtype=bool)
    if band > 0:
        if edge == 0:
            tissue[:band] = False
        elif edge == 1:
            tissue[-band:] = False
        elif edge == 2:
            tissue[:, :band] = False
        else:
            tissue[:, -band:] = False

    base = cfg.tissue_base + rng.uniform(-0.03, 0.03)
    jitter = rng.uniform(0.8, 1.2)
    contrast = cfg.layout_contrast * jitter
    tex_amp = cfg.texture_contrast * rng.uniform(0.8, 1.2)
    n_cells = side // cfg.layout_cell
    layout = _layout_map(layout_id, n_cells)
    cell_blk = cfg.layout_cell // DOWN_5X
    layout_blk = np.kron(layout, np.ones((cell_blk, cell_blk)))
    noise = rng.standard_normal((blk, blk)) * cfg.noise_std

    amp = cfg.texture_amplitude
    bg, tissue_val = (cfg.background, base) if cfg.tissue_darker else (1 - cfg.background, 1 - base)
    deviation = np.where(tissue, tissue_val - bg + contrast * layout_blk, 0.0) + noise
    ch0_blk = (bg + amp * deviation).astype(np.float32)

    raster = np.empty((2, side, side), dtype=np.float32)
    raster[0] = np.repeat(np.repeat(ch0_blk, DOWN_5X, axis=0), DOWN_5X, axis=1)
    reps = side // cfg.texture_period
    tex = np.tile(_texture_tile(texture_id, cfg.texture_period).astype(np.float32), (reps, reps))
    weight = np.repeat(np.repeat((tissue * (amp * tex_amp)).astype(np.float32), DOWN_5X, 0), DOWN_5X, 1)
    np.multiply(tex, weight, out=raster[1])
    if cfg.layout_field_contrast:
        field = np.where(tissue, amp * cfg.layout_field_contrast * jitter * layout_blk, 0.0)
        raster[1] += np.repeat(np.repeat(field.astype(np.float32), DOWN_5X, 0), DOWN_5X, 1)

    params = {
        "seed": seed,
        "layout_id": layout_id,
        "texture_id": texture_id,
        "background_band": band_frac,
        "band_edge": edge,
        "tissue_base": base,
        "layout_contrast": contrast,
        "texture_contrast": tex_amp,
    }
    return Slide(slide_id=slide_id, raster=raster, label=class_id, gen_params=params)


def block_mean(img: np.ndarray, k: int) -> np.ndarray:
    """Area-average the last two axes by an integer factor."""
    if k == 1:
        return img
    *lead, h, w = img.shape
    if h % k or w % k:
        raise ValueError(f"block_mean: shape {img.shape} not divisible by {k}")
    return img.reshape(*lead, h // k, k, w // k, k).mean(axis=(-3, -1), dtype=np.float32)


# -- Otsu and tissue masking ---------------------------------------------------
def between_class_variance(hist: np.ndarray, t: int) -> float:
    """Between-class variance for classes [0..t] and [t+1..255]."""
    hist = np.asarray(hist, dtype=np.float64)
    levels = np.arange(hist.size)
    n = hist.sum()
    w0 = hist[: t + 1].sum() / n
    w1 = 1.0 - w0
    if w0 <= 0 or w1 <= 0:
        return 0.0
    mu0 = (levels[: t + 1] * hist[: t + 1]).sum() / (w0 * n)
    mu1 = (levels[t + 1 :] * hist[t + 1 :]).sum() / (w1 * n)
    return float(w0 * w1 * (mu0 - mu1) ** 2)


def otsu_threshold(histogram) -> int:
    """Level maximizing between-class variance; ties go to the lower level."""
    hist = np.asarray(histogram, dtype=np.float64)
    if hist.shape != (256,):
        raise ValueError(f"histogram must have 256 bins, got shape {hist.shape}")
    if np.any(hist < 0):
        raise ValueError("histogram counts must be non-negative")
    n = hist.sum()
    if n <= 0:
        raise ValueError("empty histogram")
    p = hist / n
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(p)
    m0 = np.cumsum(p * levels)
    mt = m0[-1]
    w1 = 1.0 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        sigma = (mt * w0 - m0) ** 2 / (w0 * w1)
    sigma[~np.isfinite(sigma)] = 0.0
    sigma[(w0 <= 1e-15) | (w1 <= 1e-15)] = 0.0
    # relative tolerance so float noise cannot beat an exact tie
    best = sigma.max()
    return int(np.flatnonzero(sigma >= best - 1e-12 * max(best, 1e-300))[0])


@dataclass
class TissueMask:
    mask: np.ndarray  # bool, 5x scale
    threshold_level: int

    @property
    def fraction(self) -> float:
        return float(self.mask.mean())


def quantize(intensity: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(intensity * 255.0), 0, 255).astype(np.uint8)


def tissue_mask(slide: Slide, tissue_darker: bool = True) -> TissueMask:
    """Otsu mask on channel 0 at 5x scale."""
    q = quantize(block_mean(slide.raster[0], DOWN_5X))
    hist = np.bincount(q.ravel(), minlength=256)
    level = otsu_threshold(hist)
    mask = q <= level if tissue_darker else q > level
    return TissueMask(mask=mask, threshold_level=level)


# -- patch addressing ------------------------------------------------------------
@dataclass(frozen=True, order=True)
class PatchId:
    slide_id: int
    anchor_idx: int
    level: int
    row: int = 0
    col: int = 0

    def __post_init__(self):
        if self.level not in GRID:
            raise ValueError(f"level must be one of {LEVELS}, got {self.level}")
        g = GRID[self.level]
        if not (0 <= self.row < g and 0 <= self.col < g):
            raise ValueError(f"({self.row},{self.col}) outside the {g}x{g} grid at {self.level}x")

    @property
    def anchor(self) -> PatchId:
        return PatchId(self.slide_id, self.anchor_idx, 5)

    def footprint(self) -> tuple[int, int, int]:
        """(y, x, size) in native px relative to the anchor origin."""
        size = ANCHOR_NATIVE // GRID[self.level]
        return self.row * size, self.col * size, size

    def parent(self) -> PatchId | None:
        if self.level == 5:
            return None
        up = LEVELS[LEVELS.index(self.level) - 1]
        return PatchId(self.slide_id, self.anchor_idx, up, self.row // 2, self.col // 2)

    def children(self) -> tuple[PatchId, ...]:
        if self.level == 40:
            return ()
        down = LEVELS[LEVELS.index(self.level) + 1]
        r, c = 2 * self.row, 2 * self.col
        return tuple(
            PatchId(self.slide_id, self.anchor_idx, down, r + dr, c + dc) for dr in (0, 1) for dc in (0, 1)
        )

    def ref(self) -> str:
        return f"{self.level}:{self.row}:{self.col}"


def bag_members(anchor: PatchId, levels=LEVELS) -> list[PatchId]:
    """Level-major, row-major ordering of an anchor's quadtree."""
    return [
        PatchId(anchor.slide_id, anchor.anchor_idx, lv, r, c)
        for lv in LEVELS
        if lv in levels
        for r in range(GRID[lv])
        for c in range(GRID[lv])
    ]


def expand_children(anchor: PatchId) -> list[tuple[PatchId, PatchId | None]]:
    """All 85 (patch, parent) entries of an anchor's quadtree."""
    if anchor.level != 5:
        raise ValueError(f"expand_children needs a 5x anchor, got level {anchor.level}")
    return [(p, p.parent()) for p in bag_members(anchor)]


def level_offsets(levels=LEVELS) -> dict[int, int]:
    """Row offset of each level inside a level-major bag restricted to ``levels``."""
    out, k = {}, 0
    for lv in LEVELS:
        if lv in levels:
            out[lv] = k
            k += GRID[lv] ** 2
    return out


def bag_row(pid: PatchId, levels=LEVELS) -> int:
    return level_offsets(levels)[pid.level] + pid.row * GRID[pid.level] + pid.col


def bag_edges(levels=LEVELS, hierarchical: bool = True) -> np.ndarray:
    """(parent_row, child_row) pairs between consecutive included levels.

    With ``hierarchical`` only immediate parent-child pairs are returned (84
    for the full bag). Without it every patch of one level is paired with
    every patch of the next included level. If levels are skipped, a child
    pairs with its ancestor at the previous included level.
    """
    lv = [x for x in LEVELS if x in levels]
    off = level_offsets(lv)
    edges = []
    for up, down in zip(lv, lv[1:]):
        gu, gd = GRID[up], GRID[down]
        f = gd // gu
        for r in range(gd):
            for c in range(gd):
                child = off[down] + r * gd + c
                if hierarchical:
                    edges.append((off[up] + (r // f) * gu + c // f, child))
                else:
                    edges.extend((off[up] + k, child) for k in range(gu * gu))
    return np.asarray(edges, dtype=np.int64).reshape(-1, 2)


@dataclass
class PatchIndex:
    """Per-anchor quadtree adjacency plus anchor origins (native px)."""

    origins: dict[tuple[int, int], tuple[int, int]] = field(default_factory=dict)
    parents: dict[PatchId, PatchId] = field(default_factory=dict)
    kids: dict[PatchId, tuple[PatchId, ...]] = field(default_factory=dict)
    nodes: dict[tuple[int, int], list[PatchId]] = field(default_factory=dict)

    def add_anchor(self, anchor: PatchId, origin: tuple[int, int]) -> None:
        key = (anchor.slide_id, anchor.anchor_idx)
        self.origins[key] = (int(origin[0]), int(origin[1]))
        entries = expand_children(anchor)
        self.nodes[key] = [p for p, _ in entries]
        for p, par in entries:
            if par is not None:
                self.parents[p] = par
            kids = p.children()
            if kids:
                self.kids[p] = kids

    def anchors(self) -> list[PatchId]:
        return [PatchId(s, a, 5) for s, a in self.origins]

    def parent(self, pid: PatchId) -> PatchId | None:
        return self.parents.get(pid)

    def children(self, pid: PatchId) -> tuple[PatchId, ...]:
        return self.kids.get(pid, ())

    def members(self, anchor: PatchId) -> list[PatchId]:
        key = (anchor.slide_id, anchor.anchor_idx)
        if key not in self.nodes:
            raise KeyError(f"anchor {key} not in index")
        return list(self.nodes[key])

    def origin(self, pid: PatchId) -> tuple[int, int]:
        return self.origins[(pid.slide_id, pid.anchor_idx)]

    def absolute_footprint(self, pid: PatchId) -> tuple[int, int, int]:
        oy, ox = self.origin(pid)
        y, x, s = pid.footprint()
        return oy + y, ox + x, s

    def __iter__(self) -> Iterator[PatchId]:
        for key in self.nodes:
            yield from self.nodes[key]


INDEX_VERSION = 1


def write_index(index: PatchIndex, path, config_hash: str) -> None:
    lines = [f"# mralign-patch-index version={INDEX_VERSION} config={config_hash}"]
    for (s, a), (y, x) in index.origins.items():
        lines.append(f"# anchor {s} {a} {y} {x}")
    for pid in index:
        par = index.parent(pid)
        lines.append(f"{pid.slide_id} {pid.anchor_idx} {pid.level} {pid.row} {pid.col} {par.ref() if par else '-'}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_index(path) -> tuple[PatchIndex, str]:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("# mralign-patch-index"):
        raise ValueError(f"{path}: not a patch index file")
    head = dict(kv.split("=", 1) for kv in text[0].split()[2:])
    if int(head["version"]) != INDEX_VERSION:
        raise ValueError(f"{path}: index version {head['version']} != {INDEX_VERSION}")
    index = PatchIndex()
    seen: dict[tuple[int, int], list[tuple[PatchId, str]]] = {}
    for line in text[1:]:
        if line.startswith("# anchor"):
            s, a, y, x = map(int, line.split()[2:])
            index.add_anchor(PatchId(s, a, 5), (y, x))
        elif line and not line.startswith("#"):
            f = line.split()
            pid = PatchId(*map(int, f[:5]))
            seen.setdefault((pid.slide_id, pid.anchor_idx), []).append((pid, f[5]))
    for key, recs in seen.items():
        if key not in index.origins:
            raise ValueError(f"{path}: patches for unknown anchor {key}")
        for pid, ref in recs:
            par = index.parent(pid)
            if (par.ref() if par else "-") != ref:
                raise ValueError(f"{path}: parent of {pid} recorded as {ref}")
        if len(recs) != N_BAG:
            raise ValueError(f"{path}: anchor {key} has {len(recs)} patches, expected {N_BAG}")
    return index, head["config"]


# -- anchors and patches -------------------------------------------------------------
@dataclass
class AnchorSample:
    anchors: list[PatchId]
    origins: list[tuple[int, int]]  # native px
    coverage: list[float]
    requested: int

    @property
    def shortfall(self) -> int:
        return self.requested - len(self.anchors)


def sample_anchors(
    slide_id: int,
    mask: TissueMask,
    n_anchors: int,
    min_coverage: float = 0.7,
    seed: int = 0,
    stride: int = 256,
) -> AnchorSample:
    """Random non-overlapping 5x anchors with enough tissue under them.

    Candidate origins lie on a ``stride`` grid (5x px). Qualifying candidates
    are visited in a seeded random order and kept if they do not overlap an
    already chosen anchor. Candidates aligned to the anchor tiling go first so
    a fully tissued region is packed without gaps.
    """
    if n_anchors < 1:
        raise ValueError("n_anchors must be >= 1")
    m = mask.mask
    h, w = m.shape
    integral = np.zeros((h + 1, w + 1), dtype=np.int64)
    integral[1:, 1:] = np.cumsum(np.cumsum(m, axis=0), axis=1)
    cands = []
    for y in range(0, h - PATCH_PX + 1, stride):
        for x in range(0, w - PATCH_PX + 1, stride):
            y2, x2 = y + PATCH_PX, x + PATCH_PX
            cov = (integral[y2, x2] - integral[y, x2] - integral[y2, x] + integral[y, x]) / PATCH_PX**2
            if cov >= min_coverage:
                cands.append((y, x, float(cov)))
    perm = np.random.default_rng(seed).permutation(len(cands))
    aligned = np.array([cands[i][0] % PATCH_PX == 0 and cands[i][1] % PATCH_PX == 0 for i in perm], dtype=bool)
    order = np.concatenate([perm[aligned], perm[~aligned]])
    chosen: list[tuple[int, int, float]] = []
    for i in order:
        y, x, cov = cands[i]
        if all(abs(y - cy) >= PATCH_PX or abs(x - cx) >= PATCH_PX for cy, cx, _ in chosen):
            chosen.append((y, x, cov))
            if len(chosen) == n_anchors:
                break
    return AnchorSample(
        anchors=[PatchId(slide_id, k, 5) for k in range(len(chosen))],
        origins=[(y * DOWN_5X, x * DOWN_5X) for y, x, _ in chosen],
        coverage=[c for _, _, c in chosen],
        requested=n_anchors,
    )


def read_patch(slide: Slide, pid: PatchId, origin: tuple[int, int]) -> np.ndarray:
    """(2, 512, 512) raster of ``pid``; coarser levels are area-averaged."""
    y, x, size = pid.footprint()
    y += origin[0]
    x += origin[1]
    if y < 0 or x < 0 or y + size > slide.side or x + size > slide.side:
        raise ValueError(f"patch {pid} at origin {origin} falls outside a {slide.side}px slide")
    crop = slide.raster[:, y : y + size, x : x + size]
    if size == PATCH_PX:
        return crop.copy()
    return block_mean(crop, size // PATCH_PX)


def anchor_pyramid(slide: Slide, origin: tuple[int, int], pool: int = 8) -> dict[int, np.ndarray]:
    """Per-level pooled maps of the anchor region.

    Level r is the anchor region area-averaged so that one of its patches,
    after the encoder's fixed ``pool`` average, is a 64x64 block. Patch
    (row, col) at level r is ``maps[r][:, 64*row:64*(row+1), 64*col:...]``.
    """
    y, x = origin
    region = slide.raster[:, y : y + ANCHOR_NATIVE, x : x + ANCHOR_NATIVE]
    if region.shape[-2:] != (ANCHOR_NATIVE, ANCHOR_NATIVE):
        raise ValueError(f"anchor at {origin} exceeds the slide")
    maps = {40: block_mean(region, pool)}
    for up, down in ((20, 40), (10, 20), (5, 10)):
        maps[up] = block_mean(maps[down], 2)
    return maps


def pooled_bag(maps: dict[int, np.ndarray], levels=LEVELS) -> np.ndarray:
    """(n_patches, 2*64*64) encoder inputs in level-major bag order."""
    rows = []
    for lv in LEVELS:
        if lv not in levels:
            continue
        m = maps[lv]
        g = GRID[lv]
        c, s = m.shape[0], m.shape[1] // g
        blocks = m.reshape(c, g, s, g, s).transpose(1, 3, 0, 2, 4).reshape(g * g, -1)
        rows.append(blocks)
    return np.concatenate(rows, axis=0)


# -- raster files ------------------------------------------------------------------
RASTER_MAGIC = b"MRRASTER"
RASTER_VERSION = 1


def write_raster(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = RASTER_MAGIC + struct.pack("<II", RASTER_VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def read_raster(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:8] != RASTER_MAGIC:
        raise ValueError(f"{path}: bad raster magic")
    version, ndim = struct.unpack_from("<II", blob, 8)
    if version != RASTER_VERSION:
        raise ValueError(f"{path}: raster version {version} != {RASTER_VERSION}")
    dims = struct.unpack_from(f"<{ndim}I", blob, 16)
    start = 16 + 4 * ndim
    n = int(np.prod(dims)) if dims else 1
    if len(blob) - start != 4 * n:
        raise ValueError(f"{path}: payload has {len(blob) - start} bytes, expected {4 * n}")
    return np.frombuffer(blob, dtype="<f4", offset=start, count=n).reshape(dims).astype(np.float32)


def config_hash(obj) -> str:
    payload = repr(sorted(asdict(obj).items()) if hasattr(obj, "__dataclass_fields__") else obj)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]
