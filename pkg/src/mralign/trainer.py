"""Pre-training loop: batching, schedule, optimizer, queue, checkpoints.

Every random choice is drawn from a generator seeded by
``(seed, stream, step)`` so a run resumed from a checkpoint replays exactly
the same batches, masks and negatives as an uninterrupted one.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import model as M
from .bags import dedup
from .dataset import Dataset
from .losses import Batch, FeatureQueue, LossBreakdown, LossFlags, total_loss
from .pyramid import LEVELS, PatchId, bag_edges, bag_members, bag_row, config_hash

log = logging.getLogger(__name__)

# named random substreams
STREAM_ORDER, STREAM_NEG, STREAM_MASK, STREAM_PREFIX = 21, 23, 29, 31
LOG_FIELDS = ("step", "total", "bl", "cvta", "mrtva", "itc", "itm", "mlm", "plm", "lr")


class ConfigError(ValueError):
    def __init__(self, key: str, msg: str):
        super().__init__(f"config key {key!r}: {msg}")
        self.key = key


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, breakdown: LossBreakdown):
        super().__init__(f"non-finite loss at step {step}: {breakdown.as_dict()}")
        self.step = step
        self.breakdown = breakdown


@dataclass
class TrainConfig:
    # optimisation
    epochs: int = 50
    batch_size: int = 64
    max_steps: int = 0  # 0 = epochs * batches per epoch
    k_o: int = 9
    lr_peak: float = 5e-5
    warmup_steps: int = 1000
    weight_decay: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.98
    queue_capacity: int = 256
    mask_rate: float = 0.15
    seed: int = 0
    # ablation switches
    enable_cvta: bool = True
    enable_mrtva: bool = True
    enable_parent_child: bool = True
    resolution_subset: tuple[int, ...] = LEVELS
    # model
    d: int = 32
    d_proj: int = 16
    vis_hidden: int = 64
    mlp_hidden: int = 64
    n_blocks: int = 2
    max_caption: int = 16
    tau_init: float = 0.07
    # synthetic data
    n_slides: int = 200
    n_classes: int = 4
    data_seed: int = 0
    anchors_per_slide: int = 1
    slide_side: int = 4096
    min_coverage: float = 0.7
    n_signal: int = 3
    noise_rate: float = 1.0
    texture_amplitude: float = 1.0
    layout_contrast: float = 0.05
    class_design: str = "factorial"
    # evaluation
    eval_fraction: float = 0.25
    eval_mode: str = "guided"
    eval_pe: bool = True

    def __post_init__(self):
        self.resolution_subset = tuple(sorted(int(x) for x in self.resolution_subset))
        if not self.resolution_subset:
            raise ConfigError("resolution_subset", "must be non-empty")
        bad = set(self.resolution_subset) - set(LEVELS)
        if bad:
            raise ConfigError("resolution_subset", f"unknown levels {sorted(bad)}")
        for key in ("batch_size", "k_o", "n_classes", "anchors_per_slide", "d", "d_proj"):
            if getattr(self, key) < 1:
                raise ConfigError(key, "must be >= 1")
        if self.n_slides < 0:
            raise ConfigError("n_slides", "must be >= 0")
        if self.warmup_steps < 0 or self.max_steps < 0 or self.epochs < 0:
            raise ConfigError("warmup_steps", "step counts must be non-negative")
        if self.class_design not in ("paired", "factorial"):
            raise ConfigError("class_design", f"expected paired or factorial, got {self.class_design!r}")
        if self.eval_mode not in ("guided", "classical"):
            raise ConfigError("eval_mode", f"expected guided or classical, got {self.eval_mode!r}")

    def flags(self) -> LossFlags:
        return LossFlags(
            cvta=self.enable_cvta,
            mrtva=self.enable_mrtva,
            hierarchical=self.enable_parent_child,
            k_o=self.k_o,
            mask_rate=self.mask_rate,
        )

    def model_config(self, vocab_size: int) -> M.ModelConfig:
        return M.ModelConfig(
            vocab_size=vocab_size,
            d=self.d,
            d_proj=self.d_proj,
            vis_hidden=self.vis_hidden,
            mlp_hidden=self.mlp_hidden,
            n_blocks=self.n_blocks,
            max_caption=self.max_caption,
            tau_init=self.tau_init,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["resolution_subset"] = list(self.resolution_subset)
        return d

    def hash(self) -> str:
        return config_hash(json.dumps(self.to_dict(), sort_keys=True))

    def replace(self, **kw) -> TrainConfig:
        return dataclasses.replace(self, **kw)


# Presets are override maps on top of the defaults. "benchmark" is the desk-scale
# synthetic benchmark; "batch32" is the alternative batch size.
PRESETS: dict[str, dict] = {
    "default": {},
    "batch32": {"batch_size": 32},
    "smoke": {
        "n_classes": 2,
        "n_slides": 16,
        "max_steps": 100,
        "batch_size": 4,
        "warmup_steps": 10,
        "lr_peak": 2e-3,
    },
    "benchmark": {
        "n_slides": 200,
        "batch_size": 8,
        "max_steps": 150,
        "warmup_steps": 15,
        "lr_peak": 2e-3,
    },
}


def _coerce(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {type(default).__name__}") from None


def parse_overrides(pairs: dict[str, str]) -> dict:
    defaults = TrainConfig()
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    out = {}
    for key, raw in pairs.items():
        if key not in known:
            raise ConfigError(key, "unknown key")
        out[key] = _coerce(key, raw, getattr(defaults, key))
    return out


def parse_config_text(text: str) -> TrainConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment; ``preset`` picks a base."""
    pairs: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(line, f"line {n} is not key=value")
        key = key.strip()
        if key in pairs:
            raise ConfigError(key, "given twice")
        pairs[key] = value.strip()
    preset = pairs.pop("preset", "default")
    if preset not in PRESETS:
        raise ConfigError("preset", f"unknown preset {preset!r}")
    return TrainConfig(**{**PRESETS[preset], **parse_overrides(pairs)})


def load_config(path) -> TrainConfig:
    return parse_config_text(Path(path).read_text())


def config_text(cfg: TrainConfig) -> str:
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ",".join(map(str, v))
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


# -- schedule -----------------------------------------------------------------------------
def lr_schedule(step: int, cfg: TrainConfig, total_steps: int) -> float:
    """Linear warmup to ``lr_peak`` then cosine decay to 0 at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    w = cfg.warmup_steps
    if step < w:
        return cfg.lr_peak * step / w
    if total_steps <= w:
        return cfg.lr_peak if step <= w else 0.0
    frac = min(1.0, (step - w) / (total_steps - w))
    return 0.5 * cfg.lr_peak * (1.0 + math.cos(math.pi * frac))


def steps_per_epoch(cfg: TrainConfig, n_anchors: int) -> int:
    return math.ceil(n_anchors / cfg.batch_size)


def total_steps(cfg: TrainConfig, n_anchors: int) -> int:
    return cfg.max_steps or cfg.epochs * steps_per_epoch(cfg, n_anchors)


# -- batches -------------------------------------------------------------------------------
@dataclass
class BagView:
    """Row selection for a resolution subset."""

    levels: tuple[int, ...]
    rows: np.ndarray
    edges: np.ndarray

    @classmethod
    def for_levels(cls, levels, hierarchical: bool = True) -> BagView:
        levels = tuple(sorted(levels))
        anchor_rows = [bag_row(p) for p in bag_members(_ANCHOR) if p.level in levels]
        if len(levels) > 1:
            edges = np.asarray(bag_edges(levels, hierarchical), dtype=np.int64)
        else:
            edges = np.zeros((0, 2), np.int64)
        return cls(levels, np.asarray(anchor_rows), edges)


_ANCHOR = PatchId(0, 0, 5)


def epoch_order(cfg: TrainConfig, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([cfg.seed, STREAM_ORDER, epoch]).permutation(n)


def batch_indices(cfg: TrainConfig, step: int, n: int) -> np.ndarray:
    spe = steps_per_epoch(cfg, n)
    epoch, k = divmod(step, spe)
    order = epoch_order(cfg, epoch, n)
    return order[k * cfg.batch_size : (k + 1) * cfg.batch_size]


def make_batch(ds: Dataset, idx: np.ndarray, cfg: TrainConfig, step: int, view: BagView | None = None) -> Batch:
    view = view or BagView.for_levels(cfg.resolution_subset, cfg.enable_parent_child)
    if cfg.enable_mrtva and len(view.edges) == 0:
        raise ConfigError("resolution_subset", "cross-resolution alignment needs at least two levels")
    recs = [ds.records[i] for i in idx]
    pooled = np.concatenate([r.pooled[view.rows] for r in recs])
    caps = [[r.captions[j] for j in view.rows] for r in recs]
    keywords = [np.asarray(dedup(c), np.int64) for c in caps]
    for k, r in zip(keywords, recs):
        if k.size == 0:
            raise ValueError(f"empty text bag for anchor {r.anchor}")
    rng = np.random.default_rng([cfg.seed, STREAM_NEG, step])
    n = len(ds.records)
    neg = []
    for i in idx:
        j = int(rng.integers(n - 1)) if n > 1 else 0
        if n > 1 and j >= i:
            j += 1
        neg += [ds.records[j].captions[r] for r in view.rows]
    tokens, lengths = pad_captions([c for cs in caps for c in cs], cfg.max_caption)
    neg_tokens, neg_lengths = pad_captions(neg, cfg.max_caption)
    return Batch(
        pooled=pooled,
        bag_size=len(view.rows),
        keywords=keywords,
        captions=tokens,
        lengths=lengths,
        neg_captions=neg_tokens,
        neg_lengths=neg_lengths,
        edges=view.edges,
        mask_rng_seed=(cfg.seed, STREAM_MASK, step),
        prefix_rng_seed=(cfg.seed, STREAM_PREFIX, step),
    )


def pad_captions(caps, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """(N, max_len) token matrix padded with -1, and the clipped lengths."""
    tokens = np.full((len(caps), max_len), -1, np.int64)
    lengths = np.array([min(len(c), max_len) for c in caps], np.int64)
    for i, c in enumerate(caps):
        tokens[i, : lengths[i]] = c[: lengths[i]]
    return tokens, lengths


# -- state and checkpoints ------------------------------------------------------------------
CKPT_FORMAT = 1


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    opt: ad.OptState
    queue: FeatureQueue
    step: int
    config: TrainConfig
    model_cfg: M.ModelConfig


def init_state(cfg: TrainConfig, vocab_size: int) -> TrainState:
    mcfg = cfg.model_config(vocab_size)
    params = M.init_params(mcfg, seed=cfg.seed)
    opt = ad.OptState(lr=cfg.lr_peak, weight_decay=cfg.weight_decay, beta1=cfg.beta1, beta2=cfg.beta2)
    return TrainState(params, opt, FeatureQueue(cfg.queue_capacity, mcfg.d), 0, cfg, mcfg)


def checkpoint_save(state: TrainState, path) -> Path:
    tensors = {f"param.{k}": v for k, v in state.params.items()}
    tensors.update({f"adam_m.{k}": v for k, v in state.opt.first_moment.items()})
    tensors.update({f"adam_v.{k}": v for k, v in state.opt.second_moment.items()})
    tensors.update(state.queue.state())
    meta = {
        "format": str(CKPT_FORMAT),
        "step": str(state.step),
        "opt_step": str(state.opt.step),
        "config_hash": state.config.hash(),
        "config": json.dumps(state.config.to_dict(), sort_keys=True),
        "model_config": M.model_config_meta(state.model_cfg),
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    M.write_tensors(tmp, tensors, meta)
    tmp.replace(path)
    return path


def checkpoint_load(path, expect: TrainConfig | None = None) -> TrainState:
    tensors, meta = M.read_tensors(path)
    if meta.get("format") != str(CKPT_FORMAT):
        raise M.CheckpointError(f"{path}: checkpoint format {meta.get('format')} != {CKPT_FORMAT}")
    cfg_dict = json.loads(meta["config"])
    cfg = TrainConfig(**cfg_dict)
    if cfg.hash() != meta["config_hash"]:
        raise M.CheckpointError(f"{path}: stored config hash {meta['config_hash']} != recomputed {cfg.hash()}")
    if expect is not None and expect.hash() != meta["config_hash"]:
        raise M.CheckpointError(f"{path}: config hash mismatch: checkpoint {meta['config_hash']} vs requested {expect.hash()}")
    mcfg = M.model_config_from_meta(meta)
    part = lambda prefix: {k[len(prefix) :]: v for k, v in tensors.items() if k.startswith(prefix)}
    opt = ad.OptState(lr=cfg.lr_peak, weight_decay=cfg.weight_decay, beta1=cfg.beta1, beta2=cfg.beta2)
    opt.step = int(meta["opt_step"])
    opt.first_moment = part("adam_m.")
    opt.second_moment = part("adam_v.")
    queue = FeatureQueue(cfg.queue_capacity, mcfg.d)
    queue.load(tensors)
    return TrainState(part("param."), opt, queue, int(meta["step"]), cfg, mcfg)


# -- loop --------------------------------------------------------------------------------
@dataclass
class RunLog:
    records: list[dict] = field(default_factory=list)
    config_hash: str = ""
    wall_time: float = 0.0
    checkpoint: str | None = None

    def lines(self) -> list[str]:
        return [" ".join(_fmt(r[k]) for k in LOG_FIELDS) for r in self.records]

    def write(self, path) -> None:
        Path(path).write_text("".join(line + "\n" for line in self.lines()))


def _fmt(x) -> str:
    return str(x) if isinstance(x, int) else f"{x:.9g}"


def read_log(path) -> list[dict]:
    out = []
    for line in Path(path).read_text().splitlines():
        vals = line.split()
        rec = {k: float(v) for k, v in zip(LOG_FIELDS, vals)}
        rec["step"] = int(vals[0])
        out.append(rec)
    return out


def train_step(state: TrainState, ds: Dataset, view: BagView, n_total: int) -> dict:
    cfg = state.config
    step = state.step
    idx = batch_indices(cfg, step, len(ds.records))
    batch = make_batch(ds, idx, cfg, step, view)
    lr = lr_schedule(step, cfg, n_total)
    leaves = M.as_leaves(state.params)
    out = total_loss(leaves, batch, cfg.flags(), state.queue)
    values = out.breakdown.as_dict()
    if not all(math.isfinite(v) for v in values.values()):
        raise TrainingDiverged(step, out.breakdown)
    names = sorted(leaves)
    grads = dict(zip(names, ad.grad(out.total, [leaves[k] for k in names])))
    ad.adamw_step(state.params, grads, state.opt, lr=lr, no_decay=M.NO_DECAY)
    if out.itc_image is not None:
        state.queue.enqueue(out.itc_image, out.itc_text)
    state.step += 1
    return {"step": step, **values, "lr": lr}


def train(
    cfg: TrainConfig,
    ds: Dataset,
    state: TrainState | None = None,
    stop_step: int | None = None,
    checkpoint: str | Path | None = None,
    log_path: str | Path | None = None,
) -> tuple[TrainState, RunLog]:
    """Run optimisation steps until ``stop_step`` (default: the schedule's end).

    Pass a loaded ``state`` to resume; its config must match ``cfg``.
    """
    if not ds.records:
        raise ValueError("train: empty dataset")
    if state is None:
        state = init_state(cfg, len(ds.vocab))
    elif state.config.hash() != cfg.hash():
        raise M.CheckpointError(f"resume config hash {state.config.hash()} != {cfg.hash()}")
    n_total = total_steps(cfg, len(ds.records))
    stop = n_total if stop_step is None else stop_step
    view = BagView.for_levels(cfg.resolution_subset, cfg.enable_parent_child)
    runlog = RunLog(config_hash=cfg.hash())
    t0 = time.perf_counter()
    logf = open(log_path, "a") if log_path else None
    try:
        while state.step < stop:
            rec = train_step(state, ds, view, n_total)
            runlog.records.append(rec)
            if logf:
                logf.write(" ".join(_fmt(rec[k]) for k in LOG_FIELDS) + "\n")
            if rec["step"] % 50 == 0:
                log.info("step %d total %.4f lr %.2e", rec["step"], rec["total"], rec["lr"])
    finally:
        if logf:
            logf.close()
    runlog.wall_time = time.perf_counter() - t0
    if checkpoint:
        runlog.checkpoint = str(checkpoint_save(state, checkpoint))
    return state, runlog


def data_from_config(cfg: TrainConfig) -> Dataset:
    """Generate the synthetic dataset described by the data keys of ``cfg``."""
    from .bags import CaptionConfig
    from .dataset import build_dataset
    from .pyramid import GenConfig

    if cfg.n_slides < 1:
        raise ConfigError("n_slides", "must be >= 1 to generate data")
    if cfg.class_design == "paired":
        n_layouts = n_textures = cfg.n_classes
    else:
        n_layouts = 2 if cfg.n_classes % 2 == 0 else cfg.n_classes
        n_textures = cfg.n_classes // n_layouts
    try:
        gen = GenConfig(
            n_classes=cfg.n_classes,
            n_layouts=n_layouts,
            n_textures=n_textures,
            paired=cfg.class_design == "paired",
            slide_side=cfg.slide_side,
            texture_amplitude=cfg.texture_amplitude,
            layout_contrast=cfg.layout_contrast,
        )
    except ValueError as exc:
        raise ConfigError("n_classes", str(exc)) from None
    caps = CaptionConfig(n_signal=cfg.n_signal, noise_rate=cfg.noise_rate)
    return build_dataset(cfg.n_slides, cfg.data_seed, gen, caps, cfg.anchors_per_slide, cfg.min_coverage)
